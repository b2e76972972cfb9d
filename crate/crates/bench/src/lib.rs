//! Benchmark helpers: canonical systems and datasets shared by the
//! criterion targets.

use merit_core::{MomentSystem, Regime, SimConfig, SimDraw, TestKind};

pub fn null_draw(n: usize, tau: f64) -> SimDraw {
    let config = SimConfig {
        n,
        tau,
        psi0: 0.0,
        regime: Regime::BothCorrect,
        n_reps: 1,
        seed: 7001,
        tests: vec![TestKind::Dr],
        alpha_level: 0.05,
    };
    merit_core::simlab::generate(&config, 0)
}

pub fn system(test: TestKind) -> MomentSystem {
    merit_core::simlab::robust_system(test, Regime::BothCorrect).unwrap()
}
