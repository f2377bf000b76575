use g3d_core::checks::{gradcheck_suite, GradScope};
use g3d_core::toy::{probe_decoupling, synth_generate, train_toy, ToyConfig};

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let (mut va, mut vb) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    cov / (va * vb).sqrt()
}

#[test]
fn latent_factors_are_uncorrelated() {
    let samples = synth_generate(10_000, 3, 4, 8, 17).unwrap();
    for i in 0..3 {
        let a: Vec<f64> = samples.iter().map(|s| s.z2d[i]).collect();
        for j in 0..4 {
            let b: Vec<f64> = samples.iter().map(|s| s.z3d[j]).collect();
            let r = pearson(&a, &b);
            assert!(r.abs() < 0.05, "z2d[{i}] vs z3d[{j}]: {r}");
        }
    }
}

#[test]
fn short_training_lowers_the_loss() {
    let cfg = ToyConfig {
        train_samples: 256,
        eval_samples: 64,
        steps: 60,
        ..ToyConfig::tiny()
    };
    let a = train_toy(&cfg, 3).unwrap();
    assert!(
        a.final_loss < a.initial_loss,
        "{} -> {}",
        a.initial_loss,
        a.final_loss
    );
    assert!(a.trace.len() >= 2 && a.trace.len() <= cfg.steps);
    let b = train_toy(&cfg, 3).unwrap();
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.trained, b.trained);

    let probe = a.world.generate(200, 9).unwrap();
    let r = probe_decoupling(&a.trained, &probe).unwrap();
    for v in [r.matched_2d, r.matched_3d, r.crossed_2d, r.crossed_3d] {
        assert!(v.is_finite() && v <= 1.0);
    }
}

#[test]
fn every_gradient_check_passes() {
    for seed in [0, 1, 7] {
        let report = gradcheck_suite(GradScope::All, seed).unwrap();
        assert!(report.len() > 30);
        for c in &report {
            assert!(c.passed(), "seed {seed}: {c:?}");
        }
    }
    assert_eq!(
        gradcheck_suite(GradScope::D2m, 7).unwrap(),
        gradcheck_suite(GradScope::D2m, 7).unwrap()
    );
}
