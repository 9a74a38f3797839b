use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use realmerge_core::linalg::{dot, norm};
use realmerge_core::theory::{
    build_linear_model, delta_rf, derive_seed, fd_response_error, gen_synthetic_tasks,
    head_sufficiency_check, linearization_remainder, r2_check, r2_trials, sample_features,
    sample_task_inputs, HeadModel, FD_TOLERANCE,
};
use realmerge_core::{run_theory, LinearModelConfig, SyntheticTaskSpec, TheoryConfig};

fn close(got: f64, want: f64, what: &str) {
    assert!(
        (got - want).abs() <= 1e-9,
        "{what}: got {got:.17}, frozen {want:.17}"
    );
}

#[test]
fn default_run_matches_frozen_values() {
    let r = run_theory(&TheoryConfig::default()).unwrap().report;
    close(r.sin_recovery, 0.11025142036455511, "sin_recovery");
    close(r.gamma, 0.15924573771609907, "gamma");
    close(r.a_c_norm, 0.6751015191745463, "a_c_norm");
    close(r.z_c_opnorm, 0.09273878346623558, "z_c_opnorm");
    close(r.kappa_u, 0.4006807645956373, "kappa_u");
    close(r.tail_ratio, 0.14443360241035944, "tail_ratio");
    close(r.eps_prime, 0.06394624951333955, "eps_prime");
    close(r.cone_eps, 0.027807170928889412, "cone_eps");
    close(r.cone_bound, 0.028602526265759435, "cone_bound");
    close(r.max_cone_sin, 0.027796426368455474, "max_cone_sin");
    assert!(r.verdicts.all(), "{}", r.render());
}

#[test]
fn off_axis_ratio_shrinks_with_alpha() {
    let frozen = [
        (0.6, 0.07673549941600742),
        (0.5, 0.06394624951333955),
        (0.4, 0.05115699961067161),
    ];
    let mut prev = f64::INFINITY;
    for (alpha, want) in frozen {
        let mut cfg = TheoryConfig::default();
        cfg.merge.alpha = alpha;
        let r = run_theory(&cfg).unwrap().report;
        close(r.eps_prime, want, &format!("eps_prime at alpha {alpha}"));
        assert!(r.eps_prime < 1.0);
        assert!(r.eps_prime <= prev);
        prev = r.eps_prime;
    }
}

#[test]
fn cone_bound_holds_on_default_run() {
    let run = run_theory(&TheoryConfig::default()).unwrap();
    assert!(run.cone.cone_eps < 1.0);
    assert!(run.cone.max_cone_sin <= run.cone.cone_bound + 1e-9);
    assert!(run
        .cone
        .sines
        .iter()
        .all(|s| *s <= run.cone.cone_bound + 1e-9));
}

#[test]
fn recovery_bound_over_seeded_trials() {
    for dim in [64, 200] {
        let spec = SyntheticTaskSpec {
            n: 8,
            dim,
            sigma_a: 1.0,
            sigma_z: 0.05,
            ..SyntheticTaskSpec::default()
        };
        let reports = r2_trials(&spec, 100).unwrap();
        let gapped: Vec<_> = reports.iter().filter(|r| r.gamma < 1.0).collect();
        assert!(
            gapped.len() >= 50,
            "only {} trials had a spectral gap",
            gapped.len()
        );
        for r in gapped {
            assert!(
                r.sin_recovery <= r.gamma,
                "sin {} above gamma {}",
                r.sin_recovery,
                r.gamma
            );
        }
    }
}

#[test]
fn noiseless_tasks_recover_the_axis() {
    let spec = SyntheticTaskSpec {
        sigma_z: 0.0,
        ..SyntheticTaskSpec::default()
    };
    let (taus, vstar) = gen_synthetic_tasks(&spec).unwrap();
    let r = r2_check(&taus, &vstar).unwrap();
    assert!(r.sin_recovery < 1e-12);
    assert!(r.z_c_opnorm <= 1e-14 * r.a_c_norm);
    assert!(r.gamma <= 1e-12);
}

#[test]
fn linear_model_has_no_remainder() {
    let model = build_linear_model(&LinearModelConfig::default()).unwrap();
    assert!(fd_response_error(&model).unwrap() <= FD_TOLERANCE);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let scale = rng.random_range(0.01..10.0);
        let d: Vec<f64> = (0..model.dim())
            .map(|_| scale * rng.random_range(-1.0..1.0))
            .collect();
        let rem = linearization_remainder(&model, &d).unwrap();
        assert!(rem <= 1e-12, "remainder {rem:e} at scale {scale}");
    }
}

#[test]
fn coefficient_second_moment_matches_sampling() {
    // With no noise `⟨τ_i, v*⟩ = a_i` exactly, so the empirical second
    // moment must sit near `μ² + σ_a²`.
    let (mu, sigma) = (0.7, 0.5);
    let spec = SyntheticTaskSpec {
        n: 4000,
        dim: 16,
        sigma_a: sigma,
        sigma_z: 0.0,
        coef_mean: mu,
        ..SyntheticTaskSpec::default()
    };
    let (taus, vstar) = gen_synthetic_tasks(&spec).unwrap();
    let sq: Vec<f64> = taus
        .iter()
        .map(|t| dot(t.values(), &vstar).powi(2))
        .collect();
    let n = sq.len() as f64;
    let mean = sq.iter().sum::<f64>() / n;
    let var = sq.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let want = mu * mu + sigma * sigma;
    assert!(
        (mean - want).abs() <= 5.0 * (var / n).sqrt(),
        "mean {mean} want {want}"
    );
}

#[test]
fn class_mean_gap_matches_sampled_features() {
    let model = build_linear_model(&LinearModelConfig::default()).unwrap();
    let n = 4000;
    let gaps = delta_rf(&model, &model.theta0).unwrap();
    for task in [0, 3, 7] {
        let (real, fake) = sample_task_inputs(&model, task, n, derive_seed(99, task as u64));
        let mean_feat = |xs: &[Vec<f64>]| -> Vec<f64> {
            let mut acc = vec![0.0; model.feature_dim];
            for x in xs {
                let f = model.features(&model.theta0, x).unwrap();
                acc.iter_mut().zip(&f).for_each(|(a, b)| *a += b / n as f64);
            }
            acc
        };
        let (mr, mf) = (mean_feat(&real), mean_feat(&fake));
        for (k, row) in model.theta0.chunks(model.input_dim).enumerate() {
            let se = norm(row) * model.input_std * (2.0 / n as f64).sqrt();
            let err = (mf[k] - mr[k] - gaps[task][k]).abs();
            assert!(
                err <= 5.0 * se + 1e-12,
                "task {task} feature {k}: err {err}, se {se}"
            );
        }
    }
}

#[test]
fn averaged_head_keeps_every_auc() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(41, seed));
        let d = rng.random_range(2..12);
        let q: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let scales: Vec<f64> = (0..rng.random_range(2..7))
            .map(|_| rng.random_range(0.25..4.0))
            .collect();
        let heads = HeadModel::collinear(q.clone(), scales).unwrap();
        let shift: Vec<f64> = q.iter().map(|x| 0.8 * x).collect();
        let (features, labels) = sample_features(&shift, 150, seed);
        let r = head_sufficiency_check(&heads, &features, &labels, true).unwrap();
        assert!(r.auc_equal, "seed {seed}");
        assert!(r.auc_specialists.iter().all(|a| *a == r.auc_averaged));
    }
}

#[test]
fn harness_is_deterministic() {
    let a = run_theory(&TheoryConfig::default()).unwrap();
    let b = run_theory(&TheoryConfig::default()).unwrap();
    assert_eq!(a.report, b.report);
    assert_eq!(a.update.values(), b.update.values());
}
