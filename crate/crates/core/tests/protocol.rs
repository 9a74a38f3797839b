use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use realmerge_core::toy::{gen_toy_data, ToyDataset};
use realmerge_core::{
    incremental_remerge, run_protocol, with_threads, write_protocol_outputs, MergeConfig, Method,
    ProtocolConfig, ProtocolResult,
};

fn golden_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/protocol_table.txt")
}

fn small() -> ProtocolConfig {
    ProtocolConfig {
        n_seen: 3,
        n_unseen: 1,
        n_train: 60,
        n_test: 60,
        ..ProtocolConfig::default()
    }
}

fn archive_bytes(r: &ProtocolResult) -> Vec<Vec<u8>> {
    let mut out = vec![r.base.to_bytes().unwrap()];
    out.extend(
        r.specialists
            .iter()
            .map(|s| s.checkpoint.to_bytes().unwrap()),
    );
    out.extend(r.merged.iter().map(|m| m.archive.to_bytes().unwrap()));
    out
}

#[test]
fn single_family_average_loses_nothing() {
    let cfg = ProtocolConfig {
        n_seen: 1,
        methods: vec![MergeConfig::new(Method::Wa)],
        ..small()
    };
    let r = run_protocol(&cfg).unwrap();
    let wa = r.report("wa").unwrap();
    assert!(
        wa.drop_per_task.values().all(|d| *d == 0.0),
        "{:?}",
        wa.drop_per_task
    );
    assert_eq!(wa.gain_unseen, Some(0.0));
}

#[test]
fn default_training_loss_never_rises() {
    let r = run_protocol(&ProtocolConfig::default()).unwrap();
    for s in &r.specialists {
        assert!(
            s.losses.windows(2).all(|w| w[1] <= w[0]),
            "{} loss rose",
            s.family_id
        );
        assert!(*s.losses.last().unwrap() < r.config.train.loss_threshold);
    }
}

#[test]
fn fake_mean_shift_matches_the_cue() {
    let fams = ProtocolConfig::default().families().unwrap();
    let f = &fams.seen[0];
    let n = 20_000;
    let ds: ToyDataset = gen_toy_data(f, n, 77).unwrap();
    let mean = |xs: Vec<Vec<f64>>| -> Vec<f64> {
        let mut m = vec![0.0; f.cue.len()];
        for x in &xs {
            m.iter_mut().zip(x).for_each(|(a, b)| *a += b / n as f64);
        }
        m
    };
    let (real, fake) = (mean(ds.class(0)), mean(ds.class(1)));
    let se = f.noise_scale * (2.0 / n as f64).sqrt();
    for k in 0..f.cue.len() {
        let want = f.cue_strength * f.cue[k];
        assert!(
            (fake[k] - real[k] - want).abs() <= 5.0 * se,
            "coordinate {k}"
        );
        assert!((real[k] - f.real_mean[k]).abs() <= 5.0 * f.noise_scale / (n as f64).sqrt());
    }
}

#[test]
fn incremental_run_leaves_existing_outputs_alone() {
    let dir = tempfile::tempdir().unwrap();
    let r = run_protocol(&small()).unwrap();
    let written = write_protocol_outputs(&r, dir.path()).unwrap();
    let before: BTreeMap<PathBuf, (Vec<u8>, std::time::SystemTime)> = written
        .iter()
        .map(|p| {
            (
                p.clone(),
                (
                    std::fs::read(p).unwrap(),
                    std::fs::metadata(p).unwrap().modified().unwrap(),
                ),
            )
        })
        .collect();
    let (outcome, new_files) = incremental_remerge(dir.path()).unwrap();
    for (p, (bytes, mtime)) in &before {
        assert_eq!(&std::fs::read(p).unwrap(), bytes, "{} changed", p.display());
        assert_eq!(std::fs::metadata(p).unwrap().modified().unwrap(), *mtime);
    }
    assert!(new_files
        .iter()
        .all(|p| !before.contains_key(p) && p.exists()));
    assert_eq!(
        outcome.merged[0].report.auc_per_task.len(),
        r.config.n_seen + 1
    );
    assert!(dir.path().join("table-n4.txt").exists());
    // The post-hoc specialist exists now, so a second pass must refuse.
    assert!(incremental_remerge(dir.path()).is_err());
}

#[test]
fn in_memory_incremental_matches_the_directory_route() {
    let cfg = ProtocolConfig {
        incremental: true,
        ..small()
    };
    let r = run_protocol(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_protocol_outputs(&run_protocol(&small()).unwrap(), dir.path()).unwrap();
    let (outcome, _) = incremental_remerge(dir.path()).unwrap();
    assert_eq!(r.incremental.unwrap().table, outcome.table);
}

#[test]
fn runs_are_reproducible_across_thread_counts() {
    let cfg = small();
    let one = with_threads(Some(1), || run_protocol(&cfg))
        .unwrap()
        .unwrap();
    let again = with_threads(Some(1), || run_protocol(&cfg))
        .unwrap()
        .unwrap();
    let four = with_threads(Some(4), || run_protocol(&cfg))
        .unwrap()
        .unwrap();
    assert_eq!(archive_bytes(&one), archive_bytes(&again));
    assert_eq!(one.table, again.table);
    for (a, b) in one.reports().iter().zip(four.reports()) {
        for (x, y) in a.auc_per_task.values().zip(b.auc_per_task.values()) {
            assert!((x - y).abs() <= 1e-6 * x.abs().max(1e-12));
        }
    }
    assert!(with_threads(Some(0), || ()).is_err());
}

#[test]
fn golden_table_matches() {
    let r = run_protocol(&ProtocolConfig::default()).unwrap();
    if std::env::var_os("REALMERGE_BLESS").is_some() {
        std::fs::create_dir_all(golden_path().parent().unwrap()).unwrap();
        std::fs::write(golden_path(), &r.table).unwrap();
    }
    let golden = std::fs::read_to_string(golden_path())
        .expect("golden table missing; rerun with REALMERGE_BLESS=1");
    assert_eq!(r.table, golden);
}
