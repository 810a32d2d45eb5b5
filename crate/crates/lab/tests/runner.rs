use std::fs;
use std::path::Path;

use curio_core::env::{EnvConfig, EnvKind};
use curio_core::pretrain::PretrainConfig;
use curio_core::trainer::MetricRow;
use curio_lab::config::RunConfig;
use curio_lab::csvio::{self, COMPARISON_COLUMNS, CORR_COLUMNS};
use curio_lab::diag::diagnose;
use curio_lab::pretrain::{pretrain_to, PretrainJob};
use curio_lab::runner::{compare, run_experiment, write_comparison, Manifest, TIMING_FILE};

fn tiny(algo: &str) -> RunConfig {
    let mut c = RunConfig::new(EnvKind::KeyDoor);
    for (k, v) in [("algo", algo), ("seeds", "0"), ("steps", "2048"), ("probe_size", "8")] {
        c.set(k, v).unwrap();
    }
    c
}

fn tiny_backbone(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("bb.ckpt");
    let job = PretrainJob {
        env: EnvConfig::key_door(),
        steps_per_env: 200,
        epochs: 1,
        seed: 0,
        config: PretrainConfig {
            num_envs: 2,
            ..PretrainConfig::default()
        },
    };
    pretrain_to(&job, &path).unwrap();
    path
}

#[test]
fn manifest_names_every_artifact() {
    let root = tempfile::tempdir().unwrap();
    let (dir, m) = run_experiment(&tiny("rnd"), root.path()).unwrap();
    assert_eq!(Manifest::load(&dir).unwrap(), m);
    for f in m.files() {
        assert!(dir.join(f).is_file(), "missing {f}");
    }
    assert!(dir.join(TIMING_FILE).is_file());
    let seed = &m.seeds[0];
    let rows = csvio::read_metrics(&dir.join(&seed.metrics)).unwrap();
    assert_eq!(rows.iter().map(|r| r.step).collect::<Vec<_>>(), vec![1024, 2048]);
    let corr = csvio::read_corr(&dir.join(seed.corr.as_ref().unwrap())).unwrap();
    assert_eq!(corr.len(), seed.pairwise.len());
    assert!(corr.iter().all(|c| c.embed_kind == "raw"));
    for p in &seed.pairwise {
        assert_eq!(csvio::read_pairwise(&dir.join(p)).unwrap().size(), 8);
    }
    let header = fs::read_to_string(dir.join(seed.corr.as_ref().unwrap())).unwrap();
    assert!(header.starts_with(&CORR_COLUMNS.join(",")));
}

#[test]
fn plain_runs_skip_curiosity_artifacts() {
    let root = tempfile::tempdir().unwrap();
    let (dir, m) = run_experiment(&tiny("none"), root.path()).unwrap();
    let seed = &m.seeds[0];
    assert!(seed.corr.is_none() && seed.pairwise.is_empty());
    assert!(!dir.join("seed_0").join(csvio::CORR_FILE).exists());
    let rows = csvio::read_metrics(&dir.join(&seed.metrics)).unwrap();
    assert!(rows.iter().all(|r: &MetricRow| r.intrinsic_raw_mean == 0.0
        && r.intrinsic_raw_std == 0.0
        && r.predictor_loss == 0.0));
}

#[test]
fn metrics_are_bitwise_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut cfg = tiny("rnd-lr");
    cfg.threaded = false;
    let (da, _) = run_experiment(&cfg, a.path()).unwrap();
    cfg.threaded = true;
    let (db, _) = run_experiment(&cfg, b.path()).unwrap();
    let read = |d: &Path| fs::read(d.join("seed_0").join(csvio::METRICS_FILE)).unwrap();
    assert_eq!(read(&da), read(&db));
}

#[test]
fn prend_runs_with_a_saved_backbone_and_compares() {
    let root = tempfile::tempdir().unwrap();
    let bb = tiny_backbone(root.path());
    let mut dirs = Vec::new();
    for algo in ["none", "rnd", "prend"] {
        let mut c = tiny(algo);
        c.backbone = Some(bb.clone());
        let (dir, m) = run_experiment(&c, root.path()).unwrap();
        assert!(m.backbone_digest.is_some());
        if algo != "none" {
            let corr = csvio::read_corr(&dir.join(m.seeds[0].corr.as_ref().unwrap())).unwrap();
            let kinds: Vec<&str> = corr.iter().map(|c| c.embed_kind.as_str()).collect();
            assert!(kinds.contains(&"raw") && kinds.contains(&"backbone"), "{kinds:?}");
        }
        let d = diagnose(&dir).unwrap();
        assert_eq!(d.algo, algo);
        dirs.push(dir);
    }
    let rows = compare(&dirs).unwrap();
    assert_eq!(rows.len(), 2 * 3);
    let out = root.path().join("cmp.csv");
    write_comparison(&out, &rows).unwrap();
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().next().unwrap(), COMPARISON_COLUMNS.join(","));
    assert_eq!(text.lines().count(), 7);

    let dup = compare(&[dirs[1].clone(), dirs[1].clone()]).unwrap_err();
    assert!(dup.to_string().contains("twice"), "{dup}");
}

#[test]
fn missing_backbone_fails_before_training() {
    let root = tempfile::tempdir().unwrap();
    let mut c = tiny("prend");
    c.backbone = Some(root.path().join("absent.ckpt"));
    assert!(run_experiment(&c, root.path()).is_err());
    assert_eq!(fs::read_dir(root.path()).unwrap().count(), 0);
}
