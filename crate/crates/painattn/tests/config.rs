use std::time::Duration;

use painattn::config::{flag_name, parse_kv, parse_sections, ModelPreset, RunConfig};
use painattn::manifest::Manifest;
use painattn::parallel::loocv_parallel;
use painattn::AppError;
use painattn_core::model::ModelConfig;
use painattn_core::synth::{generate_cohort, ProtocolConfig, TempMode};
use painattn_core::train::{build_task_dataset, loocv, TaskSpec, TrainConfig};

#[test]
fn kv_parsing() {
    let m = parse_kv("# comment\n\n a = 1 \nb=x=y\n").unwrap();
    assert_eq!(m.len(), 2);
    assert_eq!(m["a"], "1");
    assert_eq!(m["b"], "x=y");
    assert_eq!(parse_kv("a=1\na=2\n").unwrap_err().0, 2);
    assert_eq!(parse_kv("a=1\nnot a pair\n").unwrap_err().0, 2);
    assert_eq!(parse_kv("=1\n").unwrap_err().0, 1);
    assert_eq!(parse_kv("a=1\n[s]\nb=2\n").unwrap_err().0, 2);
}

#[test]
fn sections_only_constrain_config() {
    let s = parse_sections("x=1\n[config]\ny=2\n[pooled]\nfree text here\nk=v\n").unwrap();
    assert_eq!(s[""]["x"], "1");
    assert_eq!(s["config"]["y"], "2");
    assert_eq!(s["pooled"]["k"], "v");
    assert!(parse_sections("[config]\nfree text\n").is_err());
}

#[test]
fn every_key_round_trips() {
    let mut cfg = RunConfig::default();
    for (k, v) in [
        ("data", "a.bin"),
        ("out", "dir"),
        ("checkpoint", "m.ckpt"),
        ("task", "pain-any"),
        ("seed", "99"),
        ("epochs", "3"),
        ("lr", "0.0005"),
        ("weight_decay", "0"),
        ("batch_size", "16"),
        ("class_weighting", "true"),
        ("model", "mini"),
        ("heads", "2"),
        ("blocks", "3"),
        ("jobs", "4"),
        ("temp_mode", "endpoint"),
        ("noise", "0.25"),
        ("gain", "1.5"),
        ("subjects", "9"),
        ("sample_rate", "256"),
    ] {
        cfg.set(k, v).unwrap();
    }
    assert_eq!(cfg.to_kv().len(), RunConfig::KEYS.len());
    assert_eq!(
        cfg.to_kv().iter().map(|(k, _)| *k).collect::<Vec<_>>(),
        RunConfig::KEYS
    );
    let mut back = RunConfig::default();
    for (k, v) in cfg.to_kv() {
        back.set(k, &v).unwrap();
    }
    assert_eq!(back, cfg);
    assert_eq!(cfg.model, ModelPreset::Mini);
    assert_eq!(cfg.temp_mode, TempMode::Endpoint);

    let m = cfg.model_config(2);
    assert_eq!((m.encoder.heads, m.encoder.blocks), (2, 3));
    assert_eq!(m.mscn, ModelConfig::mini(2).mscn);
    let t = cfg.train_config();
    assert_eq!(
        (
            t.lr,
            t.weight_decay,
            t.batch_size,
            t.epochs,
            t.seed,
            t.class_weighting
        ),
        (0.0005, 0.0, 16, 3, 99, true)
    );
    assert_eq!(cfg.protocol().sample_rate, 256);
}

#[test]
fn defaults_follow_the_training_defaults() {
    let cfg = RunConfig::default();
    let t = cfg.train_config();
    assert_eq!(t, TrainConfig::default());
    assert_eq!((t.lr, t.batch_size, t.epochs), (1e-3, 128, 100));
    assert_eq!(cfg.model_config(5), ModelConfig::reference(5));
    assert_eq!(cfg.task_spec(), TaskSpec::baseline_vs(4));
}

#[test]
fn bad_values_name_the_flag() {
    let mut cfg = RunConfig::default();
    for (k, v, needle) in [
        ("task", "t0t9", "unknown task"),
        ("seed", "-1", "unsigned"),
        ("lr", "fast", "number"),
        ("model", "huge", "reference or mini"),
        ("temp_mode", "linear", "verbatim or endpoint"),
        ("class_weighting", "yes", "true or false"),
        ("colour", "red", "unknown setting"),
    ] {
        match cfg.apply_flag(k, v) {
            Err(AppError::Usage(msg)) => {
                assert!(msg.starts_with(&flag_name(k)), "{msg}");
                assert!(msg.contains(needle), "{msg}");
            }
            other => panic!("{k}={v}: {other:?}"),
        }
    }
    assert_eq!(flag_name("batch_size"), "--batch-size");

    for (k, v) in [
        ("subjects", "0"),
        ("lr", "0"),
        ("lr", "NaN"),
        ("batch_size", "0"),
        ("jobs", "0"),
        ("heads", "0"),
        ("noise", "-1"),
        ("gain", "0"),
        ("weight_decay", "-0.1"),
    ] {
        let mut cfg = RunConfig::default();
        cfg.set(k, v).unwrap();
        let err = cfg.validate().unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(err.to_string().contains(&flag_name(k)), "{err}");
    }
}

#[test]
fn files_apply_config_sections_and_report_lines() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.txt");
    std::fs::write(
        &path,
        "seed=4\n[config]\nepochs=7\n[pooled]\nacc=0.5\nclass0.precision=1 class0.recall=1\n",
    )
    .unwrap();
    let mut cfg = RunConfig::default();
    cfg.apply_file(&path).unwrap();
    assert_eq!((cfg.seed, cfg.epochs), (4, 7));

    std::fs::write(&path, "seed=4\nepochs=many\n").unwrap();
    let msg = RunConfig::default()
        .apply_file(&path)
        .unwrap_err()
        .to_string();
    assert!(
        msg.contains("run.txt line 2") && msg.contains("epochs"),
        "{msg}"
    );

    let missing = dir.path().join("nope.txt");
    let err = RunConfig::default().apply_file(&missing).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("nope.txt"));
}

#[test]
fn manifest_feeds_back_as_config() {
    let mut cfg = RunConfig::default();
    cfg.set("data", "cohort.bin").unwrap();
    cfg.set("epochs", "12").unwrap();
    cfg.set("model", "mini").unwrap();
    let mut m = Manifest::new("loocv", &cfg);
    m.section("folds", [("1.accuracy", "0.5")]);
    m.block(
        "pooled",
        "classes=2\nclass0.precision=1.0 class0.recall=1.0\n",
    );
    let text = m.finish(Duration::from_millis(1500));
    assert!(text.contains("[run]\ncommand=loocv\n"));
    assert!(text.ends_with("[timing]\nwall_time_secs=1.500\n"));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("manifest.txt");
    std::fs::write(&path, &text).unwrap();
    let mut back = RunConfig::default();
    back.apply_file(&path).unwrap();
    assert_eq!(back, cfg);
}

#[test]
fn exit_codes() {
    use painattn_core::Error as E;
    assert_eq!(AppError::Usage("x".into()).exit_code(), 1);
    assert_eq!(AppError::core("c", E::Config("x".into())).exit_code(), 1);
    assert_eq!(AppError::core("c", E::Numeric("x".into())).exit_code(), 3);
    assert_eq!(AppError::core("c", E::Invariant("x".into())).exit_code(), 3);
    assert_eq!(AppError::GradCheck("x".into()).exit_code(), 4);
    let io = AppError::io(std::path::Path::new("f.bin"), std::io::Error::other("boom"));
    assert_eq!(io.exit_code(), 2);
    assert_eq!(io.to_string(), "f.bin: boom");
}

#[test]
fn fold_parallelism_does_not_change_results() {
    let recs = generate_cohort(&ProtocolConfig::default(), 11, 3, 0.05, 1.0).unwrap();
    let data = build_task_dataset(&recs, TaskSpec::baseline_vs(4)).unwrap();
    let model = ModelConfig::mini(2);
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 32,
        seed: 11,
        ..TrainConfig::default()
    };
    let serial = loocv(&data, &model, &cfg).unwrap();
    for jobs in [1, 2, 3, 8] {
        assert_eq!(
            loocv_parallel(&data, &model, &cfg, jobs).unwrap(),
            serial,
            "jobs {jobs}"
        );
    }
}
