use std::fs;
use std::path::Path;

use svgpcr::cli::{self, run};

fn svgpcr(args: &[&str]) -> i32 {
    let mut argv = vec!["svgpcr"];
    argv.extend_from_slice(args);
    run(argv)
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).display().to_string()
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("config.toml");
    fs::write(&path, "minibatch_size = 100\nlearning_rate = 0.05\nepochs = 25\nnum_inducing = 15\neval_every = 5\n").unwrap();
    path.display().to_string()
}

#[test]
fn simulate_train_predict_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run_dir = tmp.path().join("run");
    let data_s = data.display().to_string();
    let run_s = run_dir.display().to_string();
    assert_eq!(
        svgpcr(&["simulate", "--out-dir", &data_s, "--num-instances", "600", "--num-test", "300", "--num-classes", "3", "--seed", "4"]),
        0
    );
    let config = write_config(tmp.path());
    assert_eq!(
        svgpcr(&[
            "train", "--features", &p(&data, cli::FEATURES_FILE), "--annotations", &p(&data, cli::ANNOTATIONS_FILE),
            "--config", &config, "--out-dir", &run_s,
        ]),
        0
    );
    assert_eq!(
        svgpcr(&["predict", "--checkpoint", &p(&run_dir, cli::CHECKPOINT_FILE), "--features", &p(&data, cli::TEST_FEATURES_FILE), "--out-dir", &run_s]),
        0
    );
    assert_eq!(
        svgpcr(&["evaluate", "--predictions", &p(&run_dir, cli::PREDICTIONS_FILE), "--truth", &p(&data, cli::TEST_TRUTH_FILE), "--out-dir", &run_s]),
        0
    );
    assert_eq!(svgpcr(&["inspect-annotators", "--checkpoint", &p(&run_dir, cli::CHECKPOINT_FILE), "--out-dir", &run_s]), 0);

    let metrics = fs::read_to_string(run_dir.join(cli::METRICS_FILE)).unwrap();
    let global = metrics.lines().find(|l| l.starts_with("global,")).unwrap();
    let accuracy: f64 = global.split(',').nth(2).unwrap().parse().unwrap();
    assert!(accuracy >= 0.95, "{metrics}");

    let log = fs::read_to_string(run_dir.join(cli::TRAINING_LOG_FILE)).unwrap();
    assert!(log.contains("# learning_rate = 0.05"));
    assert!(log.lines().any(|l| l.starts_with("step,epoch,batch_size")));
    let confusions = fs::read_to_string(run_dir.join(cli::ANNOTATOR_CONFUSIONS_FILE)).unwrap();
    assert_eq!(confusions.lines().count(), 1 + 5 * 9);
}

#[test]
fn repeated_runs_write_identical_files() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let data_s = data.display().to_string();
    assert_eq!(svgpcr(&["simulate", "--out-dir", &data_s, "--num-instances", "200", "--num-classes", "2", "--seed", "1"]), 0);
    let config = write_config(tmp.path());
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let out = tmp.path().join(name);
        let code = svgpcr(&[
            "train", "--features", &p(&data, cli::FEATURES_FILE), "--annotations", &p(&data, cli::ANNOTATIONS_FILE),
            "--config", &config, "--epochs", "3", "--out-dir", &out.display().to_string(),
        ]);
        assert_eq!(code, 0);
        outputs.push(out);
    }
    for file in [cli::CHECKPOINT_FILE, cli::TRAINING_LOG_FILE, cli::RESPONSIBILITIES_FILE] {
        assert_eq!(fs::read(outputs[0].join(file)).unwrap(), fs::read(outputs[1].join(file)).unwrap(), "{file}");
    }
}

#[test]
fn oversized_minibatch_is_rejected_without_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = tmp.path().join("out");
    assert_eq!(svgpcr(&["simulate", "--out-dir", &data.display().to_string(), "--num-instances", "50", "--seed", "2"]), 0);
    let code = svgpcr(&[
        "train", "--features", &p(&data, cli::FEATURES_FILE), "--annotations", &p(&data, cli::ANNOTATIONS_FILE),
        "--minibatch-size", "51", "--num-inducing", "5", "--out-dir", &out.display().to_string(),
    ]);
    assert_eq!(code, 1);
    assert!(!out.join(cli::CHECKPOINT_FILE).exists());
}

#[test]
fn predict_rejects_mismatched_dimension() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = tmp.path().join("out");
    assert_eq!(svgpcr(&["simulate", "--out-dir", &data.display().to_string(), "--num-instances", "60", "--num-classes", "2"]), 0);
    assert_eq!(
        svgpcr(&[
            "train", "--features", &p(&data, cli::FEATURES_FILE), "--annotations", &p(&data, cli::ANNOTATIONS_FILE),
            "--minibatch-size", "20", "--num-inducing", "5", "--epochs", "1", "--out-dir", &out.display().to_string(),
        ]),
        0
    );
    let wide = tmp.path().join("wide.csv");
    fs::write(&wide, "a,b,c\n1,2,3\n").unwrap();
    let ck = svgpcr::data_io::load_checkpoint(&out.join(cli::CHECKPOINT_FILE)).unwrap();
    let x = svgpcr::data_io::load_features(&wide, svgpcr::data_io::FeatureFormat::from_path(&wide)).unwrap();
    let err = ck.trainer.model.predict_proba(x.values()).unwrap_err().to_string();
    assert!(err.contains('3') && err.contains('2'), "{err}");
    let bad_out = tmp.path().join("bad");
    assert_eq!(
        svgpcr(&["predict", "--checkpoint", &p(&out, cli::CHECKPOINT_FILE), "--features", &wide.display().to_string(), "--out-dir", &bad_out.display().to_string()]),
        1
    );
    assert!(!bad_out.join(cli::PREDICTIONS_FILE).exists());
}

#[test]
fn resume_continues_training() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert_eq!(svgpcr(&["simulate", "--out-dir", &data.display().to_string(), "--num-instances", "80", "--num-classes", "2"]), 0);
    let common = [
        "--features".to_string(), p(&data, cli::FEATURES_FILE), "--annotations".into(), p(&data, cli::ANNOTATIONS_FILE),
    ];
    let first = tmp.path().join("first");
    let mut args: Vec<String> = vec!["train".into()];
    args.extend(common.iter().cloned());
    args.extend(["--minibatch-size", "20", "--num-inducing", "5", "--epochs", "2", "--out-dir"].map(String::from));
    args.push(first.display().to_string());
    assert_eq!(svgpcr(&args.iter().map(String::as_str).collect::<Vec<_>>()), 0);

    let second = tmp.path().join("second");
    let mut args: Vec<String> = vec!["train".into()];
    args.extend(common.iter().cloned());
    args.extend(["--checkpoint".to_string(), p(&first, cli::CHECKPOINT_FILE), "--epochs".into(), "4".into(), "--out-dir".into()]);
    args.push(second.display().to_string());
    assert_eq!(svgpcr(&args.iter().map(String::as_str).collect::<Vec<_>>()), 0);
    let ck = svgpcr::data_io::load_checkpoint(&second.join(cli::CHECKPOINT_FILE)).unwrap();
    assert_eq!(ck.trainer.epochs_completed(), 4);
    assert_eq!(ck.trainer.step, 16);
}

#[test]
fn unknown_subcommand_fails() {
    assert_ne!(svgpcr(&["fly"]), 0);
}
