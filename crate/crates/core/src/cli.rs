//! `svgpcr` command line: simulate, train, predict, evaluate, inspect-annotators.
//!
//! Every subcommand writes fixed file names under `--out-dir`. If a command
//! fails, the files it created are removed.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::crowd::AnnotationSet;
use crate::data_io::{self, Checkpoint, FeatureFormat};
use crate::error::{Result, SvgpcrError};
use crate::metrics;
use crate::simulator::{self, AnnotatorSpec, ToyKind};
use crate::trainer::{TrainConfig, Trainer, TrainingLog};

pub const FEATURES_FILE: &str = "features.csv";
pub const ANNOTATIONS_FILE: &str = "annotations.csv";
pub const TRUTH_FILE: &str = "truth.csv";
pub const TRUE_CONFUSIONS_FILE: &str = "true_confusions.csv";
pub const TEST_FEATURES_FILE: &str = "test_features.csv";
pub const TEST_TRUTH_FILE: &str = "test_truth.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAINING_LOG_FILE: &str = "training_log.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const RESPONSIBILITIES_FILE: &str = "responsibilities.csv";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const ANNOTATOR_CONFUSIONS_FILE: &str = "annotator_confusions.csv";

#[derive(Debug, Parser)]
#[command(name = "svgpcr", version, about = "Sparse variational GP classification from crowdsourced labels")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a toy dataset labelled by simulated annotators.
    Simulate(SimulateArgs),
    /// Fit a model to features and crowdsourced annotations.
    Train(TrainArgs),
    /// Predict class probabilities with a trained model.
    Predict(PredictArgs),
    /// Score predictions against true labels.
    Evaluate(EvaluateArgs),
    /// Export the annotator confusion-matrix posteriors of a trained model.
    InspectAnnotators(InspectArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 5)]
    pub num_classes: usize,
    #[arg(long, default_value_t = 2000)]
    pub num_instances: usize,
    /// Extra held-out instances written to test_features.csv / test_truth.csv.
    #[arg(long, default_value_t = 0)]
    pub num_test: usize,
    /// gaussians or two_moons.
    #[arg(long, default_value = "gaussians")]
    pub dataset: String,
    /// Repeatable: reliable:P, spammer, adversarial:SHIFT:P, each optionally
    /// followed by @COVERAGE. Defaults to 95%/90%/80%/spammer/adversarial.
    #[arg(long = "annotator")]
    pub annotators: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub annotations: PathBuf,
    /// TOML file with any subset of the training-configuration fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Defaults to the largest annotated label plus one.
    #[arg(long)]
    pub num_classes: Option<usize>,
    /// Resume from this checkpoint instead of starting fresh.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub minibatch_size: Option<usize>,
    #[arg(long)]
    pub num_inducing: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
}

/// Files written so far by one command; removed unless committed.
struct Outputs {
    dir: PathBuf,
    created: Vec<PathBuf>,
    committed: bool,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| SvgpcrError::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            created: Vec::new(),
            committed: false,
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        self.created.push(p.clone());
        p
    }

    fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if !self.committed {
            for p in &self.created {
                let _ = fs::remove_file(p);
            }
        }
    }
}

/// Parses `argv` (including the program name) and runs the command. Returns
/// the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Simulate(a) => simulate(a),
        Command::Train(a) => train(a),
        Command::Predict(a) => predict(a),
        Command::Evaluate(a) => evaluate(a),
        Command::InspectAnnotators(a) => inspect(a),
    }
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let kind: ToyKind = args.dataset.parse()?;
    let specs: Vec<AnnotatorSpec> = if args.annotators.is_empty() {
        simulator::reference_crowd()
    } else {
        args.annotators.iter().map(|s| s.parse()).collect::<Result<_>>()?
    };
    let total = args.num_instances + args.num_test;
    let (x, truth) = simulator::make_toy_dataset(kind, total, args.num_classes, args.seed)?;
    // interleaved class order keeps both splits balanced
    let train_x = x.rows(0, args.num_instances).into_owned();
    let train_y = &truth[..args.num_instances];
    let sim = simulator::generate_annotations(train_y, args.num_classes, &specs, args.seed.wrapping_add(1))?;

    let mut out = Outputs::new(&args.out_dir)?;
    data_io::write_features_csv(&out.path(FEATURES_FILE), &train_x)?;
    data_io::write_annotations(&out.path(ANNOTATIONS_FILE), &sim.annotations)?;
    data_io::write_labels(&out.path(TRUTH_FILE), train_y)?;
    data_io::write_confusions(
        &out.path(TRUE_CONFUSIONS_FILE),
        sim.annotations.annotator_ids(),
        &[("probability", &sim.confusions)],
    )?;
    if args.num_test > 0 {
        let test_x = x.rows(args.num_instances, args.num_test).into_owned();
        data_io::write_features_csv(&out.path(TEST_FEATURES_FILE), &test_x)?;
        data_io::write_labels(&out.path(TEST_TRUTH_FILE), &truth[args.num_instances..])?;
    }
    out.commit();
    Ok(())
}

fn load_config(args: &TrainArgs, base: TrainConfig) -> Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| SvgpcrError::io(path, e))?;
            toml::from_str(&text).map_err(|e| SvgpcrError::InvalidConfig(format!("{}: {e}", path.display())))?
        }
        None => base,
    };
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = args.minibatch_size {
        cfg.minibatch_size = v;
    }
    if let Some(v) = args.num_inducing {
        cfg.num_inducing = v;
    }
    Ok(cfg)
}

fn train(args: TrainArgs) -> Result<()> {
    let x = data_io::load_features(&args.features, FeatureFormat::from_path(&args.features))?.into_values();
    let mut ann = data_io::load_annotations(&args.annotations)?;
    ann.bind(x.nrows())?;

    let mut trainer = match &args.checkpoint {
        Some(path) => resume(path, &args, &ann, x.nrows())?,
        None => {
            let cfg = load_config(&args, TrainConfig::default())?;
            let k = match args.num_classes {
                Some(k) => k,
                None => ann.inferred_num_classes().ok_or_else(|| {
                    SvgpcrError::EmptyDataset("no annotations to infer the number of classes from".into())
                })?,
            };
            if k < 2 {
                return Err(SvgpcrError::InvalidConfig(format!("need at least 2 classes, got {k}")));
            }
            Trainer::new(&x, &ann, k, cfg)?
        }
    };

    let mut out = Outputs::new(&args.out_dir)?;
    let mut log = TrainingLog::default();
    trainer.run(&x, &ann, &mut log)?;
    trainer.model.refresh_all(&x, &ann)?;

    let checkpoint = Checkpoint {
        annotator_ids: ann.annotator_ids().to_vec(),
        trainer,
    };
    data_io::save_checkpoint(&checkpoint, &out.path(CHECKPOINT_FILE))?;
    write_training_log(&out.path(TRAINING_LOG_FILE), &checkpoint.trainer.config, &log)?;
    write_timing(&out.path(TIMING_FILE), &log)?;
    data_io::write_probabilities(&out.path(RESPONSIBILITIES_FILE), checkpoint.trainer.model.labels.matrix())?;
    out.commit();
    Ok(())
}

fn resume(path: &Path, args: &TrainArgs, ann: &AnnotationSet, n: usize) -> Result<Trainer> {
    let ck = data_io::load_checkpoint(path)?;
    if ck.annotator_ids != ann.annotator_ids() {
        return Err(SvgpcrError::Data(format!(
            "annotators in {} do not match those of the checkpoint",
            args.annotations.display()
        )));
    }
    let mut trainer = ck.trainer;
    if trainer.num_instances != n {
        return Err(SvgpcrError::Shape(format!(
            "checkpoint was trained on {} instances, features have {n}",
            trainer.num_instances
        )));
    }
    if args.config.is_some() || args.seed.is_some() || args.learning_rate.is_some() || args.minibatch_size.is_some() || args.num_inducing.is_some() {
        return Err(SvgpcrError::InvalidConfig(
            "a resumed run keeps its checkpointed configuration; only --epochs may change".into(),
        ));
    }
    if let Some(e) = args.epochs {
        trainer.config.epochs = e;
    }
    Ok(trainer)
}

fn write_training_log(path: &Path, config: &TrainConfig, log: &TrainingLog) -> Result<()> {
    let mut text = String::new();
    let echoed = toml::to_string(config).map_err(|e| SvgpcrError::InvalidConfig(e.to_string()))?;
    for line in echoed.lines() {
        let _ = writeln!(text, "# {line}");
    }
    text.push_str("step,epoch,batch_size,annotation,likelihood,entropy,gaussian_kl,dirichlet_kl,scale,elbo\n");
    for r in &log.records {
        let e = &r.elbo;
        let _ = writeln!(
            text,
            "{},{},{},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
            r.step, r.epoch, r.batch_size, e.annotation, e.likelihood, e.entropy, e.gaussian_kl, e.dirichlet_kl, e.scale, e.total
        );
    }
    fs::write(path, text).map_err(|e| SvgpcrError::io(path, e))
}

fn write_timing(path: &Path, log: &TrainingLog) -> Result<()> {
    let mut text = String::from("step,elapsed_secs\n");
    for (r, t) in log.records.iter().zip(&log.elapsed_secs) {
        let _ = writeln!(text, "{},{t:.6}", r.step);
    }
    fs::write(path, text).map_err(|e| SvgpcrError::io(path, e))
}

fn predict(args: PredictArgs) -> Result<()> {
    let ck = data_io::load_checkpoint(&args.checkpoint)?;
    let x = data_io::load_features(&args.features, FeatureFormat::from_path(&args.features))?.into_values();
    let probs = ck.trainer.model.predict_proba(&x)?;
    let mut out = Outputs::new(&args.out_dir)?;
    data_io::write_probabilities(&out.path(PREDICTIONS_FILE), &probs)?;
    out.commit();
    Ok(())
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    let probs = data_io::load_probabilities(&args.predictions)?;
    let truth = data_io::load_labels(&args.truth)?;
    let acc = metrics::accuracy(&probs, &truth)?;
    let lik = metrics::mean_likelihood(&probs, &truth)?;
    let log_lik = metrics::mean_log_likelihood(&probs, &truth)?;
    let auc = if probs.ncols() == 2 {
        let scores: Vec<f64> = probs.column(1).iter().copied().collect();
        let positive: Vec<bool> = truth.iter().map(|&t| t == 1).collect();
        metrics::auc(&scores, &positive).ok()
    } else {
        None
    };

    let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:?}"));
    let mut text = String::from("class,count,accuracy,likelihood,mean_log_likelihood,auc\n");
    for k in 0..probs.ncols() {
        let count = truth.iter().filter(|&&t| t == k).count();
        let _ = writeln!(text, "{k},{count},{},{},,", opt(acc.per_class[k]), opt(lik.per_class[k]));
    }
    let _ = writeln!(
        text,
        "global,{},{:?},{:?},{log_lik:?},{}",
        truth.len(),
        acc.global,
        lik.global,
        opt(auc)
    );
    let mut out = Outputs::new(&args.out_dir)?;
    let path = out.path(METRICS_FILE);
    fs::write(&path, text).map_err(|e| SvgpcrError::io(&path, e))?;
    out.commit();
    Ok(())
}

fn inspect(args: InspectArgs) -> Result<()> {
    let ck = data_io::load_checkpoint(&args.checkpoint)?;
    let crowd = &ck.trainer.model.crowd;
    let a = crowd.num_annotators();
    let means = (0..a).map(|i| crowd.posterior_mean(i)).collect::<Result<Vec<_>>>()?;
    let vars = (0..a).map(|i| crowd.posterior_variance(i)).collect::<Result<Vec<_>>>()?;
    let mut out = Outputs::new(&args.out_dir)?;
    data_io::write_confusions(
        &out.path(ANNOTATOR_CONFUSIONS_FILE),
        &ck.annotator_ids,
        &[("mean", &means), ("variance", &vars)],
    )?;
    out.commit();
    Ok(())
}
