//! Command-line front end: experiment config, checkpoint files and one
//! function per subcommand.
//!
//! Precedence for every setting is built-in default, then the `--config`
//! JSON file, then command-line flags.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 2 | bad command line |
//! | 3 | config error |
//! | 4 | data or parse error |
//! | 5 | I/O error |
//! | 6 | `label`: no detection cleared the threshold |
//! | 7 | `gradcheck`: a tolerance was exceeded |
//! | 8 | internal numeric, shape or state error |

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::autolabel::{postprocess, write_annotations, BBox, Detection, DEFAULT_SLACK};
use crate::datagen::{
    default_paper_shape, generate_dataset, read_dataset_csv, test_split, train_split,
    write_dataset_csv, BlobSpec, Sample, SplitRole,
};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate, scatter_svg, write_scores_csv, Grouping, OpenSetReport, SampleGroup,
    DEFAULT_THRESHOLD,
};
use crate::gradcheck::{run_gradcheck, GradcheckOptions};
use crate::losses::{Centroids, Label, LossConfig, LossMode};
use crate::numerics::{FeatureActivation, Matrix, MlpParams, Vector};
use crate::trainer::{
    incremental_train, train_with, Checkpoint, EpochStats, TrainConfig, CHECKPOINT_FORMAT_VERSION,
};

pub const CONFIG_FORMAT_VERSION: u32 = 1;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_DATA: i32 = 4;
pub const EXIT_IO: i32 = 5;
pub const EXIT_NO_DETECTION: i32 = 6;
pub const EXIT_GRADCHECK: i32 = 7;
pub const EXIT_INTERNAL: i32 = 8;

/// Exit code for a failed command.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_CONFIG,
        Error::Data(_) | Error::Parse { .. } | Error::Json(_) => EXIT_DATA,
        Error::Io { .. } => EXIT_IO,
        Error::Shape { .. } | Error::State(_) | Error::Numeric(_) => EXIT_INTERNAL,
    }
}

/// Where the experiment's samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    DefaultPaperShape,
    Spec(BlobSpec),
    /// A dataset CSV written by `gen-data`.
    Path(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub mode: LossMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub shuffle: bool,
    pub xi: f64,
    pub lambda_o: f64,
    pub lambda_i: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let loss = LossConfig::new(LossMode::IntraspreadObjectosphere, 1);
        let t = TrainConfig::new(loss, 20, 0);
        Self {
            mode: loss.mode,
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            shuffle: t.shuffle,
            xi: loss.xi,
            lambda_o: loss.lambda_o,
            lambda_i: loss.lambda_i,
        }
    }
}

/// Epoch budget per mode for `compare-losses`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareEpochs {
    pub cross_entropy: usize,
    pub objectosphere: usize,
    pub intraspread_objectosphere: usize,
}

impl Default for CompareEpochs {
    fn default() -> Self {
        Self {
            cross_entropy: 30,
            objectosphere: 20,
            intraspread_objectosphere: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub format_version: u32,
    pub dataset: DatasetSource,
    /// Seeds data generation, initialization and shuffling.
    pub seed: u64,
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    pub feature_activation: FeatureActivation,
    pub train: TrainSection,
    pub compare_epochs: CompareEpochs,
    pub incremental_epochs: usize,
    pub eval_threshold: f64,
    pub output_dir: PathBuf,
    pub emit_svg: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            format_version: CONFIG_FORMAT_VERSION,
            dataset: DatasetSource::DefaultPaperShape,
            seed: 1,
            hidden_dims: vec![32, 32],
            feature_dim: 2,
            feature_activation: FeatureActivation::Identity,
            train: TrainSection::default(),
            compare_epochs: CompareEpochs::default(),
            incremental_epochs: 10,
            eval_threshold: DEFAULT_THRESHOLD,
            output_dir: PathBuf::from("out"),
            emit_svg: true,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != CONFIG_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported config format_version {}",
                self.format_version
            )));
        }
        if self.feature_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::Config("layer widths must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.eval_threshold) {
            return Err(Error::Config(format!(
                "eval_threshold must lie in [0, 1], got {}",
                self.eval_threshold
            )));
        }
        if self.incremental_epochs == 0 {
            return Err(Error::Config(
                "incremental_epochs must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// `[input, hidden.., feature, classes]`.
    pub fn layer_dims(&self, input_dim: usize, num_classes: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend(&self.hidden_dims);
        dims.push(self.feature_dim);
        dims.push(num_classes);
        dims
    }

    pub fn train_config(&self, mode: LossMode, epochs: usize, num_known: usize) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            seed: self.seed,
            loss: LossConfig {
                mode,
                xi: t.xi,
                lambda_o: t.lambda_o,
                lambda_i: t.lambda_i,
                num_known,
            },
            shuffle: t.shuffle,
        }
    }
}

/// A loaded dataset with the class names behind its known labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn input_dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.x.len())
    }
}

fn class_names_from_samples(samples: &[Sample]) -> Result<Vec<String>> {
    let mut names: BTreeMap<usize, &str> = BTreeMap::new();
    for s in samples {
        if let Label::Known(c) = s.label {
            match names.insert(c, &s.source_class) {
                Some(prev) if prev != s.source_class => {
                    return Err(Error::Data(format!(
                        "label {c} is used by both `{prev}` and `{}`",
                        s.source_class
                    )))
                }
                _ => {}
            }
        }
    }
    let names: Vec<String> = names
        .into_iter()
        .enumerate()
        .map(|(i, (c, n))| {
            if i == c {
                Ok(n.to_string())
            } else {
                Err(Error::Data(format!("known label {i} has no samples")))
            }
        })
        .collect::<Result<_>>()?;
    if names.is_empty() {
        return Err(Error::Data("dataset has no known-class samples".into()));
    }
    Ok(names)
}

pub fn read_dataset_file(path: &Path) -> Result<Vec<Sample>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset_csv(std::io::BufReader::new(file)).map_err(|e| match e {
        Error::Parse { line, msg } => Error::Parse {
            line,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    })
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.dataset {
        DatasetSource::Path(p) => {
            let samples = read_dataset_file(p)?;
            let class_names = class_names_from_samples(&samples)?;
            Ok(Dataset {
                samples,
                class_names,
            })
        }
        DatasetSource::DefaultPaperShape => generated(&default_paper_shape(), cfg.seed),
        DatasetSource::Spec(spec) => generated(spec, cfg.seed),
    }
}

fn generated(spec: &BlobSpec, seed: u64) -> Result<Dataset> {
    Ok(Dataset {
        samples: generate_dataset(spec, seed)?,
        class_names: spec.class_names(),
    })
}

/// On-disk checkpoint. Weights are stored as arrays of rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointFile {
    pub format_version: u32,
    pub layer_dims: Vec<usize>,
    pub feature_activation: FeatureActivation,
    pub weights: Vec<Vec<Vec<f64>>>,
    pub biases: Vec<Vec<f64>>,
    pub class_names: Vec<String>,
    pub loss_config: LossConfig,
    pub centroids: Option<Centroids>,
    pub history: Vec<EpochStats>,
}

impl CheckpointFile {
    pub fn from_checkpoint(ck: &Checkpoint) -> Self {
        let p = &ck.params;
        Self {
            format_version: ck.format_version,
            layer_dims: p.layer_dims().to_vec(),
            feature_activation: p.feature_activation(),
            weights: p
                .weights()
                .iter()
                .map(|w| (0..w.rows()).map(|r| w.row(r).to_vec()).collect())
                .collect(),
            biases: p.biases().iter().map(|b| b.to_vec()).collect(),
            class_names: ck.class_names.clone(),
            loss_config: ck.loss,
            centroids: ck.centroids.clone(),
            history: ck.history.clone(),
        }
    }

    pub fn into_checkpoint(self) -> Result<Checkpoint> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint format_version {}",
                self.format_version
            )));
        }
        let weights = self
            .weights
            .into_iter()
            .map(|rows| {
                let r = rows.len();
                let c = rows.first().map_or(0, Vec::len);
                if rows.iter().any(|row| row.len() != c) {
                    return Err(Error::Data("ragged weight matrix in checkpoint".into()));
                }
                Matrix::new(r, c, rows.concat())
            })
            .collect::<Result<Vec<_>>>()?;
        let biases = self
            .biases
            .into_iter()
            .map(Vector::new)
            .collect::<Result<Vec<_>>>()?;
        let params = MlpParams::new(self.layer_dims, weights, biases)
            .map_err(|e| Error::Data(format!("checkpoint arrays do not match layer_dims: {e}")))?
            .with_feature_activation(self.feature_activation);
        let ck = Checkpoint {
            params,
            centroids: self.centroids,
            loss: self.loss_config,
            class_names: self.class_names,
            history: self.history,
            format_version: self.format_version,
        };
        ck.validate()?;
        Ok(ck)
    }
}

pub fn checkpoint_json(ck: &Checkpoint) -> Result<String> {
    to_json(&CheckpointFile::from_checkpoint(ck))
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    write_file(path, checkpoint_json(ck)?.as_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: CheckpointFile =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    file.into_checkpoint()
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn history_csv(history: &[EpochStats]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    for h in history {
        w.serialize(h)
            .map_err(|e| Error::Data(format!("writing history CSV: {e}")))?;
    }
    w.into_inner()
        .map_err(|e| Error::Data(format!("writing history CSV: {e}")))
}

fn scores_csv(
    params: &MlpParams,
    names: &[String],
    test: &[Sample],
    threshold: f64,
) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_scores_csv(params, names, test, threshold, &mut buf)?;
    Ok(buf)
}

/// How a command finished when it did not fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Done,
    NoDetection,
    GradcheckFailed,
}

impl Outcome {
    pub fn exit_code(self) -> i32 {
        match self {
            Outcome::Done => EXIT_OK,
            Outcome::NoDetection => EXIT_NO_DETECTION,
            Outcome::GradcheckFailed => EXIT_GRADCHECK,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "osrlab",
    version,
    about = "Open-set recognition experiments on synthetic data"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (a file path for `gen-data`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Generate the configured dataset as CSV.
    GenData(CommonArgs),
    /// Train one model; writes checkpoint.json and history.csv.
    Train(CommonArgs),
    /// Evaluate a checkpoint on the test rows of a dataset.
    Eval(EvalArgs),
    /// Add one class to a trained checkpoint.
    AddClass(AddClassArgs),
    /// Train cross-entropy, objectosphere and intraspread models on the same data.
    CompareLosses(CompareArgs),
    /// Turn detector boxes into at most one annotation line.
    Label(LabelArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset CSV; defaults to the configured dataset.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long, action = clap::ArgAction::Set)]
    pub emit_svg: Option<bool>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct AddClassArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset CSV holding samples of exactly one source class.
    #[arg(long)]
    pub new_data: PathBuf,
    #[arg(long)]
    pub class_name: String,
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long, action = clap::ArgAction::Set)]
    pub emit_svg: Option<bool>,
}

#[derive(Debug, Clone, Args)]
pub struct LabelArgs {
    /// JSON array of `{x1, y1, x2, y2, score}`.
    #[arg(long)]
    pub detections: PathBuf,
    #[arg(long)]
    pub width: u32,
    #[arg(long)]
    pub height: u32,
    #[arg(long)]
    pub class_name: String,
    /// Written into the annotation; defaults to the detections path.
    #[arg(long)]
    pub image_path: Option<String>,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    pub threshold: f64,
    #[arg(long, default_value_t = DEFAULT_SLACK)]
    pub slack: u32,
    /// Annotation CSV to append to.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    /// Test hook: perturb the analytic parameter gradient.
    #[arg(long, hide = true)]
    pub corrupt_gradient: bool,
}

/// Loads the config named by `--config` (or the defaults) and applies the
/// shared flag overrides.
pub fn resolve_config(common: &CommonArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn count_line(samples: &[Sample]) -> String {
    let mut counts: BTreeMap<(&str, &str), usize> = BTreeMap::new();
    for s in samples {
        *counts
            .entry((s.split_role.as_str(), s.source_class.as_str()))
            .or_default() += 1;
    }
    counts
        .iter()
        .map(|((role, class), n)| format!("{role}/{class}={n}"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn cmd_gen_data(args: &CommonArgs) -> Result<Outcome> {
    let mut cfg = resolve_config(&CommonArgs {
        out: None,
        ..args.clone()
    })?;
    if matches!(cfg.dataset, DatasetSource::Path(_)) {
        return Err(Error::Config(
            "gen-data needs a generated dataset (default_paper_shape or spec), not a path".into(),
        ));
    }
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join("dataset.csv"));
    cfg.output_dir = out.parent().map(Path::to_path_buf).unwrap_or_default();
    let data = load_dataset(&cfg)?;
    let mut buf = Vec::new();
    write_dataset_csv(&data.samples, &mut buf)?;
    write_file(&out, &buf)?;
    println!("wrote {} samples to {}", data.samples.len(), out.display());
    println!("{}", count_line(&data.samples));
    Ok(Outcome::Done)
}

fn require_test_rows(test: &[Sample]) -> Result<()> {
    if test.is_empty() {
        return Err(Error::Data("dataset has no test rows".into()));
    }
    Ok(())
}

pub fn cmd_train(args: &CommonArgs) -> Result<Outcome> {
    let cfg = resolve_config(args)?;
    let data = load_dataset(&cfg)?;
    let train_set = train_split(&data.samples);
    let k = data.class_names.len();
    let tc = cfg.train_config(cfg.train.mode, cfg.train.epochs, k);
    let dims = cfg.layer_dims(data.input_dim(), k);
    let ck = train_with(
        &train_set,
        &tc,
        &dims,
        &data.class_names,
        cfg.feature_activation,
    )?;
    let dir = &cfg.output_dir;
    save_checkpoint(&ck, &dir.join("checkpoint.json"))?;
    write_file(&dir.join("history.csv"), &history_csv(&ck.history)?)?;
    if let Some(last) = ck.history.last() {
        println!(
            "{}: {} epochs, final loss {:.6}, train accuracy {:.4}",
            tc.loss.mode, tc.epochs, last.mean_loss, last.closed_set_train_accuracy
        );
    }
    println!("wrote {}", dir.join("checkpoint.json").display());
    Ok(Outcome::Done)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<Outcome> {
    let mut cfg = resolve_config(&args.common)?;
    if let Some(t) = args.threshold {
        cfg.eval_threshold = t;
    }
    if let Some(e) = args.emit_svg {
        cfg.emit_svg = e;
    }
    if let Some(p) = &args.data {
        cfg.dataset = DatasetSource::Path(p.clone());
    }
    let ck = load_checkpoint(&args.checkpoint)?;
    let data = load_dataset(&cfg)?;
    let test = test_split(&data.samples);
    require_test_rows(&test)?;
    let grouping = Grouping::from_dataset(&data.samples);
    let report = evaluate(
        &ck.params,
        &ck.class_names,
        &test,
        cfg.eval_threshold,
        &grouping,
    )?;
    let dir = &cfg.output_dir;
    write_file(&dir.join("report.json"), to_json(&report)?.as_bytes())?;
    write_file(
        &dir.join("scores.csv"),
        &scores_csv(&ck.params, &ck.class_names, &test, cfg.eval_threshold)?,
    )?;
    if cfg.emit_svg {
        let svg = scatter_svg(
            &ck.params,
            &ck.class_names,
            ck.loss.xi,
            &test,
            cfg.eval_threshold,
        )?;
        write_file(&dir.join("scatter.svg"), svg.as_bytes())?;
    }
    println!(
        "closed-set accuracy {:.4}, unknown false positives {}/{}",
        report.closed_set_accuracy, report.unknown_fp_count, report.unknown_test_count
    );
    Ok(Outcome::Done)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AddClassReport {
    pub format_version: u32,
    pub class_name: String,
    pub threshold: f64,
    pub old_class_names: Vec<String>,
    pub before_old_accuracy: f64,
    pub after_old_accuracy: f64,
    /// `None` when the new-class CSV has no test rows.
    pub after_new_accuracy: Option<f64>,
    pub after: OpenSetReport,
}

/// Checks that `samples` come from one source class and returns its name.
pub fn single_source_class(samples: &[Sample]) -> Result<&str> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Data("new-class data is empty".into()))?;
    if let Some(other) = samples
        .iter()
        .find(|s| s.source_class != first.source_class)
    {
        return Err(Error::Data(format!(
            "new-class data must hold one class, found `{}` and `{}`",
            first.source_class, other.source_class
        )));
    }
    Ok(&first.source_class)
}

pub fn cmd_add_class(args: &AddClassArgs) -> Result<Outcome> {
    let mut cfg = resolve_config(&args.common)?;
    if let Some(t) = args.threshold {
        cfg.eval_threshold = t;
    }
    let base = load_checkpoint(&args.checkpoint)?;
    if base.class_names.iter().any(|n| n == &args.class_name) {
        return Err(Error::Config(format!(
            "class `{}` already exists in the base model",
            args.class_name
        )));
    }
    let new_samples = read_dataset_file(&args.new_data)?;
    single_source_class(&new_samples)?;
    let new_train = train_split(&new_samples);
    if new_train.is_empty() {
        return Err(Error::Data("new-class data has no train rows".into()));
    }

    let old = load_dataset(&cfg)?;
    if old.class_names != base.class_names {
        return Err(Error::Data(format!(
            "dataset classes {:?} do not match checkpoint classes {:?}",
            old.class_names, base.class_names
        )));
    }
    let old_train = train_split(&old.samples);
    let old_test = test_split(&old.samples);
    require_test_rows(&old_test)?;
    let grouping = Grouping::from_dataset(&old.samples);
    let before = evaluate(
        &base.params,
        &base.class_names,
        &old_test,
        cfg.eval_threshold,
        &grouping,
    )?;

    let mut tc = cfg.train_config(
        base.loss.mode,
        cfg.incremental_epochs,
        base.class_names.len(),
    );
    tc.loss = base.loss;
    let ck = incremental_train(&base, &old_train, &new_train, &args.class_name, &tc)?;

    let new_index = base.class_names.len();
    let mut new_test: Vec<Sample> = new_samples
        .into_iter()
        .filter(|s| s.split_role == SplitRole::Test)
        .map(|mut s| {
            s.label = Label::Known(new_index);
            s
        })
        .collect();
    let mut grouping = grouping;
    for s in &new_test {
        grouping.insert(s.source_class.clone(), SampleGroup::Known);
    }
    let has_new_test = !new_test.is_empty();
    let mut all_test = old_test;
    all_test.append(&mut new_test);
    let after = evaluate(
        &ck.params,
        &ck.class_names,
        &all_test,
        cfg.eval_threshold,
        &grouping,
    )?;
    let old_classes: Vec<usize> = (0..new_index).collect();
    let report = AddClassReport {
        format_version: crate::eval::REPORT_FORMAT_VERSION,
        class_name: args.class_name.clone(),
        threshold: cfg.eval_threshold,
        old_class_names: base.class_names.clone(),
        before_old_accuracy: before.closed_set_accuracy,
        after_old_accuracy: after.accuracy_on(&old_classes),
        after_new_accuracy: has_new_test.then(|| after.accuracy_on(&[new_index])),
        after,
    };
    let dir = &cfg.output_dir;
    save_checkpoint(&ck, &dir.join("checkpoint.json"))?;
    write_file(&dir.join("history.csv"), &history_csv(&ck.history)?)?;
    write_file(
        &dir.join("add_class_report.json"),
        to_json(&report)?.as_bytes(),
    )?;
    println!(
        "old-class accuracy {:.4} -> {:.4}; new class `{}` accuracy {}",
        report.before_old_accuracy,
        report.after_old_accuracy,
        report.class_name,
        report
            .after_new_accuracy
            .map_or("n/a".to_string(), |a| format!("{a:.4}"))
    );
    Ok(Outcome::Done)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeRun {
    pub mode: LossMode,
    pub epochs: usize,
    pub report: OpenSetReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub format_version: u32,
    pub seed: u64,
    pub threshold: f64,
    pub runs: Vec<ModeRun>,
}

pub const COMPARED_MODES: [LossMode; 3] = [
    LossMode::CrossEntropy,
    LossMode::Objectosphere,
    LossMode::IntraspreadObjectosphere,
];

/// Trains one model per compared mode from the same seed and evaluates each.
pub fn compare_losses(cfg: &ExperimentConfig) -> Result<(CompareReport, Vec<Checkpoint>, Dataset)> {
    let data = load_dataset(cfg)?;
    let train_set = train_split(&data.samples);
    let test = test_split(&data.samples);
    require_test_rows(&test)?;
    let grouping = Grouping::from_dataset(&data.samples);
    let k = data.class_names.len();
    let dims = cfg.layer_dims(data.input_dim(), k);
    let mut runs = Vec::new();
    let mut checkpoints = Vec::new();
    for mode in COMPARED_MODES {
        let epochs = match mode {
            LossMode::CrossEntropy => cfg.compare_epochs.cross_entropy,
            LossMode::Objectosphere => cfg.compare_epochs.objectosphere,
            _ => cfg.compare_epochs.intraspread_objectosphere,
        };
        let tc = cfg.train_config(mode, epochs, k);
        let ck = train_with(
            &train_set,
            &tc,
            &dims,
            &data.class_names,
            cfg.feature_activation,
        )?;
        let report = evaluate(
            &ck.params,
            &ck.class_names,
            &test,
            cfg.eval_threshold,
            &grouping,
        )?;
        runs.push(ModeRun {
            mode,
            epochs,
            report,
        });
        checkpoints.push(ck);
    }
    let report = CompareReport {
        format_version: crate::eval::REPORT_FORMAT_VERSION,
        seed: cfg.seed,
        threshold: cfg.eval_threshold,
        runs,
    };
    Ok((report, checkpoints, data))
}

pub fn cmd_compare_losses(args: &CompareArgs) -> Result<Outcome> {
    let mut cfg = resolve_config(&args.common)?;
    if let Some(t) = args.threshold {
        cfg.eval_threshold = t;
    }
    if let Some(e) = args.emit_svg {
        cfg.emit_svg = e;
    }
    cfg.validate()?;
    let (report, checkpoints, data) = compare_losses(&cfg)?;
    let dir = &cfg.output_dir;
    let test = test_split(&data.samples);

    let mut summary = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Data(format!("writing summary CSV: {e}"));
    summary
        .write_record([
            "mode",
            "epochs",
            "unknown_fp_count",
            "unknown_fp_rate",
            "closed_set_accuracy",
        ])
        .map_err(csv_err)?;
    for (run, ck) in report.runs.iter().zip(&checkpoints) {
        let r = &run.report;
        summary
            .write_record([
                run.mode.as_str().to_string(),
                run.epochs.to_string(),
                r.unknown_fp_count.to_string(),
                r.unknown_fp_rate.to_string(),
                r.closed_set_accuracy.to_string(),
            ])
            .map_err(csv_err)?;
        save_checkpoint(ck, &dir.join(format!("checkpoint_{}.json", run.mode)))?;
        if cfg.emit_svg {
            let svg = scatter_svg(
                &ck.params,
                &ck.class_names,
                ck.loss.xi,
                &test,
                cfg.eval_threshold,
            )?;
            write_file(
                &dir.join(format!("scatter_{}.svg", run.mode)),
                svg.as_bytes(),
            )?;
        }
        println!(
            "{:<26} epochs {:>3}  unknown fp {:>3}/{}  accuracy {:.4}",
            run.mode.as_str(),
            run.epochs,
            r.unknown_fp_count,
            r.unknown_test_count,
            r.closed_set_accuracy
        );
    }
    let summary = summary
        .into_inner()
        .map_err(|e| Error::Data(format!("writing summary CSV: {e}")))?;
    write_file(&dir.join("summary.csv"), &summary)?;
    write_file(&dir.join("report.json"), to_json(&report)?.as_bytes())?;
    Ok(Outcome::Done)
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let dets: Vec<Detection> = serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        msg: format!("{}: {e}", path.display()),
    })?;
    for d in &dets {
        let b = d.bbox;
        BBox::new(b.x1, b.y1, b.x2, b.y2)?;
        if !d.score.is_finite() {
            return Err(Error::Data(format!(
                "detection score {} is not finite",
                d.score
            )));
        }
    }
    Ok(dets)
}

pub fn cmd_label(args: &LabelArgs) -> Result<Outcome> {
    let dets = read_detections(&args.detections)?;
    let image_path = args
        .image_path
        .clone()
        .unwrap_or_else(|| args.detections.display().to_string());
    let ann = postprocess(
        &dets,
        args.threshold,
        args.slack,
        args.width,
        args.height,
        &args.class_name,
        &image_path,
    )?;
    let Some(ann) = ann else {
        println!("no detection at or above {}", args.threshold);
        return Ok(Outcome::NoDetection);
    };
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&args.out)
        .map_err(|e| Error::io(&args.out, e))?;
    let mut line = Vec::new();
    write_annotations(std::slice::from_ref(&ann), &mut line)?;
    file.write_all(&line).map_err(|e| Error::io(&args.out, e))?;
    print!("{}", String::from_utf8_lossy(&line));
    Ok(Outcome::Done)
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<Outcome> {
    if args.trials == 0 {
        return Err(Error::Config("trials must be at least 1".into()));
    }
    let opts = GradcheckOptions {
        corrupt_gradient: args.corrupt_gradient,
    };
    let report = run_gradcheck(args.seed, args.trials, opts)?;
    for m in &report.modes {
        println!(
            "{:<26} trials {:>4}  max_rel {:.3e}  max_abs {:.3e}  failures {:>3}  {}",
            m.mode.as_str(),
            m.trials,
            m.max_rel_error,
            m.max_abs_error,
            m.failures,
            if m.passed { "PASS" } else { "FAIL" }
        );
    }
    Ok(if report.passed() {
        Outcome::Done
    } else {
        Outcome::GradcheckFailed
    })
}

pub fn dispatch(cmd: &Command) -> Result<Outcome> {
    match cmd {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::AddClass(a) => cmd_add_class(a),
        Command::CompareLosses(a) => cmd_compare_losses(a),
        Command::Label(a) => cmd_label(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(&cli.command) {
        Ok(outcome) => outcome.exit_code(),
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
