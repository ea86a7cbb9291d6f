//! Command implementations behind the `zsl` binary.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use zsl_core::data_io::{self, load_dataset, load_model, read_margin_table, save_model, write_dataset};
use zsl_core::eval::{classify_zero_shot, normalized_per_class_accuracy, top_k_images};
use zsl_core::gradcheck::{run_suite, DEFAULT_SHAPES, DEFAULT_STEP};
use zsl_core::synth::generate_synthetic;
use zsl_core::trainer::{cross_validate_with, label_spaces, train_with_margin};
use zsl_core::{
    DatasetPaths, ErrorKind, Margin, SyntheticSpec, TrainConfig, TrainingMode, WordSpace, ZslDataset, ZslError,
};

/// Worst acceptable gradient-check error.
pub const GRADCHECK_LIMIT: f64 = 1e-4;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_CONFIG: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] ZslError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {msg}")]
    Input { path: PathBuf, msg: String },
    #[error("gradient check failed: worst relative error {0:e} exceeds {GRADCHECK_LIMIT:e}")]
    GradCheck(f64),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) => match e.kind() {
                ErrorKind::Input => EXIT_INPUT,
                ErrorKind::Numerical => EXIT_NUMERICAL,
                ErrorKind::Config => EXIT_CONFIG,
            },
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Input { .. } => EXIT_INPUT,
            CliError::GradCheck(_) => EXIT_NUMERICAL,
        }
    }

    fn input(path: &Path, msg: impl Into<String>) -> Self {
        CliError::Input {
            path: path.to_path_buf(),
            msg: msg.into(),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "zsl", version, about = "Zero-shot learning with label embeddings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on the seen classes and write a checkpoint.
    Train(RunArgs),
    /// Zero-shot evaluation of a checkpoint on the unseen classes.
    Eval(EvalArgs),
    /// Two-fold cross-validation over the hidden-width candidates.
    Cv(RunArgs),
    /// Generate a synthetic dataset together with a ready-to-run config.
    Synth(RunArgs),
    /// Finite-difference check of every analytic gradient.
    Gradcheck(GradcheckArgs),
    /// Print the layer shapes and metadata of a checkpoint.
    Inspect(InspectArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<TrainingMode>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Override a config field, e.g. `--set train.epochs=50`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Checkpoint to evaluate; defaults to `checkpoint` in the config.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Also write the k best images for every unseen class.
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Score test images against seen and unseen classes together.
    #[arg(long)]
    pub generalized: bool,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    /// First seed; seeds `seed..seed+seeds` are checked.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    #[arg(long, default_value_t = DEFAULT_STEP)]
    pub step: f64,
}

#[derive(Debug, Clone, Args)]
pub struct InspectArgs {
    pub checkpoint: PathBuf,
}

/// Everything a run needs. Relative paths are resolved against the
/// directory holding the config file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: Option<DatasetPaths>,
    pub word_vectors: Option<PathBuf>,
    /// Inferred from the first line of the word-vector file when unset.
    pub word_dim: Option<usize>,
    /// Class-by-class margin CSV; 0/1 margins when unset.
    pub margin: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Generate the data in memory instead of reading files.
    pub synthetic: Option<SyntheticSpec>,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Reads the config (or starts from defaults), then applies `--set`,
    /// `--mode` and `--seed`, in that order.
    pub fn load(args: &RunArgs) -> CliResult<RunConfig> {
        let (mut value, base) = match &args.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| CliError::input(path, e.to_string()))?;
                let v: Value = serde_json::from_str(&text)
                    .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
                (v, path.parent().map(Path::to_path_buf).unwrap_or_default())
            }
            None => (Value::Object(Default::default()), PathBuf::new()),
        };
        for item in &args.overrides {
            apply_override(&mut value, item)?;
        }
        if let Some(mode) = args.mode {
            set_path(&mut value, "train.mode", Value::String(mode.to_string()))?;
        }
        if let Some(seed) = args.seed {
            set_path(&mut value, "train.seed", seed.into())?;
            if value.get("synthetic").is_some_and(|s| !s.is_null()) {
                set_path(&mut value, "synthetic.seed", seed.into())?;
            }
        }
        let mut config: RunConfig = serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))?;
        config.resolve(&base);
        config.train.validate()?;
        if let Some(spec) = &config.synthetic {
            spec.validate()?;
        }
        Ok(config)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(d) = &mut self.data {
            fix(&mut d.features);
            fix(&mut d.labels);
            fix(&mut d.split);
            d.predicates.iter_mut().for_each(fix);
            d.attribute_scores.iter_mut().for_each(fix);
        }
        self.word_vectors.iter_mut().for_each(fix);
        self.margin.iter_mut().for_each(fix);
        self.checkpoint.iter_mut().for_each(fix);
    }

    /// Every input path that must exist before a data-driven run starts.
    pub fn input_paths(&self) -> Vec<&Path> {
        let mut paths = Vec::new();
        if self.synthetic.is_none() {
            if let Some(d) = &self.data {
                paths.extend(d.all());
            }
            if let Some(w) = &self.word_vectors {
                paths.push(w.as_path());
            }
        }
        if let Some(m) = &self.margin {
            paths.push(m.as_path());
        }
        paths
    }

    fn check_inputs(&self) -> CliResult<()> {
        if self.synthetic.is_none() && (self.data.is_none() || self.word_vectors.is_none()) {
            return Err(CliError::Config(
                "either `synthetic` or both `data` and `word_vectors` must be set".into(),
            ));
        }
        for p in self.input_paths() {
            if !p.is_file() {
                return Err(CliError::input(p, "input file does not exist"));
            }
        }
        Ok(())
    }

    /// Loads (or generates) the dataset and word space.
    pub fn materialize(&self) -> CliResult<(ZslDataset, WordSpace, Margin)> {
        self.check_inputs()?;
        let margin = match &self.margin {
            Some(p) => read_margin_table(p)?,
            None => Margin::ZeroOne,
        };
        if let Some(spec) = &self.synthetic {
            let s = generate_synthetic(spec)?;
            return Ok((s.dataset, s.word_space, margin));
        }
        let data = self.data.as_ref().expect("checked");
        let wv = self.word_vectors.as_ref().expect("checked");
        let dim = match self.word_dim {
            Some(d) => d,
            None => infer_word_dim(wv)?,
        };
        let (ws, _) = data_io::load_word_vectors(wv, dim)?;
        let (ds, _) = load_dataset(data, self.train.mode)?;
        Ok((ds, ws, margin))
    }
}

fn infer_word_dim(path: &Path) -> CliResult<usize> {
    let f = fs::File::open(path).map_err(|e| CliError::input(path, e.to_string()))?;
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| CliError::input(path, e.to_string()))?;
        let n = line.split_whitespace().count();
        if n > 0 {
            return if n > 1 {
                Ok(n - 1)
            } else {
                Err(CliError::input(path, "first word vector has no values"))
            };
        }
    }
    Err(CliError::input(path, "word-vector file is empty"))
}

/// Applies one `key.path=value` override. The value is read as JSON when it
/// parses, otherwise as a string.
pub fn apply_override(value: &mut Value, item: &str) -> CliResult<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{item}` is not of the form key=value")))?;
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    set_path(value, key.trim(), parsed)
}

fn set_path(value: &mut Value, key: &str, new: Value) -> CliResult<()> {
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CliError::Config(format!("malformed key `{key}`")));
    }
    let mut cur = value;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if cur.is_null() {
            *cur = Value::Object(Default::default());
        }
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| CliError::Config(format!("`{}` is not an object", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), new);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert(Value::Null);
    }
    unreachable!("key has at least one part")
}

fn out_dir(args: &RunArgs) -> CliResult<PathBuf> {
    let dir = args.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).map_err(|e| CliError::input(&dir, e.to_string()))?;
    Ok(dir)
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::input(path, e.to_string()))
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

/// Final numbers of a training run, without timing so repeated runs agree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub selected_hidden_width: usize,
    pub cross_validation: Option<zsl_core::CvReport>,
    pub epochs_run: usize,
    pub train_accuracy: f64,
    pub final_hinge: f64,
    pub final_satisfaction_rate: f64,
    pub warnings: Vec<String>,
}

pub fn cmd_train(args: &RunArgs) -> CliResult<()> {
    let config = RunConfig::load(args)?;
    let dir = out_dir(args)?;
    let (ds, ws, margin) = config.materialize()?;
    let (model, report) = train_with_margin(&ds, &ws, &config.train, &margin)?;
    // host paths stay out so identical inputs give identical checkpoints
    let echo = serde_json::to_value(RunConfig {
        data: None,
        word_vectors: None,
        margin: None,
        checkpoint: None,
        ..config.clone()
    })
    .expect("serializable");
    save_model(&model, echo, &ws.fingerprint(), &dir.join("model.json"))?;
    write(&dir.join("train_report.jsonl"), &report.to_jsonl())?;
    let summary = TrainSummary {
        selected_hidden_width: report.selected_hidden_width,
        cross_validation: report.cross_validation.clone(),
        epochs_run: report.epochs.len(),
        train_accuracy: report.train_accuracy,
        final_hinge: report.final_hinge,
        final_satisfaction_rate: report.final_satisfaction_rate,
        warnings: report.warnings.clone(),
    };
    write(&dir.join("train_summary.json"), &json(&summary))?;
    println!(
        "trained {} epochs, hidden width {}, train accuracy {:.4}, hinge {:.6}, satisfied {:.4}",
        summary.epochs_run,
        summary.selected_hidden_width,
        summary.train_accuracy,
        summary.final_hinge,
        summary.final_satisfaction_rate
    );
    eprintln!("wall clock {:.2}s", report.wall_clock_seconds);
    println!("checkpoint {}", dir.join("model.json").display());
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs) -> CliResult<()> {
    let config = RunConfig::load(&args.run)?;
    let ckpt = args
        .checkpoint
        .clone()
        .or_else(|| config.checkpoint.clone())
        .ok_or_else(|| CliError::Config("no checkpoint given (--checkpoint or `checkpoint`)".into()))?;
    if !ckpt.is_file() {
        return Err(CliError::input(&ckpt, "checkpoint does not exist"));
    }
    let dir = out_dir(&args.run)?;
    let (ds, ws, _) = config.materialize()?;
    let (checkpoint, warnings) = load_model(&ckpt, Some(&ws.fingerprint()))?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    let spaces = label_spaces(&ds, &ws, &config.train)?;
    let test = ds.test_images();
    let features = ds.features.select_rows(&test);
    let candidates: Vec<usize> = if args.generalized {
        (0..ds.class_names.len()).collect()
    } else {
        ds.unseen_classes.clone()
    };
    let predictions = classify_zero_shot(&checkpoint.model, &features, &spaces.class_vectors, &candidates)?;
    let labels: Vec<usize> = test.iter().map(|&i| ds.labels[i]).collect();
    let result = normalized_per_class_accuracy(&predictions, &labels, &candidates)?;
    let text = result.to_text(&ds.class_names);
    write(&dir.join("eval.txt"), &text)?;
    write(&dir.join("eval.csv"), &result.to_csv(&ds.class_names))?;
    print!("{text}");

    if let Some(k) = args.top_k {
        let mut csv = String::from("class,rank,image\n");
        for &c in &ds.unseen_classes {
            let best = top_k_images(&checkpoint.model, &features, spaces.class_vectors.row(c), k)?;
            for (rank, local) in best.into_iter().enumerate() {
                csv.push_str(&format!("{},{},{}\n", ds.class_names[c], rank + 1, test[local]));
            }
        }
        write(&dir.join("top_k.csv"), &csv)?;
    }
    Ok(())
}

pub fn cmd_cv(args: &RunArgs) -> CliResult<()> {
    let config = RunConfig::load(args)?;
    let dir = out_dir(args)?;
    let (ds, ws, margin) = config.materialize()?;
    let spaces = label_spaces(&ds, &ws, &config.train)?;
    let report = cross_validate_with(&ds, &spaces, &config.train, &margin)?;
    for c in &report.candidates {
        println!(
            "hidden {:>5}  fold A {:.4}  fold B {:.4}  mean {:.4}",
            c.hidden_width, c.fold_scores[0], c.fold_scores[1], c.mean
        );
    }
    println!("selected hidden width {}", report.selected);
    write(&dir.join("cv.json"), &json(&report))
}

/// Writes the synthetic dataset, its word vectors and a `config.json` that
/// `train`, `eval` and `cv` accept directly.
pub fn cmd_synth(args: &RunArgs) -> CliResult<()> {
    let mut args = args.clone();
    // a bare synth run still needs the section so --seed reaches it
    args.overrides.insert(0, "synthetic={}".into());
    let config = RunConfig::load(&args)?;
    let mut spec = config.synthetic.expect("set above");
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let dir = out_dir(&args)?;
    let s = generate_synthetic(&spec)?;
    for w in &s.warnings {
        eprintln!("warning: {w}");
    }
    let paths = write_dataset(&s.dataset, &dir)?;
    data_io::write_word_vectors(&s.word_space, &dir.join("word_vectors.txt"))?;
    let relative = |p: &Path| PathBuf::from(p.file_name().expect("written file"));
    let run = RunConfig {
        data: Some(DatasetPaths {
            features: relative(&paths.features),
            labels: relative(&paths.labels),
            split: relative(&paths.split),
            predicates: paths.predicates.as_deref().map(relative),
            attribute_scores: paths.attribute_scores.as_deref().map(relative),
        }),
        word_vectors: Some("word_vectors.txt".into()),
        word_dim: Some(spec.word_dim),
        train: config.train,
        ..RunConfig::default()
    };
    write(&dir.join("config.json"), &json(&run))?;
    write(&dir.join("synthetic_spec.json"), &json(&spec))?;
    println!(
        "wrote {} images of {} classes to {}",
        s.dataset.n_images(),
        s.dataset.class_names.len(),
        dir.display()
    );
    Ok(())
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> CliResult<f64> {
    if args.seeds == 0 || !args.step.is_finite() || args.step <= 0.0 {
        return Err(CliError::Config("gradcheck needs at least one seed and a positive step".into()));
    }
    let report = run_suite(args.seed..args.seed + args.seeds, &DEFAULT_SHAPES, args.step)?;
    println!("cases {}", report.cases);
    println!("worst ranking        {:e}", report.worst_ranking);
    println!("worst cross-entropy  {:e}", report.worst_cross_entropy);
    println!("worst attr. scorer   {:e}", report.worst_attribute_scorer);
    let worst = report.worst();
    println!("worst relative error {worst:e}");
    if worst > GRADCHECK_LIMIT {
        return Err(CliError::GradCheck(worst));
    }
    Ok(worst)
}

pub fn cmd_inspect(args: &InspectArgs) -> CliResult<()> {
    if !args.checkpoint.is_file() {
        return Err(CliError::input(&args.checkpoint, "checkpoint does not exist"));
    }
    let (c, _) = load_model(&args.checkpoint, None)?;
    println!("format_version {}", c.format_version);
    println!("word_space_fingerprint {}", c.word_space_fingerprint);
    println!("leaky_slope {}", c.model.transform.leaky_slope());
    for (i, layer) in c.model.transform.layers().iter().enumerate() {
        println!(
            "phi.layer{} weight {}x{} bias {}x{}",
            i + 1,
            layer.weight.rows(),
            layer.weight.cols(),
            layer.bias.rows(),
            layer.bias.cols()
        );
    }
    let w = &c.model.bilinear.w;
    println!("bilinear.w {}x{}", w.rows(), w.cols());
    if let Some(train) = c.config.get("train") {
        println!("train config {train}");
    }
    Ok(())
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Cv(a) => cmd_cv(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Gradcheck(a) => cmd_gradcheck(a).map(|_| ()),
        Command::Inspect(a) => cmd_inspect(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_fields() {
        let mut v = serde_json::json!({"train": {"epochs": 3}});
        apply_override(&mut v, "train.epochs=7").unwrap();
        apply_override(&mut v, "train.mode=ibt").unwrap();
        apply_override(&mut v, "synthetic.noise=0").unwrap();
        assert_eq!(v["train"]["epochs"], 7);
        assert_eq!(v["train"]["mode"], "ibt");
        assert_eq!(v["synthetic"]["noise"], 0);
        assert!(apply_override(&mut v, "train.epochs").is_err());
        assert!(apply_override(&mut v, "train..x=1").is_err());
        assert!(apply_override(&mut v, "train.epochs.x=1").is_err());
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let args = RunArgs {
            overrides: vec!["train.epoch=5".into()],
            ..RunArgs::default()
        };
        let err = RunConfig::load(&args).unwrap_err();
        assert_eq!(err.exit_code(), EXIT_CONFIG);
        let args = RunArgs {
            overrides: vec!["trian.epochs=5".into()],
            ..RunArgs::default()
        };
        assert_eq!(RunConfig::load(&args).unwrap_err().exit_code(), EXIT_CONFIG);
    }

    #[test]
    fn seed_and_mode_flags_win() {
        let args = RunArgs {
            overrides: vec!["train.seed=1".into(), "synthetic={}".into()],
            mode: Some(TrainingMode::Ibt),
            seed: Some(9),
            ..RunArgs::default()
        };
        let c = RunConfig::load(&args).unwrap();
        assert_eq!(c.train.seed, 9);
        assert_eq!(c.train.mode, TrainingMode::Ibt);
        assert_eq!(c.synthetic.unwrap().seed, 9);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let args = RunArgs {
            overrides: vec!["train.learning_rate=-1".into()],
            ..RunArgs::default()
        };
        assert_eq!(RunConfig::load(&args).unwrap_err().exit_code(), EXIT_CONFIG);
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let mut c = RunConfig {
            word_vectors: Some("wv.txt".into()),
            margin: Some("/abs/m.csv".into()),
            ..RunConfig::default()
        };
        c.resolve(Path::new("/data/run"));
        assert_eq!(c.word_vectors.unwrap(), PathBuf::from("/data/run/wv.txt"));
        assert_eq!(c.margin.unwrap(), PathBuf::from("/abs/m.csv"));
    }

    #[test]
    fn missing_inputs_name_the_path() {
        let c = RunConfig {
            data: Some(DatasetPaths {
                features: "/nonexistent/features.zslf".into(),
                labels: "/nonexistent/labels.tsv".into(),
                split: "/nonexistent/split.txt".into(),
                predicates: None,
                attribute_scores: None,
            }),
            word_vectors: Some("/nonexistent/wv.txt".into()),
            ..RunConfig::default()
        };
        let err = c.materialize().unwrap_err();
        assert_eq!(err.exit_code(), EXIT_INPUT);
        assert!(err.to_string().contains("/nonexistent/features.zslf"));
    }
}
