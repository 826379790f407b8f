//! Run configuration: a flat `key = value` file plus command-line overrides.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use csran::data::{SyntheticKind, TaskKind};
use csran::model::ModelConfig;
use csran::tensor::Fault;
use csran::train::{DevMetric, TrainConfig};
use csran::{Error, Precision, Result};

/// Every key accepted in a config file or as `--key value`, with a short description.
pub const KEYS: &[(&str, &str)] = &[
    ("task", "classification | ranking"),
    ("train", "training pair file"),
    ("dev", "dev pair file"),
    ("test", "test pair file, evaluated after training"),
    ("data", "pair file read by eval"),
    ("checkpoint", "checkpoint read by eval"),
    ("embeddings", "pretrained word vectors; loaded rows stay fixed"),
    ("min_count", "minimum token count for the word vocabulary"),
    ("synthetic", "paraphrase | entailment3 | ranking | multihop, used instead of files"),
    ("synthetic_size", "training pairs (ranking: query groups)"),
    ("synthetic_dev_size", "dev pairs (ranking: query groups)"),
    ("data_seed", "seed of the synthetic generator"),
    ("out_dir", "run directory"),
    ("precision", "f32 | f64"),
    ("init_seed", "parameter initialisation seed"),
    ("shuffle_seed", "batch order and dropout seed"),
    ("word_dim", "word embedding width"),
    ("use_chars", "character word encoder on/off"),
    ("char_dim", "character embedding width"),
    ("char_hidden", "character LSTM width"),
    ("char_out", "character word vector width"),
    ("use_highway", "highway layers on/off"),
    ("highway_depth", "number of highway layers"),
    ("encoder_hidden", "encoder BiLSTM width h"),
    ("stack_depth", "stacked encoder layers k, 1..5"),
    ("agg_hidden", "aggregation BiLSTM width"),
    ("agg_depth", "aggregation BiLSTM layers, 1..2"),
    ("prediction_layers", "hidden relu layers in the head, 1..3"),
    ("prediction_hidden", "width of the head's hidden layers"),
    ("num_classes", "output classes"),
    ("use_mar", "attention refinement blocks on/off"),
    ("use_csra", "co-stack affinity on/off"),
    ("fm_factors", "factorization machine rank"),
    ("dropout", "dropout rate"),
    ("epochs", "maximum training epochs"),
    ("batch_size", "pairs per batch"),
    ("max_len", "token cap per sequence"),
    ("max_word_len", "character cap per token"),
    ("lr", "Adam learning rate"),
    ("beta1", "Adam first-moment decay"),
    ("beta2", "Adam second-moment decay"),
    ("adam_eps", "Adam epsilon"),
    ("clip_norm", "global gradient-norm limit, or none"),
    ("patience", "epochs without dev improvement before stopping, or none"),
    ("dev_metric", "accuracy | f1 | map | mrr"),
    ("timing", "record wall-clock seconds in the history"),
    ("dump_affinity", "write affinity matrices for this many dev pairs"),
    ("depths", "comma-separated stack depths for depth-sweep"),
    ("sweep_seeds", "comma-separated seeds for depth-sweep"),
    ("parallel", "run depth-sweep models on separate threads"),
];

// Accepted but not advertised: corrupts one backward rule for gradcheck.
const HIDDEN_KEYS: &[&str] = &["fault"];

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub task: TaskKind,
    pub train_path: Option<PathBuf>,
    pub dev_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub data_path: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub min_count: usize,
    pub synthetic: Option<SyntheticKind>,
    pub synthetic_size: usize,
    pub synthetic_dev_size: usize,
    pub data_seed: u64,
    pub out_dir: PathBuf,
    pub init_seed: u64,
    pub dump_affinity: usize,
    pub depths: Vec<usize>,
    pub sweep_seeds: Vec<u64>,
    pub parallel: bool,
    pub fault: Option<Fault>,
    /// Keys given explicitly, in a file or on the command line.
    pub explicit: BTreeSet<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig {
                timing: false,
                ..TrainConfig::default()
            },
            task: TaskKind::Classification,
            train_path: None,
            dev_path: None,
            test_path: None,
            data_path: None,
            checkpoint: None,
            embeddings: None,
            min_count: 1,
            synthetic: None,
            synthetic_size: 200,
            synthetic_dev_size: 100,
            data_seed: 7,
            out_dir: PathBuf::from("run"),
            init_seed: 1,
            dump_affinity: 0,
            depths: vec![1, 2, 3],
            sweep_seeds: vec![1, 2, 3, 4, 5],
            parallel: false,
            fault: None,
            explicit: BTreeSet::new(),
        }
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::config(key, format!("{value:?} is not a boolean"))),
    }
}

fn parse_optional<V: FromStr>(key: &str, value: &str) -> Result<Option<V>> {
    if value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn parse_list<V: FromStr>(key: &str, value: &str) -> Result<Vec<V>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_fault(value: &str) -> Result<Option<Fault>> {
    Ok(Some(match value {
        "none" => return Ok(None),
        "sigmoid" => Fault::Sigmoid,
        "tanh" => Fault::Tanh,
        "relu" => Fault::Relu,
        "matmul" => Fault::MatMul,
        "lstm" => Fault::Lstm,
        other => return Err(Error::config("fault", format!("unknown fault {other:?}"))),
    }))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let path = || Some(PathBuf::from(value));
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "task" => self.task = value.parse()?,
            "train" => self.train_path = path(),
            "dev" => self.dev_path = path(),
            "test" => self.test_path = path(),
            "data" => self.data_path = path(),
            "checkpoint" => self.checkpoint = path(),
            "embeddings" => self.embeddings = path(),
            "min_count" => self.min_count = parse(key, value)?,
            "synthetic" => self.synthetic = Some(value.parse()?),
            "synthetic_size" => self.synthetic_size = parse(key, value)?,
            "synthetic_dev_size" => self.synthetic_dev_size = parse(key, value)?,
            "data_seed" => self.data_seed = parse(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "precision" => {
                m.precision = value
                    .parse::<Precision>()
                    .map_err(|e| Error::config(key, e))?
            }
            "init_seed" => self.init_seed = parse(key, value)?,
            "shuffle_seed" => t.shuffle_seed = parse(key, value)?,
            "word_dim" => m.word_dim = parse(key, value)?,
            "use_chars" => m.use_chars = parse_bool(key, value)?,
            "char_dim" => m.char_dim = parse(key, value)?,
            "char_hidden" => m.char_hidden = parse(key, value)?,
            "char_out" => m.char_out = Some(parse(key, value)?),
            "use_highway" => m.use_highway = parse_bool(key, value)?,
            "highway_depth" => m.highway_depth = parse(key, value)?,
            "encoder_hidden" => m.encoder_hidden = parse(key, value)?,
            "stack_depth" => m.stack_depth = parse(key, value)?,
            "agg_hidden" => m.agg_hidden = Some(parse(key, value)?),
            "agg_depth" => m.agg_depth = parse(key, value)?,
            "prediction_layers" => m.prediction_layers = parse(key, value)?,
            "prediction_hidden" => m.prediction_hidden = parse(key, value)?,
            "num_classes" => m.num_classes = parse(key, value)?,
            "use_mar" => m.use_mar = parse_bool(key, value)?,
            "use_csra" => m.use_csra = parse_bool(key, value)?,
            "fm_factors" => m.fm_factors = parse(key, value)?,
            "dropout" => m.dropout = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "batch_size" => t.batch.batch_size = parse(key, value)?,
            "max_len" => t.batch.max_len = parse(key, value)?,
            "max_word_len" => t.batch.max_word_len = parse(key, value)?,
            "lr" => t.adam.lr = parse(key, value)?,
            "beta1" => t.adam.beta1 = parse(key, value)?,
            "beta2" => t.adam.beta2 = parse(key, value)?,
            "adam_eps" => t.adam.eps = parse(key, value)?,
            "clip_norm" => t.clip_norm = parse_optional(key, value)?,
            "patience" => t.patience = parse_optional(key, value)?,
            "dev_metric" => t.dev_metric = Some(value.parse::<DevMetric>()?),
            "timing" => t.timing = parse_bool(key, value)?,
            "dump_affinity" => self.dump_affinity = parse(key, value)?,
            "depths" => self.depths = parse_list(key, value)?,
            "sweep_seeds" => self.sweep_seeds = parse_list(key, value)?,
            "parallel" => self.parallel = parse_bool(key, value)?,
            "fault" => self.fault = parse_fault(value)?,
            other => return Err(Error::config(other, "unknown key")),
        }
        self.explicit.insert(key.to_string());
        Ok(())
    }

    pub fn is_set(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    /// Reads `key = value` lines; `#` starts a comment.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config {
            field: "config".into(),
            message: format!("cannot read {}: {e}", path.display()),
        })?;
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    line: n + 1,
                    message: "expected `key = value`".into(),
                });
            };
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// Applies `--key value` and `--key=value` arguments in order.
    pub fn apply_args(&mut self, args: &[String]) -> Result<()> {
        let mut it = args.iter();
        while let Some(arg) = it.next() {
            let Some(flag) = arg.strip_prefix("--") else {
                return Err(Error::config(arg, "expected a --key flag"));
            };
            let (key, value) = match flag.split_once('=') {
                Some((k, v)) => (k.to_string(), v.to_string()),
                None => {
                    let v = it
                        .next()
                        .ok_or_else(|| Error::config(flag, "missing value"))?;
                    (flag.to_string(), v.clone())
                }
            };
            let key = key.replace('-', "_");
            if !KEYS.iter().any(|(k, _)| *k == key) && !HIDDEN_KEYS.contains(&key.as_str()) {
                return Err(Error::config(&key, "unknown key"));
            }
            self.set(&key, &value)?;
        }
        Ok(())
    }

    /// Task and class count implied by the synthetic kind unless set explicitly.
    pub fn resolve(&mut self) -> Result<()> {
        if let Some(kind) = self.synthetic {
            if self.is_set("task") && self.task != kind.task() {
                return Err(Error::config(
                    "task",
                    format!("synthetic {kind} is a {} task", kind.task()),
                ));
            }
            self.task = kind.task();
            if self.is_set("num_classes") && self.model.num_classes != kind.num_classes() {
                return Err(Error::config(
                    "num_classes",
                    format!("synthetic {kind} has {} classes", kind.num_classes()),
                ));
            }
            self.model.num_classes = kind.num_classes();
        }
        if self.task == TaskKind::Ranking {
            if self.is_set("num_classes") && self.model.num_classes != 2 {
                return Err(Error::config("num_classes", "ranking tasks have 2 classes"));
            }
            self.model.num_classes = 2;
        }
        Ok(())
    }

    /// Checks everything a training command needs, before any data is read.
    pub fn validate_training(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if let Some(metric) = self.train.dev_metric {
            let ok = match self.task {
                TaskKind::Classification => matches!(metric, DevMetric::Accuracy | DevMetric::F1),
                TaskKind::Ranking => true,
            };
            if !ok || (metric == DevMetric::F1 && self.model.num_classes != 2) {
                return Err(Error::config(
                    "dev_metric",
                    format!("{metric} is not reported for this task"),
                ));
            }
        }
        if self.synthetic.is_some() {
            if self.synthetic_size == 0 {
                return Err(Error::config("synthetic_size", "must be at least 1"));
            }
            if self.synthetic_dev_size == 0 {
                return Err(Error::config("synthetic_dev_size", "must be at least 1"));
            }
        } else {
            require_file("train", self.train_path.as_deref())?;
            require_file("dev", self.dev_path.as_deref())?;
        }
        optional_file("test", self.test_path.as_deref())?;
        optional_file("embeddings", self.embeddings.as_deref())?;
        if self.min_count == 0 {
            return Err(Error::config("min_count", "must be at least 1"));
        }
        Ok(())
    }

    pub fn validate_eval(&self) -> Result<()> {
        self.train.validate()?;
        require_file("checkpoint", self.checkpoint.as_deref())?;
        if self.synthetic.is_none() {
            if self.data_path.is_none() && self.test_path.is_none() {
                return Err(Error::config("data", "no evaluation file given"));
            }
            optional_file("data", self.data_path.as_deref())?;
            optional_file("test", self.test_path.as_deref())?;
        }
        Ok(())
    }

    pub fn validate_sweep(&self) -> Result<()> {
        self.validate_training()?;
        if self.depths.is_empty() {
            return Err(Error::config("depths", "no depths given"));
        }
        if let Some(d) = self.depths.iter().find(|d| !(1..=5).contains(*d)) {
            return Err(Error::config("depths", format!("{d} is outside [1, 5]")));
        }
        if self.sweep_seeds.is_empty() {
            return Err(Error::config("sweep_seeds", "no seeds given"));
        }
        Ok(())
    }
}

fn require_file(field: &str, path: Option<&Path>) -> Result<()> {
    match path {
        None => Err(Error::config(field, "required")),
        Some(p) => optional_file(field, Some(p)),
    }
}

fn optional_file(field: &str, path: Option<&Path>) -> Result<()> {
    match path {
        Some(p) if !p.is_file() => Err(Error::config(field, format!("{} does not exist", p.display()))),
        _ => Ok(()),
    }
}

/// Help text listing every key.
pub fn keys_help() -> String {
    let mut s = String::from("Config keys (file lines `key = value`, or flags `--key value`):\n");
    for (k, d) in KEYS {
        s.push_str(&format!("  {k:<20} {d}\n"));
    }
    s
}
