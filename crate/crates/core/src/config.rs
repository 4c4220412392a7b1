//! Experiment configuration: a flat `key: value` file. Lists are written in
//! brackets and may nest; nested settings use dotted keys such as
//! `phase1.batch_size`. Lines starting with `#` are comments.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::data::ResizeKernel;
use crate::ensemble::FineTuneConfig;
use crate::error::{Error, Result};
use crate::model::ScalingConfig;
use crate::optim::AdaBeliefConfig;

#[derive(Clone, Debug, PartialEq)]
enum Value {
    Scalar(String),
    List(Vec<Value>),
}

impl Value {
    fn render(&self) -> String {
        match self {
            Value::Scalar(s) => s.clone(),
            Value::List(items) => {
                let inner: Vec<String> = items.iter().map(Value::render).collect();
                format!("[{}]", inner.join(", "))
            }
        }
    }
}

fn parse_value(text: &str) -> std::result::Result<Value, String> {
    let text = text.trim();
    if !text.starts_with('[') {
        if text.contains(['[', ']']) {
            return Err(format!("stray bracket in {text:?}"));
        }
        return Ok(Value::Scalar(text.to_string()));
    }
    let chars: Vec<char> = text.chars().collect();
    let (value, end) = parse_list(&chars, 0)?;
    if chars[end..].iter().any(|c| !c.is_whitespace()) {
        return Err(format!("trailing text after list in {text:?}"));
    }
    Ok(value)
}

/// Parses a list starting at `chars[start] == '['`; returns the index after `]`.
fn parse_list(chars: &[char], start: usize) -> std::result::Result<(Value, usize), String> {
    let mut items = Vec::new();
    let mut i = start + 1;
    let mut token = String::new();
    let flush = |token: &mut String, items: &mut Vec<Value>| {
        let t = token.trim();
        if !t.is_empty() {
            items.push(Value::Scalar(t.to_string()));
        }
        token.clear();
    };
    while i < chars.len() {
        match chars[i] {
            '[' => {
                if !token.trim().is_empty() {
                    return Err("list item mixes text and brackets".into());
                }
                let (inner, next) = parse_list(chars, i)?;
                items.push(inner);
                token.clear();
                i = next;
                continue;
            }
            ']' => {
                flush(&mut token, &mut items);
                return Ok((Value::List(items), i + 1));
            }
            ',' => flush(&mut token, &mut items),
            c => token.push(c),
        }
        i += 1;
    }
    Err("unclosed bracket".into())
}

/// Where the images come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSource {
    Synthetic {
        classes: usize,
        per_class: usize,
        shape: (usize, usize, usize),
    },
    File(PathBuf),
}

impl DatasetSource {
    pub fn parse(text: &str) -> Result<Self> {
        let Some(rest) = text.strip_prefix("synthetic:") else {
            return Ok(Self::File(PathBuf::from(text)));
        };
        let bad = || {
            Error::Config(format!(
                "dataset: expected synthetic:<classes>x<per_class>@<C,H,W>, got {text:?}"
            ))
        };
        let (counts, shape) = rest.split_once('@').ok_or_else(bad)?;
        let (classes, per_class) = counts.split_once('x').ok_or_else(bad)?;
        let dims: Vec<usize> = shape
            .split(',')
            .map(|d| d.trim().parse().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        let [c, h, w] = dims[..] else { return Err(bad()) };
        Ok(Self::Synthetic {
            classes: classes.parse().map_err(|_| bad())?,
            per_class: per_class.parse().map_err(|_| bad())?,
            shape: (c, h, w),
        })
    }
}

impl std::fmt::Display for DatasetSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Synthetic {
                classes,
                per_class,
                shape: (c, h, w),
            } => write!(f, "synthetic:{classes}x{per_class}@{c},{h},{w}"),
            Self::File(p) => write!(f, "{}", p.display()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Phase1Config {
    pub batch_size: usize,
    pub max_epochs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Phase2Config {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    /// Validation and test containers; only used with a file dataset.
    pub valid_dataset: Option<PathBuf>,
    pub test_dataset: Option<PathBuf>,
    /// Seed of the synthetic generator.
    pub data_seed: u64,
    pub input_size: (usize, usize),
    pub channel_means: [f64; 3],
    pub channel_stds: [f64; 3],
    pub resize: ResizeKernel,
    pub n: usize,
    /// Phase 1 uses the first seed; phase 2 runs once per seed.
    pub seeds: Vec<u64>,
    pub scaling: ScalingConfig,
    pub phase1: Phase1Config,
    pub phase2: Phase2Config,
    pub optimizer: AdaBeliefConfig,
    pub ensemble_module_list: Vec<PathBuf>,
    pub split_override: Option<Vec<Vec<usize>>>,
    /// Weak checkpoint whose extractor initializes every phase-1 learner.
    pub warm_start: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn new(dataset: DatasetSource) -> Self {
        Self {
            dataset,
            valid_dataset: None,
            test_dataset: None,
            data_seed: 0,
            input_size: (32, 32),
            channel_means: [0.491, 0.482, 0.447],
            channel_stds: [0.246, 0.243, 0.261],
            resize: ResizeKernel::Bilinear,
            n: 2,
            seeds: vec![0, 1, 2, 3, 4],
            scaling: ScalingConfig::default(),
            phase1: Phase1Config {
                batch_size: 25,
                max_epochs: 100,
            },
            phase2: Phase2Config {
                batch_size: 50,
                max_epochs: 300,
                patience: 10,
            },
            optimizer: AdaBeliefConfig::default(),
            ensemble_module_list: Vec::new(),
            split_override: None,
            warm_start: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds: must not be empty".into()));
        }
        if self.n == 0 {
            return Err(Error::Config("N: must be >= 1".into()));
        }
        if self.phase2.patience == 0 {
            return Err(Error::Config("phase2.patience: must be >= 1".into()));
        }
        for (key, v) in [
            ("phase1.batch_size", self.phase1.batch_size),
            ("phase2.batch_size", self.phase2.batch_size),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{key}: must be >= 1")));
            }
        }
        if self.input_size.0 == 0 || self.input_size.1 == 0 {
            return Err(Error::Config("input_size: must be positive".into()));
        }
        if let Some(i) = self.channel_stds.iter().position(|&s| !(s > 0.0)) {
            return Err(Error::Config(format!("channel_stds: entry {i} must be positive")));
        }
        if let Some(groups) = &self.split_override {
            if groups.len() != self.n {
                return Err(Error::Config(format!(
                    "split_override: {} groups for N = {}",
                    groups.len(),
                    self.n
                )));
            }
        }
        self.optimizer.validate()?;
        self.scaling.validate()
    }

    /// Phase-1 seed.
    pub fn base_seed(&self) -> u64 {
        self.seeds[0]
    }

    pub fn fine_tune(&self) -> FineTuneConfig {
        FineTuneConfig {
            batch_size: self.phase2.batch_size,
            max_epochs: self.phase2.max_epochs,
            patience: self.phase2.patience,
            optimizer: self.optimizer,
            seed: self.base_seed(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: BTreeMap<String, Value> = BTreeMap::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once(':') else {
                return Err(Error::Config(format!("line {}: expected `key: value`", no + 1)));
            };
            let key = key.trim().to_string();
            let value = parse_value(value).map_err(|e| Error::Config(format!("{key}: {e}")))?;
            if entries.insert(key.clone(), value).is_some() {
                return Err(Error::Config(format!("{key}: given twice")));
            }
        }

        let dataset = match entries.remove("dataset") {
            Some(v) => DatasetSource::parse(&scalar("dataset", &v)?)?,
            None => return Err(Error::Config("dataset: missing required key".into())),
        };
        let mut cfg = Self::new(dataset);
        for (key, value) in &entries {
            cfg.apply(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    fn apply(&mut self, key: &str, v: &Value) -> Result<()> {
        let opt = &mut self.optimizer;
        match key {
            "valid_dataset" => self.valid_dataset = Some(PathBuf::from(scalar(key, v)?)),
            "test_dataset" => self.test_dataset = Some(PathBuf::from(scalar(key, v)?)),
            "warm_start" => self.warm_start = Some(PathBuf::from(scalar(key, v)?)),
            "data_seed" => self.data_seed = num(key, v)?,
            "input_size" => {
                self.input_size = match v {
                    Value::Scalar(_) => {
                        let s = num(key, v)?;
                        (s, s)
                    }
                    Value::List(_) => {
                        let [h, w] = fixed::<usize, 2>(key, v)?;
                        (h, w)
                    }
                }
            }
            "channel_means" => self.channel_means = fixed(key, v)?,
            "channel_stds" => self.channel_stds = fixed(key, v)?,
            "resize" => self.resize = scalar(key, v)?.parse()?,
            "N" => self.n = num(key, v)?,
            "seeds" => self.seeds = list(key, v)?,
            "scaling.phi" => self.scaling.phi = num(key, v)?,
            "scaling.alpha" => self.scaling.alpha = num(key, v)?,
            "scaling.beta" => self.scaling.beta = num(key, v)?,
            "scaling.gamma" => self.scaling.gamma = num(key, v)?,
            "phase1.batch_size" => self.phase1.batch_size = num(key, v)?,
            "phase1.max_epochs" => self.phase1.max_epochs = num(key, v)?,
            "phase2.batch_size" => self.phase2.batch_size = num(key, v)?,
            "phase2.max_epochs" => self.phase2.max_epochs = num(key, v)?,
            "phase2.patience" => self.phase2.patience = num(key, v)?,
            "optimizer.lr" => opt.lr = num(key, v)?,
            "optimizer.beta1" => opt.beta1 = num(key, v)?,
            "optimizer.beta2" => opt.beta2 = num(key, v)?,
            "optimizer.eps" => opt.eps = num(key, v)?,
            "optimizer.weight_decay" => opt.weight_decay = num(key, v)?,
            "optimizer.decoupled" => opt.decoupled = num(key, v)?,
            "optimizer.rectify" => opt.rectify = num(key, v)?,
            "ensemble_module_list" => {
                self.ensemble_module_list = list::<String>(key, v)?.into_iter().map(PathBuf::from).collect()
            }
            "split_override" => {
                let Value::List(groups) = v else {
                    return Err(Error::Config(format!("{key}: expected a list of class lists")));
                };
                self.split_override = Some(groups.iter().map(|g| list(key, g)).collect::<Result<_>>()?);
            }
            _ => return Err(Error::Config(format!("{key}: unknown key"))),
        }
        Ok(())
    }

    /// Renders every setting; parsing the result yields an equal config.
    pub fn to_text(&self) -> String {
        let join = |xs: Vec<String>| format!("[{}]", xs.join(", "));
        let floats = |xs: &[f64]| join(xs.iter().map(|x| format!("{x:?}")).collect());
        let mut lines = vec![format!("dataset: {}", self.dataset)];
        if let Some(p) = &self.valid_dataset {
            lines.push(format!("valid_dataset: {}", p.display()));
        }
        if let Some(p) = &self.test_dataset {
            lines.push(format!("test_dataset: {}", p.display()));
        }
        let o = &self.optimizer;
        lines.extend([
            format!("data_seed: {}", self.data_seed),
            format!("input_size: [{}, {}]", self.input_size.0, self.input_size.1),
            format!("channel_means: {}", floats(&self.channel_means)),
            format!("channel_stds: {}", floats(&self.channel_stds)),
            format!("resize: {}", self.resize),
            format!("N: {}", self.n),
            format!("seeds: {}", join(self.seeds.iter().map(u64::to_string).collect())),
            format!("scaling.phi: {:?}", self.scaling.phi),
            format!("scaling.alpha: {:?}", self.scaling.alpha),
            format!("scaling.beta: {:?}", self.scaling.beta),
            format!("scaling.gamma: {:?}", self.scaling.gamma),
            format!("phase1.batch_size: {}", self.phase1.batch_size),
            format!("phase1.max_epochs: {}", self.phase1.max_epochs),
            format!("phase2.batch_size: {}", self.phase2.batch_size),
            format!("phase2.max_epochs: {}", self.phase2.max_epochs),
            format!("phase2.patience: {}", self.phase2.patience),
            format!("optimizer.lr: {:?}", o.lr),
            format!("optimizer.beta1: {:?}", o.beta1),
            format!("optimizer.beta2: {:?}", o.beta2),
            format!("optimizer.eps: {:?}", o.eps),
            format!("optimizer.weight_decay: {:?}", o.weight_decay),
            format!("optimizer.decoupled: {}", o.decoupled),
            format!("optimizer.rectify: {}", o.rectify),
            format!(
                "ensemble_module_list: {}",
                join(
                    self.ensemble_module_list
                        .iter()
                        .map(|p| p.display().to_string())
                        .collect()
                )
            ),
        ]);
        if let Some(p) = &self.warm_start {
            lines.push(format!("warm_start: {}", p.display()));
        }
        if let Some(groups) = &self.split_override {
            let v = Value::List(
                groups
                    .iter()
                    .map(|g| Value::List(g.iter().map(|c| Value::Scalar(c.to_string())).collect()))
                    .collect(),
            );
            lines.push(format!("split_override: {}", v.render()));
        }
        lines.join("\n") + "\n"
    }
}

fn scalar(key: &str, v: &Value) -> Result<String> {
    match v {
        Value::Scalar(s) => Ok(s.clone()),
        Value::List(_) => Err(Error::Config(format!("{key}: expected a single value, got a list"))),
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &Value) -> Result<T> {
    let s = scalar(key, v)?;
    s.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot read {s:?} as {}", std::any::type_name::<T>())))
}

fn list<T: std::str::FromStr>(key: &str, v: &Value) -> Result<Vec<T>> {
    match v {
        Value::List(items) => items.iter().map(|item| num(key, item)).collect(),
        Value::Scalar(_) => Err(Error::Config(format!("{key}: expected a bracketed list"))),
    }
}

fn fixed<T: std::str::FromStr, const K: usize>(key: &str, v: &Value) -> Result<[T; K]> {
    let items: Vec<T> = list(key, v)?;
    let n = items.len();
    items
        .try_into()
        .map_err(|_| Error::Config(format!("{key}: expected {K} entries, got {n}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = ExperimentConfig::parse("dataset: synthetic:4x50@3,32,32\n").unwrap();
        assert_eq!(
            cfg.dataset,
            DatasetSource::Synthetic {
                classes: 4,
                per_class: 50,
                shape: (3, 32, 32)
            }
        );
        assert_eq!(cfg.optimizer.lr, 5e-4);
        assert_eq!(cfg.optimizer.eps, 1e-16);
        assert_eq!(cfg.phase2.patience, 10);
        assert_eq!(cfg.n, 2);
        assert_eq!(cfg.seeds.len(), 5);
        assert!(cfg.ensemble_module_list.is_empty());
    }

    #[test]
    fn values_and_lists() {
        let text = "\
# desk run
dataset: data/train.aeib
valid_dataset: data/valid.aeib
test_dataset: data/test.aeib
input_size: [40, 48]
N: 3
seeds: [7, 8]
phase1.batch_size: 55
optimizer.lr: 1e-3
ensemble_module_list: [out/a.json, out/b.json, out/c.json]
split_override: [[0, 1], [2], [3, 4]]
";
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.dataset, DatasetSource::File("data/train.aeib".into()));
        assert_eq!(cfg.input_size, (40, 48));
        assert_eq!(cfg.seeds, vec![7, 8]);
        assert_eq!(cfg.phase1.batch_size, 55);
        assert_eq!(cfg.optimizer.lr, 1e-3);
        assert_eq!(cfg.ensemble_module_list.len(), 3);
        assert_eq!(cfg.split_override, Some(vec![vec![0, 1], vec![2], vec![3, 4]]));
    }

    fn config_error_names(text: &str, key: &str) {
        match ExperimentConfig::parse(text) {
            Err(Error::Config(m)) => assert!(m.starts_with(key), "{m}"),
            other => panic!("expected config error for {key}, got {other:?}"),
        }
    }

    #[test]
    fn bad_configs_name_the_key() {
        config_error_names(
            "dataset: synthetic:4x50@3,32,32\nphase2.patience: 0\n",
            "phase2.patience",
        );
        config_error_names("dataset: synthetic:4x50@3,32,32\nlearning_rate: 0.1\n", "learning_rate");
        config_error_names("dataset: synthetic:4x50@3,32,32\nN: two\n", "N");
        config_error_names("dataset: synthetic:4x50@3,32,32\nseeds: []\n", "seeds");
        config_error_names("dataset: synthetic:4x50@3,32,32\nseeds: [1, 2\n", "seeds");
        config_error_names("dataset: synthetic:4x50@3,32,32\noptimizer.rectify: true\n", "rectify");
        config_error_names("N: 2\n", "dataset");
        config_error_names("dataset: synthetic:4x@3,32,32\n", "dataset");
        config_error_names("dataset: synthetic:4x50@3,32,32\nN: 2\nN: 3\n", "N");
    }

    #[test]
    fn round_trip_is_identity() {
        let text = "dataset: synthetic:3x10@3,16,16\nseeds: [3]\nsplit_override: [[0], [1, 2]]\noptimizer.weight_decay: 0.01\nwarm_start: out/weak_0.json\n";
        let cfg = ExperimentConfig::parse(text).unwrap();
        let again = ExperimentConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.to_text(), cfg.to_text());
        let defaults = ExperimentConfig::new(DatasetSource::File("x.aeib".into()));
        assert_eq!(ExperimentConfig::parse(&defaults.to_text()).unwrap(), defaults);
    }
}
