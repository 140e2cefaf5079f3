//! INI-style run configuration.
//!
//! ```text
//! # comment
//! [net]
//! input = "3x32x32"
//! binarizer = "lab"
//! [train]
//! dataset = "cifar10"
//! epochs = 3
//! ```
//!
//! Values are typed by syntax: `true`/`false`, integers, reals (with `.`
//! or an exponent), quoted or bare strings. Unknown sections and keys are
//! rejected.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use crate::binarize::BinarizerChoice;
use crate::error::{Error, Result};
use crate::nets::{ModelSpec, StemKind};
use crate::tensor::{Padding, Real, Shape4};
use crate::train::{DatasetKind, Optimizer, Schedule, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    Bool(bool),
    Int(i64),
    Real(Real),
    Str(String),
}

impl Value {
    fn parse(raw: &str) -> Value {
        let s = raw.trim();
        if s.len() >= 2 && s.starts_with('"') && s.ends_with('"') {
            return Value::Str(s[1..s.len() - 1].to_string());
        }
        match s {
            "true" => return Value::Bool(true),
            "false" => return Value::Bool(false),
            _ => {}
        }
        if let Ok(i) = s.parse::<i64>() {
            return Value::Int(i);
        }
        if s.contains(['.', 'e', 'E']) {
            if let Ok(r) = s.parse::<Real>() {
                if r.is_finite() {
                    return Value::Real(r);
                }
            }
        }
        Value::Str(s.to_string())
    }

    fn kind(&self) -> &'static str {
        match self {
            Value::Bool(_) => "a boolean",
            Value::Int(_) => "an integer",
            Value::Real(_) => "a real",
            Value::Str(_) => "a string",
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Bool(b) => write!(f, "{b}"),
            Value::Int(i) => write!(f, "{i}"),
            Value::Real(r) => write!(f, "{r:?}"),
            Value::Str(s) => write!(f, "\"{s}\""),
        }
    }
}

/// Parsed `section.key → value` pairs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Document {
    entries: BTreeMap<String, Value>,
}

pub const SECTIONS: [&str; 4] = ["net", "train", "analyze", "bench"];

const KEYS: &[(&str, &[&str])] = &[
    (
        "net",
        &[
            "arch",
            "input",
            "classes",
            "base_channels",
            "layers",
            "stages",
            "stem",
            "stem_kernel",
            "stem_stride",
            "stem_maxpool",
            "binarizer",
            "lab_mask",
            "use_prelu",
            "prelu_after_add",
            "full_precision",
            "binary_pad",
            "lab_kernel",
            "lab_pad",
            "niblack_k",
            "sauvola_k",
            "sauvola_r",
            "window",
        ],
    ),
    (
        "train",
        &[
            "dataset",
            "data_dir",
            "batch",
            "lr",
            "epochs",
            "optimizer",
            "schedule",
            "seed",
            "momentum",
            "bn_momentum",
            "augment",
            "max_steps",
            "train_limit",
            "test_limit",
            "eval_every_epoch",
        ],
    ),
    ("analyze", &["images", "k", "padding", "max_channels"]),
    ("bench", &["runs", "warmup", "threads", "batch"]),
];

impl Document {
    pub fn parse(text: &str) -> Result<Self> {
        let mut doc = Document::default();
        let mut section: Option<&str> = None;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = strip_comment(raw).trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| Error::ConfigSyntax {
                    line: line_no,
                    msg: "unterminated section header".into(),
                })?;
                let name = name.trim();
                section = Some(SECTIONS.iter().find(|s| **s == name).copied().ok_or_else(|| Error::UnknownKey(format!("[{name}]")))?);
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::ConfigSyntax {
                line: line_no,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            let sec = section.ok_or_else(|| Error::ConfigSyntax {
                line: line_no,
                msg: "key outside of any section".into(),
            })?;
            let key = key.trim();
            let known = KEYS.iter().find(|(s, _)| *s == sec).map(|(_, k)| *k).unwrap_or(&[]);
            if !known.contains(&key) {
                return Err(Error::UnknownKey(format!("{sec}.{key}")));
            }
            if value.trim().is_empty() {
                return Err(Error::ConfigSyntax {
                    line: line_no,
                    msg: format!("`{key}` has no value"),
                });
            }
            let full = format!("{sec}.{key}");
            if doc.entries.insert(full.clone(), Value::parse(value)).is_some() {
                return Err(Error::ConfigSyntax {
                    line: line_no,
                    msg: format!("`{full}` set twice"),
                });
            }
        }
        Ok(doc)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.entries.get(key)
    }

    pub fn set(&mut self, key: &str, v: Value) {
        self.entries.insert(key.to_string(), v);
    }

    fn bad(key: &str, v: &Value, want: &str) -> Error {
        Error::BadValue {
            key: key.to_string(),
            msg: format!("expected {want}, got {} `{v}`", v.kind()),
        }
    }

    pub fn int(&self, key: &str) -> Result<Option<i64>> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::Int(i)) => Ok(Some(*i)),
            Some(v) => Err(Self::bad(key, v, "an integer")),
        }
    }

    pub fn uint(&self, key: &str) -> Result<Option<usize>> {
        match self.int(key)? {
            Some(i) if i < 0 => Err(Error::BadValue {
                key: key.to_string(),
                msg: format!("must be non-negative, got {i}"),
            }),
            other => Ok(other.map(|i| i as usize)),
        }
    }

    pub fn real(&self, key: &str) -> Result<Option<Real>> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::Real(r)) => Ok(Some(*r)),
            Some(Value::Int(i)) => Ok(Some(*i as Real)),
            Some(v) => Err(Self::bad(key, v, "a number")),
        }
    }

    pub fn bool(&self, key: &str) -> Result<Option<bool>> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::Bool(b)) => Ok(Some(*b)),
            Some(v) => Err(Self::bad(key, v, "a boolean")),
        }
    }

    pub fn str(&self, key: &str) -> Result<Option<&str>> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::Str(s)) => Ok(Some(s)),
            Some(v) => Err(Self::bad(key, v, "a string")),
        }
    }

    fn parsed<T: std::str::FromStr<Err = Error>>(&self, key: &str) -> Result<Option<T>> {
        self.str(key)?
            .map(|s| {
                s.parse().map_err(|e: Error| Error::BadValue {
                    key: key.to_string(),
                    msg: e.to_string(),
                })
            })
            .transpose()
    }

    pub fn to_ini(&self) -> String {
        let mut out = String::new();
        for sec in SECTIONS {
            let prefix = format!("{sec}.");
            let rows: Vec<_> = self.entries.iter().filter(|(k, _)| k.starts_with(&prefix)).collect();
            if rows.is_empty() {
                continue;
            }
            if !out.is_empty() {
                out.push('\n');
            }
            out.push_str(&format!("[{sec}]\n"));
            for (k, v) in rows {
                out.push_str(&format!("{} = {v}\n", &k[prefix.len()..]));
            }
        }
        out
    }
}

fn strip_comment(line: &str) -> &str {
    let mut in_str = false;
    for (i, ch) in line.char_indices() {
        match ch {
            '"' => in_str = !in_str,
            '#' if !in_str => return &line[..i],
            _ => {}
        }
    }
    line
}

/// Parses `"CxHxW"`, e.g. `"3x32x32"`.
pub fn parse_input(s: &str) -> Result<Shape4> {
    let dims: Vec<usize> = s
        .split(['x', '×'])
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::BadValue {
            key: "net.input".into(),
            msg: format!("expected CxHxW, got `{s}`"),
        })?;
    match dims[..] {
        [c, h, w] => {
            let shape = Shape4 { n: 1, c, h, w };
            shape.validate()?;
            Ok(shape)
        }
        _ => Err(Error::BadValue {
            key: "net.input".into(),
            msg: format!("expected CxHxW, got `{s}`"),
        }),
    }
}

fn parse_pad(key: &str, v: Option<&Value>, default: Padding) -> Result<Padding> {
    match v {
        None => Ok(default),
        Some(Value::Str(s)) if s == "valid" => Ok(Padding::Valid),
        Some(Value::Int(i)) => Ok(Padding::Same(*i as Real)),
        Some(Value::Real(r)) => Ok(Padding::Same(*r)),
        Some(v) => Err(Error::BadValue {
            key: key.into(),
            msg: format!("expected a pad value or \"valid\", got `{v}`"),
        }),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub dataset: DatasetKind,
    pub data_dir: Option<PathBuf>,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnalyzeConfig {
    /// Overrides the per-analysis default image count.
    pub images: Option<usize>,
    pub k: usize,
    pub padding: Padding,
    pub max_channels: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub runs: usize,
    pub warmup: usize,
    pub threads: usize,
    pub batch: usize,
}

/// Fully resolved configuration of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub net: ModelSpec,
    pub train: TrainConfig,
    pub data: Option<DataConfig>,
    pub analyze: AnalyzeConfig,
    pub bench: BenchConfig,
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub images: Option<usize>,
    pub data_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_document(&Document::parse(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_document(&Document::load(path)?)
    }

    pub fn from_document(d: &Document) -> Result<Self> {
        let input = parse_input(d.str("net.input")?.ok_or_else(|| Error::MissingKey("net.input".into()))?)?;
        let classes = d.uint("net.classes")?.unwrap_or(10);
        let mut net = match d.str("net.arch")?.unwrap_or("staged") {
            "staged" => {
                let base = d.uint("net.base_channels")?.unwrap_or(32);
                let layers = d.uint("net.layers")?.unwrap_or(2);
                let mut s = ModelSpec::staged(input, classes, base, layers);
                let stages = d.uint("net.stages")?.unwrap_or(4);
                if !(1..=4).contains(&stages) {
                    return Err(Error::BadValue {
                        key: "net.stages".into(),
                        msg: format!("must be 1 to 4, got {stages}"),
                    });
                }
                s.blocks.truncate(stages);
                s
            }
            "resnet18" => {
                let mut s = ModelSpec::resnet18_imagenet(false);
                s.input = input;
                s.classes = classes;
                s
            }
            other => {
                return Err(Error::BadValue {
                    key: "net.arch".into(),
                    msg: format!("expected \"staged\" or \"resnet18\", got `{other}`"),
                })
            }
        };
        match d.str("net.stem")? {
            None => {}
            Some("quicknet") => net.stem = StemKind::QuickNet,
            Some("plain") => {}
            Some(other) => {
                return Err(Error::BadValue {
                    key: "net.stem".into(),
                    msg: format!("expected \"plain\" or \"quicknet\", got `{other}`"),
                })
            }
        }
        if let StemKind::Plain { kernel, stride, maxpool } = &mut net.stem {
            *kernel = d.uint("net.stem_kernel")?.unwrap_or(*kernel);
            *stride = d.uint("net.stem_stride")?.unwrap_or(*stride);
            *maxpool = d.bool("net.stem_maxpool")?.unwrap_or(*maxpool);
        }
        if let Some(b) = d.parsed::<BinarizerChoice>("net.binarizer")? {
            net = net.with_binarizer(b);
        }
        if let Some(m) = d.uint("net.lab_mask")? {
            if m >= 1 << net.blocks.len() {
                return Err(Error::BadValue {
                    key: "net.lab_mask".into(),
                    msg: format!("mask {m} has bits beyond {} stages", net.blocks.len()),
                });
            }
            net = net.with_lab_mask(m as u32);
        }
        if let Some(p) = d.bool("net.use_prelu")? {
            for b in &mut net.blocks {
                b.use_prelu = p;
            }
        }
        net.prelu_after_add = d.bool("net.prelu_after_add")?.unwrap_or(net.prelu_after_add);
        net.full_precision = d.bool("net.full_precision")?.unwrap_or(net.full_precision);
        net.binary_padding = parse_pad("net.binary_pad", d.get("net.binary_pad"), net.binary_padding)?;
        net.lab_padding = parse_pad("net.lab_pad", d.get("net.lab_pad"), net.lab_padding)?;
        net.lab_kernel = d.uint("net.lab_kernel")?.unwrap_or(net.lab_kernel);
        net.niblack_k = d.real("net.niblack_k")?.unwrap_or(net.niblack_k);
        net.sauvola_k = d.real("net.sauvola_k")?.unwrap_or(net.sauvola_k);
        net.sauvola_r = d.real("net.sauvola_r")?.or(net.sauvola_r);
        net.threshold_window = d.uint("net.window")?.unwrap_or(net.threshold_window);
        net.validate()?;

        let batch = d.uint("train.batch")?.unwrap_or(64);
        let mut train = TrainConfig::new(batch, d.uint("train.epochs")?.unwrap_or(30), 0);
        train.lr = d.real("train.lr")?.unwrap_or(train.lr);
        train.optimizer = d.parsed::<Optimizer>("train.optimizer")?.unwrap_or(train.optimizer);
        train.schedule = d.parsed::<Schedule>("train.schedule")?.unwrap_or(train.schedule);
        train.seed = d.uint("train.seed")?.unwrap_or(0) as u64;
        train.momentum = d.real("train.momentum")?.unwrap_or(train.momentum);
        train.bn_momentum = d.real("train.bn_momentum")?.unwrap_or(train.bn_momentum);
        train.augment = d.bool("train.augment")?.unwrap_or(train.augment);
        train.max_steps = d.uint("train.max_steps")?;
        train.eval_every_epoch = d.bool("train.eval_every_epoch")?.unwrap_or(train.eval_every_epoch);
        train.validate()?;

        let data = match d.parsed::<DatasetKind>("train.dataset")? {
            Some(dataset) => Some(DataConfig {
                dataset,
                data_dir: d.str("train.data_dir")?.map(PathBuf::from),
                train_limit: d.uint("train.train_limit")?,
                test_limit: d.uint("train.test_limit")?,
            }),
            None => None,
        };
        let analyze = AnalyzeConfig {
            images: d.uint("analyze.images")?,
            k: d.uint("analyze.k")?.unwrap_or(3),
            padding: parse_pad("analyze.padding", d.get("analyze.padding"), Padding::Valid)?,
            max_channels: d.uint("analyze.max_channels")?,
        };
        let bench = BenchConfig {
            runs: d.uint("bench.runs")?.unwrap_or(50),
            warmup: d.uint("bench.warmup")?.unwrap_or(5),
            threads: d.uint("bench.threads")?.unwrap_or(1),
            batch: d.uint("bench.batch")?.unwrap_or(1),
        };
        Ok(RunConfig {
            net,
            train,
            data,
            analyze,
            bench,
        })
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.train.seed = s;
        }
        if let Some(t) = o.threads {
            self.bench.threads = t;
        }
        if let Some(i) = o.images {
            self.analyze.images = Some(i);
        }
        if let (Some(dir), Some(data)) = (&o.data_dir, self.data.as_mut()) {
            data.data_dir = Some(dir.clone());
        }
    }

    /// The data section, or the error naming the missing key.
    pub fn data(&self) -> Result<&DataConfig> {
        self.data.as_ref().ok_or_else(|| Error::MissingKey("train.dataset".into()))
    }

    /// Every effective setting as a document; parsing it back yields an
    /// equal configuration.
    pub fn to_document(&self) -> Document {
        use Value::*;
        let mut d = Document::default();
        let n = &self.net;
        let i = n.input;
        let u = |v: usize| Int(v as i64);
        let pad = |p: Padding| match p {
            Padding::Valid => Str("valid".into()),
            Padding::Same(v) => Real(v),
        };
        d.set("net.input", Str(format!("{}x{}x{}", i.c, i.h, i.w)));
        d.set("net.classes", u(n.classes));
        d.set("net.arch", Str("staged".into()));
        d.set("net.base_channels", u(n.blocks[0].channels));
        d.set("net.layers", u(n.blocks[0].layers));
        d.set("net.stages", u(n.blocks.len()));
        match n.stem {
            StemKind::Plain { kernel, stride, maxpool } => {
                d.set("net.stem", Str("plain".into()));
                d.set("net.stem_kernel", u(kernel));
                d.set("net.stem_stride", u(stride));
                d.set("net.stem_maxpool", Bool(maxpool));
            }
            StemKind::QuickNet => d.set("net.stem", Str("quicknet".into())),
        }
        let uniform = n.blocks.iter().all(|b| b.binarizer == n.blocks[0].binarizer);
        let lab_only = n
            .blocks
            .iter()
            .all(|b| matches!(b.binarizer, BinarizerChoice::Sign | BinarizerChoice::Lab));
        if uniform || !lab_only {
            d.set("net.binarizer", Str(n.blocks[0].binarizer.to_string()));
        } else {
            let mask = n
                .blocks
                .iter()
                .enumerate()
                .filter(|(_, b)| b.binarizer == BinarizerChoice::Lab)
                .fold(0i64, |m, (i, _)| m | 1 << i);
            d.set("net.lab_mask", Int(mask));
        }
        d.set("net.use_prelu", Bool(n.blocks[0].use_prelu));
        d.set("net.prelu_after_add", Bool(n.prelu_after_add));
        d.set("net.full_precision", Bool(n.full_precision));
        d.set("net.binary_pad", pad(n.binary_padding));
        d.set("net.lab_pad", pad(n.lab_padding));
        d.set("net.lab_kernel", u(n.lab_kernel));
        d.set("net.niblack_k", Real(n.niblack_k));
        d.set("net.sauvola_k", Real(n.sauvola_k));
        if let Some(r) = n.sauvola_r {
            d.set("net.sauvola_r", Real(r));
        }
        d.set("net.window", u(n.threshold_window));

        let t = &self.train;
        d.set("train.batch", u(t.batch));
        d.set("train.lr", Real(t.lr));
        d.set("train.epochs", u(t.epochs));
        d.set("train.optimizer", Str(t.optimizer.to_string()));
        d.set("train.schedule", Str(t.schedule.to_string()));
        d.set("train.seed", Int(t.seed as i64));
        d.set("train.momentum", Real(t.momentum));
        d.set("train.bn_momentum", Real(t.bn_momentum));
        d.set("train.augment", Bool(t.augment));
        d.set("train.eval_every_epoch", Bool(t.eval_every_epoch));
        if let Some(m) = t.max_steps {
            d.set("train.max_steps", u(m));
        }
        if let Some(data) = &self.data {
            d.set("train.dataset", Str(data.dataset.to_string()));
            if let Some(dir) = &data.data_dir {
                d.set("train.data_dir", Str(dir.display().to_string()));
            }
            if let Some(l) = data.train_limit {
                d.set("train.train_limit", u(l));
            }
            if let Some(l) = data.test_limit {
                d.set("train.test_limit", u(l));
            }
        }
        if let Some(im) = self.analyze.images {
            d.set("analyze.images", u(im));
        }
        d.set("analyze.k", u(self.analyze.k));
        d.set("analyze.padding", pad(self.analyze.padding));
        if let Some(m) = self.analyze.max_channels {
            d.set("analyze.max_channels", u(m));
        }
        d.set("bench.runs", u(self.bench.runs));
        d.set("bench.warmup", u(self.bench.warmup));
        d.set("bench.threads", u(self.bench.threads));
        d.set("bench.batch", u(self.bench.batch));
        d
    }

    /// Writes the effective configuration to `dir/config.ini`.
    pub fn echo(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("config.ini");
        std::fs::write(&path, self.to_document().to_ini())?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
# desk run
[net]
input = "3x32x32"   # CIFAR
binarizer = lab
lab_mask = 5
binary_pad = -1

[train]
dataset = "cifar10"
epochs = 3
lr = 1e-3
seed = 7
augment = true

[bench]
runs = 4
"#;

    #[test]
    fn values_are_typed_by_syntax() {
        assert_eq!(Value::parse("12"), Value::Int(12));
        assert_eq!(Value::parse("-1"), Value::Int(-1));
        assert_eq!(Value::parse("2.5e-3"), Value::Real(2.5e-3));
        assert_eq!(Value::parse("true"), Value::Bool(true));
        assert_eq!(Value::parse("\"12\""), Value::Str("12".into()));
        assert_eq!(Value::parse("cosine"), Value::Str("cosine".into()));
    }

    #[test]
    fn parses_sample() {
        let c = RunConfig::parse(SAMPLE).unwrap();
        assert_eq!(c.net.input, Shape4::new(1, 3, 32, 32).unwrap());
        let kinds: Vec<_> = c.net.blocks.iter().map(|b| b.binarizer).collect();
        assert_eq!(kinds, vec![BinarizerChoice::Lab, BinarizerChoice::Sign, BinarizerChoice::Lab, BinarizerChoice::Sign]);
        assert_eq!((c.train.epochs, c.train.lr, c.train.seed, c.train.augment), (3, 1e-3, 7, true));
        assert_eq!(c.data().unwrap().dataset, DatasetKind::Cifar10);
        assert_eq!(c.bench.runs, 4);
        assert_eq!(c.bench.warmup, 5);
    }

    #[test]
    fn echo_round_trips() {
        let mut c = RunConfig::parse(SAMPLE).unwrap();
        c.apply(&Overrides {
            seed: Some(11),
            images: Some(3),
            ..Overrides::default()
        });
        let text = c.to_document().to_ini();
        assert_eq!(RunConfig::parse(&text).unwrap(), c);
        let q = RunConfig::parse("[net]\ninput = \"1x28x28\"\nstem = quicknet\nbinarizer = sauvola\nsauvola_r = 0.5\n").unwrap();
        assert_eq!(RunConfig::parse(&q.to_document().to_ini()).unwrap(), q);
    }

    #[test]
    fn unknown_and_missing_keys() {
        assert!(matches!(RunConfig::parse("[net]\ninput = \"1x8x8\"\nwidth = 3\n"), Err(Error::UnknownKey(k)) if k == "net.width"));
        assert!(matches!(RunConfig::parse("[model]\n"), Err(Error::UnknownKey(_))));
        assert!(matches!(RunConfig::parse("[net]\nclasses = 3\n"), Err(Error::MissingKey(k)) if k == "net.input"));
        let c = RunConfig::parse("[net]\ninput = \"1x8x8\"\n").unwrap();
        assert!(matches!(c.data(), Err(Error::MissingKey(k)) if k == "train.dataset"));
    }

    #[test]
    fn syntax_and_type_errors() {
        assert!(matches!(Document::parse("[net]\ninput\n"), Err(Error::ConfigSyntax { line: 2, .. })));
        assert!(matches!(Document::parse("input = 3\n"), Err(Error::ConfigSyntax { line: 1, .. })));
        assert!(matches!(Document::parse("[net\n"), Err(Error::ConfigSyntax { .. })));
        assert!(matches!(Document::parse("[net]\nclasses = 1\nclasses = 2\n"), Err(Error::ConfigSyntax { line: 3, .. })));
        assert!(matches!(
            RunConfig::parse("[net]\ninput = \"1x8x8\"\nclasses = \"ten\"\n"),
            Err(Error::BadValue { key, .. }) if key == "net.classes"
        ));
        assert!(matches!(RunConfig::parse("[net]\ninput = \"8x8\"\n"), Err(Error::BadValue { .. })));
        assert!(RunConfig::parse("[net]\ninput = \"1x8x8\"\n[train]\nbatch = 1\n").is_err());
    }
}
