use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::dataset::SynthSpec;
use crate::error::{Error, Result};
use crate::expert::TrainConfig;
use crate::fusion::{HeadConfig, StackVariant};
use crate::ontology::AffinityKind;

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic(SynthSpec),
    /// Dataset CSV, optionally with a taxonomy TSV for the semantic ontology.
    File {
        path: PathBuf,
        taxonomy: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Assignment {
    Tree,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Fusion {
    Late,
    Early,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Mixture,
    Monolithic,
}

macro_rules! keyword_enum {
    ($ty:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok(Self::$variant),)+
                    other => Err(Error::invalid(format!(
                        concat!("unknown ", stringify!($ty), " {:?}"), other
                    ))),
                }
            }
        }
        impl std::fmt::Display for $ty {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(match self { $(Self::$variant => $text,)+ })
            }
        }
    };
}

keyword_enum!(Assignment { Tree => "tree", Random => "random" });
keyword_enum!(Fusion { Late => "late", Early => "early" });
keyword_enum!(Method { Mixture => "mixture", Monolithic => "monolithic" });

/// Everything one pipeline run needs. Every field has a flat `key=value`
/// spelling; see [`ExperimentConfig::set`].
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub ontology_kind: AffinityKind,
    /// Number of categories; unset grows k until no category exceeds M.
    pub ontology_k: Option<usize>,
    pub ontology_seed: u64,
    pub group_size: usize,
    pub lambda: f64,
    pub assignment: Assignment,
    pub assign_seed: u64,
    pub method: Method,
    pub expert: TrainConfig,
    pub variant: StackVariant,
    pub fusion: Fusion,
    pub head: HeadConfig,
    pub ks: Vec<usize>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataSource::Synthetic(SynthSpec::default()),
            ontology_kind: AffinityKind::Semantic,
            ontology_k: None,
            ontology_seed: 0,
            group_size: 10,
            lambda: 0.5,
            assignment: Assignment::Tree,
            assign_seed: 0,
            method: Method::Mixture,
            expert: TrainConfig::default(),
            variant: StackVariant::Odds,
            fusion: Fusion::Late,
            head: HeadConfig::default(),
            ks: vec![1, 5, 10],
            output_dir: PathBuf::from("out"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::invalid(format!("{key}: cannot parse {value:?}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    let value = value.trim();
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v)).collect()
}

fn join<T: ToString>(values: &[T]) -> String {
    values.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn kind_name(kind: AffinityKind) -> &'static str {
    match kind {
        AffinityKind::Semantic => "semantic",
        AffinityKind::Visual => "visual",
    }
}

/// Parses a flat `key=value` text. Blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::parse(n + 1, format!("expected key=value, found {line:?}")));
        };
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::parse(n + 1, "empty key"));
        }
        pairs.push((key.to_string(), value.trim().to_string()));
    }
    Ok(pairs)
}

impl ExperimentConfig {
    /// Defaults overridden by `pairs`, applied in order.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let pairs = parse_key_values(text)?;
        Self::from_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&Error::read_text(path)?)
    }

    fn synth_mut(&mut self, key: &str) -> Result<&mut SynthSpec> {
        match &mut self.data {
            DataSource::Synthetic(spec) => Ok(spec),
            DataSource::File { .. } => Err(Error::invalid(format!("{key} applies only to data=synthetic"))),
        }
    }

    /// Sets one field. `seed` sets every seed at once; later keys may
    /// override individual ones.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => {
                let s: u64 = parse(key, v)?;
                if let DataSource::Synthetic(spec) = &mut self.data {
                    spec.seed = s;
                }
                self.ontology_seed = s;
                self.assign_seed = s;
                self.expert.seed = s;
                self.head.seed = s;
            }
            "data" => match v {
                "synthetic" => {
                    if !matches!(self.data, DataSource::Synthetic(_)) {
                        self.data = DataSource::Synthetic(SynthSpec::default());
                    }
                }
                path => {
                    let taxonomy = match &self.data {
                        DataSource::File { taxonomy, .. } => taxonomy.clone(),
                        DataSource::Synthetic(_) => None,
                    };
                    self.data = DataSource::File { path: PathBuf::from(path), taxonomy };
                }
            },
            "taxonomy" => match &mut self.data {
                DataSource::File { taxonomy, .. } => *taxonomy = (!v.is_empty()).then(|| PathBuf::from(v)),
                DataSource::Synthetic(_) => return Err(Error::invalid("taxonomy needs data=<path>")),
            },
            "n_categories" => self.synth_mut(key)?.n_categories = parse(key, v)?,
            "classes_per_category" => self.synth_mut(key)?.classes_per_category = parse(key, v)?,
            "dim" => self.synth_mut(key)?.dim = parse(key, v)?,
            "samples_per_class" => self.synth_mut(key)?.samples_per_class = parse(key, v)?,
            "category_spread" => self.synth_mut(key)?.category_spread = parse(key, v)?,
            "class_spread" => self.synth_mut(key)?.class_spread = parse(key, v)?,
            "train_fraction" => self.synth_mut(key)?.train_fraction = parse(key, v)?,
            "data_seed" => self.synth_mut(key)?.seed = parse(key, v)?,
            "ontology" => {
                self.ontology_kind = match v {
                    "semantic" => AffinityKind::Semantic,
                    "visual" => AffinityKind::Visual,
                    other => return Err(Error::invalid(format!("ontology: unknown kind {other:?}"))),
                }
            }
            "ontology_k" => self.ontology_k = if v.is_empty() || v == "auto" { None } else { Some(parse(key, v)?) },
            "ontology_seed" => self.ontology_seed = parse(key, v)?,
            "M" | "group_size" => self.group_size = parse(key, v)?,
            "lambda" => self.lambda = parse(key, v)?,
            "assignment" => self.assignment = v.parse()?,
            "assign_seed" => self.assign_seed = parse(key, v)?,
            "method" => self.method = v.parse()?,
            "mu" => self.expert.mu = parse(key, v)?,
            "delta1" => self.expert.delta1 = parse(key, v)?,
            "delta2" => self.expert.delta2 = parse(key, v)?,
            "learning_rate" => self.expert.learning_rate = parse(key, v)?,
            "lr_decay" => self.expert.lr_decay = parse(key, v)?,
            "lr_decay_every" => self.expert.lr_decay_every = parse(key, v)?,
            "epochs" => self.expert.epochs = parse(key, v)?,
            "batch_size" => self.expert.batch_size = parse(key, v)?,
            "sim_refresh_period" => self.expert.sim_refresh_period = parse(key, v)?,
            "expert_samples_per_class" => {
                self.expert.samples_per_class = if v.is_empty() || v == "all" { None } else { Some(parse(key, v)?) }
            }
            "hidden" => self.expert.hidden = parse_list(key, v)?,
            "freeze_class_components" => self.expert.freeze_class_components = parse(key, v)?,
            "resample_not_in_group" => self.expert.resample_not_in_group = parse(key, v)?,
            "kernel_bandwidth" => {
                self.expert.kernel.bandwidth = if v.is_empty() || v == "auto" { None } else { Some(parse(key, v)?) }
            }
            "kernel_sample_size" => self.expert.kernel.sample_size = parse(key, v)?,
            "kernel_seed" => self.expert.kernel.seed = parse(key, v)?,
            "expert_seed" => self.expert.seed = parse(key, v)?,
            "variant" => self.variant = v.parse()?,
            "fusion" => self.fusion = v.parse()?,
            "head_mu" => self.head.mu = parse(key, v)?,
            "head_optimizer" => self.head.optimizer = v.parse()?,
            "head_learning_rate" => self.head.learning_rate = parse(key, v)?,
            "head_lr_decay" => self.head.lr_decay = parse(key, v)?,
            "head_lr_decay_every" => self.head.lr_decay_every = parse(key, v)?,
            "head_epochs" => self.head.epochs = parse(key, v)?,
            "head_batch_size" => self.head.batch_size = parse(key, v)?,
            "end_to_end" => self.head.end_to_end = parse(key, v)?,
            "end_to_end_epochs" => self.head.end_to_end_epochs = parse(key, v)?,
            "end_to_end_learning_rate" => self.head.end_to_end_learning_rate = parse(key, v)?,
            "head_seed" => self.head.seed = parse(key, v)?,
            "ks" => self.ks = parse_list(key, v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            other => return Err(Error::invalid(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if let DataSource::Synthetic(spec) = &self.data {
            spec.validate()?;
        }
        if !(0.0..1.0).contains(&self.lambda) {
            return Err(Error::invalid(format!("lambda must lie in [0, 1), got {}", self.lambda)));
        }
        if self.group_size == 0 {
            return Err(Error::invalid("M must be at least 1"));
        }
        if self.ks.is_empty() || self.ks[0] == 0 || self.ks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid(format!("ks must be ascending and ≥ 1, got {:?}", self.ks)));
        }
        if self.ontology_k == Some(0) {
            return Err(Error::invalid("ontology_k must be at least 1"));
        }
        self.expert.validate()?;
        self.head.validate()
    }

    /// Canonical `(key, value)` listing of every field, in a fixed order,
    /// such that `from_pairs(to_pairs())` reproduces the config. The output
    /// directory is not part of the experiment and is left out.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out: Vec<(&str, String)> = Vec::new();
        match &self.data {
            DataSource::Synthetic(s) => {
                out.push(("data", "synthetic".into()));
                out.push(("n_categories", s.n_categories.to_string()));
                out.push(("classes_per_category", s.classes_per_category.to_string()));
                out.push(("dim", s.dim.to_string()));
                out.push(("samples_per_class", s.samples_per_class.to_string()));
                out.push(("category_spread", s.category_spread.to_string()));
                out.push(("class_spread", s.class_spread.to_string()));
                out.push(("train_fraction", s.train_fraction.to_string()));
                out.push(("data_seed", s.seed.to_string()));
            }
            DataSource::File { path, taxonomy } => {
                out.push(("data", path.display().to_string()));
                out.push(("taxonomy", taxonomy.as_ref().map(|t| t.display().to_string()).unwrap_or_default()));
            }
        }
        let e = &self.expert;
        let h = &self.head;
        let opt = |o: Option<usize>| o.map(|v| v.to_string());
        out.extend([
            ("ontology", kind_name(self.ontology_kind).to_string()),
            ("ontology_k", opt(self.ontology_k).unwrap_or_else(|| "auto".into())),
            ("ontology_seed", self.ontology_seed.to_string()),
            ("M", self.group_size.to_string()),
            ("lambda", self.lambda.to_string()),
            ("assignment", self.assignment.to_string()),
            ("assign_seed", self.assign_seed.to_string()),
            ("method", self.method.to_string()),
            ("mu", e.mu.to_string()),
            ("delta1", e.delta1.to_string()),
            ("delta2", e.delta2.to_string()),
            ("learning_rate", e.learning_rate.to_string()),
            ("lr_decay", e.lr_decay.to_string()),
            ("lr_decay_every", e.lr_decay_every.to_string()),
            ("epochs", e.epochs.to_string()),
            ("batch_size", e.batch_size.to_string()),
            ("sim_refresh_period", e.sim_refresh_period.to_string()),
            ("expert_samples_per_class", opt(e.samples_per_class).unwrap_or_else(|| "all".into())),
            ("hidden", join(&e.hidden)),
            ("freeze_class_components", e.freeze_class_components.to_string()),
            ("resample_not_in_group", e.resample_not_in_group.to_string()),
            ("kernel_bandwidth", e.kernel.bandwidth.map(|b| b.to_string()).unwrap_or_else(|| "auto".into())),
            ("kernel_sample_size", e.kernel.sample_size.to_string()),
            ("kernel_seed", e.kernel.seed.to_string()),
            ("expert_seed", e.seed.to_string()),
            ("variant", self.variant.to_string()),
            ("fusion", self.fusion.to_string()),
            ("head_mu", h.mu.to_string()),
            ("head_optimizer", h.optimizer.to_string()),
            ("head_learning_rate", h.learning_rate.to_string()),
            ("head_lr_decay", h.lr_decay.to_string()),
            ("head_lr_decay_every", h.lr_decay_every.to_string()),
            ("head_epochs", h.epochs.to_string()),
            ("head_batch_size", h.batch_size.to_string()),
            ("end_to_end", h.end_to_end.to_string()),
            ("end_to_end_epochs", h.end_to_end_epochs.to_string()),
            ("end_to_end_learning_rate", h.end_to_end_learning_rate.to_string()),
            ("head_seed", h.seed.to_string()),
            ("ks", join(&self.ks)),
        ]);
        out.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn echo(&self) -> BTreeMap<String, String> {
        self.to_pairs().into_iter().collect()
    }

    /// First 16 hex digits of the SHA-256 of [`Self::to_text`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        hex::encode(&digest[..8])
    }

    /// Seeds used by the run, by role.
    pub fn seeds(&self) -> BTreeMap<String, u64> {
        let mut seeds = BTreeMap::new();
        if let DataSource::Synthetic(s) = &self.data {
            seeds.insert("data".into(), s.seed);
        }
        seeds.insert("ontology".into(), self.ontology_seed);
        seeds.insert("assign".into(), self.assign_seed);
        seeds.insert("expert".into(), self.expert.seed);
        seeds.insert("kernel".into(), self.expert.kernel.seed);
        seeds.insert("head".into(), self.head.seed);
        seeds
    }
}
