//! Flat `key = value` run configuration covering the generator, model,
//! training schedule and evaluation. Blank lines and `#` comments are
//! ignored; unknown keys are errors.

use std::fmt::Write as _;
use std::path::Path;

use crate::bcr::ModelShape;
use crate::data::{Catalog, GeneratorConfig};
use crate::error::{Error, Result};
use crate::eval::CandidateMode;
use crate::numerics::OptimizerKind;
use crate::rldf::FilterMode;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 uses every available core.
    pub threads: usize,
    /// Corpus file; empty means generate one from the `gen.` keys.
    pub corpus: String,
    pub generator: GeneratorConfig,

    pub dim: usize,
    pub att_dim: usize,
    pub max_seq_len: usize,
    pub k_a: usize,
    pub k_b: usize,
    pub beta: f64,
    pub l2: f64,
    pub use_position: bool,

    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub negatives: usize,
    pub dropout: f64,
    pub pretrain_lr: f64,
    pub joint_lr: f64,
    pub filter_pretrain_lr: f64,
    pub filter_joint_lr: f64,
    pub soft_update: f64,
    pub samples: usize,
    pub policy_hidden: usize,
    pub pretrain_epochs: usize,
    pub filter_epochs: usize,
    pub joint_epochs: usize,

    pub filter_mode: String,
    pub greedy_mu1: f64,
    pub greedy_mu2: f64,

    pub eval_cutoffs: Vec<usize>,
    pub eval_candidates: CandidateMode,
    /// Evaluate on the test split every this many epochs (0 = never).
    pub eval_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            threads: 0,
            corpus: String::new(),
            generator: GeneratorConfig::default(),
            dim: 16,
            att_dim: 16,
            max_seq_len: 50,
            k_a: 2,
            k_b: 4,
            beta: 0.5,
            l2: 1e-5,
            use_position: true,
            optimizer: OptimizerKind::Adam,
            batch_size: 256,
            negatives: 4,
            dropout: 0.1,
            pretrain_lr: 0.01,
            joint_lr: 1e-4,
            filter_pretrain_lr: 0.05,
            filter_joint_lr: 1e-4,
            soft_update: 0.0005,
            samples: 3,
            policy_hidden: 8,
            pretrain_epochs: 30,
            filter_epochs: 10,
            joint_epochs: 20,
            filter_mode: "full".into(),
            greedy_mu1: 0.5f64.ln(),
            greedy_mu2: 0.0,
            eval_cutoffs: vec![5, 10],
            eval_candidates: CandidateMode::Full,
            eval_every: 0,
        }
    }
}

trait ConfigValue: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn format_value(&self) -> String;
}

macro_rules! from_str_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|e| format!("{e}"))
            }
            fn format_value(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

from_str_value!(u64, usize, f64, bool, String);

impl ConfigValue for OptimizerKind {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        OptimizerKind::parse(s).ok_or_else(|| format!("unknown optimizer '{s}'"))
    }
    fn format_value(&self) -> String {
        self.name().into()
    }
}

impl ConfigValue for Vec<usize> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.split(',')
            .map(|p| p.trim().parse().map_err(|e| format!("{e}")))
            .collect()
    }
    fn format_value(&self) -> String {
        self.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(",")
    }
}

impl ConfigValue for CandidateMode {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        CandidateMode::parse(s).ok_or_else(|| format!("expected 'full' or 'sampled:<n>', got '{s}'"))
    }
    fn format_value(&self) -> String {
        self.to_string()
    }
}

macro_rules! config_keys {
    ($($key:literal => $($field:ident).+),* $(,)?) => {
        impl RunConfig {
            /// Every key in file order.
            pub const KEYS: &'static [&'static str] = &[$($key),*];

            fn set_raw(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
                match key {
                    $($key => self.$($field).+ = ConfigValue::parse_value(value)?,)*
                    _ => return Err(format!("unknown key '{key}'")),
                }
                Ok(())
            }

            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $($key => Some(self.$($field).+.format_value()),)*
                    _ => None,
                }
            }
        }
    };
}

config_keys! {
    "seed" => seed,
    "threads" => threads,
    "corpus" => corpus,
    "gen.accounts" => generator.accounts,
    "gen.users_min" => generator.users_min,
    "gen.users_max" => generator.users_max,
    "gen.items_a" => generator.items_a,
    "gen.items_b" => generator.items_b,
    "gen.topics" => generator.topics,
    "gen.topics_per_user" => generator.topics_per_user,
    "gen.seq_len_min" => generator.seq_len_min,
    "gen.seq_len_max" => generator.seq_len_max,
    "gen.session_min" => generator.session_min,
    "gen.session_max" => generator.session_max,
    "gen.domain_a_prob" => generator.domain_a_prob,
    "gen.rho" => generator.rho,
    "gen.noise" => generator.noise,
    "dim" => dim,
    "att_dim" => att_dim,
    "max_seq_len" => max_seq_len,
    "k_a" => k_a,
    "k_b" => k_b,
    "beta" => beta,
    "l2" => l2,
    "use_position" => use_position,
    "optimizer" => optimizer,
    "batch_size" => batch_size,
    "negatives" => negatives,
    "dropout" => dropout,
    "pretrain_lr" => pretrain_lr,
    "joint_lr" => joint_lr,
    "filter_pretrain_lr" => filter_pretrain_lr,
    "filter_joint_lr" => filter_joint_lr,
    "soft_update" => soft_update,
    "samples" => samples,
    "policy_hidden" => policy_hidden,
    "pretrain_epochs" => pretrain_epochs,
    "filter_epochs" => filter_epochs,
    "joint_epochs" => joint_epochs,
    "filter_mode" => filter_mode,
    "greedy_mu1" => greedy_mu1,
    "greedy_mu2" => greedy_mu2,
    "eval_cutoffs" => eval_cutoffs,
    "eval_candidates" => eval_candidates,
    "eval_every" => eval_every,
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        self.set_raw(key, value.trim())
            .map_err(|e| Error::Config(format!("{key}: {e}")))
    }

    /// Apply `key=value` overrides on top of `self`.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{o}' is not key=value")))?;
            self.set(k.trim(), v)?;
        }
        self.validate()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected key = value, got '{line}'"),
            })?;
            self.set_raw(k.trim(), v.trim()).map_err(|msg| Error::Parse {
                line: i + 1,
                msg: format!("config {}: {msg}", k.trim()),
            })?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Every key with its value; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in Self::KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).unwrap_or_default());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        self.generator.validate()?;
        if self.batch_size == 0 || self.samples == 0 || self.policy_hidden == 0 {
            return bad("batch_size, samples and policy_hidden must be positive");
        }
        for (name, lr) in [
            ("pretrain_lr", self.pretrain_lr),
            ("joint_lr", self.joint_lr),
            ("filter_pretrain_lr", self.filter_pretrain_lr),
            ("filter_joint_lr", self.filter_joint_lr),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        if !(0.0..=1.0).contains(&self.soft_update) {
            return bad("soft_update must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(1..=5).contains(&self.k_a) || !(1..=5).contains(&self.k_b) {
            return bad("k_a and k_b must lie in 1..=5");
        }
        if self.eval_cutoffs.is_empty() || self.eval_cutoffs.contains(&0) {
            return bad("eval_cutoffs must be a non-empty list of positive integers");
        }
        self.filter()?;
        let shape = self.shape(Catalog { items_a: 1, items_b: 1 });
        shape.validate()
    }

    pub fn filter(&self) -> Result<FilterMode> {
        FilterMode::parse(&self.filter_mode, self.greedy_mu1, self.greedy_mu2).ok_or_else(|| {
            Error::Config(format!(
                "filter_mode must be one of off, full, high_only, low_only, greedy; got '{}'",
                self.filter_mode
            ))
        })
    }

    pub fn shape(&self, catalog: Catalog) -> ModelShape {
        ModelShape {
            dim: self.dim,
            att_dim: self.att_dim,
            max_seq_len: self.max_seq_len,
            k_a: self.k_a,
            k_b: self.k_b,
            beta: self.beta,
            l2: self.l2,
            use_position: self.use_position,
            catalog,
        }
    }
}
