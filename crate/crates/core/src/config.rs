//! Run configuration: `key = value` lines with `[data]`, `[model]`, `[train]`
//! and `[eval]` sections (or equivalently dotted keys). Unknown keys are
//! rejected.

use std::path::{Path, PathBuf};

use crate::autodiff::LrnParams;
use crate::catalog::CatalogConfig;
use crate::error::{Error, Result};
use crate::kv::{join_list, parse_list, KeyValues};
use crate::layers::BackboneConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub stage_widths: Vec<usize>,
    pub lrn: LrnParams,
    pub matching_init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let b = BackboneConfig::default();
        ModelConfig {
            feature_dim: b.feature_dim,
            stage_widths: b.stage_widths,
            lrn: b.lrn,
            matching_init_std: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub top_k: usize,
    pub baseline_trials: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            top_k: 10,
            baseline_trials: 10_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// Output root for datasets, checkpoints and metrics.
    pub run_dir: PathBuf,
    pub data: CatalogConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            run_dir: PathBuf::from("runs"),
            data: CatalogConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn paper_scale() -> Self {
        RunConfig {
            data: CatalogConfig::paper_scale(),
            ..Self::default()
        }
    }

    /// Backbone for per-item images of the configured dataset.
    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            image_side: self.data.image_side,
            feature_dim: self.model.feature_dim,
            stage_widths: self.model.stage_widths.clone(),
            lrn: self.model.lrn,
            ..BackboneConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.backbone().validate()?;
        self.train.validate()?;
        if !(self.model.matching_init_std > 0.0) {
            return Err(Error::Config("model.matching_init_std must be positive".into()));
        }
        if self.model.lrn.size % 2 == 0 {
            return Err(Error::Config("model.lrn_size must be odd".into()));
        }
        if self.eval.top_k == 0 {
            return Err(Error::Config("eval.top_k must be positive".into()));
        }
        if self.eval.baseline_trials < 1000 {
            return Err(Error::Config("eval.baseline_trials must be at least 1000".into()));
        }
        Ok(())
    }

    /// Apply `key = value` overrides on top of `self`.
    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        for (key, value) in kv.entries() {
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let kv = KeyValues::parse(text).map_err(Error::Config)?;
        let mut cfg = if kv.get("data.paper_scale") == Some("true") {
            Self::paper_scale()
        } else {
            Self::default()
        };
        cfg.apply(&kv)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
        }
        let d = &mut self.data;
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "seed" => self.seed = num(key, value)?,
            "run_dir" => self.run_dir = PathBuf::from(value),
            "data.paper_scale" => {
                num::<bool>(key, value)?;
            }
            "data.categories" => d.categories = num(key, value)?,
            "data.items_per_category" => d.items_per_category = num(key, value)?,
            "data.attr_dim" => d.attr_dim = num(key, value)?,
            "data.image_side" => d.image_side = num(key, value)?,
            "data.users" => d.users = num(key, value)?,
            "data.positives_train" => d.positives.train = num(key, value)?,
            "data.positives_val" => d.positives.val = num(key, value)?,
            "data.positives_test" => d.positives.test = num(key, value)?,
            "data.neutral_ratio" => d.neutral_ratio = num(key, value)?,
            "data.candidate_factor" => d.candidate_factor = num(key, value)?,
            "data.shared_weight" => d.shared_weight = num(key, value)?,
            "data.personal_rank" => d.personal_rank = num(key, value)?,
            "data.pref_norm" => d.pref_norm = num(key, value)?,
            "data.noise" => d.noise = num(key, value)?,
            "data.texture" => d.texture = num(key, value)?,
            "model.feature_dim" => m.feature_dim = num(key, value)?,
            "model.stage_widths" => {
                m.stage_widths = parse_list(value)
                    .ok_or_else(|| Error::Config(format!("bad list `{value}` for `{key}`")))?
            }
            "model.lrn_size" => m.lrn.size = num(key, value)?,
            "model.lrn_alpha" => m.lrn.alpha = num(key, value)?,
            "model.lrn_beta" => m.lrn.beta = num(key, value)?,
            "model.lrn_k" => m.lrn.k = num(key, value)?,
            "model.matching_init_std" => m.matching_init_std = num(key, value)?,
            "train.batch_size" => t.batch_size = num(key, value)?,
            "train.epochs" => t.epochs = num(key, value)?,
            "train.base_lr" => t.base_lr = num(key, value)?,
            "train.fresh_multiplier" => t.fresh_multiplier = num(key, value)?,
            "train.finetune_divisor" => t.finetune_divisor = num(key, value)?,
            "train.momentum" => t.momentum = num(key, value)?,
            "train.weight_decay" => t.weight_decay = num(key, value)?,
            "train.neutrals_per_positive" => t.neutrals_per_positive = num(key, value)?,
            "train.aux_epochs" => t.aux_epochs = num(key, value)?,
            "train.aux_lr" => t.aux_lr = num(key, value)?,
            "eval.top_k" => self.eval.top_k = num(key, value)?,
            "eval.baseline_trials" => self.eval.baseline_trials = num(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Every setting, in a form [`RunConfig::parse`] reads back unchanged.
    pub fn render(&self) -> String {
        let d = &self.data;
        let m = &self.model;
        let t = &self.train;
        let f = |v: f64| format!("{v:?}");
        let mut out = format!("seed = {}\nrun_dir = {}\n", self.seed, self.run_dir.display());
        let mut section = |name: &str, rows: Vec<(&str, String)>| {
            out.push_str(&format!("\n[{name}]\n"));
            for (k, v) in rows {
                out.push_str(&format!("{k} = {v}\n"));
            }
        };
        section(
            "data",
            vec![
                ("categories", d.categories.to_string()),
                ("items_per_category", d.items_per_category.to_string()),
                ("attr_dim", d.attr_dim.to_string()),
                ("image_side", d.image_side.to_string()),
                ("users", d.users.to_string()),
                ("positives_train", d.positives.train.to_string()),
                ("positives_val", d.positives.val.to_string()),
                ("positives_test", d.positives.test.to_string()),
                ("neutral_ratio", d.neutral_ratio.to_string()),
                ("candidate_factor", d.candidate_factor.to_string()),
                ("shared_weight", f(d.shared_weight)),
                ("personal_rank", d.personal_rank.to_string()),
                ("pref_norm", f(d.pref_norm)),
                ("noise", f(d.noise)),
                ("texture", f(d.texture)),
            ],
        );
        section(
            "model",
            vec![
                ("feature_dim", m.feature_dim.to_string()),
                ("stage_widths", join_list(&m.stage_widths)),
                ("lrn_size", m.lrn.size.to_string()),
                ("lrn_alpha", f(m.lrn.alpha)),
                ("lrn_beta", f(m.lrn.beta)),
                ("lrn_k", f(m.lrn.k)),
                ("matching_init_std", f(m.matching_init_std)),
            ],
        );
        section(
            "train",
            vec![
                ("batch_size", t.batch_size.to_string()),
                ("epochs", t.epochs.to_string()),
                ("base_lr", f(t.base_lr)),
                ("fresh_multiplier", f(t.fresh_multiplier)),
                ("finetune_divisor", f(t.finetune_divisor)),
                ("momentum", f(t.momentum)),
                ("weight_decay", f(t.weight_decay)),
                ("neutrals_per_positive", t.neutrals_per_positive.to_string()),
                ("aux_epochs", t.aux_epochs.to_string()),
                ("aux_lr", f(t.aux_lr)),
            ],
        );
        section(
            "eval",
            vec![
                ("top_k", self.eval.top_k.to_string()),
                ("baseline_trials", self.eval.baseline_trials.to_string()),
            ],
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_parse_round_trip() {
        let mut cfg = RunConfig::paper_scale();
        cfg.seed = 42;
        cfg.train.base_lr = 0.003;
        cfg.model.stage_widths = vec![8, 8];
        assert_eq!(RunConfig::parse(&cfg.render()).unwrap(), cfg);
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn sections_and_dotted_keys_agree() {
        let a = RunConfig::parse("[train]\nepochs = 3\n").unwrap();
        let b = RunConfig::parse("train.epochs = 3\n").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.epochs, 3);
    }

    #[test]
    fn unknown_and_malformed_keys_are_errors() {
        for text in ["[train]\nepoch = 3", "trian.epochs = 3", "[train]\nepochs = three", "[data]\nimage_side = 8"] {
            assert!(matches!(RunConfig::parse(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn paper_scale_flag() {
        let cfg = RunConfig::parse("[data]\npaper_scale = true\n").unwrap();
        assert_eq!(cfg.data.positives.test, 62);
    }
}
