//! Flat `key = value` run configuration.
//!
//! Every key has a default; a config file overrides defaults and `--set`
//! style overrides take precedence over the file. Unknown keys are errors.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::head::HeadConfig;
use crate::optim::TrainConfig;
use crate::stain::StainParams;
use crate::synth::{ConcentrationMix, EmbedSpec, SynthSpec, DEFAULT_STAINS};
use crate::tiler::{SamplePlan, TILE_SIZE, TILE_STRIDE};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("override `{0}` is not of the form key=value")]
    BadOverride(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub stain_beta: f64,
    pub stain_alpha_pct: f64,
    pub stain_i0: f64,
    pub stain_max_conc_pct: f64,

    pub downsample: usize,
    pub tile_size: usize,
    pub tile_stride: usize,
    pub per_class_count: usize,
    pub sample_seed: u64,
    pub allow_short: bool,

    pub dim: usize,
    pub data_concepts: usize,
    pub context_rank: usize,
    pub bottleneck_ratio: usize,
    pub adapter_alpha: f64,
    pub tau_inst: f64,
    pub tau_bag: f64,
    pub tau_cls: f64,
    pub orth_weight: f64,
    pub head_seed: u64,

    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub batch_size: usize,
    pub instance_dropout: f64,
    pub train_seed: u64,

    pub folds: usize,
    pub fold_seed: u64,

    pub synth_slides: usize,
    pub synth_slide_size: usize,
    pub synth_dim: usize,
    pub synth_instances: usize,
    pub synth_bags_per_slide: usize,
    pub synth_separation: f64,
    pub synth_noise: f64,
    pub synth_concept_alignment: f64,
    pub synth_prompt_alignment: f64,
    pub synth_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let stain = StainParams::default();
        let head = HeadConfig::default();
        let train = TrainConfig::default();
        let embed = EmbedSpec::default();
        let synth = SynthSpec::default();
        Self {
            stain_beta: stain.beta,
            stain_alpha_pct: stain.alpha_pct,
            stain_i0: stain.i0,
            stain_max_conc_pct: stain.max_conc_pct,
            downsample: 4,
            tile_size: TILE_SIZE,
            tile_stride: TILE_STRIDE,
            per_class_count: 250,
            sample_seed: 0,
            allow_short: false,
            dim: head.dim,
            data_concepts: head.data_concepts,
            context_rank: head.context_rank,
            bottleneck_ratio: head.bottleneck_ratio,
            adapter_alpha: head.alpha,
            tau_inst: head.tau_inst,
            tau_bag: head.tau_bag,
            tau_cls: head.tau_cls,
            orth_weight: head.orth_weight,
            head_seed: head.seed,
            base_lr: train.base_lr,
            beta1: train.beta1,
            beta2: train.beta2,
            eps: train.eps,
            weight_decay: train.weight_decay,
            warmup_epochs: train.warmup_epochs,
            total_epochs: train.total_epochs,
            batch_size: train.batch_size,
            instance_dropout: train.instance_dropout,
            train_seed: train.seed,
            folds: 5,
            fold_seed: 0,
            synth_slides: synth.n_slides,
            synth_slide_size: synth.slide_width,
            synth_dim: embed.dim,
            synth_instances: embed.instances,
            synth_bags_per_slide: embed.bags_per_slide,
            synth_separation: embed.separation,
            synth_noise: embed.noise,
            synth_concept_alignment: embed.concept_alignment,
            synth_prompt_alignment: embed.prompt_alignment,
            synth_seed: synth.seed,
        }
    }
}

/// Parses an override value as a TOML scalar, falling back to a bare string.
fn override_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_owned())),
        Err(_) => toml::Value::String(raw.to_owned()),
    }
}

impl RunConfig {
    /// Builds a config from an optional file body plus `key=value` overrides.
    pub fn load(file: Option<&str>, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table = match file {
            Some(src) => src.parse::<toml::Table>().map_err(|e| ConfigError::Parse(e.to_string()))?,
            None => toml::Table::new(),
        };
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| ConfigError::BadOverride(o.clone()))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(ConfigError::BadOverride(o.clone()));
            }
            table.insert(k.to_owned(), override_value(v.trim()));
        }
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.train().validate().map_err(ConfigError::Invalid)?;
        self.synth().validate().map_err(ConfigError::Invalid)?;
        let check = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(ConfigError::Invalid(msg.to_owned())) };
        check(self.downsample >= 1, "downsample must be at least 1")?;
        check(self.tile_size >= 1 && self.tile_stride >= 1, "tile_size and tile_stride must be positive")?;
        check(self.folds >= 2, "folds must be at least 2")?;
        check(
            self.bottleneck_ratio >= 1 && self.dim >= self.bottleneck_ratio,
            "dim must be at least bottleneck_ratio",
        )?;
        check(
            self.tau_inst > 0.0 && self.tau_bag > 0.0 && self.tau_cls > 0.0,
            "temperatures must be positive",
        )?;
        check((0.0..=1.0).contains(&self.adapter_alpha), "adapter_alpha must lie in [0, 1]")?;
        check(
            self.stain_beta > 0.0 && self.stain_i0 > 0.0,
            "stain_beta and stain_i0 must be positive",
        )
    }

    /// Canonical text form: every key, sorted, one per line.
    pub fn canonical(&self) -> String {
        let value = toml::Value::try_from(self).expect("config serializes");
        let table = value.as_table().expect("struct serializes to a table");
        let mut keys: Vec<&String> = table.keys().collect();
        keys.sort();
        keys.into_iter()
            .map(|k| format!("{k} = {}\n", table[k]))
            .collect()
    }

    pub fn stain(&self) -> StainParams {
        StainParams {
            beta: self.stain_beta,
            alpha_pct: self.stain_alpha_pct,
            i0: self.stain_i0,
            max_conc_pct: self.stain_max_conc_pct,
        }
    }

    pub fn sample_plan(&self) -> SamplePlan {
        SamplePlan {
            per_class_count: self.per_class_count,
            seed: self.sample_seed,
            allow_short: self.allow_short,
        }
    }

    pub fn head(&self) -> HeadConfig {
        HeadConfig {
            dim: self.dim,
            data_concepts: self.data_concepts,
            context_rank: self.context_rank,
            bottleneck_ratio: self.bottleneck_ratio,
            alpha: self.adapter_alpha,
            tau_inst: self.tau_inst,
            tau_bag: self.tau_bag,
            tau_cls: self.tau_cls,
            orth_weight: self.orth_weight,
            seed: self.head_seed,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            base_lr: self.base_lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            warmup_epochs: self.warmup_epochs,
            total_epochs: self.total_epochs,
            batch_size: self.batch_size,
            instance_dropout: self.instance_dropout,
            seed: self.train_seed,
        }
    }

    pub fn synth(&self) -> SynthSpec {
        SynthSpec {
            n_slides: self.synth_slides,
            slide_width: self.synth_slide_size,
            slide_height: self.synth_slide_size,
            stains: DEFAULT_STAINS,
            concentrations: ConcentrationMix::default(),
            embed: EmbedSpec {
                dim: self.synth_dim,
                instances: self.synth_instances,
                separation: self.synth_separation,
                noise: self.synth_noise,
                bags_per_slide: self.synth_bags_per_slide,
                concept_alignment: self.synth_concept_alignment,
                prompt_alignment: self.synth_prompt_alignment,
            },
            seed: self.synth_seed,
            ..SynthSpec::default()
        }
    }
}
