//! Flat `key = value` run configuration.
//!
//! ```text
//! mode = desk            # or `paper`; applied before every other key
//! seed = 7
//! pretrain.epochs = 20
//! backbone.stage_widths = 32, 64, 128
//! finetune.loss = mix
//! ```
//!
//! Blank lines and `#` comments are ignored. Unknown and repeated keys are
//! errors. `seed`, `steps`, `backbone.*`, `lif.*` and `augment.*` are shared
//! by both training phases.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::events::GeneratorParams;
use crate::snn::{BackboneConfig, ResetMode};
use crate::training::{FinetuneConfig, PretrainConfig, SupervisedLoss};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Mode {
    Paper,
    #[default]
    Desk,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Mode::Paper),
            "desk" => Ok(Mode::Desk),
            _ => Err(Error::Config(format!("mode must be `paper` or `desk`, got `{s}`"))),
        }
    }
}

/// Every knob of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub seed: u64,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub generator: GeneratorParams,
}

/// Accepted keys, in documentation order.
pub const KEYS: &[&str] = &[
    "mode",
    "seed",
    "steps",
    "backbone.stem_channels",
    "backbone.stem_stride",
    "backbone.stem_pool",
    "backbone.stage_widths",
    "backbone.blocks_per_stage",
    "backbone.embed_dim",
    "backbone.resolution",
    "backbone.bn_momentum",
    "backbone.bn_eps",
    "lif.tau",
    "lif.threshold",
    "lif.v_reset",
    "lif.reset",
    "lif.surrogate_alpha",
    "pretrain.momentum",
    "pretrain.batch_size",
    "pretrain.epochs",
    "pretrain.lr",
    "pretrain.sgd_momentum",
    "pretrain.weight_decay",
    "pretrain.milestones",
    "pretrain.lr_gamma",
    "contrastive.temperature",
    "contrastive.queue_len",
    "contrastive.alpha",
    "contrastive.beta",
    "contrastive.prefill_random",
    "augment.flip_prob",
    "augment.max_shear",
    "augment.max_translate",
    "augment.max_rotation_deg",
    "augment.scale_min",
    "augment.scale_max",
    "finetune.num_classes",
    "finetune.batch_size",
    "finetune.epochs",
    "finetune.lr",
    "finetune.weight_decay",
    "finetune.warmup_epochs",
    "finetune.loss",
    "finetune.alpha",
    "finetune.beta",
    "finetune.linear_probe",
    "finetune.augment",
    "finetune.eval_batch_size",
    "gen.width",
    "gen.height",
    "gen.num_classes",
    "gen.duration_us",
    "gen.event_rate",
    "gen.noise_fraction",
    "gen.bar_length",
    "gen.bar_thickness",
    "gen.travel",
    "gen.speed_jitter",
    "gen.offset_jitter",
    "gen.angle_jitter",
    "gen.position_noise",
];

fn num<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse()
        .map_err(|e| Error::Config(format!("`{key}`: cannot parse `{v}`: {e}")))
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    v.split(',').map(|p| num(key, p.trim())).collect()
}

fn resolution(key: &str, v: &str) -> Result<(usize, usize)> {
    let (h, w) = v
        .split_once('x')
        .ok_or_else(|| Error::Config(format!("`{key}` must look like `32x32`, got `{v}`")))?;
    Ok((num(key, h.trim())?, num(key, w.trim())?))
}

impl RunConfig {
    pub fn preset(mode: Mode) -> Self {
        let (pretrain, finetune, generator) = match mode {
            Mode::Paper => (PretrainConfig::paper(), FinetuneConfig::paper(), GeneratorParams::default()),
            Mode::Desk => (PretrainConfig::desk(), FinetuneConfig::desk(), GeneratorParams::desk()),
        };
        RunConfig {
            mode,
            seed: 0,
            pretrain,
            finetune,
            generator,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs: Vec<(usize, &str, &str)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(Error::Config(format!("line {}: unknown key `{k}`", i + 1)));
            }
            if pairs.iter().any(|(_, seen, _)| *seen == k) {
                return Err(Error::Config(format!("line {}: `{k}` set twice", i + 1)));
            }
            pairs.push((i + 1, k, v));
        }
        let mode = match pairs.iter().find(|(_, k, _)| *k == "mode") {
            Some((_, _, v)) => v.parse()?,
            None => Mode::default(),
        };
        let mut cfg = Self::preset(mode);
        let mut mix = (None, None);
        for &(line, k, v) in &pairs {
            cfg.apply(k, v, &mut mix)
                .map_err(|e| Error::Config(format!("line {line}: {e}")))?;
        }
        match (cfg.finetune.loss, mix) {
            (_, (None, None)) => {}
            (SupervisedLoss::Mix { .. }, (a, b)) => {
                cfg.finetune.loss = SupervisedLoss::Mix {
                    alpha: a.unwrap_or(0.5),
                    beta: b.unwrap_or(0.5),
                };
            }
            _ => {
                return Err(Error::Config(
                    "`finetune.alpha` and `finetune.beta` require `finetune.loss = mix`".into(),
                ))
            }
        }
        cfg.pretrain.seed = cfg.seed;
        cfg.finetune.seed = cfg.seed;
        cfg.pretrain.validate()?;
        cfg.finetune.validate()?;
        cfg.generator.validate()?;
        Ok(cfg)
    }

    fn backbones(&mut self) -> [&mut BackboneConfig; 2] {
        [&mut self.pretrain.backbone, &mut self.finetune.backbone]
    }

    fn apply(&mut self, key: &str, v: &str, mix: &mut (Option<f64>, Option<f64>)) -> Result<()> {
        let (section, field) = key.split_once('.').unwrap_or(("", key));
        match section {
            "" => match field {
                "mode" => {}
                "seed" => self.seed = num(key, v)?,
                "steps" => {
                    let s = num(key, v)?;
                    self.pretrain.steps = s;
                    self.finetune.steps = s;
                }
                _ => unreachable!("checked against KEYS"),
            },
            "backbone" | "lif" => {
                let parsed = BackboneField::parse(key, v)?;
                for b in self.backbones() {
                    parsed.set(b);
                }
            }
            "pretrain" => {
                let p = &mut self.pretrain;
                match field {
                    "momentum" => p.momentum = num(key, v)?,
                    "batch_size" => p.batch_size = num(key, v)?,
                    "epochs" => p.epochs = num(key, v)?,
                    "lr" => p.lr = num(key, v)?,
                    "sgd_momentum" => p.sgd_momentum = num(key, v)?,
                    "weight_decay" => p.weight_decay = num(key, v)?,
                    "milestones" => p.milestones = list(key, v)?,
                    "lr_gamma" => p.lr_gamma = num(key, v)?,
                    _ => unreachable!("checked against KEYS"),
                }
            }
            "contrastive" => {
                let c = &mut self.pretrain.contrastive;
                match field {
                    "temperature" => c.temperature = num(key, v)?,
                    "queue_len" => c.queue_len = num(key, v)?,
                    "alpha" => c.alpha = num(key, v)?,
                    "beta" => c.beta = num(key, v)?,
                    "prefill_random" => c.prefill_random = num(key, v)?,
                    _ => unreachable!("checked against KEYS"),
                }
            }
            "augment" => {
                let mut a = self.pretrain.augment.clone();
                match field {
                    "flip_prob" => a.flip_prob = num(key, v)?,
                    "max_shear" => a.max_shear = num(key, v)?,
                    "max_translate" => a.max_translate = num(key, v)?,
                    "max_rotation_deg" => a.max_rotation_deg = num(key, v)?,
                    "scale_min" => a.scale_range.0 = num(key, v)?,
                    "scale_max" => a.scale_range.1 = num(key, v)?,
                    _ => unreachable!("checked against KEYS"),
                }
                if self.finetune.augment.is_some() {
                    self.finetune.augment = Some(a.clone());
                }
                self.pretrain.augment = a;
            }
            "finetune" => {
                let f = &mut self.finetune;
                match field {
                    "num_classes" => f.num_classes = num(key, v)?,
                    "batch_size" => f.batch_size = num(key, v)?,
                    "epochs" => f.epochs = num(key, v)?,
                    "lr" => f.lr = num(key, v)?,
                    "weight_decay" => f.weight_decay = num(key, v)?,
                    "warmup_epochs" => f.warmup_epochs = num(key, v)?,
                    "loss" => {
                        f.loss = match v {
                            "mac" => SupervisedLoss::Mac,
                            "mbc" => SupervisedLoss::Mbc,
                            "mix" => SupervisedLoss::Mix { alpha: 0.5, beta: 0.5 },
                            _ => return Err(Error::Config(format!("`{key}` must be mac, mbc or mix, got `{v}`"))),
                        }
                    }
                    "alpha" => mix.0 = Some(num(key, v)?),
                    "beta" => mix.1 = Some(num(key, v)?),
                    "linear_probe" => f.linear_probe = num(key, v)?,
                    "augment" => {
                        let on: bool = num(key, v)?;
                        f.augment = on.then(|| self.pretrain.augment.clone());
                    }
                    "eval_batch_size" => f.eval_batch_size = num(key, v)?,
                    _ => unreachable!("checked against KEYS"),
                }
            }
            "gen" => {
                let g = &mut self.generator;
                match field {
                    "width" => g.width = num(key, v)?,
                    "height" => g.height = num(key, v)?,
                    "num_classes" => g.num_classes = num(key, v)?,
                    "duration_us" => g.duration_us = num(key, v)?,
                    "event_rate" => g.event_rate = num(key, v)?,
                    "noise_fraction" => g.noise_fraction = num(key, v)?,
                    "bar_length" => g.bar_length = num(key, v)?,
                    "bar_thickness" => g.bar_thickness = num(key, v)?,
                    "travel" => g.travel = num(key, v)?,
                    "speed_jitter" => g.speed_jitter = num(key, v)?,
                    "offset_jitter" => g.offset_jitter = num(key, v)?,
                    "angle_jitter" => g.angle_jitter = num(key, v)?,
                    "position_noise" => g.position_noise = num(key, v)?,
                    _ => unreachable!("checked against KEYS"),
                }
            }
            _ => unreachable!("checked against KEYS"),
        }
        Ok(())
    }
}

/// A parsed backbone or neuron setting, applied to both phases.
enum BackboneField {
    StemChannels(usize),
    StemStride(usize),
    StemPool(bool),
    StageWidths(Vec<usize>),
    Blocks(Vec<usize>),
    EmbedDim(usize),
    Resolution((usize, usize)),
    BnMomentum(f64),
    BnEps(f64),
    Tau(f64),
    Threshold(f64),
    VReset(f64),
    Reset(ResetMode),
    SurrogateAlpha(f64),
}

impl BackboneField {
    fn parse(key: &str, v: &str) -> Result<Self> {
        use BackboneField::*;
        Ok(match key {
            "backbone.stem_channels" => StemChannels(num(key, v)?),
            "backbone.stem_stride" => StemStride(num(key, v)?),
            "backbone.stem_pool" => StemPool(num(key, v)?),
            "backbone.stage_widths" => StageWidths(list(key, v)?),
            "backbone.blocks_per_stage" => Blocks(list(key, v)?),
            "backbone.embed_dim" => EmbedDim(num(key, v)?),
            "backbone.resolution" => Resolution(resolution(key, v)?),
            "backbone.bn_momentum" => BnMomentum(num(key, v)?),
            "backbone.bn_eps" => BnEps(num(key, v)?),
            "lif.tau" => Tau(num(key, v)?),
            "lif.threshold" => Threshold(num(key, v)?),
            "lif.v_reset" => VReset(num(key, v)?),
            "lif.reset" => Reset(match v {
                "hard" => ResetMode::Hard,
                "soft" => ResetMode::Soft,
                _ => return Err(Error::Config(format!("`{key}` must be hard or soft, got `{v}`"))),
            }),
            "lif.surrogate_alpha" => SurrogateAlpha(num(key, v)?),
            _ => unreachable!("checked against KEYS"),
        })
    }

    fn set(&self, b: &mut BackboneConfig) {
        use BackboneField::*;
        match self {
            StemChannels(v) => b.stem_channels = *v,
            StemStride(v) => b.stem_stride = *v,
            StemPool(v) => b.stem_pool = *v,
            StageWidths(v) => b.stage_widths = v.clone(),
            Blocks(v) => b.blocks_per_stage = v.clone(),
            EmbedDim(v) => b.embed_dim = *v,
            Resolution(v) => b.resolution = *v,
            BnMomentum(v) => b.bn_momentum = *v,
            BnEps(v) => b.bn_eps = *v,
            Tau(v) => b.lif.tau_mem = *v,
            Threshold(v) => b.lif.v_threshold = *v,
            VReset(v) => b.lif.v_reset = *v,
            Reset(v) => b.lif.reset_mode = *v,
            SurrogateAlpha(v) => b.lif.surrogate.alpha = *v,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_is_desk_preset() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg, RunConfig::preset(Mode::Desk));
        assert_eq!(cfg.pretrain.epochs, 20);
        assert_eq!(cfg.finetune.epochs, 10);
    }

    #[test]
    fn paper_mode_and_overrides() {
        let text = "\
# comment
mode = paper
seed = 9   # trailing comment
steps = 8
pretrain.lr = 0.05
backbone.stage_widths = 16, 32
backbone.blocks_per_stage = 2,1
backbone.resolution = 48x64
lif.reset = soft
finetune.loss = mix
finetune.alpha = 0.25
finetune.beta = 0.75
augment.flip_prob = 0
finetune.augment = true
";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.mode, Mode::Paper);
        assert_eq!((cfg.seed, cfg.pretrain.seed, cfg.finetune.seed), (9, 9, 9));
        assert_eq!((cfg.pretrain.steps, cfg.finetune.steps), (8, 8));
        assert_eq!(cfg.pretrain.epochs, 200);
        assert_eq!(cfg.pretrain.lr, 0.05);
        for b in [&cfg.pretrain.backbone, &cfg.finetune.backbone] {
            assert_eq!(b.stage_widths, [16, 32]);
            assert_eq!(b.blocks_per_stage, [2, 1]);
            assert_eq!(b.resolution, (48, 64));
            assert_eq!(b.lif.reset_mode, ResetMode::Soft);
        }
        assert_eq!(cfg.finetune.loss, SupervisedLoss::Mix { alpha: 0.25, beta: 0.75 });
        assert_eq!(cfg.finetune.augment.as_ref().unwrap().flip_prob, 0.0);
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "pretrain.lrr = 0.1",
            "seed = 1\nseed = 2",
            "no equals sign",
            "mode = lab",
            "pretrain.epochs = many",
            "finetune.alpha = 0.3",
            "finetune.loss = mix\nfinetune.alpha = 0.3",
            "contrastive.alpha = 0.9",
            "finetune.warmup_epochs = 50",
            "backbone.resolution = 32",
            "lif.reset = medium",
        ] {
            let err = RunConfig::parse(text).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{text}: {err}");
        }
    }

    #[test]
    fn every_key_is_accepted() {
        let cfg = RunConfig::preset(Mode::Desk);
        let values = |k: &str| -> String {
            match k {
                "mode" => "desk".into(),
                "backbone.stage_widths" | "backbone.blocks_per_stage" => "1, 1".into(),
                "backbone.resolution" => "32x32".into(),
                "lif.reset" => "hard".into(),
                "pretrain.milestones" => "0.5".into(),
                "finetune.loss" => "mix".into(),
                "finetune.alpha" | "finetune.beta" => "0.5".into(),
                k if k.ends_with("prefill_random") || k.ends_with("linear_probe") || k.ends_with("stem_pool") => {
                    "true".into()
                }
                "finetune.augment" => "false".into(),
                "seed" => "3".into(),
                _ => "1".into(),
            }
        };
        for k in KEYS {
            let text = format!("{k} = {}", values(k));
            if let Err(e) = RunConfig::parse(&text) {
                // Values of 1 may break cross-field checks but never the key lookup.
                assert!(!e.to_string().contains("unknown key"), "{k}: {e}");
            }
        }
        assert_eq!(cfg, RunConfig::preset(Mode::Desk));
    }
}
