//! Run configuration and its flat `key = value` text form.
//!
//! The same text form is used for config files and for the manifest written
//! at the start of every run, so a manifest can be fed back in as a config.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::data::{AugmentConfig, ClusterSpec};
use crate::encoder::SgdConfig;
use crate::error::{MixcoError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// InfoNCE against the momentum-encoder queue.
    Moco,
    /// `Moco` plus the mix-up term.
    MocoMixco,
    /// In-batch negatives, no key encoder or queue.
    Simclr,
    /// `Simclr` plus the mix-up term, contrasted against batch keys only.
    SimclrMixco,
}

impl Mode {
    pub fn uses_momentum_encoder(self) -> bool {
        matches!(self, Mode::Moco | Mode::MocoMixco)
    }

    pub fn mixco_active(self) -> bool {
        matches!(self, Mode::MocoMixco | Mode::SimclrMixco)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Moco => "moco",
            Mode::MocoMixco => "moco+mixco",
            Mode::Simclr => "simclr",
            Mode::SimclrMixco => "simclr+mixco",
        }
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "moco" => Ok(Mode::Moco),
            "moco+mixco" => Ok(Mode::MocoMixco),
            "simclr" => Ok(Mode::Simclr),
            "simclr+mixco" => Ok(Mode::SimclrMixco),
            _ => Err(format!(
                "unknown mode `{s}` (expected moco, moco+mixco, simclr or simclr+mixco)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrSchedule {
    /// `lr · ½(1 + cos(π·epoch/epochs))`, stepped per epoch.
    Cosine,
    Constant,
}

impl LrSchedule {
    pub fn lr_at(self, base: f64, epoch: usize, epochs: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let t = epoch as f64 / epochs.max(1) as f64;
                base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

impl FromStr for LrSchedule {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "cosine" => Ok(LrSchedule::Cosine),
            "constant" => Ok(LrSchedule::Constant),
            _ => Err(format!("unknown lr_schedule `{s}` (expected cosine or constant)")),
        }
    }
}

impl LrSchedule {
    fn as_str(self) -> &'static str {
        match self {
            LrSchedule::Cosine => "cosine",
            LrSchedule::Constant => "constant",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub seed: u64,
    pub batch_size: usize,
    /// Negative queue length `K`; must be 0 in the in-batch modes.
    pub queue_size: usize,
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    /// Embedding width `C`.
    pub embed_dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    /// EMA coefficient of the key encoder.
    pub key_momentum: f64,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub tau: f64,
    pub tau_mix: f64,
    pub beta: f64,
    pub augment: AugmentConfig,
    /// Synthetic data used when `data_path` is unset (`dim` is `input_dim`).
    pub classes: usize,
    pub per_class: usize,
    pub center_spread: f64,
    pub within_sigma: f64,
    pub data_path: Option<String>,
    pub test_fraction: f64,
    pub probe_epochs: usize,
    /// Base probe learning rate, scaled by `probe_batch / 256` when used.
    pub probe_lr: f64,
    pub probe_batch: usize,
    /// Record wall-clock seconds in the metrics log. Off by default so logs
    /// are reproducible byte for byte.
    pub record_wall_clock: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let spec = ClusterSpec::default();
        RunConfig {
            mode: Mode::MocoMixco,
            seed: 0,
            batch_size: 64,
            queue_size: 1024,
            input_dim: spec.dim,
            hidden: vec![64],
            embed_dim: 64,
            epochs: 50,
            lr: 0.05,
            lr_schedule: LrSchedule::Cosine,
            key_momentum: 0.999,
            sgd_momentum: 0.9,
            weight_decay: 1e-4,
            tau: 0.2,
            tau_mix: 0.05,
            beta: 1.0,
            augment: AugmentConfig::default(),
            classes: spec.class_count,
            per_class: spec.per_class,
            center_spread: spec.center_spread,
            within_sigma: spec.within_sigma,
            data_path: None,
            test_fraction: 0.2,
            probe_epochs: 100,
            probe_lr: 3.0,
            probe_batch: 64,
            record_wall_clock: false,
        }
    }
}

fn parse_field<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| MixcoError::config(format!("field `{key}`: cannot parse `{value}`: {e}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|s| parse_field(key, s.trim()))
        .collect()
}

impl RunConfig {
    /// Encoder layer widths `[D, hidden..., C]`.
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_dim];
        sizes.extend(&self.hidden);
        sizes.push(self.embed_dim);
        sizes
    }

    pub fn sgd(&self, lr: f64) -> SgdConfig {
        SgdConfig {
            lr,
            momentum: self.sgd_momentum,
            weight_decay: self.weight_decay,
        }
    }

    pub fn cluster_spec(&self) -> ClusterSpec {
        ClusterSpec {
            class_count: self.classes,
            per_class: self.per_class,
            dim: self.input_dim,
            center_spread: self.center_spread,
            within_sigma: self.within_sigma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, msg: String| Err(MixcoError::config(format!("field `{field}`: {msg}")));
        if !(self.tau > 0.0) {
            return fail("tau", format!("must be positive, got {}", self.tau));
        }
        if !(self.tau_mix > 0.0) {
            return fail("tau_mix", format!("must be positive, got {}", self.tau_mix));
        }
        if !(self.beta >= 0.0) {
            return fail("beta", format!("must be nonnegative, got {}", self.beta));
        }
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return fail("batch_size", format!("must be even and at least 2, got {}", self.batch_size));
        }
        if self.mode.uses_momentum_encoder() {
            if self.queue_size % self.batch_size != 0 {
                return fail(
                    "queue_size",
                    format!(
                        "must be a multiple of batch_size {}, got {}",
                        self.batch_size, self.queue_size
                    ),
                );
            }
        } else if self.queue_size != 0 {
            return fail("queue_size", format!("must be 0 in {} mode", self.mode.as_str()));
        }
        if !(0.0..=1.0).contains(&self.key_momentum) {
            return fail("key_momentum", format!("must be in [0, 1], got {}", self.key_momentum));
        }
        if !(0.0..1.0).contains(&self.sgd_momentum) {
            return fail("sgd_momentum", format!("must be in [0, 1), got {}", self.sgd_momentum));
        }
        if !(self.lr >= 0.0) {
            return fail("lr", format!("must be nonnegative, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0) {
            return fail("weight_decay", format!("must be nonnegative, got {}", self.weight_decay));
        }
        if self.input_dim == 0 || self.embed_dim == 0 || self.hidden.contains(&0) {
            return fail("hidden", "all layer widths must be positive".into());
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return fail("test_fraction", format!("must be in (0, 1), got {}", self.test_fraction));
        }
        if !(self.probe_lr >= 0.0) || self.probe_batch == 0 {
            return fail("probe_lr", "probe lr must be >= 0 and probe_batch positive".into());
        }
        self.augment
            .validate()
            .map_err(|e| MixcoError::config(format!("augmentation: {e}")))
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "mode" => self.mode = parse_field(key, v)?,
            "seed" => self.seed = parse_field(key, v)?,
            "batch_size" => self.batch_size = parse_field(key, v)?,
            "queue_size" => self.queue_size = parse_field(key, v)?,
            "input_dim" => self.input_dim = parse_field(key, v)?,
            "hidden" => self.hidden = parse_list(key, v)?,
            "embed_dim" => self.embed_dim = parse_field(key, v)?,
            "epochs" => self.epochs = parse_field(key, v)?,
            "lr" => self.lr = parse_field(key, v)?,
            "lr_schedule" => self.lr_schedule = parse_field(key, v)?,
            "key_momentum" => self.key_momentum = parse_field(key, v)?,
            "sgd_momentum" => self.sgd_momentum = parse_field(key, v)?,
            "weight_decay" => self.weight_decay = parse_field(key, v)?,
            "tau" => self.tau = parse_field(key, v)?,
            "tau_mix" => self.tau_mix = parse_field(key, v)?,
            "beta" => self.beta = parse_field(key, v)?,
            "noise_sigma" => self.augment.noise_sigma = parse_field(key, v)?,
            "mask_fraction" => self.augment.mask_fraction = parse_field(key, v)?,
            "scale_lo" => self.augment.scale_jitter.0 = parse_field(key, v)?,
            "scale_hi" => self.augment.scale_jitter.1 = parse_field(key, v)?,
            "classes" => self.classes = parse_field(key, v)?,
            "per_class" => self.per_class = parse_field(key, v)?,
            "center_spread" => self.center_spread = parse_field(key, v)?,
            "within_sigma" => self.within_sigma = parse_field(key, v)?,
            "data_path" => self.data_path = (!v.is_empty()).then(|| v.to_string()),
            "test_fraction" => self.test_fraction = parse_field(key, v)?,
            "probe_epochs" => self.probe_epochs = parse_field(key, v)?,
            "probe_lr" => self.probe_lr = parse_field(key, v)?,
            "probe_batch" => self.probe_batch = parse_field(key, v)?,
            "record_wall_clock" => self.record_wall_clock = parse_field(key, v)?,
            other => return Err(MixcoError::config(format!("unknown field `{other}`"))),
        }
        Ok(())
    }

    /// Applies an override of the form `key=value`.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment.split_once('=').ok_or_else(|| {
            MixcoError::config(format!("override `{assignment}` is not of the form key=value"))
        })?;
        self.set(k, v)
    }

    /// Parses a config file body on top of the defaults. Blank lines and
    /// lines starting with `#` are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                MixcoError::config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            cfg.set(k, v)
                .map_err(|e| MixcoError::config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(cfg)
    }

    /// Every field, one per line, in a fixed order.
    pub fn to_text(&self) -> String {
        let hidden = self
            .hidden
            .iter()
            .map(|h| h.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("mode", self.mode.as_str().into());
        kv("seed", self.seed.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("queue_size", self.queue_size.to_string());
        kv("input_dim", self.input_dim.to_string());
        kv("hidden", hidden);
        kv("embed_dim", self.embed_dim.to_string());
        kv("epochs", self.epochs.to_string());
        kv("lr", format!("{:e}", self.lr));
        kv("lr_schedule", self.lr_schedule.as_str().into());
        kv("key_momentum", format!("{:e}", self.key_momentum));
        kv("sgd_momentum", format!("{:e}", self.sgd_momentum));
        kv("weight_decay", format!("{:e}", self.weight_decay));
        kv("tau", format!("{:e}", self.tau));
        kv("tau_mix", format!("{:e}", self.tau_mix));
        kv("beta", format!("{:e}", self.beta));
        kv("noise_sigma", format!("{:e}", self.augment.noise_sigma));
        kv("mask_fraction", format!("{:e}", self.augment.mask_fraction));
        kv("scale_lo", format!("{:e}", self.augment.scale_jitter.0));
        kv("scale_hi", format!("{:e}", self.augment.scale_jitter.1));
        kv("classes", self.classes.to_string());
        kv("per_class", self.per_class.to_string());
        kv("center_spread", format!("{:e}", self.center_spread));
        kv("within_sigma", format!("{:e}", self.within_sigma));
        kv("data_path", self.data_path.clone().unwrap_or_default());
        kv("test_fraction", format!("{:e}", self.test_fraction));
        kv("probe_epochs", self.probe_epochs.to_string());
        kv("probe_lr", format!("{:e}", self.probe_lr));
        kv("probe_batch", self.probe_batch.to_string());
        kv("record_wall_clock", self.record_wall_clock.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.beta, 1.0);
        assert_eq!(cfg.tau_mix, 0.05);
        assert_eq!(cfg.layer_sizes(), vec![20, 64, 64]);
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_and_errors() {
        let mut cfg = RunConfig::parse("# comment\nbeta = 0.5\nhidden = 32,16\n").unwrap();
        assert_eq!(cfg.beta, 0.5);
        assert_eq!(cfg.hidden, vec![32, 16]);
        cfg.apply_override("mode=simclr").unwrap();
        assert!(cfg.validate().unwrap_err().to_string().contains("queue_size"));
        cfg.apply_override("queue_size=0").unwrap();
        cfg.validate().unwrap();

        let err = RunConfig::parse("tau = fast\n").unwrap_err().to_string();
        assert!(err.contains("tau") && err.contains("line 1"), "{err}");
        assert!(RunConfig::parse("bogus = 1\n").unwrap_err().to_string().contains("bogus"));
        assert!(cfg.apply_override("tau").is_err());
    }

    #[test]
    fn invalid_values() {
        for (k, v) in [
            ("tau", "0"),
            ("tau_mix", "-1"),
            ("beta", "-0.1"),
            ("batch_size", "7"),
            ("queue_size", "100"),
            ("key_momentum", "1.5"),
        ] {
            let mut cfg = RunConfig::default();
            cfg.set(k, v).unwrap();
            let err = cfg.validate().unwrap_err().to_string();
            assert!(err.contains(k), "{k}: {err}");
        }
    }

    #[test]
    fn cosine_schedule() {
        let s = LrSchedule::Cosine;
        assert_eq!(s.lr_at(0.4, 0, 10), 0.4);
        assert!((s.lr_at(0.4, 5, 10) - 0.2).abs() < 1e-15);
        assert_eq!(LrSchedule::Constant.lr_at(0.4, 7, 10), 0.4);
    }
}
