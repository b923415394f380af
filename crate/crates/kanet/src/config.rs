//! Run configuration: a flat key-value file with command-line overrides.
//! Defaults follow the reference training recipe (temperature 16, loss
//! weights 1.5/2.0, lr 0.03 with cosine annealing, 50 epochs of 200
//! 20-way-10-shot tasks, 60-base/8x5 split); desk-scale runs override
//! them from a config file.

use std::path::{Path, PathBuf};

use crate::data::SyntheticConfig;
use crate::encoder::EncoderConfig;
use crate::error::{KanetError, Result};
use crate::ipel::IpelConfig;
use crate::protocol::SplitConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub alpha: f64,

    // Encoder.
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub layers_early: usize,
    pub layers_middle: usize,
    pub layers_post: usize,

    // Episode training.
    pub n_way: usize,
    pub k_shot: usize,
    pub query_per_class: usize,
    pub n_po_test: usize,
    pub tasks_per_epoch: usize,
    pub epochs: usize,
    pub lr0: f64,
    pub lambda_adapt: f64,
    pub lambda_balance: f64,

    // Synthetic data (ignored when a manifest is given).
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub sigma_between: f64,
    pub sigma_within: f64,

    // Session split.
    pub base_classes: usize,
    pub num_sessions: usize,
    pub classes_per_session: usize,
    pub shots_per_class: usize,

    // Evaluation ablations.
    pub baseline: bool,
    pub zero_library: bool,

    /// Optional dataset manifest; replaces synthetic generation.
    pub manifest: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            alpha: 16.0,
            image_size: 32,
            patch_size: 8,
            channels: 1,
            embed_dim: 64,
            num_heads: 4,
            layers_early: 2,
            layers_middle: 3,
            layers_post: 2,
            n_way: 20,
            k_shot: 10,
            query_per_class: 15,
            n_po_test: 128,
            tasks_per_epoch: 200,
            epochs: 50,
            lr0: 0.03,
            lambda_adapt: 1.5,
            lambda_balance: 2.0,
            num_classes: 100,
            train_per_class: 30,
            test_per_class: 10,
            sigma_between: 1.0,
            sigma_within: 0.5,
            base_classes: 60,
            num_sessions: 8,
            classes_per_session: 5,
            shots_per_class: 5,
            baseline: false,
            zero_library: false,
            manifest: None,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| KanetError::Config(format!("cannot parse {key} = {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(KanetError::Config(format!("cannot parse {key} = {value:?} as bool"))),
    }
}

impl RunConfig {
    /// Applies one `key = value` assignment.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_value(key, value)?,
            "alpha" => self.alpha = parse_value(key, value)?,
            "image_size" => self.image_size = parse_value(key, value)?,
            "patch_size" => self.patch_size = parse_value(key, value)?,
            "channels" => self.channels = parse_value(key, value)?,
            "embed_dim" => self.embed_dim = parse_value(key, value)?,
            "num_heads" => self.num_heads = parse_value(key, value)?,
            "layers_early" => self.layers_early = parse_value(key, value)?,
            "layers_middle" => self.layers_middle = parse_value(key, value)?,
            "layers_post" => self.layers_post = parse_value(key, value)?,
            "n_way" => self.n_way = parse_value(key, value)?,
            "k_shot" => self.k_shot = parse_value(key, value)?,
            "query_per_class" => self.query_per_class = parse_value(key, value)?,
            "n_po_test" => self.n_po_test = parse_value(key, value)?,
            "tasks_per_epoch" => self.tasks_per_epoch = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "lr0" => self.lr0 = parse_value(key, value)?,
            "lambda_adapt" => self.lambda_adapt = parse_value(key, value)?,
            "lambda_balance" => self.lambda_balance = parse_value(key, value)?,
            "num_classes" => self.num_classes = parse_value(key, value)?,
            "train_per_class" => self.train_per_class = parse_value(key, value)?,
            "test_per_class" => self.test_per_class = parse_value(key, value)?,
            "sigma_between" => self.sigma_between = parse_value(key, value)?,
            "sigma_within" => self.sigma_within = parse_value(key, value)?,
            "base_classes" => self.base_classes = parse_value(key, value)?,
            "num_sessions" => self.num_sessions = parse_value(key, value)?,
            "classes_per_session" => self.classes_per_session = parse_value(key, value)?,
            "shots_per_class" => self.shots_per_class = parse_value(key, value)?,
            "baseline" => self.baseline = parse_bool(key, value)?,
            "zero_library" => self.zero_library = parse_bool(key, value)?,
            "manifest" => self.manifest = Some(PathBuf::from(value)),
            other => return Err(KanetError::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Parses config text: one `key = value` per line, `#` comments.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(KanetError::Config(format!(
                    "line {}: expected key = value, got {line:?}",
                    i + 1
                )));
            };
            cfg.apply(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::parse(&text)?;
        // Relative manifest paths resolve against the config file.
        if let (Some(m), Some(dir)) = (cfg.manifest.as_ref(), path.parent()) {
            if m.is_relative() {
                cfg.manifest = Some(dir.join(m));
            }
        }
        Ok(cfg)
    }

    /// Moves the stage boundaries: `ks` layers feed the knowledge summary
    /// and fusion happens after layer `kf`, keeping the total layer count.
    pub fn apply_stage_split(&mut self, ks: usize, kf: usize) -> Result<()> {
        let total = self.layers_early + self.layers_middle + self.layers_post;
        if ks == 0 || ks >= kf || kf >= total {
            return Err(KanetError::Config(format!(
                "stage split needs 1 <= ks < kf < {total}, got ks={ks} kf={kf}"
            )));
        }
        self.layers_early = ks;
        self.layers_middle = kf - ks;
        self.layers_post = total - kf;
        Ok(())
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            image_size: self.image_size,
            patch_size: self.patch_size,
            channels: self.channels,
            embed_dim: self.embed_dim,
            num_heads: self.num_heads,
            n_early: self.layers_early,
            n_middle: self.layers_middle,
            n_post: self.layers_post,
            seed: self.seed,
        }
    }

    pub fn ipel_config(&self) -> IpelConfig {
        IpelConfig {
            n_way: self.n_way,
            k_shot: self.k_shot,
            query_per_class: self.query_per_class,
            n_po_test: self.n_po_test,
            tasks_per_epoch: self.tasks_per_epoch,
            epochs: self.epochs,
            lr0: self.lr0,
            alpha: self.alpha,
            lambda_adapt: self.lambda_adapt,
            lambda_balance: self.lambda_balance,
            seed: self.seed.wrapping_add(2),
        }
    }

    pub fn synthetic_config(&self) -> SyntheticConfig {
        SyntheticConfig {
            num_classes: self.num_classes,
            train_per_class: self.train_per_class,
            test_per_class: self.test_per_class,
            image_size: self.image_size,
            channels: self.channels,
            sigma_between: self.sigma_between,
            sigma_within: self.sigma_within,
            seed: self.seed.wrapping_add(1),
        }
    }

    pub fn split_config(&self) -> SplitConfig {
        SplitConfig {
            base_classes: self.base_classes,
            num_sessions: self.num_sessions,
            classes_per_session: self.classes_per_session,
            shots_per_class: self.shots_per_class,
            seed: self.seed.wrapping_add(3),
        }
    }

    /// Seed for the fusion parameter init, decoupled from the encoder's.
    pub fn fusion_seed(&self) -> u64 {
        self.seed.wrapping_add(4)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder_config().validate()?;
        self.ipel_config().validate()?;
        self.split_config().validate()?;
        if self.manifest.is_none() {
            self.synthetic_config().validate()?;
            if self.num_classes < self.split_config().total_classes() {
                return Err(KanetError::Config(format!(
                    "{} synthetic classes cannot fill a {}-class split",
                    self.num_classes,
                    self.split_config().total_classes()
                )));
            }
        }
        if !(self.alpha > 0.0) {
            return Err(KanetError::Config("alpha must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_reference_recipe() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.alpha, 16.0);
        assert_eq!(cfg.lambda_adapt, 1.5);
        assert_eq!(cfg.lambda_balance, 2.0);
        assert_eq!(cfg.lr0, 0.03);
        assert_eq!((cfg.n_way, cfg.k_shot, cfg.query_per_class), (20, 10, 15));
        assert_eq!(cfg.n_po_test, 128);
        assert_eq!((cfg.epochs, cfg.tasks_per_epoch), (50, 200));
        assert_eq!((cfg.base_classes, cfg.num_sessions, cfg.classes_per_session), (60, 8, 5));
        assert_eq!(cfg.shots_per_class, 5);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn parse_applies_overrides_and_rejects_unknown_keys() {
        let cfg = RunConfig::parse(
            "# desk run\nseed = 7\nembed_dim = 32\nbaseline = true\nsigma_within = 0.25\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.embed_dim, 32);
        assert!(cfg.baseline);
        assert_eq!(cfg.sigma_within, 0.25);

        assert!(RunConfig::parse("not_a_key = 3\n").is_err());
        assert!(RunConfig::parse("seed\n").is_err());
        assert!(RunConfig::parse("epochs = banana\n").is_err());
    }

    #[test]
    fn stage_split_moves_boundaries_only() {
        let mut cfg = RunConfig::default();
        assert_eq!(cfg.layers_early + cfg.layers_middle + cfg.layers_post, 7);
        cfg.apply_stage_split(4, 6).unwrap();
        assert_eq!((cfg.layers_early, cfg.layers_middle, cfg.layers_post), (4, 2, 1));
        assert!(cfg.apply_stage_split(0, 2).is_err());
        assert!(cfg.apply_stage_split(3, 3).is_err());
        assert!(cfg.apply_stage_split(3, 7).is_err());
    }

    #[test]
    fn validation_catches_inconsistent_geometry() {
        let mut cfg = RunConfig::default();
        cfg.embed_dim = 30; // not divisible by 4 heads
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.num_classes = 50; // cannot fill the 100-class split
        assert!(cfg.validate().is_err());
    }
}
