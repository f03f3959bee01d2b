use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mdn::{MdnConfig, RegressionMode};
use crate::sfe::{MemoryMode, SfeConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    Sfe,
    Mdn,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Sfe => "sfe",
            Stage::Mdn => "mdn",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sfe" => Ok(Stage::Sfe),
            "mdn" => Ok(Stage::Mdn),
            other => Err(Error::Config(format!(
                "stage must be sfe or mdn, got `{other}`"
            ))),
        }
    }
}

/// Fully resolved settings of one training run. The canonical text form
/// lists every key in [`TrainConfig::KEYS`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub val_fraction: f64,
    pub memory: MemoryMode,
    pub hidden: usize,
    pub feature_dim: usize,
    pub content_slots: usize,
    pub identity_slots: usize,
    pub addresser_hidden: usize,
    pub target_hidden: usize,
    pub components: usize,
    pub mdn_hidden: usize,
    pub context_frames: usize,
    pub regression: RegressionMode,
    pub finetune_sfe: bool,
    pub sfe_bypass: bool,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

impl TrainConfig {
    pub const KEYS: [&'static str; 19] = [
        "stage",
        "seed",
        "epochs",
        "batch_size",
        "lr",
        "val_fraction",
        "memory",
        "hidden",
        "feature_dim",
        "content_slots",
        "identity_slots",
        "addresser_hidden",
        "target_hidden",
        "components",
        "mdn_hidden",
        "context_frames",
        "regression",
        "finetune_sfe",
        "sfe_bypass",
    ];

    /// Defaults for `stage` with the given seed.
    pub fn new(stage: Stage, seed: u64) -> Self {
        let sfe = SfeConfig::default();
        let mdn = MdnConfig::default();
        TrainConfig {
            stage,
            seed,
            epochs: 200,
            batch_size: 4,
            lr: 1e-3,
            val_fraction: 0.2,
            memory: sfe.memory,
            hidden: sfe.hidden,
            feature_dim: sfe.feature_dim,
            content_slots: sfe.content_slots,
            identity_slots: sfe.identity_slots,
            addresser_hidden: sfe.addresser_hidden,
            target_hidden: sfe.target_hidden,
            components: mdn.components,
            mdn_hidden: mdn.hidden,
            context_frames: mdn.context_frames,
            regression: RegressionMode::Ftt,
            finetune_sfe: false,
            sfe_bypass: false,
        }
    }

    pub fn get(&self, key: &str) -> Result<String> {
        Ok(match key {
            "stage" => self.stage.to_string(),
            "seed" => self.seed.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "lr" => self.lr.to_string(),
            "val_fraction" => self.val_fraction.to_string(),
            "memory" => self.memory.to_string(),
            "hidden" => self.hidden.to_string(),
            "feature_dim" => self.feature_dim.to_string(),
            "content_slots" => self.content_slots.to_string(),
            "identity_slots" => self.identity_slots.to_string(),
            "addresser_hidden" => self.addresser_hidden.to_string(),
            "target_hidden" => self.target_hidden.to_string(),
            "components" => self.components.to_string(),
            "mdn_hidden" => self.mdn_hidden.to_string(),
            "context_frames" => self.context_frames.to_string(),
            "regression" => self.regression.to_string(),
            "finetune_sfe" => self.finetune_sfe.to_string(),
            "sfe_bypass" => self.sfe_bypass.to_string(),
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "stage" => self.stage = v.parse()?,
            "seed" => self.seed = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "val_fraction" => self.val_fraction = parse(key, v)?,
            "memory" => self.memory = v.parse()?,
            "hidden" => self.hidden = parse(key, v)?,
            "feature_dim" => self.feature_dim = parse(key, v)?,
            "content_slots" => self.content_slots = parse(key, v)?,
            "identity_slots" => self.identity_slots = parse(key, v)?,
            "addresser_hidden" => self.addresser_hidden = parse(key, v)?,
            "target_hidden" => self.target_hidden = parse(key, v)?,
            "components" => self.components = parse(key, v)?,
            "mdn_hidden" => self.mdn_hidden = parse(key, v)?,
            "context_frames" => self.context_frames = parse(key, v)?,
            "regression" => self.regression = v.parse()?,
            "finetune_sfe" => self.finetune_sfe = parse(key, v)?,
            "sfe_bypass" => self.sfe_bypass = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Starts from the defaults of `stage` and applies each layer of
    /// `(key, value)` pairs in order, later layers winning. Some layer must
    /// set `seed`.
    pub fn resolve(stage: Stage, layers: &[Vec<(String, String)>]) -> Result<Self> {
        let mut cfg = TrainConfig::new(stage, 0);
        let mut seeded = false;
        for layer in layers {
            for (k, v) in layer {
                cfg.set(k, v)?;
                seeded |= k == "seed";
            }
        }
        if !seeded {
            return Err(Error::Config("`seed` is mandatory".into()));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses a complete config text, e.g. one embedded in a checkpoint.
    pub fn from_text(text: &str) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        let stage = pairs
            .iter()
            .find(|(k, _)| k == "stage")
            .map(|(_, v)| v.parse())
            .transpose()?
            .ok_or_else(|| Error::Config("config text has no `stage`".into()))?;
        TrainConfig::resolve(stage, &[pairs])
    }

    pub fn to_text(&self) -> String {
        Self::KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("known key")))
            .collect()
    }

    /// Hex SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_text().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 && self.stage == Stage::Sfe {
            return Err(Error::Config(
                "sfe batch_size must be at least 2 for the identity loss".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!(
                "val_fraction must be in [0, 1), got {}",
                self.val_fraction
            )));
        }
        self.sfe_config().validate()?;
        self.mdn_config().validate()
    }

    pub fn sfe_config(&self) -> SfeConfig {
        SfeConfig {
            hidden: self.hidden,
            feature_dim: self.feature_dim,
            content_slots: self.content_slots,
            identity_slots: self.identity_slots,
            addresser_hidden: self.addresser_hidden,
            target_hidden: self.target_hidden,
            memory: self.memory,
            ..SfeConfig::default()
        }
    }

    pub fn mdn_config(&self) -> MdnConfig {
        MdnConfig {
            components: self.components,
            hidden: self.mdn_hidden,
            context_frames: self.context_frames,
        }
    }
}

/// `key = value` lines; `#` starts a comment, blank lines are skipped and a
/// key may appear once.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("config line {}: expected `key = value`", i + 1))
        })?;
        let (k, v) = (k.trim(), v.trim());
        if !TrainConfig::KEYS.contains(&k) {
            return Err(Error::Config(format!(
                "config line {}: unknown key `{k}`",
                i + 1
            )));
        }
        if out.iter().any(|(seen, _)| seen == k) {
            return Err(Error::Config(format!(
                "config line {}: duplicate key `{k}`",
                i + 1
            )));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(items: &[(&str, &str)]) -> Vec<(String, String)> {
        items
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    #[test]
    fn text_round_trip_and_stable_hash() {
        let mut c = TrainConfig::new(Stage::Mdn, 17);
        c.lr = 3e-4;
        c.memory = MemoryMode::W;
        let back = TrainConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_eq!(c.hash().len(), 64);
        c.components = 5;
        assert_ne!(back.hash(), c.hash());
    }

    #[test]
    fn later_layers_win_and_seed_is_mandatory() {
        let file = pairs(&[("seed", "3"), ("epochs", "10"), ("memory", "wo")]);
        let flags = pairs(&[("epochs", "20")]);
        let c = TrainConfig::resolve(Stage::Sfe, &[file, flags]).unwrap();
        assert_eq!((c.seed, c.epochs, c.memory), (3, 20, MemoryMode::Wo));
        assert!(TrainConfig::resolve(Stage::Sfe, &[pairs(&[("epochs", "5")])]).is_err());
    }

    #[test]
    fn bad_lines_are_rejected() {
        assert!(parse_pairs("seed = 1\nbogus = 2\n").is_err());
        assert!(parse_pairs("seed = 1\nseed = 2\n").is_err());
        assert!(parse_pairs("no equals sign\n").is_err());
        assert_eq!(
            parse_pairs("# c\n\nseed=4 # trailing\n").unwrap(),
            pairs(&[("seed", "4")])
        );
        let mut c = TrainConfig::new(Stage::Mdn, 0);
        assert!(c.set("components", "9").is_ok());
        assert!(c.validate().is_err());
        assert!(c.set("regression", "f_x").is_err());
    }
}
