use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Order, Toggles};
use crate::retrieval::DEFAULT_PREFIX;
use crate::training::TrainConfig;

pub const SEED_ENV: &str = "FACE_FORGE_SEED";

/// Every setting a command can use. Resolution order: defaults, then the
/// profile's loss weights, then the config file, then command-line flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub word_vectors: Option<PathBuf>,
    pub emotions: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub d: usize,
    pub frames: usize,
    pub n_q: usize,
    pub k: usize,
    pub profile: String,
    pub seed: u64,
    /// Seed of the deterministic word embeddings; shared by data generation
    /// and training so both see the same vectors.
    pub embedding_seed: u64,
    pub delta: f64,
    pub lambda_e: f64,
    pub lambda_cls: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub checkpoint_every: usize,
    pub target_loss: Option<f64>,
    pub ablate: Vec<String>,
    pub order: Order,
    pub beam: usize,
    pub max_len: usize,
    pub prefix: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            dataset: None,
            corpus: None,
            word_vectors: None,
            emotions: None,
            checkpoint: None,
            out: None,
            d: 300,
            frames: 16,
            n_q: 32,
            k: t.k,
            profile: "msvd".into(),
            seed: 0,
            embedding_seed: 0,
            delta: t.delta,
            lambda_e: t.lambda_e,
            lambda_cls: t.lambda_cls,
            lr: t.lr,
            batch_size: t.batch_size,
            max_steps: t.max_steps,
            checkpoint_every: 0,
            target_loss: None,
            ablate: Vec::new(),
            order: Order::FactFirst,
            beam: crate::generation::DEFAULT_BEAM,
            max_len: crate::generation::DEFAULT_MAX_LEN,
            prefix: DEFAULT_PREFIX.into(),
        }
    }
}

/// `(δ, λ_cls)` per dataset profile.
pub fn profile_weights(profile: &str) -> Result<(f64, f64)> {
    match profile {
        "msvd" => Ok((0.1, 0.1)),
        "ve" => Ok((0.2, 0.5)),
        "combine" => Ok((0.1, 0.2)),
        other => Err(Error::config(format!("unknown profile {other:?} (expected msvd|ve|combine)"))),
    }
}

impl RunConfig {
    /// Builds the config from an optional JSON file plus flag overrides
    /// (a JSON object of the same fields). `env_seed` is used only when
    /// neither source sets `seed`.
    pub fn resolve(file: Option<&Path>, flags: serde_json::Value, env_seed: Option<&str>) -> Result<Self> {
        let file_value = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::config(format!("cannot read config {}: {e}", p.display())))?;
                let v: serde_json::Value = serde_json::from_str(&text)
                    .map_err(|e| Error::config(format!("config {}: {e}", p.display())))?;
                if !v.is_object() {
                    return Err(Error::config("config file must hold a JSON object"));
                }
                v
            }
            None => serde_json::json!({}),
        };
        let profile = flags
            .get("profile")
            .or_else(|| file_value.get("profile"))
            .and_then(|p| p.as_str())
            .unwrap_or("msvd")
            .to_string();
        let (delta, lambda_cls) = profile_weights(&profile)?;
        let mut base = RunConfig { profile, delta, lambda_cls, ..RunConfig::default() };
        let seed_set = file_value.get("seed").is_some() || flags.get("seed").is_some();
        if !seed_set {
            if let Some(s) = env_seed {
                base.seed = s
                    .trim()
                    .parse()
                    .map_err(|_| Error::config(format!("{SEED_ENV} is not an integer: {s:?}")))?;
            }
        }
        let mut merged = serde_json::to_value(&base)?;
        for layer in [&file_value, &flags] {
            if let (Some(dst), Some(src)) = (merged.as_object_mut(), layer.as_object()) {
                for (k, v) in src {
                    dst.insert(k.clone(), v.clone());
                }
            }
        }
        let cfg: RunConfig = serde_json::from_value(merged).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.frames == 0 || self.n_q == 0 || self.k == 0 || self.max_len == 0 || self.beam == 0 {
            return Err(Error::config("dimensions, k, beam and max_len must be positive"));
        }
        self.toggles()?;
        self.train_config()?.validate()
    }

    pub fn toggles(&self) -> Result<Toggles> {
        let mut t = Toggles::default();
        for a in &self.ablate {
            t.ablate(a).map_err(|e| Error::config(e.to_string()))?;
        }
        Ok(t)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            delta: self.delta,
            lambda_e: self.lambda_e,
            lambda_cls: self.lambda_cls,
            lr: self.lr,
            batch_size: self.batch_size,
            max_steps: self.max_steps,
            seed: self.seed,
            toggles: self.toggles()?,
            k: self.k,
            order: self.order,
            checkpoint_every: self.checkpoint_every,
            target_loss: self.target_loss,
        })
    }

    pub fn require<'a>(&self, path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
        path.as_deref().ok_or_else(|| Error::usage(format!("missing --{flag}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn precedence_defaults_profile_file_flags() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.json");
        std::fs::write(&file, r#"{"profile": "ve", "lambda_cls": 0.7, "k": 6, "seed": 5}"#).unwrap();
        let cfg = RunConfig::resolve(Some(&file), json!({"k": 3}), Some("99")).unwrap();
        assert_eq!(cfg.delta, 0.2); // profile
        assert_eq!(cfg.lambda_cls, 0.7); // file beats profile
        assert_eq!(cfg.k, 3); // flag beats file
        assert_eq!(cfg.seed, 5); // file beats environment
        assert_eq!(cfg.d, 300);

        let cfg = RunConfig::resolve(None, json!({"profile": "combine"}), Some("42")).unwrap();
        assert_eq!((cfg.delta, cfg.lambda_cls, cfg.seed), (0.1, 0.2, 42));
        assert_eq!(RunConfig::resolve(None, json!({}), None).unwrap(), RunConfig::default());
    }

    #[test]
    fn invalid_settings_are_config_errors() {
        for flags in [json!({"profile": "x"}), json!({"k": 0}), json!({"delta": -1.0}), json!({"bogus": 1}), json!({"ablate": ["zz"]})] {
            let e = RunConfig::resolve(None, flags.clone(), None).unwrap_err();
            assert_eq!(e.exit_code(), 1, "{flags}");
        }
        assert!(RunConfig::resolve(None, json!({}), Some("abc")).is_err());
    }

    #[test]
    fn ablation_codes_map_to_toggles() {
        let cfg = RunConfig::resolve(None, json!({"ablate": ["ea", "ba"]}), None).unwrap();
        let t = cfg.toggles().unwrap();
        assert!(t.retrieval && t.factual_calibration && !t.emotion_augmentation && !t.bias_adjustment);
    }
}
