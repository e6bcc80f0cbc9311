use std::path::{Path, PathBuf};

use qrw_core::alignment::{AlignmentConfig, TemperatureSource};
use qrw_core::datasetgen::DatasetConfig;
use qrw_core::feedback::{scorer_by_name, Objective};
use qrw_core::model::{ModelConfig, OptimConfig, SftConfig, SftReduction};
use qrw_core::serving::ServingConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::StageError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Every artifact lives under this directory.
    pub out_dir: PathBuf,
    pub world: WorldSection,
    pub feedback: FeedbackSection,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub sft: TrainSection,
    pub candidates: DecodeSection,
    pub align: AlignSection,
    pub serving: DecodeSection,
    pub serve: ServeSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSection {
    pub seed: u64,
    pub n_products: usize,
    pub n_queries: usize,
    pub vocab_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeedbackSection {
    pub tau_prime: f64,
    pub scorer: String,
    pub objective: Objective,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub tau_rele: f64,
    pub tau_incr: f64,
    pub k_titles: usize,
    pub aux_ratio: f64,
    pub seed: u64,
    pub min_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub weight_decay: f64,
    /// 0 disables clipping.
    pub clip_norm: f64,
    pub reduction: SftReduction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeSection {
    pub beam_width: usize,
    pub max_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignSection {
    pub lambda: f64,
    /// Candidates per alignment list.
    pub contrast: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub tie_epsilon: f64,
    pub sft_all_candidates: bool,
    pub temperature: TemperatureSource,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServeSection {
    /// Plain-text query file, one per line. Empty means the eval queries.
    pub input: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            out_dir: PathBuf::from("run"),
            world: WorldSection::default(),
            feedback: FeedbackSection::default(),
            dataset: DatasetSection::default(),
            model: ModelSection::default(),
            sft: TrainSection::default(),
            candidates: DecodeSection::default(),
            align: AlignSection::default(),
            serving: DecodeSection::default(),
            serve: ServeSection::default(),
        }
    }
}

impl Default for WorldSection {
    fn default() -> Self {
        WorldSection {
            seed: 7,
            n_products: 100,
            n_queries: 200,
            vocab_size: 60,
        }
    }
}

impl Default for FeedbackSection {
    fn default() -> Self {
        FeedbackSection {
            tau_prime: 0.5,
            scorer: "overlap".into(),
            objective: Objective::Rele,
        }
    }
}

impl Default for DatasetSection {
    fn default() -> Self {
        let d = DatasetConfig::default();
        DatasetSection {
            tau_rele: d.tau_rele,
            tau_incr: d.tau_incr,
            k_titles: d.k_titles,
            aux_ratio: d.aux_ratio,
            seed: 7,
            min_count: 1,
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            embed_dim: 16,
            hidden_dim: 32,
            seed: 7,
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            lr: 1e-2,
            epochs: 30,
            batch_size: 16,
            seed: 7,
            weight_decay: 0.01,
            clip_norm: 5.0,
            reduction: SftReduction::SumTokens,
        }
    }
}

impl Default for DecodeSection {
    fn default() -> Self {
        DecodeSection {
            beam_width: 5,
            max_len: 6,
        }
    }
}

impl Default for AlignSection {
    fn default() -> Self {
        AlignSection {
            lambda: 1.0,
            contrast: 4,
            lr: 1e-2,
            epochs: 100,
            batch_size: 8,
            seed: 7,
            weight_decay: 0.01,
            clip_norm: 5.0,
            tie_epsilon: 1e-6,
            sft_all_candidates: true,
            temperature: TemperatureSource::Reward,
        }
    }
}

fn optim(
    lr: f64,
    epochs: usize,
    batch_size: usize,
    seed: u64,
    weight_decay: f64,
    clip: f64,
) -> OptimConfig {
    OptimConfig {
        lr,
        epochs,
        batch_size,
        seed,
        weight_decay,
        clip_norm: (clip > 0.0).then_some(clip),
        ..OptimConfig::default()
    }
}

impl PipelineConfig {
    /// Reads `path` (or defaults when `None`), applies `section.key=value`
    /// overrides, and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, StageError> {
        let mut table: toml::Table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| StageError::validation(format!("{}: {e}", p.display())))?;
                text.parse()
                    .map_err(|e| StageError::validation(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: PipelineConfig = table
            .try_into()
            .map_err(|e| StageError::validation(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), StageError> {
        let fail = |m: String| Err(StageError::validation(m));
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if self.out_dir.as_os_str().is_empty() {
            return fail("out_dir must not be empty".into());
        }
        if self.world.n_products == 0 || self.world.n_queries == 0 || self.world.vocab_size < 2 {
            return fail("world sizes must be positive and vocab_size at least 2".into());
        }
        if !(self.feedback.tau_prime > 0.0 && self.feedback.tau_prime < 1.0) {
            return fail("feedback.tau_prime must lie in (0, 1)".into());
        }
        scorer_by_name(&self.feedback.scorer).map_err(|e| StageError::validation(e.to_string()))?;
        if !unit(self.dataset.tau_rele)
            || self.dataset.tau_incr.is_nan()
            || self.dataset.tau_incr < 0.0
        {
            return fail("dataset thresholds out of range".into());
        }
        if self.dataset.aux_ratio.is_nan() || self.dataset.aux_ratio < 0.0 {
            return fail("dataset.aux_ratio must be non-negative".into());
        }
        if self.model.embed_dim == 0 || self.model.hidden_dim == 0 {
            return fail("model dimensions must be positive".into());
        }
        for (name, d) in [("candidates", &self.candidates), ("serving", &self.serving)] {
            if d.beam_width == 0 || d.max_len == 0 {
                return fail(format!("{name}.beam_width and max_len must be at least 1"));
            }
        }
        if self.align.contrast < 2 {
            return fail("align.contrast must be at least 2".into());
        }
        self.sft_config()
            .optim
            .validate()
            .map_err(|e| StageError::validation(format!("sft: {e}")))?;
        self.align_config()
            .validate()
            .map_err(|e| StageError::validation(format!("align: {e}")))?;
        Ok(())
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            tau_rele: self.dataset.tau_rele,
            tau_incr: self.dataset.tau_incr,
            k_titles: self.dataset.k_titles,
            aux_ratio: self.dataset.aux_ratio,
            seed: self.dataset.seed,
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            embed_dim: self.model.embed_dim,
            hidden_dim: self.model.hidden_dim,
        }
    }

    pub fn sft_config(&self) -> SftConfig {
        let s = &self.sft;
        SftConfig {
            optim: optim(
                s.lr,
                s.epochs,
                s.batch_size,
                s.seed,
                s.weight_decay,
                s.clip_norm,
            ),
            reduction: s.reduction,
        }
    }

    pub fn align_config(&self) -> AlignmentConfig {
        let a = &self.align;
        AlignmentConfig {
            optim: optim(
                a.lr,
                a.epochs,
                a.batch_size,
                a.seed,
                a.weight_decay,
                a.clip_norm,
            ),
            lambda: a.lambda,
            tie_epsilon: a.tie_epsilon,
            sft_all_candidates: a.sft_all_candidates,
            temperature: a.temperature,
        }
    }

    pub fn serving_config(&self) -> ServingConfig {
        ServingConfig {
            beam_width: self.serving.beam_width,
            max_len: self.serving.max_len,
            tau_prime: self.feedback.tau_prime,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), StageError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| StageError::validation(format!("override `{spec}` is not key=value")))?;
    let value: toml::Value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for p in path {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| {
            StageError::validation(format!("override `{key}`: `{p}` is not a table"))
        })?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = PipelineConfig::default();
        c.validate().unwrap();
        let back: PipelineConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.candidates.beam_width, 5);
        assert_eq!(c.align.contrast, 4);
    }

    #[test]
    fn unknown_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[align]\nlamda = 2.0\n").unwrap();
        let e = PipelineConfig::load(Some(&p), &[]).unwrap_err();
        assert_eq!(e.exit_code(), 1);
    }

    #[test]
    fn overrides_win() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(
            &p,
            "[align]\nlambda = 2.0\n[feedback]\nobjective = \"incr\"\n",
        )
        .unwrap();
        let c = PipelineConfig::load(
            Some(&p),
            &[
                "align.lambda=0.5".into(),
                "feedback.objective=hitrate".into(),
                "out_dir=x/y".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.align.lambda, 0.5);
        assert_eq!(c.feedback.objective, Objective::Hitrate);
        assert_eq!(c.out_dir, PathBuf::from("x/y"));
        assert!(PipelineConfig::load(None, &["align.contrast=1".into()]).is_err());
        assert!(PipelineConfig::load(None, &["feedback.tau_prime=2".into()]).is_err());
    }
}
