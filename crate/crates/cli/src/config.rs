//! Experiment configuration: one human-readable TOML document per
//! experiment, with every table optional and defaulting to the shipped
//! settings (batch 64, learning rates 1e-4 / 1e-5, condition dropout
//! 0.1, sigma range 0.002..200, 18 sampler steps, 32 members, guidance
//! 1.0, 75/25 member split).

use lrd_core::datagen::GenerationConfig;
use lrd_core::dynsys::SystemParams;
use lrd_core::error::{Error, Result};
use lrd_core::student::{AdamConfig, SigmaSpec, TrainConfig};
use lrd_core::targets::{LeadLabel, LeadSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSection {
    pub id: String,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            id: "default".to_string(),
            seed: 42,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub dropout: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub sigma_data: f64,
    pub val_every: usize,
    pub max_val_samples: usize,
    pub width: usize,
    pub depth: usize,
    pub kernel: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            steps: 20_000,
            batch_size: 64,
            lr: 1e-4,
            dropout: 0.1,
            sigma_min: 0.002,
            sigma_max: 200.0,
            sigma_data: 1.0,
            val_every: 100,
            max_val_samples: 512,
            width: 64,
            depth: 6,
            kernel: 5,
        }
    }
}

impl TrainingSection {
    pub fn sigma_spec(&self) -> SigmaSpec {
        SigmaSpec {
            sigma_min: self.sigma_min,
            sigma_max: self.sigma_max,
            sigma_data: self.sigma_data,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            dropout: self.dropout,
            sigma: self.sigma_spec(),
            adam: AdamConfig::default(),
            seed,
            val_every: self.val_every,
            max_val_samples: self.max_val_samples,
            curves_csv: None,
            checkpoint_on_divergence: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneSection {
    /// Fine-tuning uses one tenth of the pretraining rate.
    pub lr: f64,
    pub steps: usize,
    pub eval_dates: usize,
    /// Members per reforecast (bias estimation needs means only).
    pub reforecast_ensemble: usize,
    pub eval_ensemble: usize,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        FinetuneSection {
            lr: 1e-5,
            steps: 2_500,
            eval_dates: 72,
            reforecast_ensemble: 6,
            eval_ensemble: 16,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerSection {
    pub num_steps: usize,
    pub rho: f64,
    pub guidance_weight: f64,
    pub ensemble_size: usize,
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection { num_steps: 18, rho: 7.0, guidance_weight: 1.0, ensemble_size: 32 }
    }
}

impl SamplerSection {
    pub fn sampler_config(&self, sigma: &SigmaSpec) -> lrd_core::sampler::SamplerConfig {
        lrd_core::sampler::SamplerConfig {
            num_steps: self.num_steps,
            sigma_min: sigma.sigma_min,
            sigma_max: sigma.sigma_max,
            rho: self.rho,
            guidance_weight: self.guidance_weight,
            ensemble_size: self.ensemble_size,
            s_churn: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbationSection {
    /// "fixed" uses `amplitude`; "tune" bisects to the target fraction
    /// of the climatological day-7 RMSE.
    pub mode: String,
    pub amplitude: f64,
    pub length_scale: f64,
    pub time_scale: f64,
    pub tune_target_frac: f64,
    pub tune_cases: usize,
    /// Extra teacher-ensemble perturbation, as a fraction of the tuned
    /// initial-condition amplitude.
    pub teacher_extra_frac: f64,
}

impl Default for PerturbationSection {
    fn default() -> Self {
        PerturbationSection {
            mode: "fixed".to_string(),
            amplitude: 0.1,
            length_scale: 4.0,
            time_scale: 2.0,
            tune_target_frac: 0.7,
            tune_cases: 100,
            teacher_extra_frac: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluationSection {
    pub num_dates: usize,
    /// Spacing in days per lead; mirrors the 2/4/8-day grids.
    pub spacing_medium: usize,
    pub spacing_s2s: usize,
    pub spacing_seasonal: usize,
    /// Reference years behind the climatological baselines.
    pub reference_years: usize,
    pub nature_seed_member: usize,
    pub reference_seed_member: usize,
    pub alpha: f64,
    pub n_boot: usize,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        EvaluationSection {
            num_dates: 400,
            spacing_medium: 2,
            spacing_s2s: 4,
            spacing_seasonal: 8,
            reference_years: 20,
            nature_seed_member: 1_000_003,
            reference_seed_member: 1_000_017,
            alpha: 0.05,
            n_boot: 1000,
        }
    }
}

impl EvaluationSection {
    pub fn spacing(&self, lead: LeadLabel) -> usize {
        match lead {
            LeadLabel::Medium => self.spacing_medium,
            LeadLabel::S2s => self.spacing_s2s,
            LeadLabel::Seasonal => self.spacing_seasonal,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ScalingSection {
    pub year_grid: Vec<f64>,
    /// Training steps per grid point (equal budget across sizes).
    pub steps: usize,
    pub eval_dates: usize,
    pub ensemble_size: usize,
}

impl Default for ScalingSection {
    fn default() -> Self {
        ScalingSection {
            year_grid: vec![10.0, 100.0, 1000.0, 10_000.0],
            steps: 4_000,
            eval_dates: 160,
            ensemble_size: 16,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ShiftedSection {
    /// Shifted-domain teacher: stronger forcing, stronger coupling.
    pub f0: f64,
    pub h: f64,
    pub record_years: f64,
    pub members: usize,
}

impl Default for ShiftedSection {
    fn default() -> Self {
        ShiftedSection { f0: 8.5, h: 1.1, record_years: 40.0, members: 8 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationSection {
    pub weights: Vec<f64>,
    pub eval_dates: usize,
    pub ensemble_size: usize,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        CalibrationSection {
            weights: vec![0.0, 0.5, 0.75, 1.0, 2.0, 3.0],
            eval_dates: 128,
            ensemble_size: 16,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub teacher: SystemParams,
    pub generation: GenerationConfig,
    pub lead: LeadSelection,
    pub training: TrainingSection,
    pub finetune: FinetuneSection,
    pub sampler: SamplerSection,
    pub perturbation: PerturbationSection,
    pub evaluation: EvaluationSection,
    pub scaling: ScalingSection,
    pub shifted: ShiftedSection,
    pub calibration: CalibrationSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LeadSelection {
    pub active: String,
}

impl Default for LeadSelection {
    fn default() -> Self {
        LeadSelection { active: "s2s".to_string() }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.display().to_string()));
        }
        let text = std::fs::read_to_string(path)?;
        let mut config: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        if config.generation.seed == 0 {
            config.generation.seed = config.experiment.seed;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.teacher.validate()?;
        self.generation.validate()?;
        self.active_lead()?;
        let save_window = self.generation.save_window;
        for label in [LeadLabel::Medium, LeadLabel::S2s, LeadLabel::Seasonal] {
            LeadSpec::for_label(label).validate(save_window)?;
        }
        if self.perturbation.mode != "fixed" && self.perturbation.mode != "tune" {
            return Err(Error::config(format!(
                "perturbation.mode must be \"fixed\" or \"tune\", got {:?}",
                self.perturbation.mode
            )));
        }
        Ok(())
    }

    pub fn active_lead(&self) -> Result<LeadLabel> {
        self.lead.active.parse()
    }

    /// Corpus root: `LRD_DATA_DIR` overrides the out-dir default.
    pub fn data_root(&self) -> PathBuf {
        match std::env::var_os("LRD_DATA_DIR") {
            Some(dir) => PathBuf::from(dir).join(&self.experiment.id),
            None => self.experiment.out_dir.join("data"),
        }
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.data_root().join("corpus")
    }

    /// Short content hash of the resolved configuration, carried by
    /// every emitted score row for provenance.
    pub fn config_hash(&self) -> String {
        let canonical = toml::to_string(self).unwrap_or_default();
        let digest = Sha256::digest(canonical.as_bytes());
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        hex[..12].to_string()
    }

    /// Provenance fields attached to emitted artifacts.
    pub fn provenance(&self) -> Provenance {
        Provenance {
            experiment_id: self.experiment.id.clone(),
            config_hash: self.config_hash(),
            seed: self.experiment.seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub experiment_id: String,
    pub config_hash: String,
    pub seed: u64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_shipped_settings() {
        let c = ExperimentConfig::default();
        assert_eq!(c.training.batch_size, 64);
        assert_eq!(c.training.lr, 1e-4);
        assert_eq!(c.finetune.lr, 1e-5);
        assert_eq!(c.training.dropout, 0.1);
        assert_eq!(c.training.sigma_min, 0.002);
        assert_eq!(c.training.sigma_max, 200.0);
        assert_eq!(c.sampler.num_steps, 18);
        assert_eq!(c.sampler.ensemble_size, 32);
        assert_eq!(c.sampler.guidance_weight, 1.0);
        assert_eq!(c.generation.train_frac, 0.75);
        assert_eq!(c.evaluation.reference_years, 20);
    }

    #[test]
    fn minimal_toml_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.toml");
        std::fs::write(
            &path,
            "[experiment]\nid = \"t1\"\nseed = 7\n\n[training]\nsteps = 10\n",
        )
        .unwrap();
        let c = ExperimentConfig::load(&path).unwrap();
        assert_eq!(c.experiment.id, "t1");
        assert_eq!(c.experiment.seed, 7);
        assert_eq!(c.training.steps, 10);
        assert_eq!(c.training.batch_size, 64); // default preserved
        assert_eq!(c.generation.seed, 7); // inherited
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let a = ExperimentConfig::default();
        let mut b = ExperimentConfig::default();
        assert_eq!(a.config_hash(), b.config_hash());
        b.training.lr = 2e-4;
        assert_ne!(a.config_hash(), b.config_hash());
    }

    #[test]
    fn bad_lead_is_config_error() {
        let mut c = ExperimentConfig::default();
        c.lead.active = "weekly".into();
        assert!(c.validate().is_err());
    }
}
