//! Experiment configuration and its content hash.

use std::path::{Path, PathBuf};

use exitprint_core::arch::{small_convnet, ArchSpec};
use exitprint_core::attacks::{Attack, AttackConfig, ExitRule, PgdConfig};
use exitprint_core::data::{DatasetSplits, SyntheticSpec};
use exitprint_core::fingerprint::{BaselineConfig, FingerprintConfig};
use exitprint_core::train::TrainConfig;
use exitprint_core::verify::TimingBackend;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Environment variable that overrides the output root.
pub const OUT_ENV: &str = "EXITPRINT_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum DatasetSource {
    Synthetic(SyntheticSpec),
    /// A directory written by [`crate::format::save_dataset`].
    Directory { path: PathBuf },
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic(SyntheticSpec::default())
    }
}

impl DatasetSource {
    pub fn load(&self) -> Result<DatasetSplits> {
        match self {
            DatasetSource::Synthetic(spec) => Ok(spec.generate()?),
            DatasetSource::Directory { path } => crate::format::load_dataset(path),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub name: String,
    pub widths: [usize; 6],
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            name: "small-convnet".into(),
            widths: [8, 12, 16, 16, 32, 32],
        }
    }
}

impl ArchConfig {
    pub fn build(&self, data: &DatasetSplits) -> Result<ArchSpec> {
        if self.name != "small-convnet" {
            return Err(Error::Config(format!("unknown architecture {:?}", self.name)));
        }
        Ok(small_convnet(data.train.input_shape, data.train.n_y, self.widths))
    }
}

/// One attack pipeline. Steps apply in order to the target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackPipeline {
    pub steps: Vec<AttackConfig>,
    /// Whether the resulting copies join the stolen cohort used for the
    /// uniqueness table.
    #[serde(default)]
    pub stolen: bool,
}

impl AttackPipeline {
    pub fn single(attack: Attack, seed: u64) -> Self {
        Self {
            steps: vec![AttackConfig::new(attack, seed)],
            stolen: false,
        }
    }

    fn in_cohort(mut self) -> Self {
        self.stolen = true;
        self
    }

    /// Kind of the first step, used to group rows in the robustness table.
    pub fn group(&self) -> String {
        let kind = serde_json::to_value(&self.steps[0].attack)
            .ok()
            .and_then(|v| v.get("kind").and_then(|k| k.as_str()).map(String::from));
        kind.unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub backend: TimingBackend,
    pub rad_levels: Vec<f64>,
    /// Number of independently trained models.
    pub population: usize,
    pub dataset: DatasetSource,
    pub arch: ArchConfig,
    /// Per-model seeds are derived from `seed`; the seed fields here are
    /// ignored.
    pub backbone: TrainConfig,
    pub ic: TrainConfig,
    pub fingerprint: FingerprintConfig,
    pub baseline: BaselineConfig,
    /// Match rate above which the baseline declares a copy.
    pub baseline_threshold: f64,
    /// Size of each benign calibration group drawn from the test split.
    pub benign_samples: usize,
    /// Attacked models above this accuracy drop are flagged as unusable.
    pub max_attack_rad: f64,
    pub attacks: Vec<AttackPipeline>,
    pub ablation_t_f: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "desk".into(),
            seed: 7,
            backend: TimingBackend::CostModel,
            rad_levels: vec![0.05, 0.15],
            population: 10,
            dataset: DatasetSource::default(),
            arch: ArchConfig::default(),
            backbone: TrainConfig::backbone_default(0),
            ic: TrainConfig::ic_default(0),
            fingerprint: FingerprintConfig::default(),
            baseline: BaselineConfig::default(),
            baseline_threshold: 0.5,
            benign_samples: 100,
            max_attack_rad: 0.15,
            attacks: desk_attacks(),
            ablation_t_f: (0..=20).map(|i| i as f64 / 20.0).collect(),
        }
    }
}

/// The desk attack matrix: IC retraining under ten seeds, two IC edits,
/// pruning, 8-bit quantization, finetuning under three seeds, both
/// exit-criteria changes and PGD adversarial training.
pub fn desk_attacks() -> Vec<AttackPipeline> {
    let mut v = Vec::new();
    for s in 0..10 {
        let p = AttackPipeline::single(Attack::IcRetrain { epochs: None }, s);
        v.push(if s < 3 { p.in_cohort() } else { p });
    }
    let edit = |add: Vec<usize>, remove: Vec<usize>| Attack::IcEdit {
        add,
        remove,
        ic_epochs: 3,
    };
    v.push(AttackPipeline::single(edit(vec![], vec![1, 2, 3, 4]), 0).in_cohort());
    v.push(AttackPipeline::single(edit(vec![3, 13], vec![]), 0).in_cohort());
    for rate in [0.1, 0.2, 0.3] {
        v.push(AttackPipeline::single(Attack::Prune { rate }, 0).in_cohort());
    }
    v.push(AttackPipeline::single(Attack::Quantize { bits: 8 }, 0).in_cohort());
    for s in 0..3 {
        v.push(AttackPipeline::single(
            Attack::Finetune {
                epochs: 8,
                snapshot_every: 2,
                learning_rate: 0.001,
                ic_epochs: 3,
                train_subset: None,
            },
            s,
        ));
    }
    for (i, rad) in [0.05, 0.15].into_iter().enumerate() {
        let p = AttackPipeline::single(
            Attack::ExitCriteria {
                rule: ExitRule::Rad(rad),
            },
            0,
        );
        v.push(if i == 1 { p.in_cohort() } else { p });
    }
    v.push(AttackPipeline::single(
        Attack::AdvTrain {
            epochs: 6,
            snapshot_every: 2,
            pgd: PgdConfig::default(),
            learning_rate: 0.001,
            ic_epochs: 3,
            train_subset: None,
        },
        0,
    ));
    v
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config(format!("invalid experiment name {:?}", self.name)));
        }
        if self.rad_levels.is_empty() || self.rad_levels.iter().any(|r| !(*r > 0.0 && *r < 1.0)) {
            return Err(Error::Config("rad_levels must be non-empty and inside (0, 1)".into()));
        }
        if self.population < 2 {
            return Err(Error::Config("population must be at least 2".into()));
        }
        if self.benign_samples == 0 {
            return Err(Error::Config("benign_samples must be positive".into()));
        }
        if self.ablation_t_f.is_empty() {
            return Err(Error::Config("ablation_t_f must not be empty".into()));
        }
        if !(0.0..=1.0).contains(&self.baseline_threshold) {
            return Err(Error::Config("baseline_threshold must be in [0, 1]".into()));
        }
        self.fingerprint.validate()?;
        self.backbone.validate()?;
        self.ic.validate()?;
        for p in &self.attacks {
            if p.steps.is_empty() {
                return Err(Error::Config("attack pipeline without steps".into()));
            }
            for s in &p.steps {
                s.validate()?;
            }
        }
        Ok(())
    }

    /// Canonical form used for hashing: JSON with sorted keys.
    pub fn canonical(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string(&v).expect("value serializes")
    }

    /// First 16 hex digits of the SHA-256 of [`Self::canonical`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// `<root>/<name>-<hash>`.
    pub fn out_dir(&self, root: &Path) -> PathBuf {
        root.join(format!("{}-{}", self.name, self.hash()))
    }
}

/// Output root: an explicit flag wins, then the environment variable, then
/// `runs`.
pub fn resolve_root(flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_keeps_hash() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let cfg = ExperimentConfig::from_toml("name = \"x\"\npopulation = 3\n").unwrap();
        assert_eq!(cfg.population, 3);
        assert_eq!(cfg.rad_levels, vec![0.05, 0.15]);
    }

    #[test]
    fn any_change_moves_the_output_directory() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.seed += 1;
        assert_ne!(a.out_dir(Path::new("r")), b.out_dir(Path::new("r")));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(ExperimentConfig::from_toml("population = 1").is_err());
        assert!(ExperimentConfig::from_toml("rad_levels = [1.5]").is_err());
        assert!(ExperimentConfig::from_toml("name = \"a/b\"").is_err());
    }

    #[test]
    fn desk_matrix_has_ten_stolen_copies() {
        let n: usize = desk_attacks().iter().filter(|p| p.stolen).count();
        assert_eq!(n, 10);
    }
}
