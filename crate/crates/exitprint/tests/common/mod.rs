#![allow(dead_code)]

use exitprint::config::{AttackPipeline, DatasetSource, ExperimentConfig};
use exitprint::core::attacks::{Attack, ExitRule};
use exitprint::core::data::SyntheticSpec;
use exitprint::core::fingerprint::{BaselineConfig, FingerprintConfig};
use exitprint::core::optim::OptimizerConfig;
use exitprint::core::train::TrainConfig;

/// A seconds-scale experiment: small images, small nets, few models.
pub fn tiny_config(name: &str) -> ExperimentConfig {
    let mut backbone = TrainConfig::backbone_default(0);
    backbone.epochs = 4;
    backbone.batch_size = 16;
    backbone.optimizer = OptimizerConfig::adam(0.003);
    backbone.schedule.milestones = vec![3];
    let mut ic = TrainConfig::ic_default(0);
    ic.epochs = 3;
    ic.optimizer = OptimizerConfig::adam(0.01);
    let mut stolen = AttackPipeline::single(Attack::Prune { rate: 0.2 }, 1);
    stolen.stolen = true;
    ExperimentConfig {
        name: name.into(),
        population: 2,
        benign_samples: 20,
        dataset: DatasetSource::Synthetic(SyntheticSpec {
            train: 600,
            val: 80,
            test: 40,
            size: 16,
            ..Default::default()
        }),
        arch: exitprint::config::ArchConfig {
            widths: [4, 4, 6, 6, 8, 8],
            ..Default::default()
        },
        backbone,
        ic,
        fingerprint: FingerprintConfig {
            n: 4,
            steps: 30,
            ..Default::default()
        },
        baseline: BaselineConfig {
            n: 4,
            steps: 30,
            ..Default::default()
        },
        attacks: vec![
            stolen,
            AttackPipeline::single(
                Attack::ExitCriteria {
                    rule: ExitRule::Rad(0.15),
                },
                0,
            ),
        ],
        ablation_t_f: vec![0.0, 0.25, 0.5, 0.75, 1.0],
        ..Default::default()
    }
}
