//! Train-on-phantoms, test-on-held-out-phantoms protocol shared by the
//! examples, the CLI and the acceptance suite.

use std::time::{Duration, Instant};

use crate::data::{generate_phantom, normalize, SynthConfig, Volume};
use crate::error::Result;
use crate::infer::predict_volume;
use crate::metrics::{evaluate, mean_dice, Evaluation};
use crate::model::{Model, NetworkSpec};
use crate::train::{run_training, LogRow, TrainConfig, TrainState};

/// Dataset sizes and schedule of one synthetic experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct Protocol {
    pub train_phantoms: usize,
    pub test_phantoms: usize,
    pub extent: usize,
    pub epochs: usize,
    pub patches_per_epoch: usize,
    pub seed: u64,
}

impl Protocol {
    /// 8 training and 4 test phantoms of 96^3, 5 epochs of 400 patches.
    pub fn full() -> Self {
        Protocol {
            train_phantoms: 8,
            test_phantoms: 4,
            extent: 96,
            epochs: 5,
            patches_per_epoch: 400,
            seed: 0,
        }
    }

    /// Same counts on 48^3 phantoms for 2 epochs.
    pub fn reduced() -> Self {
        Protocol {
            extent: 48,
            epochs: 2,
            ..Self::full()
        }
    }

    pub fn train_config(&self, network: NetworkSpec) -> TrainConfig {
        TrainConfig {
            network,
            epochs: self.epochs,
            patches_per_epoch: self.patches_per_epoch,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }

    /// Normalized training and test phantoms. The two sets come from
    /// different seeds, so no test phantom is seen during training.
    pub fn phantoms(&self) -> Result<(Vec<Volume>, Vec<Volume>)> {
        let make = |count: usize, seed: u64| -> Result<Vec<Volume>> {
            let cfg = SynthConfig {
                count,
                extents: [self.extent; 3],
                seed,
                ..SynthConfig::default()
            };
            cfg.specs().iter().map(|s| normalize(&generate_phantom(s)?)).collect()
        };
        Ok((
            make(self.train_phantoms, self.seed.wrapping_mul(2).wrapping_add(100))?,
            make(self.test_phantoms, self.seed.wrapping_mul(2).wrapping_add(101))?,
        ))
    }
}

/// What one trained network achieved on the test phantoms.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub model: Model,
    pub log: Vec<LogRow>,
    pub evaluations: Vec<Evaluation>,
    /// Mean Dice: complete, core, enhancing.
    pub mean: [f64; 3],
    pub train_time: Duration,
    pub test_time: Duration,
}

impl Outcome {
    /// Mean of the core and enhancing Dice.
    pub fn core_enhancing(&self) -> f64 {
        (self.mean[1] + self.mean[2]) / 2.0
    }
}

/// Trains `network` from scratch on `train` and scores it on `test`.
pub fn run(
    protocol: &Protocol,
    network: NetworkSpec,
    train: &[Volume],
    test: &[Volume],
    on_step: impl FnMut(&LogRow),
) -> Result<Outcome> {
    let cfg = protocol.train_config(network);
    let mut state = TrainState::new(&cfg)?;
    let volumes: Vec<&Volume> = train.iter().collect();
    let t = Instant::now();
    let log = run_training(&volumes, &cfg, &mut state, None, on_step)?;
    let train_time = t.elapsed();
    let t = Instant::now();
    let evaluations = test
        .iter()
        .map(|v| evaluate(&predict_volume(v, &state.model)?, &v.label_map()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Outcome {
        model: state.model,
        log,
        mean: mean_dice(&evaluations),
        evaluations,
        train_time,
        test_time: t.elapsed(),
    })
}
