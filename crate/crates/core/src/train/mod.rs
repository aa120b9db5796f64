//! Joint optimization of both pathways.

pub mod adam;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::KeyValues;
use crate::data::{draw_centers, extract_batch, PatchBatch, PatchCenter, Volume};
use crate::error::{Error, Result};
use crate::layers::{Binder, Mode};
use crate::model::checkpoint::Checkpoint;
use crate::model::{ForwardOutput, Model, NetworkSpec};
use crate::tensor::{Graph, NodeId, Scalar};

pub use adam::{AdamConfig, AdamState};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub network: NetworkSpec,
    pub epochs: usize,
    pub patches_per_epoch: usize,
    pub lesion_fraction: f64,
    pub mini_batch_size: usize,
    pub adam: AdamConfig,
    /// Weight of the binary loss in the total.
    pub lambda: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            network: NetworkSpec::proposed(),
            epochs: 5,
            patches_per_epoch: 400,
            lesion_fraction: 0.5,
            mini_batch_size: 4,
            adam: AdamConfig::default(),
            lambda: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        if self.mini_batch_size == 0 || !self.patches_per_epoch.is_multiple_of(self.mini_batch_size) {
            return Err(Error::invalid(format!(
                "patches_per_epoch ({}) must be a positive multiple of mini_batch_size ({})",
                self.patches_per_epoch, self.mini_batch_size
            )));
        }
        if !(0.0..=1.0).contains(&self.lesion_fraction) {
            return Err(Error::invalid("lesion_fraction must lie in [0, 1]"));
        }
        if self.adam.learning_rate.is_nan()
            || self.adam.learning_rate <= 0.0
            || self.lambda.is_nan()
            || self.lambda < 0.0
        {
            return Err(Error::invalid("learning_rate must be > 0 and lambda >= 0"));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.patches_per_epoch / self.mini_batch_size
    }

    /// Keys: `epochs`, `patches_per_epoch`, `lesion_fraction`,
    /// `mini_batch_size`, `learning_rate`, `beta1`, `beta2`, `epsilon`,
    /// `lambda`, `seed`, and `network.*` for the architecture.
    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        kv.reject_unknown(&[
            "epochs",
            "patches_per_epoch",
            "lesion_fraction",
            "mini_batch_size",
            "learning_rate",
            "beta1",
            "beta2",
            "epsilon",
            "lambda",
            "seed",
            "network.*",
        ])?;
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            network: NetworkSpec::from_key_values(kv, "network.")?,
            epochs: kv.get_or("epochs", d.epochs)?,
            patches_per_epoch: kv.get_or("patches_per_epoch", d.patches_per_epoch)?,
            lesion_fraction: kv.get_or("lesion_fraction", d.lesion_fraction)?,
            mini_batch_size: kv.get_or("mini_batch_size", d.mini_batch_size)?,
            adam: AdamConfig {
                learning_rate: kv.get_or("learning_rate", d.adam.learning_rate)?,
                beta1: kv.get_or("beta1", d.adam.beta1)?,
                beta2: kv.get_or("beta2", d.adam.beta2)?,
                epsilon: kv.get_or("epsilon", d.adam.epsilon)?,
            },
            lambda: kv.get_or("lambda", d.lambda)?,
            seed: kv.get_or("seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_key_values(&KeyValues::read(path)?).map_err(|e| e.context(path.display().to_string()))
    }
}

/// Losses of one optimization step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub total: f32,
    pub binary: f32,
    pub full: f32,
}

/// Loss nodes of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: NodeId,
    /// Absent for the non-hierarchical variant.
    pub binary: Option<NodeId>,
    pub full: NodeId,
}

/// `full + lambda * binary`, each a mean cross-entropy over the output block.
pub fn loss_nodes<T: Scalar>(
    g: &mut Graph<T>,
    out: &ForwardOutput,
    labels_full: &[u8],
    labels_binary: &[u8],
    lambda: T,
) -> Result<LossNodes> {
    let full = g.cross_entropy(out.full, labels_full)?;
    Ok(match out.binary {
        Some(bin) => {
            let binary = g.cross_entropy(bin, labels_binary)?;
            let weighted = g.scale(binary, lambda);
            LossNodes {
                total: g.add(full, weighted)?,
                binary: Some(binary),
                full,
            }
        }
        None => LossNodes {
            total: full,
            binary: None,
            full,
        },
    })
}

/// Forward pass, both losses, and the gradient of the total with respect to
/// every learnable parameter. Batch statistics are folded into the running
/// averages of `model`.
pub fn loss_and_gradients(
    model: &mut Model,
    batch: &PatchBatch,
    lambda: f32,
) -> Result<(StepLosses, BTreeMap<String, crate::tensor::Tensor>)> {
    let mut g = Graph::new();
    let ft = g.input(batch.inputs_ft.clone());
    let t1 = g.input(batch.inputs_t1.clone());
    let (losses, total, bound, bn_nodes) = {
        let mut b = Binder::new(&mut g, &model.params, Mode::Train);
        let out = model.forward(&mut b, ft, t1)?;
        let LossNodes { total, binary, full } =
            loss_nodes(b.graph, &out, &batch.labels_full, &batch.labels_binary, lambda)?;
        let value = |id| b.graph.value(id).data()[0];
        let losses = StepLosses {
            total: value(total),
            binary: binary.map_or(0.0, value),
            full: value(full),
        };
        let bound: Vec<(String, NodeId)> = b.bound().map(|(k, v)| (k.clone(), *v)).collect();
        (losses, total, bound, b.bn_nodes().to_vec())
    };
    if !losses.total.is_finite() {
        let mut context = format!("loss {:?}; patches:", losses);
        for p in &batch.provenance {
            let _ = write!(context, " [{p}]");
        }
        return Err(Error::NonFiniteLoss { context });
    }
    g.backward(total)?;
    let grads = bound
        .into_iter()
        .filter(|(name, _)| !model.params.is_buffer(name))
        .map(|(name, id)| (name, g.grad_or_zeros(id)))
        .collect();
    model.update_running_stats(&g, &bn_nodes)?;
    Ok((losses, grads))
}

/// One Adam step on the total loss `full + lambda * binary`.
pub fn train_step(
    model: &mut Model,
    adam: &mut AdamState,
    batch: &PatchBatch,
    cfg: &TrainConfig,
) -> Result<StepLosses> {
    let (losses, grads) = loss_and_gradients(model, batch, cfg.lambda)?;
    adam.update(&mut model.params, &grads, &cfg.adam);
    Ok(losses)
}

/// One line of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub step: u64,
    pub losses: StepLosses,
    pub wallclock_ms: u128,
}

impl std::fmt::Display for LogRow {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        // shortest round-trip float formatting keeps the log bit-exact
        write!(
            f,
            "{} {} {:?} {:?} {:?} {}",
            self.epoch, self.step, self.losses.total, self.losses.binary, self.losses.full, self.wallclock_ms
        )
    }
}

/// Training state that survives between epochs.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub adam: AdamState,
    pub epochs_done: usize,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let model = Model::build(cfg.network.clone(), cfg.seed)?;
        let adam = AdamState::new(&model.params);
        Ok(TrainState {
            model,
            adam,
            epochs_done: 0,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint, cfg: &TrainConfig) -> Result<Self> {
        if ck.model.spec != cfg.network {
            return Err(Error::SpecMismatch("checkpoint network differs from the config".into()));
        }
        if ck.seed != cfg.seed {
            return Err(Error::invalid(format!(
                "checkpoint was trained with seed {}, config has {}",
                ck.seed, cfg.seed
            )));
        }
        let adam = ck
            .optimizer
            .ok_or_else(|| Error::invalid("checkpoint carries no optimizer state"))?;
        Ok(TrainState {
            model: ck.model,
            adam,
            epochs_done: ck.epoch as usize,
        })
    }

    pub fn checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            seed: cfg.seed,
            epoch: self.epochs_done as u32,
            is_final: self.epochs_done >= cfg.epochs,
            optimizer: Some(self.adam.clone()),
        }
    }
}

/// The patch centers of one epoch in visiting order. Depends only on the
/// seed, the epoch index and the volumes, so a resumed run sees the same
/// patches as an uninterrupted one.
pub fn epoch_centers(volumes: &[&Volume], cfg: &TrainConfig, epoch: usize) -> Result<Vec<PatchCenter>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(epoch as u64 + 1);
    let o = cfg.network.output_extent;
    let total_lesion = (cfg.patches_per_epoch as f64 * cfg.lesion_fraction).round() as usize;
    let total_background = cfg.patches_per_epoch - total_lesion;
    let with_lesion: Vec<usize> = (0..volumes.len()).filter(|&i| volumes[i].lesion_voxels() > 0).collect();
    if total_lesion > 0 && with_lesion.is_empty() {
        return Err(Error::NoLesionVoxels {
            available: 0,
            requested: total_lesion,
        });
    }
    // even split, remainder to the first volumes
    let share = |total: usize, n: usize, k: usize| total / n + usize::from(k < total % n);
    let mut centers = Vec::with_capacity(cfg.patches_per_epoch);
    for (i, v) in volumes.iter().enumerate() {
        let n_bg = share(total_background, volumes.len(), i);
        let n_lesion = with_lesion
            .iter()
            .position(|&j| j == i)
            .map_or(0, |k| share(total_lesion, with_lesion.len(), k));
        let drawn = draw_centers(v, n_lesion, n_bg, o, &mut rng).map_err(|e| e.context(format!("volume {i}")))?;
        centers.extend(drawn.into_iter().map(|center| PatchCenter { volume: i, center }));
    }
    centers.shuffle(&mut rng);
    Ok(centers)
}

/// Where [`run_training`] writes its artifacts.
#[derive(Clone, Debug)]
pub struct OutputDir {
    pub dir: PathBuf,
}

impl OutputDir {
    pub fn log_path(&self) -> PathBuf {
        self.dir.join("metrics.log")
    }

    pub fn checkpoint_path(&self, epoch: usize) -> PathBuf {
        self.dir.join(format!("epoch_{epoch:03}.ckpt"))
    }

    pub fn final_path(&self) -> PathBuf {
        self.dir.join("final.ckpt")
    }
}

/// Trains until `cfg.epochs` epochs are done, starting from `state`. With an
/// output directory, each epoch appends to `metrics.log` and writes a
/// checkpoint; the last one is also written as `final.ckpt`. `on_step` sees
/// every log row as it is produced.
pub fn run_training(
    volumes: &[&Volume],
    cfg: &TrainConfig,
    state: &mut TrainState,
    out: Option<&OutputDir>,
    mut on_step: impl FnMut(&LogRow),
) -> Result<Vec<LogRow>> {
    if volumes.is_empty() {
        return Err(Error::invalid("no training volumes"));
    }
    cfg.validate()?;
    let geom = cfg.network.patch_geometry();
    let start = Instant::now();
    let mut log = Vec::new();
    if let Some(o) = out {
        std::fs::create_dir_all(&o.dir).map_err(|e| Error::io(&o.dir, e))?;
    }
    while state.epochs_done < cfg.epochs {
        let epoch = state.epochs_done;
        let centers = epoch_centers(volumes, cfg, epoch)?;
        let mut lines = String::new();
        for chunk in centers.chunks(cfg.mini_batch_size) {
            let batch = extract_batch(volumes, chunk, geom)?;
            let losses = train_step(&mut state.model, &mut state.adam, &batch, cfg)
                .map_err(|e| e.context(format!("epoch {epoch} step {}", state.adam.step + 1)))?;
            let row = LogRow {
                epoch,
                step: state.adam.step,
                losses,
                wallclock_ms: start.elapsed().as_millis(),
            };
            on_step(&row);
            let _ = writeln!(lines, "{row}");
            log.push(row);
        }
        state.epochs_done += 1;
        if let Some(o) = out {
            let ctx = |e: Error| e.context(format!("epoch {epoch}"));
            let path = o.log_path();
            let mut f = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| ctx(Error::io(&path, e)))?;
            f.write_all(lines.as_bytes()).map_err(|e| ctx(Error::io(&path, e)))?;
            let ck = state.checkpoint(cfg);
            ck.write(&o.checkpoint_path(state.epochs_done)).map_err(ctx)?;
            if ck.is_final {
                ck.write(&o.final_path()).map_err(ctx)?;
            }
        }
    }
    Ok(log)
}
