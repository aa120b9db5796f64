//! The hierarchical two-pathway network and its ablation variants.
//!
//! Two structurally identical feature extractors read (FLAIR, T2) and
//! (T1, T1-CE) patches. Each extractor is an initial 3x3x3 convolution
//! followed by one or two stages (dense block + 1x1x1 transition). Every stage
//! is scored by its own 1x1x1 convolution after center-cropping to the output
//! extent, and the per-stage scores are summed. The binary (whole tumor) head
//! reads the FLAIR/T2 extractor only; the 4-class head reads the channel
//! concatenation of both extractors.

pub mod checkpoint;
mod spec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{
    conv_params, dense_block_forward, dense_block_params, plain_chain_forward, plain_chain_params, receptive_field,
    transition_forward, transition_params, Binder, Mode,
};
use crate::params::{ParamSpec, Parameters};
use crate::tensor::{Graph, NodeId, Scalar, Tensor, BN_MOMENTUM};

pub use spec::{NetworkSpec, Variant};

/// `(spatial extent, channels, receptive field)` after one extractor stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageShape {
    pub spatial: usize,
    pub channels: usize,
    pub receptive_field: usize,
}

impl std::fmt::Display for StageShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "({0}^3, {1}, {2}^3)",
            self.spatial, self.channels, self.receptive_field
        )
    }
}

/// Graph nodes produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Summed binary scores `[.., o, o, o, 2]`; absent for the non-hierarchical variant.
    pub binary: Option<NodeId>,
    /// Summed 4-class scores `[.., o, o, o, 4]`.
    pub full: NodeId,
    /// Per-stage binary score contributions, stage 1 first.
    pub binary_stages: Vec<NodeId>,
    /// Per-stage 4-class score contributions, stage 1 first.
    pub full_stages: Vec<NodeId>,
    /// Observed geometry of the first extractor: post-initial, then per stage.
    pub ledger: Vec<StageShape>,
}

/// A network architecture together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Scalar = f32> {
    pub spec: NetworkSpec,
    pub params: Parameters<T>,
}

impl NetworkSpec {
    /// Names of the feature extractors, in input order.
    pub fn extractors(&self) -> &'static [&'static str] {
        match self.variant {
            Variant::NonHierarchical => &["all"],
            _ => &["ft", "t1"],
        }
    }

    /// Input channels of each extractor.
    pub fn extractor_channels(&self) -> usize {
        match self.variant {
            Variant::NonHierarchical => 4,
            _ => 2,
        }
    }

    pub fn is_hierarchical(&self) -> bool {
        self.variant != Variant::NonHierarchical
    }

    /// Output channels of the plain chain of `stage` (1-based) for the
    /// non-dense variant: each layer adds `growth_rate` channels.
    pub fn plain_schedule(&self, stage: usize) -> Vec<usize> {
        let start = self.stage_channels(stage - 1);
        (1..=self.layers_per_stage)
            .map(|l| start + self.growth_rate * l)
            .collect()
    }

    /// Channels after `stage` (0 = initial convolution).
    pub fn stage_channels(&self, stage: usize) -> usize {
        self.initial_channels + stage * self.growth_rate * self.layers_per_stage
    }

    /// Analytic geometry: post-initial, then after each stage.
    pub fn ledger(&self) -> Vec<StageShape> {
        let mut out = Vec::with_capacity(self.stages() + 1);
        let mut layers = vec![(self.kernel, 1)];
        let mut spatial = self.input_extent() - (self.kernel - 1);
        out.push(StageShape {
            spatial,
            channels: self.initial_channels,
            receptive_field: receptive_field(&layers).unwrap(),
        });
        for s in 1..=self.stages() {
            layers.extend(std::iter::repeat_n((self.kernel, 1), self.layers_per_stage));
            layers.push((1, 1));
            spatial -= self.layers_per_stage * (self.kernel - 1);
            out.push(StageShape {
                spatial,
                channels: self.stage_channels(s),
                receptive_field: receptive_field(&layers).unwrap(),
            });
        }
        out
    }

    /// Every learnable tensor and buffer, in declaration order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut p = Vec::new();
        let k = self.kernel;
        for ext in self.extractors() {
            p.extend(conv_params(
                &format!("{ext}.init"),
                self.extractor_channels(),
                self.initial_channels,
                k,
            ));
            for s in 1..=self.stages() {
                let prefix = format!("{ext}.s{s}");
                match self.variant {
                    Variant::NonDense => p.extend(plain_chain_params(
                        &prefix,
                        self.stage_channels(s - 1),
                        &self.plain_schedule(s),
                        k,
                    )),
                    _ => p.extend(dense_block_params(&self.dense_block(s), &prefix)),
                }
                p.extend(transition_params(&format!("{prefix}.trans"), self.stage_channels(s)));
            }
        }
        let n_ext = self.extractors().len();
        for s in 1..=self.stages() {
            let c = self.stage_channels(s);
            if self.is_hierarchical() {
                p.extend(conv_params(&format!("head.bin.s{s}"), c, self.binary_classes, 1));
            }
            p.extend(conv_params(&format!("head.full.s{s}"), c * n_ext, self.full_classes, 1));
        }
        p
    }

    /// Structural self-check: derives every stage triple from the declared
    /// kernel shapes alone and compares it with [`NetworkSpec::ledger`].
    pub fn check_structure(&self) -> Result<()> {
        let specs = self.param_specs();
        let shape_of = |name: &str| {
            specs
                .iter()
                .find(|s| s.name == name)
                .map(|s| s.shape.clone())
                .ok_or_else(|| Error::invalid(format!("structural check: {name} not declared")))
        };
        let analytic = self.ledger();
        for ext in self.extractors() {
            let init = shape_of(&format!("{ext}.init.w"))?;
            let mut kernels = vec![(init[0], 1)];
            let mut spatial = self.input_extent() - (init[0] - 1);
            let mut channels = init[4];
            let mut observed = vec![StageShape {
                spatial,
                channels,
                receptive_field: receptive_field(&kernels)?,
            }];
            for s in 1..=self.stages() {
                let mut l = 0;
                let mut dense_channels = channels;
                while let Ok(w) = shape_of(&format!("{ext}.s{s}.l{l}.conv.w")) {
                    if w[3]
                        != if self.variant == Variant::NonDense {
                            channels
                        } else {
                            dense_channels
                        }
                    {
                        return Err(Error::invalid(format!(
                            "structural check: {ext}.s{s}.l{l} consumes {} channels",
                            w[3]
                        )));
                    }
                    kernels.push((w[0], 1));
                    spatial -= w[0] - 1;
                    dense_channels += w[4];
                    channels = if self.variant == Variant::NonDense {
                        w[4]
                    } else {
                        dense_channels
                    };
                    l += 1;
                }
                let t = shape_of(&format!("{ext}.s{s}.trans.w"))?;
                if t[3] != channels || t[4] != channels {
                    return Err(Error::invalid(format!(
                        "structural check: transition {ext}.s{s} is {t:?} for {channels} channels"
                    )));
                }
                kernels.push((t[0], 1));
                observed.push(StageShape {
                    spatial,
                    channels,
                    receptive_field: receptive_field(&kernels)?,
                });
            }
            if observed != analytic {
                return Err(Error::invalid(format!(
                    "structural check failed for {ext}: declared {observed:?}, analytic {analytic:?}"
                )));
            }
        }
        if analytic.last().unwrap().spatial != self.output_extent {
            return Err(Error::invalid(
                "structural check: final extent differs from output extent",
            ));
        }
        Ok(())
    }
}

impl<T: Scalar> Model<T> {
    /// He-initialized weights, unit gammas, zero betas and biases.
    pub fn build(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        spec.check_structure()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = Parameters::initialize(&spec.param_specs(), &mut rng)?;
        Ok(Model { spec, params })
    }

    pub fn from_parts(spec: NetworkSpec, params: Parameters<T>) -> Result<Self> {
        spec.validate()?;
        for s in spec.param_specs() {
            let t = params
                .get(&s.name)
                .map_err(|_| Error::SpecMismatch(format!("missing parameter {}", s.name)))?;
            if t.shape() != s.shape.as_slice() {
                return Err(Error::SpecMismatch(format!(
                    "{} has shape {:?}, network expects {:?}",
                    s.name,
                    t.shape(),
                    s.shape
                )));
            }
        }
        Ok(Model { spec, params })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            params: self.params.cast(),
        }
    }

    /// Checks `[.., e, e, e, c]` inputs against the network geometry.
    fn check_input(&self, t: &Tensor<T>, what: &str) -> Result<()> {
        let e = self.spec.input_extent();
        let c = 2;
        let s = t.shape();
        let ok = (s.len() == 4 || s.len() == 5) && t.spatial() == Some([e, e, e]) && t.channels() == c;
        if !ok {
            return Err(Error::InvalidShape {
                op: "forward",
                detail: format!("{what} patch must be [{e},{e},{e},{c}] (optionally batched), got {s:?}"),
            });
        }
        Ok(())
    }

    /// Runs the network. `ft` holds (FLAIR, T2) and `t1` holds (T1, T1-CE)
    /// channels; the non-hierarchical variant concatenates them into a
    /// single 4-channel input (FLAIR, T2, T1, T1-CE).
    pub fn forward(&self, b: &mut Binder<'_, T>, ft: NodeId, t1: NodeId) -> Result<ForwardOutput> {
        let spec = &self.spec;
        let out = spec.output_extent;
        let target = [out; 3];
        let mut ledger = Vec::new();
        self.check_input(b.graph.value(ft), "FLAIR/T2")?;
        self.check_input(b.graph.value(t1), "T1/T1-CE")?;
        let stage_feats: Vec<Vec<NodeId>> = if spec.is_hierarchical() {
            let a = self.extractor(b, ft, "ft", &mut ledger)?;
            let c = self.extractor(b, t1, "t1", &mut Vec::new())?;
            vec![a, c]
        } else {
            let x = b.graph.concat_channels(&[ft, t1])?;
            vec![self.extractor(b, x, "all", &mut ledger)?]
        };

        let mut binary_stages = Vec::new();
        let mut full_stages = Vec::new();
        for s in 0..spec.stages() {
            if spec.is_hierarchical() {
                let f = b.graph.crop_center(stage_feats[0][s], target)?;
                binary_stages.push(b.conv(f, &format!("head.bin.s{}", s + 1))?);
            }
            let parts: Vec<NodeId> = stage_feats.iter().map(|f| f[s]).collect();
            let f = b.graph.crop_concat(&parts, target)?;
            full_stages.push(b.conv(f, &format!("head.full.s{}", s + 1))?);
        }
        let sum = |b: &mut Binder<'_, T>, xs: &[NodeId]| -> Result<NodeId> {
            let mut acc = xs[0];
            for &x in &xs[1..] {
                acc = b.graph.add(acc, x)?;
            }
            Ok(acc)
        };
        let binary = if binary_stages.is_empty() {
            None
        } else {
            Some(sum(b, &binary_stages)?)
        };
        let full = sum(b, &full_stages)?;
        Ok(ForwardOutput {
            binary,
            full,
            binary_stages,
            full_stages,
            ledger,
        })
    }

    /// Initial convolution plus all stages; returns the per-stage features.
    fn extractor(
        &self,
        b: &mut Binder<'_, T>,
        x: NodeId,
        ext: &str,
        ledger: &mut Vec<StageShape>,
    ) -> Result<Vec<NodeId>> {
        let spec = &self.spec;
        let mut layers = vec![(spec.kernel, 1)];
        let mut record = |g: &Graph<T>, id: NodeId, layers: &[(usize, usize)]| {
            let v = g.value(id);
            ledger.push(StageShape {
                spatial: v.spatial().unwrap()[0],
                channels: v.channels(),
                receptive_field: receptive_field(layers).unwrap(),
            });
        };
        let mut cur = b.conv(x, &format!("{ext}.init"))?;
        record(b.graph, cur, &layers);
        let mut feats = Vec::with_capacity(spec.stages());
        for s in 1..=spec.stages() {
            let prefix = format!("{ext}.s{s}");
            cur = match spec.variant {
                Variant::NonDense => plain_chain_forward(b, cur, &spec.plain_schedule(s), &prefix)?,
                _ => dense_block_forward(b, cur, &spec.dense_block(s), &prefix)?.output,
            };
            layers.extend(std::iter::repeat_n((spec.kernel, 1), spec.layers_per_stage));
            cur = transition_forward(b, cur, &format!("{prefix}.trans"))?;
            layers.push((1, 1));
            record(b.graph, cur, &layers);
            feats.push(cur);
        }
        Ok(feats)
    }

    /// Folds the batch statistics recorded by a training forward pass into
    /// the running averages.
    pub fn update_running_stats(&mut self, graph: &Graph<T>, bn_nodes: &[(String, NodeId)]) -> Result<()> {
        let m = T::of(BN_MOMENTUM);
        let one_m = T::of(1.0 - BN_MOMENTUM);
        for (prefix, id) in bn_nodes {
            let stats = graph
                .bn_stats(*id)
                .ok_or_else(|| Error::invalid(format!("{prefix} is not a training batch norm")))?;
            let unbias = T::of(stats.count as f64 / (stats.count as f64 - 1.0));
            let rm = self.params.get_mut(&format!("{prefix}.running_mean"))?;
            for (r, &v) in rm.data_mut().iter_mut().zip(&stats.mean) {
                *r = m * *r + one_m * v;
            }
            let rv = self.params.get_mut(&format!("{prefix}.running_var"))?;
            for (r, &v) in rv.data_mut().iter_mut().zip(&stats.var) {
                *r = m * *r + one_m * v * unbias;
            }
        }
        Ok(())
    }

    /// Convenience forward on raw tensors in a fresh graph.
    pub fn run(&self, ft: Tensor<T>, t1: Tensor<T>, mode: Mode) -> Result<(Graph<T>, ForwardOutput)> {
        let mut g = Graph::new();
        let a = g.input(ft);
        let c = g.input(t1);
        let mut b = Binder::new(&mut g, &self.params, mode);
        let out = self.forward(&mut b, a, c)?;
        Ok((g, out))
    }
}
