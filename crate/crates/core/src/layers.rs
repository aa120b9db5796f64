//! Composite layers: the pre-activation BN -> ReLU -> conv unit, densely
//! connected blocks, plain chains and 1x1x1 transition convolutions.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{Init, ParamSpec, Parameters};
use crate::tensor::{Graph, NodeId, Scalar, Tensor};

/// Batch-norm behaviour of a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; gradients tracked.
    Train,
    /// Running statistics; parameters enter the graph as constants.
    Infer,
}

/// Architecture of one densely connected block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenseBlockSpec {
    pub num_layers: usize,
    pub growth_rate: usize,
    pub kernel: usize,
    pub input_channels: usize,
}

impl DenseBlockSpec {
    /// Channels consumed by layer `l` (0-based): `d0 + g * l`.
    pub fn layer_input_channels(&self, l: usize) -> usize {
        self.input_channels + self.growth_rate * l
    }

    pub fn output_channels(&self) -> usize {
        self.layer_input_channels(self.num_layers)
    }

    /// Total loss of spatial extent per axis.
    pub fn shrinkage(&self) -> usize {
        self.num_layers * (self.kernel - 1)
    }
}

/// Receptive field after a sequence of `(kernel, stride)` layers, starting
/// from a single input voxel. Each layer adds `(k - 1)` times the product of
/// all earlier strides.
pub fn receptive_field(layers: &[(usize, usize)]) -> Result<usize> {
    let mut field = 1;
    let mut jump = 1;
    for &(k, s) in layers {
        if k == 0 || s == 0 {
            return Err(Error::invalid(format!(
                "receptive_field: kernel and stride must be >= 1, got ({k}, {s})"
            )));
        }
        field += (k - 1) * jump;
        jump *= s;
    }
    Ok(field)
}

/// Binds named parameters into a graph for one forward pass and records the
/// batch-norm nodes whose statistics must feed the running averages.
pub struct Binder<'a, T: Scalar> {
    pub graph: &'a mut Graph<T>,
    params: &'a Parameters<T>,
    pub mode: Mode,
    bound: HashMap<String, NodeId>,
    bn_nodes: Vec<(String, NodeId)>,
}

impl<'a, T: Scalar> Binder<'a, T> {
    pub fn new(graph: &'a mut Graph<T>, params: &'a Parameters<T>, mode: Mode) -> Self {
        Binder {
            graph,
            params,
            mode,
            bound: HashMap::new(),
            bn_nodes: Vec::new(),
        }
    }

    /// Graph node of a learnable parameter, created on first use.
    pub fn param(&mut self, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.bound.get(name) {
            return Ok(id);
        }
        let value = self.params.get(name)?.clone();
        let id = match self.mode {
            Mode::Train => self.graph.variable(value),
            Mode::Infer => self.graph.input(value),
        };
        self.bound.insert(name.to_string(), id);
        Ok(id)
    }

    /// Every parameter bound so far with its node.
    pub fn bound(&self) -> impl Iterator<Item = (&String, &NodeId)> {
        self.bound.iter()
    }

    /// Training-mode batch-norm nodes with their parameter prefix.
    pub fn bn_nodes(&self) -> &[(String, NodeId)] {
        &self.bn_nodes
    }

    pub fn conv(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let w = self.param(&format!("{prefix}.w"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        self.graph
            .conv3d(x, w, b)
            .map_err(|e| e.context(format!("conv {prefix}")))
    }

    pub fn batch_norm(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        match self.mode {
            Mode::Train => {
                let id = self.graph.batch_norm_train(x, gamma, beta)?;
                self.bn_nodes.push((prefix.to_string(), id));
                Ok(id)
            }
            Mode::Infer => {
                let mean: Tensor<T> = self.params.get(&format!("{prefix}.running_mean"))?.clone();
                let var: Tensor<T> = self.params.get(&format!("{prefix}.running_var"))?.clone();
                self.graph.batch_norm_infer(x, gamma, beta, &mean, &var)
            }
        }
    }
}

pub fn conv_params(prefix: &str, cin: usize, cout: usize, k: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::learnable(
            format!("{prefix}.w"),
            &[k, k, k, cin, cout],
            Init::He {
                fan_in: k * k * k * cin,
            },
        ),
        ParamSpec::learnable(format!("{prefix}.b"), &[cout], Init::Zeros),
    ]
}

pub fn batch_norm_params(prefix: &str, c: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::learnable(format!("{prefix}.gamma"), &[c], Init::Ones),
        ParamSpec::learnable(format!("{prefix}.beta"), &[c], Init::Zeros),
        ParamSpec::buffer(format!("{prefix}.running_mean"), &[c], Init::Zeros),
        ParamSpec::buffer(format!("{prefix}.running_var"), &[c], Init::Ones),
    ]
}

/// Parameters of `H(x) = W * relu(BN(x))`.
pub fn composite_unit_params(prefix: &str, cin: usize, cout: usize, k: usize) -> Vec<ParamSpec> {
    let mut p = batch_norm_params(&format!("{prefix}.bn"), cin);
    p.extend(conv_params(&format!("{prefix}.conv"), cin, cout, k));
    p
}

pub fn composite_unit_forward<T: Scalar>(b: &mut Binder<'_, T>, x: NodeId, prefix: &str) -> Result<NodeId> {
    let n = b.batch_norm(x, &format!("{prefix}.bn"))?;
    let r = b.graph.relu(n);
    b.conv(r, &format!("{prefix}.conv"))
}

pub fn dense_block_params(spec: &DenseBlockSpec, prefix: &str) -> Vec<ParamSpec> {
    if spec.growth_rate == 0 {
        return Vec::new();
    }
    (0..spec.num_layers)
        .flat_map(|l| {
            composite_unit_params(
                &format!("{prefix}.l{l}"),
                spec.layer_input_channels(l),
                spec.growth_rate,
                spec.kernel,
            )
        })
        .collect()
}

/// Result of a dense block with per-layer channel bookkeeping.
#[derive(Clone, Debug)]
pub struct DenseBlockOutput {
    pub output: NodeId,
    /// Channels fed into each internal layer.
    pub layer_inputs: Vec<usize>,
}

/// Layer `l + 1` consumes the channel concatenation of `x0 .. xl`. Valid
/// convolutions shrink each new map, so earlier maps are center-cropped to the
/// current extent before concatenation. The block output concatenates the
/// cropped `x0 .. xL`.
pub fn dense_block_forward<T: Scalar>(
    b: &mut Binder<'_, T>,
    x0: NodeId,
    spec: &DenseBlockSpec,
    prefix: &str,
) -> Result<DenseBlockOutput> {
    let x = b.graph.value(x0);
    let spatial = x.spatial().ok_or_else(|| Error::InvalidShape {
        op: "dense_block",
        detail: format!("expected a spatial feature map, got {:?}", x.shape()),
    })?;
    if x.channels() != spec.input_channels {
        return Err(Error::ShapeMismatch {
            op: "dense_block (input channels)",
            lhs: x.shape().to_vec(),
            rhs: vec![spec.input_channels],
        });
    }
    let min = spec.shrinkage() + 1;
    if spatial.iter().any(|&e| e < min) {
        return Err(Error::InvalidShape {
            op: "dense_block",
            detail: format!(
                "spatial extent {spatial:?} too small: {} layers of {}^3 need at least {min} per axis",
                spec.num_layers, spec.kernel
            ),
        });
    }
    let shrink = spec.kernel - 1;
    let out_extent = spatial.map(|e| e - spec.shrinkage());
    if spec.growth_rate == 0 {
        let output = b.graph.crop_center(x0, out_extent)?;
        return Ok(DenseBlockOutput {
            output,
            layer_inputs: vec![spec.input_channels; spec.num_layers],
        });
    }
    let mut feats = vec![x0];
    let mut layer_inputs = Vec::with_capacity(spec.num_layers);
    let mut cur = spatial;
    for l in 0..spec.num_layers {
        let input = if l == 0 { x0 } else { b.graph.crop_concat(&feats, cur)? };
        layer_inputs.push(b.graph.value(input).channels());
        let y = composite_unit_forward(b, input, &format!("{prefix}.l{l}"))?;
        cur = cur.map(|e| e - shrink);
        feats.push(y);
    }
    let output = b.graph.crop_concat(&feats, out_extent)?;
    Ok(DenseBlockOutput { output, layer_inputs })
}

/// Plain chain of composite units with the given output channel schedule.
pub fn plain_chain_params(prefix: &str, cin: usize, schedule: &[usize], k: usize) -> Vec<ParamSpec> {
    let mut c = cin;
    let mut p = Vec::new();
    for (l, &cout) in schedule.iter().enumerate() {
        p.extend(composite_unit_params(&format!("{prefix}.l{l}"), c, cout, k));
        c = cout;
    }
    p
}

pub fn plain_chain_forward<T: Scalar>(
    b: &mut Binder<'_, T>,
    x: NodeId,
    schedule: &[usize],
    prefix: &str,
) -> Result<NodeId> {
    let mut cur = x;
    for l in 0..schedule.len() {
        cur = composite_unit_forward(b, cur, &format!("{prefix}.l{l}"))?;
    }
    Ok(cur)
}

pub fn transition_params(prefix: &str, c: usize) -> Vec<ParamSpec> {
    conv_params(prefix, c, c, 1)
}

/// 1x1x1 convolution merging all feature levels, channel count preserved.
pub fn transition_forward<T: Scalar>(b: &mut Binder<'_, T>, x: NodeId, prefix: &str) -> Result<NodeId> {
    let c = b.graph.value(x).channels();
    let w = b.param(&format!("{prefix}.w"))?;
    let ws = b.graph.value(w).shape();
    if ws != [1, 1, 1, c, c] {
        return Err(Error::ShapeMismatch {
            op: "transition (kernel vs features)",
            lhs: ws.to_vec(),
            rhs: b.graph.value(x).shape().to_vec(),
        });
    }
    b.conv(x, prefix)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn receptive_field_table() {
        assert_eq!(receptive_field(&[]).unwrap(), 1);
        let mut seq = vec![(3, 1)];
        assert_eq!(receptive_field(&seq).unwrap(), 3);
        seq.extend([(3, 1); 6]);
        assert_eq!(receptive_field(&seq).unwrap(), 15);
        seq.push((1, 1));
        seq.extend([(3, 1); 6]);
        assert_eq!(receptive_field(&seq).unwrap(), 27);
        assert!(receptive_field(&[(0, 1)]).is_err());
        // strides multiply the step of later layers
        assert_eq!(receptive_field(&[(3, 2), (3, 1)]).unwrap(), 7);
    }

    #[test]
    fn dense_channel_formula() {
        let s1 = DenseBlockSpec {
            num_layers: 6,
            growth_rate: 12,
            kernel: 3,
            input_channels: 24,
        };
        assert_eq!(s1.output_channels(), 96);
        assert_eq!(s1.layer_input_channels(2), 48);
        let s2 = DenseBlockSpec {
            input_channels: 96,
            ..s1
        };
        assert_eq!(s2.output_channels(), 168);
        assert_eq!(s1.shrinkage(), 12);
    }

    fn small_block() -> DenseBlockSpec {
        DenseBlockSpec {
            num_layers: 3,
            growth_rate: 2,
            kernel: 3,
            input_channels: 3,
        }
    }

    #[test]
    fn dense_block_shapes_and_introspection() {
        let spec = small_block();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = Parameters::<f32>::initialize(&dense_block_params(&spec, "blk"), &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::randn(&[9, 9, 8, 3], 1.0, &mut rng));
        let mut b = Binder::new(&mut g, &params, Mode::Train);
        let out = dense_block_forward(&mut b, x, &spec, "blk").unwrap();
        assert_eq!(out.layer_inputs, vec![3, 5, 7]);
        assert_eq!(g.value(out.output).shape(), &[3, 3, 2, 9]);
    }

    #[test]
    fn dense_block_rejects_small_input() {
        let spec = small_block();
        let params = Parameters::<f32>::new();
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[6, 9, 9, 3]));
        let mut b = Binder::new(&mut g, &params, Mode::Train);
        let err = dense_block_forward(&mut b, x, &spec, "blk").unwrap_err().to_string();
        assert!(err.contains("at least 7"), "{err}");
    }

    #[test]
    fn zero_growth_is_cropped_identity() {
        let spec = DenseBlockSpec {
            growth_rate: 0,
            ..small_block()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = Parameters::<f32>::new();
        let mut g = Graph::new();
        let t = Tensor::randn(&[8, 8, 8, 3], 1.0, &mut rng);
        let x = g.input(t.clone());
        let mut b = Binder::new(&mut g, &params, Mode::Train);
        let out = dense_block_forward(&mut b, x, &spec, "blk").unwrap();
        let expect = crate::tensor::ops::crop_concat_forward(&[&t], [2, 2, 2]).unwrap();
        assert_eq!(g.value(out.output), &expect);
    }

    #[test]
    fn identity_transition() {
        let mut params = Parameters::<f32>::new();
        let mut w = Tensor::zeros(&[1, 1, 1, 4, 4]);
        for c in 0..4 {
            w.set(&[0, 0, 0, c, c], 1.0);
        }
        params.insert("t.w", w, false).unwrap();
        params.insert("t.b", Tensor::zeros(&[4]), false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = Tensor::randn(&[3, 4, 5, 4], 1.0, &mut rng);
        let mut g = Graph::new();
        let x = g.input(t.clone());
        let mut b = Binder::new(&mut g, &params, Mode::Infer);
        let y = transition_forward(&mut b, x, "t").unwrap();
        assert_eq!(g.value(y), &t);

        let x5 = g.input(Tensor::zeros(&[3, 3, 3, 5]));
        let mut b = Binder::new(&mut g, &params, Mode::Infer);
        assert!(transition_forward(&mut b, x5, "t").is_err());
    }

    #[test]
    fn plain_chain_matches_dense_geometry() {
        let spec = small_block();
        let schedule = [5, 7, 9];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = Parameters::<f32>::initialize(&plain_chain_params("p", 3, &schedule, 3), &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::randn(&[9, 9, 9, 3], 1.0, &mut rng));
        let mut b = Binder::new(&mut g, &params, Mode::Train);
        let y = plain_chain_forward(&mut b, x, &schedule, "p").unwrap();
        assert_eq!(g.value(y).shape(), &[3, 3, 3, spec.output_channels()]);
        let rf_dense = receptive_field(&vec![(3, 1); spec.num_layers]).unwrap();
        let rf_plain = receptive_field(&vec![(3, 1); schedule.len()]).unwrap();
        assert_eq!(rf_dense, rf_plain);
    }
}
