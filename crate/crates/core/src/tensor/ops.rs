//! Forward and backward kernels for the non-convolution operators.

use super::{Scalar, Tensor, BN_EPS};
use crate::error::{Error, Result};

/// Leading batch extent and spatial extents of a 4D or 5D channels-last shape.
fn split_spatial(op: &'static str, shape: &[usize]) -> Result<(usize, [usize; 3], usize)> {
    match shape.len() {
        4 => Ok((1, [shape[0], shape[1], shape[2]], shape[3])),
        5 => Ok((shape[0], [shape[1], shape[2], shape[3]], shape[4])),
        _ => Err(Error::InvalidShape {
            op,
            detail: format!("expected [D,H,W,C] or [N,D,H,W,C], got {shape:?}"),
        }),
    }
}

/// Per-axis offsets of a centered crop of `shape` down to `target`.
pub fn crop_offsets(shape: &[usize], target: [usize; 3]) -> Result<[usize; 3]> {
    let (_, sp, _) = split_spatial("crop_center", shape)?;
    let mut off = [0; 3];
    for a in 0..3 {
        if target[a] == 0 || target[a] > sp[a] || !(sp[a] - target[a]).is_multiple_of(2) {
            return Err(Error::InvalidShape {
                op: "crop_center",
                detail: format!("cannot center-crop {shape:?} to {target:?}: margins must be even and non-negative"),
            });
        }
        off[a] = (sp[a] - target[a]) / 2;
    }
    Ok(off)
}

/// Center-crops every part to `target` and stacks the results along the
/// channel axis in argument order. Leading (batch) extents must agree.
pub fn crop_concat_forward<T: Scalar>(parts: &[&Tensor<T>], target: [usize; 3]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
    let (batch, _, _) = split_spatial("concat_channels", first.shape())?;
    let mut layouts = Vec::with_capacity(parts.len());
    let mut ctot = 0;
    for p in parts {
        let (b, sp, c) = split_spatial("concat_channels", p.shape())?;
        if b != batch || p.shape().len() != first.shape().len() {
            return Err(Error::ShapeMismatch {
                op: "concat_channels (batch extents)",
                lhs: first.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        layouts.push((sp, c, crop_offsets(p.shape(), target)?, ctot));
        ctot += c;
    }
    let mut shape = vec![target[0], target[1], target[2], ctot];
    if first.shape().len() == 5 {
        shape.insert(0, batch);
    }
    let mut out = Tensor::zeros(&shape);
    let dst = out.data_mut();
    let [td, th, tw] = target;
    for (p, &(sp, c, off, c0)) in parts.iter().zip(&layouts) {
        let src = p.data();
        for n in 0..batch {
            for d in 0..td {
                for h in 0..th {
                    let srow = (((n * sp[0] + d + off[0]) * sp[1] + h + off[1]) * sp[2] + off[2]) * c;
                    let drow = ((n * td + d) * th + h) * tw * ctot;
                    for w in 0..tw {
                        dst[drow + w * ctot + c0..][..c].copy_from_slice(&src[srow + w * c..][..c]);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Routes the gradient of a crop-concat back to each part; voxels outside the
/// crop receive zero.
pub fn crop_concat_backward<T: Scalar>(grad: &Tensor<T>, part_shapes: &[Vec<usize>]) -> Vec<Tensor<T>> {
    let (batch, target, ctot) = split_spatial("concat_channels", grad.shape()).unwrap();
    let [td, th, tw] = target;
    let g = grad.data();
    let mut c0 = 0;
    part_shapes
        .iter()
        .map(|shape| {
            let (_, sp, c) = split_spatial("concat_channels", shape).unwrap();
            let off = crop_offsets(shape, target).unwrap();
            let mut out = Tensor::zeros(shape);
            let dst = out.data_mut();
            for n in 0..batch {
                for d in 0..td {
                    for h in 0..th {
                        let drow = (((n * sp[0] + d + off[0]) * sp[1] + h + off[1]) * sp[2] + off[2]) * c;
                        let srow = ((n * td + d) * th + h) * tw * ctot;
                        for w in 0..tw {
                            dst[drow + w * c..][..c].copy_from_slice(&g[srow + w * ctot + c0..][..c]);
                        }
                    }
                }
            }
            c0 += c;
            out
        })
        .collect()
}

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Scalar>(x: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(x.shape(), data).unwrap()
}

pub fn add_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "add",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::from_vec(a.shape(), data)
}

/// Saved batch statistics of a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance of the batch.
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
    /// Samples per channel.
    pub count: usize,
}

fn check_bn<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<usize> {
    let c = x.channels();
    for p in [gamma, beta] {
        if p.shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "batch_norm (parameter vs channels)",
                lhs: p.shape().to_vec(),
                rhs: x.shape().to_vec(),
            });
        }
    }
    Ok(c)
}

pub fn batch_norm_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<(Tensor<T>, BnStats<T>)> {
    let c = check_bn(x, gamma, beta)?;
    let rows = x.len() / c;
    if rows < 2 {
        return Err(Error::InvalidShape {
            op: "batch_norm",
            detail: format!(
                "training mode needs at least 2 samples per channel, shape {:?}",
                x.shape()
            ),
        });
    }
    let mut sum = vec![0.0f64; c];
    let mut sq = vec![0.0f64; c];
    for row in x.data().chunks_exact(c) {
        for ((s, q), &v) in sum.iter_mut().zip(sq.iter_mut()).zip(row) {
            let v = v.as_f64();
            *s += v;
            *q += v * v;
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / rows as f64).collect();
    let var: Vec<f64> = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| (q / rows as f64 - m * m).max(0.0))
        .collect();
    let inv_std: Vec<T> = var.iter().map(|v| T::of(1.0 / (v + BN_EPS).sqrt())).collect();
    let mean: Vec<T> = mean.into_iter().map(T::of).collect();
    let y = affine_normalize(x, &mean, &inv_std, gamma.data(), beta.data());
    Ok((
        y,
        BnStats {
            mean,
            var: var.into_iter().map(T::of).collect(),
            inv_std,
            count: rows,
        },
    ))
}

pub fn batch_norm_infer<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>)> {
    check_bn(x, gamma, beta)?;
    check_bn(x, running_mean, running_var)?;
    let inv_std: Vec<T> = running_var
        .data()
        .iter()
        .map(|&v| T::of(1.0 / (v.as_f64() + BN_EPS).sqrt()))
        .collect();
    let y = affine_normalize(x, running_mean.data(), &inv_std, gamma.data(), beta.data());
    Ok((y, inv_std))
}

fn affine_normalize<T: Scalar>(x: &Tensor<T>, mean: &[T], inv_std: &[T], gamma: &[T], beta: &[T]) -> Tensor<T> {
    let c = x.channels();
    let scale: Vec<T> = (0..c).map(|i| inv_std[i] * gamma[i]).collect();
    let shift: Vec<T> = (0..c).map(|i| beta[i] - mean[i] * scale[i]).collect();
    let mut out = vec![T::zero(); x.len()];
    for (o, row) in out.chunks_exact_mut(c).zip(x.data().chunks_exact(c)) {
        for (((o, &v), &a), &b) in o.iter_mut().zip(row).zip(&scale).zip(&shift) {
            *o = v * a + b;
        }
    }
    Tensor::from_vec(x.shape(), out).unwrap()
}

/// Gradients of training-mode batch norm: `(dx, dgamma, dbeta)`.
pub fn batch_norm_train_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    stats: &BnStats<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let c = x.channels();
    let rows = x.len() as f64 / c as f64;
    // sum(dy * xhat) = inv_std * (sum(dy * x) - mean * sum(dy))
    let mut sum_dy = vec![0.0f64; c];
    let mut sum_dy_x = vec![0.0f64; c];
    for (xr, gr) in x.data().chunks_exact(c).zip(dy.data().chunks_exact(c)) {
        for (((s, sx), &xv), &gv) in sum_dy.iter_mut().zip(sum_dy_x.iter_mut()).zip(xr).zip(gr) {
            let gv = gv.as_f64();
            *s += gv;
            *sx += gv * xv.as_f64();
        }
    }
    let sum_dy_xhat: Vec<f64> = (0..c)
        .map(|i| stats.inv_std[i].as_f64() * (sum_dy_x[i] - stats.mean[i].as_f64() * sum_dy[i]))
        .collect();
    // dx = a * dy + b * x + k per channel
    let g = gamma.data();
    let mut ca = vec![T::zero(); c];
    let mut cb = vec![T::zero(); c];
    let mut ck = vec![T::zero(); c];
    for i in 0..c {
        let inv = stats.inv_std[i].as_f64();
        let a = g[i].as_f64() * inv;
        let mean_dy = sum_dy[i] / rows;
        let mean_dy_xhat = sum_dy_xhat[i] / rows;
        ca[i] = T::of(a);
        cb[i] = T::of(-a * inv * mean_dy_xhat);
        ck[i] = T::of(-a * mean_dy + a * inv * stats.mean[i].as_f64() * mean_dy_xhat);
    }
    let mut dx = vec![T::zero(); x.len()];
    for ((o, xr), gr) in dx
        .chunks_exact_mut(c)
        .zip(x.data().chunks_exact(c))
        .zip(dy.data().chunks_exact(c))
    {
        for i in 0..c {
            o[i] = ca[i] * gr[i] + cb[i] * xr[i] + ck[i];
        }
    }
    (
        Tensor::from_vec(x.shape(), dx).unwrap(),
        Tensor::from_vec(&[c], sum_dy_xhat.into_iter().map(T::of).collect()).unwrap(),
        Tensor::from_vec(&[c], sum_dy.into_iter().map(T::of).collect()).unwrap(),
    )
}

/// Gradients of inference-mode batch norm (a fixed per-channel affine map).
pub fn batch_norm_infer_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let c = x.channels();
    let g = gamma.data();
    let mut sum_dy = vec![0.0f64; c];
    let mut sum_dy_x = vec![0.0f64; c];
    let scale: Vec<T> = (0..c).map(|i| g[i] * inv_std[i]).collect();
    let mut dx = vec![T::zero(); x.len()];
    for ((o, xr), gr) in dx
        .chunks_exact_mut(c)
        .zip(x.data().chunks_exact(c))
        .zip(dy.data().chunks_exact(c))
    {
        for i in 0..c {
            let gv = gr[i].as_f64();
            sum_dy[i] += gv;
            sum_dy_x[i] += gv * xr[i].as_f64();
            o[i] = gr[i] * scale[i];
        }
    }
    let dgamma = (0..c).map(|i| T::of(inv_std[i].as_f64() * (sum_dy_x[i] - mean[i].as_f64() * sum_dy[i])));
    (
        Tensor::from_vec(x.shape(), dx).unwrap(),
        Tensor::from_vec(&[c], dgamma.collect()).unwrap(),
        Tensor::from_vec(&[c], sum_dy.into_iter().map(T::of).collect()).unwrap(),
    )
}

pub fn softmax_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let c = x.channels();
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks_exact(c) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        let mut z = T::zero();
        for &v in row {
            let e = (v - max).exp();
            z += e;
            out.push(e);
        }
        for v in &mut out[start..] {
            *v = *v / z;
        }
    }
    Tensor::from_vec(x.shape(), out).unwrap()
}

pub fn softmax_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let c = y.channels();
    let mut dx = Vec::with_capacity(y.len());
    for (yr, gr) in y.data().chunks_exact(c).zip(dy.data().chunks_exact(c)) {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for (&a, &b) in yr.iter().zip(gr) {
            dx.push(a * (b - dot));
        }
    }
    Tensor::from_vec(y.shape(), dx).unwrap()
}

pub fn check_targets(scores: &[usize], targets: &[u8]) -> Result<()> {
    let k = *scores.last().unwrap();
    let rows: usize = scores[..scores.len() - 1].iter().product();
    if rows != targets.len() {
        return Err(Error::InvalidShape {
            op: "cross_entropy",
            detail: format!(
                "scores {scores:?} have {rows} voxels but {} targets were given",
                targets.len()
            ),
        });
    }
    if let Some((i, &t)) = targets.iter().enumerate().find(|(_, &t)| t as usize >= k) {
        return Err(Error::invalid(format!(
            "cross_entropy target {t} at voxel {i} out of range for {k} classes"
        )));
    }
    Ok(())
}

/// Mean over voxels of `-log softmax(scores)[target]`, via log-sum-exp.
pub fn cross_entropy_forward<T: Scalar>(scores: &Tensor<T>, targets: &[u8]) -> Result<T> {
    check_targets(scores.shape(), targets)?;
    let k = scores.channels();
    let mut total = 0.0f64;
    for (row, &t) in scores.data().chunks_exact(k).zip(targets) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse: T = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        total += (lse - row[t as usize]).as_f64();
    }
    Ok(T::of(total / targets.len() as f64))
}

pub fn cross_entropy_backward<T: Scalar>(scores: &Tensor<T>, targets: &[u8], upstream: T) -> Tensor<T> {
    let mut g = softmax_forward(scores);
    let k = scores.channels();
    let scale = upstream / T::of(targets.len() as f64);
    for (row, &t) in g.data_mut().chunks_exact_mut(k).zip(targets) {
        row[t as usize] -= T::one();
        for v in row.iter_mut() {
            *v *= scale;
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_definition() {
        let x = Tensor::<f32>::from_vec(&[2], vec![-1.5, 2.0]).unwrap();
        assert_eq!(relu_forward(&x).data(), &[0.0, 2.0]);
    }

    #[test]
    fn concat_channel_counts() {
        let a = Tensor::<f32>::zeros(&[4, 4, 4, 96]);
        let b = Tensor::<f32>::ones(&[4, 4, 4, 96]);
        let c = crop_concat_forward(&[&a, &b], [4, 4, 4]).unwrap();
        assert_eq!(c.shape(), &[4, 4, 4, 192]);
        assert_eq!(c.slice_channels(0, 96).unwrap(), a);
        assert_eq!(c.slice_channels(96, 192).unwrap(), b);
    }

    #[test]
    fn crop_margins() {
        assert_eq!(crop_offsets(&[24, 24, 24, 96], [12, 12, 12]).unwrap(), [6, 6, 6]);
        assert!(crop_offsets(&[5, 5, 5, 1], [2, 2, 2]).is_err());
        assert!(crop_offsets(&[3, 3, 3, 1], [5, 3, 3]).is_err());

        let x = Tensor::<f32>::from_vec(&[3, 3, 3, 1], (0..27).map(|v| v as f32).collect()).unwrap();
        let c = crop_concat_forward(&[&x], [1, 1, 1]).unwrap();
        assert_eq!(c.data(), &[13.0]);
        assert_eq!(crop_concat_forward(&[&x], [3, 3, 3]).unwrap(), x);
    }

    #[test]
    fn uniform_softmax() {
        let x = Tensor::<f64>::full(&[2, 4], 0.7);
        assert!(softmax_forward(&x).data().iter().all(|&p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn cross_entropy_uniform_is_ln_k() {
        let x = Tensor::<f32>::zeros(&[3, 4]);
        let l = cross_entropy_forward(&x, &[0, 1, 3]).unwrap();
        assert!((l - 4f32.ln()).abs() < 1e-6);
        assert!(cross_entropy_forward(&x, &[0, 1, 4]).is_err());
    }

    #[test]
    fn bn_gamma_zero_gives_beta() {
        let mut rng = rand::rng();
        let x = Tensor::<f32>::randn(&[3, 3, 3, 2], 1.0, &mut rng);
        let gamma = Tensor::zeros(&[2]);
        let beta = Tensor::from_vec(&[2], vec![0.5, -2.0]).unwrap();
        let (y, _) = batch_norm_train(&x, &gamma, &beta).unwrap();
        for row in y.data().chunks_exact(2) {
            assert_eq!(row, &[0.5, -2.0]);
        }
        let bad = Tensor::zeros(&[3]);
        assert!(batch_norm_train(&x, &bad, &beta).is_err());
    }

    #[test]
    fn bn_zero_variance_channel_is_finite() {
        let x = Tensor::<f32>::full(&[2, 2, 2, 1], 3.0);
        let (y, _) = batch_norm_train(&x, &Tensor::ones(&[1]), &Tensor::zeros(&[1])).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }
}
