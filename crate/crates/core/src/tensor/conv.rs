//! Valid (unpadded, stride-1) 3D cross-correlation on channels-last data.
//!
//! Every pass is a GEMM against the kernel laid out as `[Cin, k^3 * Cout]`
//! ("tap-major"), which keeps the GEMM wide even when `Cout` is small:
//!
//! * forward: for each output depth slice and kernel depth `kd`, multiply the
//!   input slice `[H * W, Cin]` by the `kd` block `[Cin, k^2 * Cout]`, then
//!   add each tap's column block into the output at its spatial offset;
//! * backward: for each input slice and `kd`, gather the output gradient of
//!   slice `d - kd` into `G = [H * W, k^2 * Cout]` (one column block per
//!   tap, zero where the tap falls outside). Then `dX += G * W_kd^T` and
//!   `dW_kd += X^T * G`.

use rayon::prelude::*;

use super::{gemm_acc, gemm_set, Scalar, Tensor, View};
use crate::error::{Error, Result};

/// Geometry of one convolution call, batched or not.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub batched: bool,
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub k: usize,
    pub cout: usize,
    pub od: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], kernel: &[usize], bias: Option<&[usize]>) -> Result<Self> {
        let (batch, batched, sp) = match input.len() {
            4 => (1, false, input),
            5 => (input[0], true, &input[1..]),
            _ => {
                return Err(Error::InvalidShape {
                    op: "conv3d_valid",
                    detail: format!("input must be [D,H,W,C] or [N,D,H,W,C], got {input:?}"),
                })
            }
        };
        if kernel.len() != 5 || kernel[0] != kernel[1] || kernel[1] != kernel[2] {
            return Err(Error::InvalidShape {
                op: "conv3d_valid",
                detail: format!("kernel must be cubic [k,k,k,Cin,Cout], got {kernel:?}"),
            });
        }
        let (d, h, w, cin) = (sp[0], sp[1], sp[2], sp[3]);
        let k = kernel[0];
        if kernel[3] != cin {
            return Err(Error::ShapeMismatch {
                op: "conv3d_valid (input channels vs kernel)",
                lhs: input.to_vec(),
                rhs: kernel.to_vec(),
            });
        }
        if k > d.min(h).min(w) {
            return Err(Error::InvalidShape {
                op: "conv3d_valid",
                detail: format!("kernel extent {k} exceeds spatial extent of input {input:?} (kernel {kernel:?})"),
            });
        }
        let cout = kernel[4];
        if let Some(b) = bias {
            if b != [cout] {
                return Err(Error::ShapeMismatch {
                    op: "conv3d_valid (bias vs kernel output channels)",
                    lhs: b.to_vec(),
                    rhs: kernel.to_vec(),
                });
            }
        }
        Ok(ConvGeom {
            batch,
            batched,
            d,
            h,
            w,
            cin,
            k,
            cout,
            od: d - k + 1,
            oh: h - k + 1,
            ow: w - k + 1,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        let mut s = vec![self.od, self.oh, self.ow, self.cout];
        if self.batched {
            s.insert(0, self.batch);
        }
        s
    }

    fn taps(&self) -> usize {
        self.k * self.k * self.k
    }

    fn in_slice(&self) -> usize {
        self.h * self.w * self.cin
    }

    fn out_slice(&self) -> usize {
        self.oh * self.ow * self.cout
    }

    /// Start of input slice `(n, d)`.
    fn in_offset(&self, n: usize, d: usize) -> usize {
        (n * self.d + d) * self.in_slice()
    }
}

pub fn conv3d_forward<T: Scalar>(input: &Tensor<T>, kernel: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input.shape(), kernel.shape(), Some(bias.shape()))?;
    let mut out = Tensor::zeros(&g.output_shape());
    let wf = tap_major(&g, kernel.data());
    let x = input.data();
    let b = bias.data();
    let (k, cout) = (g.k, g.cout);
    let block = k * k * cout;
    out.data_mut().par_chunks_mut(g.out_slice()).enumerate().for_each_init(
        || vec![T::zero(); g.h * g.w * block],
        |taps, (s, dst)| {
            let (n, d) = (s / g.od, s % g.od);
            for px in dst.chunks_exact_mut(cout) {
                px.copy_from_slice(b);
            }
            for kd in 0..k {
                gemm_set(
                    x,
                    View::new(g.in_offset(n, d + kd), g.h * g.w, g.cin, g.cin, 1),
                    &wf,
                    View::new(kd * block, g.cin, block, g.taps() * cout, 1),
                    taps,
                    View::new(0, g.h * g.w, block, block, 1),
                );
                for h in 0..g.oh {
                    for w in 0..g.ow {
                        let o = &mut dst[(h * g.ow + w) * cout..][..cout];
                        for kh in 0..k {
                            for kw in 0..k {
                                let p = (h + kh) * g.w + w + kw;
                                let src = &taps[p * block + (kh * k + kw) * cout..][..cout];
                                for (a, &v) in o.iter_mut().zip(src) {
                                    *a += v;
                                }
                            }
                        }
                    }
                }
            }
        },
    );
    Ok(out)
}

/// `[k, k, k, Cin, Cout]` to `[Cin, k^3 * Cout]`.
fn tap_major<T: Scalar>(g: &ConvGeom, w: &[T]) -> Vec<T> {
    let tc = g.taps() * g.cout;
    let mut out = vec![T::zero(); g.cin * tc];
    for t in 0..g.taps() {
        for ci in 0..g.cin {
            let src = &w[(t * g.cin + ci) * g.cout..][..g.cout];
            out[ci * tc + t * g.cout..][..g.cout].copy_from_slice(src);
        }
    }
    out
}

/// Gradients of a valid convolution; each is computed only when requested.
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub kernel: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

/// Number of fixed groups of input slices the backward pass is split into.
/// Kernel-gradient partial sums are combined in group order, so results do
/// not depend on the thread count.
const BACKWARD_CHUNKS: usize = 4;

pub fn conv3d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    want: [bool; 3],
) -> Result<ConvGrads<T>> {
    let g = ConvGeom::new(input.shape(), kernel.shape(), None)?;
    if grad_out.shape() != g.output_shape().as_slice() {
        return Err(Error::ShapeMismatch {
            op: "conv3d_valid backward",
            lhs: grad_out.shape().to_vec(),
            rhs: g.output_shape(),
        });
    }
    let gy = grad_out.data();
    let (grad_input, grad_kernel) = if want[0] || want[1] {
        let (dx, dw) = input_and_kernel_grad(&g, input.data(), kernel.data(), gy, want[0], want[1]);
        let mut shape = vec![g.d, g.h, g.w, g.cin];
        if g.batched {
            shape.insert(0, g.batch);
        }
        (
            dx.map(|v| Tensor::from_vec(&shape, v).unwrap()),
            dw.map(|v| Tensor::from_vec(&[g.k, g.k, g.k, g.cin, g.cout], v).unwrap()),
        )
    } else {
        (None, None)
    };
    let grad_bias = want[2].then(|| {
        let mut acc = vec![T::zero(); g.cout];
        for row in gy.chunks_exact(g.cout) {
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        Tensor::from_vec(&[g.cout], acc).unwrap()
    });
    Ok(ConvGrads {
        input: grad_input,
        kernel: grad_kernel,
        bias: grad_bias,
    })
}

/// Fills `gbuf` (`[H * W, k^2 * Cout]`) with the output gradient of slice
/// `(n, od)` as seen by each in-plane tap of input slice `od + kd`.
fn gather_taps<T: Scalar>(g: &ConvGeom, gy: &[T], n: usize, od: usize, gbuf: &mut [T]) {
    let (k, cout) = (g.k, g.cout);
    let block = k * k * cout;
    let src = &gy[(n * g.od + od) * g.out_slice()..][..g.out_slice()];
    for h in 0..g.h {
        for w in 0..g.w {
            let row = &mut gbuf[(h * g.w + w) * block..][..block];
            for kh in 0..k {
                for kw in 0..k {
                    let dst = &mut row[(kh * k + kw) * cout..][..cout];
                    let inside = h >= kh && h - kh < g.oh && w >= kw && w - kw < g.ow;
                    if inside {
                        dst.copy_from_slice(&src[((h - kh) * g.ow + w - kw) * cout..][..cout]);
                    } else {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                    }
                }
            }
        }
    }
}

fn input_and_kernel_grad<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    gy: &[T],
    want_input: bool,
    want_kernel: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let wf = tap_major(g, w);
    let (k, cout) = (g.k, g.cout);
    let block = k * k * cout;
    let tc = g.taps() * cout;
    let slices = g.batch * g.d;
    let per_chunk = slices.div_ceil(BACKWARD_CHUNKS);
    let n_chunks = slices.div_ceil(per_chunk);
    let mut dx = vec![T::zero(); if want_input { slices * g.in_slice() } else { 0 }];

    let run = |c: usize, mut dst: Option<&mut [T]>| -> Vec<T> {
        let mut dwf = vec![T::zero(); if want_kernel { g.cin * tc } else { 0 }];
        let mut gbuf = vec![T::zero(); g.h * g.w * block];
        for s in c * per_chunk..((c + 1) * per_chunk).min(slices) {
            let (n, d) = (s / g.d, s % g.d);
            for kd in 0..k {
                if d < kd || d - kd >= g.od {
                    continue;
                }
                gather_taps(g, gy, n, d - kd, &mut gbuf);
                let gv = View::new(0, g.h * g.w, block, block, 1);
                if let Some(dst) = dst.as_deref_mut() {
                    let local = (s - c * per_chunk) * g.in_slice();
                    gemm_acc(
                        &gbuf,
                        gv,
                        &wf,
                        View::new(kd * block, block, g.cin, 1, tc),
                        dst,
                        View::new(local, g.h * g.w, g.cin, g.cin, 1),
                    );
                }
                if want_kernel {
                    gemm_acc(
                        x,
                        View::new(g.in_offset(n, d), g.cin, g.h * g.w, 1, g.cin),
                        &gbuf,
                        gv,
                        &mut dwf,
                        View::new(kd * block, g.cin, block, tc, 1),
                    );
                }
            }
        }
        dwf
    };

    let partials: Vec<Vec<T>> = if want_input {
        dx.par_chunks_mut(per_chunk * g.in_slice())
            .enumerate()
            .map(|(c, dst)| run(c, Some(dst)))
            .collect()
    } else {
        (0..n_chunks).into_par_iter().map(|c| run(c, None)).collect()
    };

    let dw = want_kernel.then(|| {
        let mut dwf = vec![T::zero(); g.cin * tc];
        for p in &partials {
            for (a, &v) in dwf.iter_mut().zip(p) {
                *a += v;
            }
        }
        let mut out = vec![T::zero(); g.taps() * g.cin * cout];
        for t in 0..g.taps() {
            for ci in 0..g.cin {
                out[(t * g.cin + ci) * cout..][..cout].copy_from_slice(&dwf[ci * tc + t * cout..][..cout]);
            }
        }
        out
    });
    (want_input.then_some(dx), dw)
}
