//! The tensor engine on its own: a valid 3D convolution checked against a
//! direct nested loop, then reverse-mode gradients of a small graph checked
//! against central differences in f64.
//!
//! ```text
//! cargo run --release --example tensor_ops
//! ```

use dense3d::tensor::conv::conv3d_forward;
use dense3d::{Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn direct_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let [n, d, h, wd, cin] = x.shape().try_into().unwrap();
    let [k, _, _, _, cout] = w.shape().try_into().unwrap();
    let (od, oh, ow) = (d - k + 1, h - k + 1, wd - k + 1);
    let mut y = Tensor::zeros(&[n, od, oh, ow, cout]);
    for (s, z, r, c, o) in positions(n, od, oh, ow, cout) {
        let mut acc = b.data()[o];
        for (i, j, l) in (0..k).flat_map(|i| (0..k).flat_map(move |j| (0..k).map(move |l| (i, j, l)))) {
            for ci in 0..cin {
                acc += x.get(&[s, z + i, r + j, c + l, ci]) * w.get(&[i, j, l, ci, o]);
            }
        }
        y.set(&[s, z, r, c, o], acc);
    }
    y
}

fn positions(
    n: usize,
    d: usize,
    h: usize,
    w: usize,
    c: usize,
) -> impl Iterator<Item = (usize, usize, usize, usize, usize)> {
    (0..n).flat_map(move |s| {
        (0..d)
            .flat_map(move |z| (0..h).flat_map(move |r| (0..w).flat_map(move |q| (0..c).map(move |o| (s, z, r, q, o)))))
    })
}

fn main() -> dense3d::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::<f32>::randn(&[2, 7, 6, 5, 3], 1.0, &mut rng);
    let w = Tensor::<f32>::randn(&[3, 3, 3, 3, 4], 0.3, &mut rng);
    let b = Tensor::<f32>::randn(&[4], 0.1, &mut rng);
    let fast = conv3d_forward(&x, &w, &b)?;
    let slow = direct_conv(&x.cast(), &w.cast(), &b.cast());
    println!(
        "conv {:?} -> {:?}, max |fast - direct| = {:.2e}",
        x.shape(),
        fast.shape(),
        fast.cast::<f64>().max_abs_diff(&slow)
    );

    // loss = CE(conv(relu(x)), targets), differentiated w.r.t. the kernel
    let x = x.cast::<f64>();
    let targets: Vec<u8> = (0..fast.len() / 4).map(|i| (i % 4) as u8).collect();
    let loss = |w: &Tensor<f64>| -> dense3d::Result<(Graph<f64>, dense3d::NodeId, dense3d::NodeId)> {
        let mut g = Graph::new();
        let xi = g.input(x.clone());
        let wi = g.variable(w.clone());
        let bi = g.input(b.cast());
        let a = g.relu(xi);
        let y = g.conv3d(a, wi, bi)?;
        let l = g.cross_entropy(y, &targets)?;
        Ok((g, l, wi))
    };
    let w = w.cast::<f64>();
    let (mut g, l, wi) = loss(&w)?;
    g.backward(l)?;
    let grad = g.grad_or_zeros(wi);
    let h = 1e-3;
    for c in [0, 17, 60, 107] {
        let mut up = w.clone();
        up.data_mut()[c] += h;
        let mut down = w.clone();
        down.data_mut()[c] -= h;
        let f = |t: &Tensor<f64>| loss(t).map(|(g, l, _)| g.value(l).data()[0]);
        let numeric = (f(&up)? - f(&down)?) / (2.0 * h);
        println!("dL/dw[{c:3}]: analytic {:+.8}  numeric {numeric:+.8}", grad.data()[c]);
    }
    Ok(())
}
