use p3d_core::numerics::gradcheck::{self, rel_err};
use p3d_core::numerics::{attention, concat, pixel_shuffle_3d, pixel_unshuffle_3d, Graph, PadMode, Tensor, Var};
use p3d_core::Result;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, &mut rng(seed))
}

/// Every entry checked, since the inputs here are small. Entries below 1e-3 in
/// magnitude are judged on absolute error, where central differences at
/// h = 1e-6 are limited by roundoff rather than by the gradient.
fn assert_grads<F>(f: F, inputs: &[Tensor<f64>], tol: f64)
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    let n = inputs.iter().map(|t| t.numel()).max().unwrap();
    let rep = gradcheck::check(f, inputs, 1e-6, n, 1e-3, &mut rng(99)).unwrap();
    for t in &rep.tensors {
        assert!(
            t.max_entry_rel_err <= tol && t.directional_rel_err <= tol,
            "input {} failed: {:?}",
            t.index,
            t
        );
    }
}

/// Weighted sum so the loss is sensitive to every output entry differently.
fn probe<'g>(y: Var<'g, f64>, seed: u64) -> Result<Var<'g, f64>> {
    let w = y.graph().constant(randn(&y.shape(), seed));
    Ok(y.mul(w)?.sum())
}

fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, circular: bool) -> Tensor<f64> {
    let (xs, ws) = (x.shape(), w.shape());
    let (bn, cin, cout, k) = (xs[0], xs[1], ws[0], ws[2]);
    let pad = (k - 1) / 2;
    let dims = [xs[2], xs[3], xs[4]];
    let od: Vec<usize> = dims
        .iter()
        .map(|&n| {
            if circular {
                n / stride
            } else {
                (n + 2 * pad - k) / stride + 1
            }
        })
        .collect();
    let mut out = Tensor::zeros(&[bn, cout, od[0], od[1], od[2]]);
    let at = |v: isize, n: usize| -> Option<usize> {
        if circular {
            Some(v.rem_euclid(n as isize) as usize)
        } else if v < 0 || v >= n as isize {
            None
        } else {
            Some(v as usize)
        }
    };
    for bi in 0..bn {
        for co in 0..cout {
            for ox in 0..od[0] {
                for oy in 0..od[1] {
                    for oz in 0..od[2] {
                        let mut acc = b[co];
                        for ci in 0..cin {
                            for a in 0..k {
                                for bb in 0..k {
                                    for c in 0..k {
                                        let ix = at((ox * stride + a) as isize - pad as isize, dims[0]);
                                        let iy = at((oy * stride + bb) as isize - pad as isize, dims[1]);
                                        let iz = at((oz * stride + c) as isize - pad as isize, dims[2]);
                                        if let (Some(ix), Some(iy), Some(iz)) = (ix, iy, iz) {
                                            let xv = x.data()
                                                [(((bi * cin + ci) * dims[0] + ix) * dims[1] + iy) * dims[2] + iz];
                                            let wv = w.data()[(((co * cin + ci) * k + a) * k + bb) * k + c];
                                            acc += xv * wv;
                                        }
                                    }
                                }
                            }
                        }
                        out.data_mut()[(((bi * cout + co) * od[0] + ox) * od[1] + oy) * od[2] + oz] = acc;
                    }
                }
            }
        }
    }
    out
}

#[test]
fn conv_matches_direct_loops() {
    for (i, &(stride, circular, dims)) in [
        (1, false, [5, 4, 6]),
        (2, false, [5, 6, 4]),
        (1, true, [4, 5, 3]),
        (2, true, [4, 6, 8]),
    ]
    .iter()
    .enumerate()
    {
        let x = randn(&[2, 3, dims[0], dims[1], dims[2]], i as u64);
        let w = randn(&[4, 3, 3, 3, 3], 10 + i as u64);
        let b = randn(&[4], 20 + i as u64);
        let g = Graph::new();
        let mode = if circular { PadMode::Circular } else { PadMode::Zero };
        let y = g
            .constant(x.clone())
            .conv3d(g.constant(w.clone()), Some(g.constant(b.clone())), stride, mode)
            .unwrap();
        let oracle = conv_oracle(&x, &w, b.data(), stride, circular);
        assert_eq!(y.shape(), oracle.shape());
        for (a, o) in y.value().data().iter().zip(oracle.data()) {
            assert!((a - o).abs() < 1e-12, "case {i}");
        }
    }
}

#[test]
fn conv_identity_and_shape_examples() {
    let g = Graph::<f64>::new();
    let mut w = Tensor::zeros(&[1, 1, 3, 3, 3]);
    w.data_mut()[13] = 1.0;
    let x = g.constant(Tensor::ones(&[1, 1, 4, 4, 4]));
    let y = x.conv3d(g.constant(w), None, 1, PadMode::Zero).unwrap();
    assert_eq!(*y.value(), Tensor::ones(&[1, 1, 4, 4, 4]));

    let x = g.constant(Tensor::zeros(&[1, 2, 8, 8, 8]));
    let y = x
        .conv3d(g.constant(Tensor::zeros(&[5, 2, 3, 3, 3])), None, 2, PadMode::Zero)
        .unwrap();
    assert_eq!(y.shape(), vec![1, 5, 4, 4, 4]);

    let bad = g.constant(Tensor::zeros(&[1, 2, 5, 4, 4]));
    assert!(bad
        .conv3d(g.constant(Tensor::zeros(&[1, 2, 3, 3, 3])), None, 2, PadMode::Circular)
        .is_err());
    assert!(x
        .conv3d(g.constant(Tensor::zeros(&[1, 3, 3, 3, 3])), None, 1, PadMode::Zero)
        .is_err());
}

#[test]
fn conv_weight_gradient_of_sum_matches_fd() {
    let x = randn(&[1, 2, 5, 5, 5], 1);
    let w = randn(&[3, 2, 3, 3, 3], 2);
    let xc = x.clone();
    let rep = gradcheck::check(
        move |g, v| Ok(g.constant(xc.clone()).conv3d(v[0], None, 1, PadMode::Zero)?.sum()),
        &[w],
        1e-6,
        162,
        1e-6,
        &mut rng(0),
    )
    .unwrap();
    assert!(rep.max_rel_err() <= 1e-6, "{rep:?}");
}

#[test]
fn conv_gradients_all_inputs() {
    for (i, &(stride, mode)) in [
        (1, PadMode::Zero),
        (2, PadMode::Zero),
        (1, PadMode::Circular),
        (2, PadMode::Circular),
    ]
    .iter()
    .enumerate()
    {
        let s = i as u64;
        assert_grads(
            move |_, v| probe(v[0].conv3d(v[1], Some(v[2]), stride, mode)?, 50 + s),
            &[
                randn(&[2, 2, 4, 4, 2], s),
                randn(&[3, 2, 3, 3, 3], 7 + s),
                randn(&[3], 9 + s),
            ],
            1e-5,
        );
    }
}

#[test]
fn circular_conv_is_shift_equivariant() {
    let x = randn(&[1, 2, 8, 8, 8], 3);
    let w = randn(&[2, 2, 3, 3, 3], 4);
    let g = Graph::new();
    let run = |t: &Tensor<f64>, stride| {
        g.constant(t.clone())
            .conv3d(g.constant(w.clone()), None, stride, PadMode::Circular)
            .unwrap()
            .value()
    };
    for axis in 2..5 {
        let shifted = run(&x.roll(axis, 3).unwrap(), 1);
        assert_eq!(*shifted, run(&x, 1).roll(axis, 3).unwrap());
        let shifted = run(&x.roll(axis, 2).unwrap(), 2);
        assert_eq!(*shifted, run(&x, 2).roll(axis, 1).unwrap());
    }
}

#[test]
fn group_norm_statistics_and_examples() {
    let x = randn(&[2, 8, 4, 4, 4], 5);
    let g = Graph::new();
    let ones = g.constant(Tensor::ones(&[8]));
    let zeros = g.constant(Tensor::zeros(&[8]));
    let y = g.constant(x).group_norm(4, ones, zeros, 1e-5).unwrap().value();
    for grp in 0..8 {
        let vals = &y.data()[grp * 128..(grp + 1) * 128];
        let mean: f64 = vals.iter().sum::<f64>() / 128.0;
        let var: f64 = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 128.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-4, "var {var}");
    }

    let c = g.constant(Tensor::full(&[1, 4, 2, 2, 2], 3.0));
    let ones4 = g.constant(Tensor::ones(&[4]));
    let zeros4 = g.constant(Tensor::zeros(&[4]));
    let y = c.group_norm(2, ones4, zeros4, 1e-5).unwrap().value();
    assert!(y.data().iter().all(|&v| v == 0.0));

    let beta = g.constant(Tensor::full(&[4], 0.7));
    let y = g
        .constant(randn(&[1, 4, 2, 2, 2], 6))
        .group_norm(2, zeros4, beta, 1e-5)
        .unwrap()
        .value();
    assert!(y.data().iter().all(|&v| v == 0.7));
    assert!(c.group_norm(3, ones4, zeros4, 1e-5).is_err());
}

#[test]
fn group_norm_gradients() {
    for (i, shape) in [[1, 4, 2, 3, 2], [2, 6, 2, 2, 2], [1, 2, 3, 1, 2]].iter().enumerate() {
        let c = shape[1];
        let groups = if c == 6 { 3 } else { 2 };
        assert_grads(
            move |_, v| probe(v[0].group_norm(groups, v[1], v[2], 1e-5)?, 30 + i as u64),
            &[randn(shape, i as u64), randn(&[c], 11), randn(&[c], 12)],
            1e-5,
        );
    }
}

#[test]
fn composite_conv_norm_gelu_gradients() {
    assert_grads(
        |_, v| {
            Ok(v[0]
                .conv3d(v[1], Some(v[2]), 1, PadMode::Zero)?
                .group_norm(2, v[3], v[4], 1e-5)?
                .gelu()
                .sum())
        },
        &[
            randn(&[1, 2, 4, 4, 4], 1),
            randn(&[4, 2, 3, 3, 3], 2),
            randn(&[4], 3),
            randn(&[4], 4),
            randn(&[4], 5),
        ],
        1e-5,
    );
}

#[test]
fn elementwise_and_structural_gradients() {
    let shapes: [&[usize]; 3] = [&[3, 4], &[2, 3, 5], &[7]];
    for (i, sh) in shapes.iter().enumerate() {
        let s = i as u64;
        assert_grads(move |_, v| probe(v[0].gelu(), s), &[randn(sh, s)], 1e-5);
        assert_grads(move |_, v| probe(v[0].silu(), s), &[randn(sh, s)], 1e-5);
        assert_grads(move |_, v| probe(v[0].softmax(), s), &[randn(sh, s)], 1e-5);
        assert_grads(move |_, v| probe(v[0].layer_norm(1e-5), s), &[randn(sh, s)], 1e-5);
        assert_grads(move |_, v| Ok(v[0].mul(v[0])?.mean()), &[randn(sh, s)], 1e-5);
        assert_grads(
            move |_, v| probe(v[0].scale(-1.5).add_scalar(2.0), s),
            &[randn(sh, s)],
            1e-5,
        );
    }
    // broadcasting binary ops
    assert_grads(
        |_, v| probe(v[0].mul(v[1])?.add(v[2])?.sub(v[1])?, 1),
        &[randn(&[2, 3, 4], 1), randn(&[3, 1], 2), randn(&[4], 3)],
        1e-5,
    );
    assert_grads(
        |_, v| probe(v[0].mul(v[1])?, 2),
        &[randn(&[2, 1, 4], 1), randn(&[1, 3, 1], 2)],
        1e-5,
    );
    // reshape / permute / narrow / concat / split
    assert_grads(
        |_, v| {
            let a = v[0].permute(&[2, 0, 1])?.reshape(&[4, 6])?;
            let parts = a.split(1, &[2, 4])?;
            let b = concat(&[parts[1], v[1], parts[0]], 1)?;
            probe(b.narrow(0, 1, 2)?.transpose(0, 1)?, 5)
        },
        &[randn(&[2, 3, 4], 1), randn(&[4, 3], 2)],
        1e-5,
    );
    // linear with and without bias
    let lin_shapes: [&[usize]; 3] = [&[5, 3], &[2, 4, 3], &[3, 3]];
    for (i, sh) in lin_shapes.iter().enumerate() {
        assert_grads(
            move |_, v| probe(v[0].linear(v[1], Some(v[2]))?, i as u64),
            &[randn(sh, i as u64), randn(&[3, 4], 8), randn(&[4], 9)],
            1e-5,
        );
    }
    assert_grads(
        |_, v| probe(v[0].linear(v[1], None)?, 3),
        &[randn(&[4, 3], 1), randn(&[3, 2], 2)],
        1e-5,
    );
    assert_grads(
        |_, v| probe(v[0].gather_rows(&[2, 0, 2, 1])?, 3),
        &[randn(&[3, 5], 1)],
        1e-5,
    );
}

fn attention_oracle(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, bias: Option<&Tensor<f64>>) -> Vec<f64> {
    let sh = q.shape();
    let (b, h, t, d) = (sh[0], sh[1], sh[2], sh[3]);
    let mut out = vec![0.0; q.numel()];
    for bi in 0..b {
        for hi in 0..h {
            let base = (bi * h + hi) * t * d;
            for i in 0..t {
                let mut scores = vec![0.0; t];
                for (j, sc) in scores.iter_mut().enumerate() {
                    let mut dot = 0.0;
                    for a in 0..d {
                        dot += q.data()[base + i * d + a] * k.data()[base + j * d + a];
                    }
                    *sc = dot / (d as f64).sqrt() + bias.map(|bb| bb.data()[(hi * t + i) * t + j]).unwrap_or(0.0);
                }
                let m = scores.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for j in 0..t {
                    let p = (scores[j] - m).exp() / z;
                    for a in 0..d {
                        out[base + i * d + a] += p * v.data()[base + j * d + a];
                    }
                }
            }
        }
    }
    out
}

#[test]
fn attention_matches_loop_oracle_and_examples() {
    let (q, k, v, b) = (
        randn(&[2, 2, 4, 3], 1),
        randn(&[2, 2, 4, 3], 2),
        randn(&[2, 2, 4, 3], 3),
        randn(&[2, 4, 4], 4),
    );
    let g = Graph::new();
    let c = |t: &Tensor<f64>| g.constant(t.clone());
    for bias in [None, Some(&b)] {
        let y = attention(c(&q), c(&k), c(&v), bias.map(c)).unwrap().value();
        let o = attention_oracle(&q, &k, &v, bias);
        for (a, e) in y.data().iter().zip(&o) {
            assert!((a - e).abs() < 1e-6);
        }
    }
    let one = |s| randn(&[1, 2, 1, 3], s);
    let v1 = one(3);
    let y = attention(c(&one(1)), c(&one(2)), c(&v1), None).unwrap().value();
    assert_eq!(y.data(), v1.data());

    let row = randn(&[1, 1, 1, 3], 5);
    let vs = Tensor::concat(&[&row, &row, &row, &row], 2).unwrap();
    let y = attention(c(&randn(&[1, 1, 4, 3], 6)), c(&randn(&[1, 1, 4, 3], 7)), c(&vs), None)
        .unwrap()
        .value();
    for i in 0..4 {
        for a in 0..3 {
            assert!((y.data()[i * 3 + a] - row.data()[a]).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_gradients() {
    for (i, sh) in [[1, 1, 3, 2], [2, 2, 4, 3], [1, 3, 5, 2]].iter().enumerate() {
        let hb = [sh[1], sh[2], sh[2]];
        assert_grads(
            move |_, v| probe(attention(v[0], v[1], v[2], Some(v[3]))?, i as u64),
            &[randn(sh, 1), randn(sh, 2), randn(sh, 3), randn(&hb, 4)],
            1e-5,
        );
    }
}

#[test]
fn pixel_shuffle_convention() {
    let g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_fn(&[1, 8, 1, 1, 1], |i| i as f64));
    let y = pixel_shuffle_3d(x, 2).unwrap();
    assert_eq!(y.shape(), vec![1, 1, 2, 2, 2]);
    assert_eq!(y.value().data(), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);

    let t = randn(&[2, 16, 2, 3, 1], 3);
    let y = pixel_shuffle_3d(g.constant(t.clone()), 2).unwrap();
    let yv = y.value();
    // channel c*8 + (i*4 + j*2 + l) at (x, y, z) -> channel c at (2x+i, 2y+j, 2z+l)
    for c in 0..2 {
        for (x, yy, z) in [(1, 2, 0), (0, 1, 0)] {
            for (i, j, l) in [(1, 0, 1), (0, 1, 1)] {
                let src = t.data()[(((c * 8 + i * 4 + j * 2 + l) * 2 + x) * 3 + yy) + z];
                let dst = yv.data()[(((c * 4 + 2 * x + i) * 6 + 2 * yy + j) * 2) + 2 * z + l];
                assert_eq!(src, dst);
            }
        }
    }
    assert!((yv.sum() - t.sum()).abs() < 1e-12);
    let back = pixel_unshuffle_3d(y, 2).unwrap().value();
    assert_eq!(*back, t);
    assert!(pixel_shuffle_3d(g.constant(Tensor::zeros(&[1, 4, 1, 1, 1])), 2).is_err());
}

#[test]
fn backward_basics() {
    let g = Graph::<f64>::new();
    let x = g.leaf(randn(&[3, 2], 1));
    let gr = g.backward(x.sum()).unwrap();
    assert!(gr.get(x).unwrap().data().iter().all(|&v| v == 1.0));

    let g = Graph::<f64>::new();
    let x = g.leaf(randn(&[3, 2], 1));
    let gr = g.backward(x.mul(x).unwrap().sum()).unwrap();
    let gx = gr.get(x).unwrap();
    for (a, b) in gx.data().iter().zip(x.value().data()) {
        assert!((a - 2.0 * b).abs() < 1e-15);
    }

    // fan-out accumulates; detached branch contributes nothing
    let g = Graph::<f64>::new();
    let x = g.leaf(Tensor::from_fn(&[4], |i| i as f64));
    let loss = x.add(x).unwrap().add(x.detach().scale(10.0)).unwrap().sum();
    let gx = g.backward(loss).unwrap().get(x).unwrap();
    assert!(gx.data().iter().all(|&v| v == 2.0));

    assert!(g.backward(x).is_err());
}

#[test]
fn forward_backward_is_deterministic() {
    let run = || {
        let g = Graph::<f32>::new();
        let x = g.leaf(Tensor::randn(&[2, 3, 6, 6, 6], &mut rng(1)));
        let w = g.leaf(Tensor::randn(&[4, 3, 3, 3, 3], &mut rng(2)));
        let y = x.conv3d(w, None, 2, PadMode::Zero).unwrap().gelu();
        let loss = y.mul(y).unwrap().mean();
        let gr = g.backward(loss).unwrap();
        (loss.value().item(), gr.get(x).unwrap(), gr.get(w).unwrap())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.to_bits(), b.0.to_bits());
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
}

#[test]
fn small_examples() {
    let g = Graph::<f64>::new();
    assert_eq!(g.constant(Tensor::scalar(0.0)).gelu().value().item(), 0.0);
    let x = randn(&[3, 4], 1);
    let eye = Tensor::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
    let y = g
        .constant(x.clone())
        .linear(g.constant(eye), Some(g.constant(Tensor::zeros(&[4]))))
        .unwrap();
    assert_eq!(*y.value(), x);
    assert!(g
        .constant(x.clone())
        .linear(g.constant(Tensor::zeros(&[3, 2])), None)
        .is_err());
    assert!(g.constant(x).add(g.constant(Tensor::zeros(&[2]))).is_err());
}

#[test]
fn fd_rel_err_helper() {
    assert!(rel_err(1.0, 1.0 + 1e-9, 1e-6) < 1e-8);
    assert!(rel_err(0.0, 1e-9, 1e-6) < 1e-2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn softmax_rows_normalised(seed in 0u64..1000, rows in 1usize..6, cols in 1usize..9) {
        let g = Graph::<f32>::new();
        let y = g.constant(Tensor::randn(&[rows, cols], &mut rng(seed)).map(|v| v * 20.0)).softmax().value();
        for r in y.data().chunks(cols) {
            let s: f32 = r.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn broadcast_add_matches_explicit_expand(seed in 0u64..1000, a in 1usize..4, b in 1usize..4, c in 1usize..4) {
        let x = randn(&[a, b, c], seed);
        let y = randn(&[b, 1], seed + 1);
        let g = Graph::new();
        let z = g.constant(x.clone()).add(g.constant(y.clone())).unwrap().value();
        for i in 0..a {
            for j in 0..b {
                for l in 0..c {
                    let idx = (i * b + j) * c + l;
                    prop_assert_eq!(z.data()[idx], x.data()[idx] + y.data()[j]);
                }
            }
        }
    }

    #[test]
    fn layer_norm_moments(seed in 0u64..1000, d in 2usize..16) {
        let g = Graph::<f64>::new();
        let y = g.constant(randn(&[3, d], seed).map(|v| v * 5.0 + 2.0)).layer_norm(1e-5).value();
        for r in y.data().chunks(d) {
            let m: f64 = r.iter().sum::<f64>() / d as f64;
            let v: f64 = r.iter().map(|x| (x - m).powi(2)).sum::<f64>() / d as f64;
            prop_assert!(m.abs() < 1e-9);
            prop_assert!((v - 1.0).abs() < 1e-3);
        }
    }
}
