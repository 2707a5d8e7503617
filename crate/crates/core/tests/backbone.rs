use p3d_core::backbone::{Conditioning, ModelConfig, P3d, WindowPlan, DECODER_UNITS};
use p3d_core::backbone::{TransformerBlock, WindowAttention};
use p3d_core::numerics::gradcheck;
use p3d_core::numerics::{Graph, Init, PadMode, ParamStore, Session, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Replaces every parameter with small random values so zero-initialised
/// branches become active.
fn randomize(store: &mut ParamStore<f64>, seed: u64, scale: f64) {
    let mut r = rng(seed);
    for t in store.tensors_mut() {
        let noise = Tensor::<f64>::randn(t.shape(), &mut r);
        *t = t.zip_map(&noise, |a, n| a + scale * n).unwrap();
    }
}

fn tiny(pad: PadMode) -> ModelConfig {
    ModelConfig {
        pad_mode: pad,
        ..ModelConfig::tiny()
    }
}

#[test]
fn tiny_config_token_count_and_shapes() {
    let cfg = tiny(PadMode::Zero);
    assert_eq!(cfg.token_spacing(), 8);
    let mut store = ParamStore::<f32>::new();
    let m = P3d::new(&cfg, &mut store, &mut rng(0)).unwrap();
    let g = Graph::new();
    let sess = Session::new(&g, &store);
    let conds = vec![Conditioning::default(); 2];
    let x = g.constant(Tensor::randn(&[2, 1, 16, 16, 16], &mut rng(1)));
    let e = m.embed(&sess, &conds).unwrap();
    let enc = m.encode(&sess, x, e).unwrap();
    assert_eq!(enc.tokens.shape(), vec![2, 8, cfg.transformer_dim]);
    assert_eq!(enc.grid, [2, 2, 2]);
    let y = m.forward(&sess, x, &conds).unwrap();
    assert_eq!(y.shape(), vec![2, 1, 16, 16, 16]);

    let bad = g.constant(Tensor::zeros(&[1, 1, 12, 16, 16]));
    let err = m.forward(&sess, bad, &conds[..1]).unwrap_err().to_string();
    assert!(err.contains("multiples of the token spacing 8"), "{err}");
}

#[test]
fn zero_input_gives_finite_output() {
    let cfg = tiny(PadMode::Zero);
    let mut store = ParamStore::<f32>::new();
    let m = P3d::new(&cfg, &mut store, &mut rng(0)).unwrap();
    let y = m
        .predict(&store, &Tensor::zeros(&[1, 1, 16, 16, 16]), &[Conditioning::default()])
        .unwrap();
    assert!(y.all_finite());
}

#[test]
fn small_preset_full_shape() {
    let cfg = ModelConfig::small();
    assert_eq!(cfg.token_spacing(), 32);
    let mut store = ParamStore::<f32>::new();
    let m = P3d::new(&cfg, &mut store, &mut rng(0)).unwrap();
    let g = Graph::new();
    let sess = Session::new(&g, &store);
    sess.with_frozen(true, || {
        let x = g.constant(Tensor::randn(&[1, 3, 64, 64, 64], &mut rng(1)));
        let e = m.embed(&sess, &[Conditioning::default()]).unwrap();
        let enc = m.encode(&sess, x, e).unwrap();
        assert_eq!(enc.tokens.shape(), vec![1, 8, cfg.transformer_dim]);
        let y = m
            .decode(&sess, enc.tokens, &enc.residuals, enc.grid, e, &[true; DECODER_UNITS])
            .unwrap();
        assert_eq!(y.shape(), vec![1, 3, 64, 64, 64]);
    });
}

#[test]
fn transformer_stage_is_identity_at_init() {
    let cfg = ModelConfig {
        depth: 3,
        ..tiny(PadMode::Zero)
    };
    let mut store = ParamStore::<f32>::new();
    let mut r = rng(0);
    let blocks: Vec<TransformerBlock> = {
        let mut init = Init::new(&mut store, &mut r);
        (0..3)
            .map(|i| TransformerBlock::new(&mut init, &format!("b{i}"), &cfg))
            .collect()
    };
    let g = Graph::new();
    let sess = Session::new(&g, &store);
    let x = g.constant(Tensor::randn(&[2, 8, cfg.transformer_dim], &mut rng(1)));
    let e = g.constant(Tensor::randn(&[2, cfg.cond_dim], &mut rng(2)));
    let plan = WindowPlan::new([2, 2, 2], cfg.window, false).unwrap();
    let mut h = x;
    for b in &blocks {
        h = b.fwd(&sess, h, e, &plan).unwrap();
    }
    assert_eq!(*h.value(), *x.value());
}

#[test]
fn encoder_block_identity_at_init_and_sensitive_to_cond_later() {
    use p3d_core::backbone::conv::ResBlock;
    let cfg = tiny(PadMode::Zero);
    let mut store = ParamStore::<f64>::new();
    let mut r = rng(0);
    let blk = ResBlock::new(&mut Init::new(&mut store, &mut r), "blk", &cfg, 4);
    let x = Tensor::<f64>::randn(&[1, 4, 4, 4, 4], &mut rng(1));
    let e1 = Tensor::<f64>::randn(&[1, cfg.cond_dim], &mut rng(2));
    let e2 = Tensor::<f64>::randn(&[1, cfg.cond_dim], &mut rng(3));
    let run = |store: &ParamStore<f64>, e: &Tensor<f64>| {
        let g = Graph::new();
        let sess = Session::new(&g, store);
        let y = blk
            .fwd(&sess, g.constant(x.clone()), g.constant(e.clone()), PadMode::Zero)
            .unwrap();
        (*y.value()).clone()
    };
    assert_eq!(run(&store, &e1), x);
    randomize(&mut store, 4, 0.3);
    let (a, b) = (run(&store, &e1), run(&store, &e2));
    assert!(a.zip_map(&b, |p, q| (p - q).abs()).unwrap().max_abs() > 1e-6);

    // gradient with respect to the conditioning
    let xc = x.clone();
    let st = store.clone();
    let rep = gradcheck::check(
        move |g, v| {
            let sess = Session::new(g, &st);
            let y = blk.fwd(&sess, g.constant(xc.clone()), v[0], PadMode::Zero)?;
            let w = g.constant(Tensor::from_fn(&y.shape(), |i| ((i * 7) % 5) as f64 - 2.0));
            Ok(y.mul(w)?.sum())
        },
        &[e1],
        1e-6,
        8,
        1e-3,
        &mut rng(5),
    )
    .unwrap();
    assert!(rep.max_rel_err() <= 1e-5, "{rep:?}");
}

#[test]
fn conditioning_embedding_behaviour() {
    let cfg = ModelConfig {
        time_embed: true,
        num_params: 2,
        num_labels: 3,
        ..tiny(PadMode::Zero)
    };
    let mut store = ParamStore::<f64>::new();
    let m = P3d::new(&cfg, &mut store, &mut rng(0)).unwrap();
    let embed = |c: &Conditioning| {
        let g = Graph::new();
        let sess = Session::new(&g, &store);
        (*m.embed(&sess, std::slice::from_ref(c)).unwrap().value()).clone()
    };
    let empty = embed(&Conditioning::default());
    assert_eq!(empty, embed(&Conditioning::default()));
    let t0 = embed(&Conditioning::default().with_t(0.0));
    let t1 = embed(&Conditioning::default().with_t(1.0));
    assert!(t0.zip_map(&t1, |a, b| (a - b).abs()).unwrap().max_abs() > 1e-6);
    let lab = embed(&Conditioning {
        label: Some(1),
        ..Default::default()
    });
    assert_ne!(lab, empty);

    let g = Graph::new();
    let sess = Session::new(&g, &store);
    let bad = Conditioning {
        label: Some(5),
        ..Default::default()
    };
    assert!(m.embed(&sess, &[bad]).is_err());
    let too_many = Conditioning {
        params: vec![1.0; 3],
        ..Default::default()
    };
    assert!(m.embed(&sess, &[too_many]).is_err());
}

/// Dense attention over all tokens with the bias built from the plan, computed
/// independently of the window partition code.
#[test]
fn single_window_matches_dense_attention() {
    let cfg = ModelConfig {
        window: 4,
        ..tiny(PadMode::Zero)
    };
    let mut store = ParamStore::<f64>::new();
    let mut r = rng(0);
    let attn = WindowAttention::new(&mut Init::new(&mut store, &mut r), "a", &cfg);
    let g = Graph::new();
    let sess = Session::new(&g, &store);
    let grid = [2, 3, 1];
    let plan = WindowPlan::new(grid, 4, false).unwrap();
    assert_eq!(plan.windows(), 1);
    let x = g.constant(Tensor::randn(&[2, 6, cfg.transformer_dim], &mut rng(1)));
    let y = attn.fwd(&sess, x, &plan).unwrap().value();

    let d = cfg.transformer_dim;
    let h = cfg.heads;
    let qkv_w = store.get(store.find("a.qkv.w").unwrap()).clone();
    let qkv_b = store.get(store.find("a.qkv.b").unwrap()).clone();
    let proj_w = store.get(store.find("a.proj.w").unwrap()).clone();
    let proj_b = store.get(store.find("a.proj.b").unwrap()).clone();
    let lin = |x: &[f64], w: &Tensor<f64>, b: &Tensor<f64>| -> Vec<f64> {
        let (f, o) = (w.shape()[0], w.shape()[1]);
        (0..o)
            .map(|j| b.data()[j] + (0..f).map(|i| x[i] * w.data()[i * o + j]).sum::<f64>())
            .collect()
    };
    let bias = attn.bias(&sess, &plan).unwrap().value();
    let xv = x.value();
    let dh = d / h;
    for bi in 0..2 {
        let qkv: Vec<Vec<f64>> = (0..6)
            .map(|t| lin(&xv.data()[(bi * 6 + t) * d..(bi * 6 + t + 1) * d], &qkv_w, &qkv_b))
            .collect();
        let mut o = vec![vec![0.0; d]; 6];
        for hh in 0..h {
            for i in 0..6 {
                let mut sc: Vec<f64> = (0..6)
                    .map(|j| {
                        (0..dh)
                            .map(|a| qkv[i][hh * dh + a] * qkv[j][d + hh * dh + a])
                            .sum::<f64>()
                            / (dh as f64).sqrt()
                            + bias.data()[(hh * 6 + i) * 6 + j]
                    })
                    .collect();
                let mx = sc.iter().cloned().fold(f64::MIN, f64::max);
                sc.iter_mut().for_each(|s| *s = (*s - mx).exp());
                let z: f64 = sc.iter().sum();
                for j in 0..6 {
                    for a in 0..dh {
                        o[i][hh * dh + a] += sc[j] / z * qkv[j][2 * d + hh * dh + a];
                    }
                }
            }
        }
        for i in 0..6 {
            let want = lin(&o[i], &proj_w, &proj_b);
            for a in 0..d {
                assert!((y.data()[(bi * 6 + i) * d + a] - want[a]).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn windows_do_not_mix_and_shift_by_window_permutes() {
    let cfg = ModelConfig {
        window: 2,
        ..tiny(PadMode::Zero)
    };
    let mut store = ParamStore::<f64>::new();
    let mut r = rng(0);
    let attn = WindowAttention::new(&mut Init::new(&mut store, &mut r), "a", &cfg);
    let grid = [4, 2, 2];
    let plan = WindowPlan::new(grid, 2, false).unwrap();
    let d = cfg.transformer_dim;
    let x = Tensor::<f64>::randn(&[1, 16, d], &mut rng(1));
    let run = |t: &Tensor<f64>| {
        let g = Graph::new();
        let sess = Session::new(&g, &store);
        (*attn.fwd(&sess, g.constant(t.clone()), &plan).unwrap().value()).clone()
    };
    let y = run(&x);
    // token 0 is at x-index 0 (first window); token 15 at x-index 3 (second window)
    let mut x2 = x.clone();
    for a in 0..d {
        x2.data_mut()[15 * d + a] += 1.0;
    }
    let y2 = run(&x2);
    assert_eq!(&y.data()[..8 * d], &y2.data()[..8 * d]);
    assert_ne!(&y.data()[8 * d..], &y2.data()[8 * d..]);

    // translating by one window along x: tokens are [x][y][z] with 4 per x-slab
    let rolled = x
        .reshape(&[1, 4, 4, d])
        .unwrap()
        .roll(1, 2)
        .unwrap()
        .reshape(&[1, 16, d])
        .unwrap();
    let yr = run(&rolled);
    let want = y
        .reshape(&[1, 4, 4, d])
        .unwrap()
        .roll(1, 2)
        .unwrap()
        .reshape(&[1, 16, d])
        .unwrap();
    assert_eq!(yr, want);
}

#[test]
fn relative_offsets_wrap_only_on_full_periodic_windows() {
    let p = WindowPlan::new([4, 2, 1], 4, true).unwrap();
    assert_eq!(p.periodic, [true, true, false]);
    let idx = p.pair_index();
    let tw = p.tokens_per_window();
    // pair (0 -> 3) along x is offset -1 after wrapping, same as (1 -> 0)
    let t = |x: usize, y: usize| x * 2 + y;
    assert_eq!(idx[t(0, 0) * tw + t(3, 0)], idx[t(1, 0) * tw + t(0, 0)]);
    let np = WindowPlan::new([4, 2, 1], 4, false).unwrap();
    let idx = np.pair_index();
    assert_ne!(idx[t(0, 0) * tw + t(3, 0)], idx[t(1, 0) * tw + t(0, 0)]);
    assert!(WindowPlan::new([6, 2, 2], 4, false).is_err());
}

#[test]
fn transformer_block_gradcheck_eight_tokens() {
    let cfg = tiny(PadMode::Zero);
    let mut store = ParamStore::<f64>::new();
    let mut r = rng(0);
    let blk = TransformerBlock::new(&mut Init::new(&mut store, &mut r), "b", &cfg);
    randomize(&mut store, 1, 0.2);
    let ids: Vec<_> = store.ids().collect();
    let mut inputs: Vec<Tensor<f64>> = ids.iter().map(|&i| store.get(i).clone()).collect();
    inputs.push(Tensor::randn(&[1, 8, cfg.transformer_dim], &mut rng(2)));
    inputs.push(Tensor::randn(&[1, cfg.cond_dim], &mut rng(3)));
    let plan = WindowPlan::new([2, 2, 2], 2, false).unwrap();
    let n = ids.len();
    let rep = gradcheck::check(
        |g: &Graph<f64>, v: &[Var<'_, f64>]| {
            let sess = Session::new(g, &store);
            for (k, &id) in ids.iter().enumerate() {
                sess.bind(id, v[k])?;
            }
            let y = blk.fwd(&sess, v[n], v[n + 1], &plan)?;
            let w = g.constant(Tensor::from_fn(&y.shape(), |i| ((i * 5) % 7) as f64 / 3.0 - 1.0));
            Ok(y.mul(w)?.sum())
        },
        &inputs,
        1e-6,
        6,
        1e-3,
        &mut rng(4),
    )
    .unwrap();
    assert!(rep.max_rel_err() <= 1e-5, "{rep:?}");
}

fn model_gradcheck(cfg: &ModelConfig, tol: f64) {
    let mut store = ParamStore::<f64>::new();
    let m = P3d::new(cfg, &mut store, &mut rng(0)).unwrap();
    randomize(&mut store, 1, 0.1);
    let ids: Vec<_> = store.ids().collect();
    let inputs: Vec<Tensor<f64>> = ids.iter().map(|&i| store.get(i).clone()).collect();
    let x = Tensor::<f64>::randn(&[1, cfg.in_channels, 16, 16, 16], &mut rng(2));
    let target = Tensor::<f64>::randn(&[1, cfg.out_channels, 16, 16, 16], &mut rng(3));
    let rep = gradcheck::check(
        |g: &Graph<f64>, v: &[Var<'_, f64>]| {
            let sess = Session::new(g, &store);
            for (k, &id) in ids.iter().enumerate() {
                sess.bind(id, v[k])?;
            }
            let y = m.forward(&sess, g.constant(x.clone()), &[Conditioning::default()])?;
            p3d_core::numerics::mse(y, g.constant(target.clone()))
        },
        &inputs,
        1e-6,
        2,
        1e-3,
        &mut rng(4),
    )
    .unwrap();
    for t in &rep.tensors {
        assert!(
            t.max_entry_rel_err <= tol && t.directional_rel_err <= tol,
            "{}: {:?}",
            store.name(ids[t.index]),
            t
        );
    }
}

#[test]
fn end_to_end_gradcheck_tiny() {
    model_gradcheck(&tiny(PadMode::Zero), 1e-4);
}

#[test]
fn circular_model_is_equivariant_to_token_shifts() {
    let cfg = ModelConfig {
        window: 2,
        ..tiny(PadMode::Circular)
    };
    let mut store = ParamStore::<f64>::new();
    let m = P3d::new(&cfg, &mut store, &mut rng(0)).unwrap();
    randomize(&mut store, 1, 0.1);
    let x = Tensor::<f64>::randn(&[1, 1, 16, 16, 16], &mut rng(2));
    let c = [Conditioning::default()];
    let y = m.predict(&store, &x, &c).unwrap();
    let rms = (y.data().iter().map(|v| v * v).sum::<f64>() / y.numel() as f64).sqrt();
    for axis in 2..5 {
        let ys = m.predict(&store, &x.roll(axis, 8).unwrap(), &c).unwrap();
        let want = y.roll(axis, 8).unwrap();
        let dev = ys.zip_map(&want, |a, b| (a - b).abs()).unwrap().max_abs();
        assert!(dev <= 1e-5 * rms, "axis {axis}: {dev}");
    }
}

#[test]
fn gradients_finite_after_training_step() {
    let cfg = tiny(PadMode::Zero);
    let mut store = ParamStore::<f32>::new();
    let m = P3d::new(&cfg, &mut store, &mut rng(0)).unwrap();
    let g = Graph::new();
    let sess = Session::new(&g, &store);
    let x = g.constant(Tensor::randn(&[2, 1, 16, 16, 16], &mut rng(1)));
    let t = g.constant(Tensor::randn(&[2, 1, 16, 16, 16], &mut rng(2)));
    let y = m
        .forward(&sess, x, &[Conditioning::default(), Conditioning::default()])
        .unwrap();
    let loss = p3d_core::numerics::mse(y, t).unwrap();
    let grads = sess.param_grads(&g.backward(loss).unwrap());
    assert!(grads.iter().all(|g| g.all_finite()));
    assert!(grads.iter().any(|g| g.max_abs() > 0.0));
}

#[test]
fn parameter_counts_of_presets() {
    for (name, reference) in [("S", 11.2e6), ("B", 46.2e6), ("L", 181e6)] {
        let cfg = ModelConfig::by_name(name).unwrap();
        let mut store = ParamStore::<f32>::new();
        P3d::new(&cfg, &mut store, &mut rng(0)).unwrap();
        let n = store.numel() as f64;
        println!("config {name}: {n} parameters (reference {reference})");
        if name == "S" {
            assert!(n > reference / 2.0 && n < reference * 2.0);
        }
    }
}
