use autodiff::gradcheck::{self, GradCheckConfig};
use autodiff::{Graph, ParamId, ParamStore, PowerMode, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn randn(rng: &mut ChaCha8Rng, shape: [usize; 4], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0) * scale).collect()).unwrap()
}

/// Runs `build` once for the analytic gradient, then probes it numerically.
fn check(params: &ParamStore<f64>, train: bool, build: impl Fn(&mut Graph<f64>) -> Result<Var>, coords: usize) {
    let mut g = Graph::new(params, train);
    let loss = build(&mut g).unwrap();
    let grads = g.backward(loss).unwrap();
    let cfg = GradCheckConfig { coords, ..GradCheckConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let report = gradcheck::check(
        params,
        &grads,
        |p| {
            let mut g = Graph::new(p, train);
            let l = build(&mut g)?;
            Ok(g.value(l).data()[0])
        },
        &cfg,
        &mut rng,
    )
    .unwrap();
    assert!(report.max_rel_err() < 1e-4, "{:?}", report.probes);
}

struct Block {
    w: ParamId,
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
    slope: ParamId,
}

fn block(p: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize, transpose: bool) -> Block {
    let wshape = if transpose { [cin, cout, 5, 5] } else { [cout, cin, 5, 5] };
    Block {
        w: p.add(format!("{name}.w"), randn(rng, wshape, 0.3)),
        gamma: p.add(format!("{name}.gamma"), randn(rng, [1, cout, 1, 1], 0.5).map(|v| v + 1.0)),
        beta: p.add(format!("{name}.beta"), randn(rng, [1, cout, 1, 1], 0.2)),
        mean: p.add_buffer(format!("{name}.mean"), randn(rng, [1, cout, 1, 1], 0.1)),
        var: p.add_buffer(format!("{name}.var"), Tensor::full([1, cout, 1, 1], 1.3)),
        slope: p.add(format!("{name}.slope"), Tensor::full([1, cout, 1, 1], 0.25)),
    }
}

#[test]
fn conv_stack_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut p = ParamStore::new();
    let x = randn(&mut rng, [3, 2, 9, 7], 1.0);
    let t = randn(&mut rng, [3, 1, 9, 7], 1.0);
    let b1 = block(&mut p, &mut rng, "e1", 2, 3, false);
    let b2 = block(&mut p, &mut rng, "d1", 3, 2, true);
    let w_out = p.add("out.w", randn(&mut rng, [1, 2, 5, 5], 0.3));
    let bias = p.add("out.b", randn(&mut rng, [1, 1, 1, 1], 0.1));
    for train in [true, false] {
        check(
            &p,
            train,
            |g| {
                let xi = g.input(x.clone());
                let h = g.conv2d(xi, b1.w, 2, 2)?;
                let h = g.batch_norm(h, b1.gamma, b1.beta, b1.mean, b1.var)?;
                let h = g.prelu(h, b1.slope)?;
                let h = g.conv_transpose2d(h, b2.w, 2, 2, (0, 0))?;
                let h = g.batch_norm(h, b2.gamma, b2.beta, b2.mean, b2.var)?;
                let h = g.prelu(h, b2.slope)?;
                let h = g.conv2d(h, w_out, 1, 2)?;
                let y = g.channel_bias(h, bias)?;
                let ti = g.input(t.clone());
                g.gaussian_nll(y, ti, 1.0)
            },
            30,
        );
    }
}

#[test]
fn symbol_path_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (b, n, c, h, w) = (2, 3, 2, 4, 3);
    let keep = 19;
    let mut p = ParamStore::new();
    let feat = p.add("feat", randn(&mut rng, [b * n, c, h, w], 1.0));
    let side = p.add("side", randn(&mut rng, [b, 1, h, w], 1.0));
    let gain = p.add("gain", randn(&mut rng, [1, 4, 1, 1], 1.0));
    let noise = randn(&mut rng, [b, 1, keep, 1], 0.3);
    let target = randn(&mut rng, [b, 4, h, w], 1.0);
    for mode in [PowerMode::PerTransmitter, PowerMode::Concatenated, PowerMode::Superposed] {
        check(
            &p,
            false,
            |g| {
                let f = g.param(feat);
                let s = g.flatten_truncate(f, keep)?;
                let s = g.reshape(s, [b, n, keep, 1])?;
                let s = g.power_normalize(s, mode)?;
                let s = g.affine(s, 0.7, 0.0);
                let s = g.sum_transmitters(s)?;
                let z = g.input(noise.clone());
                let r = g.add(s, z)?;
                let u = g.unflatten_pad(r, 2, h, w)?;
                let sv = g.param(side);
                let skip = g.broadcast_scale(sv, gain)?;
                let sv2 = g.param(side);
                let cat = g.concat_channels(&[u, sv2, sv])?;
                let cat = g.reshape(cat, [b, 4, h, w])?;
                let y = g.add(cat, skip)?;
                let ti = g.input(target.clone());
                g.gaussian_nll(y, ti, 0.5)
            },
            40,
        );
    }
}

#[test]
fn power_normalization_hits_unit_power() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = ParamStore::<f64>::new();
    let x = randn(&mut rng, [2, 3, 11, 1], 4.0);
    let mut g = Graph::new(&p, false);
    let xi = g.input(x);
    for mode in [PowerMode::PerTransmitter, PowerMode::Concatenated, PowerMode::Superposed] {
        let y = g.power_normalize(xi, mode).unwrap();
        let d = g.value(y).data();
        for bi in 0..2 {
            let rows = &d[bi * 33..(bi + 1) * 33];
            match mode {
                PowerMode::PerTransmitter => {
                    for r in rows.chunks(11) {
                        let pw = r.iter().map(|v| v * v).sum::<f64>() / 11.0;
                        assert!((pw - 1.0).abs() < 1e-9);
                    }
                }
                PowerMode::Concatenated => {
                    let pw = rows.iter().map(|v| v * v).sum::<f64>() / 33.0;
                    assert!((pw - 1.0).abs() < 1e-9);
                }
                PowerMode::Superposed => {
                    let pw = (0..11).map(|k| (0..3).map(|n| rows[n * 11 + k]).sum::<f64>().powi(2)).sum::<f64>() / 11.0;
                    assert!((pw - 1.0).abs() < 1e-9);
                }
            }
        }
    }
}

#[test]
fn batch_norm_running_stats_and_degenerate_batch() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut p = ParamStore::<f64>::new();
    let gamma = p.add("g", Tensor::full([1, 2, 1, 1], 1.0));
    let beta = p.add("b", Tensor::zeros([1, 2, 1, 1]));
    let mean = p.add_buffer("m", Tensor::zeros([1, 2, 1, 1]));
    let var = p.add_buffer("v", Tensor::full([1, 2, 1, 1], 1.0));
    let x = randn(&mut rng, [4, 2, 3, 3], 2.0).map(|v| v + 5.0);
    let mut g = Graph::new(&p, true);
    let xi = g.input(x.clone());
    let y = g.batch_norm(xi, gamma, beta, mean, var).unwrap();
    // each channel of the output is standardized
    let d = g.value(y).data();
    for c in 0..2 {
        let vals: Vec<f64> = (0..4).flat_map(|b| d[(b * 2 + c) * 9..(b * 2 + c + 1) * 9].to_vec()).collect();
        let m = vals.iter().sum::<f64>() / 36.0;
        let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 36.0;
        assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-4);
    }
    let updates = g.running_stat_updates();
    assert_eq!(updates.len(), 2);
    let xs = x.data();
    let batch_mean0: f64 = (0..4).flat_map(|b| xs[b * 18..b * 18 + 9].to_vec()).sum::<f64>() / 36.0;
    assert!((updates[0].1.data()[0] - 0.1 * batch_mean0).abs() < 1e-12);

    let mut g = Graph::new(&p, true);
    let one = g.input(x.batch_slice(0, 1));
    assert!(g.batch_norm(one, gamma, beta, mean, var).is_err());
    let mut g = Graph::new(&p, false);
    let one = g.input(x.batch_slice(0, 1));
    assert!(g.batch_norm(one, gamma, beta, mean, var).is_ok());
}

#[test]
fn backward_requires_scalar() {
    let p = ParamStore::<f64>::new();
    let mut g = Graph::new(&p, false);
    let x = g.input(Tensor::zeros([1, 2, 1, 1]));
    assert!(g.backward(x).is_err());
}
