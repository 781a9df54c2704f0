//! Oracle suites run by `gradcheck`, `mi-oracle` and the acceptance tests.
//! Every check compares an implementation against an independent computation.

use std::time::Instant;

use autodiff::gradcheck::{self, GradCheckConfig};
use autodiff::{ParamStore, PowerMode, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::atc::{atc_fwi_run, AgentNetwork, AtcConfig, PerfectLinks, Round, TopologyKind};
use crate::channel::{self, average_power, ChannelKind, SymbolBlock};
use crate::codec::{batch_eval, ArchConfig, Codec, CodecSpec, Normalization, Scheme};
use crate::dataset::{SampleOrigin, SemanticSample};
use crate::error::Result;
use crate::fwi::{centralized_fwi, StepSchedule, Survey};
use crate::grid::{Field, GridSpec};
use crate::mi::{conditional_mi_discrete, expected_kl, mi_lower_bound_discrete, Table3};
use crate::seeds;
use crate::solver::{Solver, Sponge};

#[derive(Clone, Debug, Serialize)]
pub struct OracleResult {
    pub name: String,
    pub passed: bool,
    /// Worst observed value of the checked quantity.
    pub worst: f64,
    pub tolerance: f64,
    pub seconds: f64,
    pub detail: String,
}

impl OracleResult {
    pub fn line(&self) -> String {
        format!(
            "{} {}: worst {:.3e} (tol {:.1e}) in {:.2} s; {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.worst,
            self.tolerance,
            self.seconds,
            self.detail
        )
    }
}

fn result(name: &str, worst: f64, tolerance: f64, ok: bool, t: Instant, detail: String) -> OracleResult {
    OracleResult { name: name.into(), passed: ok && worst.is_finite(), worst, tolerance, seconds: t.elapsed().as_secs_f64(), detail }
}

fn rel(a: f64, b: f64) -> f64 {
    let s = a.abs().max(b.abs());
    if s == 0.0 {
        0.0
    } else {
        (a - b).abs() / s
    }
}

fn random_field<R: Rng>(nx: usize, nz: usize, rng: &mut R) -> Field {
    Field { nx, nz, values: (0..nx * nz).map(|_| rng.gen_range(-1.0..1.0)).collect() }
}

fn small_survey(receivers: &[usize], n_sources: usize) -> Result<Survey> {
    let grid = GridSpec::with_cfl(20, 10, 10.0, 4000.0, 0.4, 0.9)?;
    Survey::surface_line(Solver::new(grid, Sponge { width: 10, reflection: 1e-3 }), n_sources, receivers, 1, 12.0)
}

fn block_model(bg: f64, v: f64) -> Field {
    let mut m = Field::constant(20, 10, bg);
    for ix in 7..13 {
        for iz in 4..8 {
            m.set(ix, iz, v);
        }
    }
    m
}

/// Adjoint-state gradient of every local cost against central differences
/// along random directions; 20 x 10 grid, 2 sources, 2 receivers.
pub fn adjoint_gradient(directions: usize, seed: u64) -> Result<OracleResult> {
    let t = Instant::now();
    let sv = small_survey(&[5, 14], 2)?;
    let obs = sv.observe(&block_model(1450.0, 1800.0))?;
    let m = Field::constant(20, 10, 1500.0);
    let mut rng = seeds::stream(seed, &[0xAD7]);
    let mut worst = 0.0f64;
    for r in 0..2 {
        let (_, g) = sv.local_gradient(&m, &obs, r)?;
        for _ in 0..directions {
            let p = random_field(20, 10, &mut rng);
            let eps = 0.1;
            let mut plus = m.clone();
            plus.axpy(eps, &p)?;
            let mut minus = m.clone();
            minus.axpy(-eps, &p)?;
            let fd = (sv.local_cost(&plus, &obs, r)? - sv.local_cost(&minus, &obs, r)?) / (2.0 * eps);
            worst = worst.max(rel(fd, g.dot(&p)));
        }
    }
    let secs = t.elapsed().as_secs_f64();
    Ok(result(
        "adjoint gradient vs finite differences",
        worst,
        1e-2,
        worst < 1e-2 && secs < 120.0,
        t,
        format!("2 receivers x {directions} directions"),
    ))
}

/// `H(X)` of a distribution given as a flat probability vector, nats.
fn entropy(p: impl IntoIterator<Item = f64>) -> f64 {
    p.into_iter().filter(|&v| v > 0.0).map(|v| -v * v.ln()).sum()
}

/// `I(z; y | s0) = I(z; y, s0) - I(z; s0)`, each written as `H(a) + H(b) - H(a, b)`.
pub fn chain_rule_mi(j: &Table3) -> f64 {
    let (nz, ny, ns) = (j.nz, j.ny, j.ns);
    let pz: Vec<f64> = (0..nz).map(|z| (0..ny * ns).map(|k| j.p[z * ny * ns + k]).sum()).collect();
    let pys: Vec<f64> = (0..ny * ns).map(|k| (0..nz).map(|z| j.p[z * ny * ns + k]).sum()).collect();
    let ps: Vec<f64> = (0..ns).map(|s| (0..ny).map(|y| pys[y * ns + s]).sum()).collect();
    let pzs: Vec<f64> = (0..nz).flat_map(|z| (0..ns).map(move |s| (z, s))).map(|(z, s)| (0..ny).map(|y| j.at(z, y, s)).sum()).collect();
    let i_z_ys = entropy(pz.iter().copied()) + entropy(pys) - entropy(j.p.iter().copied());
    let i_z_s = entropy(pz) + entropy(ps) - entropy(pzs);
    i_z_ys - i_z_s
}

/// Randomized discrete joints with up to 4 states per variable.
pub fn mi_bound(n_joints: usize, seed: u64) -> Result<OracleResult> {
    let t = Instant::now();
    let mut rng = seeds::stream(seed, &[0x1111]);
    let (mut violation, mut eq_err, mut gap_err, mut chain_err) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for i in 0..n_joints {
        let (nz, ny, ns) = (rng.gen_range(1..=4), rng.gen_range(1..=4), rng.gen_range(1..=4));
        let sparsity = if i % 3 == 0 { 0.3 } else { 0.0 };
        let joint = Table3::random(nz, ny, ns, sparsity, &mut rng);
        let exact = conditional_mi_discrete(&joint)?;
        let q = Table3::random_decoder(nz, ny, ns, &mut rng);
        let bound = mi_lower_bound_discrete(&joint, &q)?;
        violation = violation.max(bound - exact);
        eq_err = eq_err.max((mi_lower_bound_discrete(&joint, &joint.posterior())? - exact).abs());
        gap_err = gap_err.max((exact - bound - expected_kl(&joint, &q)?).abs());
        chain_err = chain_err.max((exact - chain_rule_mi(&joint)).abs());
    }
    let ok = violation <= 1e-12 && eq_err <= 1e-12 && gap_err <= 1e-10 && chain_err <= 1e-10 && t.elapsed().as_secs_f64() < 10.0;
    let worst = eq_err.max(gap_err).max(chain_err).max(violation);
    Ok(result(
        "variational bound vs exact conditional MI",
        worst,
        1e-10,
        ok,
        t,
        format!(
            "{n_joints} joints; bound - MI <= {violation:.1e}, posterior gap {eq_err:.1e}, gap - E[KL] {gap_err:.1e}, chain rule {chain_err:.1e}"
        ),
    ))
}

fn random_sample<R: Rng>(round: Round, n: usize, nx: usize, nz: usize, rng: &mut R) -> SemanticSample {
    let cells = nx * nz;
    let mut f = || (0..cells).map(|_| rng.gen_range(-1.0f32..1.0)).collect::<Vec<f32>>();
    let s0 = f();
    let neighbors: Vec<Vec<f32>> = (0..n).map(|_| f()).collect();
    let w = 1.0 / (n + 1) as f32;
    let mut z: Vec<f32> = s0.iter().map(|v| w * v).collect();
    for nb in &neighbors {
        z.iter_mut().zip(nb).for_each(|(a, b)| *a += w * b);
    }
    SemanticSample {
        round,
        s0,
        neighbors,
        weights: vec![w; n + 1],
        z,
        origin: SampleOrigin { scenario: 0, iteration: 0, receiver: 0, topology: TopologyKind::FullMesh },
    }
}

const TRAINED: [Scheme; 5] = [Scheme::JsccNoSi, Scheme::JsccSi, Scheme::DistributedJscc, Scheme::SemanticJscc, Scheme::SemanticJsccOac];

fn small_arch() -> ArchConfig {
    ArchConfig { filters: 3, si_filters: 2, n_ch: 6, ..ArchConfig::default() }
}

/// The implemented loss equals `||t - mu||^2 / (2 s2) + n ln sqrt(2 pi s2)`
/// per item, averaged over the batch, recomputed from the returned tensors.
pub fn loss_identity(seed: u64) -> Result<OracleResult> {
    let t = Instant::now();
    let mut rng = seeds::stream(seed, &[0x1055]);
    let mut worst = 0.0f64;
    let mut cases = 0;
    for scheme in TRAINED {
        for sigma2 in [1.0, 0.5, 2.5] {
            let spec = CodecSpec::new(scheme, Round::Gradient, 2, 9, 5, small_arch())?;
            let codec: Codec<f64> = Codec::init(spec, Normalization::identity(), rng.gen())?;
            let samples: Vec<SemanticSample> = (0..3).map(|_| random_sample(Round::Gradient, 2, 9, 5, &mut rng)).collect();
            let refs: Vec<&SemanticSample> = samples.iter().collect();
            let ev = batch_eval(&codec, &refs, Some(5.0), sigma2, true, &mut rng)?;
            let b = ev.pred.shape()[0];
            let n = ev.pred.len() / b;
            let sq: f64 = ev.pred.data().iter().zip(ev.target.data()).map(|(p, q)| (q - p).powi(2)).sum::<f64>() / b as f64;
            let oracle = sq / (2.0 * sigma2) + n as f64 * (2.0 * std::f64::consts::PI * sigma2).sqrt().ln();
            worst = worst.max(rel(ev.loss, oracle));
            cases += 1;
        }
    }
    Ok(result("training loss identity", worst, 1e-12, worst <= 1e-12, t, format!("{cases} random batches")))
}

/// Finite-difference checks of the complete codec graph of every trained
/// scheme (every layer of the architecture) and the conv adjoint identity.
pub fn autodiff_layers(seed: u64) -> Result<OracleResult> {
    let t = Instant::now();
    let mut rng = seeds::stream(seed, &[0xAD1F]);
    let mut worst = 0.0f64;
    let mut probes = 0;
    for scheme in TRAINED {
        for round in [Round::Velocity, Round::Gradient] {
            let spec = CodecSpec::new(scheme, round, 2, 9, 5, small_arch())?;
            let codec: Codec<f64> = Codec::init(spec, Normalization::identity(), rng.gen())?;
            let samples: Vec<SemanticSample> = (0..2).map(|_| random_sample(round, 2, 9, 5, &mut rng)).collect();
            let refs: Vec<&SemanticSample> = samples.iter().collect();
            let noise_seed: u64 = rng.gen();
            // block power is exactly 1 after normalization, so the noise draw
            // does not depend on the parameters
            let eval = |c: &Codec<f64>| batch_eval(c, &refs, Some(10.0), 1.0, true, &mut ChaCha8Rng::seed_from_u64(noise_seed));
            let ev = eval(&codec)?;
            let cfg = GradCheckConfig { coords: 40, step: 1e-6, tol: 1e-4, abs_floor: 1e-8 };
            let mut probe = codec.clone();
            let report = gradcheck::check(
                &codec.params,
                &ev.grads,
                |p: &ParamStore<f64>| {
                    probe.params = p.clone();
                    Ok(eval(&probe).expect("the base point evaluated").loss)
                },
                &cfg,
                &mut rng,
            );
            match report {
                Ok(r) => {
                    worst = worst.max(r.max_rel_err());
                    probes += r.probes.len();
                }
                Err(e) => {
                    return Ok(result("autodiff layers", f64::INFINITY, 1e-4, false, t, format!("{scheme} {}: {e}", round.name())));
                }
            }
        }
    }
    let adj = conv_adjoint_identity(&mut rng)?;
    let ok = worst < 1e-4 && adj <= 1e-6;
    Ok(result(
        "autodiff layers vs finite differences",
        worst,
        1e-4,
        ok,
        t,
        format!("{probes} probes over 10 codec graphs; conv adjoint identity {adj:.1e} (tol 1e-6)"),
    ))
}

/// Largest relative gap of `<conv(x), y>` and `<x, conv_t(y)>` over random shapes.
fn conv_adjoint_identity<R: Rng>(rng: &mut R) -> Result<f64> {
    use autodiff::conv::{conv2d_forward, conv_out_len, conv_transpose2d_forward};
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (b, cin, cout) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4));
        let (h, w) = (rng.gen_range(5..14), rng.gen_range(5..14));
        let stride = rng.gen_range(1..3);
        let (k, pad) = (5, 2);
        let ho = conv_out_len(h, k, stride, pad).expect("valid");
        let wo = conv_out_len(w, k, stride, pad).expect("valid");
        let op = (h - ((ho - 1) * stride + k - 2 * pad), w - ((wo - 1) * stride + k - 2 * pad));
        let mut rt = |s: [usize; 4]| Tensor::from_vec(s, (0..s.iter().product()).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let x: Tensor<f64> = rt([b, cin, h, w])?;
        let wt = rt([cout, cin, k, k])?;
        let y = rt([b, cout, ho, wo])?;
        let (ax, _) = conv2d_forward(&x, &wt, stride, pad)?;
        let (aty, _) = conv_transpose2d_forward(&y, &wt, stride, pad, op)?;
        worst = worst.max(rel(ax.dot(&y), x.dot(&aty)));
    }
    Ok(worst)
}

/// Empirical SNR of both noisy channel kinds over `uses` channel uses, and
/// the OAC output mean against the symbol sum.
pub fn channel_calibration(uses: usize, seed: u64) -> Result<OracleResult> {
    let t = Instant::now();
    let mut rng = seeds::stream(seed, &[0xCA1]);
    let n_tx = 4;
    let mut worst_db = 0.0f64;
    let mut worst_mean_z = 0.0f64;
    for snr in [-5.0, 0.0, 10.0, 20.0] {
        for kind in [ChannelKind::ParallelAwgn, ChannelKind::Oac] {
            let k = if kind == ChannelKind::Oac { uses } else { uses / n_tx };
            let rows: Vec<Vec<f64>> = (0..n_tx).map(|_| (0..k).map(|_| 0.3 + rng.sample::<f64, _>(StandardNormal)).collect()).collect();
            let block = channel::power_normalize(&SymbolBlock::new(rows)?, kind)?;
            let clean = if kind == ChannelKind::Oac { block.superposed() } else { block.concat() };
            let y = if kind == ChannelKind::Oac {
                channel::transmit_oac(&block, snr, &mut rng)
            } else {
                channel::transmit_parallel(&block, snr, &mut rng)
            };
            let noise: Vec<f64> = y.iter().zip(&clean).map(|(a, b)| a - b).collect();
            let pn = noise.iter().map(|v| v * v).sum::<f64>() / noise.len() as f64;
            let emp = 10.0 * (average_power(&block, kind) / pn).log10();
            worst_db = worst_db.max((emp - snr).abs());
            if kind == ChannelKind::Oac {
                // E[y] = sum_l c_l, so the mean deviation is N(0, sigma^2 / n)
                let mean = noise.iter().sum::<f64>() / noise.len() as f64;
                let sd = (channel::noise_variance(1.0, snr) / noise.len() as f64).sqrt();
                worst_mean_z = worst_mean_z.max(mean.abs() / sd);
            }
        }
    }
    Ok(result(
        "channel SNR calibration",
        worst_db,
        0.1,
        worst_db <= 0.1 && worst_mean_z <= 4.0,
        t,
        format!("{uses} uses per point; OAC mean deviation {worst_mean_z:.2} standard errors (limit 4)"),
    ))
}

/// Largest decoder-side power of the codec's transmissions on the samples,
/// measured the way the codec normalizes.
pub fn codec_power(codec: &Codec<f32>, samples: &[&SemanticSample]) -> Result<f64> {
    let mut worst = 0.0f64;
    let (nx, nz) = (codec.spec.nx, codec.spec.nz);
    let field = |v: &[f32]| Field { nx, nz, values: v.iter().map(|&x| x as f64).collect() };
    for s in samples {
        let inputs: Vec<Field> = s.neighbors.iter().map(|v| field(v)).collect();
        let groups: Vec<Vec<&Field>> = if codec.spec.scheme.per_link() {
            inputs.iter().map(|f| vec![f]).collect()
        } else {
            vec![inputs.iter().collect()]
        };
        for g in groups {
            let block = codec.encode(&g)?;
            let p = match codec.spec.power_mode() {
                PowerMode::PerTransmitter => block.rows.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64).fold(0.0, f64::max),
                PowerMode::Concatenated => average_power(&block, ChannelKind::ParallelAwgn),
                PowerMode::Superposed => average_power(&block, ChannelKind::Oac),
            };
            worst = worst.max(p);
        }
    }
    Ok(worst)
}

/// Power constraint on freshly initialized codecs of every trained scheme.
pub fn power_constraint_init(seed: u64) -> Result<OracleResult> {
    let t = Instant::now();
    let mut rng = seeds::stream(seed, &[0x90E]);
    let mut worst = 0.0f64;
    for scheme in TRAINED {
        for n in [1, 3] {
            let spec = CodecSpec::new(scheme.codec_scheme(n), Round::Velocity, n, 9, 5, small_arch())?;
            let codec: Codec<f32> = Codec::init(spec, Normalization::identity(), rng.gen())?;
            let samples: Vec<SemanticSample> = (0..4).map(|_| random_sample(Round::Velocity, n, 9, 5, &mut rng)).collect();
            worst = worst.max(codec_power(&codec, &samples.iter().collect::<Vec<_>>())?);
        }
    }
    Ok(result("transmit power constraint", worst - 1.0, 1e-6, worst <= 1.0 + 1e-6, t, "P_c - 1 on untrained codecs".into()))
}

/// Full-mesh consensus under perfect links and the single-agent run against
/// centralized FWI.
pub fn atc_consistency() -> Result<OracleResult> {
    let t = Instant::now();
    let truth = block_model(1450.0, 1700.0);
    let cols = [2, 6, 10, 14, 17];
    let sv = small_survey(&cols, 3)?;
    let obs = sv.observe(&truth)?;
    let m0 = Field::constant(20, 10, 1450.0);
    let (_, g) = sv.global_gradient(&m0, &obs)?;
    let cfg = |alpha: f64, k: usize| -> Result<AtcConfig> {
        Ok(AtcConfig { schedule: StepSchedule::new(alpha, 0.97)?, iterations: k, early_stop: true, reweight_on_stop: false, velocity_bounds: None })
    };
    let net = AgentNetwork::build(TopologyKind::FullMesh, cols.len())?;
    let mut spread = 0.0f64;
    atc_fwi_run(&sv, &obs, &net, &vec![m0.clone(); cols.len()], &cfg(30.0 * cols.len() as f64 / g.max_abs(), 5)?, &mut PerfectLinks, |s| {
        for m in s.models {
            for (a, b) in m.values.iter().zip(&s.models[0].values) {
                spread = spread.max((a - b).abs());
            }
        }
    })?;

    let sv1 = small_survey(&[9], 3)?;
    let obs1 = sv1.observe(&truth)?;
    let (_, g1) = sv1.local_gradient(&m0, &obs1, 0)?;
    let c = cfg(30.0 / g1.max_abs(), 6)?;
    let central = centralized_fwi(&sv1, &m0, &obs1, c.schedule, 6)?;
    let h = atc_fwi_run(&sv1, &obs1, &AgentNetwork::singleton(), &[m0], &c, &mut PerfectLinks, |_| {})?;
    let identical = (0..=6).all(|k| h.models[k][0] == central.models[k]) && (0..6).all(|k| h.costs[k][0].to_bits() == central.costs[k].to_bits());
    Ok(result(
        "ATC consensus and single-agent equivalence",
        spread,
        1e-10,
        spread <= 1e-10 && identical,
        t,
        format!("single agent equals centralized bit for bit: {identical}"),
    ))
}

/// Every suite that needs no trained artifacts.
pub fn run_all(seed: u64) -> Result<Vec<OracleResult>> {
    Ok(vec![
        adjoint_gradient(5, seed)?,
        mi_bound(100, seed)?,
        loss_identity(seed)?,
        autodiff_layers(seed)?,
        channel_calibration(1_000_000, seed)?,
        power_constraint_init(seed)?,
        atc_consistency()?,
    ])
}
