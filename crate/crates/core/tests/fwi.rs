use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semfwi::fwi::{centralized_fwi, divergence_threshold, StepSchedule, Survey};
use semfwi::grid::{Field, GridSpec};
use semfwi::solver::{Solver, Sponge};

const BG: f64 = 1450.0;

fn survey(n_sources: usize, receivers: &[usize]) -> Survey {
    let grid = GridSpec::with_cfl(20, 10, 10.0, 4000.0, 0.4, 0.9).unwrap();
    Survey::surface_line(Solver::new(grid, Sponge { width: 10, reflection: 1e-3 }), n_sources, receivers, 1, 12.0).unwrap()
}

fn block_truth(v: f64) -> Field {
    let mut m = Field::constant(20, 10, BG);
    for ix in 8..13 {
        for iz in 4..8 {
            m.set(ix, iz, v);
        }
    }
    m
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs())
}

#[test]
fn cost_vanishes_on_the_true_model() {
    let sv = survey(2, &[4, 15]);
    let truth = block_truth(1800.0);
    let obs = sv.observe(&truth).unwrap();
    let energy: f64 = obs.iter().flatten().flatten().map(|v| v * v).sum();
    for r in 0..2 {
        let (c, g) = sv.local_gradient(&truth, &obs, r).unwrap();
        assert!(c < 1e-12 * energy, "{c}");
        assert!(g.max_abs() == 0.0);
    }
}

#[test]
fn cost_against_silence_is_synthetic_energy() {
    let sv = survey(2, &[4, 15]);
    let m = block_truth(1800.0);
    let syn = sv.observe(&m).unwrap();
    let zero: Vec<Vec<Vec<f64>>> = syn.iter().map(|s| s.iter().map(|t| vec![0.0; t.len()]).collect()).collect();
    let expected: f64 = syn.iter().map(|s| s[1].iter().map(|v| v * v).sum::<f64>()).sum::<f64>() * 0.5 * sv.solver.grid.dt;
    assert!(rel(sv.local_cost(&m, &zero, 1).unwrap(), expected) < 1e-14);
}

#[test]
fn one_percent_perturbation_raises_cost() {
    let sv = survey(2, &[4, 15]);
    let m = Field::constant(20, 10, BG);
    let obs = sv.observe(&m).unwrap();
    let c = sv.global_cost(&m.scaled(1.01), &obs).unwrap();
    assert!(c > 0.0);
}

#[test]
fn gradient_matches_directional_finite_differences() {
    let sv = survey(2, &[4, 15]);
    let truth = block_truth(1800.0);
    let obs = sv.observe(&truth).unwrap();
    let m = Field::constant(20, 10, 1500.0);
    let (_, g) = sv.global_gradient(&m, &obs).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..5 {
        let p = Field::from_values(20, 10, (0..200).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let eps = 0.1;
        let mut plus = m.clone();
        plus.axpy(eps, &p).unwrap();
        let mut minus = m.clone();
        minus.axpy(-eps, &p).unwrap();
        let fd = (sv.global_cost(&plus, &obs).unwrap() - sv.global_cost(&minus, &obs).unwrap()) / (2.0 * eps);
        let an = g.dot(&p);
        assert!(rel(fd, an) < 1e-2, "fd {fd} vs adjoint {an}");
        // the exact discrete adjoint is far better than the required 1e-2
        assert!(rel(fd, an) < 1e-6, "fd {fd} vs adjoint {an}");
    }
}

#[test]
fn gradient_is_negative_where_model_is_too_slow() {
    let sv = survey(3, &[2, 10, 17]);
    let truth = block_truth(1800.0);
    let obs = sv.observe(&truth).unwrap();
    let m = Field::constant(20, 10, BG);
    let (c0, g) = sv.global_gradient(&m, &obs).unwrap();
    let (ix, iz) = (10, 4);
    // brute-force probe of the same cell
    let mut bumped = m.clone();
    bumped.set(ix, iz, BG + 5.0);
    let c1 = sv.global_cost(&bumped, &obs).unwrap();
    assert!(c1 < c0);
    assert!(g.at(ix, iz) < 0.0);
}

#[test]
fn gradient_scales_linearly_with_residual() {
    let sv = survey(2, &[4, 15]);
    let truth = block_truth(1800.0);
    let obs = sv.observe(&truth).unwrap();
    let m = Field::constant(20, 10, 1500.0);
    let syn = sv.observe(&m).unwrap();
    // obs2 = syn - 2 (syn - obs) doubles every residual
    let obs2: Vec<Vec<Vec<f64>>> = syn
        .iter()
        .zip(&obs)
        .map(|(s, o)| s.iter().zip(o).map(|(ts, to)| ts.iter().zip(to).map(|(a, b)| a - 2.0 * (a - b)).collect()).collect())
        .collect();
    let (_, g1) = sv.global_gradient(&m, &obs).unwrap();
    let (_, g2) = sv.global_gradient(&m, &obs2).unwrap();
    let diff: f64 = g2.values.iter().zip(&g1.values).map(|(a, b)| (a - 2.0 * b).powi(2)).sum::<f64>().sqrt();
    assert!(diff <= 1e-6 * (2.0 * g1.norm_sq().sqrt()));
}

#[test]
fn local_gradients_sum_to_global() {
    let sv = survey(2, &[4, 15]);
    let obs = sv.observe(&block_truth(1800.0)).unwrap();
    let m = Field::constant(20, 10, 1500.0);
    let (cg, gg) = sv.global_gradient(&m, &obs).unwrap();
    let (c0, g0) = sv.local_gradient(&m, &obs, 0).unwrap();
    let (c1, g1) = sv.local_gradient(&m, &obs, 1).unwrap();
    assert!(rel(cg, c0 + c1) < 1e-12);
    for i in 0..200 {
        assert!((gg.values[i] - g0.values[i] - g1.values[i]).abs() <= 1e-9 * gg.max_abs());
    }
}

#[test]
fn centralized_fwi_trivial_cases() {
    let sv = survey(2, &[4, 15]);
    let truth = block_truth(1800.0);
    let obs = sv.observe(&truth).unwrap();
    let r = centralized_fwi(&sv, &truth, &obs, StepSchedule::new(1.0, 0.9).unwrap(), 3).unwrap();
    assert_eq!(r.model, truth);
    assert!(r.costs.iter().all(|&c| c == 0.0));
    let m0 = Field::constant(20, 10, BG);
    let r = centralized_fwi(&sv, &m0, &obs, StepSchedule::new(0.0, 1.0).unwrap(), 1).unwrap();
    assert_eq!(r.model, m0);
}

fn normalized_alpha(sv: &Survey, m0: &Field, obs: &semfwi::fwi::Observations, dv: f64) -> f64 {
    let (_, g) = sv.global_gradient(m0, obs).unwrap();
    dv / g.max_abs()
}

#[test]
fn centralized_fwi_halves_cost_on_block_anomaly() {
    let sv = survey(4, &[2, 7, 12, 17]);
    let truth = block_truth(1700.0);
    let obs = sv.observe(&truth).unwrap();
    let m0 = Field::constant(20, 10, BG);
    let alpha = normalized_alpha(&sv, &m0, &obs, 40.0);
    let r = centralized_fwi(&sv, &m0, &obs, StepSchedule::new(alpha, 0.97).unwrap(), 15).unwrap();
    let last = sv.global_cost(&r.model, &obs).unwrap();
    assert!(last < 0.5 * r.costs[0], "{:?} -> {last}", r.costs);
}

#[test]
fn small_steps_decrease_cost_monotonically() {
    let sv = survey(2, &[4, 15]);
    let truth = block_truth(1700.0);
    let obs = sv.observe(&truth).unwrap();
    let m0 = Field::constant(20, 10, BG);
    let (_, g) = sv.global_gradient(&m0, &obs).unwrap();
    let scale = 1.0 / g.max_abs();
    let threshold = divergence_threshold(&sv, &m0, &obs, 1.0 * scale, 5000.0 * scale, 0.05).unwrap();
    let r = centralized_fwi(&sv, &m0, &obs, StepSchedule::new(1e-2 * threshold, 1.0).unwrap(), 6).unwrap();
    for w in r.costs.windows(2) {
        assert!(w[1] <= w[0], "{:?}", r.costs);
    }
}
