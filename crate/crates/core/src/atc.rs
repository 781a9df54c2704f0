//! Adapt-then-combine diffusion over an agent network.
//!
//! Every iteration has two exchange rounds. In the gradient round receiver `r`
//! needs `sum_l b_lr dm_l`, in the velocity round `sum_l a_lr m~_l`, both over
//! its self-inclusive neighborhood. How those sums reach the receiver is up to
//! a [`Communicator`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fwi::{Observations, StepSchedule, Survey};
use crate::grid::{Field, VelocityModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyKind {
    Line,
    FullMesh,
}

impl TopologyKind {
    pub fn name(self) -> &'static str {
        match self {
            TopologyKind::Line => "line",
            TopologyKind::FullMesh => "full_mesh",
        }
    }
}

/// Undirected agent graph with uniform combination weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentNetwork {
    adjacency: Vec<Vec<bool>>,
    /// Sorted, self-inclusive.
    neighborhoods: Vec<Vec<usize>>,
    /// `a[l][r]`, weight of agent `l`'s intermediate model at receiver `r`.
    weights_a: Vec<Vec<f64>>,
    /// `b[l][r]`, weight of agent `l`'s gradient at receiver `r`.
    weights_b: Vec<Vec<f64>>,
}

impl AgentNetwork {
    pub fn build(kind: TopologyKind, n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidSize(format!("a network needs at least 2 agents, got {n}")));
        }
        let adjacency = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        i != j
                            && match kind {
                                TopologyKind::Line => i.abs_diff(j) == 1,
                                TopologyKind::FullMesh => true,
                            }
                    })
                    .collect()
            })
            .collect();
        Ok(Self::from_adjacency(adjacency))
    }

    /// One agent without neighbors; the diffusion then reduces to plain gradient descent.
    pub fn singleton() -> Self {
        Self::from_adjacency(vec![vec![false]])
    }

    fn from_adjacency(adjacency: Vec<Vec<bool>>) -> Self {
        let n = adjacency.len();
        let neighborhoods: Vec<Vec<usize>> =
            (0..n).map(|r| (0..n).filter(|&l| l == r || adjacency[l][r]).collect()).collect();
        let mut w = vec![vec![0.0; n]; n];
        for (r, nb) in neighborhoods.iter().enumerate() {
            for &l in nb {
                w[l][r] = 1.0 / nb.len() as f64;
            }
        }
        Self { adjacency, neighborhoods, weights_a: w.clone(), weights_b: w }
    }

    pub fn n_agents(&self) -> usize {
        self.adjacency.len()
    }

    pub fn adjacent(&self, i: usize, j: usize) -> bool {
        self.adjacency[i][j]
    }

    pub fn neighborhood(&self, r: usize) -> &[usize] {
        &self.neighborhoods[r]
    }

    pub fn weight_a(&self, l: usize, r: usize) -> f64 {
        self.weights_a[l][r]
    }

    pub fn weight_b(&self, l: usize, r: usize) -> f64 {
        self.weights_b[l][r]
    }

    /// Number of transmitting neighbors of `r` (excluding `r`).
    pub fn n_transmitters(&self, r: usize) -> usize {
        self.neighborhoods[r].len() - 1
    }

    pub fn is_connected(&self) -> bool {
        let n = self.n_agents();
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for j in 0..n {
                if self.adjacency[i][j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Round {
    Gradient,
    Velocity,
}

impl Round {
    pub fn name(self) -> &'static str {
        match self {
            Round::Gradient => "gradient",
            Round::Velocity => "velocity",
        }
    }

    pub fn index(self) -> u64 {
        match self {
            Round::Gradient => 0,
            Round::Velocity => 1,
        }
    }
}

/// What receiver `r` holds and what its neighbors transmit in one round.
#[derive(Debug)]
pub struct Exchange<'a> {
    pub round: Round,
    pub iteration: usize,
    pub receiver: usize,
    /// Side information: the receiver's own quantity.
    pub own: &'a Field,
    pub own_weight: f64,
    /// `(agent, weight, quantity)` for every transmitting neighbor.
    pub neighbors: Vec<(usize, f64, &'a Field)>,
}

impl Exchange<'_> {
    /// The semantic variable `sum_l w_l x_l`, own term first.
    pub fn exact(&self) -> Result<Field> {
        let mut z = self.own.scaled(self.own_weight);
        for (_, w, f) in &self.neighbors {
            z.axpy(*w, f)?;
        }
        Ok(z)
    }
}

/// Delivers a receiver's estimate of its semantic variable.
pub trait Communicator {
    fn exchange(&mut self, x: &Exchange) -> Result<Field>;
}

/// Error-free links: the receiver gets the exact weighted sum.
#[derive(Clone, Copy, Debug, Default)]
pub struct PerfectLinks;

impl Communicator for PerfectLinks {
    fn exchange(&mut self, x: &Exchange) -> Result<Field> {
        x.exact()
    }
}

/// `m - alpha * g` where `g` is the received estimate of `sum_l b_l dm_l`.
pub fn adapt_step(model: &VelocityModel, weighted_gradient: &Field, alpha: f64) -> Result<VelocityModel> {
    let mut m = model.clone();
    m.axpy(-alpha, weighted_gradient)?;
    Ok(m)
}

/// `sum_l a_l m~_l`.
pub fn combine_step(weights: &[f64], intermediates: &[&Field]) -> Result<VelocityModel> {
    Field::weighted_sum(weights, intermediates)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AtcConfig {
    pub schedule: StepSchedule,
    pub iterations: usize,
    /// Stop an agent once its local cost increases.
    pub early_stop: bool,
    /// Exclude stopped neighbors and renormalize weights instead of keeping
    /// them as frozen transmitters.
    pub reweight_on_stop: bool,
    /// Clamp combined models to `[lo, hi]` m/s.
    pub velocity_bounds: Option<(f64, f64)>,
}

/// Snapshot after each iteration, handed to the observer of [`atc_fwi_run`].
#[derive(Clone, Debug)]
pub struct IterationState<'a> {
    /// Number of completed iterations.
    pub iteration: usize,
    pub models: &'a [VelocityModel],
    /// Local cost of each agent at the model it held before this iteration.
    pub local_costs: &'a [f64],
    pub stopped: &'a [bool],
    /// Semantic variables and their estimates of this iteration per receiver
    /// that received, `(round, receiver, exact, estimate)`.
    pub semantic: &'a [(Round, usize, Field, Field)],
}

#[derive(Clone, Debug)]
pub struct AtcHistory {
    /// `models[k][r]`, `k = 0 ..= iterations`.
    pub models: Vec<Vec<VelocityModel>>,
    /// `costs[k][r]` at `models[k][r]` for `k = 0 ..= iterations`.
    pub costs: Vec<Vec<f64>>,
    pub stopped: Vec<Vec<bool>>,
    /// Exchange rounds performed per agent and iteration.
    pub rounds_per_iteration: Vec<usize>,
}

fn clamp(m: &mut Field, bounds: Option<(f64, f64)>) {
    if let Some((lo, hi)) = bounds {
        for v in &mut m.values {
            *v = v.clamp(lo, hi);
        }
    }
}

/// Runs `cfg.iterations` ATC iterations from per-agent initial models.
///
/// Agent `r` owns receiver `r` of the survey. A stopped agent keeps its
/// model and keeps transmitting the gradient at that model and the model itself.
pub fn atc_fwi_run(
    survey: &Survey,
    obs: &Observations,
    network: &AgentNetwork,
    initial: &[VelocityModel],
    cfg: &AtcConfig,
    comm: &mut dyn Communicator,
    mut observer: impl FnMut(&IterationState),
) -> Result<AtcHistory> {
    let n = network.n_agents();
    if initial.len() != n || survey.n_receivers() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} initial models and {} receivers for {n} agents",
            initial.len(),
            survey.n_receivers()
        )));
    }
    let mut models: Vec<VelocityModel> = initial.to_vec();
    let mut stopped = vec![false; n];
    let mut last_cost = vec![f64::INFINITY; n];
    let mut grads: Vec<Field> = vec![Field::zeros(initial[0].nx, initial[0].nz); n];
    let mut hist = AtcHistory {
        models: vec![models.clone()],
        costs: Vec::new(),
        stopped: vec![stopped.clone()],
        rounds_per_iteration: Vec::new(),
    };
    for k in 0..cfg.iterations {
        let mut costs = last_cost.clone();
        for r in 0..n {
            if stopped[r] {
                continue;
            }
            let (c, g) = survey.local_gradient(&models[r], obs, r)?;
            if !c.is_finite() {
                return Err(Error::Diverged(format!("agent {r} cost {c} at iteration {k}")));
            }
            costs[r] = c;
            grads[r] = g;
            if cfg.early_stop && k > 0 && c > last_cost[r] {
                stopped[r] = true;
            }
            last_cost[r] = c;
        }
        hist.costs.push(costs.clone());
        let alpha = cfg.schedule.alpha(k);
        let mut semantic = Vec::new();
        let mut rounds = 0;

        let weights = |r: usize, l: usize, a: bool| -> f64 {
            let w = |l| if a { network.weight_a(l, r) } else { network.weight_b(l, r) };
            if !cfg.reweight_on_stop {
                return w(l);
            }
            let total: f64 = network.neighborhood(r).iter().filter(|&&j| j == r || !stopped[j]).map(|&j| w(j)).sum();
            if l != r && stopped[l] {
                0.0
            } else {
                w(l) / total
            }
        };

        // gradient round and adapt
        let mut intermediates = models.clone();
        for r in 0..n {
            if stopped[r] {
                continue;
            }
            let x = Exchange {
                round: Round::Gradient,
                iteration: k,
                receiver: r,
                own: &grads[r],
                own_weight: weights(r, r, false),
                neighbors: network
                    .neighborhood(r)
                    .iter()
                    .filter(|&&l| l != r && weights(r, l, false) > 0.0)
                    .map(|&l| (l, weights(r, l, false), &grads[l]))
                    .collect(),
            };
            let est = comm.exchange(&x)?;
            intermediates[r] = adapt_step(&models[r], &est, alpha)?;
            semantic.push((Round::Gradient, r, x.exact()?, est));
        }
        rounds += 1;

        // velocity round and combine
        let mut next = models.clone();
        for r in 0..n {
            if stopped[r] {
                continue;
            }
            let x = Exchange {
                round: Round::Velocity,
                iteration: k,
                receiver: r,
                own: &intermediates[r],
                own_weight: weights(r, r, true),
                neighbors: network
                    .neighborhood(r)
                    .iter()
                    .filter(|&&l| l != r && weights(r, l, true) > 0.0)
                    .map(|&l| (l, weights(r, l, true), &intermediates[l]))
                    .collect(),
            };
            let mut est = comm.exchange(&x)?;
            clamp(&mut est, cfg.velocity_bounds);
            if !est.is_finite() {
                return Err(Error::Diverged(format!("agent {r} model at iteration {k}")));
            }
            semantic.push((Round::Velocity, r, x.exact()?, est.clone()));
            next[r] = est;
        }
        rounds += 1;
        models = next;
        hist.rounds_per_iteration.push(rounds);
        hist.models.push(models.clone());
        hist.stopped.push(stopped.clone());
        observer(&IterationState {
            iteration: k + 1,
            models: &models,
            local_costs: &costs,
            stopped: &stopped,
            semantic: &semantic,
        });
    }
    let final_costs = (0..n)
        .map(|r| if stopped[r] { Ok(last_cost[r]) } else { survey.local_cost(&models[r], obs, r) })
        .collect::<Result<Vec<f64>>>()?;
    hist.costs.push(final_costs);
    Ok(hist)
}
