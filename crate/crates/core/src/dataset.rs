//! Training data for the codecs: scenarios, rollouts with perfect links,
//! filtering and the on-disk format.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::atc::{atc_fwi_run, AgentNetwork, AtcConfig, Communicator, Exchange, Round, TopologyKind};
use crate::codec::Normalization;
use crate::error::{Error, Result};
use crate::fwi::{Observations, StepSchedule, Survey};
use crate::grid::{Field, GridSpec, VelocityModel};
use crate::seeds;
use crate::solver::{Solver, Sponge};

/// Where a sample was harvested.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleOrigin {
    pub scenario: u64,
    pub iteration: u32,
    pub receiver: u32,
    pub topology: TopologyKind,
}

/// One receiver's view of one exchange: side information, the neighbors'
/// quantities and their weighted sum. Weights list the receiver first.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticSample {
    pub round: Round,
    pub s0: Vec<f32>,
    pub neighbors: Vec<Vec<f32>>,
    pub weights: Vec<f32>,
    pub z: Vec<f32>,
    pub origin: SampleOrigin,
}

impl SemanticSample {
    pub fn n_neighbors(&self) -> usize {
        self.neighbors.len()
    }

    /// Largest relative deviation of the stored `z` from the weighted sum of
    /// the stored observations.
    pub fn z_residual(&self) -> f64 {
        let mut err = 0.0f64;
        let mut norm = 0.0f64;
        for i in 0..self.z.len() {
            let mut acc = self.weights[0] as f64 * self.s0[i] as f64;
            for (w, s) in self.weights[1..].iter().zip(&self.neighbors) {
                acc += *w as f64 * s[i] as f64;
            }
            err = err.max((acc - self.z[i] as f64).abs());
            norm = norm.max((self.z[i] as f64).abs());
        }
        if norm == 0.0 {
            err
        } else {
            err / norm
        }
    }

    pub fn validate(&self, cells: usize) -> Result<()> {
        let ok = self.s0.len() == cells
            && self.z.len() == cells
            && self.neighbors.iter().all(|s| s.len() == cells)
            && self.weights.len() == self.neighbors.len() + 1;
        if !ok {
            return Err(Error::CorruptDataset("sample field sizes disagree".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Rect,
    Ellipse,
    Layers,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 3] = [ScenarioKind::Rect, ScenarioKind::Ellipse, ScenarioKind::Layers];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::Rect => "rect",
            ScenarioKind::Ellipse => "ellipse",
            ScenarioKind::Layers => "layers",
        }
    }
}

/// Domain discretization and the velocity ranges scenarios are drawn from, m/s.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub nx: usize,
    pub nz: usize,
    pub dx: f64,
    pub background: (f64, f64),
    pub anomaly: (f64, f64),
    pub layers: (f64, f64),
    /// Anomaly width and height as fractions of the domain.
    pub extent_fraction: (f64, f64),
}

impl ScenarioConfig {
    /// 200 m x 100 m at 2 m spacing.
    pub fn full() -> Self {
        Self { nx: 100, nz: 50, dx: 2.0, ..Self::desk() }
    }

    /// The same domain on a 32 x 16 grid.
    pub fn desk() -> Self {
        Self {
            nx: 32,
            nz: 16,
            dx: 6.25,
            background: (1200.0, 1800.0),
            anomaly: (2500.0, 3500.0),
            layers: (1200.0, 3500.0),
            extent_fraction: (0.15, 0.45),
        }
    }
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self::desk()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalyParams {
    /// Anomaly center and half extents in meters from the top-left corner.
    pub center: (f64, f64),
    pub half_extent: (f64, f64),
    pub background: f64,
    pub anomaly: f64,
    /// First depth index of the second and third layer.
    pub interfaces: Vec<usize>,
    pub layer_velocities: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub truth: VelocityModel,
    pub params: AnomalyParams,
    pub seed: u64,
}

/// Rectangle or ellipse of velocity `anomaly` in a homogeneous background.
/// Cells whose centers lie strictly inside the shape take the anomaly value.
pub fn block_scenario(
    kind: ScenarioKind,
    cfg: &ScenarioConfig,
    background: f64,
    anomaly: f64,
    center: (f64, f64),
    half_extent: (f64, f64),
) -> Result<Scenario> {
    if !(background > 0.0 && anomaly > 0.0) {
        return Err(Error::InvalidModel(format!("velocities {background}, {anomaly}")));
    }
    let (w, h) = (cfg.nx as f64 * cfg.dx, cfg.nz as f64 * cfg.dx);
    if center.0 - half_extent.0 < 0.0 || center.0 + half_extent.0 > w || center.1 - half_extent.1 < 0.0 || center.1 + half_extent.1 > h {
        return Err(Error::InvalidModel("anomaly leaves the domain".into()));
    }
    let mut m = Field::constant(cfg.nx, cfg.nz, background);
    for ix in 0..cfg.nx {
        for iz in 0..cfg.nz {
            let dx = ((ix as f64 + 0.5) * cfg.dx - center.0) / half_extent.0;
            let dz = ((iz as f64 + 0.5) * cfg.dx - center.1) / half_extent.1;
            let inside = match kind {
                ScenarioKind::Rect => dx.abs() < 1.0 && dz.abs() < 1.0,
                ScenarioKind::Ellipse => dx * dx + dz * dz < 1.0,
                ScenarioKind::Layers => return Err(Error::InvalidModel("layers are not a block anomaly".into())),
            };
            if inside {
                m.set(ix, iz, anomaly);
            }
        }
    }
    let params = AnomalyParams { center, half_extent, background, anomaly, interfaces: Vec::new(), layer_velocities: Vec::new() };
    Ok(Scenario { kind, truth: m, params, seed: 0 })
}

/// Three horizontal layers starting at depth indices `0`, `interfaces[0]`, `interfaces[1]`.
pub fn layered_scenario(cfg: &ScenarioConfig, interfaces: [usize; 2], velocities: [f64; 3]) -> Result<Scenario> {
    if !(0 < interfaces[0] && interfaces[0] < interfaces[1] && interfaces[1] < cfg.nz) {
        return Err(Error::InvalidModel(format!("interfaces {interfaces:?} in {} rows", cfg.nz)));
    }
    if velocities.iter().any(|&v| v <= 0.0) {
        return Err(Error::InvalidModel(format!("velocities {velocities:?}")));
    }
    let mut m = Field::zeros(cfg.nx, cfg.nz);
    for ix in 0..cfg.nx {
        for iz in 0..cfg.nz {
            let layer = interfaces.iter().filter(|&&d| iz >= d).count();
            m.set(ix, iz, velocities[layer]);
        }
    }
    let params = AnomalyParams {
        center: (0.0, 0.0),
        half_extent: (0.0, 0.0),
        background: velocities[0],
        anomaly: velocities[2],
        interfaces: interfaces.to_vec(),
        layer_velocities: velocities.to_vec(),
    };
    Ok(Scenario { kind: ScenarioKind::Layers, truth: m, params, seed: 0 })
}

/// Draws a scenario of the given kind; the same seed gives the same model.
pub fn gen_scenario(kind: ScenarioKind, cfg: &ScenarioConfig, seed: u64) -> Result<Scenario> {
    let mut rng = seeds::stream(seed, &[0x5CE7, kind as u64]);
    let mut s = match kind {
        ScenarioKind::Rect | ScenarioKind::Ellipse => {
            let (w, h) = (cfg.nx as f64 * cfg.dx, cfg.nz as f64 * cfg.dx);
            let (lo, hi) = cfg.extent_fraction;
            let he = (0.5 * w * rng.gen_range(lo..hi), 0.5 * h * rng.gen_range(lo..hi));
            let c = (rng.gen_range(he.0..w - he.0), rng.gen_range(he.1..h - he.1));
            let bg = rng.gen_range(cfg.background.0..cfg.background.1);
            let an = rng.gen_range(cfg.anomaly.0..cfg.anomaly.1);
            block_scenario(kind, cfg, bg, an, c, he)?
        }
        ScenarioKind::Layers => {
            let i1 = rng.gen_range(1..cfg.nz - 1);
            let i2 = rng.gen_range(i1 + 1..cfg.nz);
            // increasing with depth, at least 10 % of the range apart
            let (lo, hi) = cfg.layers;
            let gap = 0.1 * (hi - lo);
            let v0 = rng.gen_range(lo..hi - 2.0 * gap);
            let v1 = rng.gen_range(v0 + gap..hi - gap);
            let v2 = rng.gen_range(v1 + gap..hi);
            layered_scenario(cfg, [i1, i2], [v0, v1, v2])?
        }
    };
    s.seed = seed;
    Ok(s)
}

/// Reflect-mode index into `0..n`: `... c b a | a b c ... | c b a`.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Separable Gaussian blur with reflective borders.
pub fn smooth_init(truth: &VelocityModel, sigma_cells: f64) -> Result<VelocityModel> {
    if !(sigma_cells > 0.0) {
        return Err(Error::InvalidSize(format!("sigma {sigma_cells}")));
    }
    let r = (4.0 * sigma_cells).ceil() as isize;
    let mut kernel: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma_cells * sigma_cells)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let (nx, nz) = (truth.nx, truth.nz);
    let mut tmp = Field::zeros(nx, nz);
    for ix in 0..nx {
        for iz in 0..nz {
            let v = (-r..=r).map(|d| kernel[(d + r) as usize] * truth.at(reflect(ix as isize + d, nx), iz)).sum();
            tmp.set(ix, iz, v);
        }
    }
    let mut out = Field::zeros(nx, nz);
    for ix in 0..nx {
        for iz in 0..nz {
            let v = (-r..=r).map(|d| kernel[(d + r) as usize] * tmp.at(ix, reflect(iz as isize + d, nz))).sum();
            out.set(ix, iz, v);
        }
    }
    Ok(out)
}

/// Acquisition and time stepping for a scenario grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurveyConfig {
    pub n_sources: usize,
    pub f0: f64,
    /// Recording time in seconds.
    pub tau: f64,
    pub cfl_fraction: f64,
    /// Velocity the time step is sized for; models are clamped below it.
    pub v_max: f64,
    pub sponge_width: usize,
    /// Depth index of sources and receivers.
    pub depth: usize,
}

impl Default for SurveyConfig {
    fn default() -> Self {
        Self { n_sources: 4, f0: 15.0, tau: 0.35, cfl_fraction: 0.9, v_max: 4000.0, sponge_width: 10, depth: 1 }
    }
}

impl SurveyConfig {
    pub fn build(&self, scen: &ScenarioConfig, receiver_columns: &[usize]) -> Result<Survey> {
        let grid = GridSpec::with_cfl(scen.nx, scen.nz, scen.dx, self.v_max, self.tau, self.cfl_fraction)?;
        let solver = Solver::new(grid, Sponge { width: self.sponge_width, ..Sponge::default() });
        Survey::surface_line(solver, self.n_sources, receiver_columns, self.depth, self.f0)
    }
}

/// ATC-FWI settings shared by data collection and the imaging study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InversionConfig {
    pub n_agents: usize,
    pub iterations: usize,
    /// Largest velocity change of the first step, m/s: the step size is
    /// `alpha0 / max|mean gradient at m0|`.
    pub alpha0: f64,
    pub decay: f64,
    /// Gaussian smoothing of the truth giving the initial model, in cells.
    pub init_sigma: f64,
    pub early_stop: bool,
    pub min_velocity: f64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self { n_agents: 8, iterations: 20, alpha0: 300.0, decay: 0.97, init_sigma: 5.0, early_stop: true, min_velocity: 1000.0 }
    }
}

/// Everything one inversion run needs.
#[derive(Clone, Debug)]
pub struct RunSetup {
    pub survey: Survey,
    pub obs: Observations,
    pub initial: VelocityModel,
    pub truth: VelocityModel,
    pub receiver_columns: Vec<usize>,
    pub atc: AtcConfig,
}

/// Distinct random receiver columns, sorted so that line neighbors are
/// spatial neighbors.
pub fn random_columns(nx: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n == 0 || n > nx {
        return Err(Error::InvalidSize(format!("{n} receivers on {nx} columns")));
    }
    let mut rng = seeds::stream(seed, &[0xC015]);
    let mut cols = rand::seq::index::sample(&mut rng, nx, n).into_vec();
    cols.sort_unstable();
    Ok(cols)
}

pub fn prepare_run(scenario: &Scenario, scen: &ScenarioConfig, survey: &SurveyConfig, inv: &InversionConfig, seed: u64) -> Result<RunSetup> {
    let cols = random_columns(scen.nx, inv.n_agents, seed)?;
    let sv = survey.build(scen, &cols)?;
    let obs = sv.observe(&scenario.truth)?;
    let initial = smooth_init(&scenario.truth, inv.init_sigma)?;
    let (_, g) = sv.global_gradient(&initial, &obs)?;
    let gmax = g.max_abs() / inv.n_agents as f64;
    if !(gmax > 0.0) || !gmax.is_finite() {
        return Err(Error::Diverged(format!("initial gradient magnitude {gmax}")));
    }
    let atc = AtcConfig {
        schedule: StepSchedule::new(inv.alpha0 / gmax, inv.decay)?,
        iterations: inv.iterations,
        early_stop: inv.early_stop,
        reweight_on_stop: false,
        velocity_bounds: Some((inv.min_velocity, survey.v_max)),
    };
    Ok(RunSetup { survey: sv, obs, initial, truth: scenario.truth.clone(), receiver_columns: cols, atc })
}

/// Perfect links that record every exchange as a sample.
struct Recorder {
    scenario: u64,
    topology: TopologyKind,
    samples: Vec<SemanticSample>,
}

fn to_f32(f: &Field) -> Vec<f32> {
    f.values.iter().map(|&v| v as f32).collect()
}

impl Communicator for Recorder {
    fn exchange(&mut self, x: &Exchange) -> Result<Field> {
        let z = x.exact()?;
        if !x.neighbors.is_empty() {
            let mut weights = vec![x.own_weight as f32];
            weights.extend(x.neighbors.iter().map(|(_, w, _)| *w as f32));
            self.samples.push(SemanticSample {
                round: x.round,
                s0: to_f32(x.own),
                neighbors: x.neighbors.iter().map(|(_, _, f)| to_f32(f)).collect(),
                weights,
                z: to_f32(&z),
                origin: SampleOrigin {
                    scenario: self.scenario,
                    iteration: x.iteration as u32,
                    receiver: x.receiver as u32,
                    topology: self.topology,
                },
            });
        }
        Ok(z)
    }
}

/// Runs ATC-FWI with perfect links and returns one sample per receiver and
/// round of every iteration (stopped receivers exchange nothing).
pub fn rollout_collect(setup: &RunSetup, topology: TopologyKind, scenario_id: u64) -> Result<Vec<SemanticSample>> {
    let n = setup.receiver_columns.len();
    let network = AgentNetwork::build(topology, n)?;
    let initial = vec![setup.initial.clone(); n];
    let mut rec = Recorder { scenario: scenario_id, topology, samples: Vec::new() };
    atc_fwi_run(&setup.survey, &setup.obs, &network, &initial, &setup.atc, &mut rec, |_| {})?;
    Ok(rec.samples)
}

fn nmse_f32(est: &[f32], truth: &[f32]) -> f64 {
    let num: f64 = est.iter().zip(truth).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum();
    let den: f64 = truth.iter().map(|b| (*b as f64).powi(2)).sum();
    if den == 0.0 {
        if num == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        num / den
    }
}

/// Largest NMSE between any ordered pair of a sample's observations.
pub fn max_pairwise_nmse(s: &SemanticSample) -> f64 {
    let all: Vec<&[f32]> = std::iter::once(s.s0.as_slice()).chain(s.neighbors.iter().map(|v| v.as_slice())).collect();
    let mut m = 0.0f64;
    for (i, a) in all.iter().enumerate() {
        for (j, b) in all.iter().enumerate() {
            if i != j {
                m = m.max(nmse_f32(a, b));
            }
        }
    }
    m
}

/// Drops velocity samples whose observations are nearly identical and keeps
/// a uniformly drawn `gradient_keep` fraction of the gradient samples.
pub fn dedup_filter(samples: Vec<SemanticSample>, threshold: f64, gradient_keep: f64, seed: u64) -> Vec<SemanticSample> {
    let mut rng = seeds::stream(seed, &[0xDED0]);
    samples
        .into_iter()
        .filter(|s| match s.round {
            Round::Velocity => threshold <= 0.0 || max_pairwise_nmse(s) >= threshold,
            Round::Gradient => rng.gen::<f64>() < gradient_keep,
        })
        .collect()
}

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"SFDS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldDesc {
    pub name: String,
    pub dtype: String,
    pub count: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub scenario_seeds: Vec<u64>,
    pub iterations: usize,
    /// Receiver columns per scenario, in scenario order.
    pub agent_positions: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub round: Round,
    pub count: usize,
    pub nx: usize,
    pub nz: usize,
    pub dx: f64,
    pub normalization: Normalization,
    pub provenance: Provenance,
    /// Per-record layout, in storage order.
    pub fields: Vec<FieldDesc>,
}

fn record_layout() -> Vec<FieldDesc> {
    let d = |n: &str, t: &str, c: &str| FieldDesc { name: n.into(), dtype: t.into(), count: c.into() };
    vec![
        d("n_neighbors", "u8", "1"),
        d("topology", "u8", "1"),
        d("scenario", "u64", "1"),
        d("iteration", "u32", "1"),
        d("receiver", "u32", "1"),
        d("weights", "f32", "n_neighbors + 1"),
        d("s0", "f32", "nx * nz"),
        d("neighbors", "f32", "n_neighbors * nx * nz"),
        d("z", "f32", "nx * nz"),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<SemanticSample>,
}

/// Normalization over every stored field.
pub fn fit_normalization(samples: &[SemanticSample]) -> Result<Normalization> {
    Normalization::fit(samples.iter().flat_map(|s| {
        std::iter::once(s.s0.as_slice()).chain(s.neighbors.iter().map(|v| v.as_slice())).chain(std::iter::once(s.z.as_slice()))
    }))
}

impl Dataset {
    pub fn new(round: Round, scen: &ScenarioConfig, samples: Vec<SemanticSample>, provenance: Provenance) -> Result<Self> {
        let cells = scen.nx * scen.nz;
        for s in &samples {
            s.validate(cells)?;
            if s.round != round {
                return Err(Error::SchemeMismatch(format!("{} sample in a {} dataset", s.round.name(), round.name())));
            }
        }
        let manifest = DatasetManifest {
            version: FORMAT_VERSION,
            round,
            count: samples.len(),
            nx: scen.nx,
            nz: scen.nz,
            dx: scen.dx,
            normalization: fit_normalization(&samples)?,
            provenance,
            fields: record_layout(),
        };
        Ok(Self { manifest, samples })
    }

    /// Serializes the manifest as given, without checking it against the records.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&self.manifest.version.to_le_bytes());
        let m = serde_json::to_vec(&self.manifest)?;
        b.extend_from_slice(&(m.len() as u32).to_le_bytes());
        b.extend_from_slice(&m);
        b.extend_from_slice(&(self.samples.len() as u64).to_le_bytes());
        let f32s = |b: &mut Vec<u8>, v: &[f32]| v.iter().for_each(|x| b.extend_from_slice(&x.to_le_bytes()));
        for s in &self.samples {
            b.push(s.neighbors.len() as u8);
            b.push(match s.origin.topology {
                TopologyKind::Line => 0,
                TopologyKind::FullMesh => 1,
            });
            b.extend_from_slice(&s.origin.scenario.to_le_bytes());
            b.extend_from_slice(&s.origin.iteration.to_le_bytes());
            b.extend_from_slice(&s.origin.receiver.to_le_bytes());
            f32s(&mut b, &s.weights);
            f32s(&mut b, &s.s0);
            for nb in &s.neighbors {
                f32s(&mut b, nb);
            }
            f32s(&mut b, &s.z);
        }
        let digest = Sha256::digest(&b);
        b.extend_from_slice(&digest);
        Ok(b)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptDataset(m.to_string());
        if bytes.len() < 4 + 4 + 4 + 32 || &bytes[..4] != MAGIC {
            return Err(corrupt("not a dataset file"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch"));
        }
        let mut c = Reader { buf: body, pos: 4 };
        let version = c.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch { found: version, expected: FORMAT_VERSION });
        }
        let mlen = c.u32()? as usize;
        let manifest: DatasetManifest = serde_json::from_slice(c.take(mlen)?).map_err(|e| corrupt(&format!("manifest: {e}")))?;
        let count = c.u64()? as usize;
        if count != manifest.count {
            return Err(corrupt(&format!("manifest lists {} records, file holds {count}", manifest.count)));
        }
        let cells = manifest.nx * manifest.nz;
        let mut samples = Vec::with_capacity(count);
        for _ in 0..count {
            let n = c.take(1)?[0] as usize;
            let topology = match c.take(1)?[0] {
                0 => TopologyKind::Line,
                1 => TopologyKind::FullMesh,
                t => return Err(corrupt(&format!("topology tag {t}"))),
            };
            let scenario = c.u64()?;
            let iteration = c.u32()?;
            let receiver = c.u32()?;
            let weights = c.f32s(n + 1)?;
            let s0 = c.f32s(cells)?;
            let neighbors = (0..n).map(|_| c.f32s(cells)).collect::<Result<Vec<_>>>()?;
            let z = c.f32s(cells)?;
            samples.push(SemanticSample {
                round: manifest.round,
                s0,
                neighbors,
                weights,
                z,
                origin: SampleOrigin { scenario, iteration, receiver, topology },
            });
        }
        if c.pos != body.len() {
            return Err(corrupt("trailing bytes after the records"));
        }
        Ok(Self { manifest, samples })
    }

    /// Writes the binary file and a JSON manifest next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_bytes()?)?;
        std::fs::write(path.with_extension("json"), serde_json::to_string_pretty(&self.manifest)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::CorruptDataset("truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self.take(4 * n)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
}
