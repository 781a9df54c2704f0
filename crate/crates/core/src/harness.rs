//! Experiment orchestration: data generation, codec training, the
//! communication study and the imaging study, with their CSV outputs.
//!
//! Artifacts live under `<artifacts>/{datasets,checkpoints,results}`. Every
//! random draw comes from a stream keyed by the experiment seed and the run
//! coordinates, and every reduction runs in a fixed order, so repeating a
//! command with the same config rewrites the same CSV bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::atc::{atc_fwi_run, AgentNetwork, Communicator, Exchange, Round, TopologyKind};
use crate::channel::ChannelConfig;
use crate::codec::{scheme_round, train_scheme, ArchConfig, Codec, CodecSpec, Scheme, TrainConfig};
use crate::dataset::{
    dedup_filter, gen_scenario, max_pairwise_nmse, prepare_run, rollout_collect, Dataset, InversionConfig, Provenance, ScenarioConfig,
    ScenarioKind, SemanticSample, SurveyConfig,
};
use crate::error::{Error, Result};
use crate::grid::{Field, VelocityModel};
use crate::seeds;

/// Version of every CSV schema written here; bumped on any column change.
pub const CSV_VERSION: u32 = 1;

/// `||est - truth||^2 / ||truth||^2`.
pub fn nmse(estimate: &Field, truth: &Field) -> Result<f64> {
    estimate.same_shape(truth)?;
    let den = truth.norm_sq();
    if den == 0.0 {
        return Err(Error::ZeroReference);
    }
    let num: f64 = estimate.values.iter().zip(&truth.values).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(num / den)
}

/// Velocity NMSE averaged over agents.
pub fn nmse_velocity_avg(states: &[VelocityModel], truth: &VelocityModel) -> Result<f64> {
    if states.is_empty() {
        return Err(Error::InvalidSize("no agent states".into()));
    }
    let mut total = 0.0;
    for m in states {
        total += nmse(m, truth)?;
    }
    Ok(total / states.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub scenarios: usize,
    /// ATC iterations of every collection rollout.
    pub iterations: usize,
    pub topologies: Vec<TopologyKind>,
    /// Velocity samples whose observations all lie within this NMSE of each
    /// other are dropped.
    pub dedup_threshold: f64,
    /// Fraction of gradient samples kept.
    pub gradient_keep: f64,
    /// Velocity samples per neighborhood size kept at least, refilled from
    /// the dropped ones when filtering leaves fewer.
    pub min_velocity_samples: usize,
    /// Fraction of scenarios held out for evaluation.
    pub eval_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scenarios: 200,
            iterations: 20,
            topologies: vec![TopologyKind::Line, TopologyKind::FullMesh],
            dedup_threshold: 1e-8,
            gradient_keep: 0.25,
            min_velocity_samples: 64,
            eval_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    #[serde(flatten)]
    pub optim: TrainConfig,
    /// Cap on encoder inputs per codec: samples times transmitters for
    /// per-link schemes, samples otherwise.
    pub max_items: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self { optim: TrainConfig::default(), max_items: 1200 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CommConfig {
    pub snr_db: Vec<f64>,
    pub schemes: Vec<Scheme>,
    /// Held-out samples evaluated per round and neighborhood size.
    pub max_eval_samples: usize,
}

impl Default for CommConfig {
    fn default() -> Self {
        Self { snr_db: vec![-5.0, 0.0, 5.0, 10.0, 15.0, 20.0], schemes: Scheme::ALL.to_vec(), max_eval_samples: 1500 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImagingConfig {
    pub topologies: Vec<TopologyKind>,
    pub schemes: Vec<Scheme>,
    pub runs: usize,
    pub iterations: usize,
    /// Channel SNR during the inversion.
    pub snr_db: f64,
    pub kinds: Vec<ScenarioKind>,
}

impl Default for ImagingConfig {
    fn default() -> Self {
        Self {
            topologies: vec![TopologyKind::Line, TopologyKind::FullMesh],
            schemes: Scheme::ALL.to_vec(),
            runs: 20,
            iterations: 40,
            snr_db: 10.0,
            kinds: ScenarioKind::ALL.to_vec(),
        }
    }
}

/// Everything a CLI command needs; read from TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub artifacts: PathBuf,
    pub scenario: ScenarioConfig,
    pub survey: SurveyConfig,
    pub inversion: InversionConfig,
    pub data: DataConfig,
    pub arch: ArchConfig,
    pub train: TrainingConfig,
    pub comm: CommConfig,
    pub imaging: ImagingConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            artifacts: PathBuf::from("artifacts"),
            scenario: ScenarioConfig::default(),
            survey: SurveyConfig::default(),
            inversion: InversionConfig::default(),
            data: DataConfig::default(),
            arch: ArchConfig::default(),
            train: TrainingConfig::default(),
            comm: CommConfig::default(),
            imaging: ImagingConfig::default(),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    // bare words such as scheme ids are taken as strings
    toml::from_str::<toml::Table>(&format!("v = {raw}")).ok().and_then(|mut t| t.remove("v")).unwrap_or_else(|| toml::Value::String(raw.into()))
}

impl ExperimentConfig {
    /// Parses TOML and applies `key.path=value` overrides on top.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut root: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let (path, raw) = o.split_once('=').ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            let keys: Vec<&str> = path.trim().split('.').collect();
            let mut table = &mut root;
            for k in &keys[..keys.len() - 1] {
                table = table
                    .entry(k.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .ok_or_else(|| Error::Config(format!("`{k}` in `{path}` is not a table")))?;
            }
            table.insert(keys[keys.len() - 1].to_string(), parse_value(raw.trim()));
        }
        let cfg: Self = toml::Value::Table(root).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.imaging.runs == 0 {
            return bad("imaging.runs must be at least 1");
        }
        if self.comm.snr_db.is_empty() {
            return bad("comm.snr_db must not be empty");
        }
        if self.data.scenarios < 2 {
            return bad("data.scenarios must be at least 2 for a train/eval split");
        }
        if !(0.0..1.0).contains(&self.data.eval_fraction) || !(0.0..=1.0).contains(&self.data.gradient_keep) {
            return bad("data.eval_fraction must lie in [0, 1) and data.gradient_keep in [0, 1]");
        }
        if self.inversion.n_agents < 2 || self.imaging.kinds.is_empty() {
            return bad("need at least 2 agents and one scenario kind");
        }
        Ok(())
    }

    pub fn datasets_dir(&self) -> PathBuf {
        self.artifacts.join("datasets")
    }

    pub fn checkpoints_dir(&self) -> PathBuf {
        self.artifacts.join("checkpoints")
    }

    pub fn results_dir(&self) -> PathBuf {
        self.artifacts.join("results")
    }

    pub fn dataset_path(&self, split: Split, round: Round) -> PathBuf {
        self.datasets_dir().join(format!("{}_{}.sfds", split.name(), round.name()))
    }

    /// Schemes that need trained codecs in either study.
    pub fn trained_schemes(&self) -> Vec<Scheme> {
        let set: BTreeSet<Scheme> = self.comm.schemes.iter().chain(&self.imaging.schemes).copied().filter(|s| s.needs_codec()).collect();
        set.into_iter().collect()
    }

    /// Neighborhood sizes the topologies produce.
    pub fn neighborhood_sizes(&self, topologies: &[TopologyKind]) -> Result<Vec<usize>> {
        let mut set = BTreeSet::new();
        for &t in topologies {
            let net = AgentNetwork::build(t, self.inversion.n_agents)?;
            for r in 0..net.n_agents() {
                set.insert(net.n_transmitters(r));
            }
        }
        Ok(set.into_iter().collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

const ROUNDS: [Round; 2] = [Round::Gradient, Round::Velocity];

fn scenario_seed(seed: u64, i: usize) -> u64 {
    seeds::derive(seed, &[0xDA7A, i as u64])
}

fn kind_of(i: usize, kinds: &[ScenarioKind]) -> ScenarioKind {
    kinds[i % kinds.len()]
}

#[derive(Clone, Debug, Serialize)]
pub struct DataSummary {
    /// `(split, round, count)`.
    pub counts: Vec<(String, String, usize)>,
    pub raw_samples: usize,
}

/// Perfect-link rollouts over the configured scenarios, filtered and split
/// into train and eval datasets by scenario.
pub fn gen_data(cfg: &ExperimentConfig) -> Result<DataSummary> {
    let d = &cfg.data;
    let n_eval = ((d.scenarios as f64 * d.eval_fraction).round() as usize).clamp(1, d.scenarios - 1);
    let inv = InversionConfig { iterations: d.iterations, ..cfg.inversion.clone() };
    let per_scenario: Vec<(Vec<SemanticSample>, Vec<usize>)> = (0..d.scenarios)
        .into_par_iter()
        .map(|i| -> Result<_> {
            let seed = scenario_seed(cfg.seed, i);
            let scen = gen_scenario(kind_of(i, &ScenarioKind::ALL), &cfg.scenario, seed)?;
            let setup = prepare_run(&scen, &cfg.scenario, &cfg.survey, &inv, seed)?;
            let mut out = Vec::new();
            for &t in &d.topologies {
                out.extend(rollout_collect(&setup, t, seed)?);
            }
            Ok((out, setup.receiver_columns))
        })
        .collect::<Result<_>>()?;
    let raw_samples = per_scenario.iter().map(|(s, _)| s.len()).sum();
    let mut counts = Vec::new();
    for split in [Split::Train, Split::Eval] {
        let range = match split {
            Split::Train => 0..d.scenarios - n_eval,
            Split::Eval => d.scenarios - n_eval..d.scenarios,
        };
        let prov = Provenance {
            scenario_seeds: range.clone().map(|i| scenario_seed(cfg.seed, i)).collect(),
            iterations: d.iterations,
            agent_positions: range.clone().map(|i| per_scenario[i].1.clone()).collect(),
        };
        let all: Vec<SemanticSample> = range.flat_map(|i| per_scenario[i].0.iter().cloned()).collect();
        for round in ROUNDS {
            let of_round: Vec<SemanticSample> = all.iter().filter(|s| s.round == round).cloned().collect();
            let filter_seed = seeds::derive(cfg.seed, &[0xF117, round.index(), split as u64]);
            let kept = match round {
                Round::Gradient => dedup_filter(of_round, d.dedup_threshold, d.gradient_keep, filter_seed),
                Round::Velocity => filter_velocity(of_round, d.dedup_threshold, d.min_velocity_samples, filter_seed),
            };
            counts.push((split.name().to_string(), round.name().to_string(), kept.len()));
            Dataset::new(round, &cfg.scenario, kept, prov.clone())?.save(&cfg.dataset_path(split, round))?;
        }
    }
    Ok(DataSummary { counts, raw_samples })
}

/// Drops near-duplicate velocity samples, then refills every neighborhood
/// size below `min_keep` with a random draw of its dropped samples. Under
/// perfect full-mesh links all agents hold the same model, so without the
/// refill the largest neighborhoods would have no data at all.
fn filter_velocity(samples: Vec<SemanticSample>, threshold: f64, min_keep: usize, seed: u64) -> Vec<SemanticSample> {
    let (mut kept, dropped): (Vec<_>, Vec<_>) = samples.into_iter().partition(|s| threshold <= 0.0 || max_pairwise_nmse(s) >= threshold);
    let sizes: BTreeSet<usize> = dropped.iter().map(|s| s.n_neighbors()).collect();
    for n in sizes {
        let have = kept.iter().filter(|s| s.n_neighbors() == n).count();
        if have >= min_keep {
            continue;
        }
        let mut pool: Vec<&SemanticSample> = dropped.iter().filter(|s| s.n_neighbors() == n).collect();
        pool.shuffle(&mut seeds::stream(seed, &[n as u64]));
        kept.extend(pool.into_iter().take(min_keep - have).cloned());
    }
    kept.sort_by_key(|s| (s.origin.scenario, s.origin.topology as u8, s.origin.iteration, s.origin.receiver));
    kept
}

pub fn checkpoint_path(dir: &Path, scheme: Scheme, round: Round, n: usize) -> PathBuf {
    dir.join(format!("{}_{}_n{n}.ckpt", scheme.id(), round.name()))
}

/// Deterministic subset of at most `max` samples, in stored order.
fn subset<'a>(samples: &[&'a SemanticSample], max: usize, seed: u64) -> Vec<&'a SemanticSample> {
    if samples.len() <= max {
        return samples.to_vec();
    }
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    idx.shuffle(&mut seeds::stream(seed, &[0x5B5E]));
    let mut idx = idx[..max].to_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| samples[i]).collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainRecord {
    pub scheme: Scheme,
    pub round: Round,
    pub n_tx: usize,
    pub samples: usize,
    pub losses: Vec<f64>,
    pub arch_hash: String,
}

/// Trains one codec per scheme, round and neighborhood size present in the
/// training data, then writes the loss log.
pub fn train_all(cfg: &ExperimentConfig) -> Result<Vec<TrainRecord>> {
    let mut jobs = Vec::new();
    let mut data = BTreeMap::new();
    for round in ROUNDS {
        let ds = Dataset::load(&cfg.dataset_path(Split::Train, round))?;
        let sizes: BTreeSet<usize> = ds.samples.iter().map(|s| s.n_neighbors()).collect();
        for scheme in cfg.trained_schemes() {
            for &n in &sizes {
                // over the air with one transmitter reuses the parallel codec
                if scheme.codec_scheme(n) == scheme {
                    jobs.push((scheme, round, n));
                }
            }
        }
        data.insert(round.index(), ds);
    }
    std::fs::create_dir_all(cfg.checkpoints_dir())?;
    let records: Vec<TrainRecord> = jobs
        .par_iter()
        .map(|&(scheme, round, n)| -> Result<TrainRecord> {
            let ds = &data[&round.index()];
            let all: Vec<&SemanticSample> = ds.samples.iter().filter(|s| s.n_neighbors() == n).collect();
            let per_sample = if scheme.per_link() { n } else { 1 };
            let key = [scheme as u64, round.index(), n as u64];
            let picked = subset(&all, (cfg.train.max_items / per_sample).max(2), seeds::derive(cfg.seed, &key));
            let spec = CodecSpec::new(scheme, round, n, cfg.scenario.nx, cfg.scenario.nz, cfg.arch.clone())?;
            let tc = TrainConfig { seed: seeds::derive(cfg.seed, &[0x7EA1, key[0], key[1], key[2]]), ..cfg.train.optim.clone() };
            let trained = train_scheme(spec, ds.manifest.normalization, &picked, &tc)?;
            trained.codec.save(&checkpoint_path(&cfg.checkpoints_dir(), scheme, round, n))?;
            Ok(TrainRecord { scheme, round, n_tx: n, samples: picked.len(), losses: trained.losses, arch_hash: trained.codec.arch_hash() })
        })
        .collect::<Result<_>>()?;
    let mut w = csv_writer(&cfg.results_dir().join("train_log.csv"))?;
    w.write_record(["schema_version", "scheme", "round", "n_tx", "samples", "epoch", "loss"]).map_err(csv_err)?;
    for r in &records {
        for (e, l) in r.losses.iter().enumerate() {
            w.write_record(&[
                CSV_VERSION.to_string(),
                r.scheme.id().into(),
                r.round.name().into(),
                r.n_tx.to_string(),
                r.samples.to_string(),
                e.to_string(),
                fmt_f(*l),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(records)
}

/// Trained codecs keyed by scheme, round and neighborhood size.
#[derive(Default)]
pub struct CodecBank {
    codecs: BTreeMap<(Scheme, Round, usize), Codec<f32>>,
}

impl CodecBank {
    /// Loads every checkpoint the schemes need for the given sizes. Missing
    /// files are reported by [`CodecBank::get`] when first needed.
    pub fn load(dir: &Path, schemes: &[Scheme], sizes: &[usize]) -> Result<Self> {
        let mut bank = Self::default();
        for &scheme in schemes.iter().filter(|s| s.needs_codec()) {
            for round in ROUNDS {
                for &n in sizes {
                    let used = scheme.codec_scheme(n);
                    let path = checkpoint_path(dir, used, round, n);
                    if path.exists() && !bank.codecs.contains_key(&(used, round, n)) {
                        bank.codecs.insert((used, round, n), Codec::load(&path)?);
                    }
                }
            }
        }
        Ok(bank)
    }

    pub fn insert(&mut self, codec: Codec<f32>) {
        let s = &codec.spec;
        self.codecs.insert((s.scheme, s.round, s.n_tx), codec);
    }

    pub fn get(&self, scheme: Scheme, round: Round, n: usize) -> Result<&Codec<f32>> {
        let used = scheme.codec_scheme(n);
        self.codecs
            .get(&(used, round, n))
            .ok_or_else(|| Error::MissingCheckpoint(format!("{}_{}_n{n}", used.id(), round.name())))
    }

    /// Checks up front that every needed codec is present.
    pub fn require(&self, schemes: &[Scheme], sizes: &[usize]) -> Result<()> {
        for &s in schemes.iter().filter(|s| s.needs_codec()) {
            for round in ROUNDS {
                for &n in sizes {
                    self.get(s, round, n)?;
                }
            }
        }
        Ok(())
    }

    pub fn codecs(&self) -> impl Iterator<Item = &Codec<f32>> {
        self.codecs.values()
    }
}

fn channel_for(scheme: Scheme, snr_db: f64) -> ChannelConfig {
    ChannelConfig { kind: scheme.channel(), snr_db, n_ch: 0, seed: 0 }
}

/// Links that carry every exchange through a scheme's codecs and channel.
pub struct CodecLinks<'a> {
    pub scheme: Scheme,
    pub bank: &'a CodecBank,
    pub snr_db: f64,
    pub seed: u64,
    pub run: u64,
    /// Exchanges per `(iteration, receiver)`.
    pub rounds: BTreeMap<(usize, usize), usize>,
    pub max_block_power: f64,
    pub channel_uses: usize,
}

impl<'a> CodecLinks<'a> {
    pub fn new(scheme: Scheme, bank: &'a CodecBank, snr_db: f64, seed: u64, run: u64) -> Self {
        Self { scheme, bank, snr_db, seed, run, rounds: BTreeMap::new(), max_block_power: 0.0, channel_uses: 0 }
    }
}

impl Communicator for CodecLinks<'_> {
    fn exchange(&mut self, x: &Exchange) -> Result<Field> {
        *self.rounds.entry((x.iteration, x.receiver)).or_insert(0) += 1;
        let n = x.neighbors.len();
        let codec = if self.scheme.needs_codec() && n > 0 { Some(self.bank.get(self.scheme, x.round, n)?) } else { None };
        let mut rng = seeds::stream(self.seed, &[self.run, x.iteration as u64, x.round.index(), x.receiver as u64]);
        let out = scheme_round(self.scheme, x, &channel_for(self.scheme, self.snr_db), codec, &mut rng)?;
        self.max_block_power = out.block_power.iter().copied().fold(self.max_block_power, f64::max);
        self.channel_uses += out.channel_uses;
        Ok(out.z_hat)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d)?;
    }
    csv::Writer::from_path(path).map_err(csv_err)
}

/// Shortest text that round-trips the value.
fn fmt_f(v: f64) -> String {
    format!("{v:e}")
}

fn to_field(nx: usize, nz: usize, v: &[f32]) -> Field {
    Field { nx, nz, values: v.iter().map(|&x| x as f64).collect() }
}

/// Mean and 95 % confidence halfwidth from the standard error.
pub fn mean_halfwidth(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * (var / n).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommRow {
    pub schema_version: u32,
    pub round: String,
    pub n_tx: usize,
    pub scheme: String,
    pub snr_db: f64,
    pub samples: usize,
    pub mean_nmse: f64,
    pub halfwidth: f64,
    pub max_power: f64,
}

/// NMSE of the semantic variable on held-out samples for every round,
/// neighborhood size, scheme and SNR.
pub fn run_comm_study(cfg: &ExperimentConfig) -> Result<Vec<CommRow>> {
    let (nx, nz) = (cfg.scenario.nx, cfg.scenario.nz);
    let mut rows = Vec::new();
    for round in ROUNDS {
        let ds = Dataset::load(&cfg.dataset_path(Split::Eval, round))?;
        let sizes: BTreeSet<usize> = ds.samples.iter().map(|s| s.n_neighbors()).collect();
        let sizes: Vec<usize> = sizes.into_iter().collect();
        let bank = CodecBank::load(&cfg.checkpoints_dir(), &cfg.comm.schemes, &sizes)?;
        bank.require(&cfg.comm.schemes, &sizes)?;
        for &n in &sizes {
            let all: Vec<&SemanticSample> = ds.samples.iter().filter(|s| s.n_neighbors() == n).collect();
            let picked = subset(&all, cfg.comm.max_eval_samples, seeds::derive(cfg.seed, &[0xE7A1, round.index(), n as u64]));
            for &scheme in &cfg.comm.schemes {
                let per_snr: Vec<CommRow> = cfg
                    .comm
                    .snr_db
                    .par_iter()
                    .enumerate()
                    .map(|(si, &snr)| -> Result<CommRow> {
                        let codec = if scheme.needs_codec() { Some(bank.get(scheme, round, n)?) } else { None };
                        let mut errs = Vec::with_capacity(picked.len());
                        let mut max_power = 0.0f64;
                        for (k, s) in picked.iter().enumerate() {
                            let own = to_field(nx, nz, &s.s0);
                            let nbs: Vec<Field> = s.neighbors.iter().map(|v| to_field(nx, nz, v)).collect();
                            let x = Exchange {
                                round,
                                iteration: s.origin.iteration as usize,
                                receiver: s.origin.receiver as usize,
                                own: &own,
                                own_weight: s.weights[0] as f64,
                                neighbors: nbs.iter().enumerate().map(|(j, f)| (j, s.weights[j + 1] as f64, f)).collect(),
                            };
                            let mut rng = seeds::stream(cfg.seed, &[0xC0AA, round.index(), n as u64, scheme as u64, si as u64, k as u64]);
                            let out = scheme_round(scheme, &x, &channel_for(scheme, snr), codec, &mut rng)?;
                            max_power = out.block_power.iter().copied().fold(max_power, f64::max);
                            errs.push(nmse(&out.z_hat, &x.exact()?)?);
                        }
                        let (mean, hw) = mean_halfwidth(&errs);
                        Ok(CommRow {
                            schema_version: CSV_VERSION,
                            round: round.name().into(),
                            n_tx: n,
                            scheme: scheme.id().into(),
                            snr_db: snr,
                            samples: errs.len(),
                            mean_nmse: mean,
                            halfwidth: hw,
                            max_power,
                        })
                    })
                    .collect::<Result<_>>()?;
                rows.extend(per_snr);
            }
        }
    }
    write_rows(&cfg.results_dir().join("comm.csv"), &rows)?;
    Ok(rows)
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv_writer(path)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().collect::<std::result::Result<Vec<T>, _>>().map_err(csv_err)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImagingRow {
    pub schema_version: u32,
    pub topology: String,
    pub scheme: String,
    pub run: usize,
    pub scenario: String,
    pub iteration: usize,
    pub mean_nmse: f64,
    /// Per-agent velocity NMSE joined by `;`.
    pub agent_nmse: String,
    /// Sum of the agents' local costs at their models.
    pub cost: f64,
    pub gradient_semantic_nmse: f64,
    pub velocity_semantic_nmse: f64,
    pub stopped: usize,
}

impl ImagingRow {
    pub fn agent_values(&self) -> Vec<f64> {
        self.agent_nmse.split(';').filter_map(|v| v.parse().ok()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImagingSummaryRow {
    pub schema_version: u32,
    pub topology: String,
    pub scheme: String,
    pub iteration: usize,
    pub runs: usize,
    pub mean_nmse: f64,
    pub halfwidth: f64,
    pub mean_cost: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapRow {
    pub schema_version: u32,
    pub topology: String,
    pub scheme: String,
    pub ix: usize,
    pub iz: usize,
    /// Agent-averaged final model minus that of the perfect-link run.
    pub difference: f64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct ImagingOutput {
    pub rows: Vec<ImagingRow>,
    pub summary: Vec<ImagingSummaryRow>,
    pub maps: Vec<MapRow>,
    /// Largest decoder-side block power seen on any transmission.
    pub max_block_power: f64,
}

fn mean_model(models: &[VelocityModel]) -> Field {
    let mut m = Field::zeros(models[0].nx, models[0].nz);
    for x in models {
        m.axpy(1.0 / models.len() as f64, x).expect("same grid");
    }
    m
}

struct RunResult {
    rows: Vec<ImagingRow>,
    final_mean: Field,
    max_power: f64,
}

fn imaging_run(cfg: &ExperimentConfig, bank: &CodecBank, topology: TopologyKind, scheme: Scheme, run: usize) -> Result<RunResult> {
    let ic = &cfg.imaging;
    let kind = kind_of(run, &ic.kinds);
    let seed = seeds::derive(cfg.seed, &[0x1A6E, run as u64]);
    let scen = gen_scenario(kind, &cfg.scenario, seed)?;
    let inv = InversionConfig { iterations: ic.iterations, ..cfg.inversion.clone() };
    let setup = prepare_run(&scen, &cfg.scenario, &cfg.survey, &inv, seed)?;
    let net = AgentNetwork::build(topology, inv.n_agents)?;
    let mut links = CodecLinks::new(scheme, bank, ic.snr_db, seed, run as u64);
    let mut per_iter: Vec<(f64, f64, usize)> = Vec::new();
    let hist = atc_fwi_run(&setup.survey, &setup.obs, &net, &vec![setup.initial.clone(); inv.n_agents], &setup.atc, &mut links, |s| {
        let sem = |round: Round| {
            let v: Vec<f64> = s.semantic.iter().filter(|e| e.0 == round).filter_map(|e| nmse(&e.3, &e.2).ok()).collect();
            if v.is_empty() {
                0.0
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        per_iter.push((sem(Round::Gradient), sem(Round::Velocity), s.stopped.iter().filter(|&&b| b).count()));
    })?;
    // accounting: two exchanges per iteration for every agent still running
    for (k, stopped) in hist.stopped[1..].iter().enumerate() {
        if hist.rounds_per_iteration[k] != 2 {
            return Err(Error::Config(format!("iteration {k} used {} rounds", hist.rounds_per_iteration[k])));
        }
        for (r, &st) in stopped.iter().enumerate() {
            let got = links.rounds.get(&(k, r)).copied().unwrap_or(0);
            if got != if st { 0 } else { 2 } {
                return Err(Error::Config(format!("agent {r} exchanged {got} times in iteration {k}")));
            }
        }
    }
    let mut rows = Vec::with_capacity(hist.models.len());
    for (k, models) in hist.models.iter().enumerate() {
        let agent: Vec<f64> = models.iter().map(|m| nmse(m, &setup.truth)).collect::<Result<_>>()?;
        let (g, v, st) = if k == 0 { (0.0, 0.0, 0) } else { per_iter[k - 1] };
        rows.push(ImagingRow {
            schema_version: CSV_VERSION,
            topology: topology.name().into(),
            scheme: scheme.id().into(),
            run,
            scenario: kind.name().into(),
            iteration: k,
            mean_nmse: nmse_velocity_avg(models, &setup.truth)?,
            agent_nmse: agent.iter().map(|v| fmt_f(*v)).collect::<Vec<_>>().join(";"),
            cost: hist.costs[k].iter().sum(),
            gradient_semantic_nmse: g,
            velocity_semantic_nmse: v,
            stopped: st,
        });
    }
    Ok(RunResult { rows, final_mean: mean_model(hist.models.last().expect("initial models")), max_power: links.max_block_power })
}

/// ATC-FWI with every scheme in both rounds, per topology and run.
pub fn run_imaging_study(cfg: &ExperimentConfig) -> Result<ImagingOutput> {
    let ic = &cfg.imaging;
    let sizes = cfg.neighborhood_sizes(&ic.topologies)?;
    let bank = CodecBank::load(&cfg.checkpoints_dir(), &ic.schemes, &sizes)?;
    for &t in &ic.topologies {
        bank.require(&ic.schemes, &cfg.neighborhood_sizes(&[t])?)?;
    }
    let jobs: Vec<(TopologyKind, Scheme, usize)> =
        ic.topologies.iter().flat_map(|&t| ic.schemes.iter().flat_map(move |&s| (0..ic.runs).map(move |r| (t, s, r)))).collect();
    let results: Vec<RunResult> = jobs.par_iter().map(|&(t, s, r)| imaging_run(cfg, &bank, t, s, r)).collect::<Result<_>>()?;
    let mut out = ImagingOutput::default();
    let mut finals: BTreeMap<(TopologyKind, usize), Field> = BTreeMap::new();
    // perfect-link reference for the difference maps; run 0 only
    for (&(t, s, r), res) in jobs.iter().zip(&results) {
        if r == 0 && s == Scheme::Perfect {
            finals.insert((t, r), res.final_mean.clone());
        }
    }
    for (&(t, s, r), res) in jobs.iter().zip(&results) {
        out.rows.extend(res.rows.iter().cloned());
        out.max_block_power = out.max_block_power.max(res.max_power);
        if r == 0 {
            let reference = match finals.get(&(t, 0)) {
                Some(f) => f.clone(),
                None => imaging_run(cfg, &bank, t, Scheme::Perfect, 0)?.final_mean,
            };
            for ix in 0..reference.nx {
                for iz in 0..reference.nz {
                    out.maps.push(MapRow {
                        schema_version: CSV_VERSION,
                        topology: t.name().into(),
                        scheme: s.id().into(),
                        ix,
                        iz,
                        difference: res.final_mean.at(ix, iz) - reference.at(ix, iz),
                    });
                }
            }
        }
    }
    for &t in &ic.topologies {
        for &s in &ic.schemes {
            for k in 0..=ic.iterations {
                let sel: Vec<&ImagingRow> =
                    out.rows.iter().filter(|r| r.topology == t.name() && r.scheme == s.id() && r.iteration == k).collect();
                let v: Vec<f64> = sel.iter().map(|r| r.mean_nmse).collect();
                let (mean, hw) = mean_halfwidth(&v);
                out.summary.push(ImagingSummaryRow {
                    schema_version: CSV_VERSION,
                    topology: t.name().into(),
                    scheme: s.id().into(),
                    iteration: k,
                    runs: v.len(),
                    mean_nmse: mean,
                    halfwidth: hw,
                    mean_cost: sel.iter().map(|r| r.cost).sum::<f64>() / sel.len() as f64,
                });
            }
        }
    }
    let dir = cfg.results_dir();
    write_rows(&dir.join("imaging.csv"), &out.rows)?;
    write_rows(&dir.join("imaging_summary.csv"), &out.summary)?;
    write_rows(&dir.join("imaging_maps.csv"), &out.maps)?;
    Ok(out)
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Config snapshot, seeds, versions and input/output digests of one command.
pub fn write_bundle(cfg: &ExperimentConfig, command: &str, outputs: &[PathBuf]) -> Result<PathBuf> {
    let mut inputs = BTreeMap::new();
    for dir in [cfg.datasets_dir(), cfg.checkpoints_dir()] {
        if let Ok(rd) = std::fs::read_dir(&dir) {
            let mut paths: Vec<PathBuf> = rd.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_file()).collect();
            paths.sort();
            for p in paths {
                inputs.insert(p.display().to_string(), sha256_file(&p)?);
            }
        }
    }
    let mut outs = BTreeMap::new();
    for p in outputs {
        if p.is_file() {
            outs.insert(p.display().to_string(), sha256_file(p)?);
        }
    }
    let bundle = serde_json::json!({
        "command": command,
        "package_version": env!("CARGO_PKG_VERSION"),
        "csv_schema_version": CSV_VERSION,
        "dataset_format_version": crate::dataset::FORMAT_VERSION,
        "seed": cfg.seed,
        "config": cfg,
        "inputs": inputs,
        "outputs": outs,
    });
    let path = cfg.results_dir().join(format!("bundle_{command}.json"));
    std::fs::create_dir_all(cfg.results_dir())?;
    std::fs::write(&path, serde_json::to_string_pretty(&bundle)?)?;
    std::fs::write(cfg.results_dir().join(format!("config_{command}.toml")), cfg.to_toml()?)?;
    Ok(path)
}
