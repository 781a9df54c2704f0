//! Learned codecs and the communication schemes built on them.
//!
//! Encoder: five 5x5 convolutions with strides `2,2,2,1,1`, batch norm and
//! PReLU on all but the last, then a row-major flatten of the bottleneck
//! truncated to the transmitter's channel uses and a power normalization.
//! Decoder: the inverse geometry with transposed convolutions, strides
//! `1,1,2,2,2`. When side information `s0` is available it is encoded by a
//! small stride-2 branch whose features join the decoder at three
//! resolutions, and a per-output gated copy `g * s0` is added to the output.
//! The trunk output is first scaled by the training RMS of `target - s0`,
//! and its last layer starts at zero, so an untrained decoder returns `s0`.
//!
//! All fields are normalized with one scalar mean/std pair per dataset.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use autodiff::checkpoint::Checkpoint;
use autodiff::optim::{Optimizer, OptimizerKind};
use autodiff::{Gradients, Graph, ParamId, ParamStore, PowerMode, Real, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::atc::{Exchange, Round};
use crate::channel::{self, ChannelConfig, ChannelKind, OacPower, SymbolBlock};
use crate::dataset::SemanticSample;
use crate::error::{Error, Result};
use crate::grid::Field;
use crate::seeds;

pub const ENC_STRIDES: [usize; 5] = [2, 2, 2, 1, 1];
pub const DEC_STRIDES: [usize; 5] = [1, 1, 2, 2, 2];
pub const KERNEL: usize = 5;
const PAD: usize = 2;
/// Variance of the Gaussian decoder.
pub const SIGMA2: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Perfect,
    JsccNoSi,
    JsccSi,
    DistributedJscc,
    SemanticJscc,
    SemanticJsccOac,
}

impl Scheme {
    pub const ALL: [Scheme; 6] = [
        Scheme::Perfect,
        Scheme::JsccNoSi,
        Scheme::JsccSi,
        Scheme::DistributedJscc,
        Scheme::SemanticJscc,
        Scheme::SemanticJsccOac,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Scheme::Perfect => "perfect",
            Scheme::JsccNoSi => "jscc_no_si",
            Scheme::JsccSi => "jscc_si",
            Scheme::DistributedJscc => "distributed_jscc",
            Scheme::SemanticJscc => "semantic_jscc",
            Scheme::SemanticJsccOac => "semantic_jscc_oac",
        }
    }

    pub fn valid_ids() -> String {
        Self::ALL.iter().map(|s| s.id()).collect::<Vec<_>>().join(", ")
    }

    pub fn needs_codec(self) -> bool {
        self != Scheme::Perfect
    }

    pub fn uses_side_info(self) -> bool {
        matches!(self, Scheme::JsccSi | Scheme::DistributedJscc | Scheme::SemanticJscc | Scheme::SemanticJsccOac)
    }

    /// One independent encoder/decoder pair per link.
    pub fn per_link(self) -> bool {
        matches!(self, Scheme::JsccNoSi | Scheme::JsccSi)
    }

    /// Decodes the semantic variable directly instead of the observations.
    pub fn is_semantic(self) -> bool {
        matches!(self, Scheme::SemanticJscc | Scheme::SemanticJsccOac)
    }

    pub fn channel(self) -> ChannelKind {
        match self {
            Scheme::Perfect => ChannelKind::Perfect,
            Scheme::SemanticJsccOac => ChannelKind::Oac,
            _ => ChannelKind::ParallelAwgn,
        }
    }

    /// The scheme whose codec serves `n` transmitters: over-the-air
    /// computation with a single transmitter is the parallel semantic codec.
    pub fn codec_scheme(self, n: usize) -> Scheme {
        if self == Scheme::SemanticJsccOac && n == 1 {
            Scheme::SemanticJscc
        } else {
            self
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.id() == s)
            .ok_or_else(|| Error::UnknownScheme { given: s.to_string(), valid: Self::valid_ids() })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    /// Filters of the hidden encoder and decoder layers.
    pub filters: usize,
    /// Filters of the side-information branch.
    pub si_filters: usize,
    /// Channel uses per transmitter and exchange.
    pub n_ch: usize,
    #[serde(default)]
    pub oac_power: OacPower,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self { filters: 12, si_filters: 8, n_ch: 8, oac_power: OacPower::Joint }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecSpec {
    pub scheme: Scheme,
    pub round: Round,
    /// Transmitting neighbors `N`.
    pub n_tx: usize,
    pub nx: usize,
    pub nz: usize,
    pub arch: ArchConfig,
}

fn half(n: usize) -> usize {
    n.div_ceil(2)
}

impl CodecSpec {
    pub fn new(scheme: Scheme, round: Round, n_tx: usize, nx: usize, nz: usize, arch: ArchConfig) -> Result<Self> {
        let bad = |m: String| Err(Error::BadArchConfig(m));
        if !scheme.needs_codec() {
            return bad("the perfect scheme has no codec".into());
        }
        if scheme.codec_scheme(n_tx) != scheme {
            return bad(format!("{scheme} with {n_tx} transmitter uses the {} codec", scheme.codec_scheme(n_tx)));
        }
        if n_tx == 0 || nx == 0 || nz == 0 {
            return bad(format!("{n_tx} transmitters on a {nx}x{nz} grid"));
        }
        if arch.filters == 0 || arch.n_ch == 0 || (scheme.uses_side_info() && arch.si_filters == 0) {
            return bad(format!("{arch:?}"));
        }
        Ok(Self { scheme, round, n_tx, nx, nz, arch })
    }

    /// Feature-map extents after 0, 1, 2 and 3 stride-2 stages.
    pub fn dims(&self) -> [(usize, usize); 4] {
        let mut d = [(self.nx, self.nz); 4];
        for i in 1..4 {
            d[i] = (half(d[i - 1].0), half(d[i - 1].1));
        }
        d
    }

    pub fn bottleneck(&self) -> (usize, usize) {
        self.dims()[3]
    }

    /// Transmitters fed through the encoder per decoded item.
    pub fn transmitters(&self) -> usize {
        if self.scheme.per_link() {
            1
        } else {
            self.n_tx
        }
    }

    /// Symbols each transmitter emits. Over the air every transmitter
    /// occupies all `N * n_ch` shared uses.
    pub fn symbols_per_transmitter(&self) -> usize {
        if self.scheme.channel() == ChannelKind::Oac {
            self.n_tx * self.arch.n_ch
        } else {
            self.arch.n_ch
        }
    }

    pub fn last_filters(&self) -> usize {
        let (h, w) = self.bottleneck();
        self.symbols_per_transmitter().div_ceil(h * w)
    }

    /// Symbol groups arriving at the decoder.
    pub fn groups(&self) -> usize {
        if self.scheme.channel() == ChannelKind::Oac {
            1
        } else {
            self.transmitters()
        }
    }

    /// Decoded fields per item.
    pub fn outputs(&self) -> usize {
        if self.scheme == Scheme::DistributedJscc {
            self.n_tx
        } else {
            1
        }
    }

    pub fn power_mode(&self) -> PowerMode {
        match (self.scheme.channel(), self.arch.oac_power) {
            (ChannelKind::Oac, OacPower::Joint) => PowerMode::Superposed,
            (ChannelKind::Oac, OacPower::PerTransmitter) => PowerMode::PerTransmitter,
            _ if self.scheme.per_link() => PowerMode::PerTransmitter,
            _ => PowerMode::Concatenated,
        }
    }

    /// Aggregate channel uses of one exchange.
    pub fn channel_uses(&self) -> usize {
        channel::channel_uses(self.scheme.channel(), self.n_tx, self.arch.n_ch)
    }

    fn out_pad(&self, from: (usize, usize), to: (usize, usize)) -> (usize, usize) {
        (to.0 + 1 - 2 * from.0, to.1 + 1 - 2 * from.1)
    }
}

/// Scalar affine normalization shared by all fields of a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: f64,
    pub std: f64,
}

impl Normalization {
    pub fn identity() -> Self {
        Self { mean: 0.0, std: 1.0 }
    }

    /// Mean and standard deviation over every value of every field.
    pub fn fit<'a>(fields: impl IntoIterator<Item = &'a [f32]>) -> Result<Self> {
        let (mut n, mut s, mut s2) = (0usize, 0.0f64, 0.0f64);
        for f in fields {
            for &v in f {
                n += 1;
                s += v as f64;
                s2 += (v as f64) * (v as f64);
            }
        }
        if n == 0 {
            return Err(Error::InvalidSize("no data to normalize".into()));
        }
        let mean = s / n as f64;
        let var = (s2 / n as f64 - mean * mean).max(0.0);
        let std = if var.sqrt() > 1e-12 * mean.abs().max(1e-30) { var.sqrt() } else { 1.0 };
        Ok(Self { mean, std })
    }

    pub fn forward(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn inverse(&self, v: f64) -> f64 {
        v * self.std + self.mean
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Normal(f64),
    Const(f64),
}

struct Decl {
    name: String,
    shape: [usize; 4],
    init: Init,
    trainable: bool,
}

#[derive(Clone, Debug)]
struct ConvLayer {
    w: ParamId,
    bias: Option<ParamId>,
    bn: Option<[ParamId; 4]>,
    prelu: Option<ParamId>,
}

#[derive(Clone, Debug)]
struct Layers {
    enc: Vec<ConvLayer>,
    si: Vec<ConvLayer>,
    dec: Vec<ConvLayer>,
    gate: Option<ParamId>,
}

fn vec_shape(c: usize) -> [usize; 4] {
    [1, c, 1, 1]
}

/// Declares one convolution; `transpose` flips the weight layout.
fn conv_decls(out: &mut Vec<Decl>, prefix: &str, cin: usize, cout: usize, transpose: bool, stride: usize, hidden: bool, bn: bool) {
    let kk = KERNEL * KERNEL;
    // fan-in of a transposed conv shrinks with the stride
    let fan = if transpose { (cin * kk).div_ceil(stride * stride) } else { cin * kk };
    let gain = if hidden { 2.0 } else { 1.0 };
    let shape = if transpose { [cin, cout, KERNEL, KERNEL] } else { [cout, cin, KERNEL, KERNEL] };
    out.push(Decl { name: format!("{prefix}.w"), shape, init: Init::Normal((gain / fan as f64).sqrt()), trainable: true });
    if bn {
        let s = vec_shape(cout);
        out.push(Decl { name: format!("{prefix}.bn.gamma"), shape: s, init: Init::Const(1.0), trainable: true });
        out.push(Decl { name: format!("{prefix}.bn.beta"), shape: s, init: Init::Const(0.0), trainable: true });
        out.push(Decl { name: format!("{prefix}.bn.mean"), shape: s, init: Init::Const(0.0), trainable: false });
        out.push(Decl { name: format!("{prefix}.bn.var"), shape: s, init: Init::Const(1.0), trainable: false });
    } else {
        out.push(Decl { name: format!("{prefix}.b"), shape: vec_shape(cout), init: Init::Const(0.0), trainable: true });
    }
    if hidden {
        out.push(Decl { name: format!("{prefix}.prelu"), shape: vec_shape(cout), init: Init::Const(0.25), trainable: true });
    }
}

fn declarations(spec: &CodecSpec) -> Vec<Decl> {
    let f = spec.arch.filters;
    let fs = if spec.scheme.uses_side_info() { spec.arch.si_filters } else { 0 };
    let mut d = Vec::new();
    let mut cin = 1;
    for (i, &s) in ENC_STRIDES.iter().enumerate() {
        let last = i == ENC_STRIDES.len() - 1;
        let cout = if last { spec.last_filters() } else { f };
        conv_decls(&mut d, &format!("enc.{i}"), cin, cout, false, s, !last, !last);
        cin = cout;
    }
    if fs > 0 {
        let mut cin = 1;
        for i in 0..3 {
            conv_decls(&mut d, &format!("si.{i}"), cin, fs, false, 2, true, false);
            cin = fs;
        }
    }
    let ins = [spec.groups() * spec.last_filters() + fs, f, f, f + fs, f + fs];
    for (i, &s) in DEC_STRIDES.iter().enumerate() {
        let last = i == DEC_STRIDES.len() - 1;
        let cout = if last { spec.outputs() } else { f };
        conv_decls(&mut d, &format!("dec.{i}"), ins[i], cout, true, s, !last, !last);
    }
    if fs > 0 {
        d.push(Decl { name: "gate".into(), shape: vec_shape(spec.outputs()), init: Init::Const(1.0), trainable: true });
        // with a zero output layer a fresh SI decoder returns s0 exactly
        let last = format!("dec.{}.w", DEC_STRIDES.len() - 1);
        d.iter_mut().filter(|x| x.name == last).for_each(|x| x.init = Init::Const(0.0));
    }
    d
}

/// Hex digest of the parameter layout and the fixed geometry.
pub fn arch_hash(spec: &CodecSpec) -> String {
    let mut h = Sha256::new();
    h.update(format!("k{KERNEL} p{PAD} enc{ENC_STRIDES:?} dec{DEC_STRIDES:?} pm{:?};", spec.power_mode()));
    h.update(format!("{} {} {} {}x{} K{};", spec.scheme, spec.round.name(), spec.n_tx, spec.nx, spec.nz, spec.symbols_per_transmitter()));
    for d in declarations(spec) {
        h.update(format!("{}:{:?}:{};", d.name, d.shape, d.trainable));
    }
    h.finalize().iter().take(16).map(|b| format!("{b:02x}")).collect()
}

fn resolve(spec: &CodecSpec, p: &ParamStore<impl Real>) -> Result<Layers> {
    let find = |n: String| p.find(&n).ok_or_else(|| Error::BadArchConfig(format!("missing parameter {n}")));
    let layer = |prefix: String, bn: bool, hidden: bool| -> Result<ConvLayer> {
        Ok(ConvLayer {
            w: find(format!("{prefix}.w"))?,
            bias: if bn { None } else { Some(find(format!("{prefix}.b"))?) },
            bn: if bn {
                Some([
                    find(format!("{prefix}.bn.gamma"))?,
                    find(format!("{prefix}.bn.beta"))?,
                    find(format!("{prefix}.bn.mean"))?,
                    find(format!("{prefix}.bn.var"))?,
                ])
            } else {
                None
            },
            prelu: if hidden { Some(find(format!("{prefix}.prelu"))?) } else { None },
        })
    };
    let enc = (0..5).map(|i| layer(format!("enc.{i}"), i < 4, i < 4)).collect::<Result<_>>()?;
    let dec = (0..5).map(|i| layer(format!("dec.{i}"), i < 4, i < 4)).collect::<Result<_>>()?;
    let (si, gate) = if spec.scheme.uses_side_info() {
        ((0..3).map(|i| layer(format!("si.{i}"), false, true)).collect::<Result<_>>()?, Some(find("gate".into())?))
    } else {
        (Vec::new(), None)
    };
    Ok(Layers { enc, si, dec, gate })
}

/// Decoder output: the Gaussian means and their common variance.
#[derive(Clone, Debug)]
pub struct DecoderOutput {
    pub mu: Vec<Field>,
    pub sigma2: f64,
}

impl DecoderOutput {
    /// The most likely value of a Gaussian is its mean.
    pub fn point_estimate(&self) -> &[Field] {
        &self.mu
    }
}

#[derive(Clone, Debug)]
pub struct Codec<T: Real = f32> {
    pub spec: CodecSpec,
    pub norm: Normalization,
    /// Scale applied to the decoder trunk before the gated `s0` copy is
    /// added, so the trunk works in units of the typical `target - s0`.
    pub residual_scale: f64,
    pub params: ParamStore<T>,
    layers: Layers,
}

impl<T: Real> Codec<T> {
    pub fn init(spec: CodecSpec, norm: Normalization, seed: u64) -> Result<Self> {
        let mut rng = seeds::stream(seed, &[0x1417]);
        let mut params = ParamStore::new();
        for d in declarations(&spec) {
            let n: usize = d.shape.iter().product();
            let data: Vec<T> = match d.init {
                Init::Normal(std) => (0..n).map(|_| T::from_f64(std * rng.sample::<f64, _>(StandardNormal))).collect(),
                Init::Const(v) => vec![T::from_f64(v); n],
            };
            let t = Tensor::from_vec(d.shape, data)?;
            if d.trainable {
                params.add(d.name, t);
            } else {
                params.add_buffer(d.name, t);
            }
        }
        let layers = resolve(&spec, &params)?;
        Ok(Self { spec, norm, residual_scale: 1.0, params, layers })
    }

    pub fn arch_hash(&self) -> String {
        arch_hash(&self.spec)
    }

    pub fn cast<U: Real>(&self) -> Codec<U> {
        Codec {
            spec: self.spec.clone(),
            norm: self.norm,
            residual_scale: self.residual_scale,
            params: self.params.cast(),
            layers: self.layers.clone(),
        }
    }

    fn tensor_of(&self, fields: &[&[f32]]) -> Result<Tensor<T>> {
        let cells = self.spec.nx * self.spec.nz;
        let mut data = Vec::with_capacity(fields.len() * cells);
        for f in fields {
            if f.len() != cells {
                return Err(Error::ShapeMismatch(format!("field of {} values for a {}x{} grid", f.len(), self.spec.nx, self.spec.nz)));
            }
            data.extend(f.iter().map(|&v| T::from_f64(self.norm.forward(v as f64))));
        }
        Ok(Tensor::from_vec([fields.len(), 1, self.spec.nx, self.spec.nz], data)?)
    }

    fn conv_block(&self, g: &mut Graph<T>, x: Var, l: &ConvLayer, stride: usize, transpose: Option<(usize, usize)>) -> Result<Var> {
        let mut h = match transpose {
            Some(op) => g.conv_transpose2d(x, l.w, stride, PAD, op)?,
            None => g.conv2d(x, l.w, stride, PAD)?,
        };
        if let Some(b) = l.bias {
            h = g.channel_bias(h, b)?;
        }
        if let Some([gm, bt, rm, rv]) = l.bn {
            h = g.batch_norm(h, gm, bt, rm, rv)?;
        }
        if let Some(a) = l.prelu {
            h = g.prelu(h, a)?;
        }
        Ok(h)
    }

    /// `[B * T, 1, nx, nz]` normalized fields to power-normalized symbols `[B, T, K, 1]`.
    fn encoder_graph(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let m = g.shape(x)[0];
        let t = self.spec.transmitters();
        let k = self.spec.symbols_per_transmitter();
        let mut h = x;
        for (l, &s) in self.layers.enc.iter().zip(&ENC_STRIDES) {
            h = self.conv_block(g, h, l, s, None)?;
        }
        let flat = g.flatten_truncate(h, k)?;
        let sym = g.reshape(flat, [m / t, t, k, 1])?;
        Ok(g.power_normalize(sym, self.spec.power_mode())?)
    }

    /// Clean symbols to what the decoder sees before noise.
    fn superpose(&self, g: &mut Graph<T>, sym: Var) -> Result<Var> {
        if self.spec.scheme.channel() == ChannelKind::Oac {
            Ok(g.sum_transmitters(sym)?)
        } else {
            Ok(sym)
        }
    }

    /// Received symbols `[B, G, K, 1]` and optional side information
    /// `[B, 1, nx, nz]` to normalized means `[B, outputs, nx, nz]`.
    fn decoder_graph(&self, g: &mut Graph<T>, y: Var, s0: Option<Var>) -> Result<Var> {
        let d = self.spec.dims();
        let (h3, w3) = d[3];
        let mut h = g.unflatten_pad(y, self.spec.last_filters(), h3, w3)?;
        let si = match (s0, self.spec.scheme.uses_side_info()) {
            (Some(s), true) => {
                let mut feats = Vec::new();
                let mut a = s;
                for l in &self.layers.si {
                    a = self.conv_block(g, a, l, 2, None)?;
                    feats.push(a);
                }
                Some(feats)
            }
            (None, false) => None,
            _ => return Err(Error::SchemeMismatch(format!("{} side information mismatch", self.spec.scheme))),
        };
        if let Some(f) = &si {
            h = g.concat_channels(&[h, f[2]])?;
        }
        let targets = [d[3], d[3], d[2], d[1], d[0]];
        let mut cur = d[3];
        for (i, (l, &s)) in self.layers.dec.iter().zip(&DEC_STRIDES).enumerate() {
            let op = if s == 1 { (0, 0) } else { self.spec.out_pad(cur, targets[i]) };
            h = self.conv_block(g, h, l, s, Some(op))?;
            cur = targets[i];
            if let Some(f) = &si {
                // features at 1/4 and 1/2 resolution
                if i == 2 {
                    h = g.concat_channels(&[h, f[1]])?;
                } else if i == 3 {
                    h = g.concat_channels(&[h, f[0]])?;
                }
            }
        }
        if let (Some(s), Some(gate)) = (s0, self.layers.gate) {
            h = g.affine(h, self.residual_scale, 0.0);
            let skip = g.broadcast_scale(s, gate)?;
            h = g.add(h, skip)?;
        }
        Ok(h)
    }

    /// Symbols of the given transmitters, one row each.
    pub fn encode(&self, fields: &[&Field]) -> Result<SymbolBlock> {
        if fields.len() != self.spec.transmitters() {
            return Err(Error::SchemeMismatch(format!(
                "{} expects {} transmitters, got {}",
                self.spec.scheme,
                self.spec.transmitters(),
                fields.len()
            )));
        }
        let f32s: Vec<Vec<f32>> = fields.iter().map(|f| f.values.iter().map(|&v| v as f32).collect()).collect();
        let refs: Vec<&[f32]> = f32s.iter().map(|v| v.as_slice()).collect();
        let x = self.tensor_of(&refs)?;
        let mut g = Graph::new(&self.params, false);
        let xi = g.input(x);
        let sym = self.encoder_graph(&mut g, xi)?;
        let v = g.value(sym);
        if !v.is_finite() {
            return Err(Error::NonFinite("encoder output".into()));
        }
        let k = self.spec.symbols_per_transmitter();
        let rows = v.data().chunks(k).map(|c| c.iter().map(|x| x.as_f64()).collect()).collect();
        SymbolBlock::new(rows)
    }

    /// Decodes a received vector: `G * K` values for parallel links, `K` over the air.
    pub fn decode(&self, y: &[f64], s0: Option<&Field>) -> Result<DecoderOutput> {
        let (gr, k) = (self.spec.groups(), self.spec.symbols_per_transmitter());
        if y.len() != gr * k {
            return Err(Error::LengthMismatch(format!("decoder expects {} symbols, got {}", gr * k, y.len())));
        }
        let mut g = Graph::new(&self.params, false);
        let yi = g.input(Tensor::from_vec([1, gr, k, 1], y.iter().map(|&v| T::from_f64(v)).collect())?);
        let si = match s0 {
            Some(s) => {
                let v: Vec<f32> = s.values.iter().map(|&v| v as f32).collect();
                Some(g.input(self.tensor_of(&[&v])?))
            }
            None => None,
        };
        let out = self.decoder_graph(&mut g, yi, si)?;
        let v = g.value(out);
        if !v.is_finite() {
            return Err(Error::NonFinite("decoder output".into()));
        }
        let cells = self.spec.nx * self.spec.nz;
        let mu = v
            .data()
            .chunks(cells)
            .map(|c| Field::from_values(self.spec.nx, self.spec.nz, c.iter().map(|x| self.norm.inverse(x.as_f64())).collect()))
            .collect::<Result<_>>()?;
        Ok(DecoderOutput { mu, sigma2: SIGMA2 })
    }

    pub fn manifest(&self) -> serde_json::Value {
        serde_json::json!({
            "spec": self.spec,
            "normalization": self.norm,
            "residual_scale": self.residual_scale,
            "arch_hash": self.arch_hash(),
            "symbol_layout": "bottleneck [C, H, W] flattened row-major, truncated to K per transmitter",
            "sigma2": SIGMA2,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        Checkpoint::new(self.manifest(), self.params.clone())
    }

    pub fn from_checkpoint(ck: Checkpoint<T>) -> Result<Self> {
        let spec: CodecSpec = serde_json::from_value(ck.manifest["spec"].clone())?;
        let norm: Normalization = serde_json::from_value(ck.manifest["normalization"].clone())?;
        let stored = ck.manifest["arch_hash"].as_str().unwrap_or_default().to_string();
        if stored != arch_hash(&spec) {
            return Err(Error::BadArchConfig(format!("architecture hash {stored} does not match the builder")));
        }
        for d in declarations(&spec) {
            let id = ck.params.find(&d.name).ok_or_else(|| Error::BadArchConfig(format!("missing {}", d.name)))?;
            if ck.params.get(id).shape() != d.shape {
                return Err(Error::BadArchConfig(format!("{} has shape {:?}", d.name, ck.params.get(id).shape())));
            }
        }
        let residual_scale = ck.manifest["residual_scale"]
            .as_f64()
            .filter(|r| r.is_finite() && *r > 0.0)
            .ok_or_else(|| Error::BadArchConfig("missing residual_scale".into()))?;
        let layers = resolve(&spec, &ck.params)?;
        Ok(Self { spec, norm, residual_scale, params: ck.params, layers })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }
}

/// One training item: encoder inputs, optional side information and targets.
struct Item<'a> {
    inputs: Vec<&'a [f32]>,
    s0: &'a [f32],
    targets: Vec<&'a [f32]>,
}

fn items<'a>(spec: &CodecSpec, samples: &[&'a SemanticSample]) -> Result<Vec<Item<'a>>> {
    let mut out = Vec::new();
    for s in samples {
        if s.round != spec.round || s.n_neighbors() != spec.n_tx {
            return Err(Error::SchemeMismatch(format!(
                "{} sample with {} neighbors for a {} codec with {} transmitters",
                s.round.name(),
                s.n_neighbors(),
                spec.round.name(),
                spec.n_tx
            )));
        }
        let nb: Vec<&[f32]> = s.neighbors.iter().map(|v| v.as_slice()).collect();
        match spec.scheme {
            Scheme::JsccNoSi | Scheme::JsccSi => {
                out.extend(nb.iter().map(|&x| Item { inputs: vec![x], s0: &s.s0, targets: vec![x] }))
            }
            Scheme::DistributedJscc => out.push(Item { inputs: nb.clone(), s0: &s.s0, targets: nb }),
            Scheme::SemanticJscc | Scheme::SemanticJsccOac => {
                out.push(Item { inputs: nb, s0: &s.s0, targets: vec![&s.z] })
            }
            Scheme::Perfect => return Err(Error::SchemeMismatch("the perfect scheme is not trained".into())),
        }
    }
    Ok(out)
}

/// RMS of `target - s0` in normalized units, kept within `[1e-3, 1]`.
fn residual_rms(its: &[Item], norm: &Normalization) -> f64 {
    let (mut n, mut s2) = (0usize, 0.0f64);
    for it in its {
        for t in &it.targets {
            for (&a, &b) in t.iter().zip(it.s0) {
                let d = (a as f64 - b as f64) / norm.std;
                s2 += d * d;
                n += 1;
            }
        }
    }
    (s2 / n.max(1) as f64).sqrt().clamp(1e-3, 1.0)
}

/// Loss, prediction and gradients of one batch.
pub struct BatchEval<T> {
    pub loss: f64,
    pub pred: Tensor<T>,
    pub target: Tensor<T>,
    pub grads: Gradients<T>,
    pub running_stats: Vec<(ParamId, Tensor<T>)>,
    /// Decoder-side power of every transmitted block.
    pub block_power: Vec<f64>,
}

fn noise_std(power: f64, snr_db: Option<f64>) -> f64 {
    match snr_db {
        Some(s) => channel::noise_variance(power, s).sqrt(),
        None => 0.0,
    }
}

/// Runs the codec on a batch of samples through a channel at `snr_db`
/// (`None`: noiseless) and differentiates the Gaussian negative log-likelihood.
pub fn batch_eval<T: Real, R: Rng>(
    codec: &Codec<T>,
    samples: &[&SemanticSample],
    snr_db: Option<f64>,
    sigma2: f64,
    train: bool,
    rng: &mut R,
) -> Result<BatchEval<T>> {
    let its = items(&codec.spec, samples)?;
    batch_eval_items(codec, &its, snr_db, sigma2, train, rng)
}

fn batch_eval_items<T: Real, R: Rng>(
    codec: &Codec<T>,
    its: &[Item],
    snr_db: Option<f64>,
    sigma2: f64,
    train: bool,
    rng: &mut R,
) -> Result<BatchEval<T>> {
    let spec = &codec.spec;
    let b = its.len();
    let x = codec.tensor_of(&its.iter().flat_map(|i| i.inputs.iter().copied()).collect::<Vec<_>>())?;
    let target = codec.tensor_of(&its.iter().flat_map(|i| i.targets.iter().copied()).collect::<Vec<_>>())?;
    let target = target.reshape([b, spec.outputs(), spec.nx, spec.nz])?;
    let mut g = Graph::new(&codec.params, train);
    let xi = g.input(x);
    let sym = codec.encoder_graph(&mut g, xi)?;
    let clean = codec.superpose(&mut g, sym)?;
    let shape = g.shape(clean);
    let per = shape[1] * shape[2];
    let mut noise = Vec::with_capacity(b * per);
    let mut block_power = Vec::with_capacity(b);
    for bi in 0..b {
        let v = &g.value(clean).data()[bi * per..(bi + 1) * per];
        let p = v.iter().map(|x| x.as_f64().powi(2)).sum::<f64>() / per as f64;
        block_power.push(p);
        let sd = noise_std(p, snr_db);
        noise.extend((0..per).map(|_| T::from_f64(sd * rng.sample::<f64, _>(StandardNormal))));
    }
    let ni = g.input(Tensor::from_vec(shape, noise)?);
    let y = g.add(clean, ni)?;
    let s0 = if spec.scheme.uses_side_info() {
        let s = codec.tensor_of(&its.iter().map(|i| i.s0).collect::<Vec<_>>())?;
        Some(g.input(s))
    } else {
        None
    };
    let out = codec.decoder_graph(&mut g, y, s0)?;
    let ti = g.input(target.clone());
    let loss = g.gaussian_nll(out, ti, sigma2)?;
    let lv = g.value(loss).data()[0].as_f64();
    let grads = g.backward(loss)?;
    Ok(BatchEval {
        loss: lv,
        pred: g.value(out).clone(),
        target,
        grads,
        running_stats: g.running_stat_updates().to_vec(),
        block_power,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs at which the learning rate is multiplied by `lr_gamma`.
    pub lr_milestones: Vec<usize>,
    pub lr_gamma: f64,
    /// Training SNR in dB; `None` trains without noise.
    pub train_snr_db: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 30, batch_size: 16, lr: 1e-3, lr_milestones: vec![18, 26], lr_gamma: 0.1, train_snr_db: Some(10.0), seed: 0 }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_milestones.iter().filter(|&&m| epoch >= m).count();
        self.lr * self.lr_gamma.powi(drops as i32)
    }
}

#[derive(Clone, Debug)]
pub struct Trained {
    pub codec: Codec<f32>,
    /// Mean training loss per epoch.
    pub losses: Vec<f64>,
}

/// Trains a codec with Adam on the given samples, drawing fresh channel
/// noise for every batch.
pub fn train_scheme(spec: CodecSpec, norm: Normalization, samples: &[&SemanticSample], cfg: &TrainConfig) -> Result<Trained> {
    if cfg.batch_size < 2 {
        return Err(Error::Config("batch_size must be at least 2".into()));
    }
    let mut codec = Codec::<f32>::init(spec, norm, cfg.seed)?;
    let its = items(&codec.spec, samples)?;
    if its.len() < 2 {
        return Err(Error::InvalidSize(format!("{} training items", its.len())));
    }
    if codec.spec.scheme.uses_side_info() {
        codec.residual_scale = residual_rms(&its, &codec.norm);
    }
    let mut opt = Optimizer::new(OptimizerKind::Adam);
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..its.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut seeds::stream(cfg.seed, &[1, epoch as u64]));
        let mut batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        // a trailing single item cannot form batch statistics
        if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
            batches.pop();
        }
        let lr = cfg.lr_at(epoch);
        let mut total = 0.0;
        for (bi, idx) in batches.iter().enumerate() {
            let batch: Vec<Item> =
                idx.iter().map(|&i| Item { inputs: its[i].inputs.clone(), s0: its[i].s0, targets: its[i].targets.clone() }).collect();
            let mut rng = seeds::stream(cfg.seed, &[2, epoch as u64, bi as u64]);
            let ev = batch_eval_items(&codec, &batch, cfg.train_snr_db, SIGMA2, true, &mut rng)?;
            if !ev.loss.is_finite() {
                return Err(Error::Diverged(format!("training loss {} at epoch {epoch}", ev.loss)));
            }
            total += ev.loss;
            opt.step(&mut codec.params, &ev.grads, lr)?;
            for (id, t) in ev.running_stats {
                *codec.params.get_mut(id) = t;
            }
        }
        losses.push(total / batches.len() as f64);
    }
    Ok(Trained { codec, losses })
}

/// Result of one scheme exchange at a receiver.
#[derive(Clone, Debug)]
pub struct RoundOutput {
    pub z_hat: Field,
    /// Decoder-side average power of every transmitted block.
    pub block_power: Vec<f64>,
    pub channel_uses: usize,
}

fn deliver<R: Rng>(block: &SymbolBlock, scheme: Scheme, channel: &ChannelConfig, rng: &mut R) -> Vec<f64> {
    match (channel.kind, scheme.channel()) {
        (ChannelKind::Perfect, ChannelKind::Oac) => block.superposed(),
        (ChannelKind::Perfect, _) => block.concat(),
        (_, ChannelKind::Oac) => channel::transmit_oac(block, channel.snr_db, rng),
        _ => channel::transmit_parallel(block, channel.snr_db, rng),
    }
}

/// Estimates the receiver's semantic variable under a scheme. `channel.kind`
/// selects noisy (`ParallelAwgn` or `Oac`, both routed by the scheme) or
/// noiseless delivery (`Perfect`).
pub fn scheme_round<R: Rng>(
    scheme: Scheme,
    x: &Exchange,
    channel: &ChannelConfig,
    codec: Option<&Codec<f32>>,
    rng: &mut R,
) -> Result<RoundOutput> {
    let n = x.neighbors.len();
    if scheme == Scheme::Perfect || n == 0 {
        return Ok(RoundOutput { z_hat: x.exact()?, block_power: Vec::new(), channel_uses: 0 });
    }
    let codec = codec.ok_or_else(|| Error::MissingCheckpoint(format!("{scheme} {} N={n}", x.round.name())))?;
    let spec = &codec.spec;
    if spec.scheme != scheme.codec_scheme(n) || spec.round != x.round || spec.n_tx != n {
        return Err(Error::SchemeMismatch(format!(
            "{} {} N={} codec used for {scheme} {} N={n}",
            spec.scheme,
            spec.round.name(),
            spec.n_tx,
            x.round.name()
        )));
    }
    let used = spec.scheme;
    let s0 = if used.uses_side_info() { Some(x.own) } else { None };
    let mut block_power = Vec::new();
    let mut z = x.own.scaled(x.own_weight);
    if used.per_link() {
        for (_, w, f) in &x.neighbors {
            let block = codec.encode(&[f])?;
            block_power.push(channel::average_power(&block, used.channel()));
            let y = deliver(&block, used, channel, rng);
            let out = codec.decode(&y, s0)?;
            z.axpy(*w, &out.mu[0])?;
        }
    } else {
        let fields: Vec<&Field> = x.neighbors.iter().map(|(_, _, f)| *f).collect();
        let block = codec.encode(&fields)?;
        block_power.push(channel::average_power(&block, used.channel()));
        let y = deliver(&block, used, channel, rng);
        let out = codec.decode(&y, s0)?;
        if used.is_semantic() {
            z = out.mu.into_iter().next().expect("one output");
        } else {
            for ((_, w, _), s) in x.neighbors.iter().zip(&out.mu) {
                z.axpy(*w, s)?;
            }
        }
    }
    Ok(RoundOutput { z_hat: z, block_power, channel_uses: spec.channel_uses() })
}
