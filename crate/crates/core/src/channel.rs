//! Real-valued AWGN channels: parallel orthogonal links and over-the-air
//! superposition, with decoder-side power bookkeeping.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKind {
    /// Error-free delivery of the concatenated symbols.
    Perfect,
    /// One orthogonal AWGN link per transmitter.
    ParallelAwgn,
    /// All transmitters share the channel uses; the receiver sees their sum.
    Oac,
}

/// How the OAC power constraint is measured.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OacPower {
    /// On the superposed vector at the decoder.
    #[default]
    Joint,
    /// On every transmitter's own vector.
    PerTransmitter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub kind: ChannelKind,
    pub snr_db: f64,
    /// Channel uses per transmitter and unit of semantic data.
    pub n_ch: usize,
    pub seed: u64,
}

/// Per-transmitter symbol vectors `c_l`.
#[derive(Clone, Debug, PartialEq)]
pub struct SymbolBlock {
    pub rows: Vec<Vec<f64>>,
}

impl SymbolBlock {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let len = rows.first().map(|r| r.len()).ok_or_else(|| Error::LengthMismatch("no transmitters".into()))?;
        if len == 0 || rows.iter().any(|r| r.len() != len) {
            return Err(Error::LengthMismatch("transmitters must send equally many, nonzero symbols".into()));
        }
        Ok(Self { rows })
    }

    pub fn n_transmitters(&self) -> usize {
        self.rows.len()
    }

    pub fn row_len(&self) -> usize {
        self.rows[0].len()
    }

    pub fn concat(&self) -> Vec<f64> {
        self.rows.concat()
    }

    pub fn superposed(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.row_len()];
        for r in &self.rows {
            for (a, b) in s.iter_mut().zip(r) {
                *a += b;
            }
        }
        s
    }
}

fn mean_square(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64
}

/// Decoder-side average power per channel use `P_c`: over the superposed
/// vector for OAC, over the concatenation otherwise.
pub fn average_power(block: &SymbolBlock, kind: ChannelKind) -> f64 {
    match kind {
        ChannelKind::Oac => mean_square(&block.superposed()),
        _ => mean_square(&block.concat()),
    }
}

/// Rescales the block to `P_c = 1`.
pub fn power_normalize(block: &SymbolBlock, kind: ChannelKind) -> Result<SymbolBlock> {
    let p = average_power(block, kind);
    if p == 0.0 {
        return Err(Error::AllZero);
    }
    let s = 1.0 / p.sqrt();
    Ok(SymbolBlock { rows: block.rows.iter().map(|r| r.iter().map(|v| v * s).collect()).collect() })
}

/// Rescales every transmitter to unit mean power on its own vector.
pub fn power_normalize_per_transmitter(block: &SymbolBlock) -> Result<SymbolBlock> {
    let rows = block
        .rows
        .iter()
        .map(|r| {
            let p = mean_square(r);
            if p == 0.0 {
                return Err(Error::AllZero);
            }
            Ok(r.iter().map(|v| v / p.sqrt()).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SymbolBlock { rows })
}

/// `sigma_n^2 = P_c / 10^(snr_db / 10)`.
pub fn noise_variance(p_c: f64, snr_db: f64) -> f64 {
    p_c / 10f64.powf(snr_db / 10.0)
}

/// Aggregate channel uses of one exchange; equal for every kind.
pub fn channel_uses(kind: ChannelKind, n_transmitters: usize, n_ch: usize) -> usize {
    match kind {
        // each transmitter owns n_ch orthogonal uses
        ChannelKind::Perfect | ChannelKind::ParallelAwgn => n_transmitters * n_ch,
        // every transmitter occupies all N * n_ch shared uses
        ChannelKind::Oac => n_transmitters * n_ch,
    }
}

/// `y = concat(c_l) + n`.
pub fn transmit_parallel<R: Rng>(block: &SymbolBlock, snr_db: f64, rng: &mut R) -> Vec<f64> {
    let mut y = block.concat();
    let sigma = noise_variance(average_power(block, ChannelKind::ParallelAwgn), snr_db).sqrt();
    for v in &mut y {
        *v += sigma * rng.sample::<f64, _>(StandardNormal);
    }
    y
}

/// `y = sum_l c_l + n`.
pub fn transmit_oac<R: Rng>(block: &SymbolBlock, snr_db: f64, rng: &mut R) -> Vec<f64> {
    let mut y = block.superposed();
    let sigma = noise_variance(mean_square(&y), snr_db).sqrt();
    for v in &mut y {
        *v += sigma * rng.sample::<f64, _>(StandardNormal);
    }
    y
}

/// Dispatches on the configured kind; the perfect channel returns the concatenation.
pub fn transmit<R: Rng>(block: &SymbolBlock, cfg: &ChannelConfig, rng: &mut R) -> Vec<f64> {
    match cfg.kind {
        ChannelKind::Perfect => block.concat(),
        ChannelKind::ParallelAwgn => transmit_parallel(block, cfg.snr_db, rng),
        ChannelKind::Oac => transmit_oac(block, cfg.snr_db, rng),
    }
}
