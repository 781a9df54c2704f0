use semfwi::atc::{Exchange, Round, TopologyKind};
use semfwi::channel::{ChannelConfig, ChannelKind};
use semfwi::codec::{
    arch_hash, batch_eval, scheme_round, train_scheme, ArchConfig, Codec, CodecSpec, Normalization, Scheme, TrainConfig,
};
use semfwi::dataset::{SampleOrigin, SemanticSample};
use semfwi::grid::Field;
use semfwi::{seeds, Error};

fn smooth_field(nx: usize, nz: usize, seed: u64) -> Vec<f32> {
    use rand::Rng;
    let mut rng = seeds::stream(seed, &[]);
    let (a, b, c) = (rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0), rng.gen_range(-1.0..1.0));
    (0..nx * nz)
        .map(|i| {
            let (x, z) = ((i / nz) as f64 / nx as f64, (i % nz) as f64 / nz as f64);
            ((a * 3.0 * x).sin() + (b * 2.0 * z).cos() * c) as f32
        })
        .collect()
}

fn sample(nx: usize, nz: usize, n: usize, seed: u64) -> SemanticSample {
    let s0 = smooth_field(nx, nz, seed * 100);
    let neighbors: Vec<Vec<f32>> = (0..n).map(|l| smooth_field(nx, nz, seed * 100 + 1 + l as u64)).collect();
    let w = 1.0 / (n as f32 + 1.0);
    let z = (0..nx * nz).map(|i| w * (s0[i] + neighbors.iter().map(|s| s[i]).sum::<f32>())).collect();
    SemanticSample {
        round: Round::Gradient,
        s0,
        neighbors,
        weights: vec![w; n + 1],
        z,
        origin: SampleOrigin { scenario: seed, iteration: 0, receiver: 0, topology: TopologyKind::FullMesh },
    }
}

fn field(v: &[f32], nx: usize, nz: usize) -> Field {
    Field::from_values(nx, nz, v.iter().map(|&x| x as f64).collect()).unwrap()
}

#[test]
fn bottleneck_of_full_grid_and_round_trip_shapes() {
    let arch = ArchConfig { n_ch: 91, ..ArchConfig::default() };
    let spec = CodecSpec::new(Scheme::SemanticJscc, Round::Velocity, 2, 100, 50, arch.clone()).unwrap();
    assert_eq!(spec.bottleneck(), (13, 7));
    assert_eq!(spec.last_filters(), 1);
    for scheme in Scheme::ALL.into_iter().filter(|s| s.needs_codec()) {
        for (nx, nz) in [(100, 50), (32, 16), (9, 5)] {
            let n = 2;
            let spec = CodecSpec::new(scheme, Round::Velocity, n, nx, nz, ArchConfig { filters: 4, si_filters: 3, ..arch.clone() }).unwrap();
            let codec = Codec::<f64>::init(spec.clone(), Normalization::identity(), 1).unwrap();
            let fields: Vec<Field> = (0..spec.transmitters()).map(|l| field(&smooth_field(nx, nz, l as u64), nx, nz)).collect();
            let refs: Vec<&Field> = fields.iter().collect();
            let block = codec.encode(&refs).unwrap();
            assert_eq!(block.row_len(), spec.symbols_per_transmitter());
            let y = if scheme.channel() == ChannelKind::Oac { block.superposed() } else { block.concat() };
            let s0 = fields[0].clone();
            let out = codec.decode(&y, scheme.uses_side_info().then_some(&s0)).unwrap();
            assert_eq!(out.mu.len(), spec.outputs());
            assert!(out.mu.iter().all(|m| m.nx == nx && m.nz == nz));
        }
    }
}

#[test]
fn encoder_is_deterministic_and_power_normalized() {
    for scheme in [Scheme::JsccNoSi, Scheme::DistributedJscc, Scheme::SemanticJscc, Scheme::SemanticJsccOac] {
        let spec = CodecSpec::new(scheme, Round::Gradient, 3, 32, 16, ArchConfig::default()).unwrap();
        let codec = Codec::<f32>::init(spec.clone(), Normalization::identity(), 2).unwrap();
        let fields: Vec<Field> = (0..spec.transmitters()).map(|l| field(&smooth_field(32, 16, 7 + l as u64), 32, 16)).collect();
        let refs: Vec<&Field> = fields.iter().collect();
        let a = codec.encode(&refs).unwrap();
        assert_eq!(a, codec.encode(&refs).unwrap());
        let p = semfwi::channel::average_power(&a, scheme.channel());
        assert!((p - 1.0).abs() < 1e-6, "{scheme}: {p}");
    }
}

#[test]
fn untrained_decoder_on_zero_input_is_finite() {
    let spec = CodecSpec::new(Scheme::JsccSi, Round::Velocity, 1, 32, 16, ArchConfig::default()).unwrap();
    let codec = Codec::<f32>::init(spec, Normalization { mean: 2000.0, std: 300.0 }, 3).unwrap();
    let out = codec.decode(&[0.0; 8], Some(&Field::zeros(32, 16))).unwrap();
    assert!(out.mu[0].is_finite());
    assert_eq!(out.point_estimate()[0], out.mu[0]);
}

#[test]
fn scheme_ids_and_mismatches() {
    assert_eq!("semantic_jscc_oac".parse::<Scheme>().unwrap(), Scheme::SemanticJsccOac);
    match "jscc".parse::<Scheme>() {
        Err(Error::UnknownScheme { valid, .. }) => {
            for s in Scheme::ALL {
                assert!(valid.contains(s.id()));
            }
        }
        other => panic!("{other:?}"),
    }
    assert!(CodecSpec::new(Scheme::SemanticJsccOac, Round::Gradient, 1, 8, 8, ArchConfig::default()).is_err());
    assert_eq!(Scheme::SemanticJsccOac.codec_scheme(1), Scheme::SemanticJscc);
    let spec = CodecSpec::new(Scheme::SemanticJscc, Round::Gradient, 2, 16, 8, ArchConfig::default()).unwrap();
    let codec = Codec::<f32>::init(spec, Normalization::identity(), 0).unwrap();
    let own = Field::zeros(16, 8);
    let nb = Field::constant(16, 8, 1.0);
    let x = Exchange { round: Round::Velocity, iteration: 0, receiver: 0, own: &own, own_weight: 0.5, neighbors: vec![(1, 0.25, &nb), (2, 0.25, &nb)] };
    let ch = ChannelConfig { kind: ChannelKind::ParallelAwgn, snr_db: 10.0, n_ch: 8, seed: 0 };
    assert!(matches!(scheme_round(Scheme::SemanticJscc, &x, &ch, Some(&codec), &mut seeds::stream(0, &[])), Err(Error::SchemeMismatch(_))));
    let s = sample(16, 8, 3, 1);
    assert!(matches!(batch_eval(&codec.cast::<f64>(), &[&s, &s], None, 1.0, false, &mut seeds::stream(0, &[])), Err(Error::SchemeMismatch(_))));
}

#[test]
fn perfect_scheme_returns_exact_sum() {
    let own = Field::constant(4, 3, 2.0);
    let a = Field::constant(4, 3, 5.0);
    let x = Exchange { round: Round::Gradient, iteration: 0, receiver: 0, own: &own, own_weight: 0.5, neighbors: vec![(1, 0.5, &a)] };
    let ch = ChannelConfig { kind: ChannelKind::ParallelAwgn, snr_db: -10.0, n_ch: 8, seed: 0 };
    let out = scheme_round(Scheme::Perfect, &x, &ch, None, &mut seeds::stream(0, &[])).unwrap();
    assert!(out.z_hat.values.iter().all(|&v| v == 3.5));
}

#[test]
fn checkpoint_round_trip_and_hash() {
    let spec = CodecSpec::new(Scheme::DistributedJscc, Round::Gradient, 2, 16, 8, ArchConfig::default()).unwrap();
    let codec = Codec::<f32>::init(spec.clone(), Normalization { mean: 1.0, std: 2.0 }, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ckpt");
    codec.save(&path).unwrap();
    let back = Codec::<f32>::load(&path).unwrap();
    assert_eq!(back.arch_hash(), arch_hash(&spec));
    assert_eq!(back.norm, codec.norm);
    let f = field(&smooth_field(16, 8, 1), 16, 8);
    assert_eq!(back.encode(&[&f, &f]).unwrap(), codec.encode(&[&f, &f]).unwrap());
    let other = CodecSpec { n_tx: 3, ..spec };
    assert_ne!(arch_hash(&other), codec.arch_hash());
}

#[test]
fn training_is_deterministic_and_reduces_loss() {
    let samples: Vec<SemanticSample> = (0..24).map(|i| sample(16, 8, 2, i)).collect();
    let refs: Vec<&SemanticSample> = samples.iter().collect();
    let norm = Normalization::fit(samples.iter().flat_map(|s| std::iter::once(s.s0.as_slice()).chain(s.neighbors.iter().map(|v| v.as_slice())))).unwrap();
    let spec = CodecSpec::new(Scheme::SemanticJscc, Round::Gradient, 2, 16, 8, ArchConfig { filters: 6, si_filters: 4, n_ch: 4, ..ArchConfig::default() }).unwrap();
    let cfg = TrainConfig { epochs: 12, batch_size: 8, lr: 3e-3, lr_milestones: vec![9], seed: 5, ..TrainConfig::default() };
    let a = train_scheme(spec.clone(), norm, &refs, &cfg).unwrap();
    let b = train_scheme(spec, norm, &refs, &cfg).unwrap();
    assert_eq!(a.losses, b.losses);
    assert!(a.losses[0] > *a.losses.last().unwrap(), "{:?}", a.losses);
}
