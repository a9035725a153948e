//! Independent oracles shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use std::ops::Range;

use keyscope::audio::SynthSpec;
use keyscope::contrastive::Projector;
use keyscope::encoder::{Encoder, EncoderConfig, PackedTokens, TokenSequence};
use keyscope::keyeval::Key;
use keyscope::probe::{Probe, ProbeArch, Track, TrackAudio};
use keyscope::tensor::gradcheck::check_gradients;
use keyscope::tensor::{Graph, ParamStore, Tensor, Var};
use keyscope::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-5;

/// Printed key-estimation results: model, weighted, then
/// (correct, fifth, relative, parallel) when the row has a breakdown.
pub const TABLE1: [(&str, f64, Option<[f64; 4]>); 12] = [
    ("GS / masked-contrastive MLP", 75.91, Some([72.02, 3.48, 3.64, 5.30])),
    ("GS / masked-contrastive linear", 73.01, Some([67.88, 4.97, 5.63, 4.80])),
    ("GS / InceptionKeyNet", 75.68, None),
    ("GS / MERT-95M-Public", 72.95, Some([67.72, 4.97, 5.96, 4.80])),
    ("GS / AllConv", 74.60, Some([67.90, 7.00, 8.10, 4.10])),
    ("GS / ConvKey", 74.30, Some([67.90, 6.80, 7.10, 4.30])),
    ("GS / KeyFinder", 59.30, Some([45.36, 20.69, 6.79, 7.78])),
    ("BB / masked-contrastive MLP", 84.35, Some([79.87, 4.55, 6.49, 1.30])),
    ("BB / masked-contrastive linear", 81.62, Some([76.62, 4.55, 7.79, 1.95])),
    ("BB / MERT-95M-Public", 81.30, Some([75.97, 4.55, 9.74, 0.65])),
    ("BB / AllConv", 85.10, Some([79.90, 5.60, 4.20, 6.20])),
    ("BB / ConvKey", 83.90, Some([77.10, 9.00, 4.90, 4.20])),
];

pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

/// Reduces `out` to a scalar with fixed random weights so no gradient is trivially constant.
fn project(g: &mut Graph<'_, f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let w = randn(&shape, &mut ChaCha8Rng::seed_from_u64(seed));
    let w = g.input(w);
    let prod = g.mul(out, w)?;
    g.sum(prod)
}

type OpFn = Box<dyn Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>>;

fn check_op(inputs: &[Vec<usize>], seed: u64, op: OpFn) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let ids: Vec<_> = inputs
        .iter()
        .enumerate()
        .map(|(i, s)| store.add(format!("in{i}"), randn(s, &mut rng)))
        .collect();
    let report = check_gradients(
        &mut store,
        |g| {
            let vars: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
            let out = op(g, &vars)?;
            if g.value(out).len() == 1 {
                Ok(out)
            } else {
                project(g, out, seed ^ 0xabc)
            }
        },
        FD_STEP,
        3,
        seed,
    )?;
    Ok(report.max_rel_error)
}

fn soft_targets(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut t = Tensor::from_fn(&[rows, cols], |_| rng.random::<f64>() + 0.05);
    for r in 0..rows {
        let s: f64 = t.row(r).iter().sum();
        for v in &mut t.data_mut()[r * cols..(r + 1) * cols] {
            *v /= s;
        }
    }
    t
}

/// Finite-difference check of every differentiable op at random small shapes.
pub fn op_checks(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = rng.random_range(2..6usize);
    let c = rng.random_range(3..7usize);
    let k = rng.random_range(1..5usize);
    let targets = soft_targets(r, c, &mut rng);
    let segs: Vec<Range<usize>> = vec![0..2, 2..5];
    let segs2 = segs.clone();
    let cases: Vec<(&'static str, Vec<Vec<usize>>, OpFn)> = vec![
        ("matmul", vec![vec![r, k], vec![k, c]], Box::new(|g, v| g.matmul(v[0], v[1]))),
        ("add", vec![vec![r, c], vec![r, c]], Box::new(|g, v| g.add(v[0], v[1]))),
        ("add_row", vec![vec![r, c], vec![c]], Box::new(|g, v| g.add_row(v[0], v[1]))),
        ("mul", vec![vec![r, c], vec![r, c]], Box::new(|g, v| g.mul(v[0], v[1]))),
        ("scale", vec![vec![r, c]], Box::new(|g, v| g.scale(v[0], -1.7))),
        ("relu", vec![vec![r, c]], Box::new(|g, v| g.relu(v[0]))),
        ("gelu", vec![vec![r, c]], Box::new(|g, v| g.gelu(v[0]))),
        ("softmax_rows", vec![vec![r, c]], Box::new(|g, v| g.softmax(v[0], 1))),
        ("softmax_cols", vec![vec![r, c]], Box::new(|g, v| g.softmax(v[0], 0))),
        (
            "layer_norm",
            vec![vec![r, c], vec![c], vec![c]],
            Box::new(|g, v| g.layer_norm(v[0], v[1], v[2])),
        ),
        ("dropout", vec![vec![r, c]], Box::new(|g, v| g.dropout(v[0], 0.3, 11))),
        ("mean_pool_0", vec![vec![r, c]], Box::new(|g, v| g.mean_pool(v[0], 0))),
        ("mean_pool_1", vec![vec![r, c]], Box::new(|g, v| g.mean_pool(v[0], 1))),
        (
            "segment_mean",
            vec![vec![5, c]],
            Box::new(move |g, v| g.segment_mean(v[0], &segs)),
        ),
        (
            "scaled_dot_attention",
            vec![vec![5, 4], vec![5, 4], vec![5, 4]],
            Box::new(move |g, v| g.scaled_dot_attention(v[0], v[1], v[2], 2, &segs2)),
        ),
        ("sum", vec![vec![r, c]], Box::new(|g, v| g.sum(v[0]))),
        (
            "softmax_cross_entropy",
            vec![vec![r, c]],
            Box::new(move |g, v| g.softmax_cross_entropy(v[0], targets.clone())),
        ),
        ("ntxent", vec![vec![6, c.max(3)]], Box::new(|g, v| g.ntxent(v[0], 0.1))),
    ];
    cases
        .into_iter()
        .enumerate()
        .map(|(i, (name, shapes, op))| Ok((name, check_op(&shapes, seed.wrapping_add(i as u64 * 7919), op)?)))
        .collect()
}

/// Finite-difference check of a probe with cross-entropy on random inputs.
pub fn probe_check(arch: &ProbeArch, batch: usize, seed: u64) -> Result<f64> {
    let mut probe = Probe::<f64>::build(arch, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = randn(&[batch, arch.input_dim], &mut rng);
    let y = soft_targets(batch, arch.classes, &mut rng);
    clear_relu_kinks(&mut probe, &x, seed)?;
    let mut store = probe.store().clone();
    let report = check_gradients(
        &mut store,
        |g| {
            let xv = g.input(x.clone());
            let logits = probe.forward(g, xv, seed)?;
            g.softmax_cross_entropy(logits, y.clone())
        },
        FD_STEP,
        2,
        seed,
    )?;
    Ok(report.max_rel_error)
}

/// Central differences are only valid where the loss is smooth over the
/// whole ±h interval. Picks each hidden layer's bias so that no ReLU
/// pre-activation in the batch sits near zero.
fn clear_relu_kinks(probe: &mut Probe<f64>, x: &Tensor<f64>, seed: u64) -> Result<()> {
    const CANDIDATES: [f64; 9] = [0.0, 0.02, -0.02, 0.05, -0.05, 0.1, -0.1, 0.2, -0.2];
    let layers = probe.arch().hidden_layers;
    let batch = x.shape()[0];
    let mut h: Vec<f64> = x.data().to_vec();
    let mut width = x.shape()[1];
    for i in 0..layers {
        let store = probe.store_mut();
        let w_id = store.find(&format!("probe.layers.{i}.weight")).unwrap();
        let b_id = store.find(&format!("probe.layers.{i}.bias")).unwrap();
        let w = store.value(w_id).clone();
        let out = w.shape()[1];
        let mut z = vec![0.0; batch * out];
        for r in 0..batch {
            for k in 0..width {
                let hv = h[r * width + k];
                for j in 0..out {
                    z[r * out + j] += hv * w.data()[k * out + j];
                }
            }
        }
        let mut bias = vec![0.0; out];
        for (j, b) in bias.iter_mut().enumerate() {
            let margin = |c: f64| {
                (0..batch)
                    .map(|r| (z[r * out + j] + c).abs())
                    .fold(f64::INFINITY, f64::min)
            };
            *b = CANDIDATES
                .into_iter()
                .max_by(|a, c| margin(*a).total_cmp(&margin(*c)))
                .unwrap();
        }
        store.get_mut(b_id).value = Tensor::new(vec![out], bias.clone())?;
        let mask: Vec<f64> = if i == 0 {
            let ones = Tensor::from_fn(&[batch, out], |_| 1.0);
            let empty = ParamStore::<f64>::new();
            let mut g = Graph::new(&empty, true);
            let v = g.input(ones);
            let d = g.dropout(v, probe.arch().dropout, seed)?;
            g.value(d).data().to_vec()
        } else {
            vec![1.0; batch * out]
        };
        h = (0..batch * out)
            .map(|idx| (z[idx] + bias[idx % out]).max(0.0) * mask[idx])
            .collect();
        width = out;
    }
    Ok(())
}

pub fn tiny_encoder_config() -> EncoderConfig {
    EncoderConfig {
        embed_dim: 8,
        depth: 1,
        heads: 2,
        mlp_dim: 16,
        n_mels: 4,
        patch_frames: 2,
    }
}

/// Finite-difference check through encoder, projector and NT-Xent.
pub fn encoder_check(seed: u64) -> Result<f64> {
    let cfg = tiny_encoder_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let enc = Encoder::init(&cfg, &mut store, &mut rng)?;
    let proj = Projector::init(&mut store, cfg.embed_dim, 4, &mut rng);
    // larger initial weights so the loss surface is not nearly flat
    for p in store.iter_mut() {
        let v = p.value.map(|x| x * 10.0);
        p.value = v;
    }
    let seqs: Vec<TokenSequence> = (0..4)
        .map(|s| {
            let n = 2 + s;
            let tokens = (0..n * cfg.token_dim()).map(|_| StandardNormal.sample(&mut rng)).collect();
            TokenSequence::new(tokens, cfg.token_dim(), (0..n).map(|i| i * 2 + s).collect())
        })
        .collect::<Result<_>>()?;
    let packed = PackedTokens::pack(&seqs.iter().collect::<Vec<_>>())?;
    let report = check_gradients(
        &mut store,
        |g| {
            let e = enc.forward(g, &packed)?;
            let z = proj.forward(g, e)?;
            g.ntxent(z, 0.1)
        },
        FD_STEP,
        2,
        seed,
    )?;
    Ok(report.max_rel_error)
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// NT-Xent by explicit enumeration: every anchor in both views, its partner as
/// the positive, all other 2N−2 rows as negatives, plain exponentials.
pub fn brute_ntxent(a: &[Vec<f64>], b: &[Vec<f64>], tau: f64) -> f64 {
    let n = a.len();
    let all: Vec<(&[f64], usize, bool)> = a
        .iter()
        .enumerate()
        .map(|(i, v)| (v.as_slice(), i, false))
        .chain(b.iter().enumerate().map(|(i, v)| (v.as_slice(), i, true)))
        .collect();
    let mut total = 0.0;
    for (i, &(zi, clip_i, view_i)) in all.iter().enumerate() {
        let mut num = 0.0;
        let mut den = 0.0;
        for (k, &(zk, clip_k, view_k)) in all.iter().enumerate() {
            if i == k {
                continue;
            }
            let e = (cos(zi, zk) / tau).exp();
            den += e;
            if clip_k == clip_i && view_k != view_i {
                num = e;
            }
        }
        total += -(num / den).ln();
    }
    total / (2 * n) as f64
}

/// `per_key` synthetic tracks for each of the 24 keys.
pub fn synth_tracks(per_key: usize, duration_s: f64, seed: u64, prefix: &str) -> Vec<Track> {
    Key::all()
        .flat_map(|key| {
            (0..per_key).map(move |j| {
                let s = keyscope::seed::mix(seed, &[key.class_index() as u64, j as u64]);
                Track {
                    id: format!("{prefix}-{:02}-{j:03}", key.class_index()),
                    key,
                    audio: TrackAudio::Synth(keyscope::audio::random_spec(key, duration_s, s)),
                }
            })
        })
        .collect()
}

/// Plain DFT magnitude at `freq` (Hz), independent of any FFT code.
pub fn dft_magnitude(x: &[f32], sample_rate: u32, freq: f64) -> f64 {
    let w = std::f64::consts::TAU * freq / sample_rate as f64;
    let (mut re, mut im) = (0.0, 0.0);
    for (n, &v) in x.iter().enumerate() {
        let (s, c) = (w * n as f64).sin_cos();
        re += v as f64 * c;
        im -= v as f64 * s;
    }
    (re * re + im * im).sqrt()
}

/// Energy per pitch class summed over octaves 2..7 by direct DFT.
pub fn chroma_energy(x: &[f32], sample_rate: u32) -> [f64; 12] {
    let mut out = [0.0; 12];
    for midi in 36..96 {
        let f = 440.0 * 2f64.powf((midi as f64 - 69.0) / 12.0);
        out[midi % 12] += dft_magnitude(x, sample_rate, f).powi(2);
    }
    out
}

pub fn spec_with(key: Key, duration_s: f64, seed: u64) -> SynthSpec {
    SynthSpec::new(key, duration_s, seed)
}

/// Randomly initialised frozen encoder over the default 128-band frontend.
pub fn random_frozen(depth: usize, seed: u64) -> keyscope::encoder::FrozenEncoder {
    use keyscope::audio::{MelConfig, NormStats};
    use keyscope::encoder::{EncoderCheckpoint, FrozenEncoder};
    let cfg = EncoderConfig {
        embed_dim: 32,
        depth,
        heads: 4,
        mlp_dim: 64,
        n_mels: 128,
        patch_frames: 2,
    };
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Encoder::init(&cfg, &mut store, &mut rng).unwrap();
    // spread the weights so distinct inputs give clearly distinct embeddings
    for p in store.iter_mut() {
        if !p.name.contains("norm") {
            p.value = p.value.map(|x| x * 20.0);
        }
    }
    let meta = EncoderCheckpoint {
        encoder: cfg,
        mel: MelConfig::default(),
        norm: NormStats { mean: -6.0, std: 3.0 },
        pretrain: None,
        step: 0,
    };
    FrozenEncoder::new(meta, store).unwrap()
}
