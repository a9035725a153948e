//! Linear and shallow-wide MLP heads on frozen embeddings.

mod data;
mod grid;
mod model;
mod train;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::encoder::EMBED_DIM;
use crate::error::{invalid, Error, Result};
use crate::keyeval::NUM_CLASSES;

pub use data::{
    assert_disjoint_tracks, expand_with_shifts, for_each_variant, group_windows, split_track_ids,
    LabeledFeature, Track, TrackAudio, TrackGroup,
};
pub use grid::{grid_search, write_grid_csv, GridRow, GRID_CSV_HEADER};
pub use model::{Probe, PROBE_KIND};
pub use train::{evaluate_probe, train_probe, EpochRecord, TrainedProbe};

pub const HIDDEN_DIMS: [usize; 4] = [1024, 2048, 4096, 8192];
pub const DROPOUTS: [f64; 4] = [0.75, 0.9, 0.95, 0.99];
pub const BATCH_SIZES: [usize; 5] = [32, 64, 128, 256, 512];
pub const LEARNING_RATES: [f64; 4] = [1e-4, 3e-4, 1e-3, 3e-3];
pub const WEIGHT_DECAYS: [f64; 4] = [1e-5, 1e-4, 1e-3, 1e-2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeArch {
    /// 0 is a linear probe.
    pub hidden_layers: usize,
    pub hidden_dim: usize,
    pub dropout: f64,
    pub input_dim: usize,
    pub classes: usize,
}

impl Default for ProbeArch {
    fn default() -> Self {
        Self::bb_reference()
    }
}

impl ProbeArch {
    pub fn mlp(hidden_layers: usize, hidden_dim: usize, dropout: f64) -> Self {
        ProbeArch {
            hidden_layers,
            hidden_dim,
            dropout,
            input_dim: EMBED_DIM,
            classes: NUM_CLASSES,
        }
    }

    pub fn linear() -> Self {
        Self::mlp(0, 0, 0.0)
    }

    /// 384 → 4096 → ReLU → dropout 0.99 → 4096 → ReLU → 24.
    pub fn gs_reference() -> Self {
        Self::mlp(2, 4096, 0.99)
    }

    /// 384 → 2048 → ReLU → dropout 0.75 → 24.
    pub fn bb_reference() -> Self {
        Self::mlp(1, 2048, 0.75)
    }

    pub fn is_linear(&self) -> bool {
        self.hidden_layers == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_layers > 2 {
            return Err(Error::Config(format!(
                "{} hidden layers (max 2)",
                self.hidden_layers
            )));
        }
        if self.hidden_layers == 2 && self.hidden_dim == 8192 {
            return Err(Error::Config(
                "2-layer, 8192-wide probes are excluded".into(),
            ));
        }
        if self.input_dim == 0
            || self.classes == 0
            || (self.hidden_layers > 0 && self.hidden_dim == 0)
        {
            return Err(Error::Config("probe dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.hidden_layers == 0 && self.dropout != 0.0 {
            return Err(Error::Config("a linear probe has no dropout".into()));
        }
        Ok(())
    }

    /// Widths from input to output, e.g. `[384, 2048, 24]`.
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim];
        dims.extend(std::iter::repeat_n(self.hidden_dim, self.hidden_layers));
        dims.push(self.classes);
        dims
    }

    /// Closed-form weight + bias count.
    pub fn param_count(&self) -> usize {
        self.layer_dims()
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    pub fn label(&self) -> String {
        if self.is_linear() {
            "linear".into()
        } else {
            format!(
                "mlp{}x{}-p{}",
                self.hidden_layers, self.hidden_dim, self.dropout
            )
        }
    }
}

/// The 28 MLP settings: {1, 2} layers × 4 widths × 4 dropouts, minus 2 × 8192.
pub fn arch_grid() -> Vec<ProbeArch> {
    let mut out = Vec::new();
    for layers in [1, 2] {
        for dim in HIDDEN_DIMS {
            if layers == 2 && dim == 8192 {
                continue;
            }
            for p in DROPOUTS {
                out.push(ProbeArch::mlp(layers, dim, p));
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixupParams {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for MixupParams {
    fn default() -> Self {
        MixupParams {
            alpha: 2.0,
            beta: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub mixup: Option<MixupParams>,
    pub epochs: usize,
    /// Stop after this many epochs without a better validation score.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            mixup: None,
            epochs: 200,
            patience: 20,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config(
                "batch_size and epochs must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config(
                "need learning_rate > 0 and weight_decay ≥ 0".into(),
            ));
        }
        if let Some(m) = self.mixup {
            if !(m.alpha > 0.0 && m.beta > 0.0) {
                return Err(Error::Config(
                    "MixUp Beta parameters must be positive".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        format!(
            "bs{}-lr{}-wd{}-{}",
            self.batch_size,
            self.learning_rate,
            self.weight_decay,
            if self.mixup.is_some() {
                "mixup"
            } else {
                "plain"
            }
        )
    }
}

/// The 160 optimiser settings: 5 batch sizes × 4 lrs × 4 weight decays × MixUp on/off.
pub fn optimizer_grid(epochs: usize, patience: usize, seed: u64) -> Vec<TrainConfig> {
    let mut out = Vec::new();
    for batch_size in BATCH_SIZES {
        for learning_rate in LEARNING_RATES {
            for weight_decay in WEIGHT_DECAYS {
                for mixup in [None, Some(MixupParams::default())] {
                    out.push(TrainConfig {
                        batch_size,
                        learning_rate,
                        weight_decay,
                        mixup,
                        epochs,
                        patience,
                        seed,
                    });
                }
            }
        }
    }
    out
}

/// A mixed mini-batch: `x̃ᵢ = λᵢ·xᵢ + (1−λᵢ)·x_{perm(i)}`, labels likewise.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedBatch {
    pub features: Vec<Vec<f32>>,
    pub targets: Vec<Vec<f32>>,
    pub lambdas: Vec<f64>,
    pub perm: Vec<usize>,
}

/// Mixes with explicit weights and partners.
pub fn mixup_with(
    features: &[Vec<f32>],
    targets: &[Vec<f32>],
    lambdas: &[f64],
    perm: &[usize],
) -> Result<MixedBatch> {
    let n = features.len();
    if targets.len() != n || lambdas.len() != n || perm.len() != n {
        return Err(invalid("mixup inputs have different lengths"));
    }
    let mix = |rows: &[Vec<f32>]| -> Result<Vec<Vec<f32>>> {
        (0..n)
            .map(|i| {
                let (a, b) = (
                    &rows[i],
                    rows.get(perm[i])
                        .ok_or_else(|| invalid("bad permutation"))?,
                );
                let l = lambdas[i] as f32;
                Ok(a.iter()
                    .zip(b)
                    .map(|(&x, &y)| l * x + (1.0 - l) * y)
                    .collect())
            })
            .collect()
    };
    Ok(MixedBatch {
        features: mix(features)?,
        targets: mix(targets)?,
        lambdas: lambdas.to_vec(),
        perm: perm.to_vec(),
    })
}

/// MixUp with `λ ~ Beta(α, β)` per row and a random partner permutation.
pub fn mixup_batch(
    features: &[Vec<f32>],
    targets: &[Vec<f32>],
    params: MixupParams,
    seed: u64,
) -> Result<MixedBatch> {
    if features.len() < 2 {
        return Err(invalid("MixUp needs a batch of at least two"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let beta = Beta::new(params.alpha, params.beta).map_err(|e| invalid(e.to_string()))?;
    let lambdas: Vec<f64> = (0..features.len()).map(|_| beta.sample(&mut rng)).collect();
    let mut perm: Vec<usize> = (0..features.len()).collect();
    perm.shuffle(&mut rng);
    mixup_with(features, targets, &lambdas, &perm)
}

pub fn one_hot(class: usize, classes: usize) -> Result<Vec<f32>> {
    if class >= classes {
        return Err(invalid(format!("label {class} outside 0..{classes}")));
    }
    let mut v = vec![0.0; classes];
    v[class] = 1.0;
    Ok(v)
}
