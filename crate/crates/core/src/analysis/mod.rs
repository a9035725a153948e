//! Linear maps between clean and augmented embeddings.

use std::fmt;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{effects, pitch_shift, Waveform};
use crate::encoder::FrozenEncoder;
use crate::error::{invalid, Error, Result};
use crate::seed;

/// Waveform augmentations whose embedding-space action is measured.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Augmentation {
    PitchShift { semitones: i32 },
    Gain { db: f64 },
    Noise { snr_db: f64 },
    Lowpass { cutoff_hz: f64 },
    Highpass { cutoff_hz: f64 },
}

impl Augmentation {
    pub fn name(&self) -> &'static str {
        match self {
            Augmentation::PitchShift { .. } => "pitch_shift",
            Augmentation::Gain { .. } => "gain",
            Augmentation::Noise { .. } => "noise",
            Augmentation::Lowpass { .. } => "lowpass",
            Augmentation::Highpass { .. } => "highpass",
        }
    }

    pub fn params(&self) -> String {
        match *self {
            Augmentation::PitchShift { semitones } => format!("semitones={semitones}"),
            Augmentation::Gain { db } => format!("db={db}"),
            Augmentation::Noise { snr_db } => format!("snr_db={snr_db}"),
            Augmentation::Lowpass { cutoff_hz } | Augmentation::Highpass { cutoff_hz } => {
                format!("cutoff_hz={cutoff_hz}")
            }
        }
    }

    pub fn apply(&self, w: &Waveform, seed: u64) -> Result<Waveform> {
        match *self {
            Augmentation::PitchShift { semitones } => {
                pitch_shift(w, semitones, semitones.abs().max(6))
            }
            Augmentation::Gain { db } => effects::gain_db(w, db),
            Augmentation::Noise { snr_db } => effects::add_noise(w, snr_db, seed),
            Augmentation::Lowpass { cutoff_hz } => effects::lowpass(w, cutoff_hz),
            Augmentation::Highpass { cutoff_hz } => effects::highpass(w, cutoff_hz),
        }
    }

    /// Parses `pitch:+2`, `gain:-6`, `noise:20`, `lowpass:2000`, `highpass:300`.
    pub fn parse(text: &str) -> Result<Self> {
        let (kind, value) = text
            .split_once(':')
            .ok_or_else(|| invalid(format!("augmentation {text:?} is not kind:value")))?;
        let num = |v: &str| -> Result<f64> {
            v.trim()
                .parse::<f64>()
                .map_err(|_| invalid(format!("bad number in augmentation {text:?}")))
        };
        Ok(match kind.trim() {
            "pitch" | "pitch_shift" => {
                let n = num(value)?;
                if n.fract() != 0.0 {
                    return Err(invalid("pitch shift must be a whole number of semitones"));
                }
                Augmentation::PitchShift {
                    semitones: n as i32,
                }
            }
            "gain" => Augmentation::Gain { db: num(value)? },
            "noise" => Augmentation::Noise {
                snr_db: num(value)?,
            },
            "lowpass" => Augmentation::Lowpass {
                cutoff_hz: num(value)?,
            },
            "highpass" => Augmentation::Highpass {
                cutoff_hz: num(value)?,
            },
            other => return Err(invalid(format!("unknown augmentation {other:?}"))),
        })
    }
}

impl fmt::Display for Augmentation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({})", self.name(), self.params())
    }
}

/// Row-aligned clean (`x`) and augmented (`y`) embeddings.
#[derive(Debug, Clone)]
pub struct PairedEmbeddings {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
    pub augmentation: Option<Augmentation>,
}

impl PairedEmbeddings {
    pub fn new(
        x: Vec<Vec<f64>>,
        y: Vec<Vec<f64>>,
        augmentation: Option<Augmentation>,
    ) -> Result<Self> {
        if x.len() != y.len() || x.is_empty() {
            return Err(invalid(format!(
                "{} clean rows vs {} augmented rows",
                x.len(),
                y.len()
            )));
        }
        let d = x[0].len();
        if d == 0 || x.iter().chain(&y).any(|r| r.len() != d) {
            return Err(invalid("embedding rows differ in width"));
        }
        Ok(PairedEmbeddings { x, y, augmentation })
    }

    pub fn dim(&self) -> usize {
        self.x[0].len()
    }
}

/// `y ≈ x·W + b`.
#[derive(Debug, Clone)]
pub struct LinearMap {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl LinearMap {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let xv = DVector::from_column_slice(x);
        (self.weight.transpose() * xv + &self.bias)
            .iter()
            .copied()
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugMapReport {
    pub augmentation: String,
    pub params: String,
    pub ridge_lambda: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub train_mse: f64,
    pub test_mse: f64,
    pub train_cosine_distance: f64,
    pub test_cosine_distance: f64,
    pub identity_train_mse: f64,
    pub identity_test_mse: f64,
    pub identity_train_cosine_distance: f64,
    pub identity_test_cosine_distance: f64,
}

fn rows_to_matrix(rows: &[&Vec<f64>]) -> DMatrix<f64> {
    let d = rows[0].len();
    DMatrix::from_fn(rows.len(), d, |r, c| rows[r][c])
}

/// Mean squared error per coordinate and mean `1 − cos` over rows.
fn residuals(pred: &[Vec<f64>], target: &[&Vec<f64>]) -> (f64, f64) {
    let (mut se, mut cos, mut n) = (0.0, 0.0, 0usize);
    for (p, t) in pred.iter().zip(target) {
        for (a, b) in p.iter().zip(t.iter()) {
            se += (a - b) * (a - b);
            n += 1;
        }
        let dot: f64 = p.iter().zip(t.iter()).map(|(a, b)| a * b).sum();
        let np = p.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nt = t.iter().map(|a| a * a).sum::<f64>().sqrt();
        cos += if np > 0.0 && nt > 0.0 {
            1.0 - dot / (np * nt)
        } else {
            1.0
        };
    }
    (se / n.max(1) as f64, cos / pred.len().max(1) as f64)
}

/// Closed-form ridge solution of `min ‖XW + b − Y‖² + λ‖W‖²` (bias unpenalised).
/// `lambda = None` uses `1e-3 · trace(XᵀX) / d`.
pub fn ridge_fit(
    x: &[&Vec<f64>],
    y: &[&Vec<f64>],
    lambda: Option<f64>,
) -> Result<(LinearMap, f64)> {
    if x.is_empty() || x.len() != y.len() {
        return Err(invalid("ridge fit needs matching, non-empty row sets"));
    }
    let xm = rows_to_matrix(x);
    let ym = rows_to_matrix(y);
    let d = xm.ncols();
    let lambda = match lambda {
        Some(l) if l < 0.0 => return Err(invalid("ridge strength must be ≥ 0")),
        Some(l) => l,
        None => 1e-3 * xm.iter().map(|v| v * v).sum::<f64>() / d as f64,
    };
    let x_mean = xm.row_mean();
    let y_mean = ym.row_mean();
    let mut xc = xm.clone();
    let mut yc = ym.clone();
    for mut r in xc.row_iter_mut() {
        r -= &x_mean;
    }
    for mut r in yc.row_iter_mut() {
        r -= &y_mean;
    }
    let mut gram = xc.transpose() * &xc;
    for i in 0..d {
        gram[(i, i)] += lambda;
    }
    let rhs = xc.transpose() * &yc;
    let chol = gram.cholesky().ok_or(Error::Singular)?;
    let weight = chol.solve(&rhs);
    if weight.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular);
    }
    let bias = (y_mean - x_mean * &weight).transpose();
    Ok((LinearMap { weight, bias }, lambda))
}

/// Fits on a seeded 80% of rows and reports fitted and identity residuals on both parts.
pub fn fit_linear_map(
    pairs: &PairedEmbeddings,
    lambda: Option<f64>,
    seed: u64,
) -> Result<(LinearMap, AugMapReport)> {
    let n = pairs.x.len();
    if n < 2 {
        return Err(invalid("need at least two pairs to split 80/20"));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((0.8 * n as f64).round() as usize).clamp(1, n - 1);
    let (train, test) = idx.split_at(n_train);
    fn pick<'a>(rows: &'a [Vec<f64>], which: &[usize]) -> Vec<&'a Vec<f64>> {
        which.iter().map(|&i| &rows[i]).collect()
    }
    let (xtr, ytr) = (pick(&pairs.x, train), pick(&pairs.y, train));
    let (xte, yte) = (pick(&pairs.x, test), pick(&pairs.y, test));
    let (map, lambda) = ridge_fit(&xtr, &ytr, lambda)?;
    let predict = |xs: &[&Vec<f64>]| -> Vec<Vec<f64>> { xs.iter().map(|x| map.apply(x)).collect() };
    let identity =
        |xs: &[&Vec<f64>]| -> Vec<Vec<f64>> { xs.iter().map(|x| (*x).clone()).collect() };
    let (train_mse, train_cos) = residuals(&predict(&xtr), &ytr);
    let (test_mse, test_cos) = residuals(&predict(&xte), &yte);
    let (id_train_mse, id_train_cos) = residuals(&identity(&xtr), &ytr);
    let (id_test_mse, id_test_cos) = residuals(&identity(&xte), &yte);
    let (name, params) = pairs
        .augmentation
        .map(|a| (a.name().to_string(), a.params()))
        .unwrap_or_else(|| ("custom".into(), String::new()));
    Ok((
        map,
        AugMapReport {
            augmentation: name,
            params,
            ridge_lambda: lambda,
            n_train: train.len(),
            n_test: test.len(),
            train_mse,
            test_mse,
            train_cosine_distance: train_cos,
            test_cosine_distance: test_cos,
            identity_train_mse: id_train_mse,
            identity_test_mse: id_test_mse,
            identity_train_cosine_distance: id_train_cos,
            identity_test_cosine_distance: id_test_cos,
        },
    ))
}

/// First-window embedding of each clip, as f64.
fn embed_clips(
    encoder: &FrozenEncoder,
    clips: &[Waveform],
    context_len: usize,
) -> Result<Vec<Vec<f64>>> {
    let cropped: Vec<Waveform> = clips
        .iter()
        .map(|c| c.slice_padded(0, context_len))
        .collect();
    Ok(encoder
        .extract_many(&cropped, context_len)?
        .into_iter()
        .map(|w| w[0].iter().map(|&v| v as f64).collect())
        .collect())
}

/// Paired embeddings for each augmentation over the same clips.
pub fn paired_embeddings(
    clips: &[Waveform],
    encoder: &FrozenEncoder,
    augmentations: &[Augmentation],
    context_len: usize,
    seed: u64,
) -> Result<(Vec<Vec<f64>>, Vec<PairedEmbeddings>)> {
    let clean = embed_clips(encoder, clips, context_len)?;
    let mut out = Vec::with_capacity(augmentations.len());
    for (a, aug) in augmentations.iter().enumerate() {
        let augmented: Vec<Waveform> = clips
            .iter()
            .enumerate()
            .map(|(i, c)| aug.apply(c, seed::mix(seed, &[a as u64, i as u64])))
            .collect::<Result<_>>()?;
        let y = embed_clips(encoder, &augmented, context_len)?;
        out.push(PairedEmbeddings::new(clean.clone(), y, Some(*aug))?);
    }
    Ok((clean, out))
}

/// One report row per augmentation.
pub fn aug_linearity_report(
    clips: &[Waveform],
    encoder: &FrozenEncoder,
    augmentations: &[Augmentation],
    context_len: usize,
    lambda: Option<f64>,
    seed: u64,
) -> Result<Vec<AugMapReport>> {
    let (_, pairs) = paired_embeddings(clips, encoder, augmentations, context_len, seed)?;
    pairs
        .iter()
        .map(|p| fit_linear_map(p, lambda, seed).map(|(_, r)| r))
        .collect()
}

pub const REPORT_CSV_HEADER: &str = "augmentation,params,ridge_lambda,n_train,n_test,train_mse,test_mse,train_cosine_distance,test_cosine_distance,identity_train_mse,identity_test_mse,identity_train_cosine_distance,identity_test_cosine_distance";

pub fn write_report_csv(path: &Path, rows: &[AugMapReport]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{REPORT_CSV_HEADER}")?;
    for r in rows {
        writeln!(
            f,
            "{},{},{:e},{},{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            r.augmentation,
            r.params,
            r.ridge_lambda,
            r.n_train,
            r.n_test,
            r.train_mse,
            r.test_mse,
            r.train_cosine_distance,
            r.test_cosine_distance,
            r.identity_train_mse,
            r.identity_test_mse,
            r.identity_train_cosine_distance,
            r.identity_test_cosine_distance
        )?;
    }
    f.flush()?;
    Ok(())
}

/// Projection of clean and augmented rows onto the top two principal components
/// of their union: `(clip, pc1, pc2, is_augmented)`.
pub fn pca_coordinates(pairs: &PairedEmbeddings) -> Result<Vec<(usize, f64, f64, bool)>> {
    let rows: Vec<&Vec<f64>> = pairs.x.iter().chain(&pairs.y).collect();
    let mut m = rows_to_matrix(&rows);
    let mean = m.row_mean();
    for mut r in m.row_iter_mut() {
        r -= &mean;
    }
    let svd = m.clone().svd(false, true);
    let vt = svd.v_t.ok_or(Error::Singular)?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let comps: Vec<DVector<f64>> = order
        .iter()
        .take(2)
        .map(|&k| vt.row(k).transpose().into_owned())
        .collect();
    if comps.len() < 2 {
        return Err(invalid("need at least two dimensions for a 2-D projection"));
    }
    let n = pairs.x.len();
    Ok((0..rows.len())
        .map(|r| {
            let row = m.row(r).transpose();
            (r % n, row.dot(&comps[0]), row.dot(&comps[1]), r >= n)
        })
        .collect())
}

pub fn write_coordinates_csv(path: &Path, coords: &[(usize, f64, f64, bool)]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "clip_id,pc1,pc2,is_augmented")?;
    for (c, a, b, aug) in coords {
        writeln!(f, "{c},{a},{b},{aug}")?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn random_rows(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect()
    }

    #[test]
    fn identity_and_scaling_maps() {
        let x = random_rows(60, 5, 1);
        let same = PairedEmbeddings::new(x.clone(), x.clone(), None).unwrap();
        let (map, rep) = fit_linear_map(&same, Some(1e-9), 0).unwrap();
        assert!(rep.test_mse < 1e-12 && rep.identity_test_mse == 0.0);
        assert!((map.weight.clone() - DMatrix::identity(5, 5)).norm() < 1e-6);
        let doubled: Vec<Vec<f64>> = x
            .iter()
            .map(|r| r.iter().map(|v| 2.0 * v).collect())
            .collect();
        let pairs = PairedEmbeddings::new(x, doubled, None).unwrap();
        let (map, _) = fit_linear_map(&pairs, Some(1e-9), 0).unwrap();
        assert!((map.weight - DMatrix::identity(5, 5) * 2.0).norm() < 1e-6);
    }

    #[test]
    fn unregularised_rank_deficient_is_singular() {
        let x = vec![vec![1.0, 2.0, 3.0]; 10];
        let pairs = PairedEmbeddings::new(x.clone(), x, None).unwrap();
        assert!(matches!(
            fit_linear_map(&pairs, Some(0.0), 0),
            Err(Error::Singular)
        ));
    }

    #[test]
    fn augmentation_parsing() {
        assert_eq!(
            Augmentation::parse("pitch:+2").unwrap(),
            Augmentation::PitchShift { semitones: 2 }
        );
        assert_eq!(
            Augmentation::parse("gain:-6").unwrap(),
            Augmentation::Gain { db: -6.0 }
        );
        assert!(Augmentation::parse("reverb:1").is_err());
        assert!(Augmentation::parse("pitch:1.5").is_err());
    }

    #[test]
    fn pca_shape() {
        let x = random_rows(10, 4, 2);
        let y = random_rows(10, 4, 3);
        let coords = pca_coordinates(&PairedEmbeddings::new(x, y, None).unwrap()).unwrap();
        assert_eq!(coords.len(), 20);
        assert!(coords[..10].iter().all(|c| !c.3) && coords[10..].iter().all(|c| c.3));
    }
}
