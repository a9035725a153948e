//! Key labels, the weighted key-relationship taxonomy, and track-level scoring.

mod annotations;
mod key;

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

pub use annotations::{
    load_giantsteps_dir, read_key_file, read_key_manifest, write_key_manifest, ManifestEntry,
};
pub use key::{parse_key, transpose_key, Key, Mode, NUM_CLASSES};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relation {
    Correct,
    Fifth,
    Relative,
    Parallel,
    Other,
}

impl Relation {
    pub const ALL: [Relation; 5] = [
        Relation::Correct,
        Relation::Fifth,
        Relation::Relative,
        Relation::Parallel,
        Relation::Other,
    ];

    pub fn weight(self) -> f64 {
        match self {
            Relation::Correct => 1.0,
            Relation::Fifth => 0.5,
            Relation::Relative => 0.3,
            Relation::Parallel => 0.2,
            Relation::Other => 0.0,
        }
    }

    fn slot(self) -> usize {
        self as usize
    }
}

/// Which fifth errors get partial credit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FifthRule {
    /// Estimate a perfect fifth above the reference only.
    #[default]
    Ascending,
    /// A fifth above or below.
    BothDirections,
}

pub fn classify_relation(reference: Key, estimate: Key) -> Relation {
    classify_relation_with(reference, estimate, FifthRule::Ascending)
}

pub fn classify_relation_with(reference: Key, estimate: Key, rule: FifthRule) -> Relation {
    if reference == estimate {
        return Relation::Correct;
    }
    if reference.mode() == estimate.mode() {
        let up = reference.transpose(7) == estimate;
        let down = reference.transpose(-7) == estimate;
        if up || (rule == FifthRule::BothDirections && down) {
            return Relation::Fifth;
        }
        return Relation::Other;
    }
    if reference.relative() == estimate {
        Relation::Relative
    } else if reference.tonic() == estimate.tonic() {
        Relation::Parallel
    } else {
        Relation::Other
    }
}

/// `correct + 0.5·fifth + 0.3·relative + 0.2·parallel`, all in percent.
pub fn weighted_score(correct: f64, fifth: f64, relative: f64, parallel: f64) -> f64 {
    correct
        + Relation::Fifth.weight() * fifth
        + Relation::Relative.weight() * relative
        + Relation::Parallel.weight() * parallel
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_tracks: usize,
    pub counts: [usize; 5],
    pub weighted: f64,
}

impl EvalReport {
    pub fn from_counts(counts: [usize; 5]) -> EvalReport {
        let n_tracks = counts.iter().sum();
        let mut report = EvalReport {
            n_tracks,
            counts,
            weighted: 0.0,
        };
        report.weighted = weighted_score(
            report.percent(Relation::Correct),
            report.percent(Relation::Fifth),
            report.percent(Relation::Relative),
            report.percent(Relation::Parallel),
        );
        report
    }

    pub fn count(&self, r: Relation) -> usize {
        self.counts[r.slot()]
    }

    pub fn percent(&self, r: Relation) -> f64 {
        if self.n_tracks == 0 {
            return 0.0;
        }
        100.0 * self.count(r) as f64 / self.n_tracks as f64
    }

    pub const CSV_HEADER: &'static str =
        "model,weighted,correct,fifth,relative,parallel,other,n_tracks";

    pub fn csv_row(&self, model: &str) -> String {
        let p = |r| format!("{:.2}", self.percent(r));
        format!(
            "{},{:.2},{},{},{},{},{},{}",
            model,
            self.weighted,
            p(Relation::Correct),
            p(Relation::Fifth),
            p(Relation::Relative),
            p(Relation::Parallel),
            p(Relation::Other),
            self.n_tracks
        )
    }

    pub fn write_csv<W: Write>(&self, mut out: W, model: &str) -> std::io::Result<()> {
        writeln!(out, "{}", Self::CSV_HEADER)?;
        writeln!(out, "{}", self.csv_row(model))
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:>9} {:>8} {:>8} {:>9} {:>9} {:>8}",
            "Weighted", "Correct", "Fifth", "Relative", "Parallel", "Other"
        )?;
        writeln!(
            f,
            "{:>9.2} {:>8.2} {:>8.2} {:>9.2} {:>9.2} {:>8.2}",
            self.weighted,
            self.percent(Relation::Correct),
            self.percent(Relation::Fifth),
            self.percent(Relation::Relative),
            self.percent(Relation::Parallel),
            self.percent(Relation::Other)
        )?;
        write!(f, "({} tracks)", self.n_tracks)
    }
}

pub fn evaluate(predictions: &[Key], references: &[Key]) -> Result<EvalReport> {
    evaluate_with(predictions, references, FifthRule::Ascending)
}

pub fn evaluate_with(
    predictions: &[Key],
    references: &[Key],
    rule: FifthRule,
) -> Result<EvalReport> {
    if predictions.len() != references.len() {
        return Err(invalid(format!(
            "{} predictions for {} references",
            predictions.len(),
            references.len()
        )));
    }
    if predictions.is_empty() {
        return Err(invalid("nothing to evaluate"));
    }
    let mut counts = [0usize; 5];
    for (&est, &reference) in predictions.iter().zip(references) {
        counts[classify_relation_with(reference, est, rule).slot()] += 1;
    }
    Ok(EvalReport::from_counts(counts))
}

/// Softmax of a logit row, computed in f64.
pub fn softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits
        .iter()
        .fold(f64::NEG_INFINITY, |m, &x| m.max(x as f64));
    let exps: Vec<f64> = logits.iter().map(|&x| (x as f64 - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Mean of per-window probability vectors followed by argmax (lowest index wins ties).
pub fn average_probabilities(window_probs: &[Vec<f64>]) -> Result<Key> {
    let first = window_probs
        .first()
        .ok_or_else(|| invalid("track has no windows"))?;
    let mut mean = vec![0.0f64; first.len()];
    for probs in window_probs {
        if probs.len() != mean.len() {
            return Err(invalid("windows disagree on class count"));
        }
        for (m, p) in mean.iter_mut().zip(probs) {
            *m += p;
        }
    }
    let n = window_probs.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    let mut best = 0;
    for (i, &m) in mean.iter().enumerate() {
        if m > mean[best] {
            best = i;
        }
    }
    Key::from_class_index(best)
}

/// Track-level key from per-window classifier logits.
pub fn predict_from_logits(window_logits: &[Vec<f32>]) -> Result<Key> {
    let probs: Vec<Vec<f64>> = window_logits.iter().map(|l| softmax(l)).collect();
    average_probabilities(&probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn relation_examples() {
        let c = Key::major(0);
        assert_eq!(classify_relation(c, Key::major(7)), Relation::Fifth);
        assert_eq!(classify_relation(c, Key::minor(9)), Relation::Relative);
        assert_eq!(classify_relation(Key::minor(9), c), Relation::Relative);
        assert_eq!(classify_relation(c, Key::minor(0)), Relation::Parallel);
        assert_eq!(classify_relation(c, Key::major(2)), Relation::Other);
        assert_eq!(classify_relation(c, c), Relation::Correct);
        // a fifth below is only credited in both-directions mode
        assert_eq!(classify_relation(c, Key::major(5)), Relation::Other);
        assert_eq!(
            classify_relation_with(c, Key::major(5), FifthRule::BothDirections),
            Relation::Fifth
        );
    }

    #[test]
    fn table_rows() {
        assert!((weighted_score(72.02, 3.48, 3.64, 5.30) - 75.91).abs() < 0.01);
        assert!((weighted_score(79.87, 4.55, 6.49, 1.30) - 84.35).abs() < 0.01);
        assert!((weighted_score(45.36, 20.69, 6.79, 7.78) - 59.30).abs() < 0.01);
    }

    #[test]
    fn perfect_and_fifth_predictions() {
        let refs: Vec<Key> = Key::all().collect();
        let r = evaluate(&refs, &refs).unwrap();
        assert_eq!(r.weighted, 100.0);
        assert_eq!(r.percent(Relation::Other), 0.0);
        let fifths: Vec<Key> = refs.iter().map(|k| k.transpose(7)).collect();
        let r = evaluate(&fifths, &refs).unwrap();
        assert!((r.weighted - 50.0).abs() < 1e-12);
    }

    #[test]
    fn hand_counted_ten_tracks() {
        // 4 correct, 2 fifth, 1 relative, 1 parallel, 2 other
        let refs = vec![
            Key::major(0),
            Key::minor(2),
            Key::major(7),
            Key::minor(11),
            Key::major(5),
            Key::minor(4),
            Key::major(3),
            Key::minor(6),
            Key::major(10),
            Key::minor(1),
        ];
        let est = vec![
            Key::major(0),
            Key::minor(2),
            Key::major(7),
            Key::minor(11),
            Key::major(0),
            Key::minor(11),
            Key::minor(0),
            Key::major(6),
            Key::major(11),
            Key::major(8),
        ];
        let r = evaluate(&est, &refs).unwrap();
        assert_eq!(r.counts, [4, 2, 1, 1, 2]);
        // 40 + 0.5·20 + 0.3·10 + 0.2·10
        assert!((r.weighted - 55.0).abs() < 1e-9);
    }

    #[test]
    fn length_mismatch_rejected() {
        assert!(evaluate(&[Key::major(0)], &[]).is_err());
        assert!(evaluate(&[], &[]).is_err());
    }

    #[test]
    fn window_averaging() {
        let single = vec![vec![0.1f32, 3.0, -1.0]];
        assert_eq!(predict_from_logits(&single).unwrap().class_index(), 1);
        assert!(predict_from_logits(&[]).is_err());

        let peaked = |c: usize| {
            let mut p = vec![0.4 / 23.0; 24];
            p[c] = 0.6;
            p
        };
        let a = peaked(2);
        let b = peaked(5);
        let manual: Vec<f64> = a.iter().zip(&b).map(|(x, y)| (x + y) / 2.0).collect();
        let mut best = 0;
        for i in 0..24 {
            if manual[i] > manual[best] {
                best = i;
            }
        }
        let key = average_probabilities(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(key.class_index(), best);
        // exact tie between classes 2 and 5 resolves to the lower index
        assert_eq!(best, 2);
        assert_eq!(average_probabilities(&[b, a]).unwrap(), key);
    }

    #[test]
    fn report_percentages_sum_to_100() {
        let r = EvalReport::from_counts([3, 1, 1, 0, 2]);
        let total: f64 = Relation::ALL.iter().map(|&c| r.percent(c)).sum();
        assert!((total - 100.0).abs() < 0.01);
        assert!(r.weighted >= r.percent(Relation::Correct));
        let mut buf = Vec::new();
        r.write_csv(&mut buf, "m").unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with(EvalReport::CSV_HEADER));
        assert!(text.ends_with(",7\n"));
    }

    proptest! {
        #[test]
        fn category_invariant_under_joint_transposition(a in 0usize..24, b in 0usize..24, n in 0i32..12) {
            let r = Key::from_class_index(a).unwrap();
            let e = Key::from_class_index(b).unwrap();
            prop_assert_eq!(classify_relation(r, e), classify_relation(r.transpose(n), e.transpose(n)));
        }

        #[test]
        fn weighted_sensitivities(c in 0.0f64..100.0, f in 0.0f64..100.0, r in 0.0f64..100.0, p in 0.0f64..100.0, d in 0.0f64..10.0) {
            let base = weighted_score(c, f, r, p);
            prop_assert!(base >= c);
            prop_assert!((weighted_score(c + d, f, r, p) - base - d).abs() < 1e-9);
            prop_assert!((weighted_score(c, f + d, r, p) - base - 0.5 * d).abs() < 1e-9);
            prop_assert!((weighted_score(c, f, r + d, p) - base - 0.3 * d).abs() < 1e-9);
            prop_assert!((weighted_score(c, f, r, p + d) - base - 0.2 * d).abs() < 1e-9);
        }

        #[test]
        fn prediction_invariant_to_window_order(seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut windows: Vec<Vec<f32>> = (0..4)
                .map(|_| (0..24).map(|_| rng.random::<f32>() * 4.0).collect())
                .collect();
            let k = predict_from_logits(&windows).unwrap();
            windows.reverse();
            prop_assert_eq!(predict_from_logits(&windows).unwrap(), k);
        }
    }
}
