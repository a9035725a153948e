use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    assert_disjoint_tracks, group_windows, mixup_batch, one_hot, LabeledFeature, Probe, ProbeArch,
    TrainConfig,
};
use crate::error::{invalid, Result};
use crate::keyeval::{evaluate, predict_from_logits, softmax, EvalReport, Key};
use crate::seed;
use crate::tensor::{AdamConfig, Graph, OptimState, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_weighted: f64,
    pub val_correct: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedProbe {
    pub probe: Probe,
    pub best_epoch: usize,
    pub best_val: EvalReport,
    pub best_val_loss: f64,
    pub history: Vec<EpochRecord>,
}

/// Track-level report from window-averaged probabilities, plus the mean
/// per-window cross entropy.
pub fn evaluate_probe(probe: &Probe, features: &[LabeledFeature]) -> Result<(EvalReport, f64)> {
    if features.is_empty() {
        return Err(invalid("no features to evaluate"));
    }
    let rows: Vec<&[f32]> = features.iter().map(|f| f.embedding.as_slice()).collect();
    let logits = probe.logits(&rows)?;
    let mut loss = 0.0;
    for (l, f) in logits.iter().zip(features) {
        loss -= softmax(l)[f.class].max(f64::MIN_POSITIVE).ln();
    }
    let groups = group_windows(features)?;
    let mut predictions = Vec::with_capacity(groups.len());
    let mut references = Vec::with_capacity(groups.len());
    for g in &groups {
        let window_logits: Vec<Vec<f32>> = g.rows.iter().map(|&r| logits[r].clone()).collect();
        predictions.push(predict_from_logits(&window_logits)?);
        references.push(Key::from_class_index(g.class)?);
    }
    Ok((
        evaluate(&predictions, &references)?,
        loss / features.len() as f64,
    ))
}

fn check_features(features: &[LabeledFeature], arch: &ProbeArch, what: &str) -> Result<()> {
    if features.is_empty() {
        return Err(invalid(format!("{what} split is empty")));
    }
    for f in features {
        if f.class >= arch.classes {
            return Err(invalid(format!(
                "label {} outside 0..{}",
                f.class, arch.classes
            )));
        }
        if f.embedding.len() != arch.input_dim {
            return Err(invalid(format!(
                "{what} feature of width {}, probe expects {}",
                f.embedding.len(),
                arch.input_dim
            )));
        }
    }
    Ok(())
}

/// Cross-entropy training with per-epoch validation; returns the best epoch's weights.
/// An epoch counts as better if its weighted score is higher, or equal with lower loss.
pub fn train_probe(
    train: &[LabeledFeature],
    val: &[LabeledFeature],
    arch: &ProbeArch,
    cfg: &TrainConfig,
) -> Result<TrainedProbe> {
    arch.validate()?;
    cfg.validate()?;
    check_features(train, arch, "training")?;
    check_features(val, arch, "validation")?;
    assert_disjoint_tracks(&[train, val])?;

    let mut probe = Probe::<f32>::build(arch, cfg.seed)?;
    let mut optim = OptimState::new(
        probe.store(),
        AdamConfig::new(cfg.learning_rate, cfg.weight_decay),
    )?;
    let targets: Vec<Vec<f32>> = train
        .iter()
        .map(|f| one_hot(f.class, arch.classes))
        .collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, "probe.shuffle"));
    let step_seed = seed::derive(cfg.seed, "probe.steps");

    let mut history = Vec::new();
    let mut best: Option<(usize, EvalReport, f64, Probe)> = None;
    let mut since_best = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let s = seed::mix(step_seed, &[epoch as u64, b as u64]);
            let xs: Vec<Vec<f32>> = batch.iter().map(|&i| train[i].embedding.clone()).collect();
            let ys: Vec<Vec<f32>> = batch.iter().map(|&i| targets[i].clone()).collect();
            let (xs, ys) = match cfg.mixup {
                Some(m) if batch.len() >= 2 => {
                    let mixed = mixup_batch(&xs, &ys, m, s)?;
                    (mixed.features, mixed.targets)
                }
                _ => (xs, ys),
            };
            let x = Tensor::new(vec![xs.len(), arch.input_dim], xs.concat())?;
            let y = Tensor::new(vec![ys.len(), arch.classes], ys.concat())?;
            let grads = {
                let mut g = Graph::new(probe.store(), true);
                let xv = g.input(x);
                let logits = probe.forward(&mut g, xv, seed::mix(s, &[7]))?;
                let loss = g.softmax_cross_entropy(logits, y)?;
                total += g.value(loss).item() as f64 * batch.len() as f64;
                g.backward(loss)?
            };
            probe.store_mut().accumulate(&grads)?;
            optim.step(probe.store_mut())?;
        }
        let (report, val_loss) = evaluate_probe(&probe, val)?;
        history.push(EpochRecord {
            epoch,
            train_loss: total / train.len() as f64,
            val_loss,
            val_weighted: report.weighted,
            val_correct: report.percent(crate::keyeval::Relation::Correct),
        });
        let better = match &best {
            None => true,
            Some((_, r, l, _)) => {
                report.weighted > r.weighted || (report.weighted == r.weighted && val_loss < *l)
            }
        };
        if better {
            best = Some((epoch, report, val_loss, probe.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                log::debug!("early stop after epoch {epoch}");
                break;
            }
        }
    }
    let (best_epoch, best_val, best_val_loss, probe) = best.expect("at least one epoch ran");
    Ok(TrainedProbe {
        probe,
        best_epoch,
        best_val,
        best_val_loss,
        history,
    })
}
