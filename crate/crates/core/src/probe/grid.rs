use std::io::Write;
use std::path::Path;

use super::{train_probe, LabeledFeature, ProbeArch, TrainConfig};
use crate::error::Result;
use crate::keyeval::Relation;
use crate::par;

pub const GRID_CSV_HEADER: &str = "rank,hidden_layers,hidden_dim,dropout,batch_size,learning_rate,weight_decay,mixup,seed,best_epoch,val_weighted,val_correct,status";

#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub arch: ProbeArch,
    pub config: TrainConfig,
    pub best_epoch: Option<usize>,
    pub val_weighted: Option<f64>,
    pub val_correct: Option<f64>,
    /// `ok`, or `failed: <reason>` for runs that errored (e.g. diverged).
    pub status: String,
}

/// Trains every (arch, config) cell and ranks by validation weighted score.
/// Failed cells are kept as rows and sorted last.
pub fn grid_search(
    train: &[LabeledFeature],
    val: &[LabeledFeature],
    archs: &[ProbeArch],
    configs: &[TrainConfig],
) -> Vec<GridRow> {
    let cells: Vec<(&ProbeArch, &TrainConfig)> = archs
        .iter()
        .flat_map(|a| configs.iter().map(move |c| (a, c)))
        .collect();
    let mut rows = par::map(&cells, |&(arch, config)| {
        let base = GridRow {
            arch: arch.clone(),
            config: config.clone(),
            best_epoch: None,
            val_weighted: None,
            val_correct: None,
            status: String::new(),
        };
        match train_probe(train, val, arch, config) {
            Ok(t) => GridRow {
                best_epoch: Some(t.best_epoch),
                val_weighted: Some(t.best_val.weighted),
                val_correct: Some(t.best_val.percent(Relation::Correct)),
                status: "ok".into(),
                ..base
            },
            Err(e) => {
                log::warn!(
                    "grid cell {} / {} failed: {e}",
                    arch.label(),
                    config.label()
                );
                GridRow {
                    status: format!("failed: {e}"),
                    ..base
                }
            }
        }
    });
    rows.sort_by(|a, b| {
        let key = |r: &GridRow| r.val_weighted.unwrap_or(f64::NEG_INFINITY);
        key(b).total_cmp(&key(a))
    });
    rows
}

pub fn write_grid_csv(path: &Path, rows: &[GridRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{GRID_CSV_HEADER}")?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
    for (i, r) in rows.iter().enumerate() {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            i + 1,
            r.arch.hidden_layers,
            r.arch.hidden_dim,
            r.arch.dropout,
            r.config.batch_size,
            r.config.learning_rate,
            r.config.weight_decay,
            r.config.mixup.is_some(),
            r.config.seed,
            r.best_epoch.map(|e| e.to_string()).unwrap_or_default(),
            opt(r.val_weighted),
            opt(r.val_correct),
            r.status.replace([',', '\n'], ";"),
        )?;
    }
    f.flush()?;
    Ok(())
}
