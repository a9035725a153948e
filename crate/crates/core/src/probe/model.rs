use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ProbeArch;
use crate::error::{Error, Result};
use crate::keyeval::{predict_from_logits, Key};
use crate::seed;
use crate::tensor::checkpoint::{load_checkpoint, save_checkpoint};
use crate::tensor::{trunc_normal, Graph, ParamId, ParamStore, Scalar, Tensor, Var, INIT_STD};

pub const PROBE_KIND: &str = "probe";

/// Rows per forward pass at inference.
const EVAL_BATCH: usize = 1024;

/// MLP (or linear) classification head over frozen embeddings.
#[derive(Debug, Clone)]
pub struct Probe<T: Scalar = f32> {
    arch: ProbeArch,
    store: ParamStore<T>,
    layers: Vec<(ParamId, ParamId)>,
}

impl<T: Scalar> Probe<T> {
    pub fn build(arch: &ProbeArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, "probe.init"));
        let mut store = ParamStore::new();
        let dims = arch.layer_dims();
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                (
                    store.add(
                        format!("probe.layers.{i}.weight"),
                        trunc_normal(&[w[0], w[1]], INIT_STD, &mut rng),
                    ),
                    store.add(format!("probe.layers.{i}.bias"), Tensor::zeros(&[w[1]])),
                )
            })
            .collect();
        Ok(Probe {
            arch: arch.clone(),
            store,
            layers,
        })
    }

    pub fn from_store(arch: &ProbeArch, store: ParamStore<T>) -> Result<Self> {
        arch.validate()?;
        let dims = arch.layer_dims();
        let mut layers = Vec::new();
        for (i, w) in dims.windows(2).enumerate() {
            let find = |name: String, shape: &[usize]| -> Result<ParamId> {
                let id = store
                    .find(&name)
                    .ok_or_else(|| Error::CheckpointMismatch(format!("missing tensor {name}")))?;
                if store.value(id).shape() != shape {
                    return Err(Error::CheckpointMismatch(format!("{name}: wrong shape")));
                }
                Ok(id)
            };
            layers.push((
                find(format!("probe.layers.{i}.weight"), &[w[0], w[1]])?,
                find(format!("probe.layers.{i}.bias"), &[w[1]])?,
            ));
        }
        if store.len() != 2 * layers.len() {
            return Err(Error::CheckpointMismatch(
                "unexpected extra probe tensors".into(),
            ));
        }
        Ok(Probe {
            arch: arch.clone(),
            store,
            layers,
        })
    }

    pub fn arch(&self) -> &ProbeArch {
        &self.arch
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_elements()
    }

    /// Logits `[batch × classes]`. Dropout follows the first hidden ReLU only
    /// and is active only on a training graph.
    pub fn forward(&self, g: &mut Graph<'_, T>, x: Var, dropout_seed: u64) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let wv = g.param(w);
            let bv = g.param(b);
            h = g.matmul(h, wv)?;
            h = g.add_row(h, bv)?;
            if i < last {
                h = g.relu(h)?;
                if i == 0 {
                    h = g.dropout(h, self.arch.dropout, dropout_seed)?;
                }
            }
        }
        Ok(h)
    }
}

impl Probe<f32> {
    /// Eval-mode logits, one row per input.
    pub fn logits(&self, rows: &[&[f32]]) -> Result<Vec<Vec<f32>>> {
        let d = self.arch.input_dim;
        let mut out = Vec::with_capacity(rows.len());
        for chunk in rows.chunks(EVAL_BATCH) {
            let mut data = Vec::with_capacity(chunk.len() * d);
            for r in chunk {
                if r.len() != d {
                    return Err(Error::Shape {
                        op: "probe",
                        detail: format!("feature of width {}, expected {d}", r.len()),
                    });
                }
                data.extend_from_slice(r);
            }
            let mut g = Graph::new(&self.store, false);
            let x = g.input(Tensor::new(vec![chunk.len(), d], data)?);
            let y = self.forward(&mut g, x, 0)?;
            let v = g.value(y);
            out.extend((0..v.rows()).map(|r| v.row(r).to_vec()));
        }
        Ok(out)
    }

    /// Window-averaged track prediction.
    pub fn predict_track(&self, windows: &[&[f32]]) -> Result<Key> {
        predict_from_logits(&self.logits(windows)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_checkpoint(dir, PROBE_KIND, &self.arch, &self.store, "probe.")
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (arch, store) = load_checkpoint::<ProbeArch>(dir, PROBE_KIND)?;
        Self::from_store(&arch, store)
    }
}
