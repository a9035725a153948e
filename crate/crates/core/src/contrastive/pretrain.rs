use std::sync::mpsc::{sync_channel, Receiver, SyncSender};
use std::sync::{Arc, OnceLock};
use std::thread;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{cosine_sim, views_from_mel, ClipSource, LossPoint, PretrainConfig};
use crate::audio::{MelConfig, MelFrontend, MelSpectrogram, NormStats};
use crate::encoder::{
    Encoder, EncoderCheckpoint, EncoderConfig, FrozenEncoder, PackedTokens, TokenSequence,
};
use crate::error::{invalid, Error, Result};
use crate::par;
use crate::seed;
use crate::tensor::{
    trunc_normal, AdamConfig, Graph, OptimState, ParamId, ParamStore, Scalar, Tensor, Var, INIT_STD,
};

/// Linear head `embed_dim → projector_dim`, used only during pretraining.
#[derive(Debug, Clone, Copy)]
pub struct Projector {
    weight: ParamId,
    bias: ParamId,
}

impl Projector {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        input: usize,
        output: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Projector {
            weight: store.add(
                "projector.weight",
                trunc_normal(&[input, output], INIT_STD, rng),
            ),
            bias: store.add("projector.bias", Tensor::zeros(&[output])),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

/// Result of a pretraining run: the frozen encoder (projector dropped) and its curve.
#[derive(Debug, Clone)]
pub struct PretrainRun {
    pub encoder: FrozenEncoder,
    pub curve: Vec<LossPoint>,
}

/// Full-clip spectrograms, computed on first use.
struct MelCache<'a> {
    source: &'a dyn ClipSource,
    frontend: &'a MelFrontend,
    min_len: usize,
    slots: Option<Vec<OnceLock<Arc<MelSpectrogram>>>>,
}

impl<'a> MelCache<'a> {
    fn new(source: &'a dyn ClipSource, frontend: &'a MelFrontend, cfg: &PretrainConfig) -> Self {
        MelCache {
            source,
            frontend,
            min_len: cfg.clip_length,
            slots: cfg
                .cache_spectrograms
                .then(|| (0..source.len()).map(|_| OnceLock::new()).collect()),
        }
    }

    fn get(&self, i: usize) -> Result<Arc<MelSpectrogram>> {
        if let Some(m) = self.slots.as_ref().and_then(|s| s[i].get()) {
            return Ok(Arc::clone(m));
        }
        let clip = self.source.clip(i)?;
        if clip.len() < self.min_len {
            return Err(Error::TooShort {
                required: self.min_len,
                actual: clip.len(),
            });
        }
        let m = Arc::new(self.frontend.mel_spectrogram(&clip)?);
        Ok(match &self.slots {
            Some(s) => Arc::clone(s[i].get_or_init(|| m)),
            None => m,
        })
    }
}

/// Corpus mean/std of log-Mel values over the first `cfg.norm_clips` clips.
pub fn compute_norm_stats(
    source: &dyn ClipSource,
    frontend: &MelFrontend,
    cfg: &PretrainConfig,
) -> Result<NormStats> {
    norm_from_cache(
        &MelCache::new(
            source,
            frontend,
            &PretrainConfig {
                cache_spectrograms: false,
                ..cfg.clone()
            },
        ),
        cfg,
    )
}

fn norm_from_cache(cache: &MelCache<'_>, cfg: &PretrainConfig) -> Result<NormStats> {
    let n = cache.source.len().min(cfg.norm_clips.max(1));
    let specs = par::map_range(n, |i| cache.get(i))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    NormStats::from_spectrograms(specs.iter().map(|m| m.as_ref()))
}

type ViewBatch = Result<Vec<(TokenSequence, TokenSequence)>>;

/// Clip indices for `step`: `N` distinct clips, a pure function of (seed, step).
fn batch_indices(corpus_len: usize, n: usize, seed: u64, step: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed::mix(seed, &[step as u64]));
    rand::seq::index::sample(&mut rng, corpus_len, n.min(corpus_len)).into_vec()
}

fn produce(
    cache: &MelCache<'_>,
    norm: &NormStats,
    cfg: &PretrainConfig,
    tx: SyncSender<ViewBatch>,
) {
    let batch_seed = seed::derive(cfg.seed, "pretrain.batches");
    let view_seed = seed::derive(cfg.seed, "pretrain.views");
    let mel = cache.frontend.config();
    for step in 0..cfg.steps {
        let idx = batch_indices(cache.source.len(), cfg.batch_size, batch_seed, step);
        let views = par::map(&idx, |&i| {
            let full = cache.get(i)?;
            views_from_mel(
                &full,
                mel,
                norm,
                cfg,
                seed::mix(view_seed, &[step as u64, i as u64]),
            )
        })
        .into_iter()
        .collect::<Result<Vec<_>>>();
        let failed = views.is_err();
        // the consumer hung up (error or divergence): stop quietly
        if tx.send(views).is_err() || failed {
            return;
        }
    }
}

struct Trainer<'a> {
    cfg: &'a PretrainConfig,
    meta: EncoderCheckpoint,
    store: ParamStore<f32>,
    encoder: Encoder,
    projector: Projector,
    optim: OptimState<f32>,
    curve: Vec<LossPoint>,
    snapshot: (usize, ParamStore<f32>),
}

impl Trainer<'_> {
    fn step(&mut self, step: usize, views: &[(TokenSequence, TokenSequence)]) -> Result<LossPoint> {
        let seqs: Vec<&TokenSequence> = views.iter().flat_map(|(a, b)| [a, b]).collect();
        let packed = PackedTokens::pack(&seqs)?;
        let (point, grads) = {
            let mut g = Graph::new(&self.store, true);
            let h = self.encoder.forward(&mut g, &packed)?;
            let z = self.projector.forward(&mut g, h)?;
            let loss = g.ntxent(z, self.cfg.temperature)?;
            let zv = g.value(z);
            let mut cos = 0.0;
            for p in 0..views.len() {
                let a: Vec<f64> = zv.row(2 * p).iter().map(|&x| x as f64).collect();
                let b: Vec<f64> = zv.row(2 * p + 1).iter().map(|&x| x as f64).collect();
                cos += cosine_sim(&a, &b)?;
            }
            let point = LossPoint {
                step,
                loss: g.value(loss).item() as f64,
                pos_cos: cos / views.len() as f64,
            };
            (point, g.backward(loss)?)
        };
        self.store.accumulate(&grads)?;
        self.optim.step(&mut self.store)?;
        Ok(point)
    }

    fn run_of(&self, store: &ParamStore<f32>, steps: usize) -> Result<PretrainRun> {
        let mut meta = self.meta.clone();
        meta.step = steps;
        let encoder_only = {
            let mut s = ParamStore::new();
            for p in store.iter().filter(|p| p.name.starts_with("encoder.")) {
                s.add(p.name.clone(), p.value.clone());
            }
            s
        };
        Ok(PretrainRun {
            encoder: FrozenEncoder::new(meta, encoder_only)?,
            curve: self.curve[..steps.min(self.curve.len())].to_vec(),
        })
    }

    fn consume(&mut self, rx: Receiver<ViewBatch>) -> Result<()> {
        for step in 0..self.cfg.steps {
            let views = rx
                .recv()
                .map_err(|_| invalid("view producer stopped unexpectedly"))??;
            match self.step(step, &views) {
                Ok(point) => {
                    if !point.loss.is_finite() {
                        return Err(self.diverged(step));
                    }
                    if step % 100 == 0 || step + 1 == self.cfg.steps {
                        log::info!(
                            "pretrain step {step}: loss {:.4}, positive cosine {:.3}",
                            point.loss,
                            point.pos_cos
                        );
                    }
                    self.curve.push(point);
                    if self.cfg.snapshot_every > 0 && (step + 1) % self.cfg.snapshot_every == 0 {
                        self.snapshot = (step + 1, self.store.clone());
                    }
                }
                Err(Error::NonFinite { op }) => {
                    log::warn!("non-finite value in {op} at step {step}");
                    return Err(self.diverged(step));
                }
                Err(e) => return Err(e),
            }
        }
        Ok(())
    }

    fn diverged(&self, step: usize) -> Error {
        let (good_step, ref good) = self.snapshot;
        match self.run_of(good, good_step) {
            Ok(run) => Error::Diverged {
                step,
                last_good_step: good_step,
                last_good: Box::new(run),
            },
            Err(e) => e,
        }
    }
}

/// Trains encoder and projector jointly on NT-Xent over masked view pairs.
/// Views for upcoming steps are prepared on a producer thread.
pub fn pretrain(
    source: &dyn ClipSource,
    cfg: &PretrainConfig,
    enc_cfg: &EncoderConfig,
    mel: &MelConfig,
) -> Result<PretrainRun> {
    cfg.validate()?;
    enc_cfg.validate()?;
    if source.is_empty() {
        return Err(invalid("pretraining corpus is empty"));
    }
    if source.len() < 2 {
        return Err(invalid("need at least two clips to form negatives"));
    }
    if mel.n_mels != enc_cfg.n_mels {
        return Err(Error::Config(format!(
            "frontend has {} bands, encoder expects {}",
            mel.n_mels, enc_cfg.n_mels
        )));
    }
    let frontend = MelFrontend::new(mel.clone())?;
    let cache = MelCache::new(source, &frontend, cfg);
    let norm = norm_from_cache(&cache, cfg)?;
    log::info!("normalisation: mean {:.3}, std {:.3}", norm.mean, norm.std);

    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, "pretrain.init"));
    let mut store = ParamStore::new();
    let encoder = Encoder::init(enc_cfg, &mut store, &mut rng)?;
    let projector = Projector::init(&mut store, enc_cfg.embed_dim, cfg.projector_dim, &mut rng);
    let optim = OptimState::new(
        &store,
        AdamConfig {
            warmup_steps: cfg.warmup_steps,
            ..AdamConfig::new(cfg.learning_rate, cfg.weight_decay)
        },
    )?;
    let meta = EncoderCheckpoint {
        encoder: enc_cfg.clone(),
        mel: mel.clone(),
        norm,
        pretrain: Some(serde_json::to_value(cfg)?),
        step: 0,
    };
    let mut trainer = Trainer {
        cfg,
        meta,
        snapshot: (0, store.clone()),
        store,
        encoder,
        projector,
        optim,
        curve: Vec::with_capacity(cfg.steps),
    };

    thread::scope(|s| {
        let (tx, rx) = sync_channel(cfg.queue_depth);
        let cache = &cache;
        s.spawn(move || produce(cache, &norm, cfg, tx));
        // rx is dropped when consume returns, which unblocks the producer
        trainer.consume(rx)
    })?;
    trainer.run_of(&trainer.store, cfg.steps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_indices_are_distinct_and_reproducible() {
        let a = batch_indices(50, 16, 3, 7);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 16);
        assert_eq!(a, batch_indices(50, 16, 3, 7));
        assert_ne!(a, batch_indices(50, 16, 3, 8));
    }
}
