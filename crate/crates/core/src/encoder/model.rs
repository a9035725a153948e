use rand::Rng;

use super::{EncoderConfig, PackedTokens};
use crate::error::{Error, Result};
use crate::tensor::{trunc_normal, Graph, ParamId, ParamStore, Scalar, Tensor, Var, INIT_STD};

#[derive(Debug, Clone, Copy)]
struct Linear {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Block {
    norm1: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    norm2: Norm,
    fc1: Linear,
    fc2: Linear,
}

/// Parameter handles for a pre-norm transformer encoder living in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: EncoderConfig,
    patch: Linear,
    blocks: Vec<Block>,
    norm: Norm,
}

fn linear<T: Scalar>(g: &mut Graph<'_, T>, x: Var, l: Linear) -> Result<Var> {
    let w = g.param(l.weight);
    let b = g.param(l.bias);
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

fn norm<T: Scalar>(g: &mut Graph<'_, T>, x: Var, n: Norm) -> Result<Var> {
    let gain = g.param(n.gain);
    let bias = g.param(n.bias);
    g.layer_norm(x, gain, bias)
}

/// Fixed 1-D sinusoidal encoding: `sin(p/10000^(2i/d))`, `cos(…)` interleaved.
pub fn sincos_position(pos: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|j| {
            let i = (j / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * i / dim as f64);
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

impl Encoder {
    /// Registers freshly initialised parameters under `encoder.`.
    pub fn init<T: Scalar, R: Rng>(
        cfg: &EncoderConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let mut lin = |store: &mut ParamStore<T>, name: String, i: usize, o: usize| Linear {
            weight: store.add(
                format!("{name}.weight"),
                trunc_normal(&[i, o], INIT_STD, rng),
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[o])),
        };
        let ln = |store: &mut ParamStore<T>, name: String| Norm {
            gain: store.add(format!("{name}.weight"), Tensor::full(&[d], T::ONE)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d])),
        };
        let patch = lin(store, "encoder.patch_embed".into(), cfg.token_dim(), d);
        let mut blocks = Vec::with_capacity(cfg.depth);
        for b in 0..cfg.depth {
            let p = format!("encoder.blocks.{b}");
            blocks.push(Block {
                norm1: ln(store, format!("{p}.norm1")),
                q: lin(store, format!("{p}.attn.q"), d, d),
                k: lin(store, format!("{p}.attn.k"), d, d),
                v: lin(store, format!("{p}.attn.v"), d, d),
                out: lin(store, format!("{p}.attn.out"), d, d),
                norm2: ln(store, format!("{p}.norm2")),
                fc1: lin(store, format!("{p}.mlp.fc1"), d, cfg.mlp_dim),
                fc2: lin(store, format!("{p}.mlp.fc2"), cfg.mlp_dim, d),
            });
        }
        let norm = ln(store, "encoder.norm".into());
        Ok(Encoder {
            cfg: cfg.clone(),
            patch,
            blocks,
            norm,
        })
    }

    /// Looks up parameters by name, checking every shape against `cfg`.
    pub fn bind<T: Scalar>(cfg: &EncoderConfig, store: &ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let get = |name: String, shape: &[usize]| -> Result<ParamId> {
            let id = store
                .find(&name)
                .ok_or_else(|| Error::CheckpointMismatch(format!("missing tensor {name}")))?;
            if store.value(id).shape() != shape {
                return Err(Error::CheckpointMismatch(format!(
                    "{name} has shape {:?}, config implies {shape:?}",
                    store.value(id).shape()
                )));
            }
            Ok(id)
        };
        let lin = |name: String, i: usize, o: usize| -> Result<Linear> {
            Ok(Linear {
                weight: get(format!("{name}.weight"), &[i, o])?,
                bias: get(format!("{name}.bias"), &[o])?,
            })
        };
        let ln = |name: String| -> Result<Norm> {
            Ok(Norm {
                gain: get(format!("{name}.weight"), &[d])?,
                bias: get(format!("{name}.bias"), &[d])?,
            })
        };
        let patch = lin("encoder.patch_embed".into(), cfg.token_dim(), d)?;
        let blocks = (0..cfg.depth)
            .map(|b| {
                let p = format!("encoder.blocks.{b}");
                Ok(Block {
                    norm1: ln(format!("{p}.norm1"))?,
                    q: lin(format!("{p}.attn.q"), d, d)?,
                    k: lin(format!("{p}.attn.k"), d, d)?,
                    v: lin(format!("{p}.attn.v"), d, d)?,
                    out: lin(format!("{p}.attn.out"), d, d)?,
                    norm2: ln(format!("{p}.norm2"))?,
                    fc1: lin(format!("{p}.mlp.fc1"), d, cfg.mlp_dim)?,
                    fc2: lin(format!("{p}.mlp.fc2"), cfg.mlp_dim, d)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if store
            .find(&format!("encoder.blocks.{}.norm1.weight", cfg.depth))
            .is_some()
        {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint has more than {} blocks",
                cfg.depth
            )));
        }
        Ok(Encoder {
            cfg: cfg.clone(),
            patch,
            blocks,
            norm: ln("encoder.norm".into())?,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Embeds each packed sequence to one `embed_dim` vector: `[segments × embed_dim]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, batch: &PackedTokens) -> Result<Var> {
        let d = self.cfg.embed_dim;
        let rows = batch.positions.len();
        if batch.tokens.shape() != [rows, self.cfg.token_dim()] {
            return Err(Error::Shape {
                op: "encoder",
                detail: format!(
                    "tokens {:?}, expected [{rows}, {}]",
                    batch.tokens.shape(),
                    self.cfg.token_dim()
                ),
            });
        }
        let tokens = g.input(batch.tokens.cast::<T>());
        let mut pe = Vec::with_capacity(rows * d);
        for &p in &batch.positions {
            pe.extend(sincos_position(p, d).into_iter().map(T::from_f64));
        }
        let pe = g.input(Tensor::new(vec![rows, d], pe)?);
        let x = linear(g, tokens, self.patch)?;
        let mut x = g.add(x, pe)?;
        for b in &self.blocks {
            let h = norm(g, x, b.norm1)?;
            let q = linear(g, h, b.q)?;
            let k = linear(g, h, b.k)?;
            let v = linear(g, h, b.v)?;
            let a = g.scaled_dot_attention(q, k, v, self.cfg.heads, &batch.segments)?;
            let a = linear(g, a, b.out)?;
            x = g.add(x, a)?;
            let h = norm(g, x, b.norm2)?;
            let h = linear(g, h, b.fc1)?;
            let h = g.gelu(h)?;
            let h = linear(g, h, b.fc2)?;
            x = g.add(x, h)?;
        }
        let x = norm(g, x, self.norm)?;
        g.segment_mean(x, &batch.segments)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::TokenSequence;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg(depth: usize) -> EncoderConfig {
        EncoderConfig {
            embed_dim: 8,
            depth,
            heads: 2,
            mlp_dim: 16,
            n_mels: 4,
            patch_frames: 2,
        }
    }

    #[test]
    fn init_and_bind_agree() {
        let cfg = small_cfg(2);
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Encoder::init(&cfg, &mut store, &mut rng).unwrap();
        let bound = Encoder::bind(&cfg, &store).unwrap();
        assert_eq!(bound.blocks.len(), 2);
        assert!(Encoder::bind(&small_cfg(1), &store).is_err());
        assert!(Encoder::bind(&small_cfg(3), &store).is_err());
    }

    #[test]
    fn output_shape() {
        let cfg = small_cfg(1);
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = Encoder::init(&cfg, &mut store, &mut rng).unwrap();
        let a = TokenSequence::new(vec![0.5; 3 * 8], 8, vec![0, 4, 7]).unwrap();
        let b = TokenSequence::new(vec![-0.5; 2 * 8], 8, vec![1, 2]).unwrap();
        let packed = PackedTokens::pack(&[&a, &b]).unwrap();
        let mut g = Graph::new(&store, false);
        let out = enc.forward(&mut g, &packed).unwrap();
        assert_eq!(g.shape(out), &[2, 8]);
    }

    #[test]
    fn positions_are_sincos() {
        let p = sincos_position(0, 6);
        assert_eq!(p, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let q = sincos_position(3, 4);
        assert!((q[0] - 3f64.sin()).abs() < 1e-12);
        assert!((q[3] - (3.0 / 100.0f64).cos()).abs() < 1e-12);
    }
}
