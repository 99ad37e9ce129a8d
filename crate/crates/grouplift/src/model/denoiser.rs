use std::collections::HashMap;

use candle_core::{DType, Device, IndexOp, Tensor};
use ndarray::{Array4, ArrayView4, Ix4};
use rand_chacha::ChaCha8Rng;

use super::ops::{dropout, layer_norm, linear, softmax_last, step_features, to_array, to_tensor};
use super::{AttentionScope, ModelConfig, ParamStore};
use crate::error::{Error, Result};
use crate::pose::RootNormStats;

/// Number of input channels per token: 2D condition plus noisy 3D sample.
pub const INPUT_CHANNELS: usize = 5;

/// Training mode draws dropout masks from the supplied generator; evaluation
/// mode is deterministic.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    fn dropout(&mut self, x: &Tensor, rate: f64) -> Result<Tensor> {
        match self {
            Mode::Eval => Ok(x.clone()),
            Mode::Train(rng) => dropout(x, rate, *rng),
        }
    }
}

/// Parameter tensors for one forward pass, either tracked for gradients or detached.
struct Bound {
    map: HashMap<String, Tensor>,
}

impl Bound {
    fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("no parameter named `{name}`")))
    }
}

/// The spatio-temporal transformer denoiser together with the root
/// normalization statistics it was trained with.
#[derive(Debug, Clone)]
pub struct Denoiser {
    config: ModelConfig,
    root_norm: RootNormStats,
    params: ParamStore,
}

impl Denoiser {
    pub fn new(config: ModelConfig, root_norm: RootNormStats, dtype: DType, seed: u64) -> Result<Self> {
        root_norm.validate()?;
        let params = ParamStore::init(&config, dtype, seed)?;
        Ok(Denoiser {
            config,
            root_norm,
            params,
        })
    }

    pub fn from_params(config: ModelConfig, root_norm: RootNormStats, params: ParamStore) -> Result<Self> {
        config.validate()?;
        root_norm.validate()?;
        // re-validate names and shapes against the configuration
        let params = ParamStore::from_tensors(&config, params.snapshot()?, params.dtype())?;
        Ok(Denoiser {
            config,
            root_norm,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Changes how spatial attention groups tokens. Parameters are unaffected.
    pub fn set_attention_scope(&mut self, scope: AttentionScope) {
        self.config.attention_scope = scope;
    }

    pub fn root_norm(&self) -> &RootNormStats {
        &self.root_norm
    }

    pub fn set_root_norm(&mut self, stats: RootNormStats) -> Result<()> {
        stats.validate()?;
        self.root_norm = stats;
        Ok(())
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_parameters()
    }

    fn bind(&self, track: bool) -> Bound {
        let map = self
            .params
            .iter()
            .map(|(n, v)| {
                let t = if track { v.as_tensor().clone() } else { v.as_tensor().detach() };
                (n.to_string(), t)
            })
            .collect();
        Bound { map }
    }

    fn check_input(&self, z: &Tensor) -> Result<(usize, usize, usize)> {
        let (t, p, j, c) = z
            .dims4()
            .map_err(|_| Error::invalid(format!("denoiser input must be [T,P,J,5], got {:?}", z.dims())))?;
        if c != INPUT_CHANNELS {
            return Err(Error::invalid(format!(
                "denoiser input needs {INPUT_CHANNELS} channels, got {c}"
            )));
        }
        if j != self.config.joints {
            return Err(Error::invalid(format!(
                "model expects {} joints, input has {j}",
                self.config.joints
            )));
        }
        if p > self.config.max_persons {
            return Err(Error::Capacity(format!(
                "{p} persons exceed the model's capacity of {}",
                self.config.max_persons
            )));
        }
        if t > self.config.max_frames {
            return Err(Error::invalid(format!(
                "{t} frames exceed the model's maximum of {}",
                self.config.max_frames
            )));
        }
        if t == 0 || p == 0 {
            return Err(Error::invalid("denoiser input must have T, P >= 1"));
        }
        Ok((t, p, j))
    }

    fn embed(&self, w: &Bound, z: &Tensor) -> Result<Tensor> {
        linear(z, w.get("embed.weight")?, Some(w.get("embed.bias")?))
    }

    /// Person encodings gathered for the given slots, `[P, C]`.
    fn person_rows(&self, w: &Bound, slots: &[usize], persons: usize) -> Result<Tensor> {
        let slots: Vec<u32> = match self.config.attention_scope {
            AttentionScope::PerPerson => vec![0; persons],
            AttentionScope::Group => {
                if slots.len() != persons {
                    return Err(Error::invalid(format!(
                        "{} slot ids for {persons} persons",
                        slots.len()
                    )));
                }
                let mut seen = vec![false; self.config.max_persons];
                for &s in slots {
                    if s >= self.config.max_persons {
                        return Err(Error::invalid(format!(
                            "slot {s} out of range for {} encodings",
                            self.config.max_persons
                        )));
                    }
                    if std::mem::replace(&mut seen[s], true) {
                        return Err(Error::invalid(format!("duplicate slot id {s}")));
                    }
                }
                slots.iter().map(|&s| s as u32).collect()
            }
        };
        let idx = Tensor::new(slots.as_slice(), &Device::Cpu)?;
        Ok(w.get("person_encoding")?.index_select(&idx, 0)?)
    }

    fn attention(&self, w: &Bound, prefix: &str, x: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        let heads = self.config.heads;
        let d = self.config.head_dim();
        let split = |t: Tensor| -> Result<Tensor> {
            Ok(t.reshape((b, n, heads, d))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(linear(x, w.get(&format!("{prefix}.q.weight"))?, None)?)?;
        let k = split(linear(x, w.get(&format!("{prefix}.k.weight"))?, None)?)?;
        let v = split(linear(x, w.get(&format!("{prefix}.v.weight"))?, None)?)?;
        let scores = (q.matmul(&k.t()?)? * (1.0 / (d as f64).sqrt()))?;
        let attn = softmax_last(&scores)?;
        let mixed = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, n, c))?;
        let out = linear(
            &mixed,
            w.get(&format!("{prefix}.out.weight"))?,
            Some(w.get(&format!("{prefix}.out.bias"))?),
        )?;
        mode.dropout(&out, self.config.dropout)
    }

    /// Pre-norm attention sublayer followed by the feed-forward sublayer, both residual.
    fn sublayer(&self, w: &Bound, prefix: &str, x: &Tensor, pos: Option<&Tensor>, mode: &mut Mode) -> Result<Tensor> {
        let mut h = layer_norm(
            x,
            w.get(&format!("{prefix}.norm1.weight"))?,
            w.get(&format!("{prefix}.norm1.bias"))?,
        )?;
        if let Some(pos) = pos {
            h = h.broadcast_add(pos)?;
        }
        let x = (x + self.attention(w, prefix, &h, mode)?)?;
        let h = layer_norm(
            &x,
            w.get(&format!("{prefix}.norm2.weight"))?,
            w.get(&format!("{prefix}.norm2.bias"))?,
        )?;
        let h = linear(&h, w.get(&format!("{prefix}.fc1.weight"))?, Some(w.get(&format!("{prefix}.fc1.bias"))?))?
            .gelu()?;
        let h = linear(&h, w.get(&format!("{prefix}.fc2.weight"))?, Some(w.get(&format!("{prefix}.fc2.bias"))?))?;
        let h = mode.dropout(&h, self.config.dropout)?;
        Ok((x + h)?)
    }

    fn spatial(&self, w: &Bound, block: usize, x: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        self.sublayer(w, &format!("blocks.{block}.spatial"), x, None, mode)
    }

    fn temporal(&self, w: &Bound, block: usize, x: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        let t = x.dims3()?.1;
        if t > self.config.max_frames {
            return Err(Error::invalid(format!(
                "{t} frames exceed the model's maximum of {}",
                self.config.max_frames
            )));
        }
        let pos = w.get("temporal_pos")?.narrow(0, 0, t)?.unsqueeze(0)?;
        self.sublayer(w, &format!("blocks.{block}.temporal"), x, Some(&pos), mode)
    }

    /// Full denoiser pass on `z` of shape `[T, P, J, 5]`, returning the clean
    /// sample estimate `[T, P, J, 3]` in the normalized representation.
    /// Gradients flow into the parameters.
    pub fn forward(&self, z: &Tensor, step: usize, slots: &[usize], mode: &mut Mode) -> Result<Tensor> {
        let w = self.bind(true);
        self.forward_bound(&w, z, step, slots, mode)
    }

    fn forward_bound(&self, w: &Bound, z: &Tensor, step: usize, slots: &[usize], mode: &mut Mode) -> Result<Tensor> {
        let (t, p, j) = self.check_input(z)?;
        let c = self.config.channels;
        let z = z.to_dtype(self.dtype())?;
        let mut x = self.embed(w, &z)?;
        x = x.broadcast_add(&w.get("joint_embed")?.reshape((1, 1, j, c))?)?;
        if self.config.person_encoding {
            let pe = self.person_rows(w, slots, p)?;
            x = x.broadcast_add(&pe.reshape((1, p, 1, c))?)?;
        }
        let feats = Tensor::from_vec(step_features(step, c), (1, c), &Device::Cpu)?.to_dtype(self.dtype())?;
        let step_emb = linear(&feats, w.get("step.weight")?, Some(w.get("step.bias")?))?.reshape((1, 1, c))?;

        let mut x = x.reshape((t, p * j, c))?;
        for b in 0..self.config.depth {
            x = x.broadcast_add(&step_emb)?;
            x = match self.config.attention_scope {
                AttentionScope::Group => self.spatial(w, b, &x, mode)?,
                AttentionScope::PerPerson => self
                    .spatial(w, b, &x.reshape((t * p, j, c))?, mode)?
                    .reshape((t, p * j, c))?,
            };
            let xt = x.transpose(0, 1)?.contiguous()?;
            let xt = self.temporal(w, b, &xt, mode)?;
            x = xt.transpose(0, 1)?.contiguous()?;
        }
        let x = layer_norm(&x, w.get("norm.weight")?, w.get("norm.bias")?)?;
        let y = linear(&x, w.get("head.weight")?, Some(w.get("head.bias")?))?;
        Ok(y.reshape((t, p, j, 3))?)
    }

    /// Evaluation-mode denoising on plain arrays.
    pub fn denoise(&self, z: ArrayView4<f64>, step: usize, slots: &[usize]) -> Result<Array4<f64>> {
        let w = self.bind(false);
        let zt = to_tensor(z.into_dyn(), self.dtype())?;
        let y = self.forward_bound(&w, &zt, step, slots, &mut Mode::Eval)?;
        Ok(to_array(&y)?.into_dimensionality::<Ix4>().expect("4D output"))
    }

    /// Linear token embedding of `[T, P, J, 5]` inputs, `[T, P, J, C]` out.
    pub fn embed_tokens(&self, z: &Tensor) -> Result<Tensor> {
        self.check_input(z)?;
        let w = self.bind(false);
        self.embed(&w, &z.to_dtype(self.dtype())?)
    }

    /// Adds `E[slot]` to every token of each person of a `[T, P, J, C]` grid.
    pub fn add_person_encoding(&self, tokens: &Tensor, slots: &[usize]) -> Result<Tensor> {
        let (_, p, _, c) = tokens.dims4()?;
        if p > self.config.max_persons {
            return Err(Error::Capacity(format!(
                "{p} persons exceed the model's capacity of {}",
                self.config.max_persons
            )));
        }
        let w = self.bind(false);
        let pe = self.person_rows(&w, slots, p)?;
        Ok(tokens.broadcast_add(&pe.reshape((1, p, 1, c))?)?)
    }

    /// One spatial sublayer applied to `[N, C]` or `[B, N, C]` tokens.
    pub fn spatial_attention(&self, block: usize, tokens: &Tensor) -> Result<Tensor> {
        self.check_block(block)?;
        let w = self.bind(false);
        with_batch(&tokens.to_dtype(self.dtype())?, |x| self.spatial(&w, block, x, &mut Mode::Eval))
    }

    /// One temporal sublayer (position embedding included) applied to `[T, C]`
    /// or `[B, T, C]` token streams.
    pub fn temporal_attention(&self, block: usize, tokens: &Tensor) -> Result<Tensor> {
        self.check_block(block)?;
        let w = self.bind(false);
        with_batch(&tokens.to_dtype(self.dtype())?, |x| self.temporal(&w, block, x, &mut Mode::Eval))
    }

    fn check_block(&self, block: usize) -> Result<()> {
        if block >= self.config.depth {
            return Err(Error::invalid(format!(
                "block {block} out of range for depth {}",
                self.config.depth
            )));
        }
        Ok(())
    }

    /// Zeroes the person encodings (used by equivariance checks and ablations).
    pub fn zero_person_encodings(&mut self) -> Result<()> {
        let v = self.params.var("person_encoding")?;
        v.set(&v.as_tensor().zeros_like()?)?;
        Ok(())
    }
}

fn with_batch(tokens: &Tensor, f: impl FnOnce(&Tensor) -> Result<Tensor>) -> Result<Tensor> {
    match tokens.rank() {
        2 => Ok(f(&tokens.unsqueeze(0)?)?.i(0)?),
        3 => f(tokens),
        r => Err(Error::invalid(format!("attention tokens must be rank 2 or 3, got {r}"))),
    }
}
