use std::collections::{BTreeMap, HashMap};

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::ModelConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    init: Init,
}

fn spec(name: impl Into<String>, shape: &[usize], init: Init) -> ParamSpec {
    ParamSpec {
        name: name.into(),
        shape: shape.to_vec(),
        init,
    }
}

/// Every parameter the denoiser owns, in a fixed order. Shapes depend only on
/// the configuration, never on the number of persons or frames of an input.
pub fn layout(config: &ModelConfig) -> Vec<ParamSpec> {
    let c = config.channels;
    let h = config.ffn_hidden();
    let lin = |fan_in: usize| Init::Normal((1.0 / fan_in as f64).sqrt());
    let residual_out = |fan_in: usize| Init::Normal(0.5 * (1.0 / fan_in as f64).sqrt());
    let mut out = vec![
        spec("embed.weight", &[5, c], lin(5)),
        spec("embed.bias", &[c], Init::Zeros),
        spec("joint_embed", &[config.joints, c], Init::Normal(0.2)),
        spec("person_encoding", &[config.max_persons, c], Init::Normal(0.2)),
        spec("temporal_pos", &[config.max_frames, c], Init::Normal(0.2)),
        spec("step.weight", &[c, c], Init::Zeros),
        spec("step.bias", &[c], Init::Zeros),
    ];
    for b in 0..config.depth {
        for kind in ["spatial", "temporal"] {
            let p = |n: &str| format!("blocks.{b}.{kind}.{n}");
            out.extend([
                spec(p("norm1.weight"), &[c], Init::Ones),
                spec(p("norm1.bias"), &[c], Init::Zeros),
                spec(p("q.weight"), &[c, c], lin(c)),
                spec(p("k.weight"), &[c, c], lin(c)),
                spec(p("v.weight"), &[c, c], lin(c)),
                spec(p("out.weight"), &[c, c], residual_out(c)),
                spec(p("out.bias"), &[c], Init::Zeros),
                spec(p("norm2.weight"), &[c], Init::Ones),
                spec(p("norm2.bias"), &[c], Init::Zeros),
                spec(p("fc1.weight"), &[c, h], lin(c)),
                spec(p("fc1.bias"), &[h], Init::Zeros),
                spec(p("fc2.weight"), &[h, c], residual_out(h)),
                spec(p("fc2.bias"), &[c], Init::Zeros),
            ]);
        }
    }
    out.extend([
        spec("norm.weight", &[c], Init::Ones),
        spec("norm.bias", &[c], Init::Zeros),
        spec("head.weight", &[c, 3], residual_out(c)),
        spec("head.bias", &[3], Init::Zeros),
    ]);
    out
}

/// Named trainable tensors.
#[derive(Debug)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    order: Vec<String>,
    dtype: DType,
}

/// Deep copy: a cloned store never shares storage with the original.
impl Clone for ParamStore {
    fn clone(&self) -> Self {
        let vars = self
            .vars
            .iter()
            .map(|(k, v)| {
                let t = v.as_tensor().detach().copy().expect("CPU tensor copy");
                (k.clone(), Var::from_tensor(&t).expect("CPU variable"))
            })
            .collect();
        ParamStore {
            vars,
            order: self.order.clone(),
            dtype: self.dtype,
        }
    }
}

pub(crate) fn sample_init(spec: &ParamSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n: usize = spec.shape.iter().product();
    match spec.init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::Normal(std) => (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect(),
    }
}

impl ParamStore {
    /// Fresh parameters drawn from a seeded generator.
    pub fn init(config: &ModelConfig, dtype: DType, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut vars = BTreeMap::new();
        let mut order = Vec::new();
        for s in layout(config) {
            let values = sample_init(&s, &mut rng);
            let t = Tensor::from_vec(values, s.shape.as_slice(), &Device::Cpu)?.to_dtype(dtype)?;
            order.push(s.name.clone());
            vars.insert(s.name, Var::from_tensor(&t)?);
        }
        Ok(ParamStore { vars, order, dtype })
    }

    /// Wraps loaded tensors; every expected name must be present with the
    /// expected shape and nothing else may be.
    pub fn from_tensors(config: &ModelConfig, mut tensors: HashMap<String, Tensor>, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut vars = BTreeMap::new();
        let mut order = Vec::new();
        for s in layout(config) {
            let t = tensors
                .remove(&s.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{}`", s.name)))?;
            if t.dims() != s.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` has shape {:?}, expected {:?}",
                    s.name,
                    t.dims(),
                    s.shape
                )));
            }
            let t = t.to_dtype(dtype)?;
            order.push(s.name.clone());
            vars.insert(s.name, Var::from_tensor(&t)?);
        }
        if !tensors.is_empty() {
            let mut extra: Vec<_> = tensors.into_keys().collect();
            extra.sort();
            return Err(Error::Checkpoint(format!("unexpected tensors: {}", extra.join(", "))));
        }
        Ok(ParamStore { vars, order, dtype })
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn var(&self, name: &str) -> Result<&Var> {
        self.vars
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("no parameter named `{name}`")))
    }

    /// Parameters in layout order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.order.iter().map(move |n| (n.as_str(), &self.vars[n]))
    }

    pub fn names(&self) -> &[String] {
        &self.order
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Detached copies of every tensor, keyed by name.
    pub fn snapshot(&self) -> Result<HashMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().detach().copy()?)))
            .collect()
    }

    /// Overwrites one parameter with freshly drawn initial values.
    pub fn reinitialize(&mut self, config: &ModelConfig, name: &str, seed: u64) -> Result<()> {
        let s = layout(config)
            .into_iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("no parameter named `{name}`")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = sample_init(&s, &mut rng);
        let t = Tensor::from_vec(values, s.shape.as_slice(), &Device::Cpu)?.to_dtype(self.dtype)?;
        self.var(name)?.set(&t)?;
        Ok(())
    }
}
