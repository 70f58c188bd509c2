use std::collections::{BTreeMap, HashMap};

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// He normal with fan-out, as torchvision initialises EfficientNet convolutions.
    KaimingNormalFanOut,
    /// U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    UniformFanIn,
    Const(f32),
}

/// Named parameter registry. Every trainable weight and every batch-norm
/// running statistic lives here under a torchvision-compatible name.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    trainable: Vec<String>,
    preset: HashMap<String, Tensor>,
    strict: bool,
    rng: ChaCha8Rng,
    device: Device,
}

impl ParamStore {
    pub fn fresh(seed: u64, device: &Device) -> Self {
        Self {
            vars: BTreeMap::new(),
            trainable: Vec::new(),
            preset: HashMap::new(),
            strict: false,
            rng: ChaCha8Rng::seed_from_u64(seed),
            device: device.clone(),
        }
    }

    /// Parameters found in `preset` are taken verbatim; the rest are initialised
    /// from `seed`. With `strict`, a missing name is an error.
    pub fn with_preset(
        preset: HashMap<String, Tensor>,
        strict: bool,
        seed: u64,
        device: &Device,
    ) -> Self {
        Self {
            preset,
            strict,
            ..Self::fresh(seed, device)
        }
    }

    pub fn set_strict(&mut self, strict: bool) {
        self.strict = strict;
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        Ok(self.register(name, shape, init, true)?.as_tensor().clone())
    }

    /// Non-trainable state such as batch-norm running statistics.
    pub fn buffer(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        self.register(name, shape, init, false)
    }

    fn register(&mut self, name: &str, shape: &[usize], init: Init, trainable: bool) -> Result<Var> {
        if self.vars.contains_key(name) {
            return Err(Error::Checkpoint(format!("parameter {name} registered twice")));
        }
        // Always draw from the rng so that the init stream does not depend on
        // which tensors happen to be preset.
        let drawn = self.draw(shape, init);
        let tensor = match self.preset.remove(name) {
            Some(t) => {
                if t.dims() != shape {
                    return Err(Error::Shape(format!(
                        "parameter {name}: expected {shape:?}, found {:?}",
                        t.dims()
                    )));
                }
                t.to_dtype(DType::F32)?.to_device(&self.device)?
            }
            None if self.strict => {
                return Err(Error::Checkpoint(format!("parameter {name} missing")));
            }
            None => Tensor::from_vec(drawn, shape, &self.device)?,
        };
        let var = Var::from_tensor(&tensor)?;
        self.vars.insert(name.to_string(), var.clone());
        if trainable {
            self.trainable.push(name.to_string());
        }
        Ok(var)
    }

    fn draw(&mut self, shape: &[usize], init: Init) -> Vec<f32> {
        let n: usize = shape.iter().product();
        match init {
            Init::Const(v) => vec![v; n],
            Init::KaimingNormalFanOut => {
                let receptive: usize = shape.iter().skip(2).product();
                let fan_out = shape[0] * receptive.max(1);
                let std = (2.0 / fan_out as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| normal.sample(&mut self.rng) as f32).collect()
            }
            Init::UniformFanIn => {
                let fan_in: usize = shape.iter().skip(1).product::<usize>().max(1);
                let bound = 1.0 / (fan_in as f32).sqrt();
                (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect()
            }
        }
    }

    pub fn trainable_vars(&self) -> Vec<Var> {
        self.trainable.iter().map(|n| self.vars[n].clone()).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Names present in the preset that no layer asked for.
    pub fn unused_preset(&self) -> Vec<String> {
        let mut v: Vec<String> = self.preset.keys().cloned().collect();
        v.sort();
        v
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable
            .iter()
            .map(|n| self.vars[n].as_tensor().elem_count())
            .sum()
    }
}
