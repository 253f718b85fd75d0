use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ops::{conv2d, ConvGeometry};
use crate::{Error, Result};

/// Named parameters and buffers of a network, in a stable order.
#[derive(Debug, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, (Var, bool)>,
}

impl ParamStore {
    fn insert(&mut self, name: String, var: Var, trainable: bool) -> Result<()> {
        if self.entries.insert(name.clone(), (var, trainable)).is_some() {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        Ok(())
    }

    pub fn trainable(&self) -> Vec<Var> {
        self.entries
            .values()
            .filter(|(_, t)| *t)
            .map(|(v, _)| v.clone())
            .collect()
    }

    pub fn named(&self) -> Vec<(String, Tensor)> {
        self.entries
            .iter()
            .map(|(k, (v, _))| (k.clone(), v.as_tensor().clone()))
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.entries.get(name).map(|(v, _)| v)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn trainable_count(&self) -> usize {
        self.entries
            .values()
            .filter(|(_, t)| *t)
            .map(|(v, _)| v.elem_count())
            .sum()
    }
}

/// Creates parameters with seeded initialisation and registers them.
pub struct Builder<'a> {
    pub store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    device: Device,
    dtype: DType,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: ChaCha8Rng, device: &Device, dtype: DType) -> Self {
        Self {
            store,
            rng,
            device: device.clone(),
            dtype,
        }
    }

    fn var(&mut self, name: String, shape: &[usize], std: f64, fill: f64, trainable: bool) -> Result<Var> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = if std > 0.0 {
            let normal = Normal::new(0.0, std).expect("positive std");
            (0..n).map(|_| normal.sample(&mut self.rng)).collect()
        } else {
            vec![fill; n]
        };
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.store.insert(name, var.clone(), trainable)?;
        Ok(var)
    }

    /// Convolution with He-normal weights and zero bias.
    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, geom: ConvGeometry, groups: usize, bias: bool) -> Result<Conv> {
        let fan_in = (cin / groups) * geom.kernel * geom.kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        let weight = self.var(format!("{name}.weight"), &[cout, cin / groups, geom.kernel, geom.kernel], std, 0.0, true)?;
        let bias = if bias {
            Some(self.var(format!("{name}.bias"), &[cout], 0.0, 0.0, true)?)
        } else {
            None
        };
        Ok(Conv {
            weight,
            bias,
            geom,
            groups,
        })
    }

    pub fn batch_norm(&mut self, name: &str, channels: usize) -> Result<BatchNorm> {
        Ok(BatchNorm {
            weight: self.var(format!("{name}.weight"), &[channels], 0.0, 1.0, true)?,
            bias: self.var(format!("{name}.bias"), &[channels], 0.0, 0.0, true)?,
            running_mean: self.var(format!("{name}.running_mean"), &[channels], 0.0, 0.0, false)?,
            running_var: self.var(format!("{name}.running_var"), &[channels], 0.0, 1.0, false)?,
        })
    }

    pub fn rng(&mut self) -> &mut impl Rng {
        &mut self.rng
    }
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: Var,
    pub bias: Option<Var>,
    pub geom: ConvGeometry,
    pub groups: usize,
}

impl Conv {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d(
            x,
            self.weight.as_tensor(),
            self.bias.as_ref().map(|b| b.as_tensor()),
            self.geom,
            self.groups,
        )
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    weight: Var,
    bias: Var,
    running_mean: Var,
    running_var: Var,
}

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

impl BatchNorm {
    /// Batch statistics (and a running-stat update) in training mode, running
    /// statistics otherwise.
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let (mean, var) = if train && b * h * w > 1 {
            let mean = x.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;
            let centered = x.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;
            let n = (b * h * w) as f64;
            let unbiased = (var.detach().flatten_all()? * (n / (n - 1.0)))?;
            let rm = ((self.running_mean.as_tensor() * (1.0 - BN_MOMENTUM))? + (mean.detach().flatten_all()? * BN_MOMENTUM)?)?;
            let rv = ((self.running_var.as_tensor() * (1.0 - BN_MOMENTUM))? + (unbiased * BN_MOMENTUM)?)?;
            self.running_mean.set(&rm)?;
            self.running_var.set(&rv)?;
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().reshape((1, c, 1, 1))?,
                self.running_var.as_tensor().reshape((1, c, 1, 1))?,
            )
        };
        let normed = x.broadcast_sub(&mean)?.broadcast_div(&(var + BN_EPS)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.weight.as_tensor().reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.bias.as_tensor().reshape((1, c, 1, 1))?)?)
    }
}
