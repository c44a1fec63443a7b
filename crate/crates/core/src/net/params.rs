//! Named, ordered parameter storage plus batchnorm running statistics.

use indexmap::IndexMap;
use rand_distr::{Distribution, Normal};

use super::layers::{enumerate_layers, LayerSpec};
use super::{ArchKind, NetworkConfig};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone)]
pub struct RunningStat<E: Element> {
    pub mean: Tensor<E>,
    pub var: Tensor<E>,
}

/// Ordered map name -> tensor for the learnable parameters, and batchnorm
/// unit name -> running statistics. Enumeration order is construction order
/// and is deterministic for a given configuration.
#[derive(Debug, Clone)]
pub struct ModelParams<E: Element> {
    params: IndexMap<String, Tensor<E>>,
    running: IndexMap<String, RunningStat<E>>,
}

impl<E: Element> Default for ModelParams<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> ModelParams<E> {
    pub fn new() -> Self {
        ModelParams {
            params: IndexMap::new(),
            running: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<E>) -> Result<()> {
        let name = name.into();
        if self.params.insert(name.clone(), tensor).is_some() {
            return Err(Error::integrity(format!("duplicate parameter name '{name}'")));
        }
        Ok(())
    }

    pub fn insert_running(&mut self, name: impl Into<String>, channels: usize) -> Result<()> {
        let name = name.into();
        let stat = RunningStat {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::full(&[channels], E::ONE),
        };
        if self.running.insert(name.clone(), stat).is_some() {
            return Err(Error::integrity(format!("duplicate running-stat name '{name}'")));
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<E>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::config(format!("unknown parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<E>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::config(format!("unknown parameter '{name}'")))
    }

    pub fn running(&self, name: &str) -> Result<&RunningStat<E>> {
        self.running
            .get(name)
            .ok_or_else(|| Error::config(format!("unknown batchnorm unit '{name}'")))
    }

    pub fn running_mut(&mut self, name: &str) -> Result<&mut RunningStat<E>> {
        self.running
            .get_mut(name)
            .ok_or_else(|| Error::config(format!("unknown batchnorm unit '{name}'")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<E>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<E>)> {
        self.params.iter_mut()
    }

    pub fn running_iter(&self) -> impl Iterator<Item = (&String, &RunningStat<E>)> {
        self.running.iter()
    }

    pub fn running_iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut RunningStat<E>)> {
        self.running.iter_mut()
    }

    pub fn param_tensor_count(&self) -> usize {
        self.params.len()
    }

    /// Total learnable scalar count (running statistics excluded).
    pub fn learnable_count(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(|t| t.all_finite())
            && self.running.values().all(|r| r.mean.all_finite() && r.var.all_finite())
    }

    pub fn cast<T: Element>(&self) -> ModelParams<T> {
        ModelParams {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            running: self
                .running
                .iter()
                .map(|(k, v)| {
                    (
                        k.clone(),
                        RunningStat {
                            mean: v.mean.cast(),
                            var: v.var.cast(),
                        },
                    )
                })
                .collect(),
        }
    }
}

/// He fan-in initialization for every convolution, zero biases, unit gamma,
/// zero beta, running statistics at (0, 1). Draws come from a single seeded
/// stream in enumeration order, so equal seeds give identical models.
pub fn init_params<E: Element>(arch: ArchKind, cfg: &NetworkConfig, seed: u64) -> Result<ModelParams<E>> {
    cfg.validate()?;
    let mut rng = rng::rng_from(rng::derive(seed, 0x1217));
    let mut params = ModelParams::new();
    for layer in enumerate_layers(arch, cfg) {
        match layer {
            LayerSpec::Conv { name, cin, cout, k } => {
                let fan_in = (cin * k * k) as f64;
                let std = (2.0 / fan_in).sqrt();
                let normal = Normal::new(0.0, std).expect("valid normal");
                let w: Vec<f64> = (0..cout * cin * k * k).map(|_| normal.sample(&mut rng)).collect();
                params.insert(format!("{name}.w"), Tensor::from_f64_slice(&[cout, cin, k, k], &w)?)?;
                params.insert(format!("{name}.b"), Tensor::zeros(&[cout]))?;
            }
            LayerSpec::ConvT { name, cin, cout } => {
                let std = (2.0 / cin as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("valid normal");
                let w: Vec<f64> = (0..cin * cout).map(|_| normal.sample(&mut rng)).collect();
                params.insert(format!("{name}.w"), Tensor::from_f64_slice(&[cin, cout, 1, 1], &w)?)?;
                params.insert(format!("{name}.b"), Tensor::zeros(&[cout]))?;
            }
            LayerSpec::Bn { name, c } => {
                params.insert(format!("{name}.gamma"), Tensor::full(&[c], E::ONE))?;
                params.insert(format!("{name}.beta"), Tensor::zeros(&[c]))?;
                params.insert_running(name, c)?;
            }
        }
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = NetworkConfig::new(1, 8, 1, 2);
        let a: ModelParams<f32> = init_params(ArchKind::DeepMrSeg, &cfg, 7).unwrap();
        let b: ModelParams<f32> = init_params(ArchKind::DeepMrSeg, &cfg, 7).unwrap();
        let c: ModelParams<f32> = init_params(ArchKind::DeepMrSeg, &cfg, 8).unwrap();
        let names_a: Vec<_> = a.names().collect();
        let names_b: Vec<_> = b.names().collect();
        assert_eq!(names_a, names_b);
        for (name, t) in a.iter() {
            assert_eq!(t.data(), b.get(name).unwrap().data(), "{name}");
        }
        let differs = a.iter().any(|(name, t)| t.data() != c.get(name).unwrap().data());
        assert!(differs, "different seeds should give different weights");
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut p: ModelParams<f32> = ModelParams::new();
        p.insert("w", Tensor::zeros(&[1])).unwrap();
        assert!(p.insert("w", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn gammas_start_at_one_and_biases_at_zero() {
        let cfg = NetworkConfig::new(1, 8, 1, 2);
        let p: ModelParams<f64> = init_params(ArchKind::Unet, &cfg, 3).unwrap();
        assert!(p.get("enc0.c1.bn.gamma").unwrap().data().iter().all(|&v| v == 1.0));
        assert!(p.get("enc0.c1.conv.b").unwrap().data().iter().all(|&v| v == 0.0));
        let rs = p.running("enc0.c1.bn").unwrap();
        assert!(rs.var.data().iter().all(|&v| v == 1.0));
    }
}
