//! Seeded parameter initialization.
//!
//! candle's CPU random generator cannot be seeded, so parameters are drawn
//! here from a ChaCha stream and registered in a [`VarMap`]. Construction
//! order is fixed, which makes a seed fully determine the initial weights.

use std::sync::Mutex;

use candle_core::{DType, Device, Shape, Tensor, Var};
use candle_nn::init::NormalOrUniform;
use candle_nn::var_builder::SimpleBackend;
use candle_nn::{Init, VarBuilder, VarMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

struct SeededBackend {
    map: VarMap,
    rng: Mutex<ChaCha8Rng>,
}

impl SeededBackend {
    fn sample(&self, shape: &Shape, init: Init) -> Vec<f64> {
        let n = shape.elem_count();
        let mut rng = self.rng.lock().expect("rng poisoned");
        let normal = |rng: &mut ChaCha8Rng, mean: f64, std: f64| -> Vec<f64> {
            let d = Normal::new(mean, std.max(1e-12)).expect("valid normal");
            (0..n).map(|_| d.sample(rng)).collect()
        };
        match init {
            Init::Const(v) => vec![v; n],
            Init::Randn { mean, stdev } => normal(&mut rng, mean, stdev),
            Init::Uniform { lo, up } => (0..n).map(|_| rng.random_range(lo..up)).collect(),
            Init::Kaiming { dist, fan, non_linearity } => {
                let std = non_linearity.gain() / (fan.for_shape(shape) as f64).sqrt();
                match dist {
                    NormalOrUniform::Normal => normal(&mut rng, 0.0, std),
                    NormalOrUniform::Uniform => {
                        let bound = 3f64.sqrt() * std;
                        (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                    }
                }
            }
        }
    }
}

impl SimpleBackend for SeededBackend {
    fn get(&self, s: Shape, name: &str, h: Init, dtype: DType, dev: &Device) -> candle_core::Result<Tensor> {
        let mut data = self.map.data().lock().expect("varmap poisoned");
        if let Some(v) = data.get(name) {
            if v.shape() != &s {
                candle_core::bail!("parameter {name}: shape {:?} requested, {:?} stored", s, v.shape());
            }
            return Ok(v.as_tensor().clone());
        }
        let values = self.sample(&s, h);
        let t = Tensor::from_vec(values, s, dev)?.to_dtype(dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        data.insert(name.to_string(), var);
        Ok(out)
    }

    fn get_unchecked(&self, name: &str, _dtype: DType, _dev: &Device) -> candle_core::Result<Tensor> {
        let data = self.map.data().lock().expect("varmap poisoned");
        match data.get(name) {
            Some(v) => Ok(v.as_tensor().clone()),
            None => candle_core::bail!("parameter {name} not initialized"),
        }
    }

    fn contains_tensor(&self, name: &str) -> bool {
        self.map.data().lock().expect("varmap poisoned").contains_key(name)
    }
}

/// A var builder whose fresh parameters are drawn from `seed` and stored in `map`.
pub fn seeded_var_builder(map: &VarMap, seed: u64, dtype: DType, device: &Device) -> VarBuilder<'static> {
    let backend = SeededBackend {
        map: map.clone(),
        rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
    };
    VarBuilder::from_backend(Box::new(backend), dtype, device.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_weights() {
        let draw = |seed| {
            let map = VarMap::new();
            let vb = seeded_var_builder(&map, seed, DType::F32, &Device::Cpu);
            let l = candle_nn::linear(4, 3, vb.pp("l")).unwrap();
            l.weight().flatten_all().unwrap().to_vec1::<f32>().unwrap()
        };
        assert_eq!(draw(1), draw(1));
        assert_ne!(draw(1), draw(2));
    }

    #[test]
    fn vars_are_registered() {
        let map = VarMap::new();
        let vb = seeded_var_builder(&map, 0, DType::F64, &Device::Cpu);
        let _ = candle_nn::linear(4, 3, vb.pp("l")).unwrap();
        assert_eq!(map.all_vars().len(), 2);
        assert!(map.data().lock().unwrap().contains_key("l.weight"));
    }
}
