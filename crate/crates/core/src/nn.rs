//! Linear layers and parameter initialisation.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn uniform_init<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.random_range(-bound..=bound);
    }
    t
}

/// Standard normal scaled by `scale`.
pub fn normal_init<R: Rng>(rng: &mut R, shape: &[usize], scale: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v = scale * z;
    }
    t
}

/// Row-vector affine map `x W + b`, with `W` stored as `in × out`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_features: usize,
        out_features: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{name}.weight"),
            uniform_init(rng, &[in_features, out_features], in_features),
        )?;
        let bias = if bias {
            Some(store.add(
                format!("{name}.bias"),
                uniform_init(rng, &[out_features], in_features),
            )?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_features,
            out_features,
        })
    }

    /// Re-attaches to parameters already present in `store` (e.g. after loading).
    pub fn lookup(store: &ParamStore, name: &str, bias: bool) -> Result<Self> {
        let weight = lookup(store, &format!("{name}.weight"))?;
        let shape = store.tensor(weight).shape();
        if shape.len() != 2 {
            return Err(Error::Format(format!("{name}.weight is not a matrix")));
        }
        let (in_features, out_features) = (shape[0], shape[1]);
        let bias = if bias {
            Some(lookup(store, &format!("{name}.bias"))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_features,
            out_features,
        })
    }

    /// Applies the map to every row of an `m × in` matrix, or to a vector.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let x2 = if shape.len() == 1 {
            g.reshape(x, &[1, shape[0]])?
        } else {
            x
        };
        let w = g.param(self.weight);
        let mut y = g.matmul(x2, w)?;
        if let Some(b) = self.bias {
            let b = g.param(b);
            y = g.add_row(y, b)?;
        }
        if shape.len() == 1 {
            y = g.reshape(y, &[self.out_features])?;
        }
        Ok(y)
    }
}

pub(crate) fn lookup(store: &ParamStore, name: &str) -> Result<ParamId> {
    store
        .id(name)
        .ok_or_else(|| Error::Format(format!("missing parameter `{name}`")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_init_respects_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = uniform_init(&mut rng, &[16, 4], 16);
        assert!(t.data().iter().all(|v| v.abs() <= 0.25));
    }

    #[test]
    fn linear_maps_rows_and_vectors() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lin = Linear::new(&mut store, &mut rng, "fc", 3, 2, true).unwrap();
        store
            .set(
                lin.weight,
                Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap(),
            )
            .unwrap();
        store
            .set(lin.bias.unwrap(), Tensor::vector(vec![0.5, -0.5]))
            .unwrap();
        let mut g = Graph::with_params(&store);
        let x = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let y = lin.forward(&mut g, x).unwrap();
        assert_eq!(g.value(y).data(), &[4.5, 4.5]);
        assert_eq!(g.shape(y), &[2]);
    }
}
