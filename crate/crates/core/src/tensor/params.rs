use rand::Rng;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    moment1: Option<Vec<T>>,
    moment2: Option<Vec<T>>,
}

/// Ordered, named parameters. Order is insertion order and is the
/// serialization order.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param {
            name: name.into(),
            value,
            grad,
            moment1: None,
            moment2: None,
        });
        ParamId(self.params.len() - 1)
    }

    /// Uniform in `±sqrt(3 / fan_in)` (unit-variance-preserving for linear maps).
    pub fn add_fan_in_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let bound = (3.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
            .collect();
        self.add(name, Tensor::from_vec(shape, data).expect("shape product"))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    /// Fresh zeroed gradient buffers matching every parameter.
    pub fn grads_like(&self) -> Grads<T> {
        Grads(
            self.params
                .iter()
                .map(|p| vec![T::zero(); p.value.len()])
                .collect(),
        )
    }

    /// Adds `scale * grads` into the stored gradients.
    pub fn accumulate(&mut self, grads: &Grads<T>, scale: T) {
        for (p, g) in self.params.iter_mut().zip(&grads.0) {
            for (a, b) in p.grad.data_mut().iter_mut().zip(g) {
                *a += *b * scale;
            }
        }
    }

    /// Euclidean norm over every parameter, accumulated in `f64`.
    pub fn l2_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.value.data())
            .map(|v| {
                let v = v.to_f64_lossy();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Same names and values in another element type, with fresh gradients
    /// and no optimizer state.
    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: Tensor::zeros(p.value.shape()),
                    moment1: None,
                    moment2: None,
                })
                .collect(),
        }
    }

    /// Copies values (not optimizer state) from another set with identical layout.
    pub fn copy_values_from<U: Scalar>(&mut self, other: &ParamSet<U>) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::shape("param_set", "parameter counts differ"));
        }
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::shape(
                    "param_set",
                    format!("{} {:?} vs {} {:?}", a.name, a.value.shape(), b.name, b.value.shape()),
                ));
            }
            a.value = b.value.cast();
        }
        Ok(())
    }
}

/// Gradient buffers parallel to a [`ParamSet`], one flat vector per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Grads<T>(pub Vec<Vec<T>>);

impl<T: Scalar> Grads<T> {
    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.0[id.0]
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        &self.0[id.0]
    }

    pub fn add_assign(&mut self, other: &Grads<T>) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    /// Bias-corrected Adam update using the stored gradients; `t` counts from 1.
    pub fn step<T: Scalar>(&self, params: &mut ParamSet<T>, t: u64) -> Result<()> {
        if t == 0 {
            return Err(Error::InvalidParams("adam step counter starts at 1".into()));
        }
        let c1 = 1.0 - self.beta1.powi(t as i32);
        let c2 = 1.0 - self.beta2.powi(t as i32);
        for p in &mut params.params {
            let n = p.value.len();
            let m = p.moment1.get_or_insert_with(|| vec![T::zero(); n]);
            let v = p.moment2.get_or_insert_with(|| vec![T::zero(); n]);
            for (((w, g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let gf = g.to_f64_lossy();
                let mf = self.beta1 * m.to_f64_lossy() + (1.0 - self.beta1) * gf;
                let vf = self.beta2 * v.to_f64_lossy() + (1.0 - self.beta2) * gf * gf;
                *m = T::from_f64_lossy(mf);
                *v = T::from_f64_lossy(vf);
                let update = self.lr * (mf / c1) / ((vf / c2).sqrt() + self.eps);
                *w = T::from_f64_lossy(w.to_f64_lossy() - update);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn set(values: Vec<f32>) -> ParamSet<f32> {
        let mut p = ParamSet::new();
        let n = values.len();
        p.add("w", Tensor::from_vec(&[n], values).unwrap());
        p
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = set(vec![0.5, -1.0, 2.0]);
        p.iter_mut().for_each(|q| q.grad.fill(1.0));
        let adam = Adam::default();
        adam.step(&mut p, 1).unwrap();
        let expected = [0.5 - 1e-3, -1.0 - 1e-3, 2.0 - 1e-3];
        for (v, e) in p.iter().next().unwrap().value.data().iter().zip(expected) {
            assert!((v - e).abs() < 1e-6, "{v} vs {e}");
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = set(vec![0.25, 3.0]);
        Adam::default().step(&mut p, 1).unwrap();
        Adam::default().step(&mut p, 2).unwrap();
        assert_eq!(p.iter().next().unwrap().value.data(), &[0.25, 3.0]);
        assert!(Adam::default().step(&mut p, 0).is_err());
    }

    #[test]
    fn identical_runs_identical_params() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mut p = ParamSet::<f32>::new();
            p.add_fan_in_uniform("w", &[4, 4], 4, &mut rng);
            for t in 1..=10 {
                let vals: Vec<f32> = p.get(ParamId(0)).data().to_vec();
                p.iter_mut()
                    .for_each(|q| q.grad.data_mut().copy_from_slice(&vals));
                Adam::default().step(&mut p, t).unwrap();
            }
            p.get(ParamId(0)).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn l2_norm_and_accumulate() {
        let mut p = set(vec![3.0, 4.0]);
        assert!((p.l2_norm() - 5.0).abs() < 1e-12);
        let mut g = p.grads_like();
        g.get_mut(ParamId(0)).copy_from_slice(&[1.0, 2.0]);
        p.accumulate(&g, 0.5);
        assert_eq!(p.iter().next().unwrap().grad.data(), &[0.5, 1.0]);
    }
}
