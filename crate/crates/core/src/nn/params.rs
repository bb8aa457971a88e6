use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::real::Real;

/// Handle into a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// A named learnable (or frozen) weight array with its gradient buffer.
#[derive(Debug, Clone)]
pub struct Parameter<S: Real> {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<S>,
    pub grad: Vec<S>,
    pub trainable: bool,
}

impl<S: Real> Parameter<S> {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Initialization schemes for new parameters.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in ±sqrt(6/(fan_in+fan_out)) with fan_in = rows, fan_out = cols.
    Xavier,
    /// Uniform in ±a.
    Uniform(f64),
}

/// Flat registry of all parameters of one model. Optimizers, checkpoints
/// and graph binding all address parameters through this set.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<S: Real> {
    params: Vec<Parameter<S>>,
}

impl<S: Real> ParamSet<S> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        init: Init,
        rng: &mut ChaCha8Rng,
        trainable: bool,
    ) -> ParamId {
        let n = rows * cols;
        let values: Vec<S> = match init {
            Init::Zeros => vec![S::ZERO; n],
            Init::Ones => vec![S::ONE; n],
            Init::Xavier => {
                let a = (6.0 / (rows + cols) as f64).sqrt();
                (0..n).map(|_| S::from_f64(rng.gen_range(-a..a))).collect()
            }
            Init::Uniform(a) => (0..n).map(|_| S::from_f64(rng.gen_range(-a..a))).collect(),
        };
        self.params.push(Parameter {
            name: name.into(),
            rows,
            cols,
            values,
            grad: vec![S::ZERO; n],
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    /// Add a parameter with explicit values.
    pub fn add_values(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        values: Vec<S>,
        trainable: bool,
    ) -> ParamId {
        assert_eq!(values.len(), rows * cols, "value length must match shape");
        let n = values.len();
        self.params.push(Parameter {
            name: name.into(),
            rows,
            cols,
            values,
            grad: vec![S::ZERO; n],
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<S> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<S> {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<S>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter<S>)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = S::ZERO);
        }
    }

    /// Add `scale`-weighted gradients (as returned by `Graph::param_grads`)
    /// into the stored gradient buffers. Callers apply this in a fixed batch
    /// order so training stays bit-reproducible.
    pub fn add_scaled_grads(&mut self, grads: &[(ParamId, Vec<S>)], scale: S) {
        for (pid, g) in grads {
            let p = self.get_mut(*pid);
            for (pg, &gv) in p.grad.iter_mut().zip(g.iter()) {
                *pg += gv * scale;
            }
        }
    }

    /// Freeze every parameter in the set.
    pub fn freeze_all(&mut self) {
        for p in &mut self.params {
            p.trainable = false;
        }
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// Convert all parameter values to another scalar type, preserving
    /// names, shapes and trainability. Gradients are reset to zero.
    pub fn cast<T: Real>(&self) -> ParamSet<T> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    rows: p.rows,
                    cols: p.cols,
                    values: p.values.iter().map(|&v| T::from_f64(v.to_f64())).collect(),
                    grad: vec![T::ZERO; p.len()],
                    trainable: p.trainable,
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn xavier_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut ps: ParamSet<f32> = ParamSet::new();
        let id = ps.add("w", 30, 20, Init::Xavier, &mut rng, true);
        let bound = (6.0f32 / 50.0).sqrt();
        assert!(ps.get(id).values.iter().all(|v| v.abs() <= bound));
        // seeded draw is reproducible
        let mut rng2 = ChaCha8Rng::seed_from_u64(7);
        let mut ps2: ParamSet<f32> = ParamSet::new();
        let id2 = ps2.add("w", 30, 20, Init::Xavier, &mut rng2, true);
        assert_eq!(ps.get(id).values, ps2.get(id2).values);
    }
}
