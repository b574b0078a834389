//! Named parameter collections and their binding onto a tape.

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{invalid, Result};
use crate::tape::{GradTape, Gradients, Var};
use crate::tensor::{Shape, Tensor};

/// Handle to one tensor in a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Param(usize);

/// Ordered, named trainable tensors owned by one model component.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Param {
        self.names.push(name.into());
        self.values.push(value);
        Param(self.values.len() - 1)
    }

    /// Convolution or linear weights, uniform in `[-s, s]` with `s = sqrt(1 / fan_in)`.
    pub fn add_weight<R: Rng + ?Sized>(&mut self, name: impl Into<String>, shape: Shape, rng: &mut R) -> Param {
        let [_, fan_c, kh, kw] = shape.0;
        let bound = (1.0 / (fan_c * kh * kw) as f64).sqrt();
        self.add(name, Tensor::uniform(shape, bound, rng))
    }

    pub fn get(&self, p: Param) -> &Tensor {
        &self.values[p.0]
    }

    pub fn get_mut(&mut self, p: Param) -> &mut Tensor {
        &mut self.values[p.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Records every tensor on `tape`, as trainable leaves or as constants.
    pub fn bind(&self, tape: &mut GradTape, trainable: bool) -> Result<Bound> {
        let vars = self
            .values
            .iter()
            .map(|t| {
                if trainable {
                    Ok(tape.param(t.clone()))
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect::<Result<_>>()?;
        Ok(Bound { vars })
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            for d in t.shape().0 {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Replaces all values, checking that names and shapes line up.
    pub fn load_from(&mut self, other: &ParamSet) -> Result<()> {
        if other.names != self.names {
            return Err(invalid("parameter names differ from the model layout"));
        }
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            if dst.shape() != src.shape() {
                return Err(invalid(format!(
                    "parameter shape {} does not match {}",
                    src.shape(),
                    dst.shape()
                )));
            }
        }
        self.values.clone_from(&other.values);
        Ok(())
    }
}

/// Tape handles of a bound [`ParamSet`], index-aligned with it.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, p: Param) -> Var {
        self.vars[p.0]
    }

    /// Gradients in parameter order.
    pub fn grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|v| grads.get(*v)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_bound_and_digest() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamSet::new();
        let w = ps.add_weight("w", Shape::new(4, 2, 3, 3), &mut rng);
        let bound = (1.0f64 / 18.0).sqrt();
        assert!(ps.get(w).data().iter().all(|v| v.abs() <= bound));
        let d = ps.digest();
        assert_eq!(d.len(), 64);
        ps.get_mut(w).data_mut()[0] += 1e-9;
        assert_ne!(d, ps.digest());
    }
}
