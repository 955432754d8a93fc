use rand::Rng;

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Register a tensor and return its slot.
    pub fn insert(&mut self, name: impl Into<String>, mut t: Tensor) -> usize {
        t.requires_grad = true;
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    /// Glorot-uniform `[fan_in, fan_out]` weight.
    pub fn insert_glorot(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> usize {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        let t = Tensor::new(vec![fan_in, fan_out], data).expect("glorot shape");
        self.insert(name, t)
    }

    pub fn insert_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> usize {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Put every parameter on the tape. With `trainable = false` they enter
    /// as constants, which freezes the whole group for this graph.
    pub fn attach(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t)
                } else {
                    tape.constant(
                        Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid"),
                    )
                }
            })
            .collect()
    }

    /// Copy the gradients of `vars` (as returned by [`attach`](Self::attach))
    /// into each tensor's accumulator.
    pub fn accumulate_grads(&mut self, vars: &[Var], grads: &Gradients) {
        for (t, v) in self.tensors.iter_mut().zip(vars) {
            if let Some(g) = grads.get(*v) {
                match &mut t.grad {
                    Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                    None => t.grad = Some(g.to_vec()),
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Bitwise fingerprint of all parameter values.
    pub fn fingerprint(&self) -> u64 {
        // FNV-1a over names and raw bits
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        };
        for (n, t) in self.iter() {
            n.bytes().for_each(&mut eat);
            for v in t.data() {
                v.to_bits().to_le_bytes().into_iter().for_each(&mut eat);
            }
        }
        h
    }

    pub fn replace_data(&mut self, i: usize, data: Vec<f64>) -> Result<()> {
        let t = &mut self.tensors[i];
        if data.len() != t.numel() {
            return Err(Error::Shape {
                op: "replace_data",
                lhs: t.shape().to_vec(),
                rhs: vec![data.len()],
            });
        }
        t.data_mut().copy_from_slice(&data);
        Ok(())
    }
}
