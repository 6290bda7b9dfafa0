use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::fnv1a;
use crate::scalar::Scalar;

/// Append-only named parameter list. Indices are stable, so task heads added
/// after the backbone never shift backbone ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn tensor(&self, pid: usize) -> &Tensor<T> {
        &self.tensors[pid]
    }

    pub fn tensor_mut(&mut self, pid: usize) -> &mut Tensor<T> {
        &mut self.tensors[pid]
    }

    pub fn name(&self, pid: usize) -> &str {
        &self.names[pid]
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total scalar count over `pids`.
    pub fn count(&self, pids: impl IntoIterator<Item = usize>) -> usize {
        pids.into_iter().map(|p| self.tensors[p].len()).sum()
    }

    pub fn total_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Content hash over names, shapes and bit patterns of `pids`.
    pub fn fingerprint(&self, pids: impl IntoIterator<Item = usize>) -> u64 {
        let mut bytes = Vec::new();
        for p in pids {
            bytes.extend_from_slice(self.names[p].as_bytes());
            bytes.extend_from_slice(&(self.tensors[p].rows as u64).to_le_bytes());
            bytes.extend_from_slice(&(self.tensors[p].cols as u64).to_le_bytes());
            for x in &self.tensors[p].data {
                bytes.extend_from_slice(&x.as_f64().to_bits().to_le_bytes());
            }
        }
        fnv1a(bytes)
    }

    /// Copies every tensor of `src` whose name exists here with equal shape.
    /// Returns the number of tensors copied.
    pub fn load_matching(&mut self, src: &ParamStore<T>) -> usize {
        let mut n = 0;
        for (name, t) in src.iter() {
            if let Some(p) = self.find(name) {
                if self.tensors[p].shape() == t.shape() {
                    self.tensors[p] = t.clone();
                    n += 1;
                }
            }
        }
        n
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { names: self.names.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect() }
    }

    pub fn replace(&mut self, pid: usize, t: Tensor<T>) -> Result<()> {
        if self.tensors[pid].shape() != t.shape() {
            return Err(Error::Shape(format!(
                "parameter {} is {:?}, replacement {:?}",
                self.names[pid],
                self.tensors[pid].shape(),
                t.shape()
            )));
        }
        self.tensors[pid] = t;
        Ok(())
    }
}

/// Xavier-uniform `rows x cols` matrix.
pub fn xavier<T: Scalar>(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| T::lit(rng.random_range(-a..a))).collect();
    Tensor { rows, cols, data }
}

/// Normal(0, std) matrix.
pub fn normal<T: Scalar>(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    use rand_distr::{Distribution, Normal};
    let dist = Normal::new(0.0, std).expect("positive std");
    let data = (0..rows * cols).map(|_| T::lit(dist.sample(rng))).collect();
    Tensor { rows, cols, data }
}
