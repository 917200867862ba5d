use ndarray::{Array2, Ix2};
use rand::Rng;

use super::{join, randn, Module, Param, Real};
use crate::error::{Error, Result};

/// Token lookup table `(vocab, dim)`.
#[derive(Clone, Debug)]
pub struct Embedding<S> {
    pub table: Param<S>,
}

impl<S: Real> Embedding<S> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, vocab: usize, dim: usize) -> Self {
        Embedding {
            table: Param::new(randn(rng, &[vocab, dim], 1.0)),
        }
    }

    pub fn vocab(&self) -> usize {
        self.table.value.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.table.value.shape()[1]
    }

    pub fn forward(&self, ids: &[u32]) -> Result<Array2<S>> {
        let table = self.table.value.view().into_dimensionality::<Ix2>().unwrap();
        let mut out = Array2::zeros((ids.len(), self.dim()));
        for (mut row, &id) in out.rows_mut().into_iter().zip(ids) {
            if id as usize >= self.vocab() {
                return Err(Error::InvalidInput(format!(
                    "token id {id} out of range for vocabulary of {}",
                    self.vocab()
                )));
            }
            row.assign(&table.row(id as usize));
        }
        Ok(out)
    }

    pub fn backward(&mut self, ids: &[u32], dy: &Array2<S>) {
        if !self.table.trainable() {
            return;
        }
        let mut g = Array2::<S>::zeros((self.vocab(), self.dim()));
        for (row, &id) in dy.rows().into_iter().zip(ids) {
            let mut t = g.row_mut(id as usize);
            t += &row;
        }
        self.table.accumulate(g.view());
    }
}

impl<S: Real> Module<S> for Embedding<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<S>)) {
        f(&join(prefix, "table"), &self.table);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        f(&join(prefix, "table"), &mut self.table);
    }
}
