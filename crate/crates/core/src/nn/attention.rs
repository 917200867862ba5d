use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;

use super::linear::Linear;
use super::{join, Module, Param, Real};
use crate::error::{Error, Result};

/// Multi-head scaled dot-product attention over row-packed batches.
///
/// Queries are `(batch * lq, dim)` and keys/values `(batch * lk, dim)`;
/// key positions at or beyond `key_lens[b]` are masked, and `causal`
/// additionally masks key `j > i` for query `i`.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention<S> {
    pub heads: usize,
    pub q: Linear<S>,
    pub k: Linear<S>,
    pub v: Linear<S>,
    pub o: Linear<S>,
}

pub struct AttentionCache<S> {
    xq: Array2<S>,
    xkv: Array2<S>,
    q: Array2<S>,
    k: Array2<S>,
    v: Array2<S>,
    probs: Vec<Array2<S>>,
    concat: Array2<S>,
    batch: usize,
    lq: usize,
    lk: usize,
}

impl<S: Real> MultiHeadAttention<S> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, dim: usize, heads: usize) -> Self {
        assert!(dim % heads == 0, "dim must be divisible by heads");
        MultiHeadAttention {
            heads,
            q: Linear::new(rng, dim, dim),
            k: Linear::new(rng, dim, dim),
            v: Linear::new(rng, dim, dim),
            o: Linear::new(rng, dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.q.d_in()
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        xq: &ArrayView2<S>,
        lq: usize,
        xkv: &ArrayView2<S>,
        lk: usize,
        key_lens: &[usize],
        causal: bool,
    ) -> Result<(Array2<S>, AttentionCache<S>)> {
        let batch = key_lens.len();
        if xq.nrows() != batch * lq || xkv.nrows() != batch * lk {
            return Err(Error::shape(
                "attention rows",
                format!("{}x{lq} queries / {}x{lk} keys", batch, batch),
                format!("{} / {}", xq.nrows(), xkv.nrows()),
            ));
        }
        if let Some(b) = key_lens.iter().position(|&l| l == 0 || l > lk) {
            return Err(Error::InvalidInput(format!(
                "attention memory for batch item {b} has invalid length {} (max {lk})",
                key_lens[b]
            )));
        }
        let dim = self.dim();
        let dh = dim / self.heads;
        let scale = S::lit(1.0 / (dh as f64).sqrt());
        let q = self.q.forward(xq);
        let k = self.k.forward(xkv);
        let v = self.v.forward(xkv);
        let mut concat = Array2::<S>::zeros((batch * lq, dim));
        let mut probs = Vec::with_capacity(batch * self.heads);
        for b in 0..batch {
            let klen = key_lens[b];
            for h in 0..self.heads {
                let cols = h * dh..(h + 1) * dh;
                let qb = q.slice(s![b * lq..(b + 1) * lq, cols.clone()]);
                let kb = k.slice(s![b * lk..b * lk + klen, cols.clone()]);
                let vb = v.slice(s![b * lk..b * lk + klen, cols.clone()]);
                let mut scores = qb.dot(&kb.t());
                scores *= scale;
                for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
                    let visible = if causal { (i + 1).min(klen) } else { klen };
                    let max = row.iter().take(visible).fold(S::neg_infinity(), |a, &b| a.max(b));
                    let mut total = S::zero();
                    for (j, val) in row.iter_mut().enumerate() {
                        if j < visible {
                            *val = (*val - max).exp();
                            total += *val;
                        } else {
                            *val = S::zero();
                        }
                    }
                    row.mapv_inplace(|p| p / total);
                }
                let out = scores.dot(&vb);
                concat.slice_mut(s![b * lq..(b + 1) * lq, cols]).assign(&out);
                probs.push(scores);
            }
        }
        let y = self.o.forward(&concat.view());
        Ok((
            y,
            AttentionCache {
                xq: xq.to_owned(),
                xkv: xkv.to_owned(),
                q,
                k,
                v,
                probs,
                concat,
                batch,
                lq,
                lk,
            },
        ))
    }

    /// Returns `(d_query_input, d_key_value_input)`.
    pub fn backward(&mut self, cache: AttentionCache<S>, dy: &ArrayView2<S>) -> (Array2<S>, Array2<S>) {
        let AttentionCache {
            xq,
            xkv,
            q,
            k,
            v,
            probs,
            concat,
            batch,
            lq,
            lk,
        } = cache;
        let dim = self.dim();
        let dh = dim / self.heads;
        let scale = S::lit(1.0 / (dh as f64).sqrt());
        let dconcat = self.o.backward(&concat.view(), dy, true).unwrap();
        let mut dq = Array2::<S>::zeros(q.raw_dim());
        let mut dk = Array2::<S>::zeros(k.raw_dim());
        let mut dv = Array2::<S>::zeros(v.raw_dim());
        for b in 0..batch {
            for h in 0..self.heads {
                let p = &probs[b * self.heads + h];
                let klen = p.ncols();
                let cols = h * dh..(h + 1) * dh;
                let rows_q = b * lq..(b + 1) * lq;
                let rows_k = b * lk..b * lk + klen;
                let d_out = dconcat.slice(s![rows_q.clone(), cols.clone()]);
                let vb = v.slice(s![rows_k.clone(), cols.clone()]);
                let kb = k.slice(s![rows_k.clone(), cols.clone()]);
                let qb = q.slice(s![rows_q.clone(), cols.clone()]);
                let dp = d_out.dot(&vb.t());
                {
                    let mut dvb = dv.slice_mut(s![rows_k.clone(), cols.clone()]);
                    dvb += &p.t().dot(&d_out);
                }
                let row_dot = (&dp * p).sum_axis(Axis(1));
                let mut ds = dp;
                for ((mut row, prow), &rd) in ds.rows_mut().into_iter().zip(p.rows()).zip(row_dot.iter()) {
                    for (d, &pv) in row.iter_mut().zip(prow.iter()) {
                        *d = pv * (*d - rd) * scale;
                    }
                }
                {
                    let mut dqb = dq.slice_mut(s![rows_q, cols.clone()]);
                    dqb += &ds.dot(&kb);
                }
                let mut dkb = dk.slice_mut(s![rows_k, cols]);
                dkb += &ds.t().dot(&qb);
            }
        }
        let dxq = self.q.backward(&xq.view(), &dq.view(), true).unwrap();
        let mut dxkv = self.k.backward(&xkv.view(), &dk.view(), true).unwrap();
        dxkv += &self.v.backward(&xkv.view(), &dv.view(), true).unwrap();
        (dxq, dxkv)
    }
}

impl<S: Real> Module<S> for MultiHeadAttention<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<S>)) {
        self.q.visit(&join(prefix, "q"), f);
        self.k.visit(&join(prefix, "k"), f);
        self.v.visit(&join(prefix, "v"), f);
        self.o.visit(&join(prefix, "o"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        self.q.visit_mut(&join(prefix, "q"), f);
        self.k.visit_mut(&join(prefix, "k"), f);
        self.v.visit_mut(&join(prefix, "v"), f);
        self.o.visit_mut(&join(prefix, "o"), f);
    }
}
