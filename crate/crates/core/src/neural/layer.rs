//! One pre-norm transformer encoder layer over packed variable-length sequences.
//!
//! Rows of all sequences in a batch are stacked into one matrix so the
//! position-wise maps run as single matrix products; attention runs per
//! segment, so a row only ever attends to rows of its own sequence.

use ndarray::{s, Array1, Array2, Axis};
use rand_chacha::ChaCha8Rng;

use super::ops::{self, LnCache};
use super::params::{m2, m2_mut, v1, v1_mut};

/// Contiguous row range of one sequence in a packed matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub ln1_g: Array1<f64>,
    pub ln1_b: Array1<f64>,
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln2_g: Array1<f64>,
    pub ln2_b: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

pub struct LayerCache {
    ln1: LnCache,
    a: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// attention probabilities, `[segment][head]`
    probs: Vec<Vec<Array2<f64>>>,
    o: Array2<f64>,
    drop1: Option<Array2<f64>>,
    ln2: LnCache,
    c: Array2<f64>,
    pub(crate) z1: Array2<f64>,
    r: Array2<f64>,
    drop2: Option<Array2<f64>>,
}

impl EncoderLayer {
    pub fn new(rng: &mut ChaCha8Rng, dim: usize, ff_dim: usize) -> Self {
        EncoderLayer {
            ln1_g: Array1::ones(dim),
            ln1_b: Array1::zeros(dim),
            wq: ops::glorot(rng, dim, dim),
            bq: Array1::zeros(dim),
            wk: ops::glorot(rng, dim, dim),
            bk: Array1::zeros(dim),
            wv: ops::glorot(rng, dim, dim),
            bv: Array1::zeros(dim),
            wo: ops::glorot(rng, dim, dim),
            bo: Array1::zeros(dim),
            ln2_g: Array1::ones(dim),
            ln2_b: Array1::zeros(dim),
            w1: ops::glorot(rng, dim, ff_dim),
            b1: Array1::zeros(ff_dim),
            w2: ops::glorot(rng, ff_dim, dim),
            b2: Array1::zeros(dim),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z2 = |a: &Array2<f64>| Array2::zeros(a.raw_dim());
        let z1 = |a: &Array1<f64>| Array1::zeros(a.raw_dim());
        EncoderLayer {
            ln1_g: z1(&self.ln1_g),
            ln1_b: z1(&self.ln1_b),
            wq: z2(&self.wq),
            bq: z1(&self.bq),
            wk: z2(&self.wk),
            bk: z1(&self.bk),
            wv: z2(&self.wv),
            bv: z1(&self.bv),
            wo: z2(&self.wo),
            bo: z1(&self.bo),
            ln2_g: z1(&self.ln2_g),
            ln2_b: z1(&self.ln2_b),
            w1: z2(&self.w1),
            b1: z1(&self.b1),
            w2: z2(&self.w2),
            b2: z1(&self.b2),
        }
    }

    pub fn dim(&self) -> usize {
        self.wq.nrows()
    }

    pub fn ff_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub(crate) fn blocks<'a>(&'a self, p: &str, out: &mut Vec<(String, &'a [f64])>) {
        out.extend([
            v1(p, "ln1_g", &self.ln1_g),
            v1(p, "ln1_b", &self.ln1_b),
            m2(p, "wq", &self.wq),
            v1(p, "bq", &self.bq),
            m2(p, "wk", &self.wk),
            v1(p, "bk", &self.bk),
            m2(p, "wv", &self.wv),
            v1(p, "bv", &self.bv),
            m2(p, "wo", &self.wo),
            v1(p, "bo", &self.bo),
            v1(p, "ln2_g", &self.ln2_g),
            v1(p, "ln2_b", &self.ln2_b),
            m2(p, "w1", &self.w1),
            v1(p, "b1", &self.b1),
            m2(p, "w2", &self.w2),
            v1(p, "b2", &self.b2),
        ]);
    }

    pub(crate) fn blocks_mut<'a>(&'a mut self, p: &str, out: &mut Vec<(String, &'a mut [f64])>) {
        out.extend([
            v1_mut(p, "ln1_g", &mut self.ln1_g),
            v1_mut(p, "ln1_b", &mut self.ln1_b),
            m2_mut(p, "wq", &mut self.wq),
            v1_mut(p, "bq", &mut self.bq),
            m2_mut(p, "wk", &mut self.wk),
            v1_mut(p, "bk", &mut self.bk),
            m2_mut(p, "wv", &mut self.wv),
            v1_mut(p, "bv", &mut self.bv),
            m2_mut(p, "wo", &mut self.wo),
            v1_mut(p, "bo", &mut self.bo),
            v1_mut(p, "ln2_g", &mut self.ln2_g),
            v1_mut(p, "ln2_b", &mut self.ln2_b),
            m2_mut(p, "w1", &mut self.w1),
            v1_mut(p, "b1", &mut self.b1),
            m2_mut(p, "w2", &mut self.w2),
            v1_mut(p, "b2", &mut self.b2),
        ]);
    }

    /// `h = x + Drop(Attn(LN1(x)))`, `y = h + Drop(FF(LN2(h)))`.
    pub fn forward(
        &self,
        x: &Array2<f64>,
        segments: &[Segment],
        heads: usize,
        dropout: Option<(f64, &mut ChaCha8Rng)>,
    ) -> (Array2<f64>, LayerCache) {
        let (rows, dim) = x.dim();
        let dh = dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let (a, ln1) = ops::layer_norm(x, &self.ln1_g, &self.ln1_b);
        let q = ops::linear(&a.view(), &self.wq, &self.bq);
        let k = ops::linear(&a.view(), &self.wk, &self.bk);
        let v = ops::linear(&a.view(), &self.wv, &self.bv);

        let mut o = Array2::zeros((rows, dim));
        let mut probs = Vec::with_capacity(segments.len());
        for seg in segments {
            let r = seg.start..seg.start + seg.len;
            let mut per_head = Vec::with_capacity(heads);
            for h in 0..heads {
                let c = h * dh..(h + 1) * dh;
                let qs = q.slice(s![r.clone(), c.clone()]);
                let ks = k.slice(s![r.clone(), c.clone()]);
                let vs = v.slice(s![r.clone(), c.clone()]);
                let mut sc = qs.dot(&ks.t());
                sc *= scale;
                ops::softmax_rows(&mut sc);
                o.slice_mut(s![r.clone(), c]).assign(&sc.dot(&vs));
                per_head.push(sc);
            }
            probs.push(per_head);
        }

        let mut proj = ops::linear(&o.view(), &self.wo, &self.bo);
        let (mut drop1, mut drop2) = (None, None);
        let mut dropout = dropout;
        if let Some((p, rng)) = dropout.as_mut() {
            let m = ops::dropout_mask(rng, (rows, dim), *p);
            proj *= &m;
            drop1 = Some(m);
        }
        let h = x + &proj;

        let (c, ln2) = ops::layer_norm(&h, &self.ln2_g, &self.ln2_b);
        let z1 = ops::linear(&c.view(), &self.w1, &self.b1);
        let r = ops::relu(&z1);
        let mut z2 = ops::linear(&r.view(), &self.w2, &self.b2);
        if let Some((p, rng)) = dropout.as_mut() {
            let m = ops::dropout_mask(rng, (rows, dim), *p);
            z2 *= &m;
            drop2 = Some(m);
        }
        let y = &h + &z2;

        let cache = LayerCache {
            ln1,
            a,
            q,
            k,
            v,
            probs,
            o,
            drop1,
            ln2,
            c,
            z1,
            r,
            drop2,
        };
        (y, cache)
    }

    /// Returns `(dx, parameter gradients)`.
    pub fn backward(
        &self,
        dy: &Array2<f64>,
        cache: &LayerCache,
        segments: &[Segment],
        heads: usize,
    ) -> (Array2<f64>, EncoderLayer) {
        let dim = dy.ncols();
        let dh = dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut g = self.zeros_like();

        // feed-forward branch
        let mut dz2 = dy.clone();
        if let Some(m) = &cache.drop2 {
            dz2 *= m;
        }
        let (dr, dw2, db2) = ops::linear_backward(&cache.r.view(), &self.w2, &dz2);
        g.w2 = dw2;
        g.b2 = db2;
        let dz1 = ops::relu_backward(&dr, &cache.z1);
        let (dc, dw1, db1) = ops::linear_backward(&cache.c.view(), &self.w1, &dz1);
        g.w1 = dw1;
        g.b1 = db1;
        let (dh_ln, dg2, db2ln) = ops::layer_norm_backward(&dc, &self.ln2_g, &cache.ln2);
        g.ln2_g = dg2;
        g.ln2_b = db2ln;
        let dhid = dy + &dh_ln;

        // attention branch
        let mut dproj = dhid.clone();
        if let Some(m) = &cache.drop1 {
            dproj *= m;
        }
        let (d_o, dwo, dbo) = ops::linear_backward(&cache.o.view(), &self.wo, &dproj);
        g.wo = dwo;
        g.bo = dbo;

        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dk = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        for (seg, per_head) in segments.iter().zip(&cache.probs) {
            let r = seg.start..seg.start + seg.len;
            for (h, p) in per_head.iter().enumerate() {
                let c = h * dh..(h + 1) * dh;
                let dos = d_o.slice(s![r.clone(), c.clone()]);
                let qs = cache.q.slice(s![r.clone(), c.clone()]);
                let ks = cache.k.slice(s![r.clone(), c.clone()]);
                let vs = cache.v.slice(s![r.clone(), c.clone()]);
                let dp = dos.dot(&vs.t());
                dv.slice_mut(s![r.clone(), c.clone()]).assign(&p.t().dot(&dos));
                // softmax backward: dS = P * (dP - rowsum(dP * P))
                let inner = (&dp * p).sum_axis(Axis(1)).insert_axis(Axis(1));
                let mut ds = (&dp - &inner) * p;
                ds *= scale;
                dq.slice_mut(s![r.clone(), c.clone()]).assign(&ds.dot(&ks));
                dk.slice_mut(s![r.clone(), c]).assign(&ds.t().dot(&qs));
            }
        }
        let (da_q, dwq, dbq) = ops::linear_backward(&cache.a.view(), &self.wq, &dq);
        let (da_k, dwk, dbk) = ops::linear_backward(&cache.a.view(), &self.wk, &dk);
        let (da_v, dwv, dbv) = ops::linear_backward(&cache.a.view(), &self.wv, &dv);
        g.wq = dwq;
        g.bq = dbq;
        g.wk = dwk;
        g.bk = dbk;
        g.wv = dwv;
        g.bv = dbv;
        let da = da_q + &da_k + &da_v;
        let (dx_ln, dg1, db1ln) = ops::layer_norm_backward(&da, &self.ln1_g, &cache.ln1);
        g.ln1_g = dg1;
        g.ln1_b = db1ln;
        (dhid + &dx_ln, g)
    }
}
