use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;

use super::ops;
use super::params::{m2, m2_mut, v1, v1_mut};

/// Two affine maps with a ReLU in between.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

pub struct MlpCache {
    x: Array2<f64>,
    pub(crate) z1: Array2<f64>,
    r: Array2<f64>,
}

impl Mlp {
    pub fn new(rng: &mut ChaCha8Rng, input: usize, hidden: usize, output: usize) -> Self {
        Mlp {
            w1: ops::glorot(rng, input, hidden),
            b1: Array1::zeros(hidden),
            w2: ops::glorot(rng, hidden, output),
            b2: Array1::zeros(output),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Mlp {
            w1: Array2::zeros(self.w1.raw_dim()),
            b1: Array1::zeros(self.b1.raw_dim()),
            w2: Array2::zeros(self.w2.raw_dim()),
            b2: Array1::zeros(self.b2.raw_dim()),
        }
    }

    pub fn output_size(&self) -> usize {
        self.w2.ncols()
    }

    pub fn input_size(&self) -> usize {
        self.w1.nrows()
    }

    pub fn hidden_size(&self) -> usize {
        self.w1.ncols()
    }

    pub fn forward(&self, x: Array2<f64>) -> (Array2<f64>, MlpCache) {
        let z1 = ops::linear(&x.view(), &self.w1, &self.b1);
        let r = ops::relu(&z1);
        let y = ops::linear(&r.view(), &self.w2, &self.b2);
        (y, MlpCache { x, z1, r })
    }

    pub fn backward(&self, dy: &Array2<f64>, cache: &MlpCache) -> (Array2<f64>, Mlp) {
        let (dr, dw2, db2) = ops::linear_backward(&cache.r.view(), &self.w2, dy);
        let dz1 = ops::relu_backward(&dr, &cache.z1);
        let (dx, dw1, db1) = ops::linear_backward(&cache.x.view(), &self.w1, &dz1);
        (
            dx,
            Mlp {
                w1: dw1,
                b1: db1,
                w2: dw2,
                b2: db2,
            },
        )
    }

    pub(crate) fn blocks<'a>(&'a self, p: &str, out: &mut Vec<(String, &'a [f64])>) {
        out.extend([
            m2(p, "w1", &self.w1),
            v1(p, "b1", &self.b1),
            m2(p, "w2", &self.w2),
            v1(p, "b2", &self.b2),
        ]);
    }

    pub(crate) fn blocks_mut<'a>(&'a mut self, p: &str, out: &mut Vec<(String, &'a mut [f64])>) {
        out.extend([
            m2_mut(p, "w1", &mut self.w1),
            v1_mut(p, "b1", &mut self.b1),
            m2_mut(p, "w2", &mut self.w2),
            v1_mut(p, "b2", &mut self.b2),
        ]);
    }
}
