//! Base encoder layer plus video-level pooling (masked mean, or a stacked
//! second layer read at the first position).

use ndarray::{s, Array1, Array2, Axis};
use rand_chacha::ChaCha8Rng;

use super::layer::{EncoderLayer, LayerCache, Segment};
use super::ops;
use super::params::{v1, v1_mut};
use super::{ModelConfig, PoolMode};
use crate::error::{PivotError, Result};

/// Valid rows of a batch stacked into one matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedInput {
    pub rows: Array2<f64>,
    /// Sequence position of each row (indexes the positional table).
    pub positions: Vec<usize>,
    pub segments: Vec<Segment>,
}

impl PackedInput {
    /// Packs whole sequences, positions `0..len`.
    pub fn from_sequences(seqs: &[Vec<&[f64]>], dim: usize) -> Self {
        let total: usize = seqs.iter().map(|s| s.len()).sum();
        let mut rows = Array2::zeros((total, dim));
        let mut positions = Vec::with_capacity(total);
        let mut segments = Vec::with_capacity(seqs.len());
        let mut r = 0;
        for seq in seqs {
            segments.push(Segment {
                start: r,
                len: seq.len(),
            });
            for (p, v) in seq.iter().enumerate() {
                rows.row_mut(r).assign(&ndarray::ArrayView1::from(*v));
                positions.push(p);
                r += 1;
            }
        }
        PackedInput {
            rows,
            positions,
            segments,
        }
    }

    pub fn num_sequences(&self) -> usize {
        self.segments.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub layer1: EncoderLayer,
    pub layer2: Option<EncoderLayer>,
    /// Learned token prepended to the second layer's input.
    pub cls: Option<Array1<f64>>,
    pub heads: usize,
    pub pool: PoolMode,
    pub dropout: f64,
    /// Not a parameter.
    pub positional: Array2<f64>,
}

pub struct EncoderPass {
    /// Layer-1 outputs, one row per packed input row.
    pub clip_out: Array2<f64>,
    /// Pooled video embedding per sequence.
    pub video: Array2<f64>,
    cache1: LayerCache,
    second: Option<(LayerCache, Vec<Segment>)>,
}

impl EncoderPass {
    pub(crate) fn relu_preactivations(&self) -> Vec<&Array2<f64>> {
        let mut v = vec![&self.cache1.z1];
        if let Some((c, _)) = &self.second {
            v.push(&c.z1);
        }
        v
    }
}

impl Encoder {
    pub fn new(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let layer1 = EncoderLayer::new(rng, config.dim, config.ff_dim);
        let layer2 = (config.pool == PoolMode::Tfenc)
            .then(|| EncoderLayer::new(rng, config.dim, config.ff_dim));
        let cls = (config.pool == PoolMode::Tfenc && config.cls_token)
            .then(|| Array1::zeros(config.dim));
        Encoder {
            layer1,
            layer2,
            cls,
            heads: config.heads,
            pool: config.pool,
            dropout: config.dropout,
            positional: positional_table(config),
        }
    }

    pub fn dim(&self) -> usize {
        self.layer1.dim()
    }

    pub fn zeros_like(&self) -> Self {
        Encoder {
            layer1: self.layer1.zeros_like(),
            layer2: self.layer2.as_ref().map(|l| l.zeros_like()),
            cls: self.cls.as_ref().map(|c| Array1::zeros(c.raw_dim())),
            heads: self.heads,
            pool: self.pool,
            dropout: self.dropout,
            positional: self.positional.clone(),
        }
    }

    pub(crate) fn blocks<'a>(&'a self, out: &mut Vec<(String, &'a [f64])>) {
        self.layer1.blocks("enc.l1", out);
        if let Some(l) = &self.layer2 {
            l.blocks("enc.l2", out);
        }
        if let Some(c) = &self.cls {
            out.push(v1("enc", "cls", c));
        }
    }

    pub(crate) fn blocks_mut<'a>(&'a mut self, out: &mut Vec<(String, &'a mut [f64])>) {
        self.layer1.blocks_mut("enc.l1", out);
        if let Some(l) = &mut self.layer2 {
            l.blocks_mut("enc.l2", out);
        }
        if let Some(c) = &mut self.cls {
            out.push(v1_mut("enc", "cls", c));
        }
    }

    /// `rng` enables dropout (training); `None` is deterministic evaluation.
    pub fn forward(
        &self,
        input: &PackedInput,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<EncoderPass> {
        let max = self.positional.nrows();
        if let Some(seg) = input.segments.iter().find(|s| s.len > max) {
            return Err(PivotError::SequenceTooLong { len: seg.len, max });
        }
        if let Some(&p) = input.positions.iter().find(|&&p| p >= max) {
            return Err(PivotError::SequenceTooLong { len: p + 1, max });
        }
        if input.segments.iter().any(|s| s.len == 0) {
            return Err(PivotError::Validation("empty sequence in batch".into()));
        }
        let mut x = input.rows.clone();
        for (mut row, &p) in x.rows_mut().into_iter().zip(&input.positions) {
            row += &self.positional.row(p);
        }
        let p = self.dropout;
        fn drop<'a>(p: f64, r: &'a mut Option<&mut ChaCha8Rng>) -> Option<(f64, &'a mut ChaCha8Rng)> {
            match r {
                Some(r) if p > 0.0 => Some((p, &mut **r)),
                _ => None,
            }
        }
        let (h1, cache1) = self
            .layer1
            .forward(&x, &input.segments, self.heads, drop(p, &mut rng));

        let b = input.segments.len();
        let d = self.dim();
        let mut video = Array2::zeros((b, d));
        let second = match (self.pool, &self.layer2) {
            (PoolMode::Mean, _) => {
                for (bi, seg) in input.segments.iter().enumerate() {
                    let m = h1
                        .slice(s![seg.start..seg.start + seg.len, ..])
                        .sum_axis(Axis(0))
                        / seg.len as f64;
                    video.row_mut(bi).assign(&m);
                }
                None
            }
            (PoolMode::Tfenc, Some(layer2)) => {
                let (x2, segs2) = self.second_layer_input(&h1, &input.segments);
                let (y2, cache2) = layer2.forward(&x2, &segs2, self.heads, drop(p, &mut rng));
                for (bi, seg) in segs2.iter().enumerate() {
                    video.row_mut(bi).assign(&y2.row(seg.start));
                }
                Some((cache2, segs2))
            }
            (PoolMode::Tfenc, None) => {
                return Err(PivotError::Validation(
                    "tfenc pooling requires a second encoder layer".into(),
                ))
            }
        };
        Ok(EncoderPass {
            clip_out: h1,
            video,
            cache1,
            second,
        })
    }

    fn second_layer_input(
        &self,
        h1: &Array2<f64>,
        segments: &[Segment],
    ) -> (Array2<f64>, Vec<Segment>) {
        match &self.cls {
            None => (h1.clone(), segments.to_vec()),
            Some(cls) => {
                let mut x2 = Array2::zeros((h1.nrows() + segments.len(), h1.ncols()));
                let mut segs2 = Vec::with_capacity(segments.len());
                let mut r = 0;
                for seg in segments {
                    segs2.push(Segment {
                        start: r,
                        len: seg.len + 1,
                    });
                    x2.row_mut(r).assign(cls);
                    x2.slice_mut(s![r + 1..r + 1 + seg.len, ..])
                        .assign(&h1.slice(s![seg.start..seg.start + seg.len, ..]));
                    r += seg.len + 1;
                }
                (x2, segs2)
            }
        }
    }

    /// Backpropagates gradients on the layer-1 outputs and on the pooled
    /// video embeddings. Returns `(parameter gradients, d input rows)`.
    pub fn backward(
        &self,
        pass: &EncoderPass,
        input: &PackedInput,
        d_clip_out: &Array2<f64>,
        d_video: &Array2<f64>,
    ) -> (Encoder, Array2<f64>) {
        let mut grads = self.zeros_like();
        let mut dh1 = d_clip_out.clone();
        match (&pass.second, &self.layer2) {
            (None, _) => {
                for (bi, seg) in input.segments.iter().enumerate() {
                    let share = &d_video.row(bi) / seg.len as f64;
                    let mut block = dh1.slice_mut(s![seg.start..seg.start + seg.len, ..]);
                    block += &share;
                }
            }
            (Some((cache2, segs2)), Some(layer2)) => {
                let rows2 = segs2.last().map(|s| s.start + s.len).unwrap_or(0);
                let mut dy2 = Array2::zeros((rows2, self.dim()));
                for (bi, seg) in segs2.iter().enumerate() {
                    dy2.row_mut(seg.start).assign(&d_video.row(bi));
                }
                let (dx2, g2) = layer2.backward(&dy2, cache2, segs2, self.heads);
                grads.layer2 = Some(g2);
                match &mut grads.cls {
                    None => dh1 += &dx2,
                    Some(gcls) => {
                        for (seg, seg2) in input.segments.iter().zip(segs2) {
                            *gcls += &dx2.row(seg2.start);
                            let mut block =
                                dh1.slice_mut(s![seg.start..seg.start + seg.len, ..]);
                            block += &dx2.slice(s![seg2.start + 1..seg2.start + seg2.len, ..]);
                        }
                    }
                }
            }
            (Some(_), None) => unreachable!("second-layer cache without a second layer"),
        }
        let (dx, g1) = self
            .layer1
            .backward(&dh1, &pass.cache1, &input.segments, self.heads);
        grads.layer1 = g1;
        (grads, dx)
    }
}

pub(crate) fn positional_table(config: &ModelConfig) -> Array2<f64> {
    if config.positional {
        ops::sinusoidal_table(config.max_seq_len, config.dim) * config.positional_scale
    } else {
        Array2::zeros((config.max_seq_len, config.dim))
    }
}
