//! The pre-training model: encoder, per-clip step head, per-level path heads,
//! and the joint loss with its exact gradient.

use ndarray::{Array2, Array3};
use rand_chacha::ChaCha8Rng;

use super::encoder::{Encoder, EncoderPass, PackedInput};
use super::layer::Segment;
use super::mlp::{Mlp, MlpCache};
use super::ops;
use super::params::ParamSet;
use super::ModelConfig;
use crate::error::{PivotError, Result};
use crate::util;

/// One video of a batch before padding.
#[derive(Debug, Clone)]
pub struct BatchItem<'a> {
    pub clips: Vec<&'a [f64]>,
    /// Active step ids per clip; `None` means no step target for that clip.
    pub step_targets: Vec<Option<Vec<usize>>>,
    /// Class index within each level's head; `None` leaves that head untargeted.
    pub path_targets: Vec<Option<usize>>,
}

/// Padded batch: `[B × N_max × d]` inputs with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Array3<f64>,
    /// `true` at real clips, `false` at padding.
    pub mask: Array2<bool>,
    /// `[B][N_max]`; set only at valid positions.
    pub step_targets: Vec<Vec<Option<Vec<usize>>>>,
    /// `[B][levels]`.
    pub path_targets: Vec<Vec<Option<usize>>>,
}

impl Batch {
    pub fn from_items(items: &[BatchItem<'_>], dim: usize) -> Result<Batch> {
        Self::padded(items, dim, 0)
    }

    /// Like [`Batch::from_items`] but pads to at least `min_len` positions.
    pub fn padded(items: &[BatchItem<'_>], dim: usize, min_len: usize) -> Result<Batch> {
        if items.is_empty() {
            return Err(PivotError::Validation("empty batch".into()));
        }
        let n_max = items.iter().map(|i| i.clips.len()).max().unwrap().max(min_len);
        let b = items.len();
        let mut inputs = Array3::zeros((b, n_max, dim));
        let mut mask = Array2::from_elem((b, n_max), false);
        let mut step_targets = vec![vec![None; n_max]; b];
        let mut path_targets = Vec::with_capacity(b);
        for (bi, item) in items.iter().enumerate() {
            if item.clips.is_empty() {
                return Err(PivotError::Validation(format!("batch item {bi} has no clips")));
            }
            if item.step_targets.len() != item.clips.len() {
                return Err(PivotError::Validation(format!(
                    "batch item {bi}: {} step targets for {} clips",
                    item.step_targets.len(),
                    item.clips.len()
                )));
            }
            for (p, c) in item.clips.iter().enumerate() {
                if c.len() != dim {
                    return Err(PivotError::DimMismatch {
                        expected: dim,
                        got: c.len(),
                    });
                }
                inputs
                    .slice_mut(ndarray::s![bi, p, ..])
                    .assign(&ndarray::ArrayView1::from(*c));
                mask[[bi, p]] = true;
                step_targets[bi][p] = item.step_targets[p].clone();
            }
            path_targets.push(item.path_targets.clone());
        }
        Ok(Batch {
            inputs,
            mask,
            step_targets,
            path_targets,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Valid rows packed, plus each packed row's step target.
    pub fn pack(&self) -> Result<(PackedInput, Vec<Option<&[usize]>>)> {
        let (b, n, d) = self.inputs.dim();
        let valid = self.mask.iter().filter(|&&m| m).count();
        let mut rows = Array2::zeros((valid, d));
        let mut positions = Vec::with_capacity(valid);
        let mut segments = Vec::with_capacity(b);
        let mut targets = Vec::with_capacity(valid);
        let mut r = 0;
        for bi in 0..b {
            let start = r;
            for p in 0..n {
                if self.mask[[bi, p]] {
                    rows.row_mut(r)
                        .assign(&self.inputs.slice(ndarray::s![bi, p, ..]));
                    positions.push(p);
                    targets.push(self.step_targets[bi][p].as_deref());
                    r += 1;
                } else if self.step_targets[bi][p].is_some() {
                    return Err(PivotError::Validation(format!(
                        "batch item {bi}: step target at padded position {p}"
                    )));
                }
            }
            if r == start {
                return Err(PivotError::Validation(format!(
                    "batch item {bi} has no valid clip"
                )));
            }
            segments.push(Segment {
                start,
                len: r - start,
            });
        }
        Ok((
            PackedInput {
                rows,
                positions,
                segments,
            },
            targets,
        ))
    }
}

#[derive(Debug, Clone)]
pub struct Losses {
    /// Batch mean of per-video summed BCE.
    pub step: f64,
    /// Batch mean of per-video summed per-level CE.
    pub path: f64,
    pub joint: f64,
    /// Step logits for every valid clip, packed order.
    pub step_logits: Array2<f64>,
    /// One `[B × |H_l|]` matrix per level.
    pub path_logits: Vec<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PivotModel {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub step_head: Mlp,
    pub path_heads: Vec<Mlp>,
}

pub struct ModelPass {
    pub packed: PackedInput,
    pub enc: EncoderPass,
    pub losses: Losses,
    step_cache: MlpCache,
    path_caches: Vec<MlpCache>,
    d_step_logits: Array2<f64>,
    d_path_logits: Vec<Array2<f64>>,
}

impl ModelPass {
    /// Hash of every ReLU on/off decision; changes iff some unit crossed zero.
    pub fn relu_signature(&self) -> u64 {
        let mut bytes = Vec::new();
        let mut all = self.enc.relu_preactivations();
        all.push(&self.step_cache.z1);
        all.extend(self.path_caches.iter().map(|c| &c.z1));
        for z in all {
            bytes.extend(z.iter().map(|&v| (v > 0.0) as u8));
        }
        util::fnv1a64(&bytes)
    }
}

impl PivotModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = util::stream(&[seed, 0x1417]);
        let encoder = Encoder::new(&config, &mut rng);
        let step_head = Mlp::new(&mut rng, config.dim, config.head_hidden, config.num_steps);
        let path_heads = config
            .level_sizes
            .iter()
            .map(|&n| Mlp::new(&mut rng, config.dim, config.head_hidden, n))
            .collect();
        Ok(PivotModel {
            config,
            encoder,
            step_head,
            path_heads,
        })
    }

    pub fn zeros_like(&self) -> Self {
        PivotModel {
            config: self.config.clone(),
            encoder: self.encoder.zeros_like(),
            step_head: self.step_head.zeros_like(),
            path_heads: self.path_heads.iter().map(|h| h.zeros_like()).collect(),
        }
    }

    /// Forward pass with losses and loss gradients. `rng` turns dropout on.
    pub fn forward(&self, batch: &Batch, rng: Option<&mut ChaCha8Rng>) -> Result<ModelPass> {
        let (packed, targets) = batch.pack()?;
        let b = packed.num_sequences();
        if batch.path_targets.iter().any(|p| p.len() > self.path_heads.len()) {
            return Err(PivotError::Validation(format!(
                "path targets deeper than the {} path heads",
                self.path_heads.len()
            )));
        }
        let enc = self.encoder.forward(&packed, rng)?;

        let (step_logits, step_cache) = self.step_head.forward(enc.clip_out.clone());
        let n_steps = self.config.num_steps;
        let inv_b = 1.0 / b as f64;
        let step_scale = self.config.step_weight * inv_b;
        let mut d_step = Array2::zeros(step_logits.raw_dim());
        let mut dense = vec![0.0; n_steps];
        let mut grad = vec![0.0; n_steps];
        let mut step_total = 0.0;
        for seg in &packed.segments {
            let mut video_sum = 0.0;
            for r in seg.start..seg.start + seg.len {
                let Some(active) = targets[r] else { continue };
                dense.iter_mut().for_each(|t| *t = 0.0);
                for &s in active {
                    if s >= n_steps {
                        return Err(PivotError::TargetOutOfRange {
                            head: "step".into(),
                            index: s,
                            size: n_steps,
                        });
                    }
                    dense[s] = 1.0;
                }
                let z = step_logits.row(r);
                video_sum += ops::bce_with_logits(z.as_slice().unwrap(), &dense, &mut grad);
                for (d, g) in d_step.row_mut(r).iter_mut().zip(&grad) {
                    *d = g * step_scale;
                }
            }
            step_total += video_sum;
        }
        let step_loss = step_total * inv_b;

        let mut path_logits = Vec::with_capacity(self.path_heads.len());
        let mut path_caches = Vec::with_capacity(self.path_heads.len());
        let mut d_path = Vec::with_capacity(self.path_heads.len());
        let mut per_video = vec![0.0; b];
        let path_scale = self.config.path_weight * inv_b;
        for (l, head) in self.path_heads.iter().enumerate() {
            let (logits, cache) = head.forward(enc.video.clone());
            let size = head.output_size();
            let mut d = Array2::zeros(logits.raw_dim());
            let mut g = vec![0.0; size];
            for (bi, targets) in batch.path_targets.iter().enumerate() {
                let Some(&Some(t)) = targets.get(l) else { continue };
                if t >= size {
                    return Err(PivotError::TargetOutOfRange {
                        head: format!("path level {}", l + 1),
                        index: t,
                        size,
                    });
                }
                per_video[bi] += ops::softmax_ce(logits.row(bi).as_slice().unwrap(), t, &mut g);
                for (dv, gv) in d.row_mut(bi).iter_mut().zip(&g) {
                    *dv = gv * path_scale;
                }
            }
            path_logits.push(logits);
            path_caches.push(cache);
            d_path.push(d);
        }
        let path_loss = per_video.iter().sum::<f64>() * inv_b;
        let joint = self.config.step_weight * step_loss + self.config.path_weight * path_loss;

        Ok(ModelPass {
            packed,
            enc,
            losses: Losses {
                step: step_loss,
                path: path_loss,
                joint,
                step_logits,
                path_logits,
            },
            step_cache,
            path_caches,
            d_step_logits: d_step,
            d_path_logits: d_path,
        })
    }

    /// Evaluation-mode losses and logits.
    pub fn forward_losses(&self, batch: &Batch) -> Result<Losses> {
        Ok(self.forward(batch, None)?.losses)
    }

    /// Exact gradient of the joint loss for a completed forward pass.
    pub fn backward(&self, pass: &ModelPass) -> PivotModel {
        let (d_clip, g_step) = self.step_head.backward(&pass.d_step_logits, &pass.step_cache);
        let mut d_video = Array2::zeros(pass.enc.video.raw_dim());
        let mut g_paths = Vec::with_capacity(self.path_heads.len());
        for ((head, cache), d) in self
            .path_heads
            .iter()
            .zip(&pass.path_caches)
            .zip(&pass.d_path_logits)
        {
            let (dv, g) = head.backward(d, cache);
            d_video += &dv;
            g_paths.push(g);
        }
        let (g_enc, _) = self
            .encoder
            .backward(&pass.enc, &pass.packed, &d_clip, &d_video);
        PivotModel {
            config: self.config.clone(),
            encoder: g_enc,
            step_head: g_step,
            path_heads: g_paths,
        }
    }

    /// Forward and backward in one call.
    pub fn gradients(
        &self,
        batch: &Batch,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Losses, PivotModel)> {
        let pass = self.forward(batch, rng)?;
        let grads = self.backward(&pass);
        Ok((pass.losses, grads))
    }

    /// Layer-1 outputs and pooled embeddings, evaluation mode.
    pub fn encode(&self, input: &PackedInput) -> Result<EncoderPass> {
        self.encoder.forward(input, None)
    }

    /// Step logits per packed row and path logits per sequence.
    pub fn infer(&self, input: &PackedInput) -> Result<(Array2<f64>, Vec<Array2<f64>>)> {
        let enc = self.encode(input)?;
        let (steps, _) = self.step_head.forward(enc.clip_out);
        let paths = self
            .path_heads
            .iter()
            .map(|h| h.forward(enc.video.clone()).0)
            .collect();
        Ok((steps, paths))
    }
}

impl ParamSet for PivotModel {
    fn blocks(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        self.encoder.blocks(&mut out);
        self.step_head.blocks("step_head", &mut out);
        for (l, h) in self.path_heads.iter().enumerate() {
            h.blocks(&format!("path_head{}", l + 1), &mut out);
        }
        out
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        self.encoder.blocks_mut(&mut out);
        self.step_head.blocks_mut("step_head", &mut out);
        for (l, h) in self.path_heads.iter_mut().enumerate() {
            h.blocks_mut(&format!("path_head{}", l + 1), &mut out);
        }
        out
    }
}
