//! Clip selection and reordering applied to a mined video before training.
//!
//! Stages run in a fixed order: threshold, in-task filter, sort, unique,
//! swap. Each one is optional. The deterministic prefix (everything up to
//! and including unique) is computed once per video by [`prepare`]; the
//! neighbor swap is re-drawn every epoch by [`PreparedVideo::sample`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{TaskSpec, VideoRecord};
use crate::error::{PivotError, Result};
use crate::mining::PseudoLabelSet;
use crate::textsim::{self, Embedding, ScoredLabel};

pub const DEFAULT_THRESHOLD: f64 = 1.0;
pub const DEFAULT_SWAP_PROB: f64 = 0.15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub threshold_enabled: bool,
    pub threshold_value: f64,
    pub in_task: bool,
    pub sort: bool,
    pub unique: bool,
    pub swap: bool,
    pub swap_prob: f64,
}

impl Default for AugmentConfig {
    /// Everything off: raw clips with raw top-k targets.
    fn default() -> Self {
        AugmentConfig {
            threshold_enabled: false,
            threshold_value: DEFAULT_THRESHOLD,
            in_task: false,
            sort: false,
            unique: false,
            swap: false,
            swap_prob: DEFAULT_SWAP_PROB,
        }
    }
}

impl AugmentConfig {
    pub fn thresh_only() -> Self {
        AugmentConfig {
            threshold_enabled: true,
            ..Self::default()
        }
    }

    pub fn thresh_in_task_sort() -> Self {
        AugmentConfig {
            threshold_enabled: true,
            in_task: true,
            sort: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.swap_prob) {
            return Err(PivotError::Validation(format!(
                "swap_prob {} outside [0, 1]",
                self.swap_prob
            )));
        }
        if self.threshold_value.is_nan() {
            return Err(PivotError::Validation("threshold_value is NaN".into()));
        }
        if self.sort && !self.in_task {
            return Err(PivotError::Validation(
                "sort requires in_task (step order comes from the matched task)".into(),
            ));
        }
        if (self.unique || self.swap) && !self.sort {
            return Err(PivotError::Validation("unique and swap require sort".into()));
        }
        Ok(())
    }

    /// Short label in the column order thresh/in_task/sort/unique/swap.
    pub fn describe(&self) -> String {
        let mut parts = Vec::new();
        for (on, name) in [
            (self.threshold_enabled, "thresh"),
            (self.in_task, "in_task"),
            (self.sort, "sort"),
            (self.unique, "unique"),
            (self.swap, "swap"),
        ] {
            if on {
                parts.push(name);
            }
        }
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }
}

/// A clip that survived selection, with its (possibly restricted) labels.
#[derive(Debug, Clone, PartialEq)]
pub struct KeptClip {
    pub index: usize,
    /// Best first; never empty.
    pub labels: Vec<ScoredLabel>,
}

impl KeptClip {
    fn best(&self) -> usize {
        self.labels[0].step_id
    }
}

/// Training sequence for one video: which clips, in which order, with which targets.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSequence {
    pub clip_indices: Vec<usize>,
    /// Active step ids per kept clip.
    pub targets: Vec<Vec<usize>>,
}

impl AugmentedSequence {
    pub fn len(&self) -> usize {
        self.clip_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clip_indices.is_empty()
    }

    /// Multi-hot target over a catalog of `n_steps`.
    pub fn multi_hot(&self, position: usize, n_steps: usize) -> Vec<f64> {
        let mut t = vec![0.0; n_steps];
        for &s in &self.targets[position] {
            t[s] = 1.0;
        }
        t
    }
}

/// Dot product between each caption and the embedding of its top-1 step.
pub fn caption_step_dots(
    video: &VideoRecord,
    labels: &PseudoLabelSet,
    step_embeddings: &[Embedding],
) -> Result<Vec<f64>> {
    if labels.len() != video.len() {
        return Err(PivotError::Validation(format!(
            "video {}: {} label sets for {} clips",
            video.video_id,
            labels.len(),
            video.len()
        )));
    }
    video
        .caption_embeddings
        .iter()
        .zip(&labels.per_clip)
        .map(|(c, l)| {
            let top = l.first().ok_or_else(|| {
                PivotError::Validation(format!("video {}: clip without labels", video.video_id))
            })?;
            let s = step_embeddings.get(top.step_id).ok_or_else(|| {
                PivotError::Validation(format!("unknown step {}", top.step_id))
            })?;
            textsim::dot(c, s)
        })
        .collect()
}

/// Indices whose caption-step dot product is strictly above `tau`.
pub fn filter_threshold(dots: &[f64], tau: f64) -> Vec<usize> {
    dots.iter()
        .enumerate()
        .filter(|(_, &d)| d > tau)
        .map(|(i, _)| i)
        .collect()
}

/// Keeps clips with at least one label among the topic's steps, and restricts
/// each survivor's labels to that intersection.
pub fn filter_in_task(kept: &[KeptClip], topic_task: &TaskSpec) -> Vec<KeptClip> {
    kept.iter()
        .filter_map(|k| {
            let labels: Vec<ScoredLabel> = k
                .labels
                .iter()
                .filter(|l| topic_task.step_ids.contains(&l.step_id))
                .copied()
                .collect();
            (!labels.is_empty()).then_some(KeptClip {
                index: k.index,
                labels,
            })
        })
        .collect()
}

/// Stable sort by where each clip's best in-task label sits in the task.
pub fn sort_by_steps(kept: &[KeptClip], topic_task: &TaskSpec) -> Result<Vec<KeptClip>> {
    let mut keyed = Vec::with_capacity(kept.len());
    for k in kept {
        let pos = k
            .labels
            .iter()
            .find_map(|l| topic_task.step_ids.iter().position(|&s| s == l.step_id))
            .ok_or_else(|| {
                PivotError::Validation(format!(
                    "clip {} has no label in task {}",
                    k.index, topic_task.task_id
                ))
            })?;
        keyed.push((pos, k.clone()));
    }
    keyed.sort_by_key(|(pos, _)| *pos);
    Ok(keyed.into_iter().map(|(_, k)| k).collect())
}

/// One uniformly chosen survivor per run of clips sharing the same best label.
pub fn dedupe_steps<R: Rng + ?Sized>(ordered: &[KeptClip], rng: &mut R) -> Vec<KeptClip> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < ordered.len() {
        let best = ordered[start].best();
        let mut end = start + 1;
        while end < ordered.len() && ordered[end].best() == best {
            end += 1;
        }
        let pick = if end - start == 1 {
            start
        } else {
            rng.random_range(start..end)
        };
        out.push(ordered[pick].clone());
        start = end;
    }
    out
}

/// One left-to-right pass; each adjacent pair is swapped with probability `p`,
/// using the sequence as modified so far.
pub fn swap_neighbors<T, R: Rng + ?Sized>(seq: &mut [T], p: f64, rng: &mut R) {
    if p <= 0.0 {
        return;
    }
    for j in 0..seq.len().saturating_sub(1) {
        if rng.random::<f64>() < p {
            seq.swap(j, j + 1);
        }
    }
}

/// Output of the deterministic stages, cached across epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedVideo {
    pub clips: Vec<KeptClip>,
    pub swap: bool,
    pub swap_prob: f64,
}

impl PreparedVideo {
    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> AugmentedSequence {
        let mut clips = self.clips.clone();
        if self.swap {
            swap_neighbors(&mut clips, self.swap_prob, rng);
        }
        AugmentedSequence {
            clip_indices: clips.iter().map(|c| c.index).collect(),
            targets: clips
                .iter()
                .map(|c| c.labels.iter().map(|l| l.step_id).collect())
                .collect(),
        }
    }
}

/// Threshold, in-task, sort and unique stages. `dots` come from [`caption_step_dots`].
///
/// If the filters leave nothing, the single clip with the highest dot score
/// is kept (ties to the earlier clip).
pub fn prepare<R: Rng + ?Sized>(
    labels: &PseudoLabelSet,
    dots: &[f64],
    topic_task: &TaskSpec,
    config: &AugmentConfig,
    rng: &mut R,
) -> Result<PreparedVideo> {
    config.validate()?;
    if labels.is_empty() || labels.len() != dots.len() {
        return Err(PivotError::Validation(format!(
            "prepare: {} label sets for {} dot scores",
            labels.len(),
            dots.len()
        )));
    }
    let all = |idx: Vec<usize>| -> Vec<KeptClip> {
        idx.into_iter()
            .map(|i| KeptClip {
                index: i,
                labels: labels.per_clip[i].clone(),
            })
            .collect()
    };
    let mut kept = if config.threshold_enabled {
        all(filter_threshold(dots, config.threshold_value))
    } else {
        all((0..labels.len()).collect())
    };
    if config.in_task {
        kept = filter_in_task(&kept, topic_task);
    }
    if kept.is_empty() {
        let best = dots
            .iter()
            .enumerate()
            .fold(0, |b, (i, &d)| if d > dots[b] { i } else { b });
        let raw = all(vec![best]);
        let restricted = filter_in_task(&raw, topic_task);
        kept = if config.in_task && !restricted.is_empty() {
            restricted
        } else {
            raw
        };
        return Ok(PreparedVideo {
            clips: kept,
            swap: false,
            swap_prob: config.swap_prob,
        });
    }
    if config.sort {
        kept = sort_by_steps(&kept, topic_task)?;
    }
    if config.unique {
        kept = dedupe_steps(&kept, rng);
    }
    Ok(PreparedVideo {
        clips: kept,
        swap: config.swap,
        swap_prob: config.swap_prob,
    })
}

/// Full pipeline for one video: [`prepare`] followed by one swap draw.
pub fn apply_pipeline<R: Rng + ?Sized>(
    video: &VideoRecord,
    labels: &PseudoLabelSet,
    step_embeddings: &[Embedding],
    topic_task: &TaskSpec,
    config: &AugmentConfig,
    rng: &mut R,
) -> Result<AugmentedSequence> {
    let dots = caption_step_dots(video, labels, step_embeddings)?;
    let prepared = prepare(labels, &dots, topic_task, config, rng)?;
    Ok(prepared.sample(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sl(step_id: usize, score: f64) -> ScoredLabel {
        ScoredLabel { step_id, score }
    }

    fn single(labels: &[usize]) -> PseudoLabelSet {
        PseudoLabelSet {
            per_clip: labels.iter().map(|&s| vec![sl(s, 0.9)]).collect(),
        }
    }

    fn kept_of(labels: &PseudoLabelSet) -> Vec<KeptClip> {
        labels
            .per_clip
            .iter()
            .enumerate()
            .map(|(i, l)| KeptClip { index: i, labels: l.clone() })
            .collect()
    }

    fn task(steps: &[usize]) -> TaskSpec {
        TaskSpec { task_id: 0, name: "t".into(), step_ids: steps.to_vec() }
    }

    #[test]
    fn threshold_is_strict() {
        assert_eq!(filter_threshold(&[1.2, 1.0, 0.5], 1.0), vec![0]);
        assert_eq!(filter_threshold(&[1.2, 1.0, 0.5], f64::NEG_INFINITY), vec![0, 1, 2]);
    }

    #[test]
    fn in_task_filter_cases() {
        let t = task(&[1, 2, 3]);
        let inside = kept_of(&single(&[1, 3, 2]));
        assert_eq!(filter_in_task(&inside, &t), inside);
        let outside = kept_of(&single(&[7, 8]));
        assert!(filter_in_task(&outside, &t).is_empty());

        let mixed = vec![KeptClip { index: 4, labels: vec![sl(9, 0.8), sl(2, 0.7)] }];
        let r = filter_in_task(&mixed, &t);
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].labels, vec![sl(2, 0.7)]);
    }

    #[test]
    fn sort_examples() {
        let t = task(&[1, 2, 3]);
        let k = kept_of(&single(&[3, 1, 2]));
        let s = sort_by_steps(&k, &t).unwrap();
        assert_eq!(s.iter().map(|c| c.index).collect::<Vec<_>>(), vec![1, 2, 0]);

        let ordered = kept_of(&single(&[1, 2, 3]));
        assert_eq!(sort_by_steps(&ordered, &t).unwrap(), ordered);

        assert!(sort_by_steps(&kept_of(&single(&[9])), &t).is_err());
    }

    #[test]
    fn sort_is_stable_for_equal_steps() {
        // clips 4 and 7 both labeled s1; every permutation of the input keeps 4 before 7
        let t = task(&[1, 2]);
        let clips: Vec<KeptClip> = vec![
            KeptClip { index: 2, labels: vec![sl(2, 0.9)] },
            KeptClip { index: 4, labels: vec![sl(1, 0.9)] },
            KeptClip { index: 7, labels: vec![sl(1, 0.5)] },
        ];
        let s = sort_by_steps(&clips, &t).unwrap();
        assert_eq!(s.iter().map(|c| c.index).collect::<Vec<_>>(), vec![4, 7, 2]);
    }

    #[test]
    fn dedupe_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let distinct = kept_of(&single(&[1, 2, 3]));
        assert_eq!(dedupe_steps(&distinct, &mut rng), distinct);

        let dup = kept_of(&single(&[1, 1, 2]));
        let a = dedupe_steps(&dup, &mut ChaCha8Rng::seed_from_u64(5));
        let b = dedupe_steps(&dup, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        assert!(a[0].index <= 1);
        assert_eq!(a[1].index, 2);
    }

    #[test]
    fn dedupe_is_uniform() {
        let dup = kept_of(&single(&[1, 1]));
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let zeros = (0..10_000)
            .filter(|_| dedupe_steps(&dup, &mut rng)[0].index == 0)
            .count();
        assert!((4850..=5150).contains(&zeros), "{zeros}");
    }

    #[test]
    fn swap_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut v = vec!['a', 'b', 'c'];
        swap_neighbors(&mut v, 0.0, &mut rng);
        assert_eq!(v, vec!['a', 'b', 'c']);
        swap_neighbors(&mut v, 1.0, &mut rng);
        assert_eq!(v, vec!['b', 'c', 'a']);
    }

    #[test]
    fn config_invariants() {
        assert!(AugmentConfig::default().validate().is_ok());
        assert!(AugmentConfig { sort: true, ..Default::default() }.validate().is_err());
        assert!(AugmentConfig { in_task: true, unique: true, ..Default::default() }
            .validate()
            .is_err());
        assert!(AugmentConfig { swap_prob: 1.5, ..AugmentConfig::thresh_in_task_sort() }
            .validate()
            .is_err());
        assert_eq!(AugmentConfig::thresh_in_task_sort().describe(), "thresh+in_task+sort");
        assert_eq!(AugmentConfig::default().describe(), "none");
    }

    #[test]
    fn fallback_keeps_best_dot_clip() {
        let labels = single(&[7, 8, 9]);
        let dots = [0.2, 0.9, 0.4];
        let cfg = AugmentConfig::thresh_in_task_sort();
        let p = prepare(&labels, &dots, &task(&[1, 2]), &cfg, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        assert_eq!(p.clips.len(), 1);
        assert_eq!(p.clips[0].index, 1);
    }

    #[test]
    fn all_off_is_identity() {
        let labels = PseudoLabelSet {
            per_clip: vec![vec![sl(4, 0.9), sl(1, 0.3)], vec![sl(0, 0.5), sl(4, 0.1)]],
        };
        let p = prepare(&labels, &[0.1, 0.2], &task(&[1]), &AugmentConfig::default(), &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        let s = p.sample(&mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(s.clip_indices, vec![0, 1]);
        assert_eq!(s.targets, vec![vec![4, 1], vec![0, 4]]);
        assert_eq!(s.multi_hot(0, 5), vec![0.0, 1.0, 0.0, 0.0, 1.0]);
    }
}
