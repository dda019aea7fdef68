//! Training labels: per-clip step pseudo-labels, hierarchy paths and the
//! video-to-task topic match.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusBundle, Hierarchy, HierarchyPath, TaskSpec, VideoRecord};
use crate::error::{PivotError, Result};
use crate::textsim::{self, embed_text, Embedding, ScoredLabel};

/// Top-k steps per clip, best first. One entry per clip.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelSet {
    pub per_clip: Vec<Vec<ScoredLabel>>,
}

impl PseudoLabelSet {
    pub fn len(&self) -> usize {
        self.per_clip.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_clip.is_empty()
    }

    pub fn top1(&self, clip: usize) -> Option<ScoredLabel> {
        self.per_clip.get(clip).and_then(|l| l.first().copied())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopicMatch {
    pub task_id: usize,
    pub score: f64,
}

pub trait TextEmbedder {
    fn embed(&self, text: &str) -> Embedding;
}

/// The hashed stand-in encoder at a fixed `(dim, seed)`.
#[derive(Debug, Clone, Copy)]
pub struct SyntheticEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl TextEmbedder for SyntheticEmbedder {
    fn embed(&self, text: &str) -> Embedding {
        embed_text(text, self.dim, self.seed)
    }
}

/// Assigns each caption its top-k catalog steps by cosine similarity.
pub fn mine_pseudo_labels(
    video: &VideoRecord,
    step_embeddings: &[Embedding],
    k: usize,
) -> Result<PseudoLabelSet> {
    if step_embeddings.is_empty() {
        return Err(PivotError::Validation(
            "mine_pseudo_labels: empty step catalog".into(),
        ));
    }
    if k == 0 {
        return Err(PivotError::Validation("mine_pseudo_labels: k must be >= 1".into()));
    }
    let step_norms: Vec<f64> = step_embeddings.iter().map(|s| s.norm()).collect();
    if let Some(i) = step_norms.iter().position(|&n| n == 0.0) {
        return Err(PivotError::Validation(format!(
            "step {i} has a zero embedding; cosine is undefined"
        )));
    }
    let mut per_clip = Vec::with_capacity(video.len());
    for (ci, c) in video.caption_embeddings.iter().enumerate() {
        let cn = c.norm();
        if cn == 0.0 {
            return Err(PivotError::Validation(format!(
                "video {}: caption {ci} is a zero vector",
                video.video_id
            )));
        }
        let mut scored = Vec::with_capacity(step_embeddings.len());
        for (si, s) in step_embeddings.iter().enumerate() {
            if s.dim() != c.dim() {
                return Err(PivotError::DimMismatch {
                    expected: c.dim(),
                    got: s.dim(),
                });
            }
            let d = textsim::dot_unchecked(c, s);
            scored.push(ScoredLabel {
                step_id: si,
                score: d / (cn * step_norms[si]),
            });
        }
        textsim::rank_prefix(&mut scored, k);
        per_clip.push(scored);
    }
    Ok(PseudoLabelSet { per_clip })
}

/// Walks parent links from `leaf` up to its root and returns them root first.
pub fn resolve_path(leaf: usize, hierarchy: &Hierarchy) -> Result<HierarchyPath> {
    let mut node = hierarchy
        .node(leaf)
        .ok_or_else(|| PivotError::Validation(format!("unknown hierarchy node {leaf}")))?;
    let mut chain = vec![node.node_id];
    while let Some(p) = node.parent {
        node = hierarchy
            .node(p)
            .ok_or_else(|| PivotError::Validation(format!("unknown hierarchy node {p}")))?;
        chain.push(node.node_id);
        if chain.len() > hierarchy.depth() {
            return Err(PivotError::Validation(format!(
                "parent chain from {leaf} is longer than the hierarchy depth"
            )));
        }
    }
    chain.reverse();
    Ok(HierarchyPath(chain))
}

/// The task whose name embedding is closest (cosine) to the leaf name's.
/// Ties go to the lower task id.
pub fn match_topic(
    leaf_name: &str,
    tasks: &[TaskSpec],
    embedder: &dyn TextEmbedder,
) -> Result<TopicMatch> {
    if tasks.is_empty() {
        return Err(PivotError::Validation("match_topic: empty task list".into()));
    }
    let leaf = embedder.embed(leaf_name);
    let mut best: Option<TopicMatch> = None;
    for t in tasks {
        let score = textsim::cosine(&leaf, &embedder.embed(&t.name))?;
        let better = match best {
            None => true,
            Some(b) => score > b.score || (score == b.score && t.task_id < b.task_id),
        };
        if better {
            best = Some(TopicMatch {
                task_id: t.task_id,
                score,
            });
        }
    }
    Ok(best.unwrap())
}

/// Everything mined for one video; one line of `labels.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoLabels {
    pub video_id: String,
    pub path: Vec<usize>,
    pub topic: TopicMatch,
    /// Per clip, `[step_id, score]` pairs, best first.
    pub clips: Vec<Vec<(usize, f64)>>,
}

impl VideoLabels {
    pub fn pseudo_labels(&self) -> PseudoLabelSet {
        PseudoLabelSet {
            per_clip: self
                .clips
                .iter()
                .map(|c| {
                    c.iter()
                        .map(|&(step_id, score)| ScoredLabel { step_id, score })
                        .collect()
                })
                .collect(),
        }
    }
}

/// Mines every video of a corpus. Results follow corpus order.
pub fn mine_corpus(bundle: &CorpusBundle, k: usize) -> Result<Vec<VideoLabels>> {
    let hierarchy = bundle.hierarchy()?;
    let steps = bundle.step_embeddings();
    let embedder = SyntheticEmbedder {
        dim: bundle.dim,
        seed: bundle.embed_seed,
    };
    let mut out = Vec::with_capacity(bundle.videos.len());
    for v in &bundle.videos {
        let labels = mine_pseudo_labels(v, &steps, k)?;
        let path = resolve_path(v.leaf_node, &hierarchy)?;
        let leaf_name = &hierarchy.node(v.leaf_node).unwrap().name;
        let topic = match_topic(leaf_name, &bundle.tasks, &embedder)?;
        out.push(VideoLabels {
            video_id: v.video_id.clone(),
            path: path.0,
            topic,
            clips: labels
                .per_clip
                .iter()
                .map(|c| c.iter().map(|s| (s.step_id, s.score)).collect())
                .collect(),
        });
    }
    Ok(out)
}

pub fn write_labels(path: &Path, labels: &[VideoLabels]) -> Result<()> {
    let mut buf = Vec::new();
    for l in labels {
        serde_json::to_writer(&mut buf, l).expect("labels serialize");
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| PivotError::io(path, e))?;
    f.write_all(&buf).map_err(|e| PivotError::io(path, e))
}

pub fn read_labels(path: &Path) -> Result<Vec<VideoLabels>> {
    let f = fs::File::open(path).map_err(|e| PivotError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| PivotError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| PivotError::Parse {
            file: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Pairs each video with its labels, checking ids and lengths agree.
pub fn align_labels<'a>(
    bundle: &'a CorpusBundle,
    labels: &'a [VideoLabels],
) -> Result<Vec<(&'a VideoRecord, &'a VideoLabels)>> {
    let by_id: std::collections::HashMap<&str, &VideoLabels> =
        labels.iter().map(|l| (l.video_id.as_str(), l)).collect();
    bundle
        .videos
        .iter()
        .map(|v| {
            let l = by_id.get(v.video_id.as_str()).ok_or_else(|| {
                PivotError::Validation(format!("no labels for video {}", v.video_id))
            })?;
            if l.clips.len() != v.len() {
                return Err(PivotError::Validation(format!(
                    "video {}: {} labeled clips for {} clips",
                    v.video_id,
                    l.clips.len(),
                    v.len()
                )));
            }
            if let Some(bad) = l.clips.iter().flatten().find(|(s, _)| *s >= bundle.steps.len()) {
                return Err(PivotError::Validation(format!(
                    "video {}: label references unknown step {}",
                    v.video_id, bad.0
                )));
            }
            if l.clips.iter().any(|c| c.is_empty()) {
                return Err(PivotError::Validation(format!(
                    "video {}: a clip has no labels",
                    v.video_id
                )));
            }
            Ok((v, *l))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusConfig, HierarchyNode};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn rand_emb(rng: &mut ChaCha8Rng, dim: usize) -> Embedding {
        Embedding((0..dim).map(|_| rng.sample(StandardNormal)).collect())
    }

    fn video_with_captions(captions: Vec<Embedding>) -> VideoRecord {
        VideoRecord {
            video_id: "v".into(),
            leaf_node: 0,
            clip_embeddings: captions.clone(),
            caption_embeddings: captions,
            caption_texts: None,
            gold_task: None,
            gold_steps: None,
        }
    }

    #[test]
    fn identity_alignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let steps: Vec<Embedding> = (0..8).map(|_| rand_emb(&mut rng, 16)).collect();
        let v = video_with_captions(vec![steps[5].clone(), steps[2].clone()]);
        let y = mine_pseudo_labels(&v, &steps, 1).unwrap();
        assert_eq!(y.len(), v.len());
        assert_eq!(y.per_clip[0][0].step_id, 5);
        assert!((y.per_clip[0][0].score - 1.0).abs() < 1e-12);
        assert_eq!(y.per_clip[1][0].step_id, 2);
    }

    #[test]
    fn empty_catalog_rejected() {
        let v = video_with_captions(vec![Embedding(vec![1.0, 0.0])]);
        assert!(mine_pseudo_labels(&v, &[], 1).is_err());
    }

    #[test]
    fn matches_exhaustive_cosine_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let steps: Vec<Embedding> = (0..30).map(|_| rand_emb(&mut rng, 12)).collect();
        let v = video_with_captions((0..10).map(|_| rand_emb(&mut rng, 12)).collect());
        let y = mine_pseudo_labels(&v, &steps, 3).unwrap();
        for (c, got) in v.caption_embeddings.iter().zip(&y.per_clip) {
            let mut all: Vec<(usize, f64)> = steps
                .iter()
                .enumerate()
                .map(|(i, s)| (i, textsim::cosine(c, s).unwrap()))
                .collect();
            all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            let want: Vec<usize> = all.iter().take(3).map(|p| p.0).collect();
            assert_eq!(got.iter().map(|s| s.step_id).collect::<Vec<_>>(), want);
        }
    }

    fn chain_hierarchy() -> Hierarchy {
        Hierarchy::new(&[
            HierarchyNode { node_id: 2, name: "root".into(), level: 1, parent: None },
            HierarchyNode { node_id: 14, name: "child".into(), level: 2, parent: Some(2) },
            HierarchyNode { node_id: 30, name: "leaf".into(), level: 3, parent: Some(14) },
            HierarchyNode { node_id: 5, name: "other".into(), level: 1, parent: None },
        ])
        .unwrap()
    }

    #[test]
    fn resolve_path_examples() {
        let h = chain_hierarchy();
        assert_eq!(resolve_path(30, &h).unwrap().0, vec![2, 14, 30]);
        assert_eq!(resolve_path(5, &h).unwrap().0, vec![5]);
        assert!(resolve_path(99, &h).is_err());
    }

    #[test]
    fn generated_paths_satisfy_parent_relation() {
        let b = generate_corpus(&CorpusConfig::default(), 4).unwrap();
        let h = b.hierarchy().unwrap();
        for &leaf in h.nodes_at_level(3) {
            let p = resolve_path(leaf, &h).unwrap();
            assert_eq!(p.len(), 3);
            assert_eq!(h.node(p.0[0]).unwrap().level, 1);
            for w in p.0.windows(2) {
                assert_eq!(h.node(w[1]).unwrap().parent, Some(w[0]));
            }
            assert_eq!(p.leaf(), Some(leaf));
        }
    }

    fn tasks(names: &[&str]) -> Vec<TaskSpec> {
        names
            .iter()
            .enumerate()
            .map(|(i, n)| TaskSpec { task_id: i, name: n.to_string(), step_ids: vec![0] })
            .collect()
    }

    #[test]
    fn topic_exact_name_and_singleton() {
        let e = SyntheticEmbedder { dim: 32, seed: 0 };
        let t = tasks(&["make bread", "Chicken Alfredo", "fix a tire"]);
        let m = match_topic("Chicken Alfredo", &t, &e).unwrap();
        assert_eq!(m.task_id, 1);
        assert!((m.score - 1.0).abs() < 1e-12);
        let single = tasks(&["anything"]);
        assert_eq!(match_topic("zzz", &single, &e).unwrap().task_id, 0);
        assert!(match_topic("zzz", &[], &e).is_err());
    }

    #[test]
    fn topic_matches_brute_force_and_is_order_invariant() {
        let e = SyntheticEmbedder { dim: 32, seed: 3 };
        let names: Vec<String> = (0..20).map(|i| format!("task number {i}")).collect();
        let refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
        let t = tasks(&refs);
        for q in ["leaf a", "leaf b", "pancakes", "shelf"] {
            let m = match_topic(q, &t, &e).unwrap();
            let qe = e.embed(q);
            let best = names
                .iter()
                .enumerate()
                .map(|(i, n)| (i, textsim::cosine(&qe, &e.embed(n)).unwrap()))
                .fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
            assert_eq!(m.task_id, best.0);

            let mut rev = t.clone();
            rev.reverse();
            for (i, task) in rev.iter_mut().enumerate() {
                task.task_id = i;
            }
            let m2 = match_topic(q, &rev, &e).unwrap();
            assert_eq!(rev[m2.task_id].name, t[m.task_id].name);
        }
    }

    #[test]
    fn labels_file_round_trip() {
        let cfg = CorpusConfig {
            level_counts: vec![1, 2, 2],
            videos_per_leaf: 2,
            dim: 16,
            ..CorpusConfig::default()
        };
        let b = generate_corpus(&cfg, 1).unwrap();
        let labels = mine_corpus(&b, 2).unwrap();
        assert_eq!(labels.len(), b.videos.len());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("labels.jsonl");
        write_labels(&p, &labels).unwrap();
        assert_eq!(read_labels(&p).unwrap(), labels);
        assert_eq!(align_labels(&b, &labels).unwrap().len(), b.videos.len());
    }

    #[test]
    fn plant_and_recover_without_noise() {
        let cfg = CorpusConfig {
            noise_scale: 0.0,
            ..CorpusConfig::default()
        };
        let b = generate_corpus(&cfg, 7).unwrap();
        let labels = mine_corpus(&b, 1).unwrap();
        let mut planted = 0;
        for (v, l) in b.videos.iter().zip(&labels) {
            for (g, c) in v.gold_steps.as_ref().unwrap().iter().zip(&l.clips) {
                if let Some(g) = g {
                    assert_eq!(c[0].0, *g, "video {}", v.video_id);
                    planted += 1;
                }
            }
            // topic is the primary task of the leaf
            assert_eq!(Some(l.topic.task_id), v.gold_task);
        }
        assert!(planted > 0);
    }
}
