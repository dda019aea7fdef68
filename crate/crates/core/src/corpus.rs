//! Tasks, steps, the category hierarchy and videos; synthetic generation and
//! the on-disk corpus directory format.
//!
//! A corpus directory holds `manifest.json`, `steps.json`, `tasks.json`,
//! `hierarchy.json` and `videos.jsonl` (one video per line). An optional
//! `step_embeddings.pemb` replaces the synthetic text embedder for steps.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{PivotError, Result};
use crate::textsim::{self, embed_text, Embedding, EmbeddingCache, EMBED_NORM_RANGE};
use crate::util;

pub const CORPUS_FORMAT_VERSION: u32 = 1;
pub const STEP_EMBEDDINGS_FILE: &str = "step_embeddings.pemb";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub step_id: usize,
    pub text: String,
}

/// A how-to task: an ordered list of steps, in execution order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: usize,
    pub name: String,
    pub step_ids: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchyNode {
    pub node_id: usize,
    pub name: String,
    /// 1-based depth; roots live at level 1.
    pub level: usize,
    pub parent: Option<usize>,
}

/// Root-to-leaf node ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HierarchyPath(pub Vec<usize>);

impl HierarchyPath {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn leaf(&self) -> Option<usize> {
        self.0.last().copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub video_id: String,
    pub leaf_node: usize,
    #[serde(rename = "clips")]
    pub clip_embeddings: Vec<Embedding>,
    #[serde(rename = "captions")]
    pub caption_embeddings: Vec<Embedding>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption_texts: Option<Vec<String>>,
    /// Ground-truth task, when known (synthetic corpora, downstream sets).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_task: Option<usize>,
    /// Ground-truth step per clip; `None` marks background clips.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_steps: Option<Vec<Option<usize>>>,
}

impl VideoRecord {
    pub fn len(&self) -> usize {
        self.clip_embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clip_embeddings.is_empty()
    }

    /// Drops clips past `max_len`, keeping parallel fields in sync.
    pub fn truncate(&mut self, max_len: usize) {
        if self.len() > max_len {
            log::warn!(
                "video {} has {} clips; truncating to {max_len}",
                self.video_id,
                self.len()
            );
            self.clip_embeddings.truncate(max_len);
            self.caption_embeddings.truncate(max_len);
            if let Some(t) = self.caption_texts.as_mut() {
                t.truncate(max_len);
            }
            if let Some(g) = self.gold_steps.as_mut() {
                g.truncate(max_len);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusBundle {
    pub steps: Vec<Step>,
    pub tasks: Vec<TaskSpec>,
    pub hierarchy: Vec<HierarchyNode>,
    pub videos: Vec<VideoRecord>,
    pub dim: usize,
    /// Seed of the text embedder used for step, task and node names.
    pub embed_seed: u64,
    /// Precomputed step embeddings; when absent they come from [`embed_text`].
    pub step_embedding_table: Option<Vec<Embedding>>,
}

impl CorpusBundle {
    pub fn step_embeddings(&self) -> Vec<Embedding> {
        if let Some(t) = &self.step_embedding_table {
            return t.clone();
        }
        let mut cache = EmbeddingCache::new();
        self.steps
            .iter()
            .map(|s| cache.get(&s.text, self.dim, self.embed_seed).clone())
            .collect()
    }

    pub fn hierarchy(&self) -> Result<Hierarchy> {
        Hierarchy::new(&self.hierarchy)
    }

    pub fn node(&self, node_id: usize) -> Option<&HierarchyNode> {
        self.hierarchy.iter().find(|n| n.node_id == node_id)
    }

    pub fn validate(&self) -> Result<()> {
        validate_bundle(self)
    }

    /// Same catalog and hierarchy, with `videos` in place of the current ones.
    pub fn with_videos(&self, videos: Vec<VideoRecord>) -> CorpusBundle {
        CorpusBundle {
            videos,
            ..self.clone()
        }
    }
}

/// Indexed view of a validated hierarchy.
#[derive(Debug, Clone)]
pub struct Hierarchy {
    nodes: HashMap<usize, HierarchyNode>,
    /// node ids per level (index 0 = level 1), sorted ascending
    levels: Vec<Vec<usize>>,
    index_in_level: HashMap<usize, usize>,
}

impl Hierarchy {
    pub fn new(nodes: &[HierarchyNode]) -> Result<Self> {
        validate_hierarchy(nodes)?;
        let depth = nodes.iter().map(|n| n.level).max().unwrap_or(0);
        let mut levels = vec![Vec::new(); depth];
        for n in nodes {
            levels[n.level - 1].push(n.node_id);
        }
        let mut index_in_level = HashMap::new();
        for lvl in levels.iter_mut() {
            lvl.sort_unstable();
            for (i, &id) in lvl.iter().enumerate() {
                index_in_level.insert(id, i);
            }
        }
        Ok(Hierarchy {
            nodes: nodes.iter().map(|n| (n.node_id, n.clone())).collect(),
            levels,
            index_in_level,
        })
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn level_sizes(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.len()).collect()
    }

    pub fn node(&self, id: usize) -> Option<&HierarchyNode> {
        self.nodes.get(&id)
    }

    /// Position of a node among the nodes of its level; the class index for that level's head.
    pub fn index_in_level(&self, id: usize) -> Option<usize> {
        self.index_in_level.get(&id).copied()
    }

    pub fn nodes_at_level(&self, level: usize) -> &[usize] {
        &self.levels[level - 1]
    }
}

// --- validation ---------------------------------------------------------------

fn invalid<T>(msg: String) -> Result<T> {
    Err(PivotError::Validation(msg))
}

pub fn validate_hierarchy(nodes: &[HierarchyNode]) -> Result<()> {
    if nodes.is_empty() {
        return invalid("hierarchy is empty".into());
    }
    let mut by_id = HashMap::new();
    for n in nodes {
        if by_id.insert(n.node_id, n).is_some() {
            return invalid(format!("hierarchy: duplicate node_id {}", n.node_id));
        }
        if n.name.is_empty() {
            return invalid(format!("hierarchy: node {} has an empty name", n.node_id));
        }
        if n.level == 0 {
            return invalid(format!("hierarchy: node {} has level 0 (levels start at 1)", n.node_id));
        }
    }
    for n in nodes {
        match (n.level, n.parent) {
            (1, None) => {}
            (1, Some(p)) => {
                return invalid(format!("hierarchy: root node {} has parent {p}", n.node_id))
            }
            (_, None) => {
                return invalid(format!(
                    "hierarchy: node {} at level {} has no parent",
                    n.node_id, n.level
                ))
            }
            (lvl, Some(p)) => match by_id.get(&p) {
                None => {
                    return invalid(format!(
                        "hierarchy: node {} references unknown parent {p}",
                        n.node_id
                    ))
                }
                // strict level decrease rules out cycles
                Some(parent) if parent.level + 1 != lvl => {
                    return invalid(format!(
                        "hierarchy: node {} at level {lvl} has parent {p} at level {} (expected {})",
                        n.node_id,
                        parent.level,
                        lvl - 1
                    ))
                }
                Some(_) => {}
            },
        }
    }
    let depth = nodes.iter().map(|n| n.level).max().unwrap();
    for lvl in 1..=depth {
        if !nodes.iter().any(|n| n.level == lvl) {
            return invalid(format!("hierarchy: no node at level {lvl}"));
        }
    }
    Ok(())
}

fn validate_bundle(b: &CorpusBundle) -> Result<()> {
    if b.dim == 0 {
        return invalid("corpus dim must be positive".into());
    }
    for (i, s) in b.steps.iter().enumerate() {
        if s.step_id != i {
            return invalid(format!(
                "steps: step_id {} at position {i}; ids must be contiguous from 0",
                s.step_id
            ));
        }
        if s.text.is_empty() {
            return invalid(format!("steps: step {i} has empty text"));
        }
    }
    for (i, t) in b.tasks.iter().enumerate() {
        if t.task_id != i {
            return invalid(format!(
                "tasks: task_id {} at position {i}; ids must be contiguous from 0",
                t.task_id
            ));
        }
        if t.step_ids.is_empty() {
            return invalid(format!("tasks: task {} ({}) has no steps", t.task_id, t.name));
        }
        if let Some(bad) = t.step_ids.iter().find(|&&s| s >= b.steps.len()) {
            return invalid(format!("tasks: task {} references unknown step {bad}", t.task_id));
        }
    }
    let hier = Hierarchy::new(&b.hierarchy)?;
    if let Some(table) = &b.step_embedding_table {
        if table.len() != b.steps.len() {
            return invalid(format!(
                "step embedding table has {} rows for {} steps",
                table.len(),
                b.steps.len()
            ));
        }
        if let Some(r) = table.iter().position(|e| e.dim() != b.dim) {
            return invalid(format!("step embedding row {r} does not have dim {}", b.dim));
        }
    }
    let mut seen = HashSet::new();
    for v in &b.videos {
        validate_video(v, b.dim, &hier, b.steps.len(), b.tasks.len())?;
        if !seen.insert(v.video_id.as_str()) {
            return invalid(format!("videos: duplicate video_id {}", v.video_id));
        }
    }
    Ok(())
}

fn validate_video(
    v: &VideoRecord,
    dim: usize,
    hier: &Hierarchy,
    n_steps: usize,
    n_tasks: usize,
) -> Result<()> {
    let id = &v.video_id;
    if v.clip_embeddings.is_empty() {
        return invalid(format!("video {id}: no clips"));
    }
    if v.clip_embeddings.len() != v.caption_embeddings.len() {
        return invalid(format!(
            "video {id}: {} clips but {} captions",
            v.clip_embeddings.len(),
            v.caption_embeddings.len()
        ));
    }
    if hier.node(v.leaf_node).is_none() {
        return invalid(format!("video {id}: unknown leaf node {}", v.leaf_node));
    }
    for (kind, seq) in [("clip", &v.clip_embeddings), ("caption", &v.caption_embeddings)] {
        for (i, e) in seq.iter().enumerate() {
            if e.dim() != dim {
                return invalid(format!(
                    "video {id}: {kind} {i} has dim {} (corpus dim {dim})",
                    e.dim()
                ));
            }
            if !e.is_finite() {
                return invalid(format!("video {id}: {kind} {i} has non-finite entries"));
            }
        }
    }
    if let Some(t) = &v.caption_texts {
        if t.len() != v.len() {
            return invalid(format!(
                "video {id}: {} caption texts for {} clips",
                t.len(),
                v.len()
            ));
        }
    }
    if let Some(g) = v.gold_task {
        if g >= n_tasks {
            return invalid(format!("video {id}: gold_task {g} out of range"));
        }
    }
    if let Some(gs) = &v.gold_steps {
        if gs.len() != v.len() {
            return invalid(format!(
                "video {id}: {} gold steps for {} clips",
                gs.len(),
                v.len()
            ));
        }
        if let Some(bad) = gs.iter().flatten().find(|&&s| s >= n_steps) {
            return invalid(format!("video {id}: gold step {bad} out of range"));
        }
    }
    Ok(())
}

// --- segment pooling -----------------------------------------------------------

/// Mean of segment-level features, e.g. three consecutive segments making one clip.
pub fn pool_segments(segments: &[Embedding]) -> Result<Embedding> {
    let first = segments
        .first()
        .ok_or_else(|| PivotError::Validation("pool_segments: no segments".into()))?;
    let dim = first.dim();
    let mut acc = vec![0.0; dim];
    for s in segments {
        if s.dim() != dim {
            return Err(PivotError::DimMismatch {
                expected: dim,
                got: s.dim(),
            });
        }
        acc.iter_mut().zip(s.iter()).for_each(|(a, x)| *a += x);
    }
    let n = segments.len() as f64;
    Ok(Embedding(acc.into_iter().map(|a| a / n).collect()))
}

// --- synthetic generation ------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    /// Node count per hierarchy level, root level first.
    pub level_counts: Vec<usize>,
    pub tasks_per_leaf: usize,
    pub steps_per_task: usize,
    pub videos_per_leaf: usize,
    pub clips_per_video: usize,
    pub dim: usize,
    /// Norm of the isotropic noise added to clip and caption embeddings.
    pub noise_scale: f64,
    /// Probability of swapping each adjacent pair of planted clips.
    pub shuffle_prob: f64,
    /// Probability a clip is unrelated background content.
    pub filler_prob: f64,
    /// Probability a clip shows a step from some other task.
    pub distractor_prob: f64,
    /// Probability a secondary task reuses the primary task's step at the same position.
    pub shared_step_prob: f64,
    /// Norm of the per-video offset added to every clip of the video.
    pub nuisance_scale: f64,
    pub nuisance_rank: usize,
    /// Fixes the nuisance subspace; shared by corpora meant to look alike.
    pub backbone_seed: u64,
    pub embed_seed: u64,
    /// Prefix for every generated name, to keep vocabularies disjoint.
    pub namespace: String,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            level_counts: vec![3, 9, 27],
            tasks_per_leaf: 2,
            steps_per_task: 6,
            videos_per_leaf: 8,
            clips_per_video: 12,
            dim: 64,
            noise_scale: 0.6,
            shuffle_prob: 0.2,
            filler_prob: 0.1,
            distractor_prob: 0.1,
            shared_step_prob: 0.3,
            nuisance_scale: 1.0,
            nuisance_rank: 8,
            backbone_seed: 0xB0B5_EED5,
            embed_seed: 0,
            namespace: String::new(),
        }
    }
}

impl CorpusConfig {
    /// Larger preset: five roots, 25 children, 125 leaves.
    pub fn large() -> Self {
        CorpusConfig {
            level_counts: vec![5, 25, 125],
            ..CorpusConfig::default()
        }
    }

    /// Downstream corpus: its own hierarchy and step vocabulary, but the
    /// same nuisance subspace as the default corpora.
    pub fn transfer() -> Self {
        CorpusConfig {
            level_counts: vec![2, 4, 8],
            videos_per_leaf: 20,
            namespace: TRANSFER_NAMESPACE.to_string(),
            ..CorpusConfig::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.level_counts.is_empty() || self.level_counts.contains(&0) {
            return invalid(format!(
                "corpus config: every level needs at least one node ({:?})",
                self.level_counts
            ));
        }
        if self.level_counts.windows(2).any(|w| w[1] < w[0]) {
            return invalid("corpus config: a level cannot have fewer nodes than its parent level".into());
        }
        for (name, v) in [
            ("tasks_per_leaf", self.tasks_per_leaf),
            ("steps_per_task", self.steps_per_task),
            ("videos_per_leaf", self.videos_per_leaf),
            ("clips_per_video", self.clips_per_video),
            ("dim", self.dim),
        ] {
            if v == 0 {
                return invalid(format!("corpus config: {name} must be positive"));
            }
        }
        for (name, p) in [
            ("shuffle_prob", self.shuffle_prob),
            ("filler_prob", self.filler_prob),
            ("distractor_prob", self.distractor_prob),
            ("shared_step_prob", self.shared_step_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return invalid(format!("corpus config: {name} must lie in [0, 1]"));
            }
        }
        if self.filler_prob + self.distractor_prob > 1.0 {
            return invalid("corpus config: filler_prob + distractor_prob exceeds 1".into());
        }
        if self.noise_scale < 0.0 || self.nuisance_scale < 0.0 {
            return invalid("corpus config: noise scales must be non-negative".into());
        }
        Ok(())
    }
}

/// Name prefix of [`CorpusConfig::transfer`] corpora.
pub const TRANSFER_NAMESPACE: &str = "xfer ";

const CATEGORY_WORDS: &[&str] = &[
    "Food", "Home", "Vehicles", "Crafts", "Garden", "Sports", "Health", "Pets", "Tech", "Music",
];
const VERBS: &[&str] = &[
    "cut", "boil", "mix", "attach", "sand", "paint", "fold", "measure", "pour", "tighten",
    "whisk", "season", "clean", "align", "trim", "glue", "drain", "heat", "remove", "press",
];
const OBJECTS: &[&str] = &[
    "chicken", "pasta", "board", "screw", "fabric", "dough", "sauce", "hinge", "panel", "wire",
    "tile", "frame", "onion", "bolt", "seam", "filter", "pan", "bracket", "lid", "hose",
];

fn gaussian(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

fn add_scaled(acc: &mut [f64], v: &[f64], s: f64) {
    acc.iter_mut().zip(v).for_each(|(a, x)| *a += s * x);
}

/// Unit-norm-in-expectation isotropic noise scaled to `scale`.
fn noise(rng: &mut impl Rng, dim: usize, scale: f64) -> Vec<f64> {
    let g = gaussian(rng, dim);
    let s = scale / (dim as f64).sqrt();
    g.into_iter().map(|x| x * s).collect()
}

/// Seeded synthetic corpus whose clips are noisy copies of known steps.
///
/// Every video follows the primary task of its leaf (the task whose name
/// equals the leaf name), in a mostly chronological order with occasional
/// neighbor swaps, plus background and off-task clips. Captions are rescaled
/// noisy copies of the same step embeddings, so caption-to-step mining
/// recovers the planted labels. The result is a pure function of `(config, seed)`.
pub fn generate_corpus(config: &CorpusConfig, seed: u64) -> Result<CorpusBundle> {
    config.validate()?;
    let ns = &config.namespace;
    let dim = config.dim;
    let mut rng = util::stream(&[seed, 0xC0]);

    // hierarchy
    let mut hierarchy = Vec::new();
    let mut prev_level: Vec<usize> = Vec::new();
    for (li, &count) in config.level_counts.iter().enumerate() {
        let level = li + 1;
        let mut this_level = Vec::with_capacity(count);
        for i in 0..count {
            let node_id = hierarchy.len();
            let parent = if level == 1 {
                None
            } else {
                // even spread: node i goes to parent floor(i * |prev| / count)
                Some(prev_level[i * prev_level.len() / count])
            };
            let name = match level {
                1 => format!("{ns}{} {i}", CATEGORY_WORDS[i % CATEGORY_WORDS.len()]),
                _ => format!(
                    "{ns}{} {} L{level}-{i}",
                    VERBS[(i * 7 + level) % VERBS.len()],
                    OBJECTS[(i * 3 + level) % OBJECTS.len()]
                ),
            };
            hierarchy.push(HierarchyNode {
                node_id,
                name,
                level,
                parent,
            });
            this_level.push(node_id);
        }
        prev_level = this_level;
    }
    let leaves = prev_level;

    // catalog: tasks per leaf; task 0 of a leaf carries the leaf's name
    let mut steps: Vec<Step> = Vec::new();
    let mut tasks: Vec<TaskSpec> = Vec::new();
    let mut leaf_primary_task = Vec::with_capacity(leaves.len());
    for (li, &leaf) in leaves.iter().enumerate() {
        let leaf_name = hierarchy[leaf].name.clone();
        let mut primary_steps: Vec<usize> = Vec::new();
        for t in 0..config.tasks_per_leaf {
            let task_id = tasks.len();
            let mut step_ids = Vec::with_capacity(config.steps_per_task);
            for k in 0..config.steps_per_task {
                let reuse = t > 0 && rng.random::<f64>() < config.shared_step_prob;
                if reuse {
                    step_ids.push(primary_steps[k]);
                } else {
                    let step_id = steps.len();
                    let verb = VERBS[rng.random_range(0..VERBS.len())];
                    let obj = OBJECTS[rng.random_range(0..OBJECTS.len())];
                    steps.push(Step {
                        step_id,
                        text: format!("{ns}{verb} the {obj} ({li}.{t}.{k})"),
                    });
                    step_ids.push(step_id);
                }
            }
            if t == 0 {
                primary_steps = step_ids.clone();
                leaf_primary_task.push(task_id);
            }
            let name = if t == 0 {
                leaf_name.clone()
            } else {
                format!("{leaf_name} (variant {t})")
            };
            tasks.push(TaskSpec {
                task_id,
                name,
                step_ids,
            });
        }
    }

    let mut cache = EmbeddingCache::new();
    let step_emb: Vec<Embedding> = steps
        .iter()
        .map(|s| cache.get(&s.text, dim, config.embed_seed).clone())
        .collect();

    // nuisance subspace: fixed by backbone_seed, not by the corpus seed
    let mut brng = util::stream(&[config.backbone_seed, dim as u64, 0xBB]);
    let basis: Vec<Vec<f64>> = (0..config.nuisance_rank)
        .map(|_| {
            let g = gaussian(&mut brng, dim);
            let n = textsim::norm(&g);
            g.into_iter().map(|x| x / n).collect()
        })
        .collect();

    let n_clips = config.clips_per_video;
    let (lo, hi) = EMBED_NORM_RANGE;
    let mut videos = Vec::with_capacity(leaves.len() * config.videos_per_leaf);
    for (li, &leaf) in leaves.iter().enumerate() {
        let task = &tasks[leaf_primary_task[li]];
        let in_task: HashSet<usize> = task.step_ids.iter().copied().collect();
        let off_task: Vec<usize> = (0..steps.len()).filter(|s| !in_task.contains(s)).collect();
        for vi in 0..config.videos_per_leaf {
            let video_id = format!("{ns}v{li:03}_{vi:02}");
            let mut vrng = util::stream(&[seed, util::str_key(&video_id)]);

            // chronological plan: sorted uniform positions mapped onto step slots
            let mut u: Vec<f64> = (0..n_clips).map(|_| vrng.random::<f64>()).collect();
            u.sort_by(f64::total_cmp);
            let k = task.step_ids.len();
            let mut plan: Vec<Option<usize>> = u
                .iter()
                .map(|x| Some(task.step_ids[((x * k as f64) as usize).min(k - 1)]))
                .collect();
            for j in 0..n_clips.saturating_sub(1) {
                if vrng.random::<f64>() < config.shuffle_prob {
                    plan.swap(j, j + 1);
                }
            }
            for slot in plan.iter_mut() {
                let r = vrng.random::<f64>();
                if r < config.filler_prob {
                    *slot = None;
                } else if r < config.filler_prob + config.distractor_prob && !off_task.is_empty() {
                    *slot = Some(*off_task.choose(&mut vrng).unwrap());
                }
            }

            let mut offset = vec![0.0; dim];
            if config.nuisance_scale > 0.0 && !basis.is_empty() {
                let z = gaussian(&mut vrng, basis.len());
                let s = config.nuisance_scale / (basis.len() as f64).sqrt();
                for (b, zi) in basis.iter().zip(z) {
                    add_scaled(&mut offset, b, s * zi);
                }
            }

            let mut clips = Vec::with_capacity(n_clips);
            let mut captions = Vec::with_capacity(n_clips);
            let mut texts = Vec::with_capacity(n_clips);
            for (j, slot) in plan.iter().enumerate() {
                let (base, cap_text) = match slot {
                    Some(s) => (step_emb[*s].0.clone(), steps[*s].text.clone()),
                    None => {
                        let t = format!("{ns}background chatter {video_id}/{j}");
                        let vis = embed_text(&format!("{t}#visual"), dim, config.embed_seed);
                        (vis.0, t)
                    }
                };
                let mut clip = base.clone();
                add_scaled(&mut clip, &noise(&mut vrng, dim, config.noise_scale), 1.0);
                add_scaled(&mut clip, &offset, 1.0);

                let caption = match slot {
                    Some(_) => {
                        let mut c = base;
                        add_scaled(&mut c, &noise(&mut vrng, dim, config.noise_scale), 1.0);
                        let n = textsim::norm(&c);
                        let target = lo + (hi - lo) * vrng.random::<f64>();
                        c.iter_mut().for_each(|x| *x *= target / n);
                        Embedding(c)
                    }
                    None => embed_text(&cap_text, dim, config.embed_seed),
                };
                clips.push(Embedding(clip));
                captions.push(caption);
                texts.push(cap_text);
            }
            videos.push(VideoRecord {
                video_id,
                leaf_node: leaf,
                clip_embeddings: clips,
                caption_embeddings: captions,
                caption_texts: Some(texts),
                gold_task: Some(task.task_id),
                gold_steps: Some(plan),
            });
        }
    }

    let bundle = CorpusBundle {
        steps,
        tasks,
        hierarchy,
        videos,
        dim,
        embed_seed: config.embed_seed,
        step_embedding_table: None,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Deterministic train/held-out split: `fraction` of videos (at least one,
/// when there are two or more) go to the second set.
pub fn split_videos(bundle: &CorpusBundle, fraction: f64, seed: u64) -> (CorpusBundle, CorpusBundle) {
    let held = holdout_mask(bundle.videos.len(), fraction, seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (v, &h) in bundle.videos.iter().zip(&held) {
        if h {
            test.push(v.clone());
        } else {
            train.push(v.clone());
        }
    }
    (bundle.with_videos(train), bundle.with_videos(test))
}

/// Seeded choice of `round(fraction·n)` held-out items, clamped so both
/// sides are nonempty when `n ≥ 2`.
pub fn holdout_mask(n: usize, fraction: f64, seed: u64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut util::stream(&[seed, 0x5B17]));
    let mut n_held = (fraction * n as f64).round() as usize;
    if n >= 2 {
        n_held = n_held.clamp(1, n - 1);
    } else {
        n_held = 0;
    }
    let mut held = vec![false; n];
    for &i in &order[..n_held] {
        held[i] = true;
    }
    held
}

// --- disk format ----------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format_version: u32,
    pub dim: usize,
    pub embed_seed: u64,
    pub n_steps: usize,
    pub n_tasks: usize,
    pub n_nodes: usize,
    pub n_videos: usize,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| PivotError::io(path, e))?;
    f.write_all(bytes).map_err(|e| PivotError::io(path, e))
}

fn to_json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(v).expect("corpus records serialize");
    s.push(b'\n');
    s
}

pub fn save_corpus(bundle: &CorpusBundle, dir: &Path) -> Result<()> {
    bundle.validate()?;
    fs::create_dir_all(dir).map_err(|e| PivotError::io(dir, e))?;
    let manifest = CorpusManifest {
        format_version: CORPUS_FORMAT_VERSION,
        dim: bundle.dim,
        embed_seed: bundle.embed_seed,
        n_steps: bundle.steps.len(),
        n_tasks: bundle.tasks.len(),
        n_nodes: bundle.hierarchy.len(),
        n_videos: bundle.videos.len(),
    };
    write_file(&dir.join("manifest.json"), &to_json(&manifest))?;
    write_file(&dir.join("steps.json"), &to_json(&bundle.steps))?;
    write_file(&dir.join("tasks.json"), &to_json(&bundle.tasks))?;
    write_file(&dir.join("hierarchy.json"), &to_json(&bundle.hierarchy))?;
    let mut lines = Vec::new();
    for v in &bundle.videos {
        serde_json::to_writer(&mut lines, v).expect("video records serialize");
        lines.push(b'\n');
    }
    write_file(&dir.join("videos.jsonl"), &lines)?;
    let pemb = dir.join(STEP_EMBEDDINGS_FILE);
    match &bundle.step_embedding_table {
        Some(t) => textsim::write_pemb(&pemb, t)?,
        None if pemb.exists() => fs::remove_file(&pemb).map_err(|e| PivotError::io(&pemb, e))?,
        None => {}
    }
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(dir: &Path, name: &str) -> Result<T> {
    let path = dir.join(name);
    let text = fs::read_to_string(&path).map_err(|e| PivotError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| PivotError::Parse {
        file: path.display().to_string(),
        line: e.line(),
        msg: e.to_string(),
    })
}

pub fn load_corpus(dir: &Path) -> Result<CorpusBundle> {
    let manifest: CorpusManifest = read_json(dir, "manifest.json")?;
    if manifest.format_version != CORPUS_FORMAT_VERSION {
        return Err(PivotError::Format(format!(
            "{}: unsupported corpus format_version {}",
            dir.display(),
            manifest.format_version
        )));
    }
    let steps: Vec<Step> = read_json(dir, "steps.json")?;
    let tasks: Vec<TaskSpec> = read_json(dir, "tasks.json")?;
    let hierarchy: Vec<HierarchyNode> = read_json(dir, "hierarchy.json")?;

    let vpath = dir.join("videos.jsonl");
    let f = fs::File::open(&vpath).map_err(|e| PivotError::io(&vpath, e))?;
    let mut videos = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| PivotError::io(&vpath, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let v: VideoRecord = serde_json::from_str(&line).map_err(|e| PivotError::Parse {
            file: vpath.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        videos.push(v);
    }

    let pemb = dir.join(STEP_EMBEDDINGS_FILE);
    let step_embedding_table = if pemb.exists() {
        Some(textsim::read_pemb(&pemb)?)
    } else {
        None
    };
    let bundle = CorpusBundle {
        steps,
        tasks,
        hierarchy,
        videos,
        dim: manifest.dim,
        embed_seed: manifest.embed_seed,
        step_embedding_table,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Per-leaf video counts, handy for reports.
pub fn videos_per_leaf(bundle: &CorpusBundle) -> BTreeMap<usize, usize> {
    let mut m = BTreeMap::new();
    for v in &bundle.videos {
        *m.entry(v.leaf_node).or_insert(0) += 1;
    }
    m
}
