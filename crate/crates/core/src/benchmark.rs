//! Benchmark construction and scoring.
//!
//! Sources are embedded, clustered with k-means and sampled per cluster;
//! the benchmark then pairs them with per-task instructions. Scores are
//! averaged per task first so every task carries the same weight.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng as _;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::model::HashTextEmbedder;
use crate::rng;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "Add Object")]
    AddObject,
    #[serde(rename = "Add Effect")]
    AddEffect,
    #[serde(rename = "Remove Object")]
    RemoveObject,
    #[serde(rename = "Change Object")]
    ChangeObject,
    #[serde(rename = "Change Background")]
    ChangeBackground,
    #[serde(rename = "Change Camera Pose")]
    ChangeCameraPose,
    #[serde(rename = "Stylization")]
    Stylization,
    #[serde(rename = "Reasoning")]
    Reasoning,
    #[serde(rename = "Depth-to-Video")]
    DepthToVideo,
    #[serde(rename = "Sketch-to-Video")]
    SketchToVideo,
    #[serde(rename = "Pose-to-Video")]
    PoseToVideo,
    #[serde(rename = "Video-to-Pose")]
    VideoToPose,
    #[serde(rename = "Video-to-Sketch")]
    VideoToSketch,
    #[serde(rename = "Video-to-Depth")]
    VideoToDepth,
    #[serde(rename = "Combined")]
    Combined,
}

impl Task {
    pub const ALL: [Task; 15] = [
        Task::AddObject,
        Task::AddEffect,
        Task::RemoveObject,
        Task::ChangeObject,
        Task::ChangeBackground,
        Task::ChangeCameraPose,
        Task::Stylization,
        Task::Reasoning,
        Task::DepthToVideo,
        Task::SketchToVideo,
        Task::PoseToVideo,
        Task::VideoToPose,
        Task::VideoToSketch,
        Task::VideoToDepth,
        Task::Combined,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Task::AddObject => "Add Object",
            Task::AddEffect => "Add Effect",
            Task::RemoveObject => "Remove Object",
            Task::ChangeObject => "Change Object",
            Task::ChangeBackground => "Change Background",
            Task::ChangeCameraPose => "Change Camera Pose",
            Task::Stylization => "Stylization",
            Task::Reasoning => "Reasoning",
            Task::DepthToVideo => "Depth-to-Video",
            Task::SketchToVideo => "Sketch-to-Video",
            Task::PoseToVideo => "Pose-to-Video",
            Task::VideoToPose => "Video-to-Pose",
            Task::VideoToSketch => "Video-to-Sketch",
            Task::VideoToDepth => "Video-to-Depth",
            Task::Combined => "Combined",
        }
    }

    /// Column header for the plain-text grid.
    pub fn short(self) -> &'static str {
        match self {
            Task::AddObject => "Add",
            Task::AddEffect => "Effect",
            Task::RemoveObject => "Remove",
            Task::ChangeObject => "Change",
            Task::ChangeBackground => "ChgBG",
            Task::ChangeCameraPose => "CamMov",
            Task::Stylization => "Style",
            Task::Reasoning => "Reason",
            Task::DepthToVideo => "D2V",
            Task::SketchToVideo => "S2V",
            Task::PoseToVideo => "P2V",
            Task::VideoToPose => "V2P",
            Task::VideoToSketch => "V2S",
            Task::VideoToDepth => "V2D",
            Task::Combined => "Comb",
        }
    }

    /// Signal the editor is conditioned on instead of RGB, for X-to-video tasks.
    pub fn conditioning(self) -> Option<ConditioningKind> {
        match self {
            Task::DepthToVideo => Some(ConditioningKind::Depth),
            Task::SketchToVideo => Some(ConditioningKind::Sketch),
            Task::PoseToVideo => Some(ConditioningKind::Pose),
            _ => None,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = |x: &str| x.to_lowercase().replace(['-', '_', ' '], "");
        Task::ALL
            .into_iter()
            .find(|t| key(t.label()) == key(s) || key(t.short()) == key(s))
            .ok_or_else(|| Error::invalid(format!("unknown task {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConditioningKind {
    Depth,
    Sketch,
    Pose,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChangeKind {
    Replace,
    ReplaceWithEffect,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchEntry {
    pub id: usize,
    pub source_id: String,
    pub task: Task,
    pub instruction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conditioning_kind: Option<ConditioningKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub change_kind: Option<ChangeKind>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "VLM")]
    Vlm,
    PickScore,
    TextAlignment,
    TemporalConsistency,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Vlm, Metric::PickScore, Metric::TextAlignment, Metric::TemporalConsistency];

    pub fn short(self) -> &'static str {
        match self {
            Metric::Vlm => "VLM",
            Metric::PickScore => "PS",
            Metric::TextAlignment => "TA",
            Metric::TemporalConsistency => "TC",
        }
    }

    /// VLM is a 0-10 rating, TA/TC are cosine similarities in [-1, 1]
    /// (reported x100 in tables), PickScore is an unbounded logit.
    pub fn check(self, v: f64) -> Result<()> {
        let ok = v.is_finite()
            && match self {
                Metric::Vlm => (0.0..=10.0).contains(&v),
                Metric::TextAlignment | Metric::TemporalConsistency => (-1.0..=1.0).contains(&v),
                Metric::PickScore => true,
            };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("{} value {v} out of range", self.short())))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub entry_id: usize,
    pub metric: Metric,
    pub value: f64,
}

// ---------------------------------------------------------------- embedding

/// Sentence vectors from the hashed word embeddings: mean over words, unit norm.
pub fn embed_sentence(embedder: &HashTextEmbedder, text: &str) -> Vec<f64> {
    let rows: Tensor<f64> = embedder.embed(text);
    let dim = embedder.dim;
    let n = rows.len() / dim;
    let mut v = vec![0.0; dim];
    for row in rows.data().chunks(dim) {
        for (a, b) in v.iter_mut().zip(row) {
            *a += b / n as f64;
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

// ------------------------------------------------------------------ k-means

#[derive(Clone, Debug, PartialEq)]
pub struct Clustering {
    pub assignment: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Objective after seeding and after every Lloyd update.
    pub inertia: Vec<f64>,
    pub iterations: usize,
    pub reseeds: usize,
}

impl Clustering {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn final_inertia(&self) -> f64 {
        *self.inertia.last().expect("at least the seeding objective")
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] == cluster).collect()
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn inertia(points: &[Vec<f64>], centroids: &[Vec<f64>], assignment: &[usize]) -> f64 {
    points.iter().zip(assignment).map(|(p, &c)| dist2(p, &centroids[c])).sum()
}

fn plus_plus(points: &[Vec<f64>], k: usize, r: &mut rng::Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = r.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![points[first].clone()];
    let mut d: Vec<f64> = points.iter().map(|p| dist2(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d.iter().sum();
        let pick = if total > 0.0 {
            let mut u = r.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if u < w {
                        break;
                    }
                    u -= w;
                }
            }
            pick.expect("some point has positive weight")
        } else {
            // all remaining points coincide with a centroid
            (0..n).find(|&i| !chosen[i]).expect("k <= n")
        };
        chosen[pick] = true;
        centroids.push(points[pick].clone());
        for (di, p) in d.iter_mut().zip(points) {
            *di = di.min(dist2(p, &points[pick]));
        }
    }
    centroids
}

/// Nearest centroid; on a tie the point keeps its current cluster, else the lowest index wins.
fn nearest(p: &[f64], centroids: &[Vec<f64>], current: Option<usize>) -> usize {
    let mut best = current.unwrap_or(0);
    let mut best_d = dist2(p, &centroids[best]);
    for (c, cen) in centroids.iter().enumerate() {
        let d = dist2(p, cen);
        if d < best_d {
            best = c;
            best_d = d;
        }
    }
    best
}

/// k-means++ seeding followed by Lloyd iterations until the assignment is a fixpoint.
///
/// A cluster left empty by an assignment step gets its centroid moved onto the
/// point farthest from its own centroid (lowest index on ties), and that point
/// joins it.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<Clustering> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("k = {k} for {n} points")));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim || p.iter().any(|x| !x.is_finite())) {
        return Err(Error::invalid("points must be finite and share one dimension"));
    }
    let mut r = rng::seeded(seed);
    let mut centroids = plus_plus(points, k, &mut r);
    let mut assignment: Vec<usize> = points.iter().map(|p| nearest(p, &centroids, None)).collect();
    let mut history = vec![inertia(points, &centroids, &assignment)];
    let mut iterations = 0;
    let mut reseeds = 0;
    // each pass strictly lowers the objective or stops, so this bound is never hit in practice
    let max_iter = 10_000;
    loop {
        iterations += 1;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&assignment) {
            counts[c] += 1;
            sums[c].iter_mut().zip(p).for_each(|(s, x)| *s += x);
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let far = (0..n)
                .filter(|&i| counts[assignment[i]] > 1)
                .max_by(|&a, &b| {
                    let da = dist2(&points[a], &centroids[assignment[a]]);
                    let db = dist2(&points[b], &centroids[assignment[b]]);
                    da.total_cmp(&db).then(b.cmp(&a))
                })
                .expect("k <= n leaves a donor cluster");
            log::debug!("kmeans: cluster {c} empty, reseeding from point {far}");
            counts[assignment[far]] -= 1;
            counts[c] = 1;
            assignment[far] = c;
            centroids[c] = points[far].clone();
            reseeds += 1;
        }
        history.push(inertia(points, &centroids, &assignment));
        let next: Vec<usize> = points
            .iter()
            .zip(&assignment)
            .map(|(p, &c)| nearest(p, &centroids, Some(c)))
            .collect();
        if next == assignment || iterations >= max_iter {
            break;
        }
        assignment = next;
    }
    Ok(Clustering {
        assignment,
        centroids,
        inertia: history,
        iterations,
        reseeds,
    })
}

/// `per_cluster` members nearest their centroid from each cluster, ties by id.
/// Clusters smaller than `per_cluster` contribute all their members.
pub fn select_diverse<I: Ord + Clone + fmt::Debug>(
    ids: &[I],
    points: &[Vec<f64>],
    clustering: &Clustering,
    per_cluster: usize,
) -> Result<Vec<I>> {
    if ids.len() != points.len() || points.len() != clustering.assignment.len() {
        return Err(Error::invalid("ids, points and assignment lengths differ"));
    }
    let mut out = Vec::new();
    for c in 0..clustering.k() {
        let mut members: Vec<(f64, &I)> = (0..points.len())
            .filter(|&i| clustering.assignment[i] == c)
            .map(|i| (dist2(&points[i], &clustering.centroids[c]), &ids[i]))
            .collect();
        if members.len() < per_cluster {
            log::warn!("cluster {c} has {} members, fewer than {per_cluster}", members.len());
        }
        members.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
        out.extend(members.into_iter().take(per_cluster).map(|(_, id)| id.clone()));
    }
    Ok(out)
}

// --------------------------------------------------------------- benchmark

pub const ADD_REMOVE_PER_TASK: usize = 50;
pub const DIVERSE_CLUSTERS: usize = 10;
pub const PER_CLUSTER: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Source {
    pub id: String,
    pub caption: String,
    /// Object being interacted with; for add-object sources, the object to insert.
    pub object: String,
    #[serde(default)]
    pub scene: String,
}

impl Source {
    /// Text that is embedded for diversity clustering.
    pub fn clustering_text(&self) -> String {
        format!("{} {}", self.object, self.scene)
    }
}

/// Instruction templates. `{caption}` and `{object}` are substituted per source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Templates {
    pub per_task: BTreeMap<Task, String>,
    /// Change Object: two pure replacements and two replacements with an effect.
    pub replace: Vec<String>,
    pub replace_with_effect: Vec<String>,
}

impl Default for Templates {
    fn default() -> Self {
        let per_task = [
            (Task::AddObject, "Add a {object}."),
            (Task::RemoveObject, "Remove the {object}."),
            (Task::AddEffect, "Apply a warm film-grain filter to the whole video."),
            (Task::ChangeBackground, "Replace the background with a sunny beach while keeping the hands and the {object}."),
            (Task::ChangeCameraPose, "Slowly pan the camera to the left. {caption}"),
            (Task::Stylization, "Render the video in a watercolor painting style."),
            (Task::Reasoning, "Change the color of the object the person touches first to bright red."),
            (Task::DepthToVideo, "Turn the depth map into a video with the following description: {caption}."),
            (Task::SketchToVideo, "Turn the canny edge map into a video with the following description: {caption}."),
            (Task::PoseToVideo, "Turn the DWpose pose map into a video with the following description: {caption}."),
            (Task::VideoToPose, "Turn the video into a DWpose pose map."),
            (Task::VideoToSketch, "Turn the video into a Canny edge map."),
            (Task::VideoToDepth, "Turn the video into a depth map."),
            (Task::Combined, "Replace the background with a forest and render the video as an oil painting. {caption}"),
        ]
        .into_iter()
        .map(|(t, s)| (t, s.to_string()))
        .collect();
        Templates {
            per_task,
            replace: vec!["Replace the {object} with a ceramic mug.".into(), "Replace the {object} with a wooden toy car.".into()],
            replace_with_effect: vec![
                "Replace the {object} with a glowing crystal orb.".into(),
                "Replace the {object} with a torch burning with bright flames.".into(),
            ],
        }
    }
}

impl Templates {
    fn get(&self, task: Task) -> Result<&str> {
        self.per_task
            .get(&task)
            .map(String::as_str)
            .ok_or_else(|| Error::invalid(format!("no template for task {task}")))
    }

    fn fill(template: &str, src: &Source) -> String {
        template.replace("{caption}", &src.caption).replace("{object}", &src.object)
    }
}

/// Tasks instantiated once per diverse source.
pub const PER_SOURCE_TASKS: [Task; 12] = [
    Task::AddEffect,
    Task::ChangeBackground,
    Task::ChangeCameraPose,
    Task::Stylization,
    Task::Reasoning,
    Task::DepthToVideo,
    Task::SketchToVideo,
    Task::PoseToVideo,
    Task::VideoToPose,
    Task::VideoToSketch,
    Task::VideoToDepth,
    Task::Combined,
];

/// Closed-form entry count for `n` diverse sources and the add/remove pool sizes.
pub fn expected_entries(n: usize, add_pool: usize, remove_pool: usize) -> usize {
    12 * n + 4 * n + add_pool.min(ADD_REMOVE_PER_TASK) + remove_pool.min(ADD_REMOVE_PER_TASK)
}

/// Every per-source task for each diverse source, four Change Object prompts
/// per source, plus up to 50 add-object and 50 remove-object sources drawn
/// from their own pools.
pub fn build_benchmark(
    sources: &[Source],
    add_pool: &[Source],
    remove_pool: &[Source],
    templates: &Templates,
) -> Result<Vec<BenchEntry>> {
    let mut entries = Vec::with_capacity(expected_entries(sources.len(), add_pool.len(), remove_pool.len()));
    let mut push = |src: &Source, task: Task, instruction: String, change_kind: Option<ChangeKind>| {
        entries.push(BenchEntry {
            id: entries.len(),
            source_id: src.id.clone(),
            task,
            instruction,
            conditioning_kind: task.conditioning(),
            change_kind,
        })
    };
    if !sources.is_empty() {
        for task in PER_SOURCE_TASKS {
            templates.get(task)?;
        }
        if templates.replace.len() != 2 || templates.replace_with_effect.len() != 2 {
            return Err(Error::invalid("Change Object needs two replacement and two replacement+effect templates"));
        }
    }
    for src in sources {
        for task in PER_SOURCE_TASKS {
            push(src, task, Templates::fill(templates.get(task)?, src), None);
        }
        for t in &templates.replace {
            push(src, Task::ChangeObject, Templates::fill(t, src), Some(ChangeKind::Replace));
        }
        for t in &templates.replace_with_effect {
            push(src, Task::ChangeObject, Templates::fill(t, src), Some(ChangeKind::ReplaceWithEffect));
        }
    }
    for (task, pool) in [(Task::AddObject, add_pool), (Task::RemoveObject, remove_pool)] {
        for src in pool.iter().take(ADD_REMOVE_PER_TASK) {
            push(src, task, Templates::fill(templates.get(task)?, src), None);
        }
    }
    Ok(entries)
}

/// Clusters `candidates` by their object/scene text and keeps the sources
/// nearest each centroid.
pub fn sample_sources(
    candidates: &[Source],
    embedder: &HashTextEmbedder,
    k: usize,
    per_cluster: usize,
    seed: u64,
) -> Result<Vec<Source>> {
    let points: Vec<Vec<f64>> = candidates.iter().map(|s| embed_sentence(embedder, &s.clustering_text())).collect();
    let clustering = kmeans(&points, k, seed)?;
    let ids: Vec<usize> = (0..candidates.len()).collect();
    let picked = select_diverse(&ids, &points, &clustering, per_cluster)?;
    Ok(picked.into_iter().map(|i| candidates[i].clone()).collect())
}

// ------------------------------------------------------------- aggregation

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub per_task: BTreeMap<Metric, BTreeMap<Task, f64>>,
    pub counts: BTreeMap<Metric, BTreeMap<Task, usize>>,
    pub overall: BTreeMap<Metric, f64>,
    /// Tasks that had entries but no record for a metric that other tasks report.
    pub excluded: BTreeMap<Metric, Vec<Task>>,
}

impl BenchmarkReport {
    pub fn overall_of(per_task: &BTreeMap<Task, f64>) -> Option<f64> {
        if per_task.is_empty() {
            return None;
        }
        Some(per_task.values().sum::<f64>() / per_task.len() as f64)
    }

    pub fn recompute_overall(&self, metric: Metric) -> Option<f64> {
        self.per_task.get(&metric).and_then(Self::overall_of)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

impl fmt::Display for BenchmarkReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<7}", "Metric")?;
        for t in Task::ALL {
            write!(f, "{:>7}", t.short())?;
        }
        writeln!(f, "{:>8}", "Overall")?;
        for (metric, tasks) in &self.per_task {
            write!(f, "{:<7}", metric.short())?;
            for t in Task::ALL {
                match tasks.get(&t) {
                    Some(v) => write!(f, "{v:>7.2}")?,
                    None => write!(f, "{:>7}", "-")?,
                }
            }
            writeln!(f, "{:>8.2}", self.overall[metric])?;
        }
        Ok(())
    }
}

/// Per-task means per metric; the overall score is the unweighted mean of the task means.
pub fn aggregate(records: &[ScoreRecord], entries: &[BenchEntry]) -> Result<BenchmarkReport> {
    let by_id: HashMap<usize, &BenchEntry> = entries.iter().map(|e| (e.id, e)).collect();
    let mut sums: BTreeMap<Metric, BTreeMap<Task, (f64, usize)>> = BTreeMap::new();
    for r in records {
        let e = by_id
            .get(&r.entry_id)
            .ok_or_else(|| Error::invalid(format!("score for unknown entry {}", r.entry_id)))?;
        r.metric.check(r.value)?;
        let s = sums.entry(r.metric).or_default().entry(e.task).or_default();
        s.0 += r.value;
        s.1 += 1;
    }
    let tasks_present: std::collections::BTreeSet<Task> = entries.iter().map(|e| e.task).collect();
    let mut report = BenchmarkReport {
        per_task: BTreeMap::new(),
        counts: BTreeMap::new(),
        overall: BTreeMap::new(),
        excluded: BTreeMap::new(),
    };
    for (metric, tasks) in sums {
        let means: BTreeMap<Task, f64> = tasks.iter().map(|(&t, &(s, n))| (t, s / n as f64)).collect();
        let missing: Vec<Task> = tasks_present.iter().copied().filter(|t| !tasks.contains_key(t)).collect();
        if !missing.is_empty() {
            log::warn!("{}: no records for {:?}; overall uses the remaining tasks", metric.short(), missing);
            report.excluded.insert(metric, missing);
        }
        report.overall.insert(metric, BenchmarkReport::overall_of(&means).expect("non-empty"));
        report.counts.insert(metric, tasks.iter().map(|(&t, &(_, n))| (t, n)).collect());
        report.per_task.insert(metric, means);
    }
    Ok(report)
}

// --------------------------------------------------------------- agreement

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Choice {
    A,
    B,
}

impl Choice {
    pub fn flip(self) -> Self {
        match self {
            Choice::A => Choice::B,
            Choice::B => Choice::A,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferenceSample {
    pub task: Task,
    pub score_a: f64,
    pub score_b: f64,
    pub human: Choice,
}

impl PreferenceSample {
    /// Higher score wins; equal scores go to A.
    pub fn machine(&self) -> Choice {
        if self.score_b > self.score_a {
            Choice::B
        } else {
            Choice::A
        }
    }

    pub fn is_tie(&self) -> bool {
        self.score_a == self.score_b
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskAgreement {
    pub samples: usize,
    pub matches: usize,
    pub ties: usize,
    pub machine_prefers_a: usize,
    pub human_prefers_a: usize,
}

impl TaskAgreement {
    pub fn percent(&self) -> f64 {
        100.0 * self.matches as f64 / self.samples as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub per_task: BTreeMap<Task, TaskAgreement>,
    /// Macro average of the per-task percentages.
    pub overall_percent: f64,
    pub ties: usize,
}

pub fn preference_agreement(samples: &[PreferenceSample]) -> Result<AgreementReport> {
    if samples.is_empty() {
        return Err(Error::invalid("no preference samples"));
    }
    let mut per_task: BTreeMap<Task, TaskAgreement> = BTreeMap::new();
    for s in samples {
        if !s.score_a.is_finite() || !s.score_b.is_finite() {
            return Err(Error::invalid(format!("missing score pair in {}", s.task)));
        }
        let a = per_task.entry(s.task).or_default();
        let m = s.machine();
        a.samples += 1;
        a.matches += (m == s.human) as usize;
        a.ties += s.is_tie() as usize;
        a.machine_prefers_a += (m == Choice::A) as usize;
        a.human_prefers_a += (s.human == Choice::A) as usize;
    }
    let overall_percent = per_task.values().map(TaskAgreement::percent).sum::<f64>() / per_task.len() as f64;
    let ties = per_task.values().map(|a| a.ties).sum();
    Ok(AgreementReport {
        per_task,
        overall_percent,
        ties,
    })
}

/// Pairs per-sample score vectors with human choices.
pub fn pair_samples(tasks: &[Task], scores_a: &[f64], scores_b: &[f64], human: &[Choice]) -> Result<Vec<PreferenceSample>> {
    let n = tasks.len();
    if scores_a.len() != n || scores_b.len() != n || human.len() != n {
        return Err(Error::invalid(format!(
            "missing pair: {n} tasks, {} / {} scores, {} preferences",
            scores_a.len(),
            scores_b.len(),
            human.len()
        )));
    }
    Ok((0..n)
        .map(|i| PreferenceSample {
            task: tasks[i],
            score_a: scores_a[i],
            score_b: scores_b[i],
            human: human[i],
        })
        .collect())
}

// ------------------------------------------------------------------ judges

/// Scores one edited output for one entry. Implementations must be deterministic.
pub trait VlmJudge: Sync {
    fn score(&self, entry: &BenchEntry) -> Result<f64>;
}

/// Returns fixed scores keyed by entry id.
#[derive(Clone, Debug, Default)]
pub struct MockJudge {
    pub scores: HashMap<usize, f64>,
}

impl VlmJudge for MockJudge {
    fn score(&self, entry: &BenchEntry) -> Result<f64> {
        self.scores
            .get(&entry.id)
            .copied()
            .ok_or_else(|| Error::invalid(format!("mock judge has no score for entry {}", entry.id)))
    }
}

/// Scores entries on `workers` threads; output is ordered by entry id.
pub fn score_entries(judge: &dyn VlmJudge, entries: &[BenchEntry], workers: usize) -> Result<Vec<ScoreRecord>> {
    let workers = workers.max(1);
    let chunk = entries.len().div_ceil(workers).max(1);
    let parts: Vec<Result<Vec<ScoreRecord>>> = std::thread::scope(|s| {
        let handles: Vec<_> = entries
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|e| {
                            let value = judge.score(e)?;
                            Metric::Vlm.check(value)?;
                            Ok(ScoreRecord {
                                entry_id: e.id,
                                metric: Metric::Vlm,
                                value,
                            })
                        })
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("scoring worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(entries.len());
    for p in parts {
        out.extend(p?);
    }
    out.sort_by_key(|r| r.entry_id);
    Ok(out)
}

// ------------------------------------------------------------ conditioning

#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningSignal {
    pub kind: ConditioningKind,
    pub frames: Tensor<f32>,
}

/// Produces the depth/sketch/pose control video for an X-to-video entry.
pub trait ConditioningExtractor {
    fn kind(&self) -> ConditioningKind;
    fn extract(&self, frames: &Tensor<f32>) -> Result<ConditioningSignal>;
}

/// Placeholder: a single-channel video filled with a per-kind constant.
#[derive(Clone, Copy, Debug)]
pub struct StubExtractor(pub ConditioningKind);

impl ConditioningExtractor for StubExtractor {
    fn kind(&self) -> ConditioningKind {
        self.0
    }

    fn extract(&self, frames: &Tensor<f32>) -> Result<ConditioningSignal> {
        let &[t, _, h, w] = frames.shape() else {
            return Err(Error::invalid(format!("expected [T, C, H, W] frames, got {:?}", frames.shape())));
        };
        let level = match self.0 {
            ConditioningKind::Depth => 0.25,
            ConditioningKind::Sketch => 0.5,
            ConditioningKind::Pose => 0.75,
        };
        Ok(ConditioningSignal {
            kind: self.0,
            frames: Tensor::full(&[t, 1, h, w], level),
        })
    }
}

// ---------------------------------------------------------------------- io

pub fn write_jsonl<T: Serialize>(items: &[T], mut w: impl Write) -> Result<()> {
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(r: impl BufRead) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

pub fn save_jsonl<T: Serialize>(items: &[T], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_jsonl(items, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn load_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    read_jsonl(std::io::BufReader::new(std::fs::File::open(path)?))
}
