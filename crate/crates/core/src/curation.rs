//! Staged dataset curation.
//!
//! Items pass through an ordered list of stages. Each stage keeps, rewrites
//! or drops an item; the ledger records in/out counts per stage. Model-backed
//! steps (hand detection, object naming, grounded segmentation, generative
//! editing) are adapter traits with deterministic mocks.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::{Error, Result};

pub const HAND_CONFIDENCE: f64 = 0.75;
pub const MASK_CONFIDENCE: f64 = 0.4;
pub const TEXT_CONFIDENCE: f64 = 0.35;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Automatic,
    HumanReview,
}

pub enum Outcome<T> {
    Keep(T),
    Drop(String),
}

pub trait Item: Send {
    fn id(&self) -> &str;
}

/// One filtering step. `apply` may rewrite the item (e.g. attach a mask) before keeping it.
pub trait Stage<T>: Sync {
    fn name(&self) -> &str;

    fn kind(&self) -> StageKind {
        StageKind::Automatic
    }

    /// Unit the stage counts in, for the ledger ("videos", "edits", ...).
    fn unit(&self) -> &str {
        "items"
    }

    fn expected_retention(&self) -> Option<f64> {
        None
    }

    fn apply(&self, item: T) -> Result<Outcome<T>>;
}

/// Stage from a closure.
pub struct Filter<F> {
    pub name: String,
    pub unit: String,
    pub expected_retention: Option<f64>,
    pub f: F,
}

impl<F> Filter<F> {
    pub fn new(name: impl Into<String>, f: F) -> Self {
        Filter {
            name: name.into(),
            unit: "items".into(),
            expected_retention: None,
            f,
        }
    }
}

impl<T, F> Stage<T> for Filter<F>
where
    F: Fn(T) -> Result<Outcome<T>> + Sync,
{
    fn name(&self) -> &str {
        &self.name
    }

    fn unit(&self) -> &str {
        &self.unit
    }

    fn expected_retention(&self) -> Option<f64> {
        self.expected_retention
    }

    fn apply(&self, item: T) -> Result<Outcome<T>> {
        (self.f)(item)
    }
}

// ------------------------------------------------------------------ ledger

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub kind: StageKind,
    pub unit: String,
    pub in_count: usize,
    pub out_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_retention: Option<f64>,
}

impl StageRecord {
    /// An empty stage input keeps everything it was given, so its rate is 1.
    pub fn rate(&self) -> f64 {
        if self.in_count == 0 {
            1.0
        } else {
            self.out_count as f64 / self.in_count as f64
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RetentionLedger {
    pub stages: Vec<StageRecord>,
}

impl RetentionLedger {
    pub fn push(&mut self, record: StageRecord) -> Result<()> {
        if record.out_count > record.in_count {
            return Err(Error::invalid(format!(
                "stage {}: {} out of {} in",
                record.name, record.out_count, record.in_count
            )));
        }
        self.stages.push(record);
        Ok(())
    }

    /// Product of the per-stage rates, whatever unit each stage counts in.
    pub fn cumulative_rate(&self) -> f64 {
        self.stages.iter().map(StageRecord::rate).product()
    }

    /// Cumulative rate after each stage.
    pub fn running_rates(&self) -> Vec<f64> {
        self.stages
            .iter()
            .scan(1.0, |acc, s| {
                *acc *= s.rate();
                Some(*acc)
            })
            .collect()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let raw: RetentionLedger = toml::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        let mut ledger = RetentionLedger::default();
        for s in raw.stages {
            ledger.push(s)?;
        }
        Ok(ledger)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}

impl fmt::Display for RetentionLedger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<24} {:<10} {:>10} {:>10} {:>8} {:>9} {:>11}",
            "stage", "unit", "in", "out", "rate%", "expected%", "cumulative%"
        )?;
        for (s, cum) in self.stages.iter().zip(self.running_rates()) {
            let expected = s.expected_retention.map_or("-".to_string(), |e| format!("{:.1}", 100.0 * e));
            writeln!(
                f,
                "{:<24} {:<10} {:>10} {:>10} {:>8.1} {:>9} {:>11.3}",
                s.name,
                s.unit,
                s.in_count,
                s.out_count,
                100.0 * s.rate(),
                expected,
                100.0 * cum
            )?;
        }
        write!(f, "cumulative retention {:.4}%", 100.0 * self.cumulative_rate())
    }
}

// ---------------------------------------------------------------- pipeline

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilteredItem {
    pub id: String,
    pub stage: String,
    pub reason: String,
}

pub struct PipelineRun<T> {
    pub survivors: Vec<T>,
    pub filtered: Vec<FilteredItem>,
    pub ledger: RetentionLedger,
}

fn apply_chunk<T>(stage: &dyn Stage<T>, items: Vec<T>) -> Vec<std::result::Result<T, FilteredItem>>
where
    T: Item,
{
    items
        .into_iter()
        .map(|item| {
            let id = item.id().to_string();
            let filtered = |reason| FilteredItem {
                id: id.clone(),
                stage: stage.name().to_string(),
                reason,
            };
            match stage.apply(item) {
                Ok(Outcome::Keep(it)) => Ok(it),
                Ok(Outcome::Drop(reason)) => Err(filtered(reason)),
                Err(e) => {
                    log::warn!("stage {} failed on {id}: {e}", stage.name());
                    Err(filtered(format!("error: {e}")))
                }
            }
        })
        .collect()
}

/// Runs `items` through `stages` in order, fanning each stage out over
/// `workers` threads. Output order follows input order.
pub fn run_pipeline<T: Item>(items: Vec<T>, stages: &[Box<dyn Stage<T> + '_>], workers: usize) -> Result<PipelineRun<T>> {
    if stages.is_empty() {
        return Err(Error::Pipeline("no stages".into()));
    }
    let mut names = BTreeSet::new();
    for s in stages {
        if !names.insert(s.name()) {
            return Err(Error::Pipeline(format!("duplicate stage name {:?}", s.name())));
        }
    }
    let workers = workers.max(1);
    let mut current = items;
    let mut filtered = Vec::new();
    let mut ledger = RetentionLedger::default();
    for stage in stages {
        let stage: &dyn Stage<T> = stage.as_ref();
        let in_count = current.len();
        let per = in_count.div_ceil(workers).max(1);
        let mut chunks = Vec::new();
        let mut it = current.into_iter();
        loop {
            let c: Vec<T> = it.by_ref().take(per).collect();
            if c.is_empty() {
                break;
            }
            chunks.push(c);
        }
        let results: Vec<_> = if chunks.len() <= 1 {
            chunks.into_iter().map(|c| apply_chunk(stage, c)).collect()
        } else {
            std::thread::scope(|s| {
                let handles: Vec<_> = chunks.into_iter().map(|c| s.spawn(move || apply_chunk(stage, c))).collect();
                handles.into_iter().map(|h| h.join().expect("stage worker panicked")).collect()
            })
        };
        let mut next = Vec::with_capacity(in_count);
        for r in results.into_iter().flatten() {
            match r {
                Ok(item) => next.push(item),
                Err(f) => filtered.push(f),
            }
        }
        ledger.push(StageRecord {
            name: stage.name().to_string(),
            kind: stage.kind(),
            unit: stage.unit().to_string(),
            in_count,
            out_count: next.len(),
            expected_retention: stage.expected_retention(),
        })?;
        current = next;
    }
    Ok(PipelineRun {
        survivors: current,
        filtered,
        ledger,
    })
}

// ------------------------------------------------------------ human review

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub accept: bool,
    #[serde(default)]
    pub note: String,
}

/// Recorded reviewer decisions keyed by item id.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionQueue {
    pub decisions: BTreeMap<String, Decision>,
}

impl DecisionQueue {
    pub fn record(&mut self, id: impl Into<String>, accept: bool, note: impl Into<String>) {
        self.decisions.insert(id.into(), Decision { accept, note: note.into() });
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Replays a decision queue. Items without a decision are rejected.
pub struct HumanReview {
    pub name: String,
    pub unit: String,
    pub queue: DecisionQueue,
}

impl<T: Item> Stage<T> for HumanReview {
    fn name(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> StageKind {
        StageKind::HumanReview
    }

    fn unit(&self) -> &str {
        &self.unit
    }

    fn apply(&self, item: T) -> Result<Outcome<T>> {
        Ok(match self.queue.decisions.get(item.id()) {
            Some(d) if d.accept => Outcome::Keep(item),
            Some(d) => Outcome::Drop(format!("rejected in review: {}", d.note)),
            None => Outcome::Drop("no review decision".into()),
        })
    }
}

// ---------------------------------------------------------------- geometry

pub type Pixel = (i32, i32);

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HandGeometry {
    pub mask: Vec<Pixel>,
    pub keypoints: Vec<(f64, f64)>,
}

/// Pixel distances; the defaults are configuration, not measured values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateThresholds {
    pub edge: f64,
    pub keypoint: f64,
}

impl Default for GateThresholds {
    fn default() -> Self {
        GateThresholds {
            edge: 10.0,
            keypoint: 20.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateOutcome {
    pub passed: bool,
    pub edge_distance: Option<f64>,
    pub keypoint_distance: Option<f64>,
    pub reason: Option<String>,
}

/// Pixels of `mask` with at least one 4-neighbour outside it.
pub fn boundary(mask: &[Pixel]) -> Vec<Pixel> {
    let set: BTreeSet<Pixel> = mask.iter().copied().collect();
    set.iter()
        .copied()
        .filter(|&(x, y)| [(1, 0), (-1, 0), (0, 1), (0, -1)].iter().any(|(dx, dy)| !set.contains(&(x + dx, y + dy))))
        .collect()
}

fn min_dist(a: impl Iterator<Item = (f64, f64)> + Clone, b: &[Pixel]) -> f64 {
    let mut best = f64::INFINITY;
    for &(bx, by) in b {
        for (ax, ay) in a.clone() {
            best = best.min(((ax - bx as f64).powi(2) + (ay - by as f64).powi(2)).sqrt());
        }
    }
    best
}

/// Passes iff the hand and object mask edges are within `edge` pixels and
/// some hand keypoint lies within `keypoint` pixels of the object mask.
/// Overlapping masks have edge distance 0. Distances equal to a threshold pass.
/// Empty geometry fails closed.
pub fn interaction_gate(hand: &HandGeometry, object: &[Pixel], t: &GateThresholds) -> GateOutcome {
    let fail = |reason: &str| GateOutcome {
        passed: false,
        edge_distance: None,
        keypoint_distance: None,
        reason: Some(reason.into()),
    };
    if hand.mask.is_empty() {
        return fail("empty hand mask");
    }
    if object.is_empty() {
        return fail("empty object mask");
    }
    if hand.keypoints.is_empty() {
        return fail("no hand keypoints");
    }
    let hand_set: BTreeSet<Pixel> = hand.mask.iter().copied().collect();
    let edge = if object.iter().any(|p| hand_set.contains(p)) {
        0.0
    } else {
        let hb = boundary(&hand.mask);
        min_dist(hb.iter().map(|&(x, y)| (x as f64, y as f64)), &boundary(object))
    };
    let kp = min_dist(hand.keypoints.iter().copied(), object);
    let passed = edge <= t.edge && kp <= t.keypoint;
    let reason = (!passed).then(|| format!("edge {edge:.3} (max {}), keypoint {kp:.3} (max {})", t.edge, t.keypoint));
    GateOutcome {
        passed,
        edge_distance: Some(edge),
        keypoint_distance: Some(kp),
        reason,
    }
}

// ---------------------------------------------------------------- adapters

/// A source clip as it moves through curation; stages fill in annotations.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Clip {
    pub id: String,
    #[serde(default)]
    pub camera: String,
    #[serde(default)]
    pub hand: Option<HandGeometry>,
    #[serde(default)]
    pub object_name: Option<String>,
    #[serde(default)]
    pub object_mask: Option<Vec<Pixel>>,
}

impl Item for Clip {
    fn id(&self) -> &str {
        &self.id
    }
}

pub trait HandDetector: Sync {
    /// Per-frame hand detection confidences plus the hand geometry of the best frame.
    fn detect(&self, clip: &Clip) -> Result<(Vec<f64>, HandGeometry)>;
}

pub trait ObjectNamer: Sync {
    fn name_object(&self, clip: &Clip) -> Result<Option<String>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskCandidate {
    pub mask_score: f64,
    pub text_score: f64,
    pub pixels: Vec<Pixel>,
}

pub trait GroundedSegmenter: Sync {
    fn segment(&self, clip: &Clip, object: &str) -> Result<Vec<MaskCandidate>>;
}

pub trait GenerativeEditor: Sync {
    /// A synthetic version of `clip` realising `target`.
    fn edit(&self, clip: &Clip, target: &VersionContent) -> Result<Version>;
}

/// Lookup-table mocks keyed by clip id; unknown ids are errors.
#[derive(Clone, Debug, Default)]
pub struct MockHandDetector {
    pub table: HashMap<String, (Vec<f64>, HandGeometry)>,
}

impl HandDetector for MockHandDetector {
    fn detect(&self, clip: &Clip) -> Result<(Vec<f64>, HandGeometry)> {
        self.table
            .get(&clip.id)
            .cloned()
            .ok_or_else(|| Error::Pipeline(format!("hand detector: unknown clip {}", clip.id)))
    }
}

#[derive(Clone, Debug, Default)]
pub struct MockObjectNamer {
    pub table: HashMap<String, Option<String>>,
}

impl ObjectNamer for MockObjectNamer {
    fn name_object(&self, clip: &Clip) -> Result<Option<String>> {
        self.table
            .get(&clip.id)
            .cloned()
            .ok_or_else(|| Error::Pipeline(format!("object namer: unknown clip {}", clip.id)))
    }
}

#[derive(Clone, Debug, Default)]
pub struct MockSegmenter {
    pub table: HashMap<String, Vec<MaskCandidate>>,
}

impl GroundedSegmenter for MockSegmenter {
    fn segment(&self, clip: &Clip, _object: &str) -> Result<Vec<MaskCandidate>> {
        self.table
            .get(&clip.id)
            .cloned()
            .ok_or_else(|| Error::Pipeline(format!("segmenter: unknown clip {}", clip.id)))
    }
}

/// Version ids are `<clip>/<target object>` or `<clip>/removed`.
#[derive(Clone, Debug, Default)]
pub struct MockEditor;

impl GenerativeEditor for MockEditor {
    fn edit(&self, clip: &Clip, target: &VersionContent) -> Result<Version> {
        let tag = match target {
            VersionContent::Original { .. } => return Err(Error::invalid("editor cannot produce an original")),
            VersionContent::Replaced { object, .. } => object.replace(' ', "_"),
            VersionContent::Removed => "removed".into(),
        };
        Ok(Version {
            id: format!("{}/{tag}", clip.id),
            clip_id: clip.id.clone(),
            content: target.clone(),
        })
    }
}

pub struct HandStage<D> {
    pub detector: D,
    pub threshold: f64,
}

impl<D: HandDetector> Stage<Clip> for HandStage<D> {
    fn name(&self) -> &str {
        "hand detection"
    }

    fn unit(&self) -> &str {
        "samples"
    }

    fn apply(&self, mut clip: Clip) -> Result<Outcome<Clip>> {
        let (scores, geometry) = self.detector.detect(&clip)?;
        if !scores.iter().any(|&s| s >= self.threshold) {
            return Ok(Outcome::Drop(format!("no frame with hand confidence >= {}", self.threshold)));
        }
        clip.hand = Some(geometry);
        Ok(Outcome::Keep(clip))
    }
}

pub struct NamingStage<N> {
    pub namer: N,
}

impl<N: ObjectNamer> Stage<Clip> for NamingStage<N> {
    fn name(&self) -> &str {
        "object naming"
    }

    fn unit(&self) -> &str {
        "samples"
    }

    fn apply(&self, mut clip: Clip) -> Result<Outcome<Clip>> {
        match self.namer.name_object(&clip)? {
            Some(name) => {
                clip.object_name = Some(name);
                Ok(Outcome::Keep(clip))
            }
            None => Ok(Outcome::Drop("no interacted object".into())),
        }
    }
}

/// Grounded segmentation followed by the interaction gate. Among candidates
/// above both confidence thresholds the one closest to the hand is kept.
pub struct ObjectMaskStage<G> {
    pub segmenter: G,
    pub mask_threshold: f64,
    pub text_threshold: f64,
    pub gate: GateThresholds,
}

impl<G: GroundedSegmenter> ObjectMaskStage<G> {
    pub fn new(segmenter: G, gate: GateThresholds) -> Self {
        ObjectMaskStage {
            segmenter,
            mask_threshold: MASK_CONFIDENCE,
            text_threshold: TEXT_CONFIDENCE,
            gate,
        }
    }
}

impl<G: GroundedSegmenter> Stage<Clip> for ObjectMaskStage<G> {
    fn name(&self) -> &str {
        "object mask"
    }

    fn unit(&self) -> &str {
        "sequences"
    }

    fn apply(&self, mut clip: Clip) -> Result<Outcome<Clip>> {
        let (Some(hand), Some(object)) = (&clip.hand, &clip.object_name) else {
            return Ok(Outcome::Drop("missing hand or object annotation".into()));
        };
        let candidates = self.segmenter.segment(&clip, object)?;
        let best = candidates
            .iter()
            .filter(|c| c.mask_score >= self.mask_threshold && c.text_score >= self.text_threshold)
            .map(|c| (interaction_gate(hand, &c.pixels, &self.gate), c))
            .filter(|(g, _)| g.passed)
            .min_by(|a, b| a.0.edge_distance.unwrap().total_cmp(&b.0.edge_distance.unwrap()));
        match best {
            Some((_, c)) => {
                clip.object_mask = Some(c.pixels.clone());
                Ok(Outcome::Keep(clip))
            }
            None => Ok(Outcome::Drop("no confident mask interacting with the hand".into())),
        }
    }
}

pub fn hand_stage<D: HandDetector>(detector: D) -> HandStage<D> {
    HandStage {
        detector,
        threshold: HAND_CONFIDENCE,
    }
}

// ------------------------------------------------------------------- pairs

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum VersionContent {
    Original { object: String },
    Replaced { object: String, effect: Option<String> },
    Removed,
}

impl VersionContent {
    pub fn object(&self) -> Option<&str> {
        match self {
            VersionContent::Original { object } | VersionContent::Replaced { object, .. } => Some(object),
            VersionContent::Removed => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Version {
    pub id: String,
    pub clip_id: String,
    pub content: VersionContent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Category {
    ChangeObject,
    ChangeObjectWithEffect,
    AddObject,
    RemoveObject,
}

impl Category {
    pub const ALL: [Category; 4] = [Category::ChangeObject, Category::ChangeObjectWithEffect, Category::AddObject, Category::RemoveObject];

    pub fn of(source: &VersionContent, target: &VersionContent) -> Category {
        match (source, target) {
            (_, VersionContent::Removed) => Category::RemoveObject,
            (VersionContent::Removed, _) => Category::AddObject,
            (_, VersionContent::Replaced { effect: Some(_), .. }) => Category::ChangeObjectWithEffect,
            _ => Category::ChangeObject,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditPair {
    pub source_version_id: String,
    pub target_version_id: String,
    pub instruction: String,
    pub category: Category,
    #[serde(default)]
    pub source_object: Option<String>,
    #[serde(default)]
    pub target_object: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum PairPolicy {
    /// Every ordered pair of distinct versions.
    AllPermutations,
    /// Original to each variant only.
    OriginalAsSource,
    /// A seeded random subset of at most `per_clip` ordered pairs.
    Sampled { per_clip: usize, seed: u64 },
}

/// Template instruction for a pair; a language model would rewrite it in practice.
pub fn describe(source: &VersionContent, target: &VersionContent) -> String {
    match (Category::of(source, target), source.object(), target) {
        (Category::RemoveObject, Some(obj), _) => format!("Remove the {obj}."),
        (Category::AddObject, _, t) => format!("Add a {}.", t.object().unwrap_or("object")),
        (_, Some(a), VersionContent::Replaced { object, effect: Some(fx) }) => {
            format!("Replace the {a} with a {object} with {fx}.")
        }
        (_, Some(a), t) => format!("Replace the {a} with a {}.", t.object().unwrap_or("object")),
        (_, None, _) => "Edit the video.".into(),
    }
}

/// Builds edit pairs within one clip's version set (the original plus its variants).
pub fn build_pairs(versions: &[Version], policy: PairPolicy) -> Result<Vec<EditPair>> {
    let Some(first) = versions.first() else {
        return Err(Error::invalid("empty version set"));
    };
    let originals: Vec<usize> = (0..versions.len())
        .filter(|&i| matches!(versions[i].content, VersionContent::Original { .. }))
        .collect();
    if originals.len() != 1 {
        return Err(Error::invalid(format!("version set has {} originals, expected 1", originals.len())));
    }
    if versions.iter().any(|v| v.clip_id != first.clip_id) {
        return Err(Error::invalid("versions from different clips"));
    }
    let ids: BTreeSet<&str> = versions.iter().map(|v| v.id.as_str()).collect();
    if ids.len() != versions.len() {
        return Err(Error::invalid("duplicate version ids"));
    }
    let n = versions.len();
    let mut ordered: Vec<(usize, usize)> = match policy {
        PairPolicy::OriginalAsSource => (0..n).filter(|&j| j != originals[0]).map(|j| (originals[0], j)).collect(),
        _ => (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).collect(),
    };
    if let PairPolicy::Sampled { per_clip, seed } = policy {
        let mut r = rng::stream(seed, crate::model::text::fnv1a(&first.clip_id));
        ordered.shuffle(&mut r);
        ordered.truncate(per_clip);
        ordered.sort_unstable();
    }
    Ok(ordered
        .into_iter()
        .map(|(i, j)| {
            let (s, t) = (&versions[i], &versions[j]);
            EditPair {
                source_version_id: s.id.clone(),
                target_version_id: t.id.clone(),
                instruction: describe(&s.content, &t.content),
                category: Category::of(&s.content, &t.content),
                source_object: s.content.object().map(str::to_string),
                target_object: t.content.object().map(str::to_string),
            }
        })
        .collect())
}

// ------------------------------------------------------------------- stats

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub per_category: BTreeMap<Category, usize>,
    pub total: usize,
    /// Prompt lengths in characters, bucketed by `bin_width`.
    pub bin_width: usize,
    pub length_histogram: BTreeMap<usize, usize>,
    pub mean_prompt_chars: f64,
    pub unique_source_objects: usize,
    pub unique_target_objects: usize,
}

pub fn dataset_stats(pairs: &[EditPair], bin_width: usize) -> DatasetStats {
    let bin_width = bin_width.max(1);
    let mut per_category: BTreeMap<Category, usize> = Category::ALL.iter().map(|&c| (c, 0)).collect();
    let mut length_histogram = BTreeMap::new();
    let mut chars = 0usize;
    let mut src = BTreeSet::new();
    let mut tgt = BTreeSet::new();
    for p in pairs {
        *per_category.get_mut(&p.category).expect("all categories present") += 1;
        let len = p.instruction.chars().count();
        chars += len;
        *length_histogram.entry(len / bin_width * bin_width).or_insert(0) += 1;
        src.extend(p.source_object.as_deref());
        tgt.extend(p.target_object.as_deref());
    }
    DatasetStats {
        per_category,
        total: pairs.len(),
        bin_width,
        length_histogram,
        mean_prompt_chars: if pairs.is_empty() { 0.0 } else { chars as f64 / pairs.len() as f64 },
        unique_source_objects: src.len(),
        unique_target_objects: tgt.len(),
    }
}

// ---------------------------------------------------------------- manifest

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub name: String,
    pub kind: StageKind,
    #[serde(default)]
    pub unit: Option<String>,
    #[serde(default)]
    pub expected_retention: Option<f64>,
    #[serde(default)]
    pub params: toml::Table,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineManifest {
    pub stages: Vec<StageConfig>,
}

impl PipelineManifest {
    pub fn from_toml(text: &str) -> Result<Self> {
        let m: PipelineManifest = toml::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        let mut seen = BTreeSet::new();
        for s in &m.stages {
            if !seen.insert(&s.name) {
                return Err(Error::Format(format!("duplicate stage name {:?}", s.name)));
            }
        }
        Ok(m)
    }

    /// Instantiates stages through `factory`, which maps a config to a stage.
    pub fn build<'a, T, F>(&self, mut factory: F) -> Result<Vec<Box<dyn Stage<T> + 'a>>>
    where
        F: FnMut(&StageConfig) -> Result<Box<dyn Stage<T> + 'a>>,
    {
        self.stages.iter().map(&mut factory).collect()
    }
}
