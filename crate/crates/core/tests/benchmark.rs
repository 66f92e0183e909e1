use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::PathBuf;

use proptest::prelude::*;
use rtedit_core::benchmark::*;
use rtedit_core::model::HashTextEmbedder;
use rtedit_core::rng;
use rtedit_core::Tensor;
use serde::Deserialize;

fn fixture(name: &str) -> String {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name);
    std::fs::read_to_string(path).unwrap()
}

fn blobs(k: usize, per: usize, dim: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut r = rng::seeded(seed);
    let mut pts = Vec::new();
    let mut labels = Vec::new();
    for c in 0..k {
        let centre: Vec<f64> = (0..dim).map(|d| if d == c % dim { 100.0 * (1 + c / dim) as f64 } else { 0.0 }).collect();
        for _ in 0..per {
            let noise: Vec<f64> = rng::normal_vec(&mut r, dim);
            pts.push(centre.iter().zip(noise).map(|(a, b)| a + b).collect());
            labels.push(c);
        }
    }
    (pts, labels)
}

/// Same partition up to relabelling.
fn same_partition(a: &[usize], b: &[usize]) -> bool {
    let mut fwd = HashMap::new();
    let mut back = HashMap::new();
    a.iter().zip(b).all(|(x, y)| *fwd.entry(x).or_insert(y) == y && *back.entry(y).or_insert(x) == x)
}

#[test]
fn kmeans_recovers_separated_blobs() {
    let (pts, labels) = blobs(10, 20, 8, 1);
    for seed in 0..5 {
        let c = kmeans(&pts, 10, seed).unwrap();
        assert!(same_partition(&c.assignment, &labels), "seed {seed}");
        assert!(c.inertia.windows(2).all(|w| w[1] <= w[0] + 1e-9));
    }
}

#[test]
fn kmeans_k_equals_n() {
    let (pts, _) = blobs(3, 4, 2, 2);
    let c = kmeans(&pts, pts.len(), 9).unwrap();
    assert_eq!(c.final_inertia(), 0.0);
    let distinct: HashSet<_> = c.assignment.iter().collect();
    assert_eq!(distinct.len(), pts.len());
}

#[test]
fn kmeans_rejects_bad_input() {
    let (pts, _) = blobs(2, 3, 2, 2);
    assert!(kmeans(&pts, 0, 0).is_err());
    assert!(kmeans(&pts, 7, 0).is_err());
    let mut ragged = pts.clone();
    ragged[1].push(1.0);
    assert!(kmeans(&ragged, 2, 0).is_err());
}

#[test]
fn kmeans_is_deterministic() {
    let (pts, _) = blobs(4, 10, 3, 5);
    assert_eq!(kmeans(&pts, 6, 3).unwrap(), kmeans(&pts, 6, 3).unwrap());
}

#[test]
fn kmeans_reseeds_empty_clusters() {
    // duplicate points force k-means++ onto coincident centroids
    let pts = vec![vec![0.0], vec![0.0], vec![0.0], vec![10.0]];
    let c = kmeans(&pts, 3, 0).unwrap();
    for k in 0..3 {
        assert!(!c.members(k).is_empty());
    }
}

#[test]
fn select_diverse_hundred_and_medoids() {
    let (pts, _) = blobs(10, 15, 8, 3);
    let c = kmeans(&pts, 10, 0).unwrap();
    let ids: Vec<u32> = (0..pts.len() as u32).collect();
    let picked = select_diverse(&ids, &pts, &c, 10).unwrap();
    assert_eq!(picked.len(), 100);
    assert_eq!(picked.iter().collect::<HashSet<_>>().len(), 100);

    let one = select_diverse(&ids, &pts, &c, 1).unwrap();
    assert_eq!(one.len(), 10);
    for (k, id) in one.iter().enumerate() {
        let d = |i: usize| -> f64 { pts[i].iter().zip(&c.centroids[k]).map(|(a, b)| (a - b) * (a - b)).sum() };
        let best = c.members(k).into_iter().min_by(|&a, &b| d(a).total_cmp(&d(b)).then(a.cmp(&b))).unwrap();
        assert_eq!(*id as usize, best);
    }
}

#[test]
fn select_diverse_small_cluster_takes_all() {
    let (pts, _) = blobs(2, 3, 2, 4);
    let c = kmeans(&pts, 2, 0).unwrap();
    let ids: Vec<usize> = (0..6).collect();
    assert_eq!(select_diverse(&ids, &pts, &c, 10).unwrap().len(), 6);
}

fn sources(n: usize, prefix: &str) -> Vec<Source> {
    let objects = ["mug", "knife", "phone", "book", "ball", "bottle", "spoon", "cup", "pen", "plate", "hammer", "towel"];
    let scenes = ["kitchen", "garage", "office", "garden", "bedroom", "workshop", "street"];
    (0..n)
        .map(|i| Source {
            id: format!("{prefix}{i:04}"),
            caption: format!("a person holds a {} in the {}", objects[i % objects.len()], scenes[i % scenes.len()]),
            object: objects[i % objects.len()].to_string(),
            scene: scenes[(i / objects.len()) % scenes.len()].to_string(),
        })
        .collect()
}

#[test]
fn sampling_from_hashed_embeddings() {
    let cands = sources(400, "cand");
    let picked = sample_sources(&cands, &HashTextEmbedder::new(32, 16), 10, 10, 0).unwrap();
    assert_eq!(picked.len(), 100);
    assert_eq!(picked.iter().map(|s| &s.id).collect::<HashSet<_>>().len(), 100);
}

#[test]
fn benchmark_composition() {
    let entries = build_benchmark(&sources(100, "s"), &sources(60, "add"), &sources(70, "rm"), &Templates::default()).unwrap();
    assert_eq!(entries.len(), 1700);
    let count = |t: Task| entries.iter().filter(|e| e.task == t).count();
    assert_eq!(count(Task::ChangeObject), 400);
    assert_eq!((count(Task::AddObject), count(Task::RemoveObject)), (50, 50));
    for t in PER_SOURCE_TASKS {
        assert_eq!(count(t), 100);
    }
    let kinds: Vec<_> = entries
        .iter()
        .filter(|e| e.task == Task::ChangeObject && e.source_id == "s0007")
        .map(|e| e.change_kind.unwrap())
        .collect();
    assert_eq!(kinds, [ChangeKind::Replace, ChangeKind::Replace, ChangeKind::ReplaceWithEffect, ChangeKind::ReplaceWithEffect]);
    assert!(entries.iter().enumerate().all(|(i, e)| e.id == i));
    for e in &entries {
        assert_eq!(e.conditioning_kind, e.task.conditioning());
    }
    let v2d = entries.iter().find(|e| e.task == Task::VideoToDepth).unwrap();
    assert_eq!(v2d.instruction, "Turn the video into a depth map.");
    let d2v = entries.iter().find(|e| e.task == Task::DepthToVideo).unwrap();
    assert!(d2v.instruction.ends_with("a person holds a mug in the kitchen."));
    assert_eq!(d2v.conditioning_kind, Some(ConditioningKind::Depth));
    assert_eq!(Task::ALL.len(), 15);
    assert_eq!(entries.iter().map(|e| e.task).collect::<HashSet<_>>().len(), 15);
}

#[test]
fn benchmark_edge_cases() {
    assert!(build_benchmark(&[], &[], &[], &Templates::default()).unwrap().is_empty());
    let mut t = Templates::default();
    t.per_task.remove(&Task::Stylization);
    assert!(build_benchmark(&sources(3, "s"), &[], &[], &t).is_err());
    let mut t = Templates::default();
    t.replace.pop();
    assert!(build_benchmark(&sources(3, "s"), &[], &[], &t).is_err());
}

#[test]
fn manifest_round_trip() {
    let entries = build_benchmark(&sources(5, "s"), &sources(2, "a"), &sources(2, "r"), &Templates::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("manifest.jsonl");
    save_jsonl(&entries, &path).unwrap();
    let back: Vec<BenchEntry> = load_jsonl(&path).unwrap();
    assert_eq!(back, entries);
    assert!(read_jsonl::<BenchEntry>("{\"id\": 1}\n".as_bytes()).is_err());
}

fn entries_for(tasks: &[(Task, usize)]) -> Vec<BenchEntry> {
    let mut out = Vec::new();
    for &(task, n) in tasks {
        for _ in 0..n {
            out.push(BenchEntry {
                id: out.len(),
                source_id: format!("v{}", out.len()),
                task,
                instruction: String::new(),
                conditioning_kind: task.conditioning(),
                change_kind: None,
            });
        }
    }
    out
}

fn vlm(entry_id: usize, value: f64) -> ScoreRecord {
    ScoreRecord {
        entry_id,
        metric: Metric::Vlm,
        value,
    }
}

#[test]
fn aggregate_weights_tasks_equally() {
    let entries = entries_for(&[(Task::AddObject, 1), (Task::Reasoning, 3)]);
    let records = vec![vlm(0, 4.0), vlm(1, 8.0), vlm(2, 8.0), vlm(3, 8.0)];
    let r = aggregate(&records, &entries).unwrap();
    assert_eq!(r.overall[&Metric::Vlm], 6.0);
    assert_eq!(r.counts[&Metric::Vlm][&Task::Reasoning], 3);

    let single = aggregate(&[vlm(2, 3.5)], &entries).unwrap();
    assert_eq!(single.overall[&Metric::Vlm], 3.5);
    assert_eq!(single.excluded[&Metric::Vlm], vec![Task::AddObject]);

    assert!(aggregate(&[vlm(99, 1.0)], &entries).is_err());
    assert!(aggregate(&[vlm(0, 11.0)], &entries).is_err());
    let ta = ScoreRecord {
        entry_id: 0,
        metric: Metric::TextAlignment,
        value: 0.27,
    };
    let r = aggregate(&[vlm(0, 5.0), ta], &entries).unwrap();
    assert_eq!(r.overall.len(), 2);
    assert!(r.to_string().contains("Overall"));
}

#[derive(Deserialize)]
struct PerTaskFixture {
    overall: f64,
    per_task: BTreeMap<Task, f64>,
}

#[test]
fn per_task_row_recomputes_overall() {
    let fx: PerTaskFixture = serde_json::from_str(&fixture("per_task_vlm.json")).unwrap();
    assert_eq!(fx.per_task.len(), 15);
    // uneven entry counts per task must not matter
    let tasks: Vec<(Task, usize)> = Task::ALL.iter().enumerate().map(|(i, &t)| (t, 1 + i % 4)).collect();
    let entries = entries_for(&tasks);
    let records: Vec<_> = entries.iter().map(|e| vlm(e.id, fx.per_task[&e.task])).collect();
    let r = aggregate(&records, &entries).unwrap();
    let overall = r.overall[&Metric::Vlm];
    assert!((overall - fx.overall).abs() <= 0.01, "{overall}");
    assert_eq!(r.recompute_overall(Metric::Vlm), Some(overall));
}

#[derive(Deserialize)]
struct AgreementRow {
    task: Task,
    machine_prefers_a: usize,
    human_prefers_a: usize,
    agree: usize,
}

#[derive(Deserialize)]
struct AgreementFixture {
    samples_per_task: usize,
    overall_percent: f64,
    machine_prefers_total: usize,
    rows: Vec<AgreementRow>,
}

/// Per-sample data realising the given marginal counts and agreement.
fn realise(row: &AgreementRow, n: usize) -> Vec<PreferenceSample> {
    let both_a = (row.agree + row.machine_prefers_a + row.human_prefers_a - n) / 2;
    let machine_only = row.machine_prefers_a - both_a;
    let human_only = row.human_prefers_a - both_a;
    let both_b = n - both_a - machine_only - human_only;
    let mut out = Vec::new();
    for (count, m, h) in [
        (both_a, Choice::A, Choice::A),
        (machine_only, Choice::A, Choice::B),
        (human_only, Choice::B, Choice::A),
        (both_b, Choice::B, Choice::B),
    ] {
        for i in 0..count {
            let (hi, lo) = (7.0 + 0.01 * i as f64, 5.0);
            let (score_a, score_b) = if m == Choice::A { (hi, lo) } else { (lo, hi) };
            out.push(PreferenceSample {
                task: row.task,
                score_a,
                score_b,
                human: h,
            });
        }
    }
    out
}

#[test]
fn agreement_fixture_reproduces_overall() {
    let fx: AgreementFixture = serde_json::from_str(&fixture("agreement_vs_baseline1.json")).unwrap();
    let samples: Vec<_> = fx.rows.iter().flat_map(|r| realise(r, fx.samples_per_task)).collect();
    assert_eq!(samples.len(), 450);
    let rep = preference_agreement(&samples).unwrap();
    assert!((rep.overall_percent - fx.overall_percent).abs() < 0.05, "{}", rep.overall_percent);
    assert_eq!(rep.ties, 0);
    for row in &fx.rows {
        let t = &rep.per_task[&row.task];
        assert_eq!((t.matches, t.machine_prefers_a, t.human_prefers_a), (row.agree, row.machine_prefers_a, row.human_prefers_a));
    }
    let total: usize = rep.per_task.values().map(|t| t.machine_prefers_a).sum();
    assert_eq!(total, fx.machine_prefers_total);
}

#[test]
fn agreement_hand_counted() {
    let human: Vec<Choice> = (0..30).map(|i| if i % 3 == 0 { Choice::B } else { Choice::A }).collect();
    let a: Vec<f64> = (0..30).map(|i| if i < 4 { 2.0 } else if human[i] == Choice::A { 8.0 } else { 3.0 }).collect();
    let b: Vec<f64> = (0..30).map(|i| if i < 4 { if human[i] == Choice::A { 9.0 } else { 1.0 } } else if human[i] == Choice::A { 6.0 } else { 4.0 }).collect();
    // first four samples disagree, the other 26 agree
    let tasks = vec![Task::Stylization; 30];
    let rep = preference_agreement(&pair_samples(&tasks, &a, &b, &human).unwrap()).unwrap();
    assert_eq!(rep.per_task[&Task::Stylization].matches, 26);
    assert!((rep.overall_percent - 86.7).abs() < 0.05);

    let machine: Vec<Choice> = a.iter().zip(&b).map(|(x, y)| if y > x { Choice::B } else { Choice::A }).collect();
    let rep = preference_agreement(&pair_samples(&tasks, &a, &b, &machine).unwrap()).unwrap();
    assert_eq!(rep.overall_percent, 100.0);

    assert!(pair_samples(&tasks, &a[..29], &b, &human).is_err());
    assert!(preference_agreement(&[]).is_err());
}

#[test]
fn mock_judge_scores_in_entry_order() {
    let entries = entries_for(&[(Task::AddObject, 5), (Task::Combined, 6)]);
    let judge = MockJudge {
        scores: entries.iter().map(|e| (e.id, (e.id % 10) as f64)).collect(),
    };
    let records = score_entries(&judge, &entries, 3).unwrap();
    assert_eq!(records.len(), 11);
    assert!(records.iter().enumerate().all(|(i, r)| r.entry_id == i && r.value == (i % 10) as f64));
    assert_eq!(records, score_entries(&judge, &entries, 1).unwrap());
    let partial = MockJudge {
        scores: HashMap::from([(0, 1.0)]),
    };
    assert!(score_entries(&partial, &entries, 2).is_err());
}

#[test]
fn stub_conditioning_signals() {
    let frames = Tensor::<f32>::zeros(&[5, 3, 8, 8]);
    for kind in [ConditioningKind::Depth, ConditioningKind::Sketch, ConditioningKind::Pose] {
        let s = StubExtractor(kind).extract(&frames).unwrap();
        assert_eq!((s.kind, s.frames.shape()), (kind, &[5usize, 1, 8, 8][..]));
    }
    assert!(StubExtractor(ConditioningKind::Pose).extract(&Tensor::zeros(&[3, 8])).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn kmeans_objective_never_increases(
        pts in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 8..40),
        k in 1usize..6,
        seed in 0u64..1000,
    ) {
        let c = kmeans(&pts, k.min(pts.len()), seed).unwrap();
        prop_assert!(c.inertia.windows(2).all(|w| w[1] <= w[0] + 1e-9));
        for j in 0..c.k() {
            prop_assert!(!c.members(j).is_empty());
        }
    }

    #[test]
    fn selection_ignores_input_order(seed in 0u64..1000, per in 1usize..6) {
        let (pts, _) = blobs(4, 8, 3, seed);
        let c = kmeans(&pts, 4, seed).unwrap();
        let ids: Vec<usize> = (0..pts.len()).collect();
        let base = select_diverse(&ids, &pts, &c, per).unwrap();

        let mut order: Vec<usize> = (0..pts.len()).collect();
        let mut r = rng::seeded(seed + 1);
        use rand::seq::SliceRandom;
        order.shuffle(&mut r);
        let perm_pts: Vec<_> = order.iter().map(|&i| pts[i].clone()).collect();
        let perm_ids: Vec<_> = order.iter().map(|&i| ids[i]).collect();
        let perm_c = Clustering { assignment: order.iter().map(|&i| c.assignment[i]).collect(), ..c.clone() };
        prop_assert_eq!(select_diverse(&perm_ids, &perm_pts, &perm_c, per).unwrap(), base);
    }

    #[test]
    fn composition_closed_form(n in 0usize..40, add in 0usize..80, rm in 0usize..80) {
        let e = build_benchmark(&sources(n, "s"), &sources(add, "a"), &sources(rm, "r"), &Templates::default()).unwrap();
        prop_assert_eq!(e.len(), expected_entries(n, add, rm));
        if add >= 50 && rm >= 50 {
            prop_assert_eq!(e.len(), 12 * n + 4 * n + 50 + 50);
        }
    }

    #[test]
    fn duplicating_a_task_leaves_overall_unchanged(
        values in prop::collection::vec(0.0f64..10.0, 6),
        task in 0usize..3,
        copies in 1usize..4,
    ) {
        let entries = entries_for(&[(Task::AddObject, 2), (Task::Reasoning, 2), (Task::Combined, 2)]);
        let records: Vec<_> = values.iter().enumerate().map(|(i, &v)| vlm(i, v)).collect();
        let base = aggregate(&records, &entries).unwrap().overall[&Metric::Vlm];
        let mut dup = records.clone();
        for _ in 0..copies {
            dup.extend(records.iter().filter(|r| entries[r.entry_id].task == Task::ALL[[0, 7, 14][task]]).copied());
        }
        let r = aggregate(&dup, &entries).unwrap();
        prop_assert!((r.overall[&Metric::Vlm] - base).abs() < 1e-12);
        prop_assert_eq!(r.recompute_overall(Metric::Vlm).unwrap(), r.overall[&Metric::Vlm]);
    }

    #[test]
    fn agreement_symmetric_under_relabelling(
        rows in prop::collection::vec((0usize..15, 0.0f64..10.0, 0.0f64..10.0, any::<bool>()), 1..60),
    ) {
        let samples: Vec<PreferenceSample> = rows
            .iter()
            .filter(|r| r.1 != r.2)
            .map(|&(t, a, b, h)| PreferenceSample { task: Task::ALL[t], score_a: a, score_b: b, human: if h { Choice::A } else { Choice::B } })
            .collect();
        prop_assume!(!samples.is_empty());
        let swapped: Vec<_> = samples
            .iter()
            .map(|s| PreferenceSample { task: s.task, score_a: s.score_b, score_b: s.score_a, human: s.human.flip() })
            .collect();
        let x = preference_agreement(&samples).unwrap();
        let y = preference_agreement(&swapped).unwrap();
        prop_assert_eq!(x.overall_percent, y.overall_percent);
        for (t, a) in &x.per_task {
            prop_assert_eq!(a.matches, y.per_task[t].matches);
        }
    }
}
