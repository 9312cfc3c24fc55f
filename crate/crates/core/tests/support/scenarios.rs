//! Drivers shared by the per-module tests and the acceptance run.

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use workbench_core::classifier::{solve_binary, SHUFFLE_SEED};
use workbench_core::dataset::DatasetManifest;
use workbench_core::digest::sha256_hex;
use workbench_core::features::HISTO_V1_DIM;
use workbench_core::montage;
use workbench_core::{
    AuditLog, BuiltinExtractor, ClassifierModel, FeatureVector, Hyperparams, ManualClock,
    MockScript, Session, SessionConfig, TickOutcome, TrainingDataset,
};

use super::kkt_oracle;
use super::replay_oracle::{replay, Expected, Step};
use super::noisy_png;

pub const GRID: usize = 50;

/// Two random orthonormal directions in feature space.
fn plane(rng: &mut ChaCha8Rng, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut draw = || -> Vec<f64> { (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect() };
    let normalize = |v: &mut Vec<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= n);
    };
    let mut u = draw();
    normalize(&mut u);
    let mut v = draw();
    let proj: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
    v.iter_mut().zip(&u).for_each(|(x, a)| *x -= proj * a);
    normalize(&mut v);
    (u, v)
}

fn embed(p: [f64; 2], u: &[f64], v: &[f64]) -> Vec<f64> {
    u.iter().zip(v).map(|(a, b)| p[0] * a + p[1] * b).collect()
}

pub struct PlaneProblem {
    pub points: Vec<[f64; 2]>,
    pub labels: Vec<f64>,
}

/// At most eight points in the unit square, split by a random line with a
/// clear gap, both classes present.
pub fn plane_problem(seed: u64) -> PlaneProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let n = rng.gen_range(3..=8);
        let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let (nx, ny) = (angle.cos(), angle.sin());
        let offset = rng.gen_range(-0.3..0.3);
        let mut points = Vec::new();
        let mut labels = Vec::new();
        while points.len() < n {
            let p = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let side = nx * p[0] + ny * p[1] - offset;
            if side.abs() < 0.1 {
                continue;
            }
            points.push(p);
            labels.push(side.signum());
        }
        if labels.iter().any(|&y| y > 0.0) && labels.iter().any(|&y| y < 0.0) {
            return PlaneProblem { points, labels };
        }
    }
}

/// Fraction of a 50x50 grid over `[-1.5, 1.5]^2` on which the trained
/// separator and the exact one give the same side.
pub fn oracle_agreement(seed: u64) -> f64 {
    let problem = plane_problem(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let (u, v) = plane(&mut rng, HISTO_V1_DIM);
    let embedded: Vec<Vec<f64>> = problem.points.iter().map(|&p| embed(p, &u, &v)).collect();
    let refs: Vec<&[f64]> = embedded.iter().map(|x| x.as_slice()).collect();
    let hp = Hyperparams::default();
    let trained = solve_binary(&refs, &problem.labels, &hp, SHUFFLE_SEED);

    let pts2: Vec<Vec<f64>> = problem.points.iter().map(|p| p.to_vec()).collect();
    let exact = kkt_oracle::solve(&pts2, &problem.labels, hp.c).expect("oracle finds the optimum");

    let mut agree = 0;
    for i in 0..GRID {
        for j in 0..GRID {
            let g = [
                -1.5 + 3.0 * i as f64 / (GRID - 1) as f64,
                -1.5 + 3.0 * j as f64 / (GRID - 1) as f64,
            ];
            let x = embed(g, &u, &v);
            let s_trained: f64 =
                trained.weights.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() + trained.bias;
            let s_exact = exact.score(&g);
            if (s_trained >= 0.0) == (s_exact >= 0.0) {
                agree += 1;
            }
        }
    }
    agree as f64 / (GRID * GRID) as f64
}

/// Training accuracy on two classes of near-solid images (reds vs blues).
pub fn solid_color_accuracy() -> f64 {
    let mut ds = TrainingDataset::new();
    ds.add_category("red", 0).unwrap();
    ds.add_category("blue", 0).unwrap();
    let reds: Vec<Vec<u8>> = (0..12).map(|s| noisy_png([200, 30, 40], s)).collect();
    let blues: Vec<Vec<u8>> = (0..12).map(|s| noisy_png([30, 50, 210], 100 + s)).collect();
    ds.upload_images("red", &reds).unwrap();
    ds.upload_images("blue", &blues).unwrap();
    let (_, summary) =
        ClassifierModel::train(&ds, &BuiltinExtractor::new(), Hyperparams::default(), 0).unwrap();
    summary.training_accuracy
}

/// Runs `calls` predictions on random inputs against models with 2..=10
/// labels; returns how many broke "sum = 100" or "top label = argmax".
pub fn prediction_invariant_violations(calls: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = 8;
    let mut violations = 0;
    let mut model = None;
    for call in 0..calls {
        if call % 500 == 0 {
            let k = rng.gen_range(2..=10);
            let labels: Vec<String> = (0..k).map(|i| format!("c{i}")).collect();
            let samples: Vec<(usize, Vec<f64>)> = (0..4 * k)
                .map(|i| (i % k, (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()))
                .collect();
            let (m, _) = ClassifierModel::train_on_features(
                labels,
                &samples,
                Hyperparams::default(),
                "random",
                0,
            )
            .unwrap();
            model = Some(m);
        }
        let m = model.as_ref().unwrap();
        let scale = 10f64.powi(rng.gen_range(-2..4));
        let fv = FeatureVector {
            values: (0..dim).map(|_| rng.gen_range(-1.0..1.0) * scale).collect(),
            extractor_id: "random".into(),
        };
        let p = m.predict_features(&fv).unwrap();
        let sum: u32 = p.percentages.iter().sum();
        let best = p
            .scores
            .iter()
            .enumerate()
            .fold(0, |b, (i, s)| if *s > p.scores[b] { i } else { b });
        if sum != 100 || p.top_label != p.labels[best] {
            violations += 1;
        }
    }
    violations
}

pub const TICK_MS: u64 = 60_000;
pub const SIM_MS: u64 = 30 * 60_000;

/// Thirty minutes of scripted use: bursts of interactions at random
/// 10-second slots, ticks every minute, and two windows with the active
/// agent switched off.
pub fn scheduler_timeline(seed: u64) -> Vec<(u64, Step)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut timeline = Vec::new();
    let toggles = [(600_000, false), (900_000, true), (1_320_000, false), (1_500_000, true)];
    let mut t = 0;
    while t <= SIM_MS {
        if let Some(&(_, on)) = toggles.iter().find(|(at, _)| *at == t) {
            timeline.push((t, Step::Toggle(on)));
        }
        // quiet stretches make skipped ticks likely
        let busy = (t / 180_000) % 2 == 0;
        if t > 0 && rng.gen_bool(if busy { 0.3 } else { 0.03 }) {
            timeline.push((t, Step::Interact));
        }
        if t > 0 && t % TICK_MS == 0 {
            timeline.push((t, Step::Tick));
        }
        t += 10_000;
    }
    timeline
}

pub struct SchedulerRun {
    pub expected: Vec<Expected>,
    pub observed: Vec<Expected>,
    pub active_requests: usize,
    pub requests_while_disabled: usize,
}

/// Drives a session through the timeline on a manual clock.
pub async fn run_scheduler(seed: u64) -> SchedulerRun {
    let timeline = scheduler_timeline(seed);
    let h = super::harness(MockScript::new("Noted."));
    h.session.start_session().unwrap();
    h.session.add_category("A").unwrap();
    // setup is not part of the script
    h.session.tick_active().await.unwrap();
    let baseline = h.session.active_agent().requests_issued();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
    let mut observed = Vec::new();
    let mut requests_while_disabled = 0;
    let mut enabled = true;
    let mut uploads = 0;
    for &(at, step) in &timeline {
        h.clock.set(at);
        match step {
            Step::Interact => {
                if rng.gen_bool(0.5) {
                    h.session.handle_chat("what next?").await.unwrap();
                } else {
                    uploads += 1;
                    h.session
                        .upload_images("A", &[noisy_png([90, 160, 90], 1000 + uploads)])
                        .unwrap();
                }
            }
            Step::Toggle(on) => {
                enabled = on;
                h.session.set_active_toggle(on).unwrap();
            }
            Step::Tick => {
                let before = h.session.active_agent().requests_issued();
                let outcome = h.session.tick_active().await.unwrap();
                let after = h.session.active_agent().requests_issued();
                if !enabled {
                    requests_while_disabled += (after - before) as usize;
                }
                observed.push(match outcome {
                    TickOutcome::Disabled => Expected::Disabled,
                    TickOutcome::Skipped => Expected::Skip,
                    TickOutcome::Fired(_) | TickOutcome::Failed(_) => Expected::Fire,
                });
            }
        }
    }
    SchedulerRun {
        expected: replay(&timeline, true),
        observed,
        active_requests: (h.session.active_agent().requests_issued() - baseline) as usize,
        requests_while_disabled,
    }
}

const NAMES: [&str; 8] = ["Edible", "Non-Edible", "Not a Plant", "a/b", "café ünï", "..", "x y", "100%"];

fn digest_json<T: serde::Serialize>(value: &T) -> String {
    sha256_hex(&serde_json::to_vec(value).unwrap())
}

/// What a persisted session is compared on after reloading.
#[derive(Debug, PartialEq)]
pub struct PersistedView {
    pub state: String,
    pub history: String,
    pub dataset: DatasetManifest,
    pub model_weights: Option<String>,
    pub toggle: bool,
    pub interactions_since_tick: u64,
}

pub fn view(session: &Session) -> PersistedView {
    PersistedView {
        state: session.state_digest(),
        history: digest_json(&session.history()),
        dataset: session.dataset().manifest(),
        model_weights: session.model().map(|m| digest_json(&(&m.labels, &m.weights, &m.biases))),
        toggle: session.toggle().active_enabled,
        interactions_since_tick: session.activity().interactions_since_tick,
    }
}

/// Builds a session with a random sequence of operations, storing it under
/// `root`, then reloads it. Returns the views before and after.
pub async fn persistence_round_trip(seed: u64, root: &Path) -> (PersistedView, PersistedView) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let id = format!("s-{seed:04}");
    let dir = root.join(&id);
    let script = MockScript::new("ok");
    let clock = Arc::new(ManualClock::new(1_000));
    let audit = AuditLog::in_memory();
    let session = Session::new(&id, SessionConfig::default(), super::deps(script.clone(), clock.clone(), audit.clone()))
        .with_seed(seed)
        .with_storage(&dir)
        .unwrap();
    session.start_session().unwrap();
    let ops = rng.gen_range(4..16);
    let mut img_seed = seed * 1000;
    for _ in 0..ops {
        clock.advance(rng.gen_range(0..5_000));
        let cats = session.categories();
        match rng.gen_range(0..9) {
            0 | 1 => {
                let name = NAMES[rng.gen_range(0..NAMES.len())];
                let _ = session.add_category(name);
            }
            2 | 3 if !cats.is_empty() => {
                let cat = &cats[rng.gen_range(0..cats.len())].name;
                let n = rng.gen_range(1..4);
                let base = [rng.gen(), rng.gen(), rng.gen()];
                let imgs: Vec<Vec<u8>> = (0..n)
                    .map(|_| {
                        img_seed += 1;
                        noisy_png(base, img_seed)
                    })
                    .collect();
                session.upload_images(cat, &imgs).unwrap();
            }
            4 => {
                session.handle_chat("how is it going?").await.unwrap();
            }
            5 => {
                session.set_active_toggle(rng.gen_bool(0.5)).unwrap();
            }
            6 => {
                let _ = session.train();
            }
            7 if session.model().is_some() => {
                img_seed += 1;
                session.infer(&noisy_png([rng.gen(), 99, 7], img_seed)).unwrap();
            }
            8 if !cats.is_empty() => {
                let cat = &cats[rng.gen_range(0..cats.len())].name;
                if rng.gen_bool(0.5) {
                    let _ = session.rename_category(cat, NAMES[rng.gen_range(0..NAMES.len())]);
                } else {
                    session.remove_category(cat).unwrap();
                }
            }
            _ => {}
        }
    }
    let before = view(&session);
    drop(session);
    let loaded = Session::load(&dir, SessionConfig::default(), super::deps(script, clock, audit)).unwrap();
    assert_eq!(loaded.id(), id);
    (before, view(&loaded))
}

pub struct IsolationRun {
    pub finished: bool,
    pub passive_replies: usize,
    pub active_replies: usize,
    pub request_ids: Vec<String>,
    pub elapsed: std::time::Duration,
}

/// A chat and an active tick issued at the same moment against a backend
/// that takes `latency_ms` per call, bounded by a five-second deadline.
pub async fn concurrent_chat_and_tick(latency_ms: u64) -> IsolationRun {
    let script = MockScript::new("passive answer")
        .agent_rule(workbench_core::AgentId::Active, "Advise a user", "active advice")
        .with_latency(latency_ms);
    let h = super::harness(script);
    h.session.start_session().unwrap();
    h.session.handle_chat("first").await.unwrap();
    let start = std::time::Instant::now();
    let session = h.session.clone();
    let both = async {
        let (chat, tick) = tokio::join!(session.handle_chat("second"), session.tick_active());
        chat.unwrap();
        assert!(tick.unwrap().requested());
    };
    let finished = tokio::time::timeout(std::time::Duration::from_secs(5), both).await.is_ok();
    let history = h.session.history();
    let count = |role| history.iter().filter(|m| m.role == role).count();
    IsolationRun {
        finished,
        // the opening question is not a model reply
        passive_replies: count(workbench_core::Role::PassiveAgent) - 1,
        active_replies: count(workbench_core::Role::ActiveAgent),
        request_ids: h.audit.records().into_iter().map(|r| r.request_id).collect(),
        elapsed: start.elapsed(),
    }
}

/// A dataset with one category per entry of `sizes`, each image distinct.
pub fn sized_dataset(sizes: &[usize]) -> TrainingDataset {
    let mut ds = TrainingDataset::new();
    let mut seed = 0;
    for (c, &n) in sizes.iter().enumerate() {
        let name = format!("c{c}");
        ds.add_category(&name, 0).unwrap();
        let images: Vec<Vec<u8>> = (0..n)
            .map(|_| {
                seed += 1;
                noisy_png([(c * 60 % 256) as u8, 120, 200], seed)
            })
            .collect();
        let report = ds.upload_images(&name, &images).unwrap();
        assert_eq!(report.added.len(), n);
    }
    ds
}

/// Thumbnail count of each category's montage.
pub fn montage_thumbnail_counts(sizes: &[usize], seed: u64) -> Vec<usize> {
    let ds = sized_dataset(sizes);
    montage::render_all(&ds, seed)
        .unwrap()
        .iter()
        .map(|m| m.selected.len())
        .collect()
}

/// Renders the same dataset twice with one seed and compares the PNG bytes.
pub fn montages_repeatable(sizes: &[usize], seed: u64) -> bool {
    let ds = sized_dataset(sizes);
    let a = montage::render_all(&ds, seed).unwrap();
    let b = montage::render_all(&ds, seed).unwrap();
    a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.png == y.png)
}
