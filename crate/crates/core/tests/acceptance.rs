//! End-to-end acceptance checks. Each test prints one PASS/FAIL line.
//!
//! Tests share trained models and are serialized so that wall-clock
//! measurements are not disturbed by each other.

use std::collections::BTreeSet;
use std::io::Write;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use blindguard_core::corruption::corrupt;
use blindguard_core::detection::{anomaly_scores, micro_auc, roc_auc, select_topk, Detector};
use blindguard_core::embedding::{EmbeddingMatrix, EmbeddingProviderSpec};
use blindguard_core::encoder::{AblationFlags, EncoderModel};
use blindguard_core::graph::{generate_topology, normalize_adjacency, AgentGraph, TopologyKind};
use blindguard_core::parallel::ExecMode;
use blindguard_core::remediation::{prune, PruneMode};
use blindguard_core::rng;
use blindguard_core::sim::{
    attacked_sample, evaluate, generate_normal_corpus, AttackKind, DefenseKind, EvalConfig,
    MetricsTable, SimConfig,
};
use blindguard_core::training::{contrastive_loss, pipeline_loss, train, TrainConfig};
use ndarray::{array, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

const DIM: usize = 384;
const TRAIN_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const TRAIN_GRAPHS: usize = 200;
const TEST_SEED: u64 = 9000;
const TEST_PER_CELL: u64 = 100;

fn provider() -> EmbeddingProviderSpec {
    EmbeddingProviderSpec::synthetic(DIM, 0)
}

fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(name: &str, pass: bool, detail: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(
        out,
        "{} {name}: {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    let _ = out.flush();
    assert!(pass, "{name}: {detail}");
}

fn train_models(n_agents: usize, seeds: &[u64], ablation: AblationFlags) -> Vec<Detector> {
    seeds
        .iter()
        .map(|&seed| {
            let corpus = generate_normal_corpus(
                TRAIN_GRAPHS,
                n_agents,
                &TopologyKind::GENERATED,
                &provider(),
                seed,
                ExecMode::Parallel,
            )
            .unwrap();
            let cfg = TrainConfig {
                seed,
                ablation,
                ..TrainConfig::default()
            };
            assert_eq!(cfg.corruption.alpha, 1.0);
            assert_eq!(cfg.epochs, 50);
            let (model, _) = train(&corpus, &cfg).unwrap();
            Detector::new(model)
        })
        .collect()
}

struct Trained {
    detectors: Vec<Detector>,
    elapsed: Duration,
}

fn full_models() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let start = Instant::now();
        let detectors = train_models(10, &TRAIN_SEEDS, AblationFlags::default());
        Trained {
            detectors,
            elapsed: start.elapsed(),
        }
    })
}

fn ablated_models() -> &'static [Detector] {
    static CELL: OnceLock<Vec<Detector>> = OnceLock::new();
    CELL.get_or_init(|| {
        let flags = AblationFlags {
            use_neigh: false,
            use_global: false,
        };
        train_models(10, &TRAIN_SEEDS, flags)
    })
}

struct TestCell {
    kind: AttackKind,
    topology: TopologyKind,
    graphs: Vec<(AgentGraph, EmbeddingMatrix, Vec<u8>)>,
}

fn test_set() -> &'static [TestCell] {
    static CELL: OnceLock<Vec<TestCell>> = OnceLock::new();
    CELL.get_or_init(|| {
        let mut cells = Vec::new();
        for kind in AttackKind::ALL {
            for topology in TopologyKind::GENERATED {
                let graphs = (0..TEST_PER_CELL)
                    .map(|i| {
                        attacked_sample(kind, topology, 10, 3, 0.9, &provider(), TEST_SEED, i)
                            .unwrap()
                    })
                    .collect();
                cells.push(TestCell {
                    kind,
                    topology,
                    graphs,
                });
            }
        }
        cells
    })
}

/// Per-cell micro-AUC for one detector.
fn cell_aucs(det: &Detector) -> Vec<f64> {
    test_set()
        .iter()
        .map(|cell| {
            let scored: Vec<(Vec<f64>, Vec<u8>)> = cell
                .graphs
                .iter()
                .map(|(g, x, l)| (det.detect(g, x, 3).unwrap().scores, l.clone()))
                .collect();
            micro_auc(&scored).unwrap()
        })
        .collect()
}

fn pooled_auc(det: &Detector) -> f64 {
    let scored: Vec<(Vec<f64>, Vec<u8>)> = test_set()
        .iter()
        .flat_map(|cell| cell.graphs.iter())
        .map(|(g, x, l)| (det.detect(g, x, 3).unwrap().scores, l.clone()))
        .collect();
    micro_auc(&scored).unwrap()
}

fn sweep_config(
    n_agents: usize,
    n_attackers: usize,
    defenses: Vec<DefenseKind>,
    control: bool,
) -> EvalConfig {
    EvalConfig {
        topologies: TopologyKind::GENERATED.to_vec(),
        n_agents,
        n_attackers,
        strength: 0.9,
        attack_kinds: AttackKind::ALL.to_vec(),
        no_attack_control: control,
        defenses,
        n_tasks: TEST_PER_CELL as usize,
        seeds: vec![TEST_SEED],
        sim: SimConfig {
            rounds: 3,
            k: 3,
            provider: provider(),
            record_features: false,
            ..SimConfig::default()
        },
    }
}

/// Mean ASR over attack kinds (and tables) for one topology, defense and round.
fn mean_asr(
    tables: &[MetricsTable],
    topology: TopologyKind,
    defense: DefenseKind,
    round: u32,
) -> f64 {
    let mut values = Vec::new();
    for t in tables {
        for kind in AttackKind::ALL {
            values.push(t.find(topology, kind.as_str(), defense, round).unwrap().asr);
        }
    }
    values.iter().sum::<f64>() / values.len() as f64
}

#[test]
fn corruption_magnitude_identity() {
    let _guard = serial();
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut count = 0usize;
    for d in [8usize, 384] {
        for alpha in [0.25f64, 0.5, 1.0, 2.0] {
            for batch in 0..100u64 {
                let mut r = rng::stream(
                    1,
                    "acceptance-corruption",
                    &[d as u64, alpha.to_bits(), batch],
                );
                let rows: Vec<Vec<f64>> = (0..100)
                    .map(|_| {
                        let scale = 10f64.powf(r.random_range(-3.0..3.0));
                        (0..d)
                            .map(|_| scale * r.sample::<f64, _>(StandardNormal))
                            .collect()
                    })
                    .collect();
                let x = EmbeddingMatrix::from_rows(&rows, d).unwrap();
                let all: BTreeSet<usize> = (0..100).collect();
                let out = corrupt(&x, &all, alpha, &mut r).unwrap();
                for i in 0..100 {
                    let orig = x.row(i);
                    let diff = &out.features.row(i) - &orig;
                    let ratio = diff.dot(&diff).sqrt() / orig.dot(&orig).sqrt();
                    worst = worst.max((ratio - alpha).abs());
                    count += 1;
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        "corruption magnitude identity",
        worst < 1e-6 && secs < 5.0 && count == 80_000,
        &format!("{count} corruptions, max |ratio - alpha| = {worst:.2e}, {secs:.2}s"),
    );
}

#[test]
fn pipeline_gradient_matches_finite_differences() {
    let _guard = serial();
    let start = Instant::now();
    let (n, d, h, tau, step) = (6usize, 8usize, 16usize, 0.5, 1e-4);
    let mut r = rng::stream(2, "acceptance-gradient", &[]);
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..d).map(|_| r.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let x = EmbeddingMatrix::from_rows(&rows, d).unwrap();
    let g = generate_topology(TopologyKind::Random, n, 5).unwrap();
    let adj = normalize_adjacency(&g);
    let labels = [0u8, 1, 0, 0, 1, 0];
    let model = EncoderModel::init(d, h, AblationFlags::default(), 3);
    let (_, grads) = pipeline_loss(&model, &x, &adj, &labels, tau).unwrap();
    let loss_of = |m: &EncoderModel| pipeline_loss(m, &x, &adj, &labels, tau).unwrap().0;

    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    let mut check = |analytic: f64, perturb: &dyn Fn(&mut EncoderModel, f64)| {
        let mut plus = model.clone();
        perturb(&mut plus, step);
        let mut minus = model.clone();
        perturb(&mut minus, -step);
        let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * step);
        let scale = analytic.abs().max(numeric.abs());
        let rel = if scale < 1e-10 {
            0.0
        } else {
            (analytic - numeric).abs() / scale
        };
        worst = worst.max(rel);
        checked += 1;
    };
    for ((i, j), &a) in grads.layer1_weights.indexed_iter() {
        check(a, &|m, e| m.layer1_weights[[i, j]] += e);
    }
    for (i, &a) in grads.layer1_bias.indexed_iter() {
        check(a, &|m, e| m.layer1_bias[i] += e);
    }
    for ((i, j), &a) in grads.layer2_weights.indexed_iter() {
        check(a, &|m, e| m.layer2_weights[[i, j]] += e);
    }
    for (i, &a) in grads.layer2_bias.indexed_iter() {
        check(a, &|m, e| m.layer2_bias[i] += e);
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        "pipeline gradient",
        worst < 1e-4 && checked == model.parameter_count() && secs < 30.0,
        &format!("{checked} parameters, max relative error {worst:.2e}, {secs:.2}s"),
    );
}

#[test]
fn contrastive_loss_hand_value() {
    let _guard = serial();
    let z = array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
    let (loss, _) = contrastive_loss(&z, &[0, 0, 1], 1.0).unwrap();
    // Two anchors each contribute -ln(e / (e + 1)); the third has no positive.
    let e = std::f64::consts::E;
    let expected = 2.0 * -(e / (e + 1.0)).ln() / 3.0;
    report(
        "contrastive loss hand value",
        (loss - 0.20884).abs() < 1e-4 && (loss - expected).abs() < 1e-12,
        &format!("loss = {loss:.6}"),
    );
}

#[test]
fn anomaly_scores_match_brute_force() {
    let _guard = serial();
    let mut worst: f64 = 0.0;
    let mut same_order = true;
    for seed in 0..100u64 {
        let mut r = rng::stream(seed, "acceptance-scores", &[]);
        let n = r.random_range(1..=64usize);
        let h = r.random_range(2..=32usize);
        let z = Array2::from_shape_fn((n, h), |_| r.sample::<f64, _>(StandardNormal));
        let fast = anomaly_scores(&z).unwrap();
        let cos = |a: usize, b: usize| {
            let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
            for k in 0..h {
                dot += z[[a, k]] * z[[b, k]];
                na += z[[a, k]] * z[[a, k]];
                nb += z[[b, k]] * z[[b, k]];
            }
            dot / (na.sqrt() * nb.sqrt())
        };
        let mut with_self = vec![0.0; n];
        let mut without_self = vec![0.0; n];
        for i in 0..n {
            let mut total = 0.0;
            let mut others = 0.0;
            for j in 0..n {
                let c = cos(i, j);
                total += c;
                if j != i {
                    others += c;
                }
            }
            with_self[i] = -total / n as f64;
            without_self[i] = if n > 1 { -others / (n - 1) as f64 } else { 0.0 };
        }
        for i in 0..n {
            worst = worst.max((fast[i] - with_self[i]).abs());
        }
        if n > 1 {
            same_order &= select_topk(&with_self, n) == select_topk(&without_self, n);
        }
    }
    report(
        "anomaly score oracle",
        worst < 1e-9 && same_order,
        &format!(
            "100 instances, max deviation {worst:.2e}, self-term order invariant: {same_order}"
        ),
    );
}

#[test]
fn roc_auc_matches_pair_counting() {
    let _guard = serial();
    let mut worst: f64 = 0.0;
    let mut tied = 0;
    for seed in 0..100u64 {
        let mut r = rng::stream(seed, "acceptance-auc", &[]);
        let n = r.random_range(4..=200usize);
        let mut labels: Vec<u8> = (0..n).map(|_| u8::from(r.random_bool(0.3))).collect();
        labels[0] = 1;
        labels[1] = 0;
        let levels = r.random_range(2..=10u32);
        let scores: Vec<f64> = (0..n)
            .map(|_| f64::from(r.random_range(0..levels)) / 4.0)
            .collect();
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li == 1 && lj == 0 {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        wins += 1.0;
                    } else if scores[i] == scores[j] {
                        wins += 0.5;
                        tied += 1;
                    }
                }
            }
        }
        let fast = roc_auc(&scores, &labels).unwrap();
        worst = worst.max((fast - wins / pairs).abs());
    }
    report(
        "roc auc oracle",
        worst < 1e-12 && tied > 0,
        &format!("100 instances, {tied} tied pairs, max deviation {worst:.2e}"),
    );
}

#[test]
fn end_to_end_detection() {
    let _guard = serial();
    let trained = full_models();
    let start = Instant::now();
    let per_seed: Vec<Vec<f64>> = trained.detectors.iter().map(cell_aucs).collect();
    let elapsed = trained.elapsed + start.elapsed();
    let mut lines = Vec::new();
    let mut all_pass = true;
    for (c, cell) in test_set().iter().enumerate() {
        let mean = per_seed.iter().map(|s| s[c]).sum::<f64>() / per_seed.len() as f64;
        all_pass &= mean >= 0.90;
        lines.push(format!("{}/{}={mean:.3}", cell.topology, cell.kind));
    }
    let secs = elapsed.as_secs_f64();
    report(
        "end-to-end detection",
        all_pass && secs < 600.0,
        &format!(
            "micro-AUC over {} seeds: {}; {secs:.0}s",
            per_seed.len(),
            lines.join(" ")
        ),
    );
}

#[test]
fn defense_lowers_attack_success() {
    let _guard = serial();
    let trained = full_models();
    let defenses = vec![
        DefenseKind::None,
        DefenseKind::BlindGuard,
        DefenseKind::Oracle,
    ];
    let cfg = sweep_config(10, 3, defenses, true);
    let tables: Vec<MetricsTable> = trained
        .detectors
        .iter()
        .map(|det| evaluate(&cfg, Some(det), ExecMode::Parallel).unwrap())
        .collect();
    let mut strictly_lower = true;
    let mut big_drops = 0;
    let mut oracle_bounded = true;
    let mut lines = Vec::new();
    for topology in TopologyKind::GENERATED {
        let none = mean_asr(&tables, topology, DefenseKind::None, 3);
        let guard = mean_asr(&tables, topology, DefenseKind::BlindGuard, 3);
        let oracle = mean_asr(&tables, topology, DefenseKind::Oracle, 3);
        let control = tables
            .iter()
            .map(|t| t.find(topology, "none", DefenseKind::None, 3).unwrap().asr)
            .sum::<f64>()
            / tables.len() as f64;
        strictly_lower &= guard < none;
        if guard <= none - 0.10 {
            big_drops += 1;
        }
        oracle_bounded &= oracle <= control + 0.02;
        lines.push(format!(
            "{topology}: none={none:.3} blindguard={guard:.3} oracle={oracle:.3} no-attack={control:.3}"
        ));
    }
    report(
        "defense lowers ASR@3",
        strictly_lower && big_drops >= 3 && oracle_bounded,
        &format!("{}; drops >= 0.10 on {big_drops}/4", lines.join("; ")),
    );
}

#[test]
fn context_ablation_lowers_auc() {
    let _guard = serial();
    let full = full_models();
    let ablated = ablated_models();
    let mut wins = 0;
    let mut lines = Vec::new();
    for (seed, (f, a)) in TRAIN_SEEDS.iter().zip(full.detectors.iter().zip(ablated)) {
        let (af, aa) = (pooled_auc(f), pooled_auc(a));
        if af - aa >= 0.03 {
            wins += 1;
        }
        lines.push(format!("seed {seed}: full={af:.3} self-only={aa:.3}"));
    }
    report(
        "context ablation",
        wins >= 3,
        &format!(
            "{}; full ahead by >= 0.03 on {wins}/5 seeds",
            lines.join("; ")
        ),
    );
}

#[test]
fn train_and_evaluate_are_deterministic() {
    let _guard = serial();
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate_normal_corpus(
        20,
        10,
        &TopologyKind::GENERATED,
        &provider(),
        11,
        ExecMode::Parallel,
    )
    .unwrap();
    let cfg = TrainConfig {
        epochs: 5,
        seed: 11,
        ..TrainConfig::default()
    };
    let mut checkpoints = Vec::new();
    for run in 0..2 {
        let (model, _) = train(&corpus, &cfg).unwrap();
        let path = dir.path().join(format!("model-{run}.bgck"));
        model.save(&path).unwrap();
        checkpoints.push(std::fs::read(&path).unwrap());
    }
    let det = Detector::new(EncoderModel::load(&dir.path().join("model-0.bgck")).unwrap());
    let eval_cfg = EvalConfig {
        n_tasks: 10,
        seeds: vec![3, 4],
        ..sweep_config(
            10,
            3,
            vec![
                DefenseKind::None,
                DefenseKind::BlindGuard,
                DefenseKind::Oracle,
            ],
            true,
        )
    };
    let mut metrics = Vec::new();
    for (run, mode) in [ExecMode::Parallel, ExecMode::Sequential]
        .into_iter()
        .enumerate()
    {
        let table = evaluate(&eval_cfg, Some(&det), mode).unwrap();
        let csv = dir.path().join(format!("metrics-{run}.csv"));
        let json = dir.path().join(format!("metrics-{run}.json"));
        std::fs::write(&csv, table.to_csv()).unwrap();
        std::fs::write(&json, table.to_json()).unwrap();
        metrics.push((std::fs::read(&csv).unwrap(), std::fs::read(&json).unwrap()));
    }
    let same_model = checkpoints[0] == checkpoints[1];
    let same_metrics = metrics[0] == metrics[1];
    report(
        "determinism",
        same_model && same_metrics,
        &format!("checkpoints identical: {same_model}, metric files identical: {same_metrics}"),
    );
}

#[test]
fn pruning_isolates_flagged_agents() {
    let _guard = serial();
    let mut violations = 0;
    for case in 0..10_000u64 {
        let mut r = rng::stream(case, "acceptance-prune", &[]);
        let n = r.random_range(1..=32usize);
        let p = r.random_range(0.0..0.5);
        let edges: BTreeSet<(usize, usize)> = (0..n)
            .flat_map(|s| (0..n).map(move |d| (s, d)))
            .filter(|&(s, d)| s != d)
            .filter(|_| r.random_bool(p))
            .collect();
        let flagged: BTreeSet<usize> = (0..n).filter(|_| r.random_bool(0.3)).collect();
        let topo = prune(&edges, &flagged, PruneMode::Bidirectional, 1);
        let isolated = topo
            .kept_edges
            .iter()
            .all(|(s, d)| !flagged.contains(s) && !flagged.contains(d));
        let preserved = edges
            .iter()
            .filter(|(s, d)| !flagged.contains(s) && !flagged.contains(d))
            .all(|e| topo.kept_edges.contains(e));
        let again = prune(&topo.kept_edges, &flagged, PruneMode::Bidirectional, 2);
        let idempotent = again.kept_edges == topo.kept_edges && again.removed_edges.is_empty();
        let partition = topo.kept_edges.len() + topo.removed_edges.len() == edges.len();
        if !(isolated && preserved && idempotent && partition) {
            violations += 1;
        }
    }
    report(
        "pruning isolation",
        violations == 0,
        &format!("10000 graph/flag-set pairs, {violations} violations"),
    );
}

fn time_detection(det: &Detector, n_agents: usize) -> f64 {
    let graphs = generate_normal_corpus(
        100,
        n_agents,
        &TopologyKind::GENERATED,
        &provider(),
        77,
        ExecMode::Parallel,
    )
    .unwrap();
    (0..3)
        .map(|_| {
            let start = Instant::now();
            det.detect_batch(&graphs, 3, ExecMode::Sequential).unwrap();
            start.elapsed().as_secs_f64()
        })
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn larger_systems_keep_defense_ordering() {
    let _guard = serial();
    let mut ordered = true;
    let mut lines = Vec::new();
    for (n_agents, n_attackers) in [(20usize, 3usize), (50, 5)] {
        let det = &train_models(n_agents, &TRAIN_SEEDS[..1], AblationFlags::default())[0];
        let cfg = sweep_config(
            n_agents,
            n_attackers,
            vec![DefenseKind::None, DefenseKind::BlindGuard],
            false,
        );
        let table = evaluate(&cfg, Some(det), ExecMode::Parallel).unwrap();
        let tables = std::slice::from_ref(&table);
        let mut overall = Vec::new();
        for round in 1..=3 {
            let over_topologies = |defense| {
                TopologyKind::GENERATED
                    .iter()
                    .map(|&t| mean_asr(tables, t, defense, round))
                    .sum::<f64>()
                    / TopologyKind::GENERATED.len() as f64
            };
            let (none, guard) = (
                over_topologies(DefenseKind::None),
                over_topologies(DefenseKind::BlindGuard),
            );
            ordered &= guard < none;
            overall.push(format!("r{round} {guard:.3}<{none:.3}"));
        }
        lines.push(format!("N={n_agents} all: {}", overall.join(" ")));
        for topology in TopologyKind::GENERATED {
            let cells: Vec<String> = (1..=3)
                .map(|round| {
                    let none = mean_asr(tables, topology, DefenseKind::None, round);
                    let guard = mean_asr(tables, topology, DefenseKind::BlindGuard, round);
                    format!("r{round} {guard:.2}/{none:.2}")
                })
                .collect();
            lines.push(format!("N={n_agents} {topology}: {}", cells.join(" ")));
        }
    }
    let det = &full_models().detectors[0];
    let t10 = time_detection(det, 10);
    let t50 = time_detection(det, 50);
    let ratio = t50 / t10;
    let exponent = ratio.ln() / 5f64.ln();
    report(
        "scalability",
        ordered && ratio < 25.0,
        &format!(
            "{}; detection time N=10 {t10:.3}s, N=50 {t50:.3}s, ratio {ratio:.2} (exponent {exponent:.2})",
            lines.join("; ")
        ),
    );
}
