//! Attack-success sweeps over topologies, attack kinds and defenses.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{
    apply_attack, random_attackers, run_rounds, AttackKind, AttackSpec, Defense, QueryTask,
    Scenario, SimConfig,
};
use crate::detection::{macro_auc, micro_auc, Detector};
use crate::error::{Error, Result};
use crate::graph::{generate_topology, TopologyKind, TruthLabel};
use crate::parallel::{self, ExecMode};
use crate::rng;

pub const CSV_HEADER: &str =
    "topology,attack_kind,defense,round,asr,accuracy,auc_micro,auc_macro,seed_count";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DefenseKind {
    None,
    BlindGuard,
    Oracle,
}

impl DefenseKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DefenseKind::None => "none",
            DefenseKind::BlindGuard => "blindguard",
            DefenseKind::Oracle => "oracle",
        }
    }
}

impl fmt::Display for DefenseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DefenseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(DefenseKind::None),
            "blindguard" => Ok(DefenseKind::BlindGuard),
            "oracle" => Ok(DefenseKind::Oracle),
            other => Err(Error::Config(format!("unknown defense `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub topologies: Vec<TopologyKind>,
    pub n_agents: usize,
    pub n_attackers: usize,
    pub strength: f64,
    pub attack_kinds: Vec<AttackKind>,
    /// Also run every condition with no attackers (rows with attack_kind "none").
    pub no_attack_control: bool,
    pub defenses: Vec<DefenseKind>,
    pub n_tasks: usize,
    pub seeds: Vec<u64>,
    pub sim: SimConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            topologies: TopologyKind::GENERATED.to_vec(),
            n_agents: 10,
            n_attackers: 3,
            strength: 0.9,
            attack_kinds: AttackKind::ALL.to_vec(),
            no_attack_control: true,
            defenses: vec![
                DefenseKind::None,
                DefenseKind::BlindGuard,
                DefenseKind::Oracle,
            ],
            n_tasks: 100,
            seeds: vec![0],
            sim: SimConfig {
                record_features: false,
                ..SimConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub topology: TopologyKind,
    pub attack_kind: String,
    pub defense: DefenseKind,
    pub round: u32,
    pub asr: f64,
    pub accuracy: f64,
    pub auc_micro: Option<f64>,
    pub auc_macro: Option<f64>,
    pub seed_count: usize,
    pub asr_std: f64,
    pub accuracy_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
}

impl MetricsTable {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.topology,
                r.attack_kind,
                r.defense,
                r.round,
                r.asr,
                r.accuracy,
                opt(r.auc_micro),
                opt(r.auc_macro),
                r.seed_count
            )
            .expect("writing to a string");
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialization is infallible")
    }

    pub fn find(
        &self,
        topology: TopologyKind,
        attack_kind: &str,
        defense: DefenseKind,
        round: u32,
    ) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| {
            r.topology == topology
                && r.attack_kind == attack_kind
                && r.defense == defense
                && r.round == round
        })
    }
}

#[derive(Debug, Clone, Copy)]
struct WorkItem {
    topology: TopologyKind,
    attack: Option<AttackKind>,
    defense: DefenseKind,
    seed: u64,
    task: u64,
}

struct RunOutcome {
    attack_success: Vec<bool>,
    accuracy_success: Vec<bool>,
    /// Per round: detection scores and truth labels, when a detector ran.
    scored: Vec<Option<(Vec<f64>, Vec<u8>)>>,
}

fn run_item(item: &WorkItem, cfg: &EvalConfig, detector: Option<&Detector>) -> Result<RunOutcome> {
    let key = [item.topology as u64, item.task];
    let topo_seed = rng::stream_key(item.seed, "eval-topology", &key);
    let mut g = generate_topology(item.topology, cfg.n_agents, topo_seed)?;
    g.set_graph_id(format!(
        "eval-{}-{}-{}",
        item.topology, item.seed, item.task
    ));
    let task = QueryTask::synthetic(rng::stream_key(item.seed, "eval-task", &key), item.task);
    let scenario = match item.attack {
        None => Scenario::benign(g),
        Some(kind) => {
            let attackers = random_attackers(
                cfg.n_agents,
                cfg.n_attackers,
                &mut rng::stream(item.seed, "eval-attackers", &key),
            );
            let spec = AttackSpec {
                kind,
                attacker_indices: attackers,
                strength: cfg.strength,
                seed: item.seed,
            };
            apply_attack(&g, &task, &spec)?
        }
    };
    let defense =
        match item.defense {
            DefenseKind::None => Defense::None,
            DefenseKind::Oracle => Defense::Oracle,
            DefenseKind::BlindGuard => Defense::BlindGuard(detector.ok_or_else(|| {
                Error::Config("the blindguard defense needs a trained model".into())
            })?),
        };
    let run_seed = rng::stream_key(item.seed, "eval-run", &key);
    let trace = run_rounds(&scenario, &task, &cfg.sim, defense, run_seed)?;
    let labels: Vec<u8> = scenario
        .graph
        .agents()
        .iter()
        .map(|a| u8::from(a.truth_label == Some(TruthLabel::Malicious)))
        .collect();
    Ok(RunOutcome {
        attack_success: trace
            .rounds
            .iter()
            .map(|r| r.vote == task.adversarial_target)
            .collect(),
        accuracy_success: trace
            .rounds
            .iter()
            .map(|r| r.vote == task.correct_answer)
            .collect(),
        scored: trace
            .rounds
            .iter()
            .map(|r| {
                r.detection
                    .as_ref()
                    .map(|d| (d.scores.clone(), labels.clone()))
            })
            .collect(),
    })
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn mean_opt(values: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    (!present.is_empty() && present.len() == values.len())
        .then(|| present.iter().sum::<f64>() / present.len() as f64)
}

/// Run every (topology, attack, defense, seed, task) combination and
/// aggregate per round. Graphs, tasks, attacker sets and agent randomness
/// depend only on (seed, topology, task), so conditions are paired.
pub fn evaluate(
    cfg: &EvalConfig,
    detector: Option<&Detector>,
    mode: ExecMode,
) -> Result<MetricsTable> {
    if cfg.n_tasks == 0 {
        return Err(Error::Config("evaluation needs at least one task".into()));
    }
    if cfg.seeds.is_empty() || cfg.topologies.is_empty() || cfg.defenses.is_empty() {
        return Err(Error::Config(
            "evaluation needs seeds, topologies and defenses".into(),
        ));
    }
    let mut attacks: Vec<Option<AttackKind>> = Vec::new();
    if cfg.no_attack_control {
        attacks.push(None);
    }
    attacks.extend(cfg.attack_kinds.iter().copied().map(Some));

    let mut items = Vec::new();
    for &topology in &cfg.topologies {
        for &attack in &attacks {
            for &defense in &cfg.defenses {
                for &seed in &cfg.seeds {
                    for task in 0..cfg.n_tasks as u64 {
                        items.push(WorkItem {
                            topology,
                            attack,
                            defense,
                            seed,
                            task,
                        });
                    }
                }
            }
        }
    }
    let outcomes = parallel::with_thread_cap(|| {
        parallel::try_map(&items, mode, |item| {
            run_item(item, cfg, detector).map_err(|e| {
                e.context(format!(
                    "{} / {} / {} seed {} task {}",
                    item.topology,
                    item.attack.map_or("none", AttackKind::as_str),
                    item.defense,
                    item.seed,
                    item.task
                ))
            })
        })
    })?;

    let rounds = cfg.sim.rounds as usize;
    let per_seed = cfg.n_tasks;
    let mut rows = Vec::new();
    let groups = items
        .chunks(per_seed * cfg.seeds.len())
        .zip(outcomes.chunks(per_seed * cfg.seeds.len()));
    for (group_items, group_outcomes) in groups {
        let head = group_items[0];
        for r in 0..rounds {
            let mut asr = Vec::new();
            let mut acc = Vec::new();
            let mut micro = Vec::new();
            let mut macro_ = Vec::new();
            for seed_outcomes in group_outcomes.chunks(per_seed) {
                let frac = |f: &dyn Fn(&RunOutcome) -> bool| {
                    seed_outcomes.iter().filter(|o| f(o)).count() as f64 / per_seed as f64
                };
                asr.push(frac(&|o| o.attack_success[r]));
                acc.push(frac(&|o| o.accuracy_success[r]));
                let scored: Vec<(Vec<f64>, Vec<u8>)> = seed_outcomes
                    .iter()
                    .filter_map(|o| o.scored[r].clone())
                    .collect();
                micro.push(micro_auc(&scored).ok());
                macro_.push(macro_auc(&scored));
            }
            let (asr_mean, asr_std) = mean_std(&asr);
            let (acc_mean, acc_std) = mean_std(&acc);
            rows.push(MetricsRow {
                topology: head.topology,
                attack_kind: head.attack.map_or("none", AttackKind::as_str).to_string(),
                defense: head.defense,
                round: r as u32 + 1,
                asr: asr_mean,
                accuracy: acc_mean,
                auc_micro: mean_opt(&micro),
                auc_macro: mean_opt(&macro_),
                seed_count: cfg.seeds.len(),
                asr_std,
                accuracy_std: acc_std,
            });
        }
    }
    Ok(MetricsTable { rows })
}
