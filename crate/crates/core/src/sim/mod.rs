//! Seeded multi-agent simulation harness.
//!
//! Scripted conformity agents stand in for language-model agents: each one
//! blends a prior over the candidate answers with the answers it reads from
//! in-neighbors, samples an answer and writes a templated response. Acyclic
//! graphs run in execution order and read upstream answers of the same
//! round; cyclic ones read the previous round. Agents defer more to their
//! neighbors as rounds go on. Attackers push an adversarial target with
//! kind-specific phrasing.
//! Defenses score the round's responses, prune around flagged agents and
//! drop them from the vote.

mod corpus;
mod evaluate;
mod templates;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::{index, IndexedRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detection::{DetectionReport, Detector, DEFAULT_BUDGET};
use crate::embedding::{embed_graph, EmbeddingMatrix, EmbeddingProviderSpec, ProviderKind};
use crate::error::{Error, Result};
use crate::graph::{execution_order, AgentGraph, TruthLabel};
use crate::remediation::{prune, PruneMode, PrunedTopology};
use crate::rng;

pub use corpus::{attacked_sample, generate_normal_corpus, random_attackers};
pub use evaluate::{evaluate, DefenseKind, EvalConfig, MetricsRow, MetricsTable, CSV_HEADER};

pub const TRACE_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_ROUNDS: u32 = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryTask {
    pub query_id: String,
    pub query_text: String,
    pub correct_answer: String,
    pub adversarial_target: String,
    pub candidate_answers: Vec<String>,
}

impl QueryTask {
    pub fn validate(&self) -> Result<()> {
        let distinct: BTreeSet<_> = self.candidate_answers.iter().collect();
        if distinct.len() < 2 || distinct.len() != self.candidate_answers.len() {
            return Err(Error::Config(format!(
                "task {} needs at least two distinct candidates",
                self.query_id
            )));
        }
        if !distinct.contains(&self.correct_answer) || !distinct.contains(&self.adversarial_target)
        {
            return Err(Error::Config(format!(
                "task {}: correct answer and target must be candidates",
                self.query_id
            )));
        }
        if self.correct_answer == self.adversarial_target {
            return Err(Error::Config(format!(
                "task {}: adversarial target equals the correct answer",
                self.query_id
            )));
        }
        Ok(())
    }

    /// A synthetic four-choice task on three topic words.
    pub fn synthetic(seed: u64, index: u64) -> Self {
        let mut r = rng::stream(seed, "task", &[index]);
        let topic: Vec<&str> = templates::TOPIC_WORDS
            .choose_multiple(&mut r, 3)
            .copied()
            .collect();
        let candidates: Vec<String> = ["A", "B", "C", "D"].iter().map(|s| s.to_string()).collect();
        let picks = index::sample(&mut r, candidates.len(), 2);
        QueryTask {
            query_id: format!("q{seed}-{index}"),
            query_text: format!(
                "which option best relates {} and {} and {}?",
                topic[0], topic[1], topic[2]
            ),
            correct_answer: candidates[picks.index(0)].clone(),
            adversarial_target: candidates[picks.index(1)].clone(),
            candidate_answers: candidates,
        }
    }

    fn candidate_index(&self, label: &str) -> usize {
        self.candidate_answers
            .iter()
            .position(|c| c == label)
            .expect("validated label")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    PromptInjection,
    MemoryPoison,
    ToolAttack,
}

impl AttackKind {
    pub const ALL: [AttackKind; 3] = [
        AttackKind::PromptInjection,
        AttackKind::MemoryPoison,
        AttackKind::ToolAttack,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AttackKind::PromptInjection => "prompt_injection",
            AttackKind::MemoryPoison => "memory_poison",
            AttackKind::ToolAttack => "tool_attack",
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttackKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown attack kind `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub attacker_indices: BTreeSet<usize>,
    pub strength: f64,
    pub seed: u64,
}

/// Behavior of benign agents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    /// Weight on neighbors' answers in round 1; see [`PolicyConfig::conformity_at`].
    pub conformity: f64,
    /// Prior mass on the correct answer; the rest is spread evenly.
    pub prior_correct: f64,
}

impl PolicyConfig {
    /// `1 - (1 - conformity)^round`: the share of the prior left after each
    /// round shrinks geometrically.
    pub fn conformity_at(&self, round: u32) -> f64 {
        1.0 - (1.0 - self.conformity).powi(round as i32)
    }
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            conformity: 0.6,
            prior_correct: 0.7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub rounds: u32,
    pub k: usize,
    pub policy: PolicyConfig,
    pub prune_mode: PruneMode,
    pub exclude_flagged_from_vote: bool,
    pub detect_every_round: bool,
    pub provider: EmbeddingProviderSpec,
    /// Keep per-round feature rows in the trace. When false, responses are
    /// only embedded if a learned detector needs them.
    pub record_features: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            rounds: DEFAULT_ROUNDS,
            k: DEFAULT_BUDGET,
            policy: PolicyConfig::default(),
            prune_mode: PruneMode::Bidirectional,
            exclude_flagged_from_vote: true,
            detect_every_round: true,
            provider: EmbeddingProviderSpec::default(),
            record_features: true,
        }
    }
}

/// A graph with its agents' roles in the simulation: truth labels mark the
/// attackers, and `attack` carries their behavior.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub graph: AgentGraph,
    pub attack: Option<AttackSpec>,
}

impl Scenario {
    pub fn benign(mut graph: AgentGraph) -> Self {
        for i in 0..graph.n_agents() {
            graph.agent_mut(i).truth_label = Some(TruthLabel::Normal);
        }
        Scenario {
            graph,
            attack: None,
        }
    }

    pub fn attackers(&self) -> BTreeSet<usize> {
        self.attack
            .as_ref()
            .map(|a| a.attacker_indices.clone())
            .unwrap_or_default()
    }
}

/// Compromise `spec.attacker_indices` of `g`.
pub fn apply_attack(g: &AgentGraph, task: &QueryTask, spec: &AttackSpec) -> Result<Scenario> {
    task.validate()?;
    let n = g.n_agents();
    if spec.attacker_indices.is_empty() || spec.attacker_indices.len() >= n {
        return Err(Error::Config(format!(
            "attack needs between 1 and {} attackers, got {}",
            n.saturating_sub(1),
            spec.attacker_indices.len()
        )));
    }
    if let Some(bad) = spec.attacker_indices.iter().find(|&&i| i >= n) {
        return Err(Error::Config(format!("attacker index {bad} out of range")));
    }
    if !(spec.strength > 0.0 && spec.strength <= 1.0) {
        return Err(Error::Config(format!(
            "attack strength must be in (0, 1], got {}",
            spec.strength
        )));
    }
    let mut scenario = Scenario::benign(g.clone());
    for &i in &spec.attacker_indices {
        scenario.graph.agent_mut(i).truth_label = Some(TruthLabel::Malicious);
    }
    scenario.attack = Some(spec.clone());
    Ok(scenario)
}

/// Who intervenes between rounds.
#[derive(Debug, Clone, Copy)]
pub enum Defense<'a> {
    None,
    BlindGuard(&'a Detector),
    /// Flags exactly the true attackers.
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    pub answers: Vec<String>,
    pub response_texts: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub features: Vec<Vec<f64>>,
    pub detection: Option<DetectionReport>,
    pub pruned: Option<PrunedTopology>,
    pub voters: Vec<usize>,
    pub vote: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationTrace {
    pub schema_version: u32,
    pub query_id: String,
    pub graph_id: String,
    pub seed: u64,
    pub rounds: Vec<RoundRecord>,
    pub final_answer: String,
    pub attack_success: bool,
    pub accuracy_success: bool,
}

impl SimulationTrace {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serialization is infallible")
    }
}

fn sample_label<R: Rng + ?Sized>(dist: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in dist.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    dist.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

fn prior(task: &QueryTask, policy: &PolicyConfig) -> Vec<f64> {
    let m = task.candidate_answers.len();
    let rest = (1.0 - policy.prior_correct) / (m - 1) as f64;
    let correct = task.candidate_index(&task.correct_answer);
    (0..m)
        .map(|i| {
            if i == correct {
                policy.prior_correct
            } else {
                rest
            }
        })
        .collect()
}

/// Plurality over `voters`; ties go to the candidate listed first.
fn majority(answers: &[usize], voters: &[usize], m: usize) -> usize {
    let mut counts = vec![0usize; m];
    for &v in voters {
        counts[answers[v]] += 1;
    }
    let best = counts.iter().copied().max().unwrap_or(0);
    counts.iter().position(|&c| c == best).unwrap_or(0)
}

pub fn run_rounds(
    scenario: &Scenario,
    task: &QueryTask,
    cfg: &SimConfig,
    defense: Defense<'_>,
    seed: u64,
) -> Result<SimulationTrace> {
    task.validate()?;
    if cfg.rounds == 0 {
        return Err(Error::Config("simulation needs at least one round".into()));
    }
    if cfg.provider.kind != ProviderKind::Synthetic {
        return Err(Error::Config(
            "simulation embeds live responses and needs the synthetic provider".into(),
        ));
    }
    cfg.provider.validate()?;
    let policy = cfg.policy;
    if !(0.0..=1.0).contains(&policy.conformity) || !(0.0..=1.0).contains(&policy.prior_correct) {
        return Err(Error::Config("policy weights must lie in [0, 1]".into()));
    }
    if let Defense::BlindGuard(det) = defense {
        if det.model().input_dim() != cfg.provider.dim {
            return Err(Error::Dimension(format!(
                "model expects d={}, provider produces {}",
                det.model().input_dim(),
                cfg.provider.dim
            )));
        }
        if cfg.k == 0 {
            return Err(Error::Config(
                "detection budget k must be at least 1".into(),
            ));
        }
    }

    let g = &scenario.graph;
    let n = g.n_agents();
    let m = task.candidate_answers.len();
    let attack = scenario.attack.as_ref();
    let attackers = scenario.attackers();
    let plan = execution_order(g);
    let task_key = rng::id_hash(&task.query_id);
    let target = task.candidate_index(&task.adversarial_target);

    let base_prior = prior(task, &policy);
    let mut edges = g.edges().clone();
    let mut isolated: BTreeSet<usize> = BTreeSet::new();
    let mut previous: Option<Vec<usize>> = None;
    let mut records = Vec::with_capacity(cfg.rounds as usize);

    for round in 1..=cfg.rounds {
        let mut answers: Vec<Option<usize>> = vec![None; n];
        let mut texts = vec![String::new(); n];
        let in_lists: Vec<Vec<usize>> = (0..n)
            .map(|a| edges.iter().filter(|e| e.1 == a).map(|e| e.0).collect())
            .collect();
        for &a in &plan.order {
            let mut r = rng::stream(seed, "sim-agent", &[task_key, u64::from(round), a as u64]);
            let label = if attackers.contains(&a) {
                let strength = attack.map_or(0.0, |s| s.strength);
                if r.random_bool(strength) {
                    target
                } else {
                    sample_label(&base_prior, &mut r)
                }
            } else {
                let heard: Vec<usize> = in_lists[a]
                    .iter()
                    .filter_map(|&s| {
                        if plan.synchronous {
                            previous.as_ref().map(|p| p[s])
                        } else {
                            answers[s]
                        }
                    })
                    .collect();
                let conformity = policy.conformity_at(round);
                let mut belief: Vec<f64> =
                    base_prior.iter().map(|b| b * (1.0 - conformity)).collect();
                if heard.is_empty() {
                    belief.clone_from(&base_prior);
                } else {
                    let w = conformity / heard.len() as f64;
                    for &h in &heard {
                        belief[h] += w;
                    }
                }
                sample_label(&belief, &mut r)
            };
            answers[a] = Some(label);
            let mut tr = rng::stream(seed, "sim-text", &[task_key, u64::from(round), a as u64]);
            let answer_text = &task.candidate_answers[label];
            texts[a] = match (attack, attackers.contains(&a)) {
                (Some(spec), true) => {
                    templates::attack_response(spec.kind, &task.query_text, answer_text, &mut tr)
                }
                _ => templates::benign_response(&task.query_text, answer_text, &mut tr),
            };
        }
        let answers: Vec<usize> = answers
            .into_iter()
            .map(|a| a.expect("every agent runs"))
            .collect();

        let needs_features = cfg.record_features || matches!(defense, Defense::BlindGuard(_));
        let mut round_graph = g.with_edges(edges.clone())?;
        for (i, t) in texts.iter().enumerate() {
            round_graph.agent_mut(i).response_text = Some(t.clone());
        }
        let features: Option<EmbeddingMatrix> = needs_features
            .then(|| embed_graph(&round_graph, &cfg.provider))
            .transpose()
            .map_err(|e| e.context(format!("round {round}")))?;

        let run_detection = cfg.detect_every_round || round == 1;
        let (detection, flagged) = match defense {
            Defense::BlindGuard(det) if run_detection => {
                let report = det
                    .detect(&round_graph, features.as_ref().expect("embedded"), cfg.k)
                    .map_err(|e| e.context(format!("round {round}")))?;
                let flagged: BTreeSet<usize> = report.flagged.iter().copied().collect();
                (Some(report), Some(flagged))
            }
            Defense::Oracle if run_detection => (None, Some(attackers.clone())),
            _ => (None, None),
        };
        let pruned = flagged.map(|f| {
            let topo = prune(&edges, &f, cfg.prune_mode, round);
            edges = topo.kept_edges.clone();
            isolated.extend(f.iter().copied());
            topo
        });

        let mut voters: Vec<usize> = (0..n)
            .filter(|v| !(cfg.exclude_flagged_from_vote && isolated.contains(v)))
            .collect();
        if voters.is_empty() {
            voters = (0..n).collect();
        }
        let vote = majority(&answers, &voters, m);

        records.push(RoundRecord {
            round,
            answers: answers
                .iter()
                .map(|&a| task.candidate_answers[a].clone())
                .collect(),
            response_texts: texts,
            features: match (&features, cfg.record_features) {
                (Some(f), true) => f.values().rows().into_iter().map(|r| r.to_vec()).collect(),
                _ => Vec::new(),
            },
            detection,
            pruned,
            voters,
            vote: task.candidate_answers[vote].clone(),
        });
        previous = Some(answers);
    }

    let final_answer = records.last().expect("rounds >= 1").vote.clone();
    Ok(SimulationTrace {
        schema_version: TRACE_SCHEMA_VERSION,
        query_id: task.query_id.clone(),
        graph_id: g.graph_id().to_string(),
        seed,
        attack_success: final_answer == task.adversarial_target,
        accuracy_success: final_answer == task.correct_answer,
        final_answer,
        rounds: records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate_topology, TopologyKind};

    fn spec(kind: AttackKind, attackers: &[usize], strength: f64) -> AttackSpec {
        AttackSpec {
            kind,
            attacker_indices: attackers.iter().copied().collect(),
            strength,
            seed: 0,
        }
    }

    fn small_cfg() -> SimConfig {
        SimConfig {
            provider: EmbeddingProviderSpec::synthetic(32, 0),
            ..SimConfig::default()
        }
    }

    #[test]
    fn task_validation() {
        let t = QueryTask::synthetic(1, 2);
        assert!(t.validate().is_ok());
        assert_ne!(t.correct_answer, t.adversarial_target);
        let mut bad = t.clone();
        bad.adversarial_target = bad.correct_answer.clone();
        assert!(bad.validate().is_err());
        let mut bad = t;
        bad.candidate_answers = vec!["A".into()];
        assert!(bad.validate().is_err());
    }

    #[test]
    fn attack_spec_validation() {
        let g = generate_topology(TopologyKind::Chain, 4, 0).unwrap();
        let t = QueryTask::synthetic(0, 0);
        assert!(apply_attack(&g, &t, &spec(AttackKind::ToolAttack, &[0, 1, 2, 3], 1.0)).is_err());
        assert!(apply_attack(&g, &t, &spec(AttackKind::ToolAttack, &[], 1.0)).is_err());
        assert!(apply_attack(&g, &t, &spec(AttackKind::ToolAttack, &[7], 1.0)).is_err());
        assert!(apply_attack(&g, &t, &spec(AttackKind::ToolAttack, &[1], 0.0)).is_err());
        let s = apply_attack(&g, &t, &spec(AttackKind::ToolAttack, &[1], 1.0)).unwrap();
        assert_eq!(s.graph.agents()[1].truth_label, Some(TruthLabel::Malicious));
        assert_eq!(s.graph.agents()[0].truth_label, Some(TruthLabel::Normal));
    }

    #[test]
    fn full_strength_attackers_always_push_target() {
        let g = generate_topology(TopologyKind::Star, 6, 0).unwrap();
        let t = QueryTask::synthetic(0, 3);
        let s = apply_attack(&g, &t, &spec(AttackKind::PromptInjection, &[1, 4], 1.0)).unwrap();
        let trace = run_rounds(&s, &t, &small_cfg(), Defense::None, 5).unwrap();
        for r in &trace.rounds {
            assert_eq!(r.answers[1], t.adversarial_target);
            assert_eq!(r.answers[4], t.adversarial_target);
            assert!(r.response_texts.iter().all(|x| !x.is_empty()));
        }
    }

    #[test]
    fn benign_agents_with_certain_prior_stay_correct() {
        let g = generate_topology(TopologyKind::Random, 8, 3).unwrap();
        let t = QueryTask::synthetic(0, 1);
        let cfg = SimConfig {
            policy: PolicyConfig {
                conformity: 0.6,
                prior_correct: 1.0,
            },
            ..small_cfg()
        };
        let trace = run_rounds(&Scenario::benign(g), &t, &cfg, Defense::None, 1).unwrap();
        assert_eq!(trace.final_answer, t.correct_answer);
        assert!(!trace.attack_success && trace.accuracy_success);
        assert_eq!(trace.rounds.len(), 3);
    }

    #[test]
    fn oracle_isolates_attackers_from_round_two() {
        let g = generate_topology(TopologyKind::Star, 10, 0).unwrap();
        let t = QueryTask::synthetic(0, 4);
        let s = apply_attack(&g, &t, &spec(AttackKind::MemoryPoison, &[0, 3, 7], 0.9)).unwrap();
        let trace = run_rounds(&s, &t, &small_cfg(), Defense::Oracle, 2).unwrap();
        for r in &trace.rounds {
            let topo = r.pruned.as_ref().unwrap();
            for a in [0, 3, 7] {
                assert!(topo.kept_edges.iter().all(|&(x, y)| x != a && y != a));
                assert!(!r.voters.contains(&a));
            }
        }
    }

    #[test]
    fn replay_is_bitwise() {
        let g = generate_topology(TopologyKind::Tree, 7, 0).unwrap();
        let t = QueryTask::synthetic(2, 2);
        let s = apply_attack(&g, &t, &spec(AttackKind::ToolAttack, &[2], 0.8)).unwrap();
        let a = run_rounds(&s, &t, &small_cfg(), Defense::None, 11).unwrap();
        let b = run_rounds(&s, &t, &small_cfg(), Defense::None, a.seed).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        let parsed: SimulationTrace = serde_json::from_str(&a.to_json()).unwrap();
        assert_eq!(parsed, a);
    }

    #[test]
    fn vote_ties_go_to_first_candidate() {
        assert_eq!(majority(&[1, 0, 1, 0], &[0, 1, 2, 3], 3), 0);
        assert_eq!(majority(&[2, 2, 1], &[0, 1, 2], 3), 2);
        assert_eq!(majority(&[2, 2, 1], &[2], 3), 1);
    }

    #[test]
    fn rejects_zero_rounds_and_file_provider() {
        let g = generate_topology(TopologyKind::Chain, 3, 0).unwrap();
        let t = QueryTask::synthetic(0, 0);
        let s = Scenario::benign(g);
        let cfg = SimConfig {
            rounds: 0,
            ..small_cfg()
        };
        assert!(run_rounds(&s, &t, &cfg, Defense::None, 0).is_err());
        let cfg = SimConfig {
            provider: EmbeddingProviderSpec::file("x.bgem", 32),
            ..small_cfg()
        };
        assert!(run_rounds(&s, &t, &cfg, Defense::None, 0).is_err());
    }
}
