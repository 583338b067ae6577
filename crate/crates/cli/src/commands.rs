use std::path::{Path, PathBuf};

use blindguard_core::detection::{macro_auc, micro_auc, Detector};
use blindguard_core::encoder::EncoderModel;
use blindguard_core::graph::{generate_topology, TruthLabel};
use blindguard_core::parallel::ExecMode;
use blindguard_core::rng;
use blindguard_core::sim::{
    apply_attack, attacked_sample, evaluate, generate_normal_corpus, random_attackers, run_rounds,
    AttackKind, AttackSpec, Defense, DefenseKind, QueryTask, Scenario,
};
use blindguard_core::training::train;
use blindguard_core::{Error, Result};
use serde::Serialize;

use crate::config::{
    self, AttackDistribution, CorpusRunConfig, DetectRunConfig, EvaluateRunConfig,
    SimulateRunConfig, TrainRunConfig,
};
use crate::corpus_dir::{read_corpus, write_corpus};
use crate::{AttackArgs, Command};

const EXEC_MODE: ExecMode = ExecMode::Parallel;

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenCorpus {
            common,
            count,
            agents,
            topology,
            dim,
            attack,
        } => {
            let mut cfg: CorpusRunConfig = config::load(common.config.as_deref())?;
            set(&mut cfg.seed, common.seed);
            set(&mut cfg.count, count);
            set(&mut cfg.n_agents, agents);
            set(&mut cfg.provider.dim, dim);
            if !topology.is_empty() {
                cfg.topologies = topology;
            }
            cfg.attack = override_attack(cfg.attack, &attack)?;
            gen_corpus(&cfg, &common.out)
        }
        Command::Train {
            common,
            corpus,
            epochs,
            alpha,
            tau,
            hidden,
            no_neigh,
            no_global,
        } => {
            let mut cfg: TrainRunConfig = config::load(common.config.as_deref())?;
            if corpus.is_some() {
                cfg.corpus = corpus;
            }
            let t = &mut cfg.train;
            set(&mut t.seed, common.seed);
            set(&mut t.epochs, epochs);
            set(&mut t.corruption.alpha, alpha);
            set(&mut t.tau, tau);
            set(&mut t.hidden_dim, hidden);
            if no_neigh {
                t.ablation.use_neigh = false;
            }
            if no_global {
                t.ablation.use_global = false;
            }
            train_cmd(&cfg, &common.out)
        }
        Command::Detect {
            common,
            corpus,
            model,
            k,
        } => {
            let mut cfg: DetectRunConfig = config::load(common.config.as_deref())?;
            if corpus.is_some() {
                cfg.corpus = corpus;
            }
            if model.is_some() {
                cfg.model = model;
            }
            set(&mut cfg.k, k);
            detect_cmd(&cfg, &common.out)
        }
        Command::Simulate {
            common,
            topology,
            agents,
            rounds,
            k,
            defense,
            prune_mode,
            model,
            task,
            attack,
        } => {
            let mut cfg: SimulateRunConfig = config::load(common.config.as_deref())?;
            set(&mut cfg.seed, common.seed);
            set(&mut cfg.topology, topology);
            set(&mut cfg.n_agents, agents);
            set(&mut cfg.sim.rounds, rounds);
            set(&mut cfg.sim.k, k);
            set(&mut cfg.defense, defense);
            set(&mut cfg.sim.prune_mode, prune_mode);
            set(&mut cfg.task_index, task);
            if model.is_some() {
                cfg.model = model;
            }
            cfg.attack = override_attack(cfg.attack, &attack)?;
            simulate_cmd(&cfg, &common.out)
        }
        Command::Evaluate {
            common,
            topology,
            agents,
            rounds,
            k,
            defense,
            prune_mode,
            model,
            tasks,
            attack,
            attackers,
            strength,
            no_control,
        } => {
            let mut cfg: EvaluateRunConfig = config::load(common.config.as_deref())?;
            let e = &mut cfg.eval;
            if let Some(seed) = common.seed {
                e.seeds = vec![seed];
            }
            if !topology.is_empty() {
                e.topologies = topology;
            }
            if !defense.is_empty() {
                e.defenses = defense;
            }
            if !attack.is_empty() {
                e.attack_kinds = attack
                    .iter()
                    .filter(|a| a.as_str() != "none")
                    .map(|a| a.parse())
                    .collect::<Result<_>>()?;
            }
            set(&mut e.n_agents, agents);
            set(&mut e.sim.rounds, rounds);
            set(&mut e.sim.k, k);
            set(&mut e.sim.prune_mode, prune_mode);
            set(&mut e.n_tasks, tasks);
            set(&mut e.n_attackers, attackers);
            set(&mut e.strength, strength);
            if no_control {
                e.no_attack_control = false;
            }
            if model.is_some() {
                cfg.model = model;
            }
            evaluate_cmd(&cfg, &common.out)
        }
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn override_attack(
    base: Option<AttackDistribution>,
    args: &AttackArgs,
) -> Result<Option<AttackDistribution>> {
    let mut attack = match args.attack.as_deref() {
        Some("none") => return Ok(None),
        Some(kind) => {
            let kind: AttackKind = kind.parse()?;
            Some(base.map_or(
                AttackDistribution {
                    kind,
                    n_attackers: 3,
                    strength: 0.9,
                },
                |a| AttackDistribution { kind, ..a },
            ))
        }
        None => base,
    };
    if let Some(a) = attack.as_mut() {
        set(&mut a.n_attackers, args.attackers);
        set(&mut a.strength, args.strength);
    } else if args.attackers.is_some() || args.strength.is_some() {
        return Err(Error::Config(
            "--attackers/--strength need an attack kind".into(),
        ));
    }
    Ok(attack)
}

fn create_out(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable output");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Print the effective configuration and store it next to the outputs.
fn echo_config<T: Serialize>(out: &Path, command: &str, cfg: &T) -> Result<()> {
    #[derive(Serialize)]
    struct Echo<'a, T> {
        command: &'a str,
        config: &'a T,
    }
    let echo = Echo {
        command,
        config: cfg,
    };
    println!(
        "config: {}",
        serde_json::to_string(&echo).expect("serializable config")
    );
    write_json(&out.join("config.json"), &echo)
}

fn required<'a>(value: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| Error::Config(format!("missing --{what}")))
}

fn load_detector(path: &Path) -> Result<Detector> {
    Ok(Detector::new(EncoderModel::load(path)?))
}

fn gen_corpus(cfg: &CorpusRunConfig, out: &Path) -> Result<()> {
    if cfg.topologies.is_empty() {
        return Err(Error::Config("at least one topology is required".into()));
    }
    cfg.provider.validate()?;
    create_out(out)?;
    echo_config(out, "gen-corpus", cfg)?;
    let items = match cfg.attack {
        None => generate_normal_corpus(
            cfg.count,
            cfg.n_agents,
            &cfg.topologies,
            &cfg.provider,
            cfg.seed,
            EXEC_MODE,
        )?,
        Some(a) => {
            let indices: Vec<u64> = (0..cfg.count as u64).collect();
            let samples = blindguard_core::parallel::try_map(&indices, EXEC_MODE, |&i| {
                let topology = cfg.topologies[i as usize % cfg.topologies.len()];
                attacked_sample(
                    a.kind,
                    topology,
                    cfg.n_agents,
                    a.n_attackers,
                    a.strength,
                    &cfg.provider,
                    cfg.seed,
                    i,
                )
            })?;
            samples.into_iter().map(|(g, x, _)| (g, x)).collect()
        }
    };
    let manifest = write_corpus(out, cfg.seed, &cfg.provider, cfg.attack, &items)?;
    println!(
        "wrote {} graphs to {}",
        manifest.graphs.len(),
        out.display()
    );
    Ok(())
}

fn train_cmd(cfg: &TrainRunConfig, out: &Path) -> Result<()> {
    let corpus = required(&cfg.corpus, "corpus")?;
    cfg.train.validate()?;
    create_out(out)?;
    echo_config(out, "train", cfg)?;
    let (_, items) = read_corpus(corpus)?;
    let (model, mut report) = train(&items, &cfg.train)?;
    let checkpoint = out.join("model.bgck");
    model.save(&checkpoint)?;
    report.checkpoint_path = Some(checkpoint.clone());
    write_json(&out.join("train_report.json"), &report)?;
    println!(
        "trained on {} graphs for {} epochs; final loss {:.6}; model {} ({})",
        items.len(),
        cfg.train.epochs,
        report.epoch_losses.last().copied().unwrap_or(f64::NAN),
        checkpoint.display(),
        report.model_fingerprint
    );
    Ok(())
}

#[derive(Serialize)]
struct DetectSummary {
    graphs: usize,
    k: usize,
    model_fingerprint: String,
    auc_micro: Option<f64>,
    auc_macro: Option<f64>,
}

fn detect_cmd(cfg: &DetectRunConfig, out: &Path) -> Result<()> {
    let corpus = required(&cfg.corpus, "corpus")?;
    let model = required(&cfg.model, "model")?;
    if cfg.k == 0 {
        return Err(Error::Config(
            "detection budget k must be at least 1".into(),
        ));
    }
    create_out(out)?;
    echo_config(out, "detect", cfg)?;
    let detector = load_detector(model)?;
    let (manifest, items) = read_corpus(corpus)?;
    let reports = detector.detect_batch(&items, cfg.k, EXEC_MODE)?;
    let report_dir = out.join("reports");
    create_out(&report_dir)?;
    for (entry, report) in manifest.graphs.iter().zip(&reports) {
        let name = entry
            .graph
            .file_name()
            .expect("manifest graph paths name a file");
        report.write(&report_dir.join(name))?;
    }
    let labeled: Vec<(Vec<f64>, Vec<u8>)> = items
        .iter()
        .zip(&reports)
        .filter(|((g, _), _)| g.agents().iter().all(|a| a.truth_label.is_some()))
        .map(|((g, _), r)| {
            let labels = g
                .agents()
                .iter()
                .map(|a| u8::from(a.truth_label == Some(TruthLabel::Malicious)))
                .collect();
            (r.scores.clone(), labels)
        })
        .collect();
    let summary = DetectSummary {
        graphs: reports.len(),
        k: cfg.k,
        model_fingerprint: detector.fingerprint().to_string(),
        auc_micro: micro_auc(&labeled).ok(),
        auc_macro: macro_auc(&labeled),
    };
    write_json(&out.join("summary.json"), &summary)?;
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    println!(
        "detected on {} graphs (k={}); micro-AUC {}, macro-AUC {}",
        summary.graphs,
        summary.k,
        fmt(summary.auc_micro),
        fmt(summary.auc_macro)
    );
    Ok(())
}

fn simulate_cmd(cfg: &SimulateRunConfig, out: &Path) -> Result<()> {
    let detector = match cfg.defense {
        DefenseKind::BlindGuard => Some(load_detector(required(&cfg.model, "model")?)?),
        _ => None,
    };
    create_out(out)?;
    echo_config(out, "simulate", cfg)?;
    let mut g = generate_topology(
        cfg.topology,
        cfg.n_agents,
        rng::stream_key(cfg.seed, "cli-topology", &[cfg.task_index]),
    )?;
    g.set_graph_id(format!(
        "sim-{}-{}-{}",
        cfg.topology, cfg.seed, cfg.task_index
    ));
    let task = QueryTask::synthetic(cfg.seed, cfg.task_index);
    let scenario = match cfg.attack {
        None => Scenario::benign(g),
        Some(a) => {
            let attackers = random_attackers(
                cfg.n_agents,
                a.n_attackers,
                &mut rng::stream(cfg.seed, "cli-attackers", &[cfg.task_index]),
            );
            let spec = AttackSpec {
                kind: a.kind,
                attacker_indices: attackers,
                strength: a.strength,
                seed: cfg.seed,
            };
            apply_attack(&g, &task, &spec)?
        }
    };
    let defense = match (cfg.defense, detector.as_ref()) {
        (DefenseKind::BlindGuard, Some(d)) => Defense::BlindGuard(d),
        (DefenseKind::Oracle, _) => Defense::Oracle,
        _ => Defense::None,
    };
    let trace = run_rounds(&scenario, &task, &cfg.sim, defense, cfg.seed)?;
    let path = out.join("trace.json");
    std::fs::write(&path, trace.to_json()).map_err(|e| Error::io(&path, e))?;
    println!(
        "{} rounds; final answer {} (correct {}, target {}); attack success {}",
        trace.rounds.len(),
        trace.final_answer,
        task.correct_answer,
        task.adversarial_target,
        trace.attack_success
    );
    Ok(())
}

fn evaluate_cmd(cfg: &EvaluateRunConfig, out: &Path) -> Result<()> {
    let detector = if cfg.eval.defenses.contains(&DefenseKind::BlindGuard) {
        Some(load_detector(required(&cfg.model, "model")?)?)
    } else {
        None
    };
    create_out(out)?;
    echo_config(out, "evaluate", cfg)?;
    let table = evaluate(&cfg.eval, detector.as_ref(), EXEC_MODE)?;
    let csv = out.join("metrics.csv");
    std::fs::write(&csv, table.to_csv()).map_err(|e| Error::io(&csv, e))?;
    let json = out.join("metrics.json");
    std::fs::write(&json, table.to_json()).map_err(|e| Error::io(&json, e))?;
    let last = cfg.eval.sim.rounds;
    for row in table.rows.iter().filter(|r| r.round == last) {
        let auc = row
            .auc_micro
            .map_or(String::new(), |a| format!(" auc={a:.3}"));
        println!(
            "{:<7} {:<17} {:<11} ASR@{last}={:.3} acc={:.3}{auc}",
            row.topology, row.attack_kind, row.defense, row.asr, row.accuracy
        );
    }
    println!("wrote {} and {}", csv.display(), json.display());
    Ok(())
}
