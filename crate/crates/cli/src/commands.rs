//! Stage commands. Each seed works in `<out>/seed_<n>/`:
//!
//! ```text
//! manifest.json          stage records and artifact lists
//! config.txt             resolved configuration
//! dataset.jsonl          gen-data
//! pretrain/              pretrain (agent checkpoint)
//! vpa/                   vpa (agent checkpoint)
//! finetune_<variant>/    finetune (checkpoint, progress, metrics.csv)
//! eval_<checkpoint>/     eval (episodes.csv, alignment.csv, report.txt)
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use saferl_core::approx::Agent;
use saferl_core::cmdp::{Channel, Environment, GridCircleWorld};
use saferl_core::experiment::{
    collect_dataset, critic_predictions, grid_exact_truth, variant_sac_config, EnvConfig,
    DATASET_STREAM, FINETUNE_STREAM, PRETRAIN_STREAM, VPA_STREAM,
};
use saferl_core::offline::{load_dataset, pretrain, save_dataset, OfflineDataset};
use saferl_core::online::{evaluate_policy, initial_agent, read_metrics_csv, write_metrics_csv, Finetuner, InitMode};
use saferl_core::oracle::{constrained_optimum, policy_eval_exact, DEFAULT_COST_TOL, DEFAULT_EVAL_TOL};
use saferl_core::rng;
use saferl_core::vpa::{alignment_report, probe_pairs, render_table, vpa_run, AlignmentReport, ProbeMode};
use serde_json::json;
use sha2::Digest as _;

use crate::config::ExperimentConfig;
use crate::manifest::{RunManifest, MANIFEST_FILE};
use crate::svg::{cost_vs_reward, learning_curve, Band};
use crate::CliError;

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const PRETRAIN_DIR: &str = "pretrain";
pub const VPA_DIR: &str = "vpa";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.txt";

const PROBE_STREAM: u64 = 14;
const EVAL_STREAM: u64 = 15;

pub fn seed_dir(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    cfg.out.join(format!("seed_{seed}"))
}

pub fn finetune_dir(cfg: &ExperimentConfig) -> String {
    format!("finetune_{}", cfg.variant.name())
}

struct Run<'a> {
    cfg: &'a ExperimentConfig,
    seed: u64,
    manifest: RunManifest,
}

impl<'a> Run<'a> {
    fn open(cfg: &'a ExperimentConfig, seed: u64) -> Result<Self, CliError> {
        let dir = seed_dir(cfg, seed);
        fs::create_dir_all(&dir)?;
        let hash = cfg.hash();
        let mut manifest = RunManifest::open(&dir, &hash, Some(seed))?;
        if !manifest.is_done("config") {
            manifest.begin("config")?;
            fs::write(dir.join(CONFIG_FILE), cfg.to_text())?;
            manifest.finish("config", &[CONFIG_FILE])?;
        }
        Ok(Self { cfg, seed, manifest })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.manifest.dir().join(rel)
    }

    fn require(&self, rel: &str) -> Result<PathBuf, CliError> {
        let p = self.path(rel);
        let present = if p.is_dir() { Agent::exists_in(&p) } else { p.is_file() };
        if present {
            Ok(p)
        } else {
            Err(CliError::Missing(p))
        }
    }

    fn dataset(&self) -> Result<OfflineDataset, CliError> {
        Ok(load_dataset(&self.require(DATASET_FILE)?)?)
    }

    fn agent(&self, rel: &str) -> Result<Agent, CliError> {
        let agent = Agent::load_dir(&self.require(rel)?)?;
        check_agent(&agent, &self.cfg.pipeline.env, &self.path(rel))?;
        Ok(agent)
    }

    fn skip(&self, resume: bool, stage: &str, artifact: &str) -> bool {
        resume && self.manifest.is_done(stage) && self.require(artifact).is_ok()
    }

    fn derive(&self, stream: u64) -> u64 {
        rng::derive_seed(self.seed, stream)
    }
}

fn check_agent(agent: &Agent, env: &EnvConfig, path: &Path) -> Result<(), CliError> {
    let built = env.build()?;
    let spec = built.spec();
    if agent.q.input_dim() != spec.critic_input_dim() || agent.policy.net.input_dim() != spec.obs_dim {
        return Err(CliError::Config(format!(
            "checkpoint {} does not match environment {}",
            path.display(),
            env.name()
        )));
    }
    Ok(())
}

/// Runs `f` for every configured seed on the rayon pool and returns the
/// per-seed summaries in seed order.
fn per_seed<F>(cfg: &ExperimentConfig, f: F) -> Result<Vec<String>, CliError>
where
    F: Fn(&mut Run<'_>) -> Result<String, CliError> + Sync,
{
    cfg.seeds
        .par_iter()
        .map(|&seed| {
            let mut run = Run::open(cfg, seed)?;
            f(&mut run).map(|s| format!("seed {seed}: {s}"))
        })
        .collect()
}

pub fn gen_data(cfg: &ExperimentConfig, resume: bool) -> Result<Vec<String>, CliError> {
    per_seed(cfg, |run| {
        if run.skip(resume, "gen-data", DATASET_FILE) {
            return Ok("dataset up to date".into());
        }
        run.manifest.begin("gen-data")?;
        let ds = collect_dataset(&cfg.pipeline.env, &cfg.pipeline.dataset, run.derive(DATASET_STREAM))?;
        save_dataset(&ds, &run.path(DATASET_FILE))?;
        run.manifest.finish("gen-data", &[DATASET_FILE])?;
        Ok(format!(
            "{} transitions, zero-cost fraction {:.3}",
            ds.len(),
            ds.meta.zero_cost_fraction
        ))
    })
}

pub fn cmd_pretrain(cfg: &ExperimentConfig, resume: bool) -> Result<Vec<String>, CliError> {
    per_seed(cfg, |run| {
        if run.skip(resume, "pretrain", PRETRAIN_DIR) {
            return Ok("pretrain up to date".into());
        }
        let ds = run.dataset()?;
        let spec = cfg.pipeline.env.build()?.spec().clone();
        run.manifest.begin("pretrain")?;
        let out = pretrain(&ds, &spec, &cfg.pipeline.cpq, run.derive(PRETRAIN_STREAM))?;
        out.agent.save_dir(&run.path(PRETRAIN_DIR))?;
        run.manifest.finish("pretrain", &[PRETRAIN_DIR])?;
        Ok(format!(
            "cpq done, qc loss {:.4}, {} ood warnings",
            out.last.qc_loss, out.ood_warnings
        ))
    })
}

pub fn cmd_vpa(cfg: &ExperimentConfig, resume: bool) -> Result<Vec<String>, CliError> {
    per_seed(cfg, |run| {
        if run.skip(resume, "vpa", VPA_DIR) {
            return Ok("vpa up to date".into());
        }
        let ds = run.dataset()?;
        let agent = run.agent(PRETRAIN_DIR)?;
        let spec = cfg.pipeline.env.build()?.spec().clone();
        run.manifest.begin("vpa")?;
        let out = vpa_run(&ds, agent, &spec, &cfg.pipeline.vpa, run.derive(VPA_STREAM))?;
        out.agent.save_dir(&run.path(VPA_DIR))?;
        run.manifest.finish("vpa", &[VPA_DIR])?;
        Ok(format!("aligned, losses q {:.4} qc {:.4}", out.last_q_loss, out.last_qc_loss))
    })
}

pub fn cmd_finetune(cfg: &ExperimentConfig, resume: bool) -> Result<Vec<String>, CliError> {
    let sac = variant_sac_config(&cfg.pipeline, cfg.variant)?;
    let rel = finetune_dir(cfg);
    let stage = rel.replace('_', "-");
    per_seed(cfg, |run| {
        let mut env = cfg.pipeline.env.build()?;
        let spec = env.spec().clone();
        let dir = run.path(&rel);
        let ft_seed = run.derive(FINETUNE_STREAM);
        let mut ft = if resume && Finetuner::can_resume(&dir) {
            let ft = Finetuner::load(&dir, &spec, sac.total_steps)?;
            run.manifest.begin(&stage)?;
            ft
        } else {
            let start = match sac.init {
                InitMode::FromScratch => None,
                InitMode::WarmStart if cfg.variant.uses_vpa() => Some(run.agent(VPA_DIR)?),
                InitMode::WarmStart => Some(run.agent(PRETRAIN_DIR)?),
            };
            run.manifest.begin(&stage)?;
            Finetuner::new(initial_agent(&spec, &sac, start, ft_seed)?, &spec, sac.clone(), ft_seed)?
        };
        ft.run(env.as_mut(), Some(&dir))?;
        ft.save(&dir)?;
        let mut csv = Vec::new();
        write_metrics_csv(&ft.metrics, &mut csv)?;
        fs::write(dir.join(METRICS_FILE), csv)?;
        run.manifest.finish(&stage, &[&rel])?;
        let last = ft.metrics.last();
        Ok(format!(
            "{} steps, final return {:.2} cost {:.2} lambda {:.4}",
            ft.steps_done(),
            last.map_or(f64::NAN, |r| r.eval_return),
            last.map_or(f64::NAN, |r| r.eval_cost),
            ft.lambda.lambda
        ))
    })
}

/// Alignment of the pretrained and aligned critics under the offline policy.
struct Alignment {
    report: AlignmentReport,
    /// Exact-vs-network mean absolute error: `[q before, q after, qc before, qc after]`.
    mae: Option<[f64; 4]>,
}

fn mae(pred: &[f64], truth: &[f64]) -> f64 {
    pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / truth.len() as f64
}

fn alignment(run: &Run<'_>, mode: ProbeMode) -> Result<Alignment, CliError> {
    let cfg = run.cfg;
    let ds = run.dataset()?;
    let before = run.agent(PRETRAIN_DIR)?;
    let after = run.agent(VPA_DIR)?;
    let env = cfg.pipeline.env.build()?;
    let mut prng = rng::stream(run.seed, PROBE_STREAM + mode as u64);
    let probes = probe_pairs(env.as_ref(), Some(&ds), mode, cfg.eval.probes, &mut prng)?;
    match &cfg.pipeline.env {
        EnvConfig::GridCircle(g) => {
            let grid = GridCircleWorld::new(g.clone())?;
            let (tq, tc) = grid_exact_truth(&grid, &before.policy, &probes)?;
            let space = &grid.spec().action_space;
            let p = |net| critic_predictions(net, space, &probes);
            let (qb, qa, cb, ca) = (p(&before.q)?, p(&after.q)?, p(&before.qc)?, p(&after.qc)?);
            Ok(Alignment {
                report: AlignmentReport::from_values([&qb, &qa], [&cb, &ca], &tq, &tc, mode, 0)?,
                mae: Some([mae(&qb, &tq), mae(&qa, &tq), mae(&cb, &tc), mae(&ca, &tc)]),
            })
        }
        EnvConfig::PointCircle(_) => Ok(Alignment {
            report: alignment_report(
                &before.policy,
                env.as_ref(),
                (&before.q, &before.qc),
                (&after.q, &after.qc),
                &probes,
                mode,
                cfg.eval.rollouts,
                run.derive(PROBE_STREAM),
            )?,
            mae: None,
        }),
    }
}

pub const ALIGNMENT_HEADER: &str = "env,mode,channel,stage,rho,mae";

fn write_alignment(env: &str, rows: &[Alignment]) -> String {
    let mut s = format!("{ALIGNMENT_HEADER}\n");
    for a in rows {
        let r = &a.report;
        let cells = [
            ("q", "before", r.rho_q_before),
            ("q", "after", r.rho_q_after),
            ("qc", "before", r.rho_qc_before),
            ("qc", "after", r.rho_qc_after),
        ];
        for (i, (ch, stage, rho)) in cells.into_iter().enumerate() {
            let m = a.mae.map_or(String::new(), |m| m[i].to_string());
            let _ = writeln!(s, "{env},{},{ch},{stage},{rho},{m}", r.mode.name());
        }
    }
    s
}

/// Evaluates a checkpoint (default: the newest stage output of the
/// configured variant) and reports critic alignment when both offline
/// checkpoints exist.
pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<Vec<String>, CliError> {
    per_seed(cfg, |run| {
        let (ckpt, label) = match checkpoint {
            Some(p) => (p.to_path_buf(), p.file_name().map_or("checkpoint".into(), |n| n.to_string_lossy().into_owned())),
            None => {
                let candidates = [finetune_dir(cfg), VPA_DIR.to_string(), PRETRAIN_DIR.to_string()];
                let found = candidates.iter().find(|c| Agent::exists_in(&run.path(c)));
                match found {
                    Some(c) => (run.path(c), c.clone()),
                    None => return Err(CliError::Missing(run.path(PRETRAIN_DIR))),
                }
            }
        };
        if !Agent::exists_in(&ckpt) {
            return Err(CliError::Missing(ckpt));
        }
        let agent = Agent::load_dir(&ckpt)?;
        check_agent(&agent, &cfg.pipeline.env, &ckpt)?;
        let rel = format!("eval_{label}");
        let stage = rel.replace('_', "-");
        let dir = run.path(&rel);
        run.manifest.begin(&stage)?;
        fs::create_dir_all(&dir)?;
        let mut env = cfg.pipeline.env.build()?;
        let ev = evaluate_policy(&agent.policy, env.as_mut(), cfg.eval.episodes, run.derive(EVAL_STREAM))?;
        let mut episodes = String::from("episode,return,cost\n");
        for (i, (r, c)) in ev.episodes.iter().enumerate() {
            let _ = writeln!(episodes, "{i},{r},{c}");
        }
        fs::write(dir.join("episodes.csv"), episodes)?;

        let env_name = cfg.pipeline.env.name();
        let mut text = format!(
            "checkpoint {}\nepisodes {} mean return {:.4} mean cost {:.4}\n",
            ckpt.display(),
            ev.episodes.len(),
            ev.mean_return,
            ev.mean_cost
        );
        let have_offline = [DATASET_FILE, PRETRAIN_DIR, VPA_DIR].iter().all(|p| run.require(p).is_ok());
        if have_offline {
            let rows = [ProbeMode::Random, ProbeMode::Dataset]
                .into_iter()
                .map(|m| alignment(run, m))
                .collect::<Result<Vec<_>, _>>()?;
            fs::write(dir.join("alignment.csv"), write_alignment(env_name, &rows))?;
            let cols: Vec<(String, AlignmentReport)> = rows.iter().map(|a| (env_name.to_string(), a.report.clone())).collect();
            text.push('\n');
            text.push_str(&render_table(&cols));
            for a in &rows {
                if let Some(m) = a.mae {
                    let _ = writeln!(
                        text,
                        "MAE vs exact ({}): Q {:.4} -> {:.4}, Qc {:.4} -> {:.4}",
                        a.report.mode.name(),
                        m[0],
                        m[1],
                        m[2],
                        m[3]
                    );
                }
            }
        }
        fs::write(dir.join("report.txt"), &text)?;
        run.manifest.finish(&stage, &[&rel])?;
        Ok(format!("return {:.2} cost {:.2}", ev.mean_return, ev.mean_cost))
    })
}

/// Learning curves across the given metrics files and the cost/reward
/// trade-off figure, written to `out`.
pub fn cmd_plot(files: &[PathBuf], c_th: f64, out: &Path) -> Result<Vec<String>, CliError> {
    if files.is_empty() {
        return Err(CliError::Input("plot needs at least one metrics file".into()));
    }
    let mut runs = Vec::new();
    for f in files {
        let text = fs::read_to_string(f).map_err(|_| CliError::Missing(f.clone()))?;
        let rows = read_metrics_csv(&text).map_err(|e| CliError::Input(format!("{}: {e}", f.display())))?;
        runs.push((f.display().to_string(), rows));
    }
    let rows: Vec<_> = runs.iter().map(|(_, r)| r.clone()).collect();
    let reward = Band::from_runs(&rows, |m| m.eval_return)?;
    let cost = Band::from_runs(&rows, |m| m.eval_cost)?;
    fs::create_dir_all(out)?;
    let hash = hex::encode(sha2::Sha256::digest(files.iter().map(|f| f.display().to_string()).collect::<Vec<_>>().join("\n")));
    let mut manifest = RunManifest::open(out, &hash, None)?;
    manifest.begin("plot")?;
    let names = ["reward.svg", "cost.svg", "cost_vs_reward.svg"];
    fs::write(out.join(names[0]), learning_curve("Reward", "episode return", &reward, None))?;
    fs::write(out.join(names[1]), learning_curve("Cost", "episode cost", &cost, Some(c_th)))?;
    fs::write(out.join(names[2]), cost_vs_reward(&runs))?;
    manifest.finish("plot", &names)?;
    Ok(names.iter().map(|n| out.join(n).display().to_string()).collect())
}

/// Exact constrained optimum of a tabular environment.
pub fn cmd_oracle(cfg: &ExperimentConfig) -> Result<Vec<String>, CliError> {
    let EnvConfig::GridCircle(g) = &cfg.pipeline.env else {
        return Err(CliError::Config(format!(
            "oracle needs a tabular environment, env.name is {}",
            cfg.pipeline.env.name()
        )));
    };
    let grid = GridCircleWorld::new(g.clone())?;
    let tab = grid.to_tabular()?;
    let sol = constrained_optimum(&tab, DEFAULT_COST_TOL)?;
    let q = policy_eval_exact(&tab, &sol.policy, Channel::Reward, DEFAULT_EVAL_TOL)?;
    let qc = policy_eval_exact(&tab, &sol.policy, Channel::Cost, DEFAULT_EVAL_TOL)?;
    let doc = json!({
        "env": cfg.pipeline.env,
        "cmdp": serde_json::from_str::<serde_json::Value>(&tab.to_json()?)?,
        "lambda": sol.lambda,
        "reward": sol.reward,
        "cost": sol.cost,
        "mix_weight": sol.mix_weight,
        "feasible_side": sol.feasible_side,
        "infeasible_side": sol.infeasible_side,
        "policy": sol.policy,
        "q_reward": q.q,
        "q_cost": qc.q,
    });
    fs::create_dir_all(&cfg.out)?;
    let mut manifest = RunManifest::open(&cfg.out, &cfg.hash(), None)?;
    manifest.begin("oracle")?;
    fs::write(cfg.out.join("oracle.json"), serde_json::to_vec_pretty(&doc)?)?;
    manifest.finish("oracle", &["oracle.json"])?;
    Ok(vec![format!(
        "constrained optimum: reward {:.4} cost {:.4} (c_th {}) lambda {:.4}",
        sol.reward, sol.cost, g.cost_threshold, sol.lambda
    )])
}

/// Every file under `dir` is the manifest itself or listed in it.
pub fn orphans(dir: &Path) -> Result<Vec<String>, CliError> {
    let m = RunManifest::open(dir, "", None)?;
    let listed: std::collections::BTreeSet<&str> = m.artifacts().collect();
    let mut all = Vec::new();
    walk(dir, dir, &mut all)?;
    Ok(all
        .into_iter()
        .filter(|f| f != MANIFEST_FILE && !listed.contains(f.as_str()))
        .collect())
}

fn walk(root: &Path, cur: &Path, out: &mut Vec<String>) -> Result<(), CliError> {
    for e in fs::read_dir(cur)? {
        let p = e?.path();
        if p.is_dir() {
            walk(root, &p, out)?;
        } else {
            out.push(p.strip_prefix(root).unwrap_or(&p).to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}
