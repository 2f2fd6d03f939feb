use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array1;

use crate::agents::checkpoint::{load_agent, save_agent};
use crate::agents::{metric_columns, Agent, Metrics};
use crate::env::{make_env, Dataset, SamplePool, Transition};
use crate::error::{QamError, Result};
use crate::harness::eval::{evaluate, EvalResult};
use crate::harness::RunConfig;
use crate::nn::SeededRng;

/// Where a finished run left its outputs.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub metrics_path: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub final_eval: Option<EvalResult>,
}

/// Sliding NaN-collapse monitor: abort when more than half of the last
/// `window` updates were skipped.
struct CollapseMonitor {
    window: Vec<bool>,
    cursor: usize,
    filled: bool,
}

impl CollapseMonitor {
    fn new(window: usize) -> Self {
        CollapseMonitor { window: vec![false; window.max(1)], cursor: 0, filled: false }
    }

    fn record(&mut self, skipped: bool) -> bool {
        self.window[self.cursor] = skipped;
        self.cursor = (self.cursor + 1) % self.window.len();
        if self.cursor == 0 {
            self.filled = true;
        }
        if !self.filled {
            return false;
        }
        let count = self.window.iter().filter(|s| **s).count();
        count * 2 > self.window.len()
    }
}

struct CsvLogger {
    file: fs::File,
    columns: Vec<&'static str>,
    sums: Vec<f64>,
    count: usize,
    started: Instant,
}

impl CsvLogger {
    fn create(path: &Path, columns: &[&'static str]) -> Result<Self> {
        let mut file = fs::File::create(path)?;
        let mut header = vec!["step".to_string(), "wall_ms".to_string()];
        header.extend(columns.iter().map(|c| c.to_string()));
        header.extend(
            ["eval_return_mean", "eval_return_lo", "eval_return_hi", "eval_success"]
                .iter()
                .map(|c| c.to_string()),
        );
        writeln!(file, "{}", header.join(","))?;
        Ok(CsvLogger {
            file,
            columns: columns.to_vec(),
            sums: vec![0.0; columns.len()],
            count: 0,
            started: Instant::now(),
        })
    }

    fn accumulate(&mut self, metrics: &Metrics) {
        for (i, col) in self.columns.iter().enumerate() {
            if let Some(v) = metrics.get(col) {
                self.sums[i] += v;
            }
        }
        self.count += 1;
    }

    fn flush_row(&mut self, step: u64, eval: &EvalResult) -> Result<()> {
        let mut row = vec![format!("{step}"), format!("{}", self.started.elapsed().as_millis())];
        for s in &self.sums {
            let avg = if self.count > 0 { s / self.count as f64 } else { 0.0 };
            row.push(format!("{avg}"));
        }
        row.push(format!("{}", eval.mean_return));
        row.push(format!("{}", eval.return_lo));
        row.push(format!("{}", eval.return_hi));
        row.push(format!("{}", eval.success_rate));
        writeln!(self.file, "{}", row.join(","))?;
        self.sums.iter_mut().for_each(|s| *s = 0.0);
        self.count = 0;
        Ok(())
    }
}

fn build_agent(cfg: &RunConfig, dataset: &Dataset) -> Result<Agent> {
    let kind = cfg.agent_kind()?;
    let agent_cfg = cfg.agent_config(dataset.state_dim, dataset.action_dim);
    Agent::new(kind, agent_cfg)
}

fn load_required_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let path = cfg
        .dataset
        .as_ref()
        .ok_or_else(|| QamError::config("this run requires a dataset path"))?;
    Dataset::load(path)
}

/// Offline pre-training: N update steps from the dataset with periodic
/// deterministic evaluation, a metrics CSV, and a final checkpoint (which for
/// zero steps is the initial one).
pub fn run_offline(cfg: &RunConfig) -> Result<RunArtifacts> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir)?;
    let dataset = load_required_dataset(cfg)?;
    let pool = SamplePool::from_dataset(&dataset, 0);
    let mut agent = build_agent(cfg, &dataset)?;
    let env_spec = cfg.resolved_env()?;
    let mut env = make_env(&env_spec)?;

    let metrics_path = cfg.out_dir.join("metrics_offline.csv");
    let mut logger = CsvLogger::create(&metrics_path, metric_columns(agent.kind))?;
    let mut sample_rng = SeededRng::named(cfg.seed, "harness/sample");
    let mut monitor = CollapseMonitor::new(100);

    let mut final_eval = None;
    for step in 1..=cfg.offline_steps {
        let batch = pool.sample(cfg.batch_size, &mut sample_rng)?;
        let before = agent.skipped_updates;
        let metrics = agent.update(&batch)?;
        logger.accumulate(&metrics);
        if monitor.record(agent.skipped_updates > before) {
            return Err(QamError::NanCollapse(format!(
                "more than half of the last 100 updates were skipped at step {step}"
            )));
        }
        if step % cfg.eval_interval == 0 || step == cfg.offline_steps {
            let eval = evaluate(&agent, env.as_mut(), cfg.eval_episodes, cfg.seed)?;
            logger.flush_row(step as u64, &eval)?;
            final_eval = Some(eval);
        }
    }

    let checkpoint_dir = cfg.out_dir.join("checkpoint");
    save_agent(&checkpoint_dir, &agent)?;
    Ok(RunArtifacts { metrics_path, checkpoint_dir, final_eval })
}

/// Online fine-tuning from a checkpoint: one environment step, one update
/// (UTD 1), with fresh transitions appended to the ring buffer and batches
/// drawn uniformly from the combined offline+online pool.
pub fn run_online(cfg: &RunConfig, checkpoint: &Path) -> Result<RunArtifacts> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir)?;
    let dataset = load_required_dataset(cfg)?;
    let mut pool = SamplePool::from_dataset(&dataset, cfg.online_buffer_capacity);
    let mut agent = load_agent(checkpoint)?;
    let env_spec = cfg.resolved_env()?;
    let mut env = make_env(&env_spec)?;
    let mut eval_env = make_env(&env_spec)?;

    let metrics_path = cfg.out_dir.join("metrics_online.csv");
    let mut logger = CsvLogger::create(&metrics_path, metric_columns(agent.kind))?;
    let mut sample_rng = SeededRng::named(cfg.seed, "harness/sample-online");
    let mut env_rng = SeededRng::named(cfg.seed, "harness/env");
    let mut act_rng = SeededRng::named(cfg.seed, "harness/act");
    let mut monitor = CollapseMonitor::new(100);

    let mut final_eval = None;
    if cfg.online_steps == 0 {
        let eval = evaluate(&agent, eval_env.as_mut(), cfg.eval_episodes, cfg.seed)?;
        logger.flush_row(agent.step, &eval)?;
        final_eval = Some(eval);
    } else {
        let mut s = env.reset(&mut env_rng);
        for step in 1..=cfg.online_steps {
            let a = agent.act(&s, &mut act_rng, false)?;
            let out = env.step(&a);
            pool.push(Transition {
                s: s.to_vec(),
                a: a.to_vec(),
                r: out.reward,
                s_next: out.next.to_vec(),
                done: out.done,
            });
            s = if out.done { env.reset(&mut env_rng) } else { out.next };

            let batch = pool.sample(cfg.batch_size, &mut sample_rng)?;
            let before = agent.skipped_updates;
            let metrics = agent.update(&batch)?;
            logger.accumulate(&metrics);
            if monitor.record(agent.skipped_updates > before) {
                return Err(QamError::NanCollapse(format!(
                    "more than half of the last 100 updates were skipped at online step {step}"
                )));
            }
            if step % cfg.eval_interval == 0 || step == cfg.online_steps {
                let eval = evaluate(&agent, eval_env.as_mut(), cfg.eval_episodes, cfg.seed)?;
                logger.flush_row(agent.step, &eval)?;
                final_eval = Some(eval);
            }
        }
    }

    let checkpoint_dir = cfg.out_dir.join("checkpoint-online");
    save_agent(&checkpoint_dir, &agent)?;
    Ok(RunArtifacts { metrics_path, checkpoint_dir, final_eval })
}

/// Convenience for tests and the oracle subcommand: mean action of the
/// deterministic policy over fresh resets.
pub fn deterministic_action(agent: &Agent, state: &Array1<f64>) -> Result<Array1<f64>> {
    let mut rng = SeededRng::named(0, "det-act");
    agent.act(state, &mut rng, true)
}
