//! `metrics.csv`, `traffic.csv`, `controller.csv`, `run.json` and the controller checkpoint.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde_json::json;

use super::RunOutcome;
use crate::error::Result;
use crate::rng::{derive_seed, Stream};

pub const METRICS_HEADER: &str =
    "round,t_round,cum_time_s,cum_embed_MB,cum_model_MB,mean_loss,mean_acc,C_exact,C_est,C_max,edges,mean_ratio,reward";

pub fn write_metrics<W: Write>(outcome: &RunOutcome, mut out: W) -> Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for r in &outcome.metrics {
        let reward = r.reward.map(|u| u.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.round,
            r.t_round,
            r.cum_time_s,
            r.cum_embed_mb,
            r.cum_model_mb,
            r.mean_loss,
            r.mean_acc,
            r.c_exact,
            r.c_est,
            r.c_max,
            r.edges,
            r.mean_ratio,
            reward
        )?;
    }
    Ok(())
}

pub fn write_controller<W: Write>(outcome: &RunOutcome, mut out: W) -> Result<()> {
    writeln!(
        out,
        "round,reward,td_mean,critic_loss,sigma,edges,mean_ratio"
    )?;
    for c in &outcome.controller {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            c.round, c.reward, c.td_mean, c.critic_loss, c.sigma, c.edges, c.mean_ratio
        )?;
    }
    Ok(())
}

pub fn run_json(outcome: &RunOutcome) -> serde_json::Value {
    let seed = outcome.config.seed;
    let streams = [
        ("graph", Stream::Graph),
        ("partition", Stream::Partition),
        ("split", Stream::Split),
        ("bandwidth", Stream::Bandwidth),
        ("model_init", Stream::ModelInit),
        ("training", Stream::Training),
        ("policy", Stream::Policy),
        ("agent_init", Stream::AgentInit),
        ("agent_noise", Stream::AgentNoise),
        ("agent_replay", Stream::AgentReplay),
    ];
    let derived: serde_json::Map<String, serde_json::Value> = streams
        .iter()
        .map(|(name, s)| (name.to_string(), json!(derive_seed(seed, *s, 0))))
        .collect();
    json!({
        "summary": outcome.summary,
        "config": outcome.config,
        "seeds": { "master": seed, "streams": derived },
    })
}

/// Writes every artifact of a run into `dir`, creating it if needed.
pub fn write_outputs(outcome: &RunOutcome, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut f = BufWriter::new(File::create(dir.join("metrics.csv"))?);
    write_metrics(outcome, &mut f)?;
    f.flush()?;
    let mut f = BufWriter::new(File::create(dir.join("traffic.csv"))?);
    outcome.ledger.write_csv(&mut f)?;
    f.flush()?;
    fs::write(
        dir.join("run.json"),
        serde_json::to_string_pretty(&run_json(outcome))?,
    )?;
    if !outcome.controller.is_empty() {
        let mut f = BufWriter::new(File::create(dir.join("controller.csv"))?);
        write_controller(outcome, &mut f)?;
        f.flush()?;
    }
    if let Some(cp) = &outcome.checkpoint {
        fs::write(dir.join("checkpoint.json"), serde_json::to_string(cp)?)?;
    }
    Ok(())
}
