//! Subcommand implementations. Each returns an error for a nonzero exit.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context};
use fedcollm::checkpoint::{load_adapter, load_model, save_adapter, save_model};
use fedcollm::federation::{
    evaluate, expected_round_bytes, run_baseline, BaselineKind, EvalReport, ModelScores, RoundTranscript,
    TransportKind,
};
use fedcollm::lora::{count_transmitted_params, LoraAdapterSet, LoraConfig, Target};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::metrics::MetricsWriter;

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub transport: Option<TransportKind>,
}

/// Stable identifier: hash of the run kind and the effective config.
pub fn run_id(kind: BaselineKind, cfg: &ExperimentConfig) -> String {
    let mut h = Sha256::new();
    h.update(kind.name().as_bytes());
    h.update(cfg.canonical_json().as_bytes());
    hex::encode(&h.finalize()[..8])
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_adapter(dir: &Path, name: &str, a: &LoraAdapterSet) -> anyhow::Result<()> {
    let path = dir.join(format!("{name}.ckpt"));
    save_adapter(&path, a).with_context(|| format!("writing {}", path.display()))
}

/// Trains and evaluates one run kind, writing the run directory:
/// `config.json`, `metrics.jsonl`, `transcripts.jsonl`, `checkpoints/` and
/// `report.json`.
pub fn cmd_run(kind: BaselineKind, opts: &RunOptions, log: &mut dyn Write) -> anyhow::Result<EvalReport> {
    let cfg = ExperimentConfig::load(opts.config.as_deref())?.with_overrides(opts.seed, opts.transport);
    cfg.validate()?;
    writeln!(log, "effective config:\n{}", cfg.canonical_json())?;
    let prep = cfg.prepare()?;
    let w = &prep.workload;
    let id = run_id(kind, &cfg);

    let out = &opts.out;
    let ckpt = out.join("checkpoints");
    fs::create_dir_all(&ckpt).with_context(|| format!("creating {}", ckpt.display()))?;
    fs::write(out.join("config.json"), cfg.canonical_json())?;
    save_model(&ckpt.join("slm_base.ckpt"), &w.slm)?;
    save_model(&ckpt.join("llm_base.ckpt"), &w.llm)?;
    write_adapter(&ckpt, "theta_init", &w.initial_theta()?)?;
    write_adapter(&ckpt, "omega_init", &w.initial_omega()?)?;

    let mut metrics = MetricsWriter::create(&out.join("metrics.jsonl"), &id)?;
    let mut transcripts = BufWriter::new(File::create(out.join("transcripts.jsonl"))?);
    let mut sink_err: Option<anyhow::Error> = None;
    let result = run_baseline(kind, w, &prep.fed, &mut |t: &RoundTranscript| {
        if sink_err.is_some() {
            return;
        }
        let r = (|| -> anyhow::Result<()> {
            serde_json::to_writer(&mut transcripts, t)?;
            transcripts.write_all(b"\n")?;
            metrics.round(t)?;
            writeln!(
                log,
                "round {}: bytes {} clipped {} distill {}",
                t.round,
                t.bytes_total(),
                t.clipped_elements,
                t.distill.last().map_or("-".to_string(), |d| format!("l_f {:.4} l_g {:.4}", d.l_f, d.l_g))
            )?;
            Ok(())
        })();
        if let Err(e) = r {
            sink_err = Some(e);
        }
    });
    transcripts.flush()?;
    if let Some(e) = sink_err {
        return Err(e.context("writing run records"));
    }
    let run = result.with_context(|| format!("{kind} run failed; see {}", out.join("transcripts.jsonl").display()))?;

    // Self-checks.
    ensure!(
        run.base_before == run.base_after,
        "frozen base weights changed: {:?} -> {:?}",
        run.base_before,
        run.base_after
    );
    let p = w.initial_theta()?.num_params();
    for t in &run.transcripts {
        let want = expected_round_bytes(w.clients.len(), p, t.transport);
        ensure!(
            t.bytes_total() == want,
            "round {} moved {} bytes, expected {want}",
            t.round,
            t.bytes_total()
        );
    }

    if prep.fed.rounds > 0 {
        if let Some(theta) = &run.theta {
            write_adapter(&ckpt, "theta_final", theta)?;
        }
        if let Some(omega) = &run.omega {
            write_adapter(&ckpt, "omega_final", omega)?;
        }
        if kind == BaselineKind::Standalone {
            for (k, a) in run.client_adapters.iter().enumerate() {
                write_adapter(&ckpt, &format!("client{k}_final"), a)?;
            }
        }
    }
    metrics.eval(prep.fed.rounds, &run.report)?;
    metrics.finish()?;
    write_json(&out.join("report.json"), &run.report)?;
    Ok(run.report)
}

fn mean_scores(scores: &[ModelScores]) -> ModelScores {
    let n = scores.len() as f64;
    ModelScores {
        perplexity: scores.iter().map(|s| s.perplexity).sum::<f64>() / n,
        mcq_accuracy: scores.iter().map(|s| s.mcq_accuracy).sum::<f64>() / n,
    }
}

/// Re-evaluates the checkpoints of a finished run directory.
pub fn cmd_eval(run_dir: &Path) -> anyhow::Result<EvalReport> {
    let cfg = ExperimentConfig::load(Some(&run_dir.join("config.json")))?;
    let report: EvalReport = serde_json::from_str(
        &fs::read_to_string(run_dir.join("report.json")).context("reading report.json")?,
    )
    .context("parsing report.json")?;
    let prep = cfg.prepare()?;
    let w = &prep.workload;
    let ckpt = run_dir.join("checkpoints");
    let slm = load_model(&ckpt.join("slm_base.ckpt"))?;
    let llm = load_model(&ckpt.join("llm_base.ckpt"))?;
    ensure!(
        slm.checksum() == w.slm.checksum() && llm.checksum() == w.llm.checksum(),
        "stored base models do not match the run config"
    );
    let load_opt = |name: &str| -> anyhow::Result<Option<LoraAdapterSet>> {
        let p = ckpt.join(format!("{name}.ckpt"));
        if p.exists() {
            Ok(Some(load_adapter(&p)?))
        } else {
            Ok(None)
        }
    };
    let (fed, exec) = (&prep.fed, prep.fed.execution);
    let score = |m, a: Option<&LoraAdapterSet>| evaluate(m, a, &w.eval, &w.mcq, fed.scoring, exec);

    let mut clients = Vec::new();
    let mut k = 0;
    while let Some(a) = load_opt(&format!("client{k}_final"))? {
        clients.push(score(&slm, Some(&a))?);
        k += 1;
    }
    if clients.is_empty() && !report.clients.is_empty() {
        // Zero rounds: every client kept the initial adapter.
        let theta0 = load_adapter(&ckpt.join("theta_init.ckpt"))?;
        let s = score(&slm, Some(&theta0))?;
        clients = vec![s; report.clients.len()];
    }
    let slm_scores = match load_opt("theta_final")? {
        Some(theta) => score(&slm, Some(&theta))?,
        None if !clients.is_empty() => mean_scores(&clients),
        None => score(&slm, None)?,
    };
    let llm_scores = match load_opt("omega_final")? {
        Some(omega) => score(&llm, Some(&omega))?,
        None => score(&llm, None)?,
    };
    Ok(EvalReport {
        kind: report.kind,
        slm: slm_scores,
        llm: llm_scores,
        clients,
    })
}

/// One communication-cost row.
#[derive(Debug, Clone, PartialEq)]
pub struct CommRow {
    pub name: String,
    pub n_layers: usize,
    pub d_model: usize,
    pub rank: usize,
    pub targets: Vec<Target>,
    pub full_params: usize,
    pub params: usize,
    /// Share of the full model, in percent.
    pub percent: f64,
    /// Download plus upload for one client in one round.
    pub bytes_plain: u64,
    pub bytes_secure: u64,
    /// Published share in percent, where one exists.
    pub reference_percent: Option<f64>,
}

/// Published model shapes: name, layers, width, LoRA rank, full parameter
/// count, reported percent.
pub const PRESETS: [(&str, usize, usize, usize, usize, f64); 3] = [
    ("gpt2", 12, 768, 8, 124_000_000, 0.24),
    ("opt", 24, 2048, 16, 1_316_000_000, 0.24),
    ("llama2", 24, 2048, 16, 1_345_000_000, 0.23),
];

pub fn comm_row(
    name: &str,
    n_layers: usize,
    d_model: usize,
    rank: usize,
    targets: &[Target],
    full_params: usize,
    reference_percent: Option<f64>,
) -> anyhow::Result<CommRow> {
    let lora = LoraConfig::new(rank, targets, 0).canonical();
    let t = count_transmitted_params(n_layers, d_model, &lora, full_params)?;
    Ok(CommRow {
        name: name.to_string(),
        n_layers,
        d_model,
        rank,
        targets: lora.targets.clone(),
        full_params,
        params: t.count,
        percent: 100.0 * t.fraction,
        bytes_plain: expected_round_bytes(1, t.count, TransportKind::Plain),
        bytes_secure: expected_round_bytes(1, t.count, TransportKind::Secure),
        reference_percent,
    })
}

pub fn preset_rows() -> anyhow::Result<Vec<CommRow>> {
    PRESETS
        .iter()
        .map(|&(name, l, d, r, full, pct)| comm_row(name, l, d, r, &[Target::Q, Target::V], full, Some(pct)))
        .collect()
}

pub fn format_comm_table(rows: &[CommRow]) -> String {
    let mut s = format!(
        "{:<12} {:>6} {:>6} {:>4} {:>7} {:>14} {:>10} {:>9} {:>9} {:>14} {:>14}\n",
        "model", "layers", "d", "r", "targets", "full", "lora", "percent", "reported", "bytes/plain", "bytes/secure"
    );
    for r in rows {
        let targets: String = r.targets.iter().map(|t| t.name()).collect::<Vec<_>>().join(",");
        let reported = r.reference_percent.map_or("-".to_string(), |p| format!("{p:.2}%"));
        s += &format!(
            "{:<12} {:>6} {:>6} {:>4} {:>7} {:>14} {:>10} {:>8.3}% {:>9} {:>14} {:>14}\n",
            r.name,
            r.n_layers,
            r.d_model,
            r.rank,
            targets,
            r.full_params,
            r.params,
            r.percent,
            reported,
            r.bytes_plain,
            r.bytes_secure
        );
    }
    s
}

/// Parses a comma-separated target list such as `q,v`.
pub fn parse_targets(s: &str) -> anyhow::Result<Vec<Target>> {
    let ts = s.split(',').map(|t| Target::parse(t.trim())).collect::<Result<Vec<_>, _>>()?;
    if ts.is_empty() {
        bail!("no LoRA targets given");
    }
    Ok(ts)
}
