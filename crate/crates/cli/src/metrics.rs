//! JSONL metrics stream, one record per training event.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use anyhow::{ensure, Context};
use fedcollm::federation::{EvalReport, ModelScores, RoundTranscript};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    ClientLocal,
    Aggregate,
    Distill,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub phase: Phase,
    pub round: usize,
    pub step: usize,
    pub metrics: BTreeMap<String, f64>,
    /// Seconds since the writer was opened. The only nondeterministic field.
    pub wall_time: f64,
}

/// Appends records in (round, phase, step) order.
pub struct MetricsWriter {
    out: BufWriter<File>,
    run_id: String,
    start: Instant,
    last: Option<(usize, Phase, usize)>,
}

impl MetricsWriter {
    pub fn create(path: &Path, run_id: &str) -> anyhow::Result<Self> {
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        Ok(MetricsWriter {
            out: BufWriter::new(file),
            run_id: run_id.to_string(),
            start: Instant::now(),
            last: None,
        })
    }

    pub fn record(&mut self, phase: Phase, round: usize, step: usize, metrics: BTreeMap<String, f64>) -> anyhow::Result<()> {
        let key = (round, phase, step);
        ensure!(self.last.map_or(true, |l| l < key), "metrics out of order: {key:?} after {:?}", self.last);
        self.last = Some(key);
        let rec = MetricsRecord {
            run_id: self.run_id.clone(),
            phase,
            round,
            step,
            metrics,
            wall_time: self.start.elapsed().as_secs_f64(),
        };
        serde_json::to_writer(&mut self.out, &rec)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    /// Client, aggregate and distillation records for one round.
    pub fn round(&mut self, t: &RoundTranscript) -> anyhow::Result<()> {
        for c in &t.clients {
            for (epoch, loss) in c.epoch_losses.iter().enumerate() {
                let step = c.client_id * c.epoch_losses.len() + epoch;
                let m = BTreeMap::from([
                    ("client".to_string(), c.client_id as f64),
                    ("epoch".to_string(), epoch as f64),
                    ("loss".to_string(), *loss),
                ]);
                self.record(Phase::ClientLocal, t.round, step, m)?;
            }
        }
        let m = BTreeMap::from([
            ("bytes_down".to_string(), t.bytes_down as f64),
            ("bytes_up".to_string(), t.bytes_up as f64),
            ("clipped_elements".to_string(), t.clipped_elements as f64),
        ]);
        self.record(Phase::Aggregate, t.round, 0, m)?;
        for d in &t.distill {
            let m = BTreeMap::from([("l_f".to_string(), d.l_f), ("l_g".to_string(), d.l_g)]);
            self.record(Phase::Distill, t.round, d.step, m)?;
        }
        Ok(())
    }

    /// Final evaluation, logged after the last round.
    pub fn eval(&mut self, round: usize, report: &EvalReport) -> anyhow::Result<()> {
        let mut m = BTreeMap::new();
        let mut put = |prefix: &str, s: &ModelScores| {
            m.insert(format!("{prefix}_perplexity"), s.perplexity);
            m.insert(format!("{prefix}_mcq_accuracy"), s.mcq_accuracy);
        };
        put("slm", &report.slm);
        put("llm", &report.llm);
        for (k, s) in report.clients.iter().enumerate() {
            put(&format!("client{k}"), s);
        }
        self.record(Phase::Eval, round, 0, m)
    }

    pub fn finish(mut self) -> anyhow::Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// Drops `wall_time` from every line so two streams can be compared.
pub fn strip_wall_time(jsonl: &str) -> anyhow::Result<Vec<serde_json::Value>> {
    jsonl
        .lines()
        .map(|line| {
            let mut v: serde_json::Value = serde_json::from_str(line)?;
            if let Some(o) = v.as_object_mut() {
                o.remove("wall_time");
            }
            Ok(v)
        })
        .collect()
}
