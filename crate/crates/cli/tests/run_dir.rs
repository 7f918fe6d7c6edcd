use std::fs;
use std::path::Path;
use std::process::Command;

use fedcollm::checkpoint::{decode_adapter, decode_model, encode_adapter, encode_model};
use fedcollm::federation::{BaselineKind, EvalReport, RoundTranscript, TransportKind};
use fedcollm_cli::config::{ExperimentConfig, ModelShape};
use fedcollm_cli::metrics::{MetricsRecord, Phase};
use fedcollm_cli::{cmd_eval, cmd_run, RunOptions};

fn small_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.clients = 2;
    c.context_len = 24;
    c.mcq_count = 8;
    c.slm = ModelShape {
        n_layers: 1,
        d_model: 16,
        n_heads: 2,
    };
    c.llm = ModelShape {
        n_layers: 1,
        d_model: 24,
        n_heads: 2,
    };
    c.slm_lora.rank = 2;
    c.llm_lora.rank = 2;
    c.training.rounds = 2;
    c.training.distill_steps = 2;
    c
}

fn write_config(dir: &Path, c: &ExperimentConfig) -> std::path::PathBuf {
    let p = dir.join("cfg.json");
    fs::write(&p, c.canonical_json()).unwrap();
    p
}

fn run(kind: BaselineKind, c: &ExperimentConfig, dir: &Path, transport: Option<TransportKind>) -> EvalReport {
    let opts = RunOptions {
        config: Some(write_config(dir, c)),
        seed: None,
        out: dir.join("run"),
        transport,
    };
    cmd_run(kind, &opts, &mut std::io::sink()).unwrap()
}

#[test]
fn fedcollm_run_writes_a_complete_directory() {
    let dir = tempfile::tempdir().unwrap();
    let report = run(BaselineKind::FedCoLlm, &small_config(), dir.path(), None);
    let out = dir.path().join("run");
    for f in ["config.json", "metrics.jsonl", "transcripts.jsonl", "report.json"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    for f in ["slm_base", "llm_base", "theta_init", "omega_init", "theta_final", "omega_final"] {
        assert!(out.join("checkpoints").join(format!("{f}.ckpt")).is_file(), "{f} missing");
    }
    let transcripts: Vec<RoundTranscript> = fs::read_to_string(out.join("transcripts.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(transcripts.len(), 2);
    assert!(transcripts.iter().all(|t| t.distill.len() == 2 && t.error.is_none()));

    let records: Vec<MetricsRecord> = fs::read_to_string(out.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let keys: Vec<_> = records.iter().map(|r| (r.round, r.phase, r.step)).collect();
    assert!(keys.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(records.last().unwrap().phase, Phase::Eval);
    assert!(records.iter().all(|r| r.run_id == records[0].run_id));

    let stored: EvalReport = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(stored, report);
}

#[test]
fn eval_reproduces_the_stored_report() {
    for kind in [BaselineKind::FedCoLlm, BaselineKind::Standalone] {
        let dir = tempfile::tempdir().unwrap();
        let report = run(kind, &small_config(), dir.path(), None);
        assert_eq!(cmd_eval(&dir.path().join("run")).unwrap(), report, "{kind}");
    }
}

#[test]
fn checkpoints_survive_load_and_resave() {
    let dir = tempfile::tempdir().unwrap();
    run(BaselineKind::FedCoLlm, &small_config(), dir.path(), None);
    let ckpt = dir.path().join("run/checkpoints");
    for f in ["slm_base", "llm_base"] {
        let bytes = fs::read(ckpt.join(format!("{f}.ckpt"))).unwrap();
        assert_eq!(encode_model(&decode_model(&bytes).unwrap()), bytes);
    }
    for f in ["theta_init", "omega_init", "theta_final", "omega_final"] {
        let bytes = fs::read(ckpt.join(format!("{f}.ckpt"))).unwrap();
        assert_eq!(encode_adapter(&decode_adapter(&bytes).unwrap()), bytes);
    }
}

#[test]
fn zero_rounds_writes_only_initial_state() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small_config();
    c.training.rounds = 0;
    let report = run(BaselineKind::FedCoLlm, &c, dir.path(), None);
    let ckpt = dir.path().join("run/checkpoints");
    assert!(ckpt.join("theta_init.ckpt").is_file());
    assert!(!ckpt.join("theta_final.ckpt").exists());
    assert!(!ckpt.join("omega_final.ckpt").exists());
    assert_eq!(fs::read_to_string(dir.path().join("run/transcripts.jsonl")).unwrap(), "");
    assert!(report.slm.perplexity.is_finite());
}

#[test]
fn secure_and_plain_runs_evaluate_alike() {
    let mut c = small_config();
    c.training.clip = 1.0;
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let plain = run(BaselineKind::FedCoLlm, &c, d1.path(), Some(TransportKind::Plain));
    let secure = run(BaselineKind::FedCoLlm, &c, d2.path(), Some(TransportKind::Secure));
    let rounds = fs::read_to_string(d2.path().join("run/transcripts.jsonl")).unwrap();
    assert!(rounds.lines().all(|l| serde_json::from_str::<RoundTranscript>(l).unwrap().clipped_elements == 0));
    assert!((plain.slm.perplexity - secure.slm.perplexity).abs() < 1e-3);
    assert!((plain.llm.perplexity - secure.llm.perplexity).abs() < 1e-3);
}

#[test]
fn federated_training_improves_on_round_zero() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = ExperimentConfig::default();
    c.training.rounds = 3;
    c.mcq_count = 8;
    c.slm.d_model = 32;
    c.llm.d_model = 32;
    c.llm.n_layers = 1;
    c.llm.n_heads = 4;
    let trained = run(BaselineKind::FedCoLlm, &c, dir.path(), None);
    c.training.rounds = 0;
    let untouched = run(BaselineKind::FedCoLlm, &c, dir.path(), None);
    assert!(trained.slm.perplexity < untouched.slm.perplexity);
    assert!(trained.llm.perplexity < untouched.llm.perplexity);
}

#[test]
fn centralized_is_no_worse_than_zero_shot() {
    let c = small_config();
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let central = run(BaselineKind::Centralized, &c, d1.path(), None);
    let zero = run(BaselineKind::ZeroShot, &c, d2.path(), None);
    assert!(central.llm.perplexity <= zero.llm.perplexity);
    assert_eq!(central.slm, zero.slm);
}

#[test]
fn binary_rejects_a_bad_config_with_field_names() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"clients": 0, "slm": {"n_layers": 1, "d_model": 10, "n_heads": 3}}"#).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_fedcollm"))
        .args(["fedcollm", "--config", cfg.to_str().unwrap(), "--out"])
        .arg(dir.path().join("run"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("clients:") && err.contains("slm:"), "{err}");
}

#[test]
fn binary_prints_the_commcost_table() {
    let out = Command::new(env!("CARGO_BIN_EXE_fedcollm"))
        .args(["commcost", "--layers", "2", "--d-model", "64", "--full-params", "1000000"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for name in ["gpt2", "opt", "llama2", "custom"] {
        assert!(text.contains(name), "{text}");
    }
    assert!(text.contains("294912"), "{text}");
}

#[test]
fn unknown_baseline_kind_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_fedcollm"))
        .args(["baseline", "fedprox", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
}
