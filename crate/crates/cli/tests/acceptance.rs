//! End-to-end acceptance checks. Each test prints one PASS/FAIL line.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use fedcollm::federation::{run_baseline, BaselineKind, TransportKind};
use fedcollm::gradcheck::{compare, numeric_gradients_5pt};
use fedcollm::lora::{LoraAdapterSet, LoraConfig, Target};
use fedcollm::losses::{ft_loss, kd_loss, server_losses, task_loss, DistillWeights};
use fedcollm::model::{LanguageModel, ModelConfig};
use fedcollm::rng::{gaussian_vec, rng_from};
use fedcollm::secagg::{mask_update, quantize, secure_aggregate, unmask_sum, PairwiseSeeds};
use fedcollm::tensor::KlDirection;
use fedcollm::{Execution, Graph, NodeId, Tensor};
use fedcollm_cli::commands::preset_rows;
use fedcollm_cli::config::{ExperimentConfig, ModelShape};
use fedcollm_cli::metrics::strip_wall_time;
use fedcollm_cli::{cmd_run, RunOptions};
use rand::Rng;

/// Writes straight to the process stderr so the line shows up even when
/// the harness captures test output.
fn verdict(n: u32, name: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "acceptance {n} [{tag}] {name}: {detail}");
    assert!(pass, "acceptance {n} ({name}) failed: {detail}");
}

fn small_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.clients = 3;
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
    c.training.distill_steps = 3;
    c.training.lr_theta = 0.3;
    c.training.lr_omega = 0.3;
    c
}

fn random_tensor(shape: &[usize], seed: u64, std: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), gaussian_vec(&mut rng_from(seed), n, std)).unwrap()
}

// ---------------------------------------------------------------- 1

/// A loss touching every graph op, differentiated with respect to the
/// first seven leaves.
fn every_op(params: &[Tensor], grads: bool) -> (f64, Vec<Vec<f64>>) {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params[..7].iter().map(|p| g.param(p)).collect();
    let teacher = params[7].data();
    let emb = g.embedding(ids[6], &[2, 0, 1, 2]).unwrap();
    let h = g.add(emb, ids[0]).unwrap();
    let h = g.layer_norm(h, ids[3], ids[4], 1e-5).unwrap();
    let q = g.matmul_nt(h, ids[1]).unwrap();
    let k = g.matmul(h, ids[2]).unwrap();
    let v = g.add_row(q, ids[5]).unwrap();
    let a = g.causal_attention(q, k, v, 2).unwrap();
    let a = g.gelu(a);
    let sm = g.softmax(a).unwrap();
    let ls = g.log_softmax(a).unwrap();
    let prod = g.mul(sm, ls).unwrap();
    let m = g.mean(prod);
    let s = g.sum(sm);
    let ce = g.cross_entropy(a, &[(0, 1), (1, 3), (3, 5)], 1.0 / 3.0).unwrap();
    let kl = g.kl_div(a, teacher, 1.7, KlDirection::TeacherStudent).unwrap();
    let kl2 = g.kl_div(a, teacher, 0.8, KlDirection::StudentTeacher).unwrap();
    let mut t = g.add(m, ce).unwrap();
    for x in [kl, kl2] {
        t = g.add(t, x).unwrap();
    }
    let s = g.scale(s, 0.01);
    let t = g.add(t, s).unwrap();
    let t = g.add_const(t, 0.25);
    let t = g.scale(t, 1.3);
    let value = g.scalar(t);
    if !grads {
        return (value, vec![]);
    }
    g.backward(t).unwrap();
    (value, ids.iter().map(|&i| g.grad_or_zeros(i)).collect())
}

/// Value of a loss built on one logits leaf, and its gradient.
fn logits_loss<F>(logits: &Tensor, grads: bool, build: &F) -> (f64, Vec<Vec<f64>>)
where
    F: Fn(&mut Graph<'_>, NodeId) -> NodeId,
{
    let mut g = Graph::new();
    let x = g.param(logits);
    let l = build(&mut g, x);
    let v = g.scalar(l);
    if !grads {
        return (v, vec![]);
    }
    g.backward(l).unwrap();
    (v, vec![g.grad_or_zeros(x)])
}

fn check_logits_loss<F>(seed: u64, build: F) -> f64
where
    F: Fn(&mut Graph<'_>, NodeId) -> NodeId,
{
    let mut p = vec![random_tensor(&[4, 7], seed, 1.5).with_requires_grad(true)];
    let (_, analytic) = logits_loss(&p[0], true, &build);
    let numeric = numeric_gradients_5pt(&mut p, 1e-3, |q| logits_loss(&q[0], false, &build).0);
    let r = compare(&analytic, &numeric, 1e-8);
    assert!(r.checked > 0);
    r.max_rel_error
}

fn slm_adapter_loss(model: &LanguageModel, adapters: &LoraAdapterSet, tokens: &[usize], grads: bool) -> (f64, Vec<f64>) {
    let mut g = Graph::new();
    let bound = adapters.bind(&mut g);
    let logits = model.forward(&mut g, tokens, Some(&bound)).unwrap();
    let loss = task_loss(&mut g, logits, tokens).unwrap();
    let v = g.scalar(loss);
    if !grads {
        return (v, vec![]);
    }
    g.backward(loss).unwrap();
    (v, bound.grads(&g))
}

#[test]
fn acceptance_1_gradient_integrity() {
    let start = Instant::now();
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();

    let mut params: Vec<Tensor> = [vec![4, 6], vec![6, 6], vec![6, 6], vec![6], vec![6], vec![6], vec![3, 6]]
        .iter()
        .enumerate()
        .map(|(i, s)| random_tensor(s, 100 + i as u64, 0.7).with_requires_grad(true))
        .collect();
    params.push(random_tensor(&[4, 6], 200, 1.0));
    let (_, analytic) = every_op(&params, true);
    let mut numeric = numeric_gradients_5pt(&mut params, 1e-3, |p| every_op(p, false).0);
    numeric.truncate(7);
    worst.insert("graph ops", compare(&analytic, &numeric, 1e-8).max_rel_error);

    let targets = [3usize, 0, 6, 2];
    let teacher = random_tensor(&[4, 7], 77, 1.5);
    worst.insert("task_loss", check_logits_loss(1, |g, x| task_loss(g, x, &targets).unwrap()));
    worst.insert("ft_loss", check_logits_loss(2, |g, x| ft_loss(g, x, &targets).unwrap()));
    for (name, direction, tau) in [
        ("kd_loss teacher-student", KlDirection::TeacherStudent, 2.0),
        ("kd_loss student-teacher", KlDirection::StudentTeacher, 0.6),
    ] {
        let w = DistillWeights {
            lambda: 1.0,
            temperature: tau,
            direction,
        };
        let err = check_logits_loss(3, |g, x| {
            let t = g.constant(teacher.clone());
            kd_loss(g, x, t, &w).unwrap()
        });
        worst.insert(name, err);
    }
    let w = DistillWeights {
        lambda: 0.8,
        ..Default::default()
    };
    worst.insert(
        "L_f",
        check_logits_loss(4, |g, x| {
            let s = g.constant(teacher.clone());
            server_losses(g, x, s, &targets, &w).unwrap().l_f
        }),
    );
    worst.insert(
        "L_g",
        check_logits_loss(5, |g, x| {
            let f = g.constant(teacher.clone());
            server_losses(g, f, x, &targets, &w).unwrap().l_g
        }),
    );

    // Full two-layer SLM at its reference width, gradient through every
    // layer into randomized adapters.
    let cfg = ModelConfig::slm_preset(27, 64, 11);
    let model = LanguageModel::init(cfg).unwrap();
    let adapters = LoraAdapterSet::new(&cfg, LoraConfig::new(8, &[Target::Q, Target::V], 12)).unwrap();
    let adapters = adapters
        .unflatten(&gaussian_vec(&mut rng_from(13), adapters.num_params(), 0.05))
        .unwrap();
    let tokens: Vec<usize> = (0..12).map(|i| 1 + (i * 7) % 26).collect();
    let (_, analytic) = slm_adapter_loss(&model, &adapters, &tokens, true);
    let mut flat = vec![Tensor::new(vec![adapters.num_params()], adapters.flatten()).unwrap()];
    let numeric = numeric_gradients_5pt(&mut flat, 1e-3, |p| {
        slm_adapter_loss(&model, &adapters.unflatten(p[0].data()).unwrap(), &tokens, false).0
    });
    let r = compare(&[analytic], &numeric, 1e-8);
    assert!(r.checked > 1000, "{r:?}");
    worst.insert("2-layer SLM", r.max_rel_error);

    let secs = start.elapsed().as_secs_f64();
    let max = worst.values().cloned().fold(0.0, f64::max);
    let detail = format!("max rel err {max:.2e} (< 1e-4) over {worst:?}; {secs:.1}s (< 60s)");
    verdict(1, "gradient integrity", max < 1e-4 && secs < 60.0, &detail);
}

// ---------------------------------------------------------------- 2

#[test]
fn acceptance_2_secure_aggregation_exactness() {
    let start = Instant::now();
    let clip = 0.1;
    let bound = 2f64.powi(-16) * clip;
    let mut rng = rng_from(2024);
    let trials = 1000;
    let (mut sum_mismatch, mut over_bound, mut elements) = (0usize, 0usize, 0usize);
    let mut worst = 0.0f64;
    let mut worst_k1 = 0.0f64;
    for trial in 0..trials {
        let k = rng.random_range(1..=8usize);
        let n = rng.random_range(1..=4096usize);
        let updates: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..n).map(|_| rng.random_range(-clip..=clip)).collect())
            .collect();
        let seeds = PairwiseSeeds::deal(k, rng.random()).unwrap();
        let round = trial as u32;
        let shares: Vec<_> = (0..k).map(|i| mask_update(i, &updates[i], &seeds, clip, round).unwrap()).collect();

        let mut plain_sum = vec![0u32; n];
        for u in &updates {
            for (acc, q) in plain_sum.iter_mut().zip(quantize(u, clip).unwrap()) {
                *acc = acc.wrapping_add(q);
            }
        }
        if unmask_sum(&shares).unwrap() != plain_sum {
            sum_mismatch += 1;
        }

        let mean = secure_aggregate(&shares, clip).unwrap();
        for (i, m) in mean.iter().enumerate() {
            let plain = updates.iter().map(|u| u[i]).sum::<f64>() / k as f64;
            let err = (m - plain).abs();
            worst = worst.max(err);
            if k == 1 {
                worst_k1 = worst_k1.max(err);
            }
            if err > bound {
                over_bound += 1;
            }
        }
        elements += n;
    }
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "{trials} trials, {elements} elements: {sum_mismatch} modular-sum mismatches; \
         {over_bound} elements exceed 2^-16*clip = {bound:.3e} (worst {worst:.6e}, worst at K=1 {worst_k1:.6e}, \
         half quantization step clip/65535 = {:.6e}); {secs:.1}s (< 60s)",
        clip / 65535.0
    );
    verdict(
        2,
        "secure aggregation exactness",
        sum_mismatch == 0 && over_bound == 0 && secs < 60.0,
        &detail,
    );
}

// ---------------------------------------------------------------- 3

#[test]
fn acceptance_3_protocol_equivalences() {
    let mut notes = Vec::new();
    let mut pass = true;

    // FedCoLLM with R = 0 against FedAvg, identical seeds.
    let mut c = small_config();
    c.training.distill_steps = 0;
    let prep = c.prepare().unwrap();
    let co = run_baseline(BaselineKind::FedCoLlm, &prep.workload, &prep.fed, &mut |_| {}).unwrap();
    let avg = run_baseline(BaselineKind::FedAvg, &prep.workload, &prep.fed, &mut |_| {}).unwrap();
    let same_theta = co.theta.as_ref().unwrap().flatten() == avg.theta.as_ref().unwrap().flatten();
    let same_rounds = co.transcripts == avg.transcripts;
    let same_slm = co.report.slm == avg.report.slm;
    notes.push(format!("R=0 vs FedAvg: theta {same_theta}, transcripts {same_rounds}, slm scores {same_slm}"));
    pass &= same_theta && same_rounds && same_slm;

    // FedAvg with one client against Standalone.
    let mut c = small_config();
    c.clients = 1;
    let prep = c.prepare().unwrap();
    let avg = run_baseline(BaselineKind::FedAvg, &prep.workload, &prep.fed, &mut |_| {}).unwrap();
    let alone = run_baseline(BaselineKind::Standalone, &prep.workload, &prep.fed, &mut |_| {}).unwrap();
    let same = avg.theta.as_ref().unwrap().flatten() == alone.client_adapters[0].flatten();
    let same_scores = avg.report.slm == alone.report.slm;
    notes.push(format!("K=1 FedAvg vs Standalone: adapter {same}, slm scores {same_scores}"));
    pass &= same && same_scores;

    // Frozen bases across every run kind and both transports.
    let mut frozen = 0;
    for transport in [TransportKind::Plain, TransportKind::Secure] {
        let c = small_config().with_overrides(None, Some(transport));
        let prep = c.prepare().unwrap();
        for kind in BaselineKind::ALL {
            let run = run_baseline(kind, &prep.workload, &prep.fed, &mut |_| {}).unwrap();
            let ok = run.base_before == run.base_after && run.base_before.len() == 2;
            pass &= ok;
            frozen += ok as usize;
        }
    }
    notes.push(format!("frozen base checksums unchanged in {frozen}/10 runs"));
    verdict(3, "protocol equivalences", pass, &notes.join("; "));
}

// ---------------------------------------------------------------- 4

#[test]
fn acceptance_4_communication_accounting() {
    let mut notes = Vec::new();
    let mut pass = true;
    for row in preset_rows().unwrap() {
        let reference = row.reference_percent.unwrap();
        let ok = (row.percent - reference).abs() <= 0.01;
        pass &= ok;
        notes.push(format!("{} {:.4}% vs {reference}%", row.name, row.percent));
    }
    for transport in [TransportKind::Plain, TransportKind::Secure] {
        let c = small_config().with_overrides(None, Some(transport));
        let prep = c.prepare().unwrap();
        let p = prep.workload.initial_theta().unwrap().num_params();
        let k = prep.workload.clients.len() as u64;
        let per_value = if transport == TransportKind::Plain { 8 } else { 4 };
        let want = 2 * k * p as u64 * per_value;
        let run = run_baseline(BaselineKind::FedCoLlm, &prep.workload, &prep.fed, &mut |_| {}).unwrap();
        let exact = run.transcripts.iter().all(|t| t.bytes_total() == want);
        pass &= exact && !run.transcripts.is_empty();
        notes.push(format!("{transport:?} rounds all {want} bytes: {exact}"));
    }
    verdict(4, "communication accounting", pass, &notes.join("; "));
}

// ---------------------------------------------------------------- 5

#[test]
fn acceptance_5_reference_preset_directional() {
    let start = Instant::now();
    let mut cfg = ExperimentConfig::default();
    assert_eq!(
        (cfg.clients, cfg.training.rounds, cfg.training.local_epochs, cfg.training.distill_steps),
        (4, 5, 1, 10)
    );
    assert!(cfg.corpus.is_none());
    // One core.
    cfg.training.execution = Execution::Sequential;
    let prep = cfg.prepare().unwrap();
    let mut r = BTreeMap::new();
    let mut frozen = true;
    for kind in BaselineKind::ALL {
        let run = run_baseline(kind, &prep.workload, &prep.fed, &mut |_| {}).unwrap();
        frozen &= run.base_before == run.base_after;
        r.insert(kind, run.report);
    }
    let secs = start.elapsed().as_secs_f64();
    let co = &r[&BaselineKind::FedCoLlm];
    let alone = &r[&BaselineKind::Standalone];
    let avg = &r[&BaselineKind::FedAvg];
    let zero = &r[&BaselineKind::ZeroShot];
    let central = &r[&BaselineKind::Centralized];
    let a = co.slm.perplexity <= alone.slm.perplexity;
    let b = co.slm.mcq_accuracy >= avg.slm.mcq_accuracy - 0.01;
    let c = co.llm.perplexity <= zero.llm.perplexity;
    let ratio = co.llm.perplexity / central.llm.perplexity;
    let d = ratio <= 1.10;
    let t = secs < 900.0;
    let detail = format!(
        "(a) {a}: slm ppl {:.3} vs standalone {:.3}; (b) {b}: slm acc {:.4} vs fedavg {:.4} - 0.01; \
         (c) {c}: llm ppl {:.3} vs zero-shot {:.3}; (d) {d}: llm ppl {:.3} / centralized {:.3} = {ratio:.4}; \
         frozen bases {frozen}; {secs:.0}s (< 900s)",
        co.slm.perplexity,
        alone.slm.perplexity,
        co.slm.mcq_accuracy,
        avg.slm.mcq_accuracy,
        co.llm.perplexity,
        zero.llm.perplexity,
        co.llm.perplexity,
        central.llm.perplexity,
    );
    verdict(5, "reference preset directional", a && b && c && d && t && frozen, &detail);
}

// ---------------------------------------------------------------- 6

fn kd_value(student: &Tensor, teacher: &Tensor, w: &DistillWeights) -> f64 {
    let mut g = Graph::new();
    let s = g.constant(student.clone());
    let t = g.constant(teacher.clone());
    let l = kd_loss(&mut g, s, t, w).unwrap();
    g.scalar(l)
}

#[test]
fn acceptance_6_distillation_mechanics() {
    let mut rng = rng_from(6);
    let pairs = 100_000;
    let (mut negative, mut equal_nonzero, mut unequal_zero) = (0, 0, 0);
    let mut min_unequal = f64::INFINITY;
    for i in 0..pairs {
        let v = rng.random_range(2..=10usize);
        let rows = rng.random_range(1..=3usize);
        let w = DistillWeights {
            lambda: 1.0,
            temperature: rng.random_range(0.25..4.0),
            direction: if i % 2 == 0 { KlDirection::TeacherStudent } else { KlDirection::StudentTeacher },
        };
        let s = random_tensor(&[rows, v], rng.random(), 2.0);
        if i % 4 < 2 {
            // Same softened distribution: a per-row constant shift.
            let shift: f64 = rng.random_range(-5.0..5.0);
            let mut t = s.clone();
            t.data_mut().iter_mut().for_each(|x| *x += shift);
            let kd = kd_value(&s, &t, &w);
            negative += (kd < 0.0) as usize;
            equal_nonzero += (kd.abs() > 1e-9) as usize;
        } else {
            let t = random_tensor(&[rows, v], rng.random(), 2.0);
            let kd = kd_value(&s, &t, &w);
            negative += (kd < 0.0) as usize;
            unequal_zero += (kd <= 1e-9) as usize;
            min_unequal = min_unequal.min(kd);
        }
    }

    // Teacher gradients.
    let llm = random_tensor(&[5, 6], 61, 2.0).with_requires_grad(true);
    let slm = random_tensor(&[5, 6], 62, 2.0).with_requires_grad(true);
    let targets = [0, 1, 2, 3, 4];
    let mut teacher_grad = false;
    for pick_f in [true, false] {
        let mut g = Graph::new();
        let (f, s) = (g.param(&llm), g.param(&slm));
        let l = server_losses(&mut g, f, s, &targets, &DistillWeights::default()).unwrap();
        g.backward(if pick_f { l.l_f } else { l.l_g }).unwrap();
        teacher_grad |= if pick_f { g.grad(s).is_some() } else { g.grad(f).is_some() };
    }

    // ∂L_f/∂λ against the KD term.
    let at = |lambda: f64| {
        let w = DistillWeights {
            lambda,
            ..Default::default()
        };
        let mut g = Graph::new();
        let (f, s) = (g.constant(llm.clone()), g.constant(slm.clone()));
        let l = server_losses(&mut g, f, s, &targets, &w).unwrap();
        (g.scalar(l.l_f), g.scalar(l.kd_f))
    };
    let h = 1e-4;
    let dl = (at(0.6 + h).0 - at(0.6 - h).0) / (2.0 * h);
    let lambda_err = (dl - at(0.6).1).abs();

    let pass = negative == 0 && equal_nonzero == 0 && unequal_zero == 0 && !teacher_grad && lambda_err < 1e-6;
    let detail = format!(
        "{pairs} pairs: {negative} negative, {equal_nonzero} equal pairs above 1e-9, {unequal_zero} unequal pairs at or \
         below 1e-9 (min {min_unequal:.3e}); teacher gradient present: {teacher_grad}; |dL_f/dlambda - KD| = {lambda_err:.2e}"
    );
    verdict(6, "distillation mechanics", pass, &detail);
}

// ---------------------------------------------------------------- 7

fn files_under(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        out.insert(p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap());
    }
    out
}

#[test]
fn acceptance_7_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("cfg.json");
    fs::write(&cfg_path, small_config().canonical_json()).unwrap();
    let mut notes = Vec::new();
    let mut pass = true;
    for transport in [TransportKind::Plain, TransportKind::Secure] {
        let runs: Vec<_> = (0..2)
            .map(|i| {
                let out = dir.path().join(format!("{transport:?}-{i}"));
                let opts = RunOptions {
                    config: Some(cfg_path.clone()),
                    seed: Some(41),
                    out: out.clone(),
                    transport: Some(transport),
                };
                cmd_run(BaselineKind::FedCoLlm, &opts, &mut std::io::sink()).unwrap();
                out
            })
            .collect();
        let read = |p: &Path| fs::read_to_string(p.join("metrics.jsonl")).unwrap();
        let metrics_same = strip_wall_time(&read(&runs[0])).unwrap() == strip_wall_time(&read(&runs[1])).unwrap();
        let ckpt_a = files_under(&runs[0].join("checkpoints"));
        let ckpt_same = ckpt_a == files_under(&runs[1].join("checkpoints"));
        let other_same = ["transcripts.jsonl", "report.json", "config.json"]
            .iter()
            .all(|f| fs::read(runs[0].join(f)).unwrap() == fs::read(runs[1].join(f)).unwrap());
        pass &= metrics_same && ckpt_same && other_same && ckpt_a.len() == 6;
        notes.push(format!(
            "{transport:?}: metrics {metrics_same}, {} checkpoints {ckpt_same}, transcripts/report/config {other_same}",
            ckpt_a.len()
        ));
    }
    verdict(7, "determinism", pass, &notes.join("; "));
}
