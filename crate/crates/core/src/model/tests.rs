use rand::Rng;

use super::*;
use crate::exec::Execution;
use crate::gradcheck::{compare, numeric_gradients};
use crate::lora::LoraConfig;
use crate::rng::rng_from;
use crate::tensor::kernels::softmax_into;

fn tiny(vocab: usize) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        vocab_size: vocab,
        context_len: 10,
        seed: 3,
    }
}

fn randomized_adapters(cfg: &ModelConfig, seed: u64) -> LoraAdapterSet {
    let mut set = LoraAdapterSet::new(cfg, LoraConfig::new(2, &Target::ALL, seed)).unwrap();
    let mut rng = rng_from(seed);
    let v: Vec<f64> = (0..set.num_params()).map(|_| rng.random_range(-0.3..0.3)).collect();
    set.load_flat(&v).unwrap();
    set
}

#[test]
fn init_is_deterministic() {
    let a = LanguageModel::init(tiny(6)).unwrap();
    let b = LanguageModel::init(tiny(6)).unwrap();
    assert_eq!(a.checksum(), b.checksum());
    let mut other = tiny(6);
    other.seed = 4;
    assert_ne!(a.checksum(), LanguageModel::init(other).unwrap().checksum());
}

#[test]
fn embedding_shape_follows_config() {
    let cfg = ModelConfig {
        vocab_size: 10,
        ..tiny(10)
    };
    let m = LanguageModel::init(cfg).unwrap();
    assert_eq!(m.tok_emb.shape(), &[10, 8]);
    assert!(m.named_tensors().iter().all(|(_, t)| !t.requires_grad()));
}

#[test]
fn closed_form_param_count_matches_tensors() {
    for (l, d, h, v, c) in [(1, 4, 1, 3, 2), (2, 8, 2, 6, 10), (3, 12, 4, 17, 33), (2, 64, 4, 40, 64)] {
        let cfg = ModelConfig {
            n_layers: l,
            d_model: d,
            n_heads: h,
            vocab_size: v,
            context_len: c,
            seed: 0,
        };
        let m = LanguageModel::init(cfg).unwrap();
        assert_eq!(m.param_count(), cfg.param_count());
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let mut c = tiny(5);
    c.n_heads = 3;
    assert!(matches!(LanguageModel::init(c), Err(Error::Config(_))));
    let mut c = tiny(5);
    c.context_len = 1;
    assert!(c.validate().is_err());
}

#[test]
fn forward_is_causal_bitwise() {
    let m = LanguageModel::init(tiny(6)).unwrap();
    let a = [1, 2, 3, 4, 5, 0, 1];
    for t in 0..a.len() {
        let mut b = a;
        for x in b.iter_mut().skip(t) {
            *x = (*x + 1) % 6;
        }
        let la = m.logits(&a, None).unwrap();
        let lb = m.logits(&b, None).unwrap();
        assert_eq!(&la.data()[..t * 6], &lb.data()[..t * 6], "position {t}");
    }
}

#[test]
fn fresh_adapters_do_not_change_logits() {
    let cfg = tiny(6);
    let m = LanguageModel::init(cfg).unwrap();
    let adapters = LoraAdapterSet::new(&cfg, LoraConfig::new(3, &Target::ALL, 9)).unwrap();
    let toks = [0, 3, 1, 5, 2];
    assert_eq!(m.logits(&toks, None).unwrap(), m.logits(&toks, Some(&adapters)).unwrap());
    let trained = randomized_adapters(&cfg, 2);
    assert_ne!(m.logits(&toks, None).unwrap(), m.logits(&toks, Some(&trained)).unwrap());
}

#[test]
fn forward_replays_bitwise() {
    let cfg = tiny(6);
    let toks = [1, 1, 2, 3, 5];
    let adapters = randomized_adapters(&cfg, 8);
    let a = LanguageModel::init(cfg).unwrap().logits(&toks, Some(&adapters)).unwrap();
    let b = LanguageModel::init(cfg).unwrap().logits(&toks, Some(&adapters)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn forward_input_errors() {
    let m = LanguageModel::init(tiny(6)).unwrap();
    assert!(matches!(m.logits(&[0, 6], None), Err(Error::Input(_))));
    assert!(matches!(m.logits(&[0; 11], None), Err(Error::Input(_))));
    assert!(matches!(m.logits(&[], None), Err(Error::Input(_))));
    let wrong = LoraAdapterSet::new(&ModelConfig { n_layers: 1, ..tiny(6) }, LoraConfig::new(2, &[Target::Q], 0)).unwrap();
    assert!(matches!(m.logits(&[0, 1], Some(&wrong)), Err(Error::Config(_))));
}

const GRAD_TOKENS: [usize; 6] = [1, 4, 2, 2, 5, 0];

/// Mean next-token cross-entropy and, optionally, the flattened adapter gradient.
fn adapter_loss(model: &LanguageModel, adapters: &LoraAdapterSet, grads: bool) -> (f64, Vec<f64>) {
    let mut g = Graph::new();
    let bound = adapters.bind(&mut g);
    let logits = model.forward(&mut g, &GRAD_TOKENS, Some(&bound)).unwrap();
    let targets: Vec<(usize, usize)> = (0..GRAD_TOKENS.len() - 1).map(|t| (t, GRAD_TOKENS[t + 1])).collect();
    let loss = g.cross_entropy(logits, &targets, 1.0 / targets.len() as f64).unwrap();
    let value = g.scalar(loss);
    if !grads {
        return (value, vec![]);
    }
    g.backward(loss).unwrap();
    (value, bound.grads(&g))
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let cfg = tiny(6);
    let mut model = LanguageModel::init(cfg).unwrap();
    let mut rng = rng_from(77);
    for (_, t) in model.named_tensors_mut() {
        for x in t.data_mut() {
            *x += rng.random_range(-0.05..0.05);
        }
    }
    let adapters = randomized_adapters(&cfg, 5);
    let (_, analytic) = adapter_loss(&model, &adapters, true);
    let mut params = vec![Tensor::new(vec![adapters.num_params()], adapters.flatten()).unwrap()];
    let numeric = numeric_gradients(&mut params, 1e-5, |p| {
        adapter_loss(&model, &adapters.unflatten(p[0].data()).unwrap(), false).0
    });
    let report = compare(&[analytic], &numeric, 1e-8);
    assert!(report.passes(1e-4), "{report:?}");
}

#[test]
fn base_parameters_receive_no_gradient() {
    let cfg = tiny(6);
    let model = LanguageModel::init(cfg).unwrap();
    let adapters = LoraAdapterSet::new(&cfg, LoraConfig::new(2, &[Target::Q, Target::V], 1)).unwrap();
    let mut g = Graph::new();
    let bound = adapters.bind(&mut g);
    let logits = model.forward(&mut g, &GRAD_TOKENS, Some(&bound)).unwrap();
    let loss = g.cross_entropy(logits, &[(0, 1), (1, 2)], 0.5).unwrap();
    g.backward(loss).unwrap();
    // Only adapter leaves (the first bound nodes) and derived nodes carry gradients.
    let tracked_leaves = (0..g.len())
        .map(crate::tensor::NodeId::from_index)
        .filter(|&id| g.inputs(id).is_empty() && g.grad(id).is_some())
        .count();
    assert_eq!(tracked_leaves, 2 * adapters.entries().len());
    // B starts at zero, so only B receives a nonzero gradient on the first step.
    let flat = bound.grads(&g);
    let per = 2 * 8;
    for e in 0..adapters.entries().len() {
        let chunk = &flat[e * 2 * per..(e + 1) * 2 * per];
        assert!(chunk[..per].iter().all(|&x| x == 0.0));
        assert!(chunk[per..].iter().any(|&x| x != 0.0));
    }
}

#[test]
fn uniform_model_perplexity_equals_vocab() {
    let mut m = LanguageModel::init(tiny(16)).unwrap();
    m.head.data_mut().iter_mut().for_each(|x| *x = 0.0);
    let data = vec![vec![0, 3, 4, 15, 2], vec![7, 7, 1]];
    let ppl = perplexity(&m, None, &data, Execution::Sequential).unwrap();
    assert!((ppl - 16.0).abs() < 1e-9);
}

/// Residual stream carries the current token only; the head maps token
/// `t` to `(t + 1) mod V` with a huge margin.
fn successor_model(vocab: usize) -> LanguageModel {
    let cfg = ModelConfig {
        n_layers: 1,
        d_model: vocab,
        n_heads: 1,
        vocab_size: vocab,
        context_len: 8,
        seed: 0,
    };
    let mut m = LanguageModel::init(cfg).unwrap();
    for (name, t) in m.named_tensors_mut() {
        if name.starts_with("layers.") && !name.ends_with(".gain") || name == "pos_emb" {
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }
    m.tok_emb.data_mut().iter_mut().for_each(|x| *x = 0.0);
    m.head.data_mut().iter_mut().for_each(|x| *x = 0.0);
    for t in 0..vocab {
        m.tok_emb.data_mut()[t * vocab + t] = 1.0;
        let next = (t + 1) % vocab;
        m.head.data_mut()[next * vocab + t] = 1000.0;
    }
    m
}

#[test]
fn perfect_predictor_has_unit_perplexity() {
    let m = successor_model(5);
    let data = vec![vec![0, 1, 2, 3, 4, 0, 1]];
    let ppl = perplexity(&m, None, &data, Execution::Sequential).unwrap();
    assert!((ppl - 1.0).abs() < 1e-9, "{ppl}");
}

#[test]
fn two_token_perplexities_enumerate_to_a_distribution() {
    // For a 2-token sequence ppl = 1 / p(b | a); summing p over all b must give 1.
    let cfg = tiny(7);
    let m = LanguageModel::init(cfg).unwrap();
    let adapters = randomized_adapters(&cfg, 4);
    for a in 0..7 {
        let total: f64 = (0..7)
            .map(|b| 1.0 / perplexity(&m, Some(&adapters), &[vec![a, b]], Execution::Sequential).unwrap())
            .sum();
        assert!((total - 1.0).abs() < 1e-12, "{total}");
    }
}

#[test]
fn perplexity_of_empty_dataset_is_an_error() {
    let m = LanguageModel::init(tiny(4)).unwrap();
    assert!(matches!(perplexity(&m, None, &[], Execution::Sequential), Err(Error::Input(_))));
}

#[test]
fn uniform_model_scores_tie_to_first_choice() {
    let mut m = LanguageModel::init(tiny(6)).unwrap();
    m.head.data_mut().iter_mut().for_each(|x| *x = 0.0);
    let r = score_choices(&m, None, &[1, 2], &[vec![3, 4], vec![5], vec![0, 0, 1]], ChoiceScoring::MeanLogLikelihood).unwrap();
    assert_eq!(r.chosen, 0);
    assert!(r.scores.iter().all(|s| (s - r.scores[0]).abs() < 1e-12));
}

#[test]
fn identical_choices_pick_index_zero() {
    let m = LanguageModel::init(tiny(6)).unwrap();
    let r = score_choices(&m, None, &[1], &[vec![2, 3], vec![2, 3]], ChoiceScoring::MeanLogLikelihood).unwrap();
    assert_eq!(r.chosen, 0);
    assert_eq!(r.scores[0], r.scores[1]);
}

/// p(next | prefix) from a separate forward of the prefix alone.
fn next_prob(m: &LanguageModel, adapters: &LoraAdapterSet, prefix: &[usize], next: usize) -> f64 {
    let logits = m.logits(prefix, Some(adapters)).unwrap();
    let v = m.config().vocab_size;
    let last = &logits.data()[(prefix.len() - 1) * v..prefix.len() * v];
    let mut p = vec![0.0; v];
    softmax_into(last, &mut p);
    p[next]
}

#[test]
fn choice_scores_match_product_of_conditionals() {
    let cfg = tiny(6);
    let m = LanguageModel::init(cfg).unwrap();
    let adapters = randomized_adapters(&cfg, 13);
    let prompt = vec![1, 3, 2];
    let choices = vec![vec![4, 0], vec![5, 5, 1], vec![2]];
    let r = score_choices(&m, Some(&adapters), &prompt, &choices, ChoiceScoring::SumLogLikelihood).unwrap();
    let rn = score_choices(&m, Some(&adapters), &prompt, &choices, ChoiceScoring::MeanLogLikelihood).unwrap();
    for (i, c) in choices.iter().enumerate() {
        let mut prefix = prompt.clone();
        let mut prob = 1.0;
        for &tok in c {
            prob *= next_prob(&m, &adapters, &prefix, tok);
            prefix.push(tok);
        }
        assert!((r.scores[i] - prob.ln()).abs() < 1e-10);
        assert!((rn.scores[i] - prob.ln() / c.len() as f64).abs() < 1e-10);
    }
}

#[test]
fn permuting_choices_permutes_scores() {
    let cfg = tiny(6);
    let m = LanguageModel::init(cfg).unwrap();
    let adapters = randomized_adapters(&cfg, 1);
    let choices = vec![vec![4, 0], vec![5, 1], vec![2, 2], vec![0, 3]];
    let perm = [2, 0, 3, 1];
    let permuted: Vec<Vec<usize>> = perm.iter().map(|&i| choices[i].clone()).collect();
    let a = score_choices(&m, Some(&adapters), &[1], &choices, ChoiceScoring::MeanLogLikelihood).unwrap();
    let b = score_choices(&m, Some(&adapters), &[1], &permuted, ChoiceScoring::MeanLogLikelihood).unwrap();
    for (j, &i) in perm.iter().enumerate() {
        assert_eq!(b.scores[j], a.scores[i]);
    }
    assert_eq!(perm[b.chosen], a.chosen);
}

#[test]
fn choice_errors() {
    let m = LanguageModel::init(tiny(6)).unwrap();
    assert!(score_choices(&m, None, &[1], &[vec![2]], ChoiceScoring::MeanLogLikelihood).is_err());
    let long = vec![1; 10];
    assert!(matches!(
        score_choices(&m, None, &[1], &[vec![2], long], ChoiceScoring::MeanLogLikelihood),
        Err(Error::Input(_))
    ));
}
