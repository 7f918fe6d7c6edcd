use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fedcollm::data::{bundled_corpus, make_mcq_set_from, McqShape};
use fedcollm::federation::{batch_gradient, evaluate};
use fedcollm::lora::{LoraAdapterSet, LoraConfig, Target};
use fedcollm::model::{ChoiceScoring, LanguageModel, ModelConfig};
use fedcollm::Execution;

fn modes() -> [(&'static str, Execution); 2] {
    [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)]
}

fn bench(c: &mut Criterion) {
    let corpus = bundled_corpus();
    let cfg = ModelConfig::slm_preset(corpus.vocab.len(), 64, 1);
    let model = LanguageModel::init(cfg).unwrap();
    let adapters = LoraAdapterSet::new(&cfg, LoraConfig::new(8, &[Target::Q, Target::V], 2)).unwrap();
    let ids: Vec<usize> = (0..16).collect();
    let seqs = corpus.model_inputs(&ids, 64);
    let batch: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
    let pool: Vec<usize> = (16..48).collect();
    let mcq = make_mcq_set_from(&corpus, &pool, 16, McqShape::default(), 3).unwrap();

    let mut g = c.benchmark_group("batch_gradient_16x64");
    for (name, exec) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| batch_gradient(&model, &adapters, &batch, exec).unwrap())
        });
    }
    g.finish();

    let mut g = c.benchmark_group("evaluate_16seq_16mcq");
    g.sample_size(20);
    for (name, exec) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| evaluate(&model, Some(&adapters), &seqs, &mcq, ChoiceScoring::MeanLogLikelihood, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
