use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use fillerlm_core::corpus::{generate_synthetic, Split, SynthConfig};
use fillerlm_core::eval::pseudo_nll;
use fillerlm_core::model::{MlmModel, ModelConfig, Mode};
use fillerlm_core::numerics::{Tape, Tensor};
use fillerlm_core::stats::wilcoxon;
use fillerlm_core::tokenize::{build_vocab, encode_reviews, mask_batch, Phase, PreprocStrategy, ReplaceProbs, StrategyConfig, TokenStrategy};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("matmul");
    for n in [32usize, 64, 128] {
        let a = Tensor::randn(&[n, n], 1.0, &mut rng);
        let b = Tensor::randn(&[n, n], 1.0, &mut rng);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let x = tape.constant(a.clone());
                let y = tape.constant(b.clone());
                black_box(tape.matmul(x, y).unwrap());
            })
        });
    }
    group.finish();
}

fn mlm_step(c: &mut Criterion) {
    let cfg = SynthConfig {
        n_reviews: 100,
        ..SynthConfig::default()
    };
    let splits = generate_synthetic(&cfg, 0).unwrap();
    let strategy = StrategyConfig::new(TokenStrategy::T1, PreprocStrategy::PS3, true);
    let vocab = build_vocab(&splits.train, &strategy, 1, 30_000).unwrap();
    let model = MlmModel::init(
        &ModelConfig {
            vocab_size: vocab.len(),
            ..ModelConfig::default()
        },
        0,
    )
    .unwrap();
    let sentences = encode_reviews(splits.split(Split::Train), &vocab, &strategy, Phase::Train);
    let batch = &sentences[..32];
    let masked = mask_batch(batch, &vocab, 0.15, &ReplaceProbs::default(), 1).unwrap();

    c.bench_function("mlm_forward_backward_32", |b| {
        b.iter(|| {
            let mut tape = Tape::with_params(model.params());
            let loss = model.mlm_loss(&mut tape, &masked, Mode::Train { dropout: 0.2, seed: 3 }).unwrap();
            black_box(tape.backward(loss).unwrap());
        })
    });
    c.bench_function("pseudo_nll_8_sentences", |b| b.iter(|| black_box(pseudo_nll(&model, &sentences[..8]).unwrap())));
}

fn signed_rank(c: &mut Criterion) {
    let a: Vec<f64> = (0..25).map(|i| (i as f64 * 0.7).sin()).collect();
    let b: Vec<f64> = (0..25).map(|i| (i as f64 * 0.3).cos()).collect();
    c.bench_function("wilcoxon_exact_n25", |bench| bench.iter(|| black_box(wilcoxon(&a, &b).unwrap())));
}

criterion_group!(benches, matmul, mlm_step, signed_rank);
criterion_main!(benches);
