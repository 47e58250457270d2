//! Criterion benchmarks over the hot paths: raw matmul, the volumetric
//! encoder, one training step, greedy decoding, and the corpus metrics.

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use ct2rep_core::checkpoint::ModelKind;
use ct2rep_core::config::RunConfig;
use ct2rep_core::metrics::corpus_bleu;
use ct2rep_core::model::encoder::transformer_encode;
use ct2rep_core::model::generate::DecodeMode;
use ct2rep_core::model::vision::encode_volume;
use ct2rep_core::model::Forward;
use ct2rep_core::rng::Rng;
use ct2rep_core::runner::Trainer;
use ct2rep_core::tensor::Tape;
use ct2rep_core::text::{tokenize, Vocabulary};
use ct2rep_core::volume::{Unit, Volume3D};

fn norm_volume(shape: (usize, usize, usize), seed: u64) -> Volume3D {
    let mut rng = Rng::seed_from_u64(seed);
    let n = shape.0 * shape.1 * shape.2;
    let data = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
    Volume3D::new(shape, (1.5, 0.75, 0.75), data, Unit::Normalized)
}

fn desk_trainer() -> (Trainer, Volume3D) {
    let cfg = RunConfig::default();
    let corpus = vec![
        "Trachea, both main bronchi are open. There is cardiomegaly. No pleural effusion."
            .to_string(),
        "Lungs are clear.".to_string(),
    ];
    let vocab = Vocabulary::build(&corpus, 1).unwrap();
    let trainer = Trainer::new(&cfg, vocab, ModelKind::Base).unwrap();
    let vol = norm_volume((24, 48, 48), 5);
    (trainer, vol)
}

fn bench_matmul(c: &mut Criterion) {
    let mut rng = Rng::seed_from_u64(1);
    let a: Vec<f64> = (0..128 * 128).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let b: Vec<f64> = (0..128 * 128).map(|_| rng.uniform(-1.0, 1.0)).collect();
    c.bench_function("matmul_128", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let x = tape.leaf(a.clone(), vec![128, 128]);
            let y = tape.leaf(b.clone(), vec![128, 128]);
            black_box(tape.matmul(x, y).unwrap());
        })
    });
}

fn bench_encode_volume(c: &mut Criterion) {
    let (trainer, vol) = desk_trainer();
    let dims = trainer.cfg.dims(trainer.vocab.len());
    let patch = trainer.cfg.patch();
    c.bench_function("encode_volume_desk", |bench| {
        bench.iter(|| {
            let mut fw = Forward::new(&trainer.store);
            let z = encode_volume(&mut fw, &vol, &patch, &trainer.weights.vision, &dims).unwrap();
            let h = transformer_encode(&mut fw, z.id, &trainer.weights.encoder, &dims).unwrap();
            black_box(fw.tape.data(h)[0]);
        })
    });
}

fn bench_train_step(c: &mut Criterion) {
    let (mut trainer, vol) = desk_trainer();
    let target = trainer.encode_findings("Trachea, both main bronchi are open.");
    c.bench_function("train_step_desk", |bench| {
        bench.iter(|| black_box(trainer.train_step_base(&vol, &target, 0).unwrap()))
    });
}

fn bench_generate(c: &mut Criterion) {
    let (trainer, vol) = desk_trainer();
    c.bench_function("generate_greedy_desk", |bench| {
        bench.iter(|| black_box(trainer.generate_base(&vol, DecodeMode::Greedy).unwrap()))
    });
}

fn bench_metrics(c: &mut Criterion) {
    let refs = [
        "trachea , both main bronchi are open . there is cardiomegaly .",
        "lungs are clear . no pleural effusion was observed .",
        "consolidation in the right lower lobe . emphysema is present .",
    ];
    let pairs: Vec<(Vec<String>, Vec<String>)> = refs
        .iter()
        .cycle()
        .take(64)
        .map(|r| (tokenize(r), tokenize(r)))
        .collect();
    c.bench_function("corpus_bleu4_64_reports", |bench| {
        bench.iter(|| black_box(corpus_bleu(&pairs, 4)))
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_matmul, bench_encode_volume, bench_train_step, bench_generate, bench_metrics
}
criterion_main!(benches);
