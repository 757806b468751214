use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rdlg_bench::{bit_inputs, soft_inputs, soft_layer};
use rdlg_core::inference::eval_bitpacked;
use rdlg_core::{collapse_model, ModelConfig, Seq2SeqModel};

fn soft_layer_passes(c: &mut Criterion) {
    let mut g = c.benchmark_group("soft_layer");
    for &(in_dim, width, batch) in &[(256, 512, 64), (1024, 4096, 64)] {
        let layer = soft_layer(in_dim, width, 1);
        let x = soft_inputs(in_dim, batch, 2);
        let id = format!("{in_dim}x{width}/b{batch}");
        g.throughput(Throughput::Elements((width * batch) as u64));
        g.bench_with_input(BenchmarkId::new("forward", &id), &x, |b, x| {
            b.iter(|| layer.forward(black_box(x)).unwrap())
        });
        let (y, tape) = layer.forward(&x).unwrap();
        g.bench_with_input(BenchmarkId::new("backward", &id), &y, |b, y| {
            b.iter(|| layer.backward(&tape, black_box(y)).unwrap())
        });
    }
    g.finish();
}

fn packed_layer(c: &mut Criterion) {
    let mut g = c.benchmark_group("collapsed_layer");
    for &(in_dim, width, lanes) in &[(1024, 4096, 64), (1024, 4096, 4096)] {
        let layer = soft_layer(in_dim, width, 3).collapse();
        let x = bit_inputs(in_dim, lanes, 4);
        g.throughput(Throughput::Elements((width * lanes) as u64));
        g.bench_with_input(BenchmarkId::new("eval_bitpacked", format!("{width}/l{lanes}")), &x, |b, x| {
            b.iter(|| eval_bitpacked(&layer, black_box(x)).unwrap())
        });
    }
    g.finish();
}

fn toy_model() -> ModelConfig {
    ModelConfig {
        vocab_size: 50,
        emb_dim: 64,
        seq_len: 8,
        sizes_n: vec![256, 256],
        sizes_k: vec![512, 256],
        sizes_l: vec![256, 256],
        sizes_p: vec![512, 256],
        sizes_m: vec![1024, 800],
        group_factor: 16,
        ..rdlg_core::gradcheck::tiny_config()
    }
}

fn sequence_throughput(c: &mut Criterion) {
    let cfg = toy_model();
    let model = Seq2SeqModel::new(cfg.clone()).unwrap();
    let collapsed = collapse_model(&model);
    let batch = 256;
    let seqs: Vec<Vec<u32>> = (0..batch)
        .map(|i| (0..cfg.seq_len).map(|t| 4 + ((i * 7 + t * 3) % 46) as u32).collect())
        .collect();
    let mut g = c.benchmark_group("toy_model_predict");
    g.sample_size(20);
    g.throughput(Throughput::Elements((batch * cfg.seq_len) as u64));
    g.bench_function("soft", |b| b.iter(|| model.predict(black_box(&seqs), &seqs).unwrap()));
    g.bench_function("hard", |b| b.iter(|| collapsed.predict(black_box(&seqs), &seqs).unwrap()));
    g.finish();
}

criterion_group!(benches, soft_layer_passes, packed_layer, sequence_throughput);
criterion_main!(benches);
