//! Hot-path benchmarks: dense matmul, one split training step, and the wire
//! codec on batch-sized tensor payloads.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

use splitnn_core::data::synth::synth_dataset;
use splitnn_core::engine::{two_agent_step, AliceState, BobState};
use splitnn_core::nn::{initialize, split, Initializer, LayerSpec, NetworkTopology};
use splitnn_core::protocol::{
    decode_frame, tensor_message, LabelPolicy, TensorMode, MAX_FRAME_LEN,
};
use splitnn_core::tensor::Tensor;

fn standin_net(seed: u64) -> NetworkTopology {
    let topo = NetworkTopology::chain(vec![
        LayerSpec::fully_connected(784, 128, true).unwrap(),
        LayerSpec::Relu,
        LayerSpec::fully_connected(128, 64, true).unwrap(),
        LayerSpec::Relu,
        LayerSpec::fully_connected(64, 10, true).unwrap(),
        LayerSpec::SoftmaxCrossEntropyHead,
    ])
    .unwrap();
    initialize(&topo, Initializer::xavier(seed))
}

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for &n in &[32usize, 128, 256] {
        let a = Tensor::new(vec![n, n], (0..n * n).map(|i| i as f64 * 1e-4).collect()).unwrap();
        let b = Tensor::new(vec![n, n], (0..n * n).map(|i| (i % 97) as f64).collect()).unwrap();
        group.throughput(Throughput::Elements((2 * n * n * n) as u64));
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| a.matmul(&b).unwrap())
        });
    }
    group.finish();
}

fn bench_split_step(c: &mut Criterion) {
    let net = standin_net(3);
    let mut parts = split(&net, &[1]).unwrap().into_iter();
    let mut alice = AliceState::new_head("a", parts.next().unwrap());
    let mut bob = BobState::new(parts.next().unwrap(), alice.weight_digest());
    let data = synth_dataset(10, 784, 32, 5);
    let batch = data.batches(32).remove(0);
    c.bench_function("two_agent_step_784x128x64x10_b32", |bench| {
        bench.iter(|| two_agent_step(&mut alice, &mut bob, &batch, 0.05).unwrap())
    });
}

fn bench_codec(c: &mut Criterion) {
    let t = Tensor::new(
        vec![32, 128],
        (0..32 * 128).map(|i| (i as f64).sin()).collect(),
    )
    .unwrap();
    let msg = tensor_message(LabelPolicy::Allowed, &t, None, TensorMode::Training).unwrap();
    let frame = msg.to_frame();
    let mut group = c.benchmark_group("codec");
    group.throughput(Throughput::Bytes(frame.len() as u64));
    group.bench_function("encode_tensor_32x128", |bench| {
        bench.iter(|| msg.to_frame())
    });
    group.bench_function("decode_tensor_32x128", |bench| {
        bench.iter(|| decode_frame(&frame, MAX_FRAME_LEN).unwrap())
    });
    group.finish();
}

criterion_group!(benches, bench_matmul, bench_split_step, bench_codec);
criterion_main!(benches);
