//! Forward-pass throughput: rayon data-parallel kernels vs the sequential
//! path.
//!
//! With the default `parallel` feature the same workload runs inside rayon
//! pools of one thread and of every available core; results are bit-identical
//! because each worker owns a disjoint output chunk with a fixed accumulation
//! order. Build with `--no-default-features` to measure the plain sequential
//! fallback (no pool at all).

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use visafe_core::blocks::{Block, EmaConfig, GhostConvConfig};
use visafe_core::detector::{build_detector, detect, DetectorConfig, DetectorVariant};
use visafe_core::graph::exec::{forward, Mode};
use visafe_core::Tensor;

fn bench_workloads(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let ghost = Block::ghost_conv(&GhostConvConfig::new(32, 64, 3, 1), true, &mut rng).unwrap();
    let ghost_x = Tensor::randn([1, 32, 64, 64], 1.0, &mut rng);

    let ema = Block::ema(&EmaConfig { channels: 64, groups: 8 }, &mut rng).unwrap();
    let ema_x = Tensor::randn([1, 64, 32, 32], 1.0, &mut rng);

    let det_cfg = DetectorConfig { input_size: 96, ..Default::default() };
    let det = build_detector(&det_cfg, DetectorVariant::GHOST_EMA, &mut rng).unwrap();
    let frame = Tensor::rand_uniform([1, 3, 128, 128], 0.0, 1.0, &mut rng);

    #[cfg(feature = "parallel")]
    let pools: Vec<(String, rayon::ThreadPool)> = {
        let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
        let mut sizes = vec![1usize];
        if cores > 1 {
            sizes.push(cores);
        }
        sizes
            .into_iter()
            .map(|n| {
                (
                    format!("{n}-thread"),
                    rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap(),
                )
            })
            .collect()
    };

    macro_rules! run_in_modes {
        ($group:expr, $name:expr, $body:expr) => {{
            #[cfg(feature = "parallel")]
            for (label, pool) in &pools {
                $group.bench_with_input(BenchmarkId::new($name, label), &(), |b, _| {
                    pool.install(|| b.iter($body));
                });
            }
            #[cfg(not(feature = "parallel"))]
            $group.bench_with_input(BenchmarkId::new($name, "sequential"), &(), |b, _| {
                b.iter($body)
            });
        }};
    }

    let mut group = c.benchmark_group("forward");
    group.throughput(Throughput::Elements(ghost_x.numel() as u64));
    run_in_modes!(group, "ghost_conv_32to64_64px", || ghost.forward(&ghost_x).unwrap());
    group.throughput(Throughput::Elements(ema_x.numel() as u64));
    run_in_modes!(group, "ema_64c_g8_32px", || ema.forward(&ema_x).unwrap());
    group.throughput(Throughput::Elements(frame.numel() as u64));
    run_in_modes!(group, "detector_full_128px_frame", || {
        detect(&frame, &det, &det_cfg, 0).unwrap()
    });
    group.finish();

    let mut group = c.benchmark_group("training_step");
    let small = Tensor::randn([2, 3, 96, 96], 1.0, &mut rng);
    run_in_modes!(group, "detector_fwd_bwd", || {
        let acts = forward(&det, &small, Mode::Train).unwrap();
        let sink = det.index_of(visafe_core::detector::SCORE_LAYER).unwrap();
        let seed = Tensor::filled(acts.out(sink).shape(), 1.0);
        visafe_core::graph::exec::backward(&det, &acts, vec![(sink, seed)]).unwrap()
    });
    group.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_workloads
}
criterion_main!(benches);
