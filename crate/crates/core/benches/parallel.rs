//! Rayon backend against the sequential fallback on the two data-parallel hot
//! paths: a guided candidate batch and a batched U-Net forward/backward pass.
//!
//! `cargo bench --bench parallel` measures the rayon build (and the same build
//! pinned to one worker); `cargo bench --bench parallel --no-default-features`
//! measures the sequential build under the same benchmark names.

use std::collections::BTreeMap;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pixguide::autodiff::Graph;
use pixguide::classifier::{ClassifierBank, PixelClassifier};
use pixguide::diffusion::ScheduleConfig;
use pixguide::edit::{guided_sample, GuidanceParams, SamplerOptions, Selection};
use pixguide::par::is_parallel;
use pixguide::scene::default_palette;
use pixguide::segmap::{RoiMask, SegMap};
use pixguide::unet::{DiffusionModel, UNet, UNetConfig};
use pixguide::Tensor;

fn fixture() -> (DiffusionModel, ClassifierBank) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = UNetConfig {
        image_size: 16,
        channels: 3,
        base_width: 8,
        channel_mult: vec![1, 2],
        decoder_block_ids: vec![0, 1],
        time_embed_dim: 16,
        groups: 4,
    };
    let model = DiffusionModel {
        net: UNet::new(cfg, &mut rng).unwrap(),
        sched: ScheduleConfig::linear(100).build().unwrap(),
    };
    let d = model.net.cfg.feature_dim();
    let k = default_palette().len();
    let mut per_t = BTreeMap::new();
    per_t.insert(50, PixelClassifier::new(d, [16, 8], k, &mut rng).unwrap());
    let bank = ClassifierBank {
        per_t,
        multi: PixelClassifier::new(d, [16, 8], k, &mut rng).unwrap(),
        multi_steps: vec![50],
        palette: default_palette(),
    };
    (model, bank)
}

/// Runs `f` on `pool` when given, else on the caller's thread.
fn on<T: Send>(pool: Option<&rayon::ThreadPool>, f: impl FnOnce() -> T + Send) -> T {
    match pool {
        Some(p) => p.install(f),
        None => f(),
    }
}

fn workloads(c: &mut Criterion, label: &str, pool: Option<&rayon::ThreadPool>) {
    let (model, bank) = fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x0 = Tensor::uniform([1, 3, 16, 16], -1.0, 1.0, &mut rng);
    let y = SegMap::new(
        16,
        16,
        (0..256).map(|p| ((p / 16) % 3) as u8).collect(),
        default_palette(),
    )
    .unwrap();
    let m = RoiMask::new(
        16,
        16,
        (0..256).map(|p| (4..12).contains(&(p / 16))).collect(),
    )
    .unwrap();
    let params = GuidanceParams {
        t0: 40,
        s: 10.0,
        n_steps: 10,
        batch: 4,
        seed: 0,
    };
    let opts = SamplerOptions::default();
    c.benchmark_group("guided_batch4")
        .sample_size(10)
        .bench_function(label, |b| {
            b.iter(|| {
                on(pool, || {
                    guided_sample(
                        &x0,
                        &y,
                        &m,
                        &params,
                        &model,
                        &bank,
                        &opts,
                        Selection::Quantitative,
                        &(),
                    )
                    .unwrap()
                })
            })
        });

    let xb = Tensor::uniform([8, 3, 16, 16], -1.0, 1.0, &mut rng);
    let ts = vec![30; 8];
    c.benchmark_group("unet_fwd_bwd_batch8")
        .sample_size(10)
        .bench_function(label, |b| {
            b.iter(|| {
                on(pool, || {
                    let mut g = Graph::new();
                    let xv = g.variable(xb.clone());
                    let out = model.net.forward(&mut g, xv, &ts, false).unwrap();
                    let loss = g.mean(out.eps).unwrap();
                    g.gradient(loss, xv).unwrap()
                })
            })
        });
}

fn bench(c: &mut Criterion) {
    if is_parallel() {
        workloads(c, "rayon", None);
        let one = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        workloads(c, "rayon_1_thread", Some(&one));
    } else {
        workloads(c, "sequential", None);
    }
}

criterion_group!(benches, bench);
criterion_main!(benches);
