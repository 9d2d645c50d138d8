use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use msmvd::geometry::{build_sampling_grid, BevGridSpec};
use msmvd::metrics::{hungarian, match_frame};
use msmvd::network::{BackboneConfig, Conv, ConvSpec, Ctx, Model, NetworkConfig, ProjectionTables};
use msmvd::scenegen::{place_cameras, SceneSpec};
use msmvd::tensor::{Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::<f32>::new();
    let conv = Conv::new(&mut store, "bench", ConvSpec::new(32, 32, 3).norm(true), &mut rng);
    let x = Tensor::from_vec(&[1, 32, 64, 64], (0..32 * 64 * 64).map(|_| rng.random_range(-1.0f32..1.0)).collect());
    c.bench_function("conv3x3_gn_relu 32ch 64x64 fwd+bwd", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let y = {
                let mut cx = Ctx::new(&mut g, &store);
                let xv = cx.g.input(x.clone(), false);
                let y = conv.forward_relu(&mut cx, xv);
                cx.g.sum_all(y)
            };
            black_box(g.backward(y));
        })
    });
}

fn sampling(c: &mut Criterion) {
    let spec = SceneSpec { region: (12.0, 36.0), cell_size: 0.025, image_size: (720, 1280), ..SceneSpec::default() };
    let grid: BevGridSpec = spec.grid();
    let calibs = place_cameras(&spec).unwrap();
    c.bench_function("sampling grid 480x1440 level 3, one height", |b| {
        b.iter(|| black_box(build_sampling_grid(&calibs[0], 3, 0, &grid).unwrap()))
    });
    let pairs = NetworkConfig::default().projection_pairs();
    c.bench_function("projection tables 4 views x 3 levels x 5 heights", |b| {
        b.iter(|| black_box(ProjectionTables::<f32>::build(&calibs, &grid, &pairs).unwrap()))
    });
}

fn matching(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for n in [6usize, 50] {
        let cost: Vec<f64> = (0..n * n).map(|_| rng.random_range(0.0..1.0)).collect();
        c.bench_function(&format!("hungarian {n}x{n}"), |b| b.iter(|| black_box(hungarian(&cost, n))));
    }
    let pts = |rng: &mut ChaCha8Rng| -> Vec<[f64; 2]> {
        (0..40).map(|_| [rng.random_range(0.0..12.0), rng.random_range(0.0..36.0)]).collect()
    };
    let (dets, gts) = (pts(&mut rng), pts(&mut rng));
    c.bench_function("match_frame 40 vs 40", |b| b.iter(|| black_box(match_frame(&dets, &gts, 0.5))));
}

fn forward(c: &mut Criterion) {
    let spec = SceneSpec { region: (8.0, 8.0), image_size: (96, 128), ..SceneSpec::default() };
    let grid = spec.grid();
    let calibs = place_cameras(&spec).unwrap();
    let cfg = NetworkConfig { backbone: BackboneConfig::small(), channels: 32, ..NetworkConfig::default() };
    let (model, store) = Model::new::<f32>(&cfg).unwrap();
    let tables = ProjectionTables::build(&calibs, &grid, &cfg.projection_pairs()).unwrap();
    let images: Vec<Tensor<f32>> = (0..calibs.len()).map(|_| Tensor::full(&[3, 96, 128], 0.5)).collect();
    let mut group = c.benchmark_group("model");
    group.sample_size(10);
    group.bench_function("small model forward, 4 views 96x128, 80x80 grid", |b| {
        b.iter(|| black_box(model.predict(&store, &images, &tables).unwrap()))
    });
    group.finish();
}

criterion_group!(benches, conv, sampling, matching, forward);
criterion_main!(benches);
