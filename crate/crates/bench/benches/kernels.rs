use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cwseg_core::data::{generate_synthetic, ImageId, SynthConfig};
use cwseg_core::geometry::{enumerate_pairs, sample_patch_group, Window};
use cwseg_core::losses::{bcc_group_loss, MaskMode};
use cwseg_core::model::{backward, forward, init_params, ModelArch};
use cwseg_core::reliability::reliability_score;
use cwseg_core::Grid;

fn setup(rf: usize) -> (cwseg_core::model::ModelParams, cwseg_core::Image) {
    let arch = ModelArch::new(rf, 12, 5).unwrap();
    let params = init_params(arch, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let cfg = SynthConfig {
        n_images: 1,
        ..SynthConfig::default()
    };
    let image = generate_synthetic(&cfg, 1).unwrap().items.remove(0).image;
    (params, image)
}

fn model(c: &mut Criterion) {
    let mut g = c.benchmark_group("model");
    for rf in [1, 3] {
        let (params, image) = setup(rf);
        let win = Window::new(0, 0, 32, 32).unwrap();
        g.bench_with_input(BenchmarkId::new("forward_32x32", rf), &rf, |b, _| {
            b.iter(|| forward(&params, &image, &win).unwrap())
        });
        let upstream = Grid::filled(32, 32, 5, 0.01f64);
        g.bench_with_input(BenchmarkId::new("backward_32x32", rf), &rf, |b, _| {
            b.iter(|| backward(&params, &image, &win, &upstream).unwrap())
        });
    }
    g.finish();
}

fn consistency(c: &mut Criterion) {
    let (params, image) = setup(3);
    let group = sample_patch_group(ImageId(0), 64, 64, 32, 16, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let pairs = enumerate_pairs(&group, 6).unwrap();
    let confs = group.windows.map(|w| forward(&params, &image, &w).unwrap());
    c.bench_function("bcc_group_loss_6_pairs", |b| {
        b.iter(|| bcc_group_loss(&confs, &pairs, MaskMode::Importance).unwrap())
    });
    c.bench_function("reliability_score_64x64", |b| {
        b.iter(|| reliability_score(&params, &image, &group).unwrap())
    });
}

criterion_group!(benches, model, consistency);
criterion_main!(benches);
