//! Rayon pool vs one worker on the three data-parallel hot paths. Build with
//! `--no-default-features` to measure the plain sequential code instead.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::Rng;
use rand_distr::StandardNormal;

use partsmine::cam::{make_label_map, ProbStack, DEFAULT_SIGMA_C};
use partsmine::crf::{mean_field_step, unary_from_labels, CrfParams};
use partsmine::encoder::{evaluate, Aggregation, LossConfig, LstmObjective, PatchSequence, SequenceDataset, StackedLstm};
use partsmine::feature::FeatureVec;
use partsmine::geometry::BBox;
use partsmine::image::Image;
use partsmine::par;
use partsmine::parts::{brute_force_search, SearchConfig};
use partsmine::proposal::Proposal;
use partsmine::rng::{stream, StreamRng};

fn pools() -> [(&'static str, usize); 2] {
    [("pool", std::thread::available_parallelism().map_or(1, |n| n.get())), ("one_thread", 1)]
}

fn normal(rng: &mut StreamRng) -> f64 {
    rng.sample(StandardNormal)
}

fn crf_step(c: &mut Criterion) {
    let mut rng = stream(1, "bench/crf");
    let (h, w) = (48, 48);
    let inst: Vec<Vec<f64>> = (0..3).map(|_| (0..h * w).map(|_| rng.random_range(0.0..0.5)).collect()).collect();
    let stack = ProbStack::from_instances(h, w, inst).unwrap();
    let mut img = Image::filled(h, w, [0.0; 3]);
    for y in 0..h {
        for x in 0..w {
            img.pixel_mut(y, x).copy_from_slice(&[rng.random_range(0.0..255.0), 128.0, 64.0]);
        }
    }
    let params = CrfParams::default();
    let unary = unary_from_labels(&make_label_map(&stack, DEFAULT_SIGMA_C), &stack, &params).unwrap();
    let mut group = c.benchmark_group("crf_mean_field_step_48x48");
    for (name, threads) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| par::with_threads(threads, || mean_field_step(&unary, black_box(&unary), &img, &params).unwrap()))
        });
    }
    group.finish();
}

fn brute_force(c: &mut Criterion) {
    let mut rng = stream(2, "bench/parts");
    let prop = |rng: &mut StreamRng, s: f64| {
        let b = BBox::new(50.0 + 10.0 * normal(rng), 50.0 + 10.0 * normal(rng), s, s).unwrap();
        let f = FeatureVec::new((0..16).map(|_| normal(rng)).collect()).unwrap();
        Proposal::new(b, rng.random_range(0.0..1.0), 0, f).unwrap()
    };
    let root = prop(&mut rng, 60.0);
    let cands: Vec<Proposal> = (0..16).map(|_| prop(&mut rng, 20.0)).collect();
    let cfg = SearchConfig::with_parts(4).unwrap();
    let mut group = c.benchmark_group("brute_force_k16_n4");
    for (name, threads) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| par::with_threads(threads, || brute_force_search(&root, black_box(&cands), &cfg).unwrap()))
        });
    }
    group.finish();
}

fn batch_eval(c: &mut Criterion) {
    let mut rng = stream(3, "bench/encoder");
    let (dim, steps) = (15, 7);
    let items: Vec<PatchSequence> = (0..200)
        .map(|_| PatchSequence::new((0..steps).map(|_| FeatureVec::new((0..dim).map(|_| normal(&mut rng)).collect()).unwrap()).collect()).unwrap())
        .collect();
    let labels = (0..200).map(|i| i % 4).collect();
    let data = SequenceDataset::new(4, items, labels).unwrap();
    let model = LstmObjective {
        net: StackedLstm::init(dim, 32, 4, &mut rng).unwrap(),
        loss: LossConfig::Multi,
        aggregation: Aggregation::WholeImage,
    };
    let mut group = c.benchmark_group("lstm_eval_200x7_hidden32");
    for (name, threads) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| par::with_threads(threads, || evaluate(&model, black_box(&data)).unwrap()))
        });
    }
    group.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = crf_step, brute_force, batch_eval
}
criterion_main!(benches);
