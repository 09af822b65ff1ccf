use std::hint::black_box;

use accnn_bench::{model_fixture, random_detections};
use accnn_core::eval::{mean_ap, ApMode, GtRecord};
use accnn_core::head::{multitask_loss, nms, RoiTarget};
use accnn_core::model::forward;
use accnn_core::runner::detect;
use accnn_core::synth::{generate_image, SceneSpec, CLASS_NAMES};
use accnn_core::Graph;
use criterion::{criterion_group, criterion_main, Criterion};

fn training_step(c: &mut Criterion) {
    let (cfg, sample, mut params) = model_fixture(1);
    let rois = sample.proposals[..64].to_vec();
    let targets: Vec<RoiTarget> = rois
        .iter()
        .enumerate()
        .map(|(i, _)| RoiTarget {
            label: i % 4,
            target: [0.1, -0.1, 0.05, 0.0],
        })
        .collect();
    c.bench_function("forward_backward_64_rois", |b| {
        b.iter(|| {
            let mut g = Graph::<f32>::new();
            let out = forward(&mut g, &params, &cfg.model, sample.image.to_tensor(), &rois).unwrap();
            let loss = multitask_loss(&mut g, out.scores, out.deltas, &targets, 1.0).unwrap();
            g.backward(loss.total).unwrap();
            params.zero_grad();
            params.accumulate_grads(&g).unwrap();
        })
    });
}

fn inference(c: &mut Criterion) {
    let (cfg, sample, params) = model_fixture(2);
    let stats = accnn_core::head::TargetStats::IDENTITY;
    c.bench_function("detect_200_proposals", |b| {
        b.iter(|| black_box(detect(&params, &stats, &cfg.model, &sample, 0).unwrap()))
    });
}

fn postprocessing(c: &mut Criterion) {
    let dets = random_detections(2000, 3);
    c.bench_function("nms_2000", |b| b.iter(|| black_box(nms(&dets, 0.3))));
    let gts: Vec<GtRecord> = random_detections(300, 4)
        .into_iter()
        .map(|d| GtRecord {
            image_id: d.image_id,
            class_id: d.class_id,
            bbox: d.bbox,
        })
        .collect();
    c.bench_function("mean_ap_2000_dets", |b| {
        b.iter(|| black_box(mean_ap(&dets, &gts, &CLASS_NAMES, 0.5, ApMode::AllPoints)))
    });
}

fn generation(c: &mut Criterion) {
    let spec = SceneSpec::default();
    let mut seed = 0u64;
    c.bench_function("generate_image", |b| {
        b.iter(|| {
            seed += 1;
            black_box(generate_image(seed, &spec).unwrap())
        })
    });
}


criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = training_step, inference, postprocessing, generation
}
criterion_main!(benches);
