#![allow(dead_code)]

use accnn_core::backbone::{BackboneConfig, FeatureCube};
use accnn_core::global_attention::GlobalConfig;
use accnn_core::head::HeadConfig;
use accnn_core::local_context::LocalContextConfig;
use accnn_core::model::{ModelConfig, Variant};
use accnn_core::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn tensor(shape: &[usize], values: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), values).unwrap()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    tensor(shape, uniform(rng, n, -1.0, 1.0))
}

/// Cube node with distinct random values, so max-pool arg-maxes are stable
/// under small perturbations.
pub fn random_cube(graph: &mut Graph<f64>, rng: &mut ChaCha8Rng, h: usize, w: usize, d: usize, stride: usize) -> FeatureCube {
    let t = random_tensor(rng, &[h, w, d]);
    let v = graph.variable(t).unwrap();
    FeatureCube::from_var(graph, v, stride).unwrap()
}

/// Splits a flat `[n]` variable into consecutive pieces of the given shapes.
pub fn split(graph: &mut Graph<f64>, x: Var, shapes: &[&[usize]]) -> Vec<Var> {
    let total = graph.value(x).numel();
    let row = graph.reshape(x, &[1, total]).unwrap();
    let mut out = Vec::new();
    let mut at = 0;
    for s in shapes {
        let n: usize = s.iter().product();
        let piece = graph.slice_cols(row, at, n).unwrap();
        out.push(graph.reshape(piece, s).unwrap());
        at += n;
    }
    assert_eq!(at, total, "split shapes do not cover the input");
    out
}

/// `Σ x ⊙ r` for a fixed random `r`, turning any node into a generic scalar.
pub fn weighted_sum(graph: &mut Graph<f64>, x: Var, seed: u64) -> Var {
    let shape = graph.shape(x).to_vec();
    let r = random_tensor(&mut rng(seed), &shape);
    let c = graph.constant(r).unwrap();
    let p = graph.mul(x, c).unwrap();
    graph.sum(p).unwrap()
}

/// Small model that keeps every branch but runs in milliseconds.
pub fn small_model(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        backbone: BackboneConfig {
            widths: vec![4, 6],
            kernel: 3,
            stride: 4,
            init_stddev: None,
        },
        local: LocalContextConfig {
            scales: vec![0.8, 1.2, 1.8],
            pool_size: 3,
            reduced_depth: Some(4),
            fc_dims: [8, 8],
            fc_init_stddev: 0.3,
            ..LocalContextConfig::default()
        },
        global: GlobalConfig {
            grid: 3,
            steps: 2,
            hidden: Some(4),
            layers: 2,
            init_hidden: Some(4),
            fc_dims: [6, 6],
            init_stddev: Some(0.3),
            ..GlobalConfig::default()
        },
        head: HeadConfig {
            cls_init_stddev: 0.3,
            reg_init_stddev: 0.3,
            ..HeadConfig::default()
        },
    }
}

/// Outcome of one detection in an enumerated evaluation case.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Hit {
    /// Overlaps nothing.
    Miss,
    /// Exact box of ground truth `j`.
    On(usize),
    /// Overlaps ground truth `j` below the matching threshold.
    Near(usize),
}

/// Brute-force AP over detections already sorted by descending score.
/// Every cut-off `k` of the ranking is re-scored from scratch, and recall
/// levels are compared as integer ratios.
pub fn brute_force_ap(hits: &[Hit], n_gt: usize, eleven_point: bool) -> f64 {
    // (true positives, detections) at each cut-off
    let mut cuts = Vec::new();
    for k in 1..=hits.len() {
        let mut claimed = vec![false; n_gt];
        let mut tp = 0u64;
        for h in &hits[..k] {
            if let Hit::On(j) = *h {
                if !claimed[j] {
                    claimed[j] = true;
                    tp += 1;
                }
            }
        }
        cuts.push((tp, k as u64));
    }
    let n = n_gt as u64;
    // best precision among cut-offs whose recall tp/n reaches num/den
    let best = |num: u64, den: u64| -> f64 {
        cuts.iter()
            .filter(|(tp, _)| tp * den >= num * n)
            .map(|&(tp, k)| tp as f64 / k as f64)
            .fold(0.0, f64::max)
    };
    if eleven_point {
        (0..=10u64).map(|t| best(t, 10)).sum::<f64>() / 11.0
    } else {
        (1..=n).map(|i| best(i, n)).sum::<f64>() / n as f64
    }
}

/// Central finite-difference check of the gradients a scalar graph
/// function sends to the named parameters. Same error measure as
/// `grad_check`.
pub fn param_grad_check<Fun>(params: &accnn_core::Params<f64>, names: &[&str], f: Fun) -> f64
where
    Fun: Fn(&mut Graph<f64>, &accnn_core::Params<f64>) -> Var,
{
    const EPS: f64 = 1e-5;
    let mut p = params.clone();
    let mut g = Graph::new();
    let y = f(&mut g, &p);
    g.backward(y).unwrap();
    p.zero_grad();
    p.accumulate_grads(&g).unwrap();
    let eval = |q: &accnn_core::Params<f64>| {
        let mut g = Graph::new();
        let y = f(&mut g, q);
        g.values(y)[0]
    };
    let mut worst = 0.0f64;
    for name in names {
        let t = p.get(name).unwrap_or_else(|| panic!("no parameter {name}"));
        let analytic = t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]);
        for (i, &a) in analytic.iter().enumerate() {
            let mut plus = params.clone();
            let mut minus = params.clone();
            plus.get_mut(name).unwrap().values_mut()[i] += EPS;
            minus.get_mut(name).unwrap().values_mut()[i] -= EPS;
            let step = plus.get(name).unwrap().values()[i] - minus.get(name).unwrap().values()[i];
            let fd = (eval(&plus) - eval(&minus)) / step;
            worst = worst.max((a - fd).abs() / (a.abs() + fd.abs()).max(1e-8));
        }
    }
    worst
}
