//! Classification and box-regression head, its loss, and inference-time
//! decoding with non-maximum suppression.

use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::bbox::{apply_deltas, iou_corners, BBox};
use crate::error::{Error, Result};
use crate::params::Params;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    /// Object classes `K_cls`, not counting background.
    pub classes: usize,
    pub cls_init_stddev: f64,
    pub reg_init_stddev: f64,
    /// Weight of the box term in the joint loss.
    pub reg_weight: f64,
    pub nms_iou: f64,
    pub score_threshold: f64,
    /// Normalize regression targets by training-set statistics.
    pub normalize_targets: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            classes: 3,
            cls_init_stddev: 0.01,
            reg_init_stddev: 0.001,
            reg_weight: 1.0,
            nms_iou: 0.3,
            score_threshold: 0.05,
            normalize_targets: true,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return Err(Error::Config("at least one object class is required".into()));
        }
        if !(0.0..=1.0).contains(&self.nms_iou) || !(0.0..=1.0).contains(&self.score_threshold) {
            return Err(Error::Config("nms_iou and score_threshold must lie in [0, 1]".into()));
        }
        if !(self.reg_weight >= 0.0) {
            return Err(Error::Config("reg_weight must be nonnegative".into()));
        }
        Ok(())
    }

    /// `global_dim` is zero when the classifier sees only the local feature.
    pub fn init_params<F: Element, R: Rng + ?Sized>(
        &self,
        local_dim: usize,
        global_dim: usize,
        params: &mut Params<F>,
        rng: &mut R,
    ) {
        let k = self.classes;
        params.insert(
            "head.cls.w",
            Tensor::randn([k + 1, local_dim + global_dim], self.cls_init_stddev, rng),
        );
        params.insert("head.cls.b", Tensor::zeros([k + 1]));
        params.insert("head.reg.w", Tensor::randn([4 * k, local_dim], self.reg_init_stddev, rng));
        params.insert("head.reg.b", Tensor::zeros([4 * k]));
    }
}

/// Raw class scores `[R × (K_cls + 1)]` from `[F_L, F_G]`; `F_G` is shared by
/// every row.
pub fn classify<F: Element>(graph: &mut Graph<F>, params: &Params<F>, f_l: Var, f_g: Option<Var>) -> Result<Var> {
    let rows = graph.value(f_l).rows();
    let input = match f_g {
        Some(g) => {
            let tiled = graph.repeat_rows(g, rows)?;
            graph.concat_cols(&[f_l, tiled])?
        }
        None => f_l,
    };
    let w = params.leaf(graph, "head.cls.w")?;
    let b = params.leaf(graph, "head.cls.b")?;
    graph.affine(input, w, b)
}

/// Per-class deltas `[R × 4·K_cls]` from `F_L` alone.
pub fn regress<F: Element>(graph: &mut Graph<F>, params: &Params<F>, f_l: Var) -> Result<Var> {
    let w = params.leaf(graph, "head.reg.w")?;
    let b = params.leaf(graph, "head.reg.b")?;
    graph.affine(f_l, w, b)
}

pub fn smooth_l1(x: f64) -> f64 {
    crate::autodiff::smooth_l1_value(x)
}

/// Label and (possibly normalized) regression target of one RoI.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiTarget {
    pub label: usize,
    pub target: [f64; 4],
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub cls: Var,
    pub reg: Var,
}

/// `J = mean_r CE(scores_r, g_r) + weight · Σ_{g_r ≥ 1} smoothL1(deltas_r,g − t_r) / R`.
pub fn multitask_loss<F: Element>(
    graph: &mut Graph<F>,
    scores: Var,
    deltas: Var,
    targets: &[RoiTarget],
    reg_weight: f64,
) -> Result<LossParts> {
    let labels: Vec<usize> = targets.iter().map(|t| t.label).collect();
    let cls = graph.cross_entropy(scores, &labels)?;
    let tgt: Vec<[F; 4]> = targets.iter().map(|t| t.target.map(F::from_f64)).collect();
    let norm = F::from_f64(targets.len() as f64);
    let reg = graph.smooth_l1(deltas, &labels, &tgt, norm)?;
    let weighted = graph.scale(reg, F::from_f64(reg_weight))?;
    let total = graph.add(cls, weighted)?;
    Ok(LossParts { total, cls, reg })
}

/// Per-coordinate mean and standard deviation of regression targets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetStats {
    pub mean: [f64; 4],
    pub std: [f64; 4],
}

impl Default for TargetStats {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl TargetStats {
    pub const IDENTITY: Self = Self {
        mean: [0.0; 4],
        std: [1.0; 4],
    };

    /// Statistics of a target collection; degenerate spreads fall back to 1.
    pub fn from_targets(targets: &[[f64; 4]]) -> Self {
        if targets.is_empty() {
            return Self::IDENTITY;
        }
        let n = targets.len() as f64;
        let mut mean = [0.0; 4];
        for t in targets {
            for c in 0..4 {
                mean[c] += t[c];
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut std = [0.0; 4];
        for t in targets {
            for c in 0..4 {
                std[c] += (t[c] - mean[c]).powi(2);
            }
        }
        for s in &mut std {
            *s = (*s / n).sqrt();
            if !(*s > 1e-8) {
                *s = 1.0;
            }
        }
        Self { mean, std }
    }

    pub fn normalize(&self, t: &[f64; 4]) -> [f64; 4] {
        std::array::from_fn(|c| (t[c] - self.mean[c]) / self.std[c])
    }

    pub fn denormalize(&self, t: &[f64; 4]) -> [f64; 4] {
        std::array::from_fn(|c| t[c] * self.std[c] + self.mean[c])
    }
}

/// One scored, class-labelled box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: usize,
    pub class_id: usize,
    pub score: f64,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
}

/// Greedy suppression: highest score first (ties keep input order); a
/// detection survives iff its IoU with every survivor is below `iou_thr`.
pub fn nms(dets: &[Detection], iou_thr: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = &dets[i];
        if kept.iter().all(|k| iou_corners(&k.bbox, &d.bbox) < iou_thr) {
            kept.push(d.clone());
        }
    }
    kept
}

/// Turns class probabilities `[R × (K+1)]` and normalized deltas
/// `[R × 4K]` into per-class NMS-filtered detections, clipped to the image.
#[allow(clippy::too_many_arguments)]
pub fn decode_detections(
    image_id: usize,
    proposals: &[BBox],
    probs: &[f64],
    deltas: &[f64],
    stats: &TargetStats,
    image_size: (usize, usize),
    cfg: &HeadConfig,
) -> Result<Vec<Detection>> {
    let k = cfg.classes;
    let r = proposals.len();
    if probs.len() != r * (k + 1) || deltas.len() != r * 4 * k {
        return Err(Error::Contract(format!(
            "decode: {r} proposals with {} probabilities and {} deltas",
            probs.len(),
            deltas.len()
        )));
    }
    let (w, h) = (image_size.0 as f64, image_size.1 as f64);
    let mut out = Vec::new();
    for class in 1..=k {
        let mut cands = Vec::new();
        for (i, p) in proposals.iter().enumerate() {
            let score = probs[i * (k + 1) + class];
            if score < cfg.score_threshold {
                continue;
            }
            let off = i * 4 * k + 4 * (class - 1);
            let raw = [deltas[off], deltas[off + 1], deltas[off + 2], deltas[off + 3]];
            let t = stats.denormalize(&raw);
            let Some(b) = apply_deltas(p, &t).clip(w, h) else {
                continue;
            };
            cands.push(Detection {
                image_id,
                class_id: class,
                score,
                bbox: b.corners(),
            });
        }
        out.extend(nms(&cands, cfg.nms_iou));
    }
    Ok(out)
}

pub fn write_detections<W: Write>(mut w: W, dets: &[Detection]) -> Result<()> {
    for d in dets {
        serde_json::to_writer(&mut w, d)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_detections<R: BufRead>(r: R) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(score: f64, bbox: [f64; 4]) -> Detection {
        Detection {
            image_id: 0,
            class_id: 1,
            score,
            bbox,
        }
    }

    #[test]
    fn smooth_l1_pieces() {
        assert_eq!(smooth_l1(0.0), 0.0);
        assert_eq!(smooth_l1(1.0), 0.5);
        assert_eq!(smooth_l1(2.0), 1.5);
        assert_eq!(smooth_l1(-2.0), 1.5);
    }

    #[test]
    fn nms_hand_cases() {
        // IoU 0.8: 10×10 vs 10×8 inside it
        let a = det(0.9, [0.0, 0.0, 10.0, 10.0]);
        let b = det(0.8, [0.0, 0.0, 10.0, 8.0]);
        assert_eq!(nms(&[b.clone(), a.clone()], 0.3), vec![a.clone()]);
        let c = det(0.5, [20.0, 20.0, 30.0, 30.0]);
        assert_eq!(nms(&[a.clone(), c.clone()], 0.3).len(), 2);
    }

    #[test]
    fn nms_ties_keep_input_order() {
        let a = det(0.5, [0.0, 0.0, 10.0, 10.0]);
        let b = det(0.5, [1.0, 0.0, 11.0, 10.0]);
        assert_eq!(nms(&[a.clone(), b.clone()], 0.3), vec![a]);
        assert_eq!(nms(&[b.clone(), det(0.5, [0.0, 0.0, 10.0, 10.0])], 0.3), vec![b]);
    }

    #[test]
    fn uniform_scores_give_ln_classes() {
        let mut g = Graph::<f64>::new();
        let s = g.constant(Tensor::zeros([1, 4])).unwrap();
        let d = g.constant(Tensor::zeros([1, 12])).unwrap();
        let t = [RoiTarget {
            label: 2,
            target: [0.0; 4],
        }];
        let parts = multitask_loss(&mut g, s, d, &t, 1.0).unwrap();
        assert!((g.values(parts.cls)[0] - 4f64.ln()).abs() < 1e-15);
        assert_eq!(g.values(parts.reg)[0], 0.0);
    }

    #[test]
    fn background_loss_is_classification_only() {
        let mut g = Graph::<f64>::new();
        let s = g.constant(Tensor::from_f64s([1, 4], &[0.3, -1.0, 2.0, 0.1]).unwrap()).unwrap();
        let d = g.variable(Tensor::full([1, 12], 5.0)).unwrap();
        let t = [RoiTarget {
            label: 0,
            target: [1.0; 4],
        }];
        let parts = multitask_loss(&mut g, s, d, &t, 1.0).unwrap();
        assert_eq!(g.values(parts.total), g.values(parts.cls));
        g.backward(parts.total).unwrap();
        assert!(g.grad_or_zero(d).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn target_stats_round_trip() {
        let ts = [[0.1, -0.2, 0.3, 0.0], [0.3, 0.2, -0.1, 0.0], [-0.1, 0.0, 0.4, 0.0]];
        let s = TargetStats::from_targets(&ts);
        assert_eq!(s.std[3], 1.0);
        for t in &ts {
            let back = s.denormalize(&s.normalize(t));
            for c in 0..4 {
                assert!((back[c] - t[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn detections_jsonl_round_trip() {
        let dets = vec![det(0.75, [1.0, 2.0, 3.5, 4.0]), det(0.25, [0.0, 0.0, 1.0, 1.0])];
        let mut buf = Vec::new();
        write_detections(&mut buf, &dets).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.lines().next().unwrap().contains("\"box\":[1.0,2.0,3.5,4.0]"));
        assert_eq!(read_detections(buf.as_slice()).unwrap(), dets);
    }

    #[test]
    fn decode_filters_and_suppresses() {
        let cfg = HeadConfig {
            classes: 1,
            ..HeadConfig::default()
        };
        let props = [
            BBox::from_corners([0.0, 0.0, 10.0, 10.0]).unwrap(),
            BBox::from_corners([0.0, 0.0, 10.0, 9.0]).unwrap(),
            BBox::from_corners([50.0, 50.0, 60.0, 60.0]).unwrap(),
        ];
        let probs = [0.1, 0.9, 0.2, 0.8, 0.98, 0.02];
        let deltas = [0.0; 12];
        let dets = decode_detections(7, &props, &probs, &deltas, &TargetStats::IDENTITY, (64, 64), &cfg).unwrap();
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].score, 0.9);
        assert_eq!(dets[0].image_id, 7);
    }
}
