//! Multi-scale local context branch.
//!
//! Each proposal is cropped from the feature cube at several scales around
//! its center, max-pooled to `P × P`, L2-normalized with a learnable
//! per-channel scale, concatenated along channels, reduced by a 1×1
//! convolution and passed through two ReLU fully-connected layers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::backbone::FeatureCube;
use crate::bbox::{scale_box, BBox};
use crate::error::{Error, Result};
use crate::params::Params;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalContextConfig {
    pub scales: Vec<f64>,
    pub pool_size: usize,
    /// Channels after the 1×1 reduction; `None` keeps the cube depth.
    pub reduced_depth: Option<usize>,
    pub fc_dims: [usize; 2],
    pub norm_scale_init: f64,
    pub fc_init_stddev: f64,
}

impl Default for LocalContextConfig {
    fn default() -> Self {
        Self {
            scales: vec![0.8, 1.2, 1.8],
            pool_size: 7,
            reduced_depth: None,
            fc_dims: [256, 256],
            norm_scale_init: 1.0,
            fc_init_stddev: 0.01,
        }
    }
}

impl LocalContextConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::Config("at least one local scale is required".into()));
        }
        if self.scales.iter().any(|&s| !(s > 0.0)) || self.scales.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "local scales must be positive and strictly increasing, got {:?}",
                self.scales
            )));
        }
        if self.pool_size == 0 || self.fc_dims.contains(&0) || self.reduced_depth == Some(0) {
            return Err(Error::Config("local pool size and widths must be positive".into()));
        }
        Ok(())
    }

    pub fn reduced(&self, depth: usize) -> usize {
        self.reduced_depth.unwrap_or(depth)
    }

    pub fn output_dim(&self) -> usize {
        self.fc_dims[1]
    }

    pub fn init_params<F: Element, R: Rng + ?Sized>(
        &self,
        depth: usize,
        params: &mut Params<F>,
        rng: &mut R,
    ) {
        let reduced = self.reduced(depth);
        let n = self.scales.len();
        let std = self.fc_init_stddev;
        for i in 0..n {
            params.insert(
                format!("local.gamma{i}"),
                Tensor::full([depth], F::from_f64(self.norm_scale_init)),
            );
        }
        params.insert("local.reduce.w", Tensor::randn([reduced, n * depth], std, rng));
        params.insert("local.reduce.b", Tensor::zeros([reduced]));
        let flat = self.pool_size * self.pool_size * reduced;
        params.insert("local.fc1.w", Tensor::randn([self.fc_dims[0], flat], std, rng));
        params.insert("local.fc1.b", Tensor::zeros([self.fc_dims[0]]));
        params.insert("local.fc2.w", Tensor::randn([self.fc_dims[1], self.fc_dims[0]], std, rng));
        params.insert("local.fc2.b", Tensor::zeros([self.fc_dims[1]]));
    }
}

/// Feature-cell rectangle `[x0, x1) × [y0, y1)` covered by an image box.
/// Boxes thinner than a cell snap to the nearest cell.
pub fn feature_region(b: &BBox, stride: usize, height: usize, width: usize) -> [usize; 4] {
    let s = stride as f64;
    let [bx1, by1, bx2, by2] = b.corners();
    let span = |lo: f64, hi: f64, center: f64, extent: usize| -> (usize, usize) {
        let a = (lo / s).floor().max(0.0) as usize;
        let z = ((hi / s).ceil().max(0.0) as usize).min(extent);
        if z > a.min(extent) {
            (a.min(extent), z)
        } else {
            let c = ((center / s).floor().max(0.0) as usize).min(extent - 1);
            (c, c + 1)
        }
    };
    let (x0, x1) = span(bx1, bx2, b.cx, width);
    let (y0, y1) = span(by1, by2, b.cy, height);
    [x0, y0, x1, y1]
}

/// Bin `i` of `bins` over `[0, extent)`: `[floor(i·e/P), ceil((i+1)·e/P))`.
/// Never empty for `extent ≥ 1`.
pub(crate) fn bin_bounds(i: usize, bins: usize, extent: usize) -> (usize, usize) {
    (i * extent / bins, ((i + 1) * extent).div_ceil(bins))
}

/// Max-pools each box's feature region into `P × P` bins, giving
/// `[R × P × P × D]`. Gradients route to the arg-max cell of each bin.
pub fn roi_pool<F: Element>(
    graph: &mut Graph<F>,
    cube: &FeatureCube,
    boxes: &[BBox],
    pool: usize,
) -> Result<Var> {
    if boxes.is_empty() {
        return Err(Error::Contract("roi_pool needs at least one box".into()));
    }
    let (h, w, d) = (cube.height, cube.width, cube.depth);
    let vals = graph.values(cube.data);
    let mut index = Vec::with_capacity(boxes.len() * pool * pool * d);
    for b in boxes {
        let [x0, y0, x1, y1] = feature_region(b, cube.stride, h, w);
        let (rw, rh) = (x1 - x0, y1 - y0);
        for py in 0..pool {
            let (ya, yb) = bin_bounds(py, pool, rh);
            for px in 0..pool {
                let (xa, xb) = bin_bounds(px, pool, rw);
                for ch in 0..d {
                    let mut best = usize::MAX;
                    for y in y0 + ya..y0 + yb {
                        for x in x0 + xa..x0 + xb {
                            let i = (y * w + x) * d + ch;
                            if best == usize::MAX || vals[i] > vals[best] {
                                best = i;
                            }
                        }
                    }
                    index.push(best as u32);
                }
            }
        }
    }
    graph.gather(cube.data, index, &[boxes.len(), pool, pool, d])
}

/// Row-wise L2 normalization of `[R × P × P × D]` pooled features followed
/// by the learnable per-channel scale `gamma`.
pub fn l2_normalize_scale<F: Element>(graph: &mut Graph<F>, feat: Var, gamma: Var) -> Result<Var> {
    let shape = graph.shape(feat).to_vec();
    let rows = shape[0];
    let flat: usize = shape[1..].iter().product();
    let as_rows = graph.reshape(feat, &[rows, flat.max(1)])?;
    let y = graph.l2_normalize_scale(as_rows, gamma)?;
    graph.reshape(y, &shape)
}

/// Channel concatenation of per-scale `[R × P × P × D]` features followed
/// by a 1×1 reduction to `[R × P × P × D']`.
pub fn fuse_multiscale<F: Element>(graph: &mut Graph<F>, feats: &[Var], w: Var, b: Var) -> Result<Var> {
    let first = feats
        .first()
        .ok_or_else(|| Error::Contract("fuse_multiscale needs at least one input".into()))?;
    let shape = graph.shape(*first).to_vec();
    for f in feats {
        if graph.shape(*f) != shape.as_slice() {
            return Err(Error::Shape {
                op: "fuse_multiscale",
                left: shape,
                right: graph.shape(*f).to_vec(),
            });
        }
    }
    let d = *shape.last().unwrap();
    let cells: usize = shape[..shape.len() - 1].iter().product();
    let mut flat = Vec::with_capacity(feats.len());
    for &f in feats {
        flat.push(graph.reshape(f, &[cells, d])?);
    }
    let cat = graph.concat_cols(&flat)?;
    let reduced = graph.conv1x1(cat, w, b)?;
    let mut out_shape = shape;
    *out_shape.last_mut().unwrap() = graph.shape(reduced)[1];
    graph.reshape(reduced, &out_shape)
}

/// Per-proposal local feature `F_L` (`[R × fc_dims[1]]`) plus the
/// normalized per-scale pooled features that fed it.
#[derive(Clone, Debug)]
pub struct ProposalFeatures {
    pub f_l: Var,
    pub pooled: Vec<Var>,
}

pub fn local_feature<F: Element>(
    graph: &mut Graph<F>,
    params: &Params<F>,
    cube: &FeatureCube,
    boxes: &[BBox],
    image_size: (usize, usize),
    cfg: &LocalContextConfig,
) -> Result<ProposalFeatures> {
    let (image_w, image_h) = image_size;
    let mut pooled = Vec::with_capacity(cfg.scales.len());
    for (i, &lambda) in cfg.scales.iter().enumerate() {
        let scaled = boxes
            .iter()
            .map(|b| scale_box(b, lambda, image_w, image_h))
            .collect::<Result<Vec<_>>>()?;
        let raw = roi_pool(graph, cube, &scaled, cfg.pool_size)?;
        let gamma = params.leaf(graph, &format!("local.gamma{i}"))?;
        pooled.push(l2_normalize_scale(graph, raw, gamma)?);
    }
    let w = params.leaf(graph, "local.reduce.w")?;
    let b = params.leaf(graph, "local.reduce.b")?;
    let fused = fuse_multiscale(graph, &pooled, w, b)?;
    let flat_dim: usize = graph.shape(fused)[1..].iter().product();
    let flat = graph.reshape(fused, &[boxes.len(), flat_dim])?;
    let f_l = fc_relu(graph, params, flat, "local.fc1")?;
    let f_l = fc_relu(graph, params, f_l, "local.fc2")?;
    Ok(ProposalFeatures { f_l, pooled })
}

pub(crate) fn fc_relu<F: Element>(
    graph: &mut Graph<F>,
    params: &Params<F>,
    x: Var,
    prefix: &str,
) -> Result<Var> {
    let w = params.leaf(graph, &format!("{prefix}.w"))?;
    let b = params.leaf(graph, &format!("{prefix}.b"))?;
    let y = graph.affine(x, w, b)?;
    graph.relu(y)
}

/// Mean L2 norm of the raw pooled features of `boxes` at scale 1, used to
/// set the initial normalization scale so that early outputs keep the
/// amplitude of the un-normalized features.
pub fn mean_pooled_amplitude<F: Element>(
    graph: &mut Graph<F>,
    cube: &FeatureCube,
    boxes: &[BBox],
    cfg: &LocalContextConfig,
) -> Result<f64> {
    let raw = roi_pool(graph, cube, boxes, cfg.pool_size)?;
    let per_box = graph.value(raw).numel() / boxes.len();
    let total: f64 = graph
        .values(raw)
        .chunks(per_box)
        .map(|row| row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt())
        .sum();
    Ok(total / boxes.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube_from(g: &mut Graph<f64>, h: usize, w: usize, d: usize, vals: Vec<f64>) -> FeatureCube {
        let v = g.variable(Tensor::new([h, w, d], vals).unwrap()).unwrap();
        FeatureCube::from_var(g, v, 8).unwrap()
    }

    fn corner(c: [f64; 4]) -> BBox {
        BBox::from_corners(c).unwrap()
    }

    #[test]
    fn constant_cube_pools_to_constant() {
        let mut g = Graph::new();
        let cube = cube_from(&mut g, 8, 8, 2, vec![3.0; 128]);
        let out = roi_pool(&mut g, &cube, &[corner([3.0, 5.0, 40.0, 61.0])], 7).unwrap();
        assert!(g.values(out).iter().all(|&v| v == 3.0));
        assert_eq!(g.shape(out), &[1, 7, 7, 2]);
    }

    #[test]
    fn identity_crop_when_pool_matches_extent() {
        let mut g = Graph::new();
        let vals: Vec<f64> = (0..64).map(f64::from).collect();
        let cube = cube_from(&mut g, 8, 8, 1, vals);
        // cells x 2..5, y 1..4
        let out = roi_pool(&mut g, &cube, &[corner([16.0, 8.0, 40.0, 32.0])], 3).unwrap();
        let want: Vec<f64> = (1..4)
            .flat_map(|y| (2..5).map(move |x| (y * 8 + x) as f64))
            .collect();
        assert_eq!(g.values(out), want.as_slice());
    }

    #[test]
    fn degenerate_box_snaps_to_nearest_cell() {
        let r = feature_region(&BBox::new(20.0, 20.0, 0.5, 0.5).unwrap(), 8, 8, 8);
        assert_eq!(r, [2, 2, 3, 3]);
        let edge = feature_region(&BBox::new(63.9, 63.9, 0.1, 0.1).unwrap(), 8, 8, 8);
        assert_eq!(edge, [7, 7, 8, 8]);
        let outside = feature_region(&BBox::from_corners([70.0, 10.0, 72.0, 30.0]).unwrap(), 8, 8, 8);
        assert_eq!(outside, [7, 1, 8, 4]);
    }

    #[test]
    fn l2_norm_of_ones() {
        let mut g = Graph::<f64>::new();
        let feat = g.constant(Tensor::full([1, 7, 7, 512], 1.0)).unwrap();
        let gamma = g.constant(Tensor::full([512], 1.0)).unwrap();
        let y = l2_normalize_scale(&mut g, feat, gamma).unwrap();
        let want = 1.0 / 25088f64.sqrt();
        assert!(g.values(y).iter().all(|&v| (v - want).abs() < 1e-15));
        let zero = g.constant(Tensor::zeros([512])).unwrap();
        let y0 = l2_normalize_scale(&mut g, feat, zero).unwrap();
        assert!(g.values(y0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fuse_shapes_and_mismatch() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::full([1, 7, 7, 512], 0.1)).unwrap();
        let feats = [a, a, a];
        let w = g.constant(Tensor::zeros([512, 1536])).unwrap();
        let b = g.constant(Tensor::zeros([512])).unwrap();
        let out = fuse_multiscale(&mut g, &feats, w, b).unwrap();
        assert_eq!(g.shape(out), &[1, 7, 7, 512]);
        let other = g.constant(Tensor::full([1, 5, 5, 512], 0.1)).unwrap();
        assert!(fuse_multiscale(&mut g, &[a, other], w, b).is_err());
    }

    #[test]
    fn averaging_kernel_returns_shared_input() {
        let mut g = Graph::<f64>::new();
        let vals: Vec<f64> = (0..2 * 2 * 3).map(|v| v as f64 * 0.25).collect();
        let a = g.constant(Tensor::new([1, 2, 2, 3], vals.clone()).unwrap()).unwrap();
        let mut w = vec![0.0; 3 * 9];
        for out_c in 0..3 {
            for block in 0..3 {
                w[out_c * 9 + block * 3 + out_c] = 0.25;
            }
        }
        let w = g.constant(Tensor::new([3, 9], w).unwrap()).unwrap();
        let b = g.constant(Tensor::zeros([3])).unwrap();
        let out = fuse_multiscale(&mut g, &[a, a, a], w, b).unwrap();
        for (o, v) in g.values(out).iter().zip(&vals) {
            assert!((o - 0.75 * v).abs() < 1e-15);
        }
        let third = 1.0 / 3.0;
        let mut w = vec![0.0; 27];
        for out_c in 0..3 {
            for block in 0..3 {
                w[out_c * 9 + block * 3 + out_c] = third;
            }
        }
        let w = g.constant(Tensor::new([3, 9], w).unwrap()).unwrap();
        let out = fuse_multiscale(&mut g, &[a, a, a], w, b).unwrap();
        for (o, v) in g.values(out).iter().zip(&vals) {
            assert!((o - v).abs() < 1e-14);
        }
    }
}
