//! Small convolutional trunk producing the shared feature cube.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::Params;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Output channels of each conv stage; the last entry is the cube depth D.
    pub widths: Vec<usize>,
    pub kernel: usize,
    /// Image pixels per feature cell. A 2×2 max-pool follows each of the
    /// first `log2(stride)` stages.
    pub stride: usize,
    /// Gaussian init stddev; `None` scales by fan-in (`sqrt(2 / fan_in)`).
    pub init_stddev: Option<f64>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            widths: vec![16, 32, 64, 64],
            kernel: 3,
            stride: 8,
            init_stddev: None,
        }
    }
}

impl BackboneConfig {
    pub fn depth(&self) -> usize {
        *self.widths.last().expect("validated")
    }

    pub fn pool_count(&self) -> usize {
        self.stride.trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config("backbone widths must be positive and nonempty".into()));
        }
        if !self.stride.is_power_of_two() {
            return Err(Error::Config(format!("stride {} is not a power of two", self.stride)));
        }
        if self.pool_count() > self.widths.len() {
            return Err(Error::Config(format!(
                "stride {} needs {} pooling stages but only {} conv stages exist",
                self.stride,
                self.pool_count(),
                self.widths.len()
            )));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config("backbone kernel must be odd".into()));
        }
        Ok(())
    }

    pub fn init_params<F: Element, R: Rng + ?Sized>(&self, params: &mut Params<F>, rng: &mut R) {
        let mut c_in = 3;
        for (i, &c_out) in self.widths.iter().enumerate() {
            let fan_in = self.kernel * self.kernel * c_in;
            let std = self.init_stddev.unwrap_or_else(|| (2.0 / fan_in as f64).sqrt());
            params.insert(format!("backbone.conv{i}.w"), Tensor::randn([c_out, fan_in], std, rng));
            params.insert(format!("backbone.conv{i}.b"), Tensor::zeros([c_out]));
            c_in = c_out;
        }
    }
}

/// `H × W × D` activation map with its image-to-feature stride.
#[derive(Clone, Copy, Debug)]
pub struct FeatureCube {
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    pub stride: usize,
    pub data: Var,
}

impl FeatureCube {
    /// Wraps an existing `[H × W × D]` node.
    pub fn from_var<F: Element>(graph: &Graph<F>, data: Var, stride: usize) -> Result<Self> {
        match *graph.shape(data) {
            [height, width, depth] => Ok(Self {
                height,
                width,
                depth,
                stride,
                data,
            }),
            ref s => Err(Error::InvalidTensor(format!("feature cube must be rank 3, got {s:?}"))),
        }
    }
}

/// 2×2 max pooling with stride 2; odd extents round up.
pub fn max_pool2<F: Element>(graph: &mut Graph<F>, x: Var) -> Result<Var> {
    let [h, w, c] = *graph.shape(x) else {
        return Err(Error::InvalidTensor("max_pool2 expects [H × W × C]".into()));
    };
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let vals = graph.values(x);
    let mut index = Vec::with_capacity(oh * ow * c);
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut best = usize::MAX;
                for y in 2 * oy..(2 * oy + 2).min(h) {
                    for xx in 2 * ox..(2 * ox + 2).min(w) {
                        let i = (y * w + xx) * c + ch;
                        if best == usize::MAX || vals[i] > vals[best] {
                            best = i;
                        }
                    }
                }
                index.push(best as u32);
            }
        }
    }
    graph.gather(x, index, &[oh, ow, c])
}

/// Runs the trunk on an `[H × W × 3]` image node.
pub fn backbone_forward<F: Element>(
    graph: &mut Graph<F>,
    params: &Params<F>,
    image: Var,
    cfg: &BackboneConfig,
) -> Result<FeatureCube> {
    match *graph.shape(image) {
        [h, w, 3] if h > 0 && w > 0 => {}
        ref s => {
            return Err(Error::InvalidTensor(format!(
                "image must be [H × W × 3] with nonzero extents, got {s:?}"
            )))
        }
    }
    let pools = cfg.pool_count();
    let mut x = image;
    for i in 0..cfg.widths.len() {
        let w = params.leaf(graph, &format!("backbone.conv{i}.w"))?;
        let b = params.leaf(graph, &format!("backbone.conv{i}.b"))?;
        x = graph.conv2d_same(x, w, b, cfg.kernel)?;
        x = graph.relu(x)?;
        if i < pools {
            x = max_pool2(graph, x)?;
        }
    }
    FeatureCube::from_var(graph, x, cfg.stride)
}
