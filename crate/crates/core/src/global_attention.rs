//! Attentive global context branch.
//!
//! The feature cube is max-pooled to a `K × K` grid of `D`-dim slices. A
//! stacked LSTM, initialized from the mean slice, repeatedly reads the soft
//! expectation of the slices under its current location distribution and
//! emits the next distribution. The last read passes two ReLU
//! fully-connected layers to give the per-image feature `F_G`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::backbone::FeatureCube;
use crate::error::{Error, Result};
use crate::local_context::{bin_bounds, fc_relu};
use crate::params::Params;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlobalMode {
    #[default]
    Attention,
    /// Uniform weights over the grid, no recurrence.
    Average,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalConfig {
    /// Side `K` of the attention grid.
    pub grid: usize,
    /// Attention time-steps `T`.
    pub steps: usize,
    /// LSTM width `d`; `None` uses the cube depth.
    pub hidden: Option<usize>,
    pub layers: usize,
    /// Hidden width of the state-initialization MLPs; `None` uses `d`.
    pub init_hidden: Option<usize>,
    pub fc_dims: [usize; 2],
    pub mode: GlobalMode,
    /// Gaussian init stddev; `None` scales each layer by its fan-in
    /// (`sqrt(1 / fan_in)`, or `sqrt(2 / fan_in)` for the ReLU layers).
    pub init_stddev: Option<f64>,
}

impl Default for GlobalConfig {
    fn default() -> Self {
        Self {
            grid: 8,
            steps: 3,
            hidden: None,
            layers: 3,
            init_hidden: None,
            fc_dims: [256, 256],
            mode: GlobalMode::Attention,
            init_stddev: Some(0.01),
        }
    }
}

impl GlobalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 || self.steps == 0 || self.layers == 0 {
            return Err(Error::Config("grid, steps and layers must be at least 1".into()));
        }
        if self.hidden == Some(0) || self.init_hidden == Some(0) || self.fc_dims.contains(&0) {
            return Err(Error::Config("global widths must be positive".into()));
        }
        Ok(())
    }

    pub fn hidden_dim(&self, depth: usize) -> usize {
        self.hidden.unwrap_or(depth)
    }

    pub fn locations(&self) -> usize {
        self.grid * self.grid
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
        let std = |fan_in: usize, gain: f64| self.init_stddev.unwrap_or_else(|| (gain / fan_in as f64).sqrt());
        if self.mode == GlobalMode::Attention {
            let d = self.hidden_dim(depth);
            let hid = self.init_hidden.unwrap_or(d);
            for k in 0..self.layers {
                let input = if k == 0 { depth } else { d };
                params.insert(format!("global.lstm{k}.w"), Tensor::randn([4 * d, d + input], std(d + input, 1.0), rng));
                params.insert(format!("global.lstm{k}.b"), Tensor::zeros([4 * d]));
            }
            for k in 0..self.layers {
                for part in ["c", "h"] {
                    let p = format!("global.init{k}.{part}");
                    params.insert(format!("{p}.w1"), Tensor::randn([hid, depth], std(depth, 1.0), rng));
                    params.insert(format!("{p}.b1"), Tensor::zeros([hid]));
                    params.insert(format!("{p}.w2"), Tensor::randn([d, hid], std(hid, 1.0), rng));
                    params.insert(format!("{p}.b2"), Tensor::zeros([d]));
                }
            }
            params.insert("global.loc.w", Tensor::randn([self.locations(), d], std(d, 1.0), rng));
            params.insert("global.loc.b", Tensor::zeros([self.locations()]));
        }
        params.insert("global.fc1.w", Tensor::randn([self.fc_dims[0], depth], std(depth, 2.0), rng));
        params.insert("global.fc1.b", Tensor::zeros([self.fc_dims[0]]));
        params.insert("global.fc2.w", Tensor::randn([self.fc_dims[1], self.fc_dims[0]], std(self.fc_dims[0], 2.0), rng));
        params.insert("global.fc2.b", Tensor::zeros([self.fc_dims[1]]));
    }
}

/// Recurrent state: per-layer `(h, c)` and the current location map.
#[derive(Clone, Debug)]
pub struct AttentionState {
    pub h: Vec<Var>,
    pub c: Vec<Var>,
    pub map: Var,
}

/// One LSTM layer's affine map `M` over `[h_{t−1}; input]`, gate order `(i, f, o, g)`.
#[derive(Clone, Copy, Debug)]
pub struct LstmLayer {
    pub w: Var,
    pub b: Var,
}

pub fn lstm_layers<F: Element>(graph: &mut Graph<F>, params: &Params<F>, layers: usize) -> Result<Vec<LstmLayer>> {
    (0..layers)
        .map(|k| {
            Ok(LstmLayer {
                w: params.leaf(graph, &format!("global.lstm{k}.w"))?,
                b: params.leaf(graph, &format!("global.lstm{k}.b"))?,
            })
        })
        .collect()
}

/// Max-pools the cube into `K × K` near-equal bins, returned as `[K² × D]`
/// slices in row-major grid order.
pub fn adaptive_pool_cube<F: Element>(graph: &mut Graph<F>, cube: &FeatureCube, grid: usize) -> Result<Var> {
    if grid == 0 {
        return Err(Error::Contract("grid side must be positive".into()));
    }
    let (h, w, d) = (cube.height, cube.width, cube.depth);
    let vals = graph.values(cube.data);
    let mut index = Vec::with_capacity(grid * grid * d);
    for gy in 0..grid {
        let (ya, yb) = bin_bounds(gy, grid, h);
        for gx in 0..grid {
            let (xa, xb) = bin_bounds(gx, grid, w);
            for ch in 0..d {
                let mut best = usize::MAX;
                for y in ya..yb {
                    for x in xa..xb {
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
    graph.gather(cube.data, index, &[grid * grid, d])
}

/// Advances every layer by one step. Layer `k > 0` reads layer `k − 1`'s
/// new hidden state. The returned state keeps the incoming map.
pub fn lstm_step<F: Element>(
    graph: &mut Graph<F>,
    x: Var,
    state: &AttentionState,
    layers: &[LstmLayer],
) -> Result<AttentionState> {
    if layers.len() != state.h.len() || layers.len() != state.c.len() {
        return Err(Error::Contract(format!(
            "{} LSTM layers but state holds {} / {}",
            layers.len(),
            state.h.len(),
            state.c.len()
        )));
    }
    let mut input = x;
    let mut h = Vec::with_capacity(layers.len());
    let mut c = Vec::with_capacity(layers.len());
    for (k, layer) in layers.iter().enumerate() {
        let d = graph.value(state.h[k]).numel();
        let joined = graph.concat_cols(&[state.h[k], input])?;
        let z = graph.affine(joined, layer.w, layer.b)?;
        if graph.value(z).numel() != 4 * d {
            return Err(Error::Shape {
                op: "lstm gates",
                left: graph.shape(z).to_vec(),
                right: vec![4 * d],
            });
        }
        let pre_i = graph.slice_cols(z, 0, d)?;
        let pre_f = graph.slice_cols(z, d, d)?;
        let pre_o = graph.slice_cols(z, 2 * d, d)?;
        let pre_g = graph.slice_cols(z, 3 * d, d)?;
        let i = graph.sigmoid(pre_i)?;
        let f = graph.sigmoid(pre_f)?;
        let o = graph.sigmoid(pre_o)?;
        let g = graph.tanh(pre_g)?;
        let keep = graph.mul(f, state.c[k])?;
        let write = graph.mul(i, g)?;
        let c_new = graph.add(keep, write)?;
        let squashed = graph.tanh(c_new)?;
        let h_new = graph.mul(o, squashed)?;
        h.push(h_new);
        c.push(c_new);
        input = h_new;
    }
    Ok(AttentionState { h, c, map: state.map })
}

/// Distribution over the `K²` grid cells from the top hidden state.
pub fn location_softmax<F: Element>(graph: &mut Graph<F>, h_top: Var, w: Var, b: Var) -> Result<Var> {
    let logits = graph.affine(h_top, w, b)?;
    graph.softmax(logits)
}

/// Expected slice under the location distribution.
pub fn attend<F: Element>(graph: &mut Graph<F>, slices: Var, map: Var) -> Result<Var> {
    graph.attend(slices, map)
}

fn init_mlp<F: Element>(graph: &mut Graph<F>, params: &Params<F>, mean: Var, prefix: &str) -> Result<Var> {
    let w1 = params.leaf(graph, &format!("{prefix}.w1"))?;
    let b1 = params.leaf(graph, &format!("{prefix}.b1"))?;
    let w2 = params.leaf(graph, &format!("{prefix}.w2"))?;
    let b2 = params.leaf(graph, &format!("{prefix}.b2"))?;
    let hidden = graph.affine(mean, w1, b1)?;
    let hidden = graph.tanh(hidden)?;
    graph.affine(hidden, w2, b2)
}

/// Initial state from the mean slice, one MLP pair per layer, and the
/// first map from the top layer's initial hidden state.
pub fn init_state<F: Element>(
    graph: &mut Graph<F>,
    params: &Params<F>,
    slices: Var,
    layers: usize,
    loc: (Var, Var),
) -> Result<AttentionState> {
    let mean = graph.mean_rows(slices)?;
    let mut h = Vec::with_capacity(layers);
    let mut c = Vec::with_capacity(layers);
    for k in 0..layers {
        c.push(init_mlp(graph, params, mean, &format!("global.init{k}.c"))?);
        h.push(init_mlp(graph, params, mean, &format!("global.init{k}.h"))?);
    }
    let top = *h
        .last()
        .ok_or_else(|| Error::Contract("at least one LSTM layer is required".into()))?;
    let map = location_softmax(graph, top, loc.0, loc.1)?;
    Ok(AttentionState { h, c, map })
}

/// `F_G` and the maps `l_1 … l_{T+1}` (a single uniform map in average mode).
#[derive(Clone, Debug)]
pub struct GlobalOutput {
    pub f_g: Var,
    pub maps: Vec<Var>,
}

pub fn global_feature<F: Element>(
    graph: &mut Graph<F>,
    params: &Params<F>,
    cube: &FeatureCube,
    cfg: &GlobalConfig,
) -> Result<GlobalOutput> {
    let slices = adaptive_pool_cube(graph, cube, cfg.grid)?;
    let (read, maps) = match cfg.mode {
        GlobalMode::Average => {
            let n = cfg.locations();
            let uniform = graph.constant(Tensor::full([n], F::one() / F::from_f64(n as f64)))?;
            (attend(graph, slices, uniform)?, vec![uniform])
        }
        GlobalMode::Attention => {
            let layers = lstm_layers(graph, params, cfg.layers)?;
            let loc = (params.leaf(graph, "global.loc.w")?, params.leaf(graph, "global.loc.b")?);
            let mut state = init_state(graph, params, slices, cfg.layers, loc)?;
            let mut maps = vec![state.map];
            for _ in 0..cfg.steps {
                let x = attend(graph, slices, state.map)?;
                state = lstm_step(graph, x, &state, &layers)?;
                let top = *state.h.last().unwrap();
                state.map = location_softmax(graph, top, loc.0, loc.1)?;
                maps.push(state.map);
            }
            (attend(graph, slices, state.map)?, maps)
        }
    };
    let f_g = fc_relu(graph, params, read, "global.fc1")?;
    let f_g = fc_relu(graph, params, f_g, "global.fc2")?;
    Ok(GlobalOutput { f_g, maps })
}

/// Global feature with uniform weights over the grid.
pub fn average_pool_global<F: Element>(
    graph: &mut Graph<F>,
    params: &Params<F>,
    cube: &FeatureCube,
    cfg: &GlobalConfig,
) -> Result<Var> {
    let cfg = GlobalConfig {
        mode: GlobalMode::Average,
        ..cfg.clone()
    };
    Ok(global_feature(graph, params, cube, &cfg)?.f_g)
}
