//! Full detector: backbone, local and global context branches, head.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::backbone::{backbone_forward, BackboneConfig, FeatureCube};
use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::global_attention::{global_feature, GlobalConfig, GlobalMode};
use crate::head::{classify, regress, HeadConfig, TargetStats};
use crate::local_context::{local_feature, mean_pooled_amplitude, LocalContextConfig};
use crate::params::Params;
use crate::tensor::{Element, Tensor};

/// Sub-network configuration being trained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    /// Classifier sees the local feature only.
    MinusG,
    /// Single-scale (λ = 1) local branch.
    MinusL,
    /// Global branch with uniform weights instead of attention.
    AvgGlobal,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Self::Full, Self::MinusG, Self::MinusL, Self::AvgGlobal];

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::MinusG => "minus_G",
            Self::MinusL => "minus_L",
            Self::AvgGlobal => "avg_global",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s) || v.name().replace('_', "-").eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}` (full, minus_G, minus_L, avg_global)")))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub backbone: BackboneConfig,
    pub local: LocalContextConfig,
    pub global: GlobalConfig,
    pub head: HeadConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.local.validate()?;
        self.global.validate()?;
        self.head.validate()
    }

    /// Local configuration after applying the variant.
    pub fn local_effective(&self) -> LocalContextConfig {
        let mut local = self.local.clone();
        if self.variant == Variant::MinusL {
            local.scales = vec![1.0];
        }
        local
    }

    /// Global configuration after applying the variant, `None` without a
    /// global branch.
    pub fn global_effective(&self) -> Option<GlobalConfig> {
        match self.variant {
            Variant::MinusG => None,
            Variant::AvgGlobal => Some(GlobalConfig {
                mode: GlobalMode::Average,
                ..self.global.clone()
            }),
            Variant::Full | Variant::MinusL => Some(self.global.clone()),
        }
    }

    pub fn init_params<F: Element, R: Rng + ?Sized>(&self, rng: &mut R) -> Params<F> {
        let mut p = Params::new();
        let depth = self.backbone.depth();
        self.backbone.init_params(&mut p, rng);
        let local = self.local_effective();
        local.init_params(depth, &mut p, rng);
        let global_dim = match self.global_effective() {
            Some(g) => {
                g.init_params(depth, &mut p, rng);
                g.output_dim()
            }
            None => 0,
        };
        self.head.init_params(local.output_dim(), global_dim, &mut p, rng);
        p
    }
}

/// Graph outputs of one image.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub cube: FeatureCube,
    /// `[R × (K_cls + 1)]` raw class scores.
    pub scores: Var,
    /// `[R × 4·K_cls]` normalized per-class deltas.
    pub deltas: Var,
    pub f_l: Var,
    pub f_g: Option<Var>,
    /// Attention maps `l_1 … l_{T+1}`; empty without a global branch.
    pub maps: Vec<Var>,
}

/// Runs the detector on one `[H × W × 3]` image and its proposals.
pub fn forward<F: Element>(
    graph: &mut Graph<F>,
    params: &Params<F>,
    cfg: &ModelConfig,
    image: Tensor<F>,
    proposals: &[BBox],
) -> Result<ForwardOutput> {
    let (h, w) = match *image.shape() {
        [h, w, _] => (h, w),
        ref s => return Err(Error::InvalidTensor(format!("image must be [H × W × 3], got {s:?}"))),
    };
    let img = graph.input(image)?;
    let cube = backbone_forward(graph, params, img, &cfg.backbone)?;
    let local = local_feature(graph, params, &cube, proposals, (w, h), &cfg.local_effective())?;
    let (f_g, maps) = match cfg.global_effective() {
        Some(g) => {
            let out = global_feature(graph, params, &cube, &g)?;
            (Some(out.f_g), out.maps)
        }
        None => (None, Vec::new()),
    };
    let scores = classify(graph, params, local.f_l, f_g)?;
    let deltas = regress(graph, params, local.f_l)?;
    Ok(ForwardOutput {
        cube,
        scores,
        deltas,
        f_l: local.f_l,
        f_g,
        maps,
    })
}

/// Sets every per-scale normalization scale to the mean L2 norm of the
/// raw pooled features of `boxes` at that scale, so the first normalized
/// outputs keep the un-normalized amplitude.
pub fn calibrate_norm_scales<F: Element>(
    params: &mut Params<F>,
    cfg: &ModelConfig,
    images: &[(Tensor<F>, Vec<BBox>)],
) -> Result<Vec<f64>> {
    let local = cfg.local_effective();
    let mut sums = vec![0.0; local.scales.len()];
    let mut count = 0usize;
    for (image, boxes) in images {
        if boxes.is_empty() {
            continue;
        }
        let (h, w) = (image.shape()[0], image.shape()[1]);
        let mut graph = Graph::new();
        let img = graph.constant(image.clone())?;
        let cube = backbone_forward(&mut graph, params, img, &cfg.backbone)?;
        for (i, &lambda) in local.scales.iter().enumerate() {
            let scaled = boxes
                .iter()
                .map(|b| crate::bbox::scale_box(b, lambda, w, h))
                .collect::<Result<Vec<_>>>()?;
            sums[i] += mean_pooled_amplitude(&mut graph, &cube, &scaled, &local)? * boxes.len() as f64;
        }
        count += boxes.len();
    }
    if count == 0 {
        return Err(Error::Contract("no warm-up proposals for scale calibration".into()));
    }
    let amps: Vec<f64> = sums.iter().map(|s| s / count as f64).collect();
    for (i, &a) in amps.iter().enumerate() {
        let gamma = params
            .get_mut(&format!("local.gamma{i}"))
            .ok_or_else(|| Error::Contract(format!("missing local.gamma{i}")))?;
        let value = if a > 0.0 { a } else { 1.0 };
        gamma.values_mut().iter_mut().for_each(|g| *g = F::from_f64(value));
    }
    Ok(amps)
}

/// Reserved checkpoint entries for the regression-target statistics.
pub const STATS_MEAN: &str = "meta.target_mean";
pub const STATS_STD: &str = "meta.target_std";

/// Parameters plus target statistics as one named-array collection.
pub fn pack_checkpoint(params: &Params<f32>, stats: &TargetStats) -> Params<f32> {
    let mut out = params.clone();
    out.insert(STATS_MEAN, Tensor::new([4], stats.mean.map(|v| v as f32).to_vec()).expect("4 values"));
    out.insert(STATS_STD, Tensor::new([4], stats.std.map(|v| v as f32).to_vec()).expect("4 values"));
    out
}

/// Splits a loaded checkpoint and checks it against the layout `cfg`
/// expects; mismatches list every differing tensor.
pub fn unpack_checkpoint(mut stored: Params<f32>, cfg: &ModelConfig) -> Result<(Params<f32>, TargetStats)> {
    let take = |p: &mut Params<f32>, name: &str| -> Result<[f64; 4]> {
        let t = p
            .remove(name)
            .ok_or_else(|| Error::CheckpointMismatch(format!("  - {name} [4] (expected, missing)")))?;
        let v = t.values();
        if v.len() != 4 {
            return Err(Error::CheckpointMismatch(format!("  ~ {name}: expected [4], found {:?}", t.shape())));
        }
        Ok(std::array::from_fn(|i| v[i] as f64))
    };
    let stats = TargetStats {
        mean: take(&mut stored, STATS_MEAN)?,
        std: take(&mut stored, STATS_STD)?,
    };
    let expected: Params<f32> = cfg.init_params(&mut ChaCha8Rng::seed_from_u64(0));
    if let Some(diff) = expected.layout_diff(&stored) {
        return Err(Error::CheckpointMismatch(diff));
    }
    // reorder to the canonical layout
    let mut params = Params::new();
    for name in expected.names() {
        params.insert(name, stored.get(name).expect("layout checked").clone());
    }
    Ok((params, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                widths: vec![4, 6, 8],
                ..BackboneConfig::default()
            },
            local: LocalContextConfig {
                pool_size: 3,
                fc_dims: [12, 10],
                ..LocalContextConfig::default()
            },
            global: GlobalConfig {
                grid: 2,
                steps: 2,
                layers: 2,
                fc_dims: [6, 5],
                ..GlobalConfig::default()
            },
            ..ModelConfig::default()
        }
    }

    fn boxes() -> Vec<BBox> {
        vec![
            BBox::from_corners([4.0, 4.0, 20.0, 24.0]).unwrap(),
            BBox::from_corners([10.0, 0.0, 32.0, 12.0]).unwrap(),
        ]
    }

    #[test]
    fn output_shapes_per_variant() {
        for v in Variant::ALL {
            let cfg = ModelConfig { variant: v, ..tiny() };
            let p: Params<f32> = cfg.init_params(&mut ChaCha8Rng::seed_from_u64(1));
            let mut g = Graph::new();
            let img = Tensor::full([32, 32, 3], 0.5f32);
            let out = forward(&mut g, &p, &cfg, img, &boxes()).unwrap();
            assert_eq!(g.shape(out.scores), &[2, 4]);
            assert_eq!(g.shape(out.deltas), &[2, 12]);
            let expect_maps = match v {
                Variant::MinusG => 0,
                Variant::AvgGlobal => 1,
                _ => 3,
            };
            assert_eq!(out.maps.len(), expect_maps, "{v}");
            assert_eq!(p.names().any(|n| n.starts_with("global.")), v != Variant::MinusG);
        }
    }

    #[test]
    fn checkpoint_layout_mismatch_is_explicit() {
        let full = tiny();
        let minus_g = ModelConfig {
            variant: Variant::MinusG,
            ..tiny()
        };
        let p: Params<f32> = minus_g.init_params(&mut ChaCha8Rng::seed_from_u64(1));
        let packed = pack_checkpoint(&p, &TargetStats::IDENTITY);
        assert!(unpack_checkpoint(packed.clone(), &minus_g).is_ok());
        match unpack_checkpoint(packed, &full) {
            Err(Error::CheckpointMismatch(diff)) => assert!(diff.contains("global.loc.w")),
            other => panic!("expected mismatch, got {other:?}"),
        }
    }

    #[test]
    fn calibration_sets_gamma_to_amplitude() {
        let cfg = tiny();
        let mut p: Params<f32> = cfg.init_params(&mut ChaCha8Rng::seed_from_u64(2));
        let img = Tensor::randn([32, 32, 3], 0.3, &mut ChaCha8Rng::seed_from_u64(3));
        let amps = calibrate_norm_scales(&mut p, &cfg, &[(img, boxes())]).unwrap();
        assert_eq!(amps.len(), 3);
        for (i, a) in amps.iter().enumerate() {
            let g = p.get(&format!("local.gamma{i}")).unwrap();
            assert!(g.values().iter().all(|&v| v == *a as f32));
        }
    }

    #[test]
    fn variant_names_parse() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("nope".parse::<Variant>().is_err());
    }
}
