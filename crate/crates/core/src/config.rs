//! Run configuration and its flat `section.key = value` text form.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::ApMode;
use crate::global_attention::GlobalMode;
use crate::model::{ModelConfig, Variant};
use crate::synth::{BatchConfig, SceneSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub scene: SceneSpec,
    pub train_images: usize,
    pub test_images: usize,
    pub seed: u64,
    /// Existing corpus root with `train/` and `test/`; generated in memory
    /// when unset.
    pub corpus: Option<PathBuf>,
    /// Worker threads for corpus generation. Output does not depend on it.
    pub jobs: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scene: SceneSpec::default(),
            train_images: 500,
            test_images: 100,
            seed: 2024,
            corpus: None,
            jobs: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_step: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch: BatchConfig,
    pub flip_prob: f64,
    /// Proposals used to calibrate the initial normalization scales.
    pub warmup_proposals: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            lr: 0.001,
            lr_decay: 0.1,
            decay_step: 1200,
            momentum: 0.9,
            weight_decay: 0.0005,
            batch: BatchConfig::default(),
            flip_prob: 0.5,
            warmup_proposals: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub ap_mode: ApMode,
    pub iou: f64,
    /// Pixels per grid cell in exported graymaps.
    pub map_cell: usize,
    /// Test images whose attention maps are exported.
    pub attend_images: usize,
    /// Also export the mean of all steps' maps.
    pub export_mean_map: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ap_mode: ApMode::AllPoints,
            iou: 0.5,
            map_cell: 16,
            attend_images: 8,
            export_mean_map: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblateConfig {
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    pub scale_sets: Vec<Vec<f64>>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            seeds: vec![1, 2, 3],
            variants: Variant::ALL.to_vec(),
            scale_sets: vec![
                vec![0.8, 1.2],
                vec![1.2, 1.8],
                vec![0.8, 1.2, 1.8],
                vec![0.8, 1.2, 1.8, 2.7],
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            model: ModelConfig::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_pair(key: &str, value: &str) -> Result<[usize; 2]> {
    match parse_list::<usize>(key, value)?[..] {
        [a, b] => Ok([a, b]),
        _ => Err(Error::Config(format!("`{key}` needs two comma-separated widths"))),
    }
}

fn parse_opt<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    match value.trim() {
        "" | "auto" | "none" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean `{value}` for `{key}`"))),
    }
}

/// `0.8,1.2;1.2,1.8` → `[[0.8, 1.2], [1.2, 1.8]]`.
pub fn parse_scale_sets(key: &str, value: &str) -> Result<Vec<Vec<f64>>> {
    value
        .split(';')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse_list(key, s))
        .collect()
}

impl RunConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        let v = value.trim();
        let m = &mut self.model;
        let scene = &mut self.data.scene;
        let t = &mut self.train;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "variant" | "model.variant" => m.variant = parse(key, v)?,

            "data.train_images" => self.data.train_images = parse(key, v)?,
            "data.test_images" => self.data.test_images = parse(key, v)?,
            "data.seed" => self.data.seed = parse(key, v)?,
            "data.corpus" => self.data.corpus = parse_opt::<String>(key, v)?.map(PathBuf::from),
            "data.jobs" => self.data.jobs = parse(key, v)?,
            "data.width" => scene.width = parse(key, v)?,
            "data.height" => scene.height = parse(key, v)?,
            "data.min_objects" => scene.min_objects = parse(key, v)?,
            "data.max_objects" => scene.max_objects = parse(key, v)?,
            "data.min_size" => scene.min_size = parse(key, v)?,
            "data.max_size" => scene.max_size = parse(key, v)?,
            "data.max_overlap" => scene.max_overlap = parse(key, v)?,
            "data.proposals" => scene.proposals = parse(key, v)?,
            "data.cooccurrence" => scene.cooccurrence = parse_bool(key, v)?,

            "backbone.widths" => m.backbone.widths = parse_list(key, v)?,
            "backbone.kernel" => m.backbone.kernel = parse(key, v)?,
            "backbone.stride" => m.backbone.stride = parse(key, v)?,
            "backbone.init_stddev" => m.backbone.init_stddev = parse_opt(key, v)?,

            "local.scales" | "scales" => m.local.scales = parse_list(key, v)?,
            "local.pool_size" => m.local.pool_size = parse(key, v)?,
            "local.reduced_depth" => m.local.reduced_depth = parse_opt(key, v)?,
            "local.fc_dims" => m.local.fc_dims = parse_pair(key, v)?,
            "local.norm_scale_init" => m.local.norm_scale_init = parse(key, v)?,
            "local.fc_init_stddev" => m.local.fc_init_stddev = parse(key, v)?,

            "global.grid" | "k_grid" => m.global.grid = parse(key, v)?,
            "global.steps" | "t_steps" => m.global.steps = parse(key, v)?,
            "global.hidden" => m.global.hidden = parse_opt(key, v)?,
            "global.layers" => m.global.layers = parse(key, v)?,
            "global.init_hidden" => m.global.init_hidden = parse_opt(key, v)?,
            "global.fc_dims" => m.global.fc_dims = parse_pair(key, v)?,
            "global.init_stddev" => m.global.init_stddev = parse_opt(key, v)?,
            "global.mode" => {
                m.global.mode = match v {
                    "attention" => GlobalMode::Attention,
                    "average" => GlobalMode::Average,
                    _ => return Err(Error::Config(format!("bad global.mode `{v}` (attention, average)"))),
                }
            }

            "head.classes" => m.head.classes = parse(key, v)?,
            "head.cls_init_stddev" => m.head.cls_init_stddev = parse(key, v)?,
            "head.reg_init_stddev" => m.head.reg_init_stddev = parse(key, v)?,
            "head.reg_weight" => m.head.reg_weight = parse(key, v)?,
            "head.nms_iou" => m.head.nms_iou = parse(key, v)?,
            "head.score_threshold" => m.head.score_threshold = parse(key, v)?,
            "head.normalize_targets" => m.head.normalize_targets = parse_bool(key, v)?,

            "train.iterations" | "iters" => t.iterations = parse(key, v)?,
            "train.lr" | "lr" => t.lr = parse(key, v)?,
            "train.lr_decay" => t.lr_decay = parse(key, v)?,
            "train.decay_step" => t.decay_step = parse(key, v)?,
            "train.momentum" => t.momentum = parse(key, v)?,
            "train.weight_decay" => t.weight_decay = parse(key, v)?,
            "train.images_per_batch" => t.batch.images = parse(key, v)?,
            "train.rois_per_batch" => t.batch.rois = parse(key, v)?,
            "train.fg_fraction" => t.batch.fg_fraction = parse(key, v)?,
            "train.fg_iou" => t.batch.fg_iou = parse(key, v)?,
            "train.bg_iou_lo" => t.batch.bg_iou[0] = parse(key, v)?,
            "train.bg_iou_hi" => t.batch.bg_iou[1] = parse(key, v)?,
            "train.flip_prob" => t.flip_prob = parse(key, v)?,
            "train.warmup_proposals" => t.warmup_proposals = parse(key, v)?,

            "eval.ap_mode" | "ap_mode" => self.eval.ap_mode = parse(key, v)?,
            "eval.iou" => self.eval.iou = parse(key, v)?,
            "eval.map_cell" => self.eval.map_cell = parse(key, v)?,
            "eval.attend_images" => self.eval.attend_images = parse(key, v)?,
            "eval.export_mean_map" => self.eval.export_mean_map = parse_bool(key, v)?,

            "ablate.seeds" => self.ablate.seeds = parse_list(key, v)?,
            "ablate.variants" => self.ablate.variants = parse_list(key, v)?,
            "ablate.scale_sets" => self.ablate.scale_sets = parse_scale_sets(key, v)?,

            _ => return Err(Error::Config(format!("unknown configuration key `{key}`"))),
        }
        Ok(())
    }

    /// Applies a `key = value` text; `#` starts a comment, `[section]`
    /// headers prefix the keys that follow.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: origin.to_path_buf(),
                message: format!("line {}: expected key = value", n + 1),
            })?;
            let key = if section.is_empty() {
                k.trim().to_string()
            } else {
                format!("{section}.{}", k.trim())
            };
            self.set(&key, v).map_err(|e| Error::Parse {
                path: origin.to_path_buf(),
                message: format!("line {}: {e}", n + 1),
            })?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_file(path)?;
        Ok(cfg)
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        self.apply_text(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.scene.validate()?;
        self.train.batch.validate()?;
        if self.model.head.classes != crate::synth::CLASS_NAMES.len() {
            return Err(Error::Config(format!(
                "the shapes corpus has {} classes, head.classes is {}",
                crate::synth::CLASS_NAMES.len(),
                self.model.head.classes
            )));
        }
        if self.data.train_images < self.train.batch.images || self.data.test_images == 0 {
            return Err(Error::Config("corpus too small for the batch size".into()));
        }
        if !(self.train.lr > 0.0) || !(0.0..1.0).contains(&self.train.momentum) {
            return Err(Error::Config("need lr > 0 and momentum in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.train.flip_prob) {
            return Err(Error::Config("flip_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Canonical `key = value` rendering; parsing it reproduces `self`.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let s = &self.data.scene;
        let t = &self.train;
        let list = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let opt = |v: Option<usize>| v.map_or("auto".to_string(), |x| x.to_string());
        let mut lines = vec![
            format!("seed = {}", self.seed),
            format!("out = {}", self.out.display()),
            format!("variant = {}", m.variant),
            format!("data.train_images = {}", self.data.train_images),
            format!("data.test_images = {}", self.data.test_images),
            format!("data.seed = {}", self.data.seed),
            format!(
                "data.corpus = {}",
                self.data.corpus.as_ref().map_or("none".to_string(), |p| p.display().to_string())
            ),
            format!("data.jobs = {}", self.data.jobs),
            format!("data.width = {}", s.width),
            format!("data.height = {}", s.height),
            format!("data.min_objects = {}", s.min_objects),
            format!("data.max_objects = {}", s.max_objects),
            format!("data.min_size = {}", s.min_size),
            format!("data.max_size = {}", s.max_size),
            format!("data.max_overlap = {}", s.max_overlap),
            format!("data.proposals = {}", s.proposals),
            format!("data.cooccurrence = {}", s.cooccurrence),
            format!(
                "backbone.widths = {}",
                m.backbone.widths.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(",")
            ),
            format!("backbone.kernel = {}", m.backbone.kernel),
            format!("backbone.stride = {}", m.backbone.stride),
            format!(
                "backbone.init_stddev = {}",
                m.backbone.init_stddev.map_or("auto".to_string(), |x| x.to_string())
            ),
            format!("local.scales = {}", list(&m.local.scales)),
            format!("local.pool_size = {}", m.local.pool_size),
            format!("local.reduced_depth = {}", opt(m.local.reduced_depth)),
            format!("local.fc_dims = {},{}", m.local.fc_dims[0], m.local.fc_dims[1]),
            format!("local.norm_scale_init = {}", m.local.norm_scale_init),
            format!("local.fc_init_stddev = {}", m.local.fc_init_stddev),
            format!("global.grid = {}", m.global.grid),
            format!("global.steps = {}", m.global.steps),
            format!("global.hidden = {}", opt(m.global.hidden)),
            format!("global.layers = {}", m.global.layers),
            format!("global.init_hidden = {}", opt(m.global.init_hidden)),
            format!("global.fc_dims = {},{}", m.global.fc_dims[0], m.global.fc_dims[1]),
            format!(
                "global.mode = {}",
                match m.global.mode {
                    GlobalMode::Attention => "attention",
                    GlobalMode::Average => "average",
                }
            ),
            format!(
                "global.init_stddev = {}",
                m.global.init_stddev.map_or("auto".to_string(), |x| x.to_string())
            ),
            format!("head.classes = {}", m.head.classes),
            format!("head.cls_init_stddev = {}", m.head.cls_init_stddev),
            format!("head.reg_init_stddev = {}", m.head.reg_init_stddev),
            format!("head.reg_weight = {}", m.head.reg_weight),
            format!("head.nms_iou = {}", m.head.nms_iou),
            format!("head.score_threshold = {}", m.head.score_threshold),
            format!("head.normalize_targets = {}", m.head.normalize_targets),
            format!("train.iterations = {}", t.iterations),
            format!("train.lr = {}", t.lr),
            format!("train.lr_decay = {}", t.lr_decay),
            format!("train.decay_step = {}", t.decay_step),
            format!("train.momentum = {}", t.momentum),
            format!("train.weight_decay = {}", t.weight_decay),
            format!("train.images_per_batch = {}", t.batch.images),
            format!("train.rois_per_batch = {}", t.batch.rois),
            format!("train.fg_fraction = {}", t.batch.fg_fraction),
            format!("train.fg_iou = {}", t.batch.fg_iou),
            format!("train.bg_iou_lo = {}", t.batch.bg_iou[0]),
            format!("train.bg_iou_hi = {}", t.batch.bg_iou[1]),
            format!("train.flip_prob = {}", t.flip_prob),
            format!("train.warmup_proposals = {}", t.warmup_proposals),
            format!("eval.ap_mode = {}", self.eval.ap_mode),
            format!("eval.iou = {}", self.eval.iou),
            format!("eval.map_cell = {}", self.eval.map_cell),
            format!("eval.attend_images = {}", self.eval.attend_images),
            format!("eval.export_mean_map = {}", self.eval.export_mean_map),
            format!(
                "ablate.seeds = {}",
                self.ablate.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",")
            ),
            format!(
                "ablate.variants = {}",
                self.ablate.variants.iter().map(|v| v.name()).collect::<Vec<_>>().join(",")
            ),
            format!(
                "ablate.scale_sets = {}",
                self.ablate.scale_sets.iter().map(|s| list(s)).collect::<Vec<_>>().join(";")
            ),
        ];
        lines.push(String::new());
        lines.join("\n")
    }
}
