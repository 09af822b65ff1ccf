//! Detection metrics: VOC-style AP/mAP, false-positive diagnosis and
//! attention-map export.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use crate::bbox::iou;
use crate::bbox::iou_corners;
use crate::error::{Error, Result};
use crate::head::Detection;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApMode {
    /// Area under the monotone precision envelope.
    #[default]
    AllPoints,
    /// Mean envelope precision at recall 0, 0.1, …, 1.
    ElevenPoint,
}

impl std::str::FromStr for ApMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all_points" | "all-points" | "all" => Ok(Self::AllPoints),
            "11_point" | "11-point" | "eleven_point" | "11" => Ok(Self::ElevenPoint),
            _ => Err(Error::Config(format!("unknown AP mode `{s}` (all-points or 11-point)"))),
        }
    }
}

impl fmt::Display for ApMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::AllPoints => "all_points",
            Self::ElevenPoint => "11_point",
        })
    }
}

/// Ground-truth object of an evaluation set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtRecord {
    pub image_id: usize,
    pub class_id: usize,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
    pub score: f64,
}

/// True-positive flags of `class` detections in descending score order
/// (ties keep input order), plus the number of ground-truth objects.
///
/// Each detection is compared with the same-image ground truth of highest
/// IoU; it is a true positive iff that IoU reaches `iou_thr` and the
/// object is still unmatched.
pub fn match_detections(dets: &[Detection], gts: &[GtRecord], class: usize, iou_thr: f64) -> (Vec<(f64, bool)>, usize) {
    let class_gts: Vec<&GtRecord> = gts.iter().filter(|g| g.class_id == class).collect();
    let mut order: Vec<&Detection> = dets.iter().filter(|d| d.class_id == class).collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut taken = vec![false; class_gts.len()];
    let flags = order
        .iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in class_gts.iter().enumerate() {
                if g.image_id != d.image_id {
                    continue;
                }
                let o = iou_corners(&d.bbox, &g.bbox);
                if best.is_none_or(|(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
            let tp = match best {
                Some((j, o)) if o >= iou_thr && !taken[j] => {
                    taken[j] = true;
                    true
                }
                _ => false,
            };
            (d.score, tp)
        })
        .collect();
    (flags, class_gts.len())
}

/// Precision/recall after each detection of the sorted sweep.
pub fn pr_curve(flags: &[(f64, bool)], n_gt: usize) -> Vec<PrPoint> {
    let mut tp = 0usize;
    flags
        .iter()
        .enumerate()
        .map(|(i, &(score, hit))| {
            tp += hit as usize;
            PrPoint {
                recall: tp as f64 / n_gt as f64,
                precision: tp as f64 / (i + 1) as f64,
                score,
            }
        })
        .collect()
}

fn ap_from_curve(curve: &[PrPoint], mode: ApMode) -> f64 {
    match mode {
        ApMode::AllPoints => {
            let mut envelope: Vec<f64> = curve.iter().map(|p| p.precision).collect();
            for i in (0..envelope.len().saturating_sub(1)).rev() {
                envelope[i] = envelope[i].max(envelope[i + 1]);
            }
            let mut prev = 0.0;
            let mut area = 0.0;
            for (p, &e) in curve.iter().zip(&envelope) {
                area += (p.recall - prev) * e;
                prev = p.recall;
            }
            area
        }
        ApMode::ElevenPoint => {
            let mut total = 0.0;
            for t in 0..=10 {
                let r = t as f64 / 10.0;
                let best = curve
                    .iter()
                    .filter(|p| p.recall >= r)
                    .map(|p| p.precision)
                    .fold(0.0, f64::max);
                total += best;
            }
            total / 11.0
        }
    }
}

/// AP of one class, or `None` when the class has no ground truth.
pub fn average_precision(dets: &[Detection], gts: &[GtRecord], class: usize, iou_thr: f64, mode: ApMode) -> Option<f64> {
    let (flags, n_gt) = match_detections(dets, gts, class, iou_thr);
    if n_gt == 0 {
        return None;
    }
    Some(ap_from_curve(&pr_curve(&flags, n_gt), mode))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    /// Per class name; `null` when the class has no ground truth.
    pub per_class_ap: BTreeMap<String, Option<f64>>,
    pub map: f64,
    pub mode: ApMode,
    pub iou_threshold: f64,
}

/// Unweighted mean of the defined per-class APs (classes `1..=names.len()`).
pub fn mean_ap(dets: &[Detection], gts: &[GtRecord], class_names: &[&str], iou_thr: f64, mode: ApMode) -> MetricsReport {
    let mut per_class_ap = BTreeMap::new();
    let mut defined = Vec::new();
    for (i, name) in class_names.iter().enumerate() {
        let ap = average_precision(dets, gts, i + 1, iou_thr, mode);
        match ap {
            Some(v) => defined.push(v),
            None => log::info!("class {name} has no ground truth; excluded from mAP"),
        }
        per_class_ap.insert(name.to_string(), ap);
    }
    let map = if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    MetricsReport {
        per_class_ap,
        map,
        mode,
        iou_threshold: iou_thr,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FpCategory {
    Cor,
    Loc,
    Sim,
    Oth,
    #[serde(rename = "BG")]
    Bg,
}

impl FpCategory {
    pub const ALL: [FpCategory; 5] = [Self::Cor, Self::Loc, Self::Sim, Self::Oth, Self::Bg];

    pub fn name(self) -> &'static str {
        match self {
            Self::Cor => "Cor",
            Self::Loc => "Loc",
            Self::Sim => "Sim",
            Self::Oth => "Oth",
            Self::Bg => "BG",
        }
    }
}

/// Groups of mutually similar classes; classes absent from every group are
/// similar to nothing.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMap {
    pub groups: Vec<Vec<usize>>,
}

impl SimilarityMap {
    /// Triangle and square form one group; circle stands alone.
    pub fn shapes() -> Self {
        Self { groups: vec![vec![2, 3]] }
    }

    pub fn similar(&self, a: usize, b: usize) -> bool {
        a != b && self.groups.iter().any(|g| g.contains(&a) && g.contains(&b))
    }
}

/// Category of every top-ranked detection of one class, in score order.
/// `N` is the number of ground-truth objects of the class.
pub fn categorize_class(
    dets: &[Detection],
    gts: &[GtRecord],
    class: usize,
    similarity: &SimilarityMap,
) -> Vec<FpCategory> {
    const BAND: f64 = 0.1;
    const HIT: f64 = 0.5;
    let n = gts.iter().filter(|g| g.class_id == class).count();
    let mut order: Vec<&Detection> = dets.iter().filter(|d| d.class_id == class).collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score));
    order.truncate(n);
    let mut taken = vec![false; gts.len()];
    order
        .iter()
        .map(|d| {
            let mut same: Option<(usize, f64)> = None;
            let (mut sim, mut oth) = (0.0f64, 0.0f64);
            for (j, g) in gts.iter().enumerate() {
                if g.image_id != d.image_id {
                    continue;
                }
                let o = iou_corners(&d.bbox, &g.bbox);
                if g.class_id == class {
                    if same.is_none_or(|(_, b)| o > b) {
                        same = Some((j, o));
                    }
                } else if similarity.similar(class, g.class_id) {
                    sim = sim.max(o);
                } else {
                    oth = oth.max(o);
                }
            }
            match same {
                Some((j, o)) if o >= HIT && !taken[j] => {
                    taken[j] = true;
                    FpCategory::Cor
                }
                Some((_, o)) if o >= BAND => FpCategory::Loc,
                _ if sim >= BAND => FpCategory::Sim,
                _ if oth >= BAND => FpCategory::Oth,
                _ => FpCategory::Bg,
            }
        })
        .collect()
}

/// Category counts per class name over the top-N detections.
pub fn categorize_false_positives(
    dets: &[Detection],
    gts: &[GtRecord],
    class_names: &[&str],
    similarity: &SimilarityMap,
) -> BTreeMap<String, BTreeMap<FpCategory, usize>> {
    let mut out = BTreeMap::new();
    for (i, name) in class_names.iter().enumerate() {
        let class = i + 1;
        if !gts.iter().any(|g| g.class_id == class) {
            continue;
        }
        let mut counts: BTreeMap<FpCategory, usize> = FpCategory::ALL.iter().map(|&c| (c, 0)).collect();
        for c in categorize_class(dets, gts, class, similarity) {
            *counts.get_mut(&c).unwrap() += 1;
        }
        out.insert(name.to_string(), counts);
    }
    out
}

pub fn write_category_csv<W: Write>(mut w: W, counts: &BTreeMap<String, BTreeMap<FpCategory, usize>>) -> Result<()> {
    writeln!(w, "class,Cor,Loc,Sim,Oth,BG")?;
    for (name, c) in counts {
        let cells: Vec<String> = FpCategory::ALL.iter().map(|k| c[k].to_string()).collect();
        writeln!(w, "{name},{}", cells.join(","))?;
    }
    Ok(())
}

/// Writes `<stem>.csv` (the `K × K` grid) and `<stem>.pgm` (binary
/// graymap, maximum mapped to 255, each cell a `cell × cell` block).
pub fn export_attention_map(map: &[f64], k: usize, stem: &Path, cell: usize) -> Result<[PathBuf; 2]> {
    if map.len() != k * k || k == 0 || cell == 0 {
        return Err(Error::Contract(format!(
            "attention map of {} entries for a {k}×{k} grid",
            map.len()
        )));
    }
    let csv = stem.with_extension("csv");
    let mut text = String::new();
    for row in map.chunks(k) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    fs::write(&csv, text)?;

    let max = map.iter().copied().fold(0.0, f64::max);
    let side = k * cell;
    let mut bytes = format!("P5\n{side} {side}\n255\n").into_bytes();
    for y in 0..side {
        for x in 0..side {
            let v = map[(y / cell) * k + x / cell];
            let g = if max > 0.0 { (v / max * 255.0).round() } else { 0.0 };
            bytes.push(g.clamp(0.0, 255.0) as u8);
        }
    }
    let pgm = stem.with_extension("pgm");
    fs::write(&pgm, bytes)?;
    Ok([csv, pgm])
}

/// Row-major values of an exported attention-map CSV.
pub fn read_attention_csv(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .flat_map(|l| l.split(','))
        .map(|c| {
            c.trim().parse::<f64>().map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                message: format!("`{c}`: {e}"),
            })
        })
        .collect()
}
