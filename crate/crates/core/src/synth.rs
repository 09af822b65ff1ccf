//! Synthetic shapes corpus.
//!
//! Flat-colored circles, triangles and squares on textured backgrounds.
//! The background texture predicts the class mix: gradient backgrounds
//! carry triangles and squares, noise backgrounds carry circles and
//! squares. Pixel values are multiples of 1/255 and all box corners are
//! integers, so disk round-trips and horizontal flips are exact.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::{encode_target, iou, BBox};
use crate::error::{Error, Result};
use crate::head::RoiTarget;
use crate::tensor::{Element, Tensor};

pub const CLASS_NAMES: [&str; 3] = ["circle", "triangle", "square"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Triangle,
    Square,
}

impl Shape {
    /// Class id; 0 is reserved for background.
    pub fn class_id(self) -> usize {
        match self {
            Shape::Circle => 1,
            Shape::Triangle => 2,
            Shape::Square => 3,
        }
    }

    pub fn from_class_id(id: usize) -> Option<Self> {
        match id {
            1 => Some(Shape::Circle),
            2 => Some(Shape::Triangle),
            3 => Some(Shape::Square),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Background {
    Gradient,
    Noise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Side range of an object's bounding square, in pixels.
    pub min_size: usize,
    pub max_size: usize,
    /// Largest IoU allowed between two objects of one image; values above
    /// zero permit partial occlusion.
    pub max_overlap: f64,
    pub proposals: usize,
    /// Tie the class mix to the background texture.
    pub cooccurrence: bool,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            min_objects: 1,
            max_objects: 3,
            min_size: 16,
            max_size: 48,
            max_overlap: 0.2,
            proposals: 200,
            cooccurrence: true,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::Config("need 1 ≤ min_objects ≤ max_objects".into()));
        }
        if self.min_size < 8 || self.min_size > self.max_size {
            return Err(Error::Config("need 8 ≤ min_size ≤ max_size".into()));
        }
        if self.max_size > self.width.min(self.height) {
            return Err(Error::Infeasible(format!(
                "objects up to {} px do not fit a {}×{} canvas",
                self.max_size, self.width, self.height
            )));
        }
        if self.proposals < 64 || self.proposals < 24 * self.max_objects {
            return Err(Error::Config(format!(
                "{} proposals per image are too few for {} objects",
                self.proposals, self.max_objects
            )));
        }
        Ok(())
    }
}

/// 8-bit RGB raster, row-major, interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// `[H × W × 3]` tensor with values `k / 255`.
    pub fn to_tensor<F: Element>(&self) -> Tensor<F> {
        let vals = self.data.iter().map(|&v| F::from_f64(v as f64 / 255.0)).collect();
        Tensor::new([self.height, self.width, 3], vals).expect("extents match data")
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = Self::new(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                let src = (y * self.width + x) * 3;
                let dst = (y * self.width + (self.width - 1 - x)) * 3;
                out.data[dst..dst + 3].copy_from_slice(&self.data[src..src + 3]);
            }
        }
        out
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.data)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let bad = |message: &str| Error::Parse {
            path: path.to_path_buf(),
            message: message.to_string(),
        };
        let mut pos = 0;
        let mut fields = Vec::new();
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
        }
        if fields[0] != "P6" {
            return Err(bad("not a binary pixmap (P6)"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
        let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
        if maxval != 255 {
            return Err(bad("only 8-bit pixmaps are supported"));
        }
        let data = bytes
            .get(pos + 1..)
            .ok_or_else(|| bad("missing raster"))?
            .to_vec();
        if data.len() != width * height * 3 {
            return Err(bad("raster length does not match header"));
        }
        Ok(Self { width, height, data })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub class_id: usize,
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub background: Background,
    pub gts: Vec<GroundTruth>,
    pub proposals: Vec<BBox>,
}

impl Sample {
    /// Horizontal mirror of image, ground truth and proposals.
    pub fn flip(&self) -> Self {
        let w = self.image.width as f64;
        Self {
            image: self.image.flip_horizontal(),
            background: self.background,
            gts: self
                .gts
                .iter()
                .map(|g| GroundTruth {
                    class_id: g.class_id,
                    bbox: g.bbox.flip_horizontal(w),
                })
                .collect(),
            proposals: self.proposals.iter().map(|p| p.flip_horizontal(w)).collect(),
        }
    }
}

/// Mirrors the sample when `coin` is set.
pub fn flip_augment(sample: &Sample, coin: bool) -> Sample {
    if coin {
        sample.flip()
    } else {
        sample.clone()
    }
}

fn random_color<R: Rng + ?Sized>(rng: &mut R) -> [u8; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn color_distance(a: [u8; 3], b: [f64; 3]) -> f64 {
    a.iter().zip(b).map(|(&x, y)| (x as f64 - y).abs()).sum()
}

fn paint_background<R: Rng + ?Sized>(img: &mut Image, kind: Background, rng: &mut R) {
    let (w, h) = (img.width, img.height);
    match kind {
        Background::Gradient => {
            let a = random_color(rng);
            let b = random_color(rng);
            let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let (dx, dy) = (angle.cos(), angle.sin());
            let span = dx.abs() * w as f64 + dy.abs() * h as f64;
            let origin = (dx.min(0.0) * w as f64) + (dy.min(0.0) * h as f64);
            for y in 0..h {
                for x in 0..w {
                    let t = ((x as f64 * dx + y as f64 * dy) - origin) / span;
                    let c: [u8; 3] = std::array::from_fn(|i| {
                        (a[i] as f64 + t * (b[i] as f64 - a[i] as f64)).round().clamp(0.0, 255.0) as u8
                    });
                    img.put(x, y, c);
                }
            }
        }
        Background::Noise => {
            let base = random_color(rng);
            let cell = 4;
            let (cw, ch) = (w.div_ceil(cell), h.div_ceil(cell));
            let offsets: Vec<[i32; 3]> = (0..cw * ch)
                .map(|_| std::array::from_fn(|_| rng.random_range(-60..=60)))
                .collect();
            for y in 0..h {
                for x in 0..w {
                    let o = offsets[(y / cell) * cw + x / cell];
                    let c: [u8; 3] = std::array::from_fn(|i| (base[i] as i32 + o[i]).clamp(0, 255) as u8);
                    img.put(x, y, c);
                }
            }
        }
    }
}

fn mean_color(img: &Image, x0: usize, y0: usize, size: usize) -> [f64; 3] {
    let mut acc = [0.0; 3];
    for y in y0..y0 + size {
        for x in x0..x0 + size {
            let i = (y * img.width + x) * 3;
            for c in 0..3 {
                acc[c] += img.data[i + c] as f64;
            }
        }
    }
    acc.map(|v| v / (size * size) as f64)
}

fn inside(shape: Shape, size: usize, px: usize, py: usize) -> bool {
    let s = size as f64;
    let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
    match shape {
        Shape::Square => true,
        Shape::Circle => {
            let r = s / 2.0;
            (x - r).powi(2) + (y - r).powi(2) <= r * r
        }
        Shape::Triangle => {
            // apex at top center, base along the bottom edge
            let half = (s / 2.0) * (y / s);
            (x - s / 2.0).abs() <= half
        }
    }
}

/// Paints a shape into the `size`-sided square at `(x0, y0)` and returns
/// the tight box of the painted pixels.
fn paint_shape(img: &mut Image, shape: Shape, x0: usize, y0: usize, size: usize, rgb: [u8; 3]) -> Option<BBox> {
    let (mut lo_x, mut lo_y, mut hi_x, mut hi_y) = (usize::MAX, usize::MAX, 0, 0);
    for py in 0..size {
        for px in 0..size {
            if inside(shape, size, px, py) {
                img.put(x0 + px, y0 + py, rgb);
                lo_x = lo_x.min(px);
                lo_y = lo_y.min(py);
                hi_x = hi_x.max(px + 1);
                hi_y = hi_y.max(py + 1);
            }
        }
    }
    (lo_x != usize::MAX).then(|| {
        BBox::from_corners([
            (x0 + lo_x) as f64,
            (y0 + lo_y) as f64,
            (x0 + hi_x) as f64,
            (y0 + hi_y) as f64,
        ])
        .expect("nonempty")
    })
}

fn pick_shape<R: Rng + ?Sized>(bg: Background, cooccurrence: bool, rng: &mut R) -> Shape {
    if !cooccurrence {
        return [Shape::Circle, Shape::Triangle, Shape::Square][rng.random_range(0..3)];
    }
    let primary = match bg {
        Background::Gradient => Shape::Triangle,
        Background::Noise => Shape::Circle,
    };
    if rng.random_range(0..3) < 2 {
        primary
    } else {
        Shape::Square
    }
}

/// Deterministic scene for `seed`.
pub fn generate_image(seed: u64, spec: &SceneSpec) -> Result<Sample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let background = if rng.random_bool(0.5) {
        Background::Gradient
    } else {
        Background::Noise
    };
    let mut image = Image::new(spec.width, spec.height);
    paint_background(&mut image, background, &mut rng);
    let count = rng.random_range(spec.min_objects..=spec.max_objects);
    let mut gts: Vec<GroundTruth> = Vec::with_capacity(count);
    for _ in 0..count {
        let shape = pick_shape(background, spec.cooccurrence, &mut rng);
        let mut placed = false;
        for _ in 0..200 {
            let size = rng.random_range(spec.min_size..=spec.max_size);
            let x0 = rng.random_range(0..=spec.width - size);
            let y0 = rng.random_range(0..=spec.height - size);
            let frame = BBox::from_corners([x0 as f64, y0 as f64, (x0 + size) as f64, (y0 + size) as f64])?;
            if gts.iter().any(|g| iou(&g.bbox, &frame) > spec.max_overlap) {
                continue;
            }
            let under = mean_color(&image, x0, y0, size);
            let mut rgb = random_color(&mut rng);
            for _ in 0..50 {
                if color_distance(rgb, under) >= 180.0 {
                    break;
                }
                rgb = random_color(&mut rng);
            }
            let bbox = paint_shape(&mut image, shape, x0, y0, size, rgb).expect("shape covers pixels");
            gts.push(GroundTruth {
                class_id: shape.class_id(),
                bbox,
            });
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Infeasible(format!(
                "could not place {count} objects on a {}×{} canvas",
                spec.width, spec.height
            )));
        }
    }
    let boxes: Vec<BBox> = gts.iter().map(|g| g.bbox).collect();
    let proposals = generate_proposals(&boxes, seed ^ 0x9e37_79b9_7f4a_7c15, spec.proposals, spec.width, spec.height)?;
    Ok(Sample {
        image,
        background,
        gts,
        proposals,
    })
}

fn random_box<R: Rng + ?Sized>(rng: &mut R, w: usize, h: usize) -> BBox {
    let min = 8.min(w).min(h);
    let bw = rng.random_range(min..=w);
    let bh = rng.random_range(min..=h);
    let x = rng.random_range(0..=w - bw);
    let y = rng.random_range(0..=h - bh);
    BBox::from_corners([x as f64, y as f64, (x + bw) as f64, (y + bh) as f64]).expect("positive extents")
}

/// Integer-cornered jitter of `gt`, clipped to the image.
fn jitter<R: Rng + ?Sized>(rng: &mut R, gt: &BBox, shift: f64, scale: f64, w: usize, h: usize) -> Option<BBox> {
    let cx = gt.cx + rng.random_range(-shift..=shift) * gt.w;
    let cy = gt.cy + rng.random_range(-shift..=shift) * gt.h;
    let bw = gt.w * rng.random_range(-scale..=scale).exp();
    let bh = gt.h * rng.random_range(-scale..=scale).exp();
    let x1 = (cx - bw / 2.0).round().max(0.0);
    let y1 = (cy - bh / 2.0).round().max(0.0);
    let x2 = (cx + bw / 2.0).round().min(w as f64);
    let y2 = (cy + bh / 2.0).round().min(h as f64);
    (x2 - x1 >= 2.0 && y2 - y1 >= 2.0).then(|| BBox::from_corners([x1, y1, x2, y2]).expect("ordered"))
}

/// Per ground-truth box: 8 tight jitters (IoU ≥ 0.7), 8 loose ones
/// (IoU in [0.5, 0.7)) and 8 localization distractors (IoU in [0.1, 0.5));
/// the rest are uniform random boxes. All corners are integers.
pub fn generate_proposals(gts: &[BBox], seed: u64, n: usize, width: usize, height: usize) -> Result<Vec<BBox>> {
    if n < 2 * gts.len() {
        return Err(Error::Config(format!("{n} proposals for {} ground-truth boxes", gts.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    let buckets: [(f64, f64, f64, f64); 3] = [(0.7, 1.01, 0.08, 0.15), (0.5, 0.7, 0.2, 0.35), (0.1, 0.5, 0.6, 0.8)];
    let per_bucket = (n / gts.len().max(1) / 3).min(8);
    for gt in gts {
        for &(lo, hi, shift, scale) in &buckets {
            let mut got = 0;
            for _ in 0..400 {
                if got == per_bucket {
                    break;
                }
                if let Some(b) = jitter(&mut rng, gt, shift, scale, width, height) {
                    let o = iou(&b, gt);
                    if o >= lo && o < hi {
                        out.push(b);
                        got += 1;
                    }
                }
            }
            if got == 0 {
                warn!("proposal bucket [{lo}, {hi}) empty for {gt:?}; using a fallback box");
                out.push(fallback(gt, lo, width, height));
            }
        }
    }
    while out.len() < n {
        out.push(random_box(&mut rng, width, height));
    }
    out.truncate(n);
    Ok(out)
}

fn fallback(gt: &BBox, lo: f64, width: usize, height: usize) -> BBox {
    let snapped = |b: BBox| {
        let [x1, y1, x2, y2] = b.corners();
        BBox::from_corners([
            x1.floor().max(0.0),
            y1.floor().max(0.0),
            x2.ceil().min(width as f64),
            y2.ceil().min(height as f64),
        ])
        .expect("ordered")
    };
    let factor = if lo >= 0.7 {
        1.0
    } else if lo >= 0.5 {
        1.3
    } else {
        2.0
    };
    snapped(BBox {
        w: gt.w * factor,
        h: gt.h * factor,
        ..*gt
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchConfig {
    pub images: usize,
    pub rois: usize,
    pub fg_fraction: f64,
    pub fg_iou: f64,
    /// Background IoU band `[lo, hi)`.
    pub bg_iou: [f64; 2],
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self {
            images: 2,
            rois: 128,
            fg_fraction: 0.25,
            fg_iou: 0.5,
            bg_iou: [0.0, 0.5],
        }
    }
}

impl BatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.images == 0 || !self.rois.is_multiple_of(self.images) || self.rois == 0 {
            return Err(Error::Config("rois must be a positive multiple of images".into()));
        }
        if !(0.0..=1.0).contains(&self.fg_fraction) {
            return Err(Error::Config("fg_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn per_image(&self) -> (usize, usize) {
        let per = self.rois / self.images;
        let fg = (per as f64 * self.fg_fraction).round() as usize;
        (fg, per - fg)
    }
}

/// Sampled RoIs of one image with raw (unnormalized) targets.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRois {
    pub rois: Vec<BBox>,
    pub targets: Vec<RoiTarget>,
}

/// Label of `proposal`: the class of its best-overlapping ground truth
/// when that IoU exceeds `fg_iou`, else background.
pub fn label_proposal(proposal: &BBox, gts: &[GroundTruth], fg_iou: f64) -> (RoiTarget, f64) {
    let mut best = (0.0, None);
    for g in gts {
        let o = iou(proposal, &g.bbox);
        if o > best.0 {
            best = (o, Some(g));
        }
    }
    match best {
        (o, Some(g)) if o > fg_iou => (
            RoiTarget {
                label: g.class_id,
                target: encode_target(proposal, &g.bbox),
            },
            o,
        ),
        (o, _) => (
            RoiTarget {
                label: 0,
                target: [0.0; 4],
            },
            o,
        ),
    }
}

/// Draws the foreground/background RoIs of one image. Short foreground
/// pools are topped up with fresh tight jitters; short background pools
/// are drawn with replacement.
pub fn sample_rois<R: Rng + ?Sized>(sample: &Sample, cfg: &BatchConfig, rng: &mut R) -> ImageRois {
    let (n_fg, n_bg) = cfg.per_image();
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for p in &sample.proposals {
        let (t, o) = label_proposal(p, &sample.gts, cfg.fg_iou);
        if t.label > 0 {
            fg.push((*p, t));
        } else if o >= cfg.bg_iou[0] && o < cfg.bg_iou[1] {
            bg.push((*p, t));
        }
    }
    fg.shuffle(rng);
    bg.shuffle(rng);
    fg.truncate(n_fg);
    if fg.len() < n_fg && !sample.gts.is_empty() {
        warn!("only {} foreground proposals; refilling from jitters", fg.len());
        let (w, h) = (sample.image.width, sample.image.height);
        let mut tries = 0;
        while fg.len() < n_fg && tries < 10_000 {
            tries += 1;
            let g = &sample.gts[rng.random_range(0..sample.gts.len())];
            if let Some(b) = jitter(rng, &g.bbox, 0.05, 0.1, w, h) {
                let (t, _) = label_proposal(&b, &sample.gts, cfg.fg_iou);
                if t.label > 0 {
                    fg.push((b, t));
                }
            }
        }
    }
    let mut picked_bg: Vec<(BBox, RoiTarget)> = bg.iter().take(n_bg).copied().collect();
    while picked_bg.len() < n_bg && !bg.is_empty() {
        picked_bg.push(bg[rng.random_range(0..bg.len())]);
    }
    let (rois, targets) = fg.into_iter().chain(picked_bg).unzip();
    ImageRois { rois, targets }
}

/// RoIs for every image of a minibatch, in image order.
pub fn sample_minibatch<R: Rng + ?Sized>(samples: &[&Sample], cfg: &BatchConfig, rng: &mut R) -> Result<Vec<ImageRois>> {
    if samples.len() != cfg.images {
        return Err(Error::Contract(format!(
            "minibatch needs {} images, got {}",
            cfg.images,
            samples.len()
        )));
    }
    Ok(samples.iter().map(|s| sample_rois(s, cfg, rng)).collect())
}

/// Deterministic seed of image `index` of a corpus.
pub fn image_seed(corpus_seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(corpus_seed);
    rng.set_stream(index as u64 + 1);
    rng.random()
}

pub fn generate_corpus(spec: &SceneSpec, seed: u64, count: usize) -> Result<Vec<Sample>> {
    (0..count).map(|i| generate_image(image_seed(seed, i), spec)).collect()
}

#[derive(Serialize, Deserialize)]
struct IndexLine {
    image_id: usize,
    background: Background,
}

#[derive(Serialize, Deserialize)]
struct BoxLine {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    class_id: Option<usize>,
    #[serde(rename = "box")]
    corners: [f64; 4],
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, &r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: format!("line {}: {e}", n + 1),
        })?);
    }
    Ok(out)
}

/// Writes `dir/index.jsonl` plus, per image, `NNNNNN.ppm`,
/// `NNNNNN.gt.jsonl` and `NNNNNN.proposals.jsonl`.
pub fn save_corpus(samples: &[Sample], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, s) in samples.iter().enumerate() {
        s.image.write_ppm(&dir.join(format!("{i:06}.ppm")))?;
        write_jsonl(
            &dir.join(format!("{i:06}.gt.jsonl")),
            s.gts.iter().map(|g| BoxLine {
                class_id: Some(g.class_id),
                corners: g.bbox.corners(),
            }),
        )?;
        write_jsonl(
            &dir.join(format!("{i:06}.proposals.jsonl")),
            s.proposals.iter().map(|p| BoxLine {
                class_id: None,
                corners: p.corners(),
            }),
        )?;
    }
    write_jsonl(
        &dir.join("index.jsonl"),
        samples.iter().enumerate().map(|(image_id, s)| IndexLine {
            image_id,
            background: s.background,
        }),
    )
}

pub fn load_corpus(dir: &Path) -> Result<Vec<Sample>> {
    let index: Vec<IndexLine> = read_jsonl(&dir.join("index.jsonl"))?;
    let mut out = Vec::with_capacity(index.len());
    for (i, entry) in index.iter().enumerate() {
        if entry.image_id != i {
            return Err(Error::Parse {
                path: dir.join("index.jsonl"),
                message: format!("expected image {i}, found {}", entry.image_id),
            });
        }
        let image = Image::read_ppm(&dir.join(format!("{i:06}.ppm")))?;
        let gt_path = dir.join(format!("{i:06}.gt.jsonl"));
        let gts = read_jsonl::<BoxLine>(&gt_path)?
            .into_iter()
            .map(|b| {
                let class_id = b.class_id.ok_or_else(|| Error::Parse {
                    path: gt_path.clone(),
                    message: "ground truth without class_id".into(),
                })?;
                Ok(GroundTruth {
                    class_id,
                    bbox: BBox::from_corners(b.corners)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let proposals = read_jsonl::<BoxLine>(&dir.join(format!("{i:06}.proposals.jsonl")))?
            .into_iter()
            .map(|b| BBox::from_corners(b.corners))
            .collect::<Result<Vec<_>>>()?;
        out.push(Sample {
            image,
            background: entry.background,
            gts,
            proposals,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_scene() {
        let spec = SceneSpec::default();
        let a = generate_image(11, &spec).unwrap();
        let b = generate_image(11, &spec).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.image, generate_image(12, &spec).unwrap().image);
    }

    #[test]
    fn single_object_scene() {
        let spec = SceneSpec {
            max_objects: 1,
            ..SceneSpec::default()
        };
        for seed in 0..20 {
            let s = generate_image(seed, &spec).unwrap();
            assert_eq!(s.gts.len(), 1);
            let b = s.gts[0].bbox;
            assert!(b.w >= 8.0 && b.h >= 8.0);
        }
    }

    #[test]
    fn infeasible_spec_is_rejected() {
        let spec = SceneSpec {
            width: 40,
            height: 40,
            ..SceneSpec::default()
        };
        assert!(matches!(generate_image(0, &spec), Err(Error::Infeasible(_))));
    }

    #[test]
    fn flip_is_an_involution() {
        let s = generate_image(5, &SceneSpec::default()).unwrap();
        assert_eq!(s.flip().flip(), s);
        let b = BBox::from_corners([0.0, 0.0, 10.0, 10.0]).unwrap().flip_horizontal(100.0);
        assert_eq!(b.corners(), [90.0, 0.0, 100.0, 10.0]);
    }

    #[test]
    fn ppm_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_image(8, &SceneSpec::default()).unwrap();
        let path = dir.path().join("x.ppm");
        s.image.write_ppm(&path).unwrap();
        assert_eq!(Image::read_ppm(&path).unwrap(), s.image);
    }

    #[test]
    fn corpus_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_corpus(&SceneSpec::default(), 3, 4).unwrap();
        save_corpus(&corpus, dir.path()).unwrap();
        assert_eq!(load_corpus(dir.path()).unwrap(), corpus);
    }

    #[test]
    fn batch_composition() {
        let spec = SceneSpec::default();
        let a = generate_image(1, &spec).unwrap();
        let b = generate_image(2, &spec).unwrap();
        let cfg = BatchConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = sample_minibatch(&[&a, &b], &cfg, &mut rng).unwrap();
        let labels: Vec<usize> = batch.iter().flat_map(|r| r.targets.iter().map(|t| t.label)).collect();
        assert_eq!(labels.len(), 128);
        assert_eq!(labels.iter().filter(|&&l| l > 0).count(), 32);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_minibatch(&[&a, &b], &cfg, &mut rng).unwrap(), batch);
    }
}
