//! Segmentation maps, paired scene samples and the procedural toy world.
//!
//! The toy world paints rectangles of fixed reference colours over a
//! background according to a small list of layout rules. Its layout
//! distribution is known by construction, which makes it usable as a
//! ground truth when checking what the generators learned.

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::rng;
use ndarray::{Array3, Array4, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

/// Integer class map `H×W` with labels in `[0, K)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegMap {
    k: usize,
    h: usize,
    w: usize,
    labels: Vec<u8>,
}

impl SegMap {
    pub fn new(k: usize, h: usize, w: usize, labels: Vec<u8>) -> Result<Self> {
        if k == 0 || k > 256 {
            return Err(Error::Argument(format!("class count {k} outside [1, 256]")));
        }
        if labels.len() != h * w {
            return Err(Error::Argument(format!(
                "segmap has {} labels, expected {h}x{w}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= k) {
            return Err(Error::Argument(format!("label {bad} outside [0, {k})")));
        }
        Ok(SegMap { k, h, w, labels })
    }

    pub fn constant(k: usize, h: usize, w: usize, class: u8) -> Result<Self> {
        Self::new(k, h, w, vec![class; h * w])
    }

    pub fn from_fn(k: usize, h: usize, w: usize, f: impl Fn(usize, usize) -> u8) -> Result<Self> {
        let labels = (0..h * w).map(|i| f(i / w, i % w)).collect();
        Self::new(k, h, w, labels)
    }

    pub fn k(&self) -> usize {
        self.k
    }
    pub fn height(&self) -> usize {
        self.h
    }
    pub fn width(&self) -> usize {
        self.w
    }
    pub fn labels(&self) -> &[u8] {
        &self.labels
    }
    pub fn get(&self, i: usize, j: usize) -> usize {
        self.labels[i * self.w + j] as usize
    }
}

/// RGB image `H×W×3`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    /// row-major HWC
    pub data: Vec<f64>,
}

impl Image {
    pub fn pixel(&self, i: usize, j: usize) -> [f64; 3] {
        let o = (i * self.w + j) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    /// Build from a `[3, H, W]` tensor, clamping into `[0, 1]`.
    pub fn from_chw(t: &Tensor) -> Image {
        let s = t.shape();
        assert_eq!(s.len(), 3, "expected a [3, H, W] tensor");
        let (h, w) = (s[1], s[2]);
        let mut data = Vec::with_capacity(h * w * 3);
        for i in 0..h {
            for j in 0..w {
                for c in 0..3 {
                    data.push(t[[c, i, j]].clamp(0.0, 1.0));
                }
            }
        }
        Image { h, w, data }
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let bytes = self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        image::RgbImage::from_raw(self.w as u32, self.h as u32, bytes).expect("buffer size")
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Image {
        Image {
            h: img.height() as usize,
            w: img.width() as usize,
            data: img.as_raw().iter().map(|&b| b as f64 / 255.0).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub image: Image,
    pub segmap: SegMap,
}

impl SceneSample {
    pub fn new(image: Image, segmap: SegMap) -> Result<Self> {
        if image.h != segmap.h || image.w != segmap.w {
            return Err(Error::Argument(format!(
                "image {}x{} does not match segmap {}x{}",
                image.h, image.w, segmap.h, segmap.w
            )));
        }
        Ok(SceneSample { image, segmap })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<SceneSample>,
    pub split: Split,
    pub k: usize,
    pub h: usize,
    pub w: usize,
}

impl Dataset {
    pub fn new(samples: Vec<SceneSample>, split: Split) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Argument("dataset needs at least one sample".into()))?;
        let (k, h, w) = (first.segmap.k, first.segmap.h, first.segmap.w);
        if let Some(bad) = samples
            .iter()
            .position(|s| s.segmap.k != k || s.segmap.h != h || s.segmap.w != w)
        {
            return Err(Error::Argument(format!("sample {bad} differs in K/H/W from sample 0")));
        }
        Ok(Dataset { samples, split, k, h, w })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn segmaps(&self) -> Vec<&SegMap> {
        self.samples.iter().map(|s| &s.segmap).collect()
    }

    pub fn images(&self) -> Vec<&Image> {
        self.samples.iter().map(|s| &s.image).collect()
    }

    /// Samples at `indices`, in that order.
    pub fn pick(&self, indices: &[usize]) -> Vec<&SceneSample> {
        indices.iter().map(|&i| &self.samples[i]).collect()
    }
}

// ---------------------------------------------------------------------------
// toy world
// ---------------------------------------------------------------------------

/// Where a rectangular object sits vertically.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anchor {
    /// Bottom edge on the horizon row.
    Horizon,
    /// Bottom edge uniformly below the horizon.
    Ground,
    /// Anywhere below the first row.
    Free,
}

/// One layout rule; rules are painted in order, later ones on top.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RegionRule {
    /// Fill every row from the horizon down with `class`. The horizon row is
    /// uniform over `[round(top_min·H), round(top_max·H)]`.
    Horizon { class: u8, top_min: f64, top_max: f64 },
    /// With probability `presence`, paint one rectangle of `class`. Sizes are
    /// fractions of the image, rounded to pixels and sampled uniformly.
    Object {
        class: u8,
        presence: f64,
        width: (f64, f64),
        height: (f64, f64),
        anchor: Anchor,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyWorldSpec {
    pub k: usize,
    pub rules: Vec<RegionRule>,
    /// 8-bit reference colour per class.
    pub class_colors: Vec<[u8; 3]>,
    pub resolution: (usize, usize),
    pub seed: u64,
}

/// Minimum per-channel (L∞) separation between reference colours.
pub const MIN_COLOR_SEPARATION: f64 = 0.2;
/// Largest per-pixel rendering noise, in 8-bit levels (12/255 ≈ 0.047).
pub const NOISE_LEVELS: i32 = 12;

const PALETTE: [[u8; 3]; 8] = [
    [102, 153, 255],
    [128, 64, 128],
    [64, 64, 64],
    [0, 160, 0],
    [255, 32, 32],
    [255, 220, 0],
    [0, 220, 220],
    [255, 255, 255],
];

/// L∞ distance between two colours, in `[0, 1]` units.
pub fn color_distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|c| (a[c] - b[c]).abs()).fold(0.0, f64::max)
}

pub fn color_f64(c: [u8; 3]) -> [f64; 3] {
    [c[0] as f64 / 255.0, c[1] as f64 / 255.0, c[2] as f64 / 255.0]
}

impl ToyWorldSpec {
    /// Street-scene-like default: sky background, ground band, then objects
    /// (building, tree, car, person, generic blobs) for classes 2..K.
    pub fn street(k: usize, resolution: (usize, usize), seed: u64) -> Self {
        let mut rules = Vec::new();
        if k >= 2 {
            rules.push(RegionRule::Horizon { class: 1, top_min: 0.4, top_max: 0.65 });
        }
        for class in 2..k {
            let rule = match class {
                2 => RegionRule::Object {
                    class: 2,
                    presence: 0.8,
                    width: (0.2, 0.45),
                    height: (0.2, 0.4),
                    anchor: Anchor::Horizon,
                },
                3 => RegionRule::Object {
                    class: 3,
                    presence: 0.6,
                    width: (0.15, 0.25),
                    height: (0.2, 0.35),
                    anchor: Anchor::Horizon,
                },
                4 => RegionRule::Object {
                    class: 4,
                    presence: 0.7,
                    width: (0.2, 0.35),
                    height: (0.12, 0.2),
                    anchor: Anchor::Ground,
                },
                5 => RegionRule::Object {
                    class: 5,
                    presence: 0.5,
                    width: (0.1, 0.15),
                    height: (0.15, 0.3),
                    anchor: Anchor::Ground,
                },
                c => RegionRule::Object {
                    class: c as u8,
                    presence: 0.4,
                    width: (0.1, 0.25),
                    height: (0.1, 0.25),
                    anchor: Anchor::Free,
                },
            };
            rules.push(rule);
        }
        let class_colors = (0..k).map(|c| PALETTE[c % PALETTE.len()]).collect();
        ToyWorldSpec { k, rules, class_colors, resolution, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config(format!("toy world needs K >= 2, got {}", self.k)));
        }
        if self.k > 256 {
            return Err(Error::Config(format!("K = {} exceeds 8-bit label storage", self.k)));
        }
        let (h, w) = self.resolution;
        if h < 2 || w < 2 {
            return Err(Error::Config(format!("resolution {h}x{w} too small")));
        }
        if self.class_colors.len() != self.k {
            return Err(Error::Config(format!(
                "{} class colours for K = {}",
                self.class_colors.len(),
                self.k
            )));
        }
        for a in 0..self.k {
            for b in a + 1..self.k {
                let d = color_distance(color_f64(self.class_colors[a]), color_f64(self.class_colors[b]));
                if d < MIN_COLOR_SEPARATION {
                    return Err(Error::Config(format!(
                        "class colours {a} and {b} are {d:.3} apart (< {MIN_COLOR_SEPARATION})"
                    )));
                }
            }
        }
        for r in &self.rules {
            let class = match r {
                RegionRule::Horizon { class, top_min, top_max } => {
                    if !(0.0..=1.0).contains(top_min) || top_max < top_min || *top_max > 1.0 {
                        return Err(Error::Config(format!("bad horizon range {top_min}..{top_max}")));
                    }
                    *class
                }
                RegionRule::Object { class, presence, width, height, .. } => {
                    let ok = |r: &(f64, f64)| r.0 > 0.0 && r.0 <= r.1 && r.1 <= 1.0;
                    if !(0.0..=1.0).contains(presence) || !ok(width) || !ok(height) {
                        return Err(Error::Config(format!("bad object rule for class {class}")));
                    }
                    *class
                }
            };
            if class == 0 || class as usize >= self.k {
                return Err(Error::Config(format!(
                    "rule paints class {class}; rules may only paint classes 1..K"
                )));
            }
        }
        Ok(())
    }

    /// Sample one layout. Row 0 is never painted, so class 0 is always present.
    pub fn sample_layout<R: Rng>(&self, rng: &mut R) -> SegMap {
        let (h, w) = self.resolution;
        let mut labels = vec![0u8; h * w];
        let mut horizon = h;
        let px = |frac: f64, n: usize| ((frac * n as f64).round() as usize).clamp(1, n);
        for rule in &self.rules {
            match *rule {
                RegionRule::Horizon { class, top_min, top_max } => {
                    let lo = px(top_min, h).max(1);
                    let hi = px(top_max, h).max(lo);
                    horizon = rng.random_range(lo..=hi);
                    for l in &mut labels[horizon * w..] {
                        *l = class;
                    }
                }
                RegionRule::Object { class, presence, width, height, anchor } => {
                    // always consume the same number of draws per rule
                    let present = rng.random::<f64>() < presence;
                    let ow = rng.random_range(px(width.0, w)..=px(width.1, w));
                    let oh = rng.random_range(px(height.0, h)..=px(height.1, h)).min(h - 1);
                    let x0 = rng.random_range(0..=w - ow);
                    let u: f64 = rng.random();
                    if !present {
                        continue;
                    }
                    let bottom = match anchor {
                        Anchor::Horizon => horizon,
                        Anchor::Ground => {
                            let span = h.saturating_sub(horizon);
                            horizon + 1 + ((u * span as f64) as usize).min(span.saturating_sub(1))
                        }
                        Anchor::Free => {
                            let lo = 1 + oh;
                            lo + ((u * (h + 1 - lo) as f64) as usize).min(h - lo)
                        }
                    }
                    .min(h);
                    let top = bottom.saturating_sub(oh).max(1);
                    for i in top..bottom {
                        for j in x0..x0 + ow {
                            labels[i * w + j] = class;
                        }
                    }
                }
            }
        }
        SegMap { k: self.k, h, w, labels }
    }

    /// Paint reference colours plus bounded uniform noise, quantized to 8 bits.
    pub fn render<R: Rng>(&self, map: &SegMap, rng: &mut R) -> Image {
        let mut data = Vec::with_capacity(map.h * map.w * 3);
        for &l in &map.labels {
            let c = self.class_colors[l as usize];
            for ch in c {
                let noise = rng.random_range(-NOISE_LEVELS..=NOISE_LEVELS);
                let v = (ch as i32 + noise).clamp(0, 255);
                data.push(v as f64 / 255.0);
            }
        }
        Image { h: map.h, w: map.w, data }
    }
}

/// Sample `n` paired scenes. Sample `i` depends only on `(spec, seed, i)`.
pub fn generate_toy_dataset(spec: &ToyWorldSpec, n: usize, seed: u64, split: Split) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Argument("need at least one sample".into()));
    }
    let samples = (0..n)
        .map(|i| {
            let mut r = rng::stream(seed, &[rng::tag("toy"), spec.seed, i as u64]);
            let segmap = spec.sample_layout(&mut r);
            let image = spec.render(&segmap, &mut r);
            SceneSample { image, segmap }
        })
        .collect();
    Dataset::new(samples, split)
}

// ---------------------------------------------------------------------------
// label utilities
// ---------------------------------------------------------------------------

/// `[K, H, W]` indicator tensor.
pub fn one_hot(map: &SegMap) -> Tensor {
    Array3::from_shape_fn((map.k, map.h, map.w), |(k, i, j)| {
        if map.get(i, j) == k {
            1.0
        } else {
            0.0
        }
    })
    .into_dyn()
}

/// `[N, K, H, W]` indicator tensor for a batch of maps of equal shape.
pub fn one_hot_batch(maps: &[&SegMap]) -> Tensor {
    let m0 = maps.first().expect("empty batch");
    Array4::from_shape_fn((maps.len(), m0.k, m0.h, m0.w), |(n, k, i, j)| {
        if maps[n].get(i, j) == k {
            1.0
        } else {
            0.0
        }
    })
    .into_dyn()
}

/// Per-pixel argmax over the class axis of a `[N, K, H, W]` tensor.
/// Ties go to the smallest class index.
pub fn argmax_maps(t: &Tensor) -> Vec<SegMap> {
    let s = t.shape();
    assert_eq!(s.len(), 4, "expected [N, K, H, W]");
    let (n, k, h, w) = (s[0], s[1], s[2], s[3]);
    (0..n)
        .map(|b| {
            let labels = (0..h * w)
                .map(|p| {
                    let (i, j) = (p / w, p % w);
                    let mut best = 0;
                    for c in 1..k {
                        if t[[b, c, i, j]] > t[[b, best, i, j]] {
                            best = c;
                        }
                    }
                    best as u8
                })
                .collect();
            SegMap { k, h, w, labels }
        })
        .collect()
}

/// Nearest-neighbour downsampling: keeps the top-left label of each cell.
pub fn downsample_labels(map: &SegMap, factor: usize) -> Result<SegMap> {
    if factor == 0 || map.h % factor != 0 || map.w % factor != 0 {
        return Err(Error::Argument(format!(
            "factor {factor} does not divide {}x{}",
            map.h, map.w
        )));
    }
    let (h, w) = (map.h / factor, map.w / factor);
    let labels = (0..h * w)
        .map(|p| map.labels[(p / w) * factor * map.w + (p % w) * factor])
        .collect();
    Ok(SegMap { k: map.k, h, w, labels })
}

/// Fraction of pixels per class over all maps.
pub fn class_histogram(maps: &[&SegMap]) -> Result<Vec<f64>> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Argument("class_histogram of an empty collection".into()))?;
    let k = first.k;
    let mut counts = vec![0u64; k];
    let mut total = 0u64;
    for m in maps {
        if m.k != k {
            return Err(Error::Argument(format!("mixed class counts {k} and {}", m.k)));
        }
        for &l in &m.labels {
            counts[l as usize] += 1;
        }
        total += m.labels.len() as u64;
    }
    Ok(counts.iter().map(|&c| c as f64 / total as f64).collect())
}

/// `[N, 3, H, W]` tensor from images of equal size.
pub fn images_to_tensor(images: &[&Image]) -> Tensor {
    let i0 = images.first().expect("empty batch");
    Array4::from_shape_fn((images.len(), 3, i0.h, i0.w), |(n, c, i, j)| {
        images[n].data[(i * i0.w + j) * 3 + c]
    })
    .into_dyn()
}

/// Split an `[N, 3, H, W]` tensor back into images.
pub fn tensor_to_images(t: &Tensor) -> Vec<Image> {
    (0..t.shape()[0])
        .map(|n| Image::from_chw(&t.index_axis(ndarray::Axis(0), n).to_owned()))
        .collect()
}

/// Colour a segmap with the palette (exact 8-bit reference colours).
pub fn colorize(map: &SegMap, colors: &[[u8; 3]]) -> Image {
    let data = map
        .labels
        .iter()
        .flat_map(|&l| color_f64(colors[l as usize]))
        .collect();
    Image { h: map.h, w: map.w, data }
}

/// Invert [`colorize`]: exact palette lookup per pixel.
pub fn decolorize(img: &image::RgbImage, colors: &[[u8; 3]]) -> Result<SegMap> {
    let labels = img
        .pixels()
        .map(|p| {
            colors
                .iter()
                .position(|c| *c == p.0)
                .map(|i| i as u8)
                .ok_or_else(|| Error::Argument(format!("colour {:?} not in palette", p.0)))
        })
        .collect::<Result<Vec<u8>>>()?;
    SegMap::new(colors.len(), img.height() as usize, img.width() as usize, labels)
}

// ---------------------------------------------------------------------------
// on-disk layout: root/{train,val}/{img,seg}/NNNNN.png + root/meta.json
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub k: usize,
    pub h: usize,
    pub w: usize,
    pub class_colors: Vec<[u8; 3]>,
    pub spec_seed: u64,
    pub rules: Vec<RegionRule>,
    pub n_train: usize,
    pub n_val: usize,
}

fn img_path(root: &Path, split: Split, kind: &str, i: usize) -> PathBuf {
    root.join(split.name()).join(kind).join(format!("{i:05}.png"))
}

pub fn save_png<P: image::Pixel<Subpixel = u8> + image::PixelWithColorType>(
    img: &image::ImageBuffer<P, Vec<u8>>,
    path: &Path,
) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image { path: path.display().to_string(), message: e.to_string() })
}

pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    save_png(&img.to_rgb8(), path)
}

/// Tile equally sized images row-major into a grid `cols` wide; empty
/// cells stay black.
pub fn tile(images: &[Image], cols: usize) -> Result<Image> {
    let first = images.first().ok_or_else(|| Error::Argument("nothing to tile".into()))?;
    let (h, w) = (first.h, first.w);
    if images.iter().any(|i| (i.h, i.w) != (h, w)) {
        return Err(Error::Argument("tiles differ in size".into()));
    }
    let cols = cols.clamp(1, images.len());
    let rows = images.len().div_ceil(cols);
    let (gh, gw) = (rows * h, cols * w);
    let mut data = vec![0.0; gh * gw * 3];
    for (n, img) in images.iter().enumerate() {
        let (r0, c0) = ((n / cols) * h, (n % cols) * w);
        for i in 0..h {
            let dst = ((r0 + i) * gw + c0) * 3;
            data[dst..dst + w * 3].copy_from_slice(&img.data[i * w * 3..(i + 1) * w * 3]);
        }
    }
    Ok(Image { h: gh, w: gw, data })
}

pub fn write_dataset(root: &Path, spec: &ToyWorldSpec, train: &Dataset, val: &Dataset) -> Result<()> {
    for ds in [train, val] {
        for kind in ["img", "seg"] {
            let dir = root.join(ds.split.name()).join(kind);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        for (i, s) in ds.samples.iter().enumerate() {
            save_png(&s.image.to_rgb8(), &img_path(root, ds.split, "img", i))?;
            let seg = image::GrayImage::from_raw(s.segmap.w as u32, s.segmap.h as u32, s.segmap.labels.clone())
                .expect("segmap buffer");
            save_png(&seg, &img_path(root, ds.split, "seg", i))?;
        }
    }
    let meta = DatasetMeta {
        k: spec.k,
        h: spec.resolution.0,
        w: spec.resolution.1,
        class_colors: spec.class_colors.clone(),
        spec_seed: spec.seed,
        rules: spec.rules.clone(),
        n_train: train.len(),
        n_val: val.len(),
    };
    let path = root.join("meta.json");
    let text = serde_json::to_string_pretty(&meta).expect("meta serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn read_meta(root: &Path) -> Result<DatasetMeta> {
    let path = root.join("meta.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Load(format!("{}: {e}", path.display())))
}

pub fn read_split(root: &Path, split: Split) -> Result<Dataset> {
    let meta = read_meta(root)?;
    let n = match split {
        Split::Train => meta.n_train,
        Split::Val => meta.n_val,
    };
    let dir = root.join(split.name());
    if n == 0 || !dir.is_dir() {
        return Err(Error::Argument(format!("dataset at {} has no {} split", root.display(), split.name())));
    }
    let open = |path: PathBuf| {
        image::open(&path).map_err(|e| Error::Image { path: path.display().to_string(), message: e.to_string() })
    };
    let samples = (0..n)
        .map(|i| {
            let img = open(img_path(root, split, "img", i))?.to_rgb8();
            let seg = open(img_path(root, split, "seg", i))?.to_luma8();
            let segmap = SegMap::new(meta.k, seg.height() as usize, seg.width() as usize, seg.into_raw())?;
            SceneSample::new(Image::from_rgb8(&img), segmap)
        })
        .collect::<Result<Vec<_>>>()?;
    let ds = Dataset::new(samples, split)?;
    if ds.h != meta.h || ds.w != meta.w {
        return Err(Error::Load(format!("images are {}x{}, meta.json says {}x{}", ds.h, ds.w, meta.h, meta.w)));
    }
    Ok(ds)
}

/// Nearest-neighbour resize of a batch of one-hot maps to `[.., h, w]`
/// (top-left subsampling, matching [`downsample_labels`]).
pub fn one_hot_at(maps: &[&SegMap], h: usize, w: usize) -> Result<Tensor> {
    let small = maps
        .iter()
        .map(|m| {
            if m.h % h != 0 || m.w % w != 0 || m.h / h != m.w / w {
                return Err(Error::Argument(format!("cannot resize {}x{} to {h}x{w}", m.h, m.w)));
            }
            downsample_labels(m, m.h / h)
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&SegMap> = small.iter().collect();
    Ok(one_hot_batch(&refs))
}

pub fn zeros4(n: usize, c: usize, h: usize, w: usize) -> Tensor {
    Tensor::zeros(IxDyn(&[n, c, h, w]))
}
