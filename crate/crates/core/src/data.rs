//! Segmentation datasets: synthetic stained-cell scenes, PNG directories,
//! manifests and group-aware splitting.
//!
//! On disk a dataset directory holds
//!
//! ```text
//! images/<stem>.png     8-bit RGB
//! masks/<stem>.png      8-bit grayscale, foreground >= 128
//! meta/<stem>.json      generator parameters (synthetic data only)
//! manifest.csv          stem,group,split
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, RgbImage};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Mask;
use crate::rng::{derive_stream, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Unassigned,
    Train,
    Val,
    Test,
}

impl Split {
    pub const ASSIGNED: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Unassigned => "unassigned",
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "unassigned" => Some(Split::Unassigned),
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// A filled ellipse in pixel coordinates; pixel `(row, col)` is sampled at
/// its integer coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub semi_major: f64,
    pub semi_minor: f64,
    pub angle: f64,
}

impl Ellipse {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        let (dx, dy) = (col as f64 - self.cx, row as f64 - self.cy);
        let (s, c) = self.angle.sin_cos();
        let u = (dx * c + dy * s) / self.semi_major;
        let v = (-dx * s + dy * c) / self.semi_minor;
        u * u + v * v <= 1.0
    }

    pub fn extent(&self) -> f64 {
        self.semi_major.max(self.semi_minor)
    }
}

/// Generator parameters recorded for one synthetic item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthMeta {
    pub cells_requested: usize,
    pub cells: Vec<Ellipse>,
    pub decoys: Vec<Ellipse>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegItem {
    pub stem: String,
    /// `3×H×W`, values in `[0, 1]`.
    pub image: Tensor,
    pub mask: Mask,
    pub group: u32,
    pub split: Split,
    pub synth: Option<SynthMeta>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegDataset {
    pub items: Vec<SegItem>,
    pub height: usize,
    pub width: usize,
}

impl SegDataset {
    pub fn new(items: Vec<SegItem>) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Data("dataset has no items".into()))?;
        let (h, w) = first.mask.dims();
        for item in &items {
            if item.image.shape() != [3, h, w] || item.mask.dims() != (h, w) {
                return Err(Error::Data(format!(
                    "item {} has image {:?} and mask {:?}, expected {h}×{w}",
                    item.stem,
                    item.image.shape(),
                    item.mask.dims()
                )));
            }
        }
        Ok(SegDataset {
            items,
            height: h,
            width: w,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn subset(&self, split: Split) -> Vec<&SegItem> {
        self.items.iter().filter(|i| i.split == split).collect()
    }

    pub fn groups_of(&self, split: Split) -> BTreeSet<u32> {
        self.items
            .iter()
            .filter(|i| i.split == split)
            .map(|i| i.group)
            .collect()
    }

    /// Fails if any group appears in more than one split.
    pub fn check_group_isolation(&self) -> Result<()> {
        let mut seen: BTreeMap<u32, Split> = BTreeMap::new();
        for item in &self.items {
            match seen.insert(item.group, item.split) {
                Some(prev) if prev != item.split => {
                    return Err(Error::Data(format!(
                        "group {} appears in both {} and {}",
                        item.group,
                        prev.as_str(),
                        item.split.as_str()
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub count: usize,
    pub extent: usize,
    pub groups: usize,
    /// Inclusive range of cells per image.
    pub cells: [usize; 2],
    /// Range of ellipse semi-axes in pixels.
    pub radius: [f64; 2],
    /// Chance that a cell is placed touching or overlapping the previous one.
    pub cluster_probability: f64,
    /// Inclusive range of unlabeled dark nuclei per image.
    pub decoys: [usize; 2],
    /// Foreground hue band in degrees; may wrap past 360.
    pub foreground_hue: [f64; 2],
    pub texture_amplitude: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            count: 200,
            extent: 64,
            groups: 10,
            cells: [1, 5],
            radius: [3.5, 7.0],
            cluster_probability: 0.25,
            decoys: [0, 3],
            foreground_hue: [340.0, 380.0],
            texture_amplitude: 0.06,
            noise_sigma: 0.04,
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 || self.extent < 8 || self.groups == 0 {
            return Err(Error::Config(
                "count, groups must be positive and extent at least 8".into(),
            ));
        }
        if self.cells[0] > self.cells[1] || self.decoys[0] > self.decoys[1] {
            return Err(Error::Config(
                "cell and decoy ranges must be ordered".into(),
            ));
        }
        if self.radius[0] < 2.0 || self.radius[0] > self.radius[1] {
            return Err(Error::Config(
                "radii must be ordered and at least 2 px".into(),
            ));
        }
        if 2.0 * self.radius[1] + 2.0 > self.extent as f64 {
            return Err(Error::Config("cells do not fit inside the image".into()));
        }
        if !(0.0..=1.0).contains(&self.cluster_probability)
            || self.noise_sigma < 0.0
            || self.texture_amplitude < 0.0
        {
            return Err(Error::Config(
                "probabilities and amplitudes out of range".into(),
            ));
        }
        Ok(())
    }
}

const PLACEMENT_RETRIES: usize = 64;
const ITEM_STREAM: u64 = 1;
const GROUP_STREAM: u64 = 2;

fn hsv_to_rgb(hue: f64, sat: f64, val: f64) -> [f64; 3] {
    let h = hue.rem_euclid(360.0) / 60.0;
    let c = val * sat;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = val - c;
    [r + m, g + m, b + m]
}

fn random_ellipse(rng: &mut Stream, cx: f64, cy: f64, radius: [f64; 2]) -> Ellipse {
    let a = rng.random_range(radius[0]..=radius[1]);
    let b = rng.random_range(radius[0]..=radius[1]);
    Ellipse {
        cx,
        cy,
        semi_major: a.max(b),
        semi_minor: a.min(b),
        angle: rng.random_range(0.0..PI),
    }
}

fn inside_frame(e: &Ellipse, extent: usize) -> bool {
    let r = e.extent();
    e.cx - r >= 0.0
        && e.cy - r >= 0.0
        && e.cx + r <= (extent - 1) as f64
        && e.cy + r <= (extent - 1) as f64
}

fn place_cells(cfg: &SynthConfig, rng: &mut Stream, requested: usize) -> Vec<Ellipse> {
    let extent = cfg.extent as f64;
    let mut cells: Vec<Ellipse> = Vec::with_capacity(requested);
    for _ in 0..requested {
        let clustered = !cells.is_empty() && rng.random::<f64>() < cfg.cluster_probability;
        let mut placed = None;
        for _ in 0..PLACEMENT_RETRIES {
            let candidate = if clustered {
                let prev = cells[cells.len() - 1];
                let e = random_ellipse(rng, 0.0, 0.0, cfg.radius);
                let dir = rng.random_range(0.0..2.0 * PI);
                let dist = rng.random_range(0.6..1.0) * (prev.extent() + e.extent());
                Ellipse {
                    cx: prev.cx + dist * dir.cos(),
                    cy: prev.cy + dist * dir.sin(),
                    ..e
                }
            } else {
                let cx = rng.random_range(0.0..extent);
                let cy = rng.random_range(0.0..extent);
                random_ellipse(rng, cx, cy, cfg.radius)
            };
            if !inside_frame(&candidate, cfg.extent) {
                continue;
            }
            let separated = |other: &Ellipse| {
                let d =
                    ((candidate.cx - other.cx).powi(2) + (candidate.cy - other.cy).powi(2)).sqrt();
                d >= candidate.extent() + other.extent() + 1.0
            };
            let ok = if clustered {
                cells[..cells.len() - 1].iter().all(separated)
            } else {
                cells.iter().all(separated)
            };
            if ok {
                placed = Some(candidate);
                break;
            }
        }
        cells.extend(placed);
    }
    cells
}

/// Union of the ellipse interiors.
pub fn rasterize(cells: &[Ellipse], height: usize, width: usize) -> Mask {
    let mut mask = Mask::zeros(height, width).expect("positive extent");
    for r in 0..height {
        for c in 0..width {
            if cells.iter().any(|e| e.contains(r, c)) {
                mask.set(r, c, true);
            }
        }
    }
    mask
}

struct GroupStain {
    background: [f64; 3],
    hue_shift: f64,
}

fn group_stain(seed: u64, group: u32) -> GroupStain {
    let mut rng = derive_stream(seed, &[GROUP_STREAM, group as u64]);
    let base = hsv_to_rgb(
        rng.random_range(300.0..340.0),
        rng.random_range(0.12..0.25),
        rng.random_range(0.85..0.95),
    );
    GroupStain {
        background: base,
        hue_shift: rng.random_range(-8.0..8.0),
    }
}

fn render_item(cfg: &SynthConfig, index: usize, group: u32) -> SegItem {
    let n = cfg.extent;
    let stain = group_stain(cfg.seed, group);
    let mut rng = derive_stream(cfg.seed, &[ITEM_STREAM, index as u64]);

    let requested = rng.random_range(cfg.cells[0]..=cfg.cells[1]);
    let cells = place_cells(cfg, &mut rng, requested);
    let decoy_count = rng.random_range(cfg.decoys[0]..=cfg.decoys[1]);
    let decoys: Vec<Ellipse> = (0..decoy_count)
        .map(|_| {
            let e = random_ellipse(&mut rng, 0.0, 0.0, [2.5, 4.5]);
            Ellipse {
                cx: rng.random_range(0.0..n as f64),
                cy: rng.random_range(0.0..n as f64),
                ..e
            }
        })
        .collect();

    let mut pixels = vec![[0.0f64; 3]; n * n];
    // low-frequency tissue texture
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.05..0.35),
                rng.random_range(0.05..0.35),
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(0.3..1.0),
            )
        })
        .collect();
    for r in 0..n {
        for c in 0..n {
            let t: f64 = waves
                .iter()
                .map(|&(fx, fy, ph, a)| a * (fx * c as f64 + fy * r as f64 + ph).sin())
                .sum::<f64>()
                / 3.0;
            let px = &mut pixels[r * n + c];
            for (v, &b) in px.iter_mut().zip(&stain.background) {
                *v = b + cfg.texture_amplitude * t;
            }
        }
    }
    for d in &decoys {
        let color = hsv_to_rgb(
            rng.random_range(255.0..285.0),
            rng.random_range(0.45..0.65),
            rng.random_range(0.35..0.5),
        );
        for r in 0..n {
            for c in 0..n {
                if d.contains(r, c) {
                    pixels[r * n + c] = color;
                }
            }
        }
    }
    for e in &cells {
        let hue = rng.random_range(cfg.foreground_hue[0]..=cfg.foreground_hue[1]) + stain.hue_shift;
        let color = hsv_to_rgb(
            hue,
            rng.random_range(0.6..0.85),
            rng.random_range(0.78..0.95),
        );
        for r in 0..n {
            for c in 0..n {
                if e.contains(r, c) {
                    let grain = rng.random_range(-0.06..0.06);
                    pixels[r * n + c] = [color[0] + grain, color[1] + grain, color[2] + grain];
                }
            }
        }
    }
    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut data = vec![0.0; 3 * n * n];
    for ch in 0..3 {
        for p in 0..n * n {
            let v = pixels[p][ch]
                + if cfg.noise_sigma > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
            data[ch * n * n + p] = v.clamp(0.0, 1.0);
        }
    }

    SegItem {
        stem: format!("g{group}_{index:04}"),
        image: Tensor::new(&[3, n, n], data).expect("consistent extent"),
        mask: rasterize(&cells, n, n),
        group,
        split: Split::Unassigned,
        synth: Some(SynthMeta {
            cells_requested: requested,
            cells,
            decoys,
        }),
    }
}

/// Deterministic synthetic dataset. Item `i` belongs to group `i mod groups`;
/// each group has its own background stain and hue shift.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SegDataset> {
    cfg.validate()?;
    let items = (0..cfg.count)
        .map(|i| render_item(cfg, i, (i % cfg.groups) as u32))
        .collect();
    SegDataset::new(items)
}

/// Assigns every group to exactly one split.
///
/// Groups are shuffled by `seed`, then each goes to the split whose item
/// count is furthest below its target. The last groups are reserved for
/// splits that would otherwise stay empty.
pub fn split(dataset: &mut SegDataset, ratios: [f64; 3], seed: u64) -> Result<()> {
    if ratios.iter().any(|&r| r.is_nan() || r <= 0.0)
        || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::InvalidArgument(format!(
            "split ratios {ratios:?} must be positive and sum to 1"
        )));
    }
    let mut sizes: BTreeMap<u32, usize> = BTreeMap::new();
    for item in &dataset.items {
        *sizes.entry(item.group).or_default() += 1;
    }
    if sizes.len() < 3 {
        return Err(Error::Data(format!(
            "{} groups cannot fill 3 splits",
            sizes.len()
        )));
    }
    let mut order: Vec<u32> = sizes.keys().copied().collect();
    order.shuffle(&mut derive_stream(seed, &[3]));

    let total = dataset.len() as f64;
    let targets: Vec<f64> = ratios.iter().map(|r| r * total).collect();
    let mut filled = [0usize; 3];
    let mut groups_in = [0usize; 3];
    let mut assignment = BTreeMap::new();
    for (k, g) in order.iter().enumerate() {
        let remaining = order.len() - k;
        let empty: Vec<usize> = (0..3).filter(|&s| groups_in[s] == 0).collect();
        let candidates: Vec<usize> = if remaining <= empty.len() {
            empty
        } else {
            (0..3).collect()
        };
        let mut best = candidates[0];
        for &s in &candidates[1..] {
            if targets[s] - filled[s] as f64 > targets[best] - filled[best] as f64 {
                best = s;
            }
        }
        filled[best] += sizes[g];
        groups_in[best] += 1;
        assignment.insert(*g, Split::ASSIGNED[best]);
    }
    for item in &mut dataset.items {
        item.split = assignment[&item.group];
    }
    Ok(())
}

fn to_rgb_image(image: &Tensor) -> RgbImage {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let d = image.data();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        image::Rgb([0, 1, 2].map(|c| (d[c * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8))
    })
}

fn to_gray_image(mask: &Mask) -> GrayImage {
    GrayImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        image::Luma([if mask.get(y as usize, x as usize) {
            255
        } else {
            0
        }])
    })
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes images, masks, generator sidecars and the manifest.
pub fn save_dataset(dataset: &SegDataset, dir: &Path) -> Result<()> {
    let (images, masks, meta) = (dir.join("images"), dir.join("masks"), dir.join("meta"));
    for d in [&images, &masks] {
        ensure_dir(d)?;
    }
    for item in &dataset.items {
        let p = images.join(format!("{}.png", item.stem));
        to_rgb_image(&item.image)
            .save(&p)
            .map_err(|e| Error::Image { path: p, source: e })?;
        let p = masks.join(format!("{}.png", item.stem));
        to_gray_image(&item.mask)
            .save(&p)
            .map_err(|e| Error::Image { path: p, source: e })?;
        if let Some(s) = &item.synth {
            ensure_dir(&meta)?;
            let p = meta.join(format!("{}.json", item.stem));
            let json =
                serde_json::to_string_pretty(s).map_err(|e| Error::format(&p, e.to_string()))?;
            fs::write(&p, json).map_err(|e| Error::io(&p, e))?;
        }
    }
    write_manifest(dataset, &dir.join("manifest.csv"))
}

pub fn write_manifest(dataset: &SegDataset, path: &Path) -> Result<()> {
    let mut text = String::from("stem,group,split\n");
    for item in &dataset.items {
        text.push_str(&format!(
            "{},{},{}\n",
            item.stem,
            item.group,
            item.split.as_str()
        ));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `(stem, group, split)` rows in file order.
pub fn read_manifest(path: &Path) -> Result<Vec<(String, u32, Split)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let bad = || Error::format(path, format!("line {}: expected stem,group,split", n + 1));
        if fields.len() != 3 {
            return Err(bad());
        }
        let group = fields[1].trim().parse().map_err(|_| bad())?;
        let split = Split::parse(fields[2].trim()).ok_or_else(bad)?;
        out.push((fields[0].trim().to_string(), group, split));
    }
    Ok(out)
}

fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.eq_ignore_ascii_case("png"))
            == Some(true)
        {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path.clone());
            }
        }
    }
    Ok(out)
}

/// Group id from a `g<id>_` filename prefix.
pub fn parse_group(stem: &str) -> Option<u32> {
    let rest = stem.strip_prefix('g')?;
    let (id, _) = rest.split_once('_')?;
    id.parse().ok()
}

pub fn read_rgb(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })?;
    let rgb = match img {
        DynamicImage::ImageRgb8(i) => i,
        DynamicImage::ImageRgba8(i) => DynamicImage::ImageRgba8(i).to_rgb8(),
        other => {
            return Err(Error::Data(format!(
                "{} is {:?}, expected 8-bit RGB",
                path.display(),
                other.color()
            )))
        }
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in rgb.enumerate_pixels() {
        let p = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * h * w + p] = px.0[c] as f64 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })?;
    let DynamicImage::ImageLuma8(gray) = img else {
        return Err(Error::Data(format!(
            "mask {} is not 8-bit grayscale",
            path.display()
        )));
    };
    let data = gray.pixels().map(|p| (p.0[0] >= 128) as u8).collect();
    Mask::new(gray.height() as usize, gray.width() as usize, data)
}

/// Pairs `<stem>.png` files across the two directories. Groups come from a
/// `g<id>_` prefix; other stems get singleton groups numbered after the
/// largest parsed id.
pub fn load_dataset(image_dir: &Path, mask_dir: &Path) -> Result<SegDataset> {
    let images = png_stems(image_dir)?;
    let masks = png_stems(mask_dir)?;
    if let Some(stem) = masks.keys().find(|s| !images.contains_key(*s)) {
        return Err(Error::Data(format!("mask {stem} has no matching image")));
    }
    if let Some(stem) = images.keys().find(|s| !masks.contains_key(*s)) {
        return Err(Error::Data(format!("image {stem} has no matching mask")));
    }
    if images.is_empty() {
        return Err(Error::Data(format!(
            "no PNG images in {}",
            image_dir.display()
        )));
    }
    let mut next_group = images
        .keys()
        .filter_map(|s| parse_group(s))
        .max()
        .map_or(0, |g| g + 1);
    let mut items = Vec::with_capacity(images.len());
    for (stem, ipath) in &images {
        let image = read_rgb(ipath)?;
        let mask = read_mask(&masks[stem])?;
        if image.shape()[1..] != [mask.height(), mask.width()] {
            return Err(Error::Data(format!(
                "{stem}: image {:?} and mask {:?} differ in size",
                &image.shape()[1..],
                mask.dims()
            )));
        }
        let group = parse_group(stem).unwrap_or_else(|| {
            next_group += 1;
            next_group - 1
        });
        items.push(SegItem {
            stem: stem.clone(),
            image,
            mask,
            group,
            split: Split::Unassigned,
            synth: None,
        });
    }
    SegDataset::new(items)
}

/// Loads a dataset directory, applying `manifest.csv` and `meta/` sidecars
/// when present.
pub fn load_dataset_dir(dir: &Path) -> Result<SegDataset> {
    let mut ds = load_dataset(&dir.join("images"), &dir.join("masks"))?;
    let manifest = dir.join("manifest.csv");
    if manifest.exists() {
        // manifest rows fix group, split and item order
        let rows = read_manifest(&manifest)?;
        let rank: BTreeMap<&str, usize> = rows
            .iter()
            .enumerate()
            .map(|(i, r)| (r.0.as_str(), i))
            .collect();
        for item in &mut ds.items {
            if let Some(&i) = rank.get(item.stem.as_str()) {
                item.group = rows[i].1;
                item.split = rows[i].2;
            }
        }
        ds.items
            .sort_by_key(|it| rank.get(it.stem.as_str()).copied().unwrap_or(usize::MAX));
    }
    for item in &mut ds.items {
        let p = dir.join("meta").join(format!("{}.json", item.stem));
        if p.exists() {
            let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            item.synth =
                Some(serde_json::from_str(&text).map_err(|e| Error::format(&p, e.to_string()))?);
        }
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(count: usize) -> SynthConfig {
        SynthConfig {
            count,
            extent: 32,
            groups: 4,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn single_cell_area() {
        let cfg = SynthConfig {
            count: 1,
            extent: 32,
            groups: 1,
            cells: [1, 1],
            radius: [8.0, 8.0],
            decoys: [0, 0],
            ..SynthConfig::default()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        let area = ds.items[0].mask.count() as f64;
        let disc = PI * 64.0;
        assert!((area - disc).abs() / disc < 0.10, "area {area}");
    }

    #[test]
    fn empty_scene_has_empty_mask() {
        let cfg = SynthConfig {
            cells: [0, 0],
            ..tiny(3)
        };
        let ds = generate_synthetic(&cfg).unwrap();
        assert!(ds.items.iter().all(|i| i.mask.count() == 0));
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(
            generate_synthetic(&tiny(6)).unwrap(),
            generate_synthetic(&tiny(6)).unwrap()
        );
        let other = SynthConfig { seed: 7, ..tiny(6) };
        assert_ne!(
            generate_synthetic(&tiny(6)).unwrap(),
            generate_synthetic(&other).unwrap()
        );
    }

    #[test]
    fn images_are_in_unit_range_and_masks_binary() {
        let ds = generate_synthetic(&tiny(8)).unwrap();
        for item in &ds.items {
            assert!(item.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            let meta = item.synth.as_ref().unwrap();
            assert!(meta.cells.len() <= meta.cells_requested);
        }
    }

    #[test]
    fn ten_groups_split_seven_two_one() {
        let mut ds = generate_synthetic(&SynthConfig {
            groups: 10,
            ..tiny(20)
        })
        .unwrap();
        split(&mut ds, [0.7, 0.15, 0.15], 42).unwrap();
        let counts: Vec<usize> = Split::ASSIGNED
            .iter()
            .map(|&s| ds.groups_of(s).len())
            .collect();
        assert!(counts == [7, 2, 1] || counts == [7, 1, 2], "{counts:?}");
        ds.check_group_isolation().unwrap();
        let mut again = ds.clone();
        split(&mut again, [0.7, 0.15, 0.15], 42).unwrap();
        assert_eq!(again, ds);
    }

    #[test]
    fn three_groups_one_each() {
        let mut ds = generate_synthetic(&SynthConfig {
            groups: 3,
            ..tiny(9)
        })
        .unwrap();
        split(&mut ds, [0.7, 0.15, 0.15], 1).unwrap();
        for s in Split::ASSIGNED {
            assert_eq!(ds.groups_of(s).len(), 1);
        }
    }

    #[test]
    fn split_errors() {
        let mut ds = generate_synthetic(&SynthConfig {
            groups: 2,
            ..tiny(4)
        })
        .unwrap();
        assert!(split(&mut ds, [0.7, 0.15, 0.15], 1).is_err());
        assert!(split(&mut ds, [0.7, 0.2, 0.2], 1).is_err());
    }

    #[test]
    fn group_prefix_parsing() {
        assert_eq!(parse_group("g12_0003"), Some(12));
        assert_eq!(parse_group("slide_1"), None);
        assert_eq!(parse_group("gx_1"), None);
    }

    #[test]
    fn hsv_primaries() {
        assert_eq!(hsv_to_rgb(0.0, 1.0, 1.0), [1.0, 0.0, 0.0]);
        assert_eq!(hsv_to_rgb(120.0, 1.0, 1.0), [0.0, 1.0, 0.0]);
        assert_eq!(hsv_to_rgb(360.0 + 240.0, 1.0, 1.0), [0.0, 0.0, 1.0]);
    }
}
