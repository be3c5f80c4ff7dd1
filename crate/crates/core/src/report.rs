//! Composite panels, raw grid files, evaluation records, summary tables and
//! boxplots.

use std::f64::consts::LN_2;
use std::fs;
use std::io::Write;
use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Mask};
use crate::mc::UncertaintyReduction;
use crate::metrics::{group_means, summarize, ModelMeta, ScoreSummary};
use crate::tensor::Tensor;

/// Separator width between composite panels.
pub const SEPARATOR: usize = 2;
const SEPARATOR_GRAY: u8 = 128;
const GRID_MAGIC: &str = "MCDGRID1";

/// `[0, 1] -> [0, 255]`, linear.
pub fn prob_to_gray(p: f64) -> u8 {
    (p.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// `round(255·U / ln 2)`, so maximal entropy is white.
pub fn uncertainty_to_gray(u: f64) -> u8 {
    (255.0 * (u / LN_2).clamp(0.0, 1.0)).round() as u8
}

pub fn grid_to_gray(grid: &Grid, f: impl Fn(f64) -> u8) -> GrayImage {
    GrayImage::from_fn(grid.width() as u32, grid.height() as u32, |x, y| {
        Luma([f(grid.get(y as usize, x as usize))])
    })
}

pub fn mask_to_gray(mask: &Mask) -> GrayImage {
    GrayImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        Luma([if mask.get(y as usize, x as usize) {
            255
        } else {
            0
        }])
    })
}

/// PNG output for the image buffers used here.
pub trait SavePng {
    fn save_png(&self, path: &Path) -> Result<()>;
}

impl SavePng for GrayImage {
    fn save_png(&self, path: &Path) -> Result<()> {
        self.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                source: e,
            })
    }
}

impl SavePng for RgbImage {
    fn save_png(&self, path: &Path) -> Result<()> {
        self.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                source: e,
            })
    }
}

/// One row of panels: input | truth | prediction | uncertainty, separated by
/// gray columns. The truth panel is dropped when `truth` is `None`.
pub fn render_panels(
    input: &Tensor,
    truth: Option<&Mask>,
    prediction: &Grid,
    uncertainty: &Grid,
) -> Result<RgbImage> {
    let [c, h, w] = match input.shape() {
        [c, h, w] => [*c, *h, *w],
        s => {
            return Err(Error::Shape(format!(
                "input panel must be C×H×W, got {s:?}"
            )))
        }
    };
    if c != 3 && c != 1 {
        return Err(Error::Shape(format!(
            "input panel needs 1 or 3 channels, got {c}"
        )));
    }
    let extent_ok = prediction.dims() == (h, w)
        && uncertainty.dims() == (h, w)
        && truth.is_none_or(|m| m.dims() == (h, w));
    if !extent_ok {
        return Err(Error::Shape(format!("all panels must be {h}×{w}")));
    }
    let panels = if truth.is_some() { 4 } else { 3 };
    let width = panels * w + (panels - 1) * SEPARATOR;
    let mut img = RgbImage::from_pixel(width as u32, h as u32, Rgb([SEPARATOR_GRAY; 3]));
    let d = input.data();
    let mut put = |panel: usize, f: &dyn Fn(usize, usize) -> [u8; 3]| {
        let x0 = panel * (w + SEPARATOR);
        for r in 0..h {
            for col in 0..w {
                img.put_pixel((x0 + col) as u32, r as u32, Rgb(f(r, col)));
            }
        }
    };
    let mut panel = 0;
    put(panel, &|r, col| {
        let ch = |k: usize| prob_to_gray(d[(k.min(c - 1) * h + r) * w + col]);
        [ch(0), ch(1), ch(2)]
    });
    if let Some(m) = truth {
        panel += 1;
        put(panel, &|r, col| [if m.get(r, col) { 255 } else { 0 }; 3]);
    }
    put(panel + 1, &|r, col| {
        [prob_to_gray(prediction.get(r, col)); 3]
    });
    put(panel + 2, &|r, col| {
        [uncertainty_to_gray(uncertainty.get(r, col)); 3]
    });
    Ok(img)
}

/// Row-major little-endian `f64` grid behind a text header `MCDGRID1 H W\n`.
pub fn encode_grid(grid: &Grid) -> Vec<u8> {
    let mut out = format!("{GRID_MAGIC} {} {}\n", grid.height(), grid.width()).into_bytes();
    for v in grid.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_grid(bytes: &[u8], path: &Path) -> Result<Grid> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(path, "missing grid header"))?;
    let header = std::str::from_utf8(&bytes[..nl])
        .map_err(|_| Error::format(path, "grid header is not text"))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let dims = match fields.as_slice() {
        [GRID_MAGIC, h, w] => h.parse::<usize>().ok().zip(w.parse::<usize>().ok()),
        _ => None,
    };
    let (h, w) = dims.ok_or_else(|| Error::format(path, format!("bad grid header {header:?}")))?;
    let body = &bytes[nl + 1..];
    if body.len() != h * w * 8 {
        return Err(Error::format(
            path,
            format!(
                "grid body holds {} bytes, expected {}",
                body.len(),
                h * w * 8
            ),
        ));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Grid::new(h, w, data)
}

pub fn write_grid(grid: &Grid, path: &Path) -> Result<()> {
    fs::write(path, encode_grid(grid)).map_err(|e| Error::io(path, e))
}

pub fn read_grid(path: &Path) -> Result<Grid> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_grid(&bytes, path)
}

/// Per-image scores of one model on one split, as written by `evaluate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub model: String,
    pub param_count: usize,
    pub samples: usize,
    pub seed: u64,
    pub threshold: f64,
    pub reduction: UncertaintyReduction,
    pub stems: Vec<String>,
    pub groups: Vec<u32>,
    pub dice: Vec<f64>,
    pub uncertainty: Vec<f64>,
}

impl EvaluationRecord {
    pub fn validate(&self) -> Result<()> {
        let n = self.stems.len();
        if n == 0 {
            return Err(Error::Data(format!(
                "evaluation of {} has no images",
                self.model
            )));
        }
        if self.groups.len() != n || self.dice.len() != n || self.uncertainty.len() != n {
            return Err(Error::Data(format!(
                "evaluation of {} has ragged columns",
                self.model
            )));
        }
        Ok(())
    }

    pub fn meta(&self) -> ModelMeta {
        ModelMeta::new(&self.model, self.param_count)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json =
            serde_json::to_string_pretty(self).map_err(|e| Error::format(path, e.to_string()))?;
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let rec: Self =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        rec.validate()?;
        Ok(rec)
    }
}

/// Compact parameter count: `494K`, `7.2M`, `24M`.
pub fn format_size(params: usize) -> String {
    let n = params as f64;
    if n < 1e6 {
        format!("{}K", (n / 1e3).round())
    } else if n < 1e7 {
        format!("{:.1}M", n / 1e6)
    } else {
        format!("{}M", (n / 1e6).round())
    }
}

pub fn table_header() -> &'static str {
    "Model | Size | Median | Min | Max"
}

pub fn format_row(s: &ScoreSummary) -> String {
    format!(
        "{} | {} | {:.3} | {:.3} | {:.3}",
        s.model,
        format_size(s.param_count),
        s.median,
        s.min,
        s.max
    )
}

pub fn format_table(rows: &[ScoreSummary]) -> String {
    let mut out = String::from(table_header());
    out.push('\n');
    for r in rows {
        out.push_str(&format_row(r));
        out.push('\n');
    }
    out
}

/// Quartiles use linear interpolation between order statistics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoxStats {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub whisker_lo: f64,
    pub whisker_hi: f64,
    pub outliers: Vec<f64>,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Whiskers reach the most extreme scores within 1.5 IQR of the box.
pub fn box_stats(scores: &[f64]) -> Result<BoxStats> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument(
            "boxplot of an empty score list".into(),
        ));
    }
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    let (q1, median, q3) = (quantile(&s, 0.25), quantile(&s, 0.5), quantile(&s, 0.75));
    let iqr = q3 - q1;
    let (lo_fence, hi_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let inside: Vec<f64> = s
        .iter()
        .copied()
        .filter(|v| (lo_fence..=hi_fence).contains(v))
        .collect();
    Ok(BoxStats {
        q1,
        median,
        q3,
        whisker_lo: inside.first().copied().unwrap_or(q1),
        whisker_hi: inside.last().copied().unwrap_or(q3),
        outliers: s
            .iter()
            .copied()
            .filter(|v| !(lo_fence..=hi_fence).contains(v))
            .collect(),
    })
}

/// Long-format raw scores: `model,metric,stem,group,value`.
pub fn boxplot_csv(records: &[EvaluationRecord]) -> String {
    let mut out = String::from("model,metric,stem,group,value\n");
    for rec in records {
        for (metric, values) in [("dice", &rec.dice), ("uncertainty", &rec.uncertainty)] {
            for ((stem, g), v) in rec.stems.iter().zip(&rec.groups).zip(values.iter()) {
                out.push_str(&format!("{},{metric},{stem},{g},{v:.17e}\n", rec.model));
            }
        }
    }
    out
}

const PLOT_H: u32 = 240;
const BOX_W: u32 = 40;
const SLOT_W: u32 = 80;
const MARGIN: u32 = 20;

/// Side-by-side vertical boxplots on a shared axis spanning the data range.
/// Outliers are drawn as small crosses.
pub fn render_boxplot(series: &[Vec<f64>]) -> Result<RgbImage> {
    let stats: Vec<BoxStats> = series.iter().map(|s| box_stats(s)).collect::<Result<_>>()?;
    if stats.is_empty() {
        return Err(Error::InvalidArgument(
            "boxplot needs at least one series".into(),
        ));
    }
    let all = series.iter().flatten();
    let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let width = stats.len() as u32 * SLOT_W + 2 * MARGIN;
    let height = PLOT_H + 2 * MARGIN;
    let mut img = RgbImage::from_pixel(width, height, Rgb([255; 3]));
    let y_of = |v: f64| MARGIN + PLOT_H - (((v - lo) / span) * PLOT_H as f64).round() as u32;
    let black = Rgb([0, 0, 0]);
    let hline = |img: &mut RgbImage, x0: u32, x1: u32, y: u32| {
        (x0..=x1).for_each(|x| img.put_pixel(x, y, black))
    };
    for (k, b) in stats.iter().enumerate() {
        let cx = MARGIN + k as u32 * SLOT_W + SLOT_W / 2;
        let (x0, x1) = (cx - BOX_W / 2, cx + BOX_W / 2);
        let (y1, ym, y3) = (y_of(b.q1), y_of(b.median), y_of(b.q3));
        for y in y3..=y1 {
            img.put_pixel(x0, y, black);
            img.put_pixel(x1, y, black);
        }
        hline(&mut img, x0, x1, y1);
        hline(&mut img, x0, x1, y3);
        for x in x0..=x1 {
            img.put_pixel(x, ym, Rgb([200, 0, 0]));
        }
        let (wl, wh) = (y_of(b.whisker_lo), y_of(b.whisker_hi));
        (y1..=wl)
            .chain(wh..=y3)
            .for_each(|y| img.put_pixel(cx, y, black));
        hline(&mut img, cx - BOX_W / 4, cx + BOX_W / 4, wl);
        hline(&mut img, cx - BOX_W / 4, cx + BOX_W / 4, wh);
        for &o in &b.outliers {
            let y = y_of(o);
            for d in 0..=2u32 {
                for (x, yy) in [
                    (cx + d, y + d),
                    (cx - d, y + d),
                    (cx + d, y - d.min(y)),
                    (cx - d, y - d.min(y)),
                ] {
                    img.put_pixel(x, yy.min(height - 1), black);
                }
            }
        }
    }
    Ok(img)
}

/// Text and CSV artifacts produced by [`cmd_report`].
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub dice: Vec<ScoreSummary>,
    pub uncertainty: Vec<ScoreSummary>,
    pub text: String,
    pub boxplot_csv: String,
}

fn group_table(title: &str, rec: &EvaluationRecord, values: &[f64]) -> Result<String> {
    let mut out = format!("{title} by group, {}\ngroup | mean\n", rec.model);
    for (g, m) in group_means(values, &rec.groups)? {
        out.push_str(&format!("{g} | {m:.3}\n"));
    }
    Ok(out)
}

/// Dice and uncertainty tables, per-group means and raw scores for every
/// evaluated model.
pub fn cmd_report(records: &[EvaluationRecord]) -> Result<Report> {
    if records.is_empty() {
        return Err(Error::Data(
            "report needs at least one evaluation record".into(),
        ));
    }
    let mut dice = Vec::new();
    let mut uncertainty = Vec::new();
    for rec in records {
        rec.validate()?;
        dice.push(summarize(&rec.dice, rec.meta())?);
        uncertainty.push(summarize(&rec.uncertainty, rec.meta())?);
    }
    let mut text = format!(
        "Test Dice\n{}\nModel uncertainty (nats)\n{}",
        format_table(&dice),
        format_table(&uncertainty)
    );
    for rec in records {
        text.push('\n');
        text.push_str(&group_table("Dice", rec, &rec.dice)?);
        text.push('\n');
        text.push_str(&group_table("Uncertainty", rec, &rec.uncertainty)?);
    }
    Ok(Report {
        dice,
        uncertainty,
        text,
        boxplot_csv: boxplot_csv(records),
    })
}

/// Writes `report.txt`, `scores.csv` and, when asked, the two boxplot PNGs.
pub fn write_report(
    report: &Report,
    records: &[EvaluationRecord],
    dir: &Path,
    plots: bool,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = dir.join("report.txt");
    let mut f = fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
    f.write_all(report.text.as_bytes())
        .map_err(|e| Error::io(&p, e))?;
    let p = dir.join("scores.csv");
    fs::write(&p, &report.boxplot_csv).map_err(|e| Error::io(&p, e))?;
    if plots {
        let dice: Vec<Vec<f64>> = records.iter().map(|r| r.dice.clone()).collect();
        render_boxplot(&dice)?.save_png(&dir.join("dice_boxplot.png"))?;
        let unc: Vec<Vec<f64>> = records.iter().map(|r| r.uncertainty.clone()).collect();
        render_boxplot(&unc)?.save_png(&dir.join("uncertainty_boxplot.png"))?;
    }
    Ok(())
}
