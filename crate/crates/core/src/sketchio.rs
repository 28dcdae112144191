//! Front-view sketches: structured JSON files and raster drawings.
//!
//! A raster sketch is an 8-bit grayscale image whose dark strokes outline
//! one box per block, plus a JSON sidecar listing a type label for every
//! enclosed region in scan order. A `null` sidecar entry marks a region
//! that is empty space (for example the opening under a bridge that is
//! closed off by the block below).

use crate::geometry::{BlockId, BlockLibrary};
use image::GrayImage;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::path::Path;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ParseError {
    #[error("line {line}, column {column}: {msg}")]
    Syntax { line: usize, column: usize, msg: String },
    #[error("line {line}: {msg}")]
    Field { line: usize, msg: String },
    #[error("line {line}: unknown block type label {label:?}")]
    UnknownLabel { line: usize, label: String },
    #[error("{0}")]
    Io(String),
    #[error("image: {0}")]
    Image(String),
    #[error("found {regions} enclosed regions but {labels} labels")]
    LabelMismatch { regions: usize, labels: usize },
    #[error("sketch has no enclosed regions")]
    EmptySketch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SketchSource {
    Structured,
    Raster,
}

/// One drawn box: coarse centroid and size in the front (x-z) plane.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SketchBox {
    pub id: BlockId,
    pub type_id: u32,
    pub cx: f64,
    pub cz: f64,
    pub w_hat: f64,
    pub h_hat: f64,
}

impl SketchBox {
    pub fn left(&self) -> f64 {
        self.cx - self.w_hat / 2.0
    }
    pub fn right(&self) -> f64 {
        self.cx + self.w_hat / 2.0
    }
    pub fn bottom(&self) -> f64 {
        self.cz - self.h_hat / 2.0
    }
    pub fn top(&self) -> f64 {
        self.cz + self.h_hat / 2.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sketch {
    pub boxes: Vec<SketchBox>,
    pub library: BlockLibrary,
    pub source: SketchSource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RasterConfig {
    pub dilate_px: usize,
    /// Regions smaller than this many pixels are treated as noise.
    pub min_region_px: usize,
    /// Bottom edges closer than this many pixels count as one row when
    /// ordering regions.
    pub row_tol_px: f64,
    pub target_width: f64,
}

impl Default for RasterConfig {
    fn default() -> Self {
        RasterConfig { dilate_px: 2, min_region_px: 4, row_tol_px: 3.0, target_width: 3.0 }
    }
}

#[derive(Deserialize)]
struct RawFile {
    boxes: Vec<RawBox>,
}

#[derive(Deserialize)]
struct RawBox {
    id: i64,
    #[serde(rename = "type")]
    label: String,
    cx: f64,
    cz: f64,
    w: f64,
    h: f64,
}

#[derive(Serialize)]
struct RawBoxOut<'a> {
    id: i64,
    #[serde(rename = "type")]
    label: &'a str,
    cx: f64,
    cz: f64,
    w: f64,
    h: f64,
}

fn line_of(text: &str, needle: &str) -> usize {
    text.find(needle).map_or(0, |pos| text[..pos].lines().count().max(1))
}

fn box_line(text: &str, id: i64) -> usize {
    let compact = format!("\"id\":{id}");
    let spaced = format!("\"id\": {id}");
    let l = line_of(text, &spaced);
    if l > 0 {
        l
    } else {
        line_of(text, &compact)
    }
}

/// Parses a structured sketch and normalizes it to `target_width`.
pub fn parse_structured_str(text: &str, lib: &BlockLibrary, target_width: f64) -> Result<Sketch, ParseError> {
    let raw: RawFile = serde_json::from_str(text)
        .map_err(|e| ParseError::Syntax { line: e.line(), column: e.column(), msg: e.to_string() })?;
    let mut boxes = Vec::with_capacity(raw.boxes.len());
    for b in raw.boxes {
        let t = lib.resolve_label(&b.label).map_err(|_| ParseError::UnknownLabel {
            line: line_of(text, &format!("\"{}\"", b.label)),
            label: b.label.clone(),
        })?;
        if t.id == 0 {
            return Err(ParseError::Field { line: box_line(text, b.id), msg: "the table cannot be drawn".into() });
        }
        let finite = [b.cx, b.cz, b.w, b.h].iter().all(|v| v.is_finite());
        if !finite || b.w <= 0.0 || b.h <= 0.0 {
            return Err(ParseError::Field {
                line: box_line(text, b.id),
                msg: format!("box {} needs finite coordinates and positive w, h", b.id),
            });
        }
        if boxes.iter().any(|o: &SketchBox| o.id.0 == b.id) || b.id < 0 {
            return Err(ParseError::Field { line: box_line(text, b.id), msg: format!("bad or duplicate box id {}", b.id) });
        }
        boxes.push(SketchBox { id: BlockId(b.id), type_id: t.id, cx: b.cx, cz: b.cz, w_hat: b.w, h_hat: b.h });
    }
    let sketch = Sketch { boxes, library: lib.clone(), source: SketchSource::Structured };
    Ok(normalize(&sketch, target_width))
}

pub fn parse_structured(path: &Path, lib: &BlockLibrary, target_width: f64) -> Result<Sketch, ParseError> {
    let text = std::fs::read_to_string(path).map_err(|e| ParseError::Io(format!("{}: {e}", path.display())))?;
    parse_structured_str(&text, lib, target_width)
}

/// Serializes a sketch in the structured file format.
pub fn to_structured_json(sketch: &Sketch) -> String {
    let boxes: Vec<RawBoxOut> = sketch
        .boxes
        .iter()
        .map(|b| RawBoxOut {
            id: b.id.0,
            label: sketch.library.get(b.type_id).map(|t| t.name.as_str()).unwrap_or("unknown"),
            cx: b.cx,
            cz: b.cz,
            w: b.w_hat,
            h: b.h_hat,
        })
        .collect();
    serde_json::to_string_pretty(&serde_json::json!({ "boxes": boxes })).expect("plain data serializes")
}

/// Uniform scale and translation so the union of boxes spans
/// `[-target_width/2, target_width/2]` in x and rests on `z = 0`.
pub fn normalize(sketch: &Sketch, target_width: f64) -> Sketch {
    if sketch.boxes.is_empty() {
        return sketch.clone();
    }
    let lo = sketch.boxes.iter().map(SketchBox::left).fold(f64::INFINITY, f64::min);
    let hi = sketch.boxes.iter().map(SketchBox::right).fold(f64::NEG_INFINITY, f64::max);
    let bottom = sketch.boxes.iter().map(SketchBox::bottom).fold(f64::INFINITY, f64::min);
    let scale = target_width / (hi - lo);
    let mid = (lo + hi) / 2.0;
    let boxes = sketch
        .boxes
        .iter()
        .map(|b| SketchBox {
            cx: (b.cx - mid) * scale,
            cz: (b.cz - bottom) * scale,
            w_hat: b.w_hat * scale,
            h_hat: b.h_hat * scale,
            ..b.clone()
        })
        .collect();
    Sketch { boxes, ..sketch.clone() }
}

/// An enclosed region of a raster, with its box edges at stroke centers.
/// Coordinates are in pixels with x to the right and z up.
#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    pub left: f64,
    pub right: f64,
    pub bottom: f64,
    pub top: f64,
    pub area: usize,
    /// Pixel indices (row-major) belonging to the region interior.
    pub pixels: Vec<usize>,
}

struct Grid {
    w: usize,
    h: usize,
}

impl Grid {
    fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        let (x, y) = (i % self.w, i / self.w);
        let mut n = [usize::MAX; 4];
        if x > 0 {
            n[0] = i - 1;
        }
        if x + 1 < self.w {
            n[1] = i + 1;
        }
        if y > 0 {
            n[2] = i - self.w;
        }
        if y + 1 < self.h {
            n[3] = i + self.w;
        }
        n.into_iter().filter(|&j| j != usize::MAX)
    }
}

/// Square dilation of a boolean mask by `r` pixels, done separably.
fn dilate(mask: &[bool], w: usize, h: usize, r: usize) -> Vec<bool> {
    if r == 0 {
        return mask.to_vec();
    }
    let mut rows = vec![false; mask.len()];
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            rows[y * w + x] = (lo..=hi).any(|xx| mask[y * w + xx]);
        }
    }
    let mut out = vec![false; mask.len()];
    for y in 0..h {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(h - 1);
        for x in 0..w {
            out[y * w + x] = (lo..=hi).any(|yy| rows[yy * w + x]);
        }
    }
    out
}

fn flood(start: &[usize], open: &[bool], seen: &mut [bool], grid: &Grid) -> Vec<usize> {
    let mut queue: VecDeque<usize> = VecDeque::new();
    let mut out = Vec::new();
    for &s in start {
        if open[s] && !seen[s] {
            seen[s] = true;
            queue.push_back(s);
        }
    }
    while let Some(i) = queue.pop_front() {
        out.push(i);
        for j in grid.neighbors(i) {
            if open[j] && !seen[j] {
                seen[j] = true;
                queue.push_back(j);
            }
        }
    }
    out
}

/// Walks from `start` in steps of `step` over at most `gap` non-ink pixels
/// and then across the ink run; returns the run's center index. Runs
/// longer than `max_run` are rejected since the walk then follows a
/// crossing stroke.
fn stroke_center(get: &dyn Fn(isize) -> Option<bool>, start: isize, step: isize, gap: usize, max_run: usize) -> Option<f64> {
    let mut k = start;
    let mut skipped = 0;
    while get(k) == Some(false) {
        skipped += 1;
        if skipped > gap {
            return None;
        }
        k += step;
    }
    get(k)?;
    let first = k;
    while get(k + step) == Some(true) {
        k += step;
        if (k - first).unsigned_abs() >= max_run {
            return None;
        }
    }
    Some((first + k) as f64 / 2.0)
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    Some(v[v.len() / 2])
}

/// Enclosed regions of a grayscale raster, ordered by bottom edge and then
/// left edge. Ink is any pixel darker than 128.
pub fn extract_regions(img: &GrayImage, cfg: &RasterConfig) -> Vec<Region> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 {
        return Vec::new();
    }
    let grid = Grid { w, h };
    let ink: Vec<bool> = img.pixels().map(|p| p.0[0] < 128).collect();
    let thick = dilate(&ink, w, h, cfg.dilate_px);
    let open: Vec<bool> = thick.iter().map(|b| !b).collect();
    let mut seen = vec![false; w * h];
    let border: Vec<usize> = (0..w).chain((0..w).map(|x| (h - 1) * w + x)).chain((0..h).flat_map(|y| [y * w, y * w + w - 1])).collect();
    flood(&border, &open, &mut seen, &grid);

    let mut regions = Vec::new();
    for i in 0..w * h {
        if !open[i] || seen[i] {
            continue;
        }
        let pixels = flood(&[i], &open, &mut seen, &grid);
        if pixels.len() < cfg.min_region_px {
            continue;
        }
        let (mut c0, mut c1, mut r0, mut r1) = (usize::MAX, 0, usize::MAX, 0);
        for &p in &pixels {
            let (x, y) = (p % w, p / w);
            c0 = c0.min(x);
            c1 = c1.max(x);
            r0 = r0.min(y);
            r1 = r1.max(y);
        }
        // Each edge is the median stroke center over every probe line
        // leaving the region on that side.
        let gap = cfg.dilate_px + 1;
        let max_run = 4 * cfg.dilate_px + 4;
        let fallback = (cfg.dilate_px + 1) as f64;
        let (wi, hi) = (w as isize, h as isize);
        let edge = |on_edge: &dyn Fn(usize, usize) -> bool, horizontal: bool, step: isize| -> Option<f64> {
            let centers: Vec<f64> = pixels
                .iter()
                .filter(|&&p| on_edge(p % w, p / w))
                .filter_map(|&p| {
                    let (x, y) = ((p % w) as isize, (p / w) as isize);
                    if horizontal {
                        let get = |k: isize| (0..wi).contains(&k).then(|| ink[(y * wi + k) as usize]);
                        stroke_center(&get, x + step, step, gap, max_run)
                    } else {
                        let get = |k: isize| (0..hi).contains(&k).then(|| ink[(k * wi + x) as usize]);
                        stroke_center(&get, y + step, step, gap, max_run)
                    }
                })
                .collect();
            median(centers)
        };
        let left = edge(&|x, _| x == c0, true, -1).unwrap_or(c0 as f64 - fallback);
        let right = edge(&|x, _| x == c1, true, 1).unwrap_or(c1 as f64 + fallback);
        let top_row = edge(&|_, y| y == r0, false, -1).unwrap_or(r0 as f64 - fallback);
        let bottom_row = edge(&|_, y| y == r1, false, 1).unwrap_or(r1 as f64 + fallback);
        let zmax = (h - 1) as f64;
        regions.push(Region {
            left,
            right,
            bottom: zmax - bottom_row,
            top: zmax - top_row,
            area: pixels.len(),
            pixels,
        });
    }
    let order = scan_order(&regions.iter().map(|r| (r.bottom, r.left)).collect::<Vec<_>>(), cfg.row_tol_px);
    order.into_iter().map(|i| regions[i].clone()).collect()
}

/// Order of boxes given `(bottom, left)` keys: bottoms within `tol` of the
/// previous one in sorted order share a row; rows go upward, then left to
/// right.
pub fn scan_order(keys: &[(f64, f64)], tol: f64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..keys.len()).collect();
    idx.sort_by(|&a, &b| keys[a].0.total_cmp(&keys[b].0).then(keys[a].1.total_cmp(&keys[b].1)));
    let mut row = vec![0usize; keys.len()];
    let mut current = 0;
    for w in 1..idx.len() {
        if keys[idx[w]].0 - keys[idx[w - 1]].0 > tol {
            current += 1;
        }
        row[idx[w]] = current;
    }
    idx.sort_by(|&a, &b| row[a].cmp(&row[b]).then(keys[a].1.total_cmp(&keys[b].1)).then(a.cmp(&b)));
    idx
}

/// Extracts one box per labeled region of `img` and normalizes the result.
pub fn parse_raster(
    img: &GrayImage,
    labels: &[Option<String>],
    lib: &BlockLibrary,
    cfg: &RasterConfig,
) -> Result<Sketch, ParseError> {
    let regions = extract_regions(img, cfg);
    if regions.is_empty() {
        return Err(ParseError::EmptySketch);
    }
    if regions.len() != labels.len() {
        return Err(ParseError::LabelMismatch { regions: regions.len(), labels: labels.len() });
    }
    let mut boxes = Vec::new();
    for (i, (r, label)) in regions.iter().zip(labels).enumerate() {
        let Some(label) = label else { continue };
        let t = lib
            .resolve_label(label)
            .map_err(|_| ParseError::UnknownLabel { line: i + 1, label: label.clone() })?;
        boxes.push(SketchBox {
            id: BlockId(boxes.len() as i64),
            type_id: t.id,
            cx: (r.left + r.right) / 2.0,
            cz: (r.bottom + r.top) / 2.0,
            w_hat: r.right - r.left,
            h_hat: r.top - r.bottom,
        });
    }
    if boxes.is_empty() {
        return Err(ParseError::EmptySketch);
    }
    let sketch = Sketch { boxes, library: lib.clone(), source: SketchSource::Raster };
    Ok(normalize(&sketch, cfg.target_width))
}

/// Reads a PNG and its JSON label sidecar, then calls [`parse_raster`].
pub fn parse_raster_files(
    image_path: &Path,
    labels_path: &Path,
    lib: &BlockLibrary,
    cfg: &RasterConfig,
) -> Result<Sketch, ParseError> {
    let img = image::open(image_path).map_err(|e| ParseError::Image(e.to_string()))?.to_luma8();
    let text = std::fs::read_to_string(labels_path).map_err(|e| ParseError::Io(format!("{}: {e}", labels_path.display())))?;
    let labels: Vec<Option<String>> = serde_json::from_str(&text)
        .map_err(|e| ParseError::Syntax { line: e.line(), column: e.column(), msg: e.to_string() })?;
    parse_raster(&img, &labels, lib, cfg)
}
