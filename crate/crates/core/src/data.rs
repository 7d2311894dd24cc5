//! Dataset I/O in the MaSTr1325 directory layout, IMU horizon masks and a
//! seeded generator of synthetic maritime scenes.
//!
//! A dataset root contains:
//!
//! ```text
//! images/<stem>.png       8-bit RGB
//! masks/<stem>.png        8-bit gray, labels 0 obstacle, 1 water, 2 sky, 4 ignore
//! imus/<stem>.png         8-bit gray, 1 (or 255) above the horizon, 0 below
//! annotations/<stem>.json optional FrameAnnotation
//! dataset.json            optional manifest
//! ```

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, validation_err, Error, Result};
use crate::losses::{IGNORE, OBSTACLE, SKY, WATER};
use crate::par;
use crate::tensor::{Shape, Tensor};

pub const FORMAT_VERSION: u32 = 1;

/// Obstacle bounding box with its danger-zone flag.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Obstacle {
    /// `[x, y, w, h]` in pixels; `x, y` is the top-left corner.
    pub bbox: [usize; 4],
    pub danger_zone: bool,
}

impl Obstacle {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        let [x, y, w, h] = self.bbox;
        col >= x && col < x + w && row >= y && row < y + h
    }

    pub fn area(&self) -> usize {
        self.bbox[2] * self.bbox[3]
    }
}

/// Ground truth for detection evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameAnnotation {
    pub width: usize,
    pub height: usize,
    /// `[column, row]` samples of the water edge, columns strictly increasing.
    pub water_edge: Vec<[usize; 2]>,
    pub obstacles: Vec<Obstacle>,
    /// Rows at or below this index belong to the danger zone.
    pub danger_zone_row: usize,
    /// Horizon endpoints `[[x0, y0], [x1, y1]]` used to build the IMU mask.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<[[f64; 2]; 2]>,
}

impl FrameAnnotation {
    pub fn validate(&self) -> Result<()> {
        for o in &self.obstacles {
            let [x, y, w, h] = o.bbox;
            if w == 0 || h == 0 || x + w > self.width || y + h > self.height {
                return Err(validation_err!("bbox {:?} outside {}x{} image", o.bbox, self.width, self.height));
            }
        }
        if self.water_edge.windows(2).any(|p| p[1][0] <= p[0][0]) {
            return Err(validation_err!("water-edge columns are not strictly increasing"));
        }
        if let Some(p) = self.water_edge.iter().find(|p| p[0] >= self.width || p[1] >= self.height) {
            return Err(validation_err!("water-edge sample {p:?} outside the image"));
        }
        Ok(())
    }
}

/// One image with its labels, IMU mask and optional annotation.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub id: String,
    pub height: usize,
    pub width: usize,
    /// `[1, 3, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    /// `H·W` labels, row-major.
    pub labels: Vec<u8>,
    /// `H·W` binary IMU values.
    pub imu: Vec<u8>,
    pub annotation: Option<FrameAnnotation>,
}

impl SegSample {
    pub fn imu_tensor(&self) -> Tensor {
        let data = self.imu.iter().map(|&v| v as f64).collect();
        Tensor::from_vec(Shape::new(1, 1, self.height, self.width), data).expect("imu length checked on build")
    }

    pub fn validate(&self) -> Result<()> {
        let hw = self.height * self.width;
        if self.image.shape() != Shape::new(1, 3, self.height, self.width) {
            return Err(validation_err!("{}: image shape {}", self.id, self.image.shape()));
        }
        if self.labels.len() != hw || self.imu.len() != hw {
            return Err(validation_err!("{}: mask sizes do not match the image", self.id));
        }
        if let Some(v) = self.labels.iter().find(|&&l| !matches!(l, OBSTACLE | WATER | SKY | IGNORE)) {
            return Err(validation_err!("{}: label {v} outside {{0, 1, 2, 4}}", self.id));
        }
        if self.imu.iter().any(|&v| v > 1) {
            return Err(validation_err!("{}: IMU mask is not binary", self.id));
        }
        if let Some(a) = &self.annotation {
            a.validate()?;
        }
        Ok(())
    }

    fn image_bytes(&self) -> Vec<u8> {
        let hw = self.height * self.width;
        let d = self.image.data();
        (0..hw)
            .flat_map(|p| (0..3).map(move |c| (d[c * hw + p] * 255.0).round().clamp(0.0, 255.0) as u8))
            .collect()
    }
}

/// Stacks samples into `(images [n,3,H,W], imus [n,1,H,W], labels)`.
pub fn batch(samples: &[&SegSample]) -> Result<(Tensor, Tensor, Vec<u8>)> {
    let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    let imus: Vec<Tensor> = samples.iter().map(|s| s.imu_tensor()).collect();
    let labels = samples.iter().flat_map(|s| s.labels.iter().copied()).collect();
    Ok((Tensor::stack(&images)?, Tensor::stack(&imus.iter().collect::<Vec<_>>())?, labels))
}

// ----- IMU masks ------------------------------------------------------------

/// Binary mask with 1 at pixels `(row, col)` strictly above the line through
/// `p0` and `p1` (given as `[x, y]` = `[col, row]`, rows growing downward).
pub fn imu_mask_from_horizon(p0: [f64; 2], p1: [f64; 2], height: usize, width: usize) -> Result<Vec<u8>> {
    let (a, b) = if p0[0] <= p1[0] { (p0, p1) } else { (p1, p0) };
    let dx = b[0] - a[0];
    if dx <= 0.0 {
        return Err(validation_err!("horizon endpoints {p0:?}, {p1:?} do not define a non-vertical line"));
    }
    let dy = b[1] - a[1];
    let mut mask = vec![0u8; height * width];
    for r in 0..height {
        for c in 0..width {
            // negative cross product: the pixel lies above the line
            let cross = dx * (r as f64 - a[1]) - dy * (c as f64 - a[0]);
            mask[r * width + c] = (cross < 0.0) as u8;
        }
    }
    Ok(mask)
}

// ----- PNG ------------------------------------------------------------------

struct Raster {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

fn image_err(path: &Path, message: impl ToString) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: message.to_string(),
    }
}

fn read_png(path: &Path) -> Result<Raster> {
    let file = BufReader::new(File::open(path)?);
    let mut decoder = png::Decoder::new(file);
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(|e| image_err(path, e))?;
    let size = reader.output_buffer_size().ok_or_else(|| image_err(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| image_err(path, e))?;
    buf.truncate(info.buffer_size());
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(image_err(path, "unexpanded palette image")),
    };
    Ok(Raster {
        width: info.width as usize,
        height: info.height as usize,
        channels,
        data: buf,
    })
}

fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().map_err(|e| image_err(path, e))?;
    w.write_image_data(data).map_err(|e| image_err(path, e))?;
    w.finish().map_err(|e| image_err(path, e))?;
    Ok(())
}

/// Single-channel view of a raster; fails on colour images.
fn gray(r: Raster, path: &Path) -> Result<Vec<u8>> {
    match r.channels {
        1 => Ok(r.data),
        2 => Ok(r.data.chunks(2).map(|p| p[0]).collect()),
        _ => Err(image_err(path, "expected a single-channel image")),
    }
}

/// Reads a single-channel 8-bit label mask; returns `(height, width, labels)`.
pub fn read_mask(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let r = read_png(path)?;
    let (h, w) = (r.height, r.width);
    Ok((h, w, gray(r, path)?))
}

/// Writes a row-major label mask as a grayscale PNG.
pub fn write_mask(path: &Path, height: usize, width: usize, labels: &[u8]) -> Result<()> {
    if labels.len() != height * width {
        return Err(validation_err!("mask of {} values for {height}x{width}", labels.len()));
    }
    write_png(path, width, height, png::ColorType::Grayscale, labels)
}

// ----- dataset directories --------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub generator: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthConfig>,
    pub samples: Vec<String>,
}

/// Loaded samples plus non-fatal issues found while reading them.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub samples: Vec<SegSample>,
    pub warnings: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn paths(root: &Path, stem: &str) -> [PathBuf; 4] {
    [
        root.join("images").join(format!("{stem}.png")),
        root.join("masks").join(format!("{stem}.png")),
        root.join("imus").join(format!("{stem}.png")),
        root.join("annotations").join(format!("{stem}.json")),
    ]
}

/// Stems of all images under `root/images`, sorted.
pub fn list_stems(root: &Path) -> Result<Vec<String>> {
    let dir = root.join("images");
    if !dir.is_dir() {
        return Err(Error::Dataset {
            root: root.to_path_buf(),
            problems: vec!["missing images/ directory".into()],
        });
    }
    let mut stems = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "png") {
            if let Some(s) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(s.to_string());
            }
        }
    }
    stems.sort();
    Ok(stems)
}

/// Loads the samples named in `split`, or every image under `images/`.
pub fn load_dataset(root: &Path, split: Option<&[String]>) -> Result<Dataset> {
    let stems = match split {
        Some(s) => s.to_vec(),
        None => list_stems(root)?,
    };
    let mut problems = Vec::new();
    for stem in &stems {
        let [img, mask, imu, _] = paths(root, stem);
        for (p, what) in [(img, "image"), (mask, "mask"), (imu, "IMU mask")] {
            if !p.is_file() {
                problems.push(format!("{stem}: missing {what} {}", p.display()));
            }
        }
    }
    if !problems.is_empty() {
        return Err(Error::Dataset {
            root: root.to_path_buf(),
            problems,
        });
    }
    let loaded = par::map(stems.len(), |i| load_sample(root, &stems[i]));
    let mut ds = Dataset::default();
    for r in loaded {
        let (sample, warnings) = r?;
        ds.samples.push(sample);
        ds.warnings.extend(warnings);
    }
    for w in &ds.warnings {
        log::warn!("{w}");
    }
    Ok(ds)
}

fn load_sample(root: &Path, stem: &str) -> Result<(SegSample, Vec<String>)> {
    let [img_p, mask_p, imu_p, ann_p] = paths(root, stem);
    let img = read_png(&img_p)?;
    let (w, h) = (img.width, img.height);
    let hw = w * h;
    let mut image = vec![0.0; 3 * hw];
    for p in 0..hw {
        for c in 0..3 {
            let v = match img.channels {
                1 | 2 => img.data[p * img.channels],
                _ => img.data[p * img.channels + c],
            };
            image[c * hw + p] = v as f64 / 255.0;
        }
    }
    let mut warnings = Vec::new();
    let mask_r = read_png(&mask_p)?;
    let imu_r = read_png(&imu_p)?;
    for (r, p) in [(&mask_r, &mask_p), (&imu_r, &imu_p)] {
        if (r.width, r.height) != (w, h) {
            return Err(image_err(p, format!("size {}x{} differs from image {w}x{h}", r.width, r.height)));
        }
    }
    let mut labels = gray(mask_r, &mask_p)?;
    let unknown = labels.iter().filter(|&&l| !matches!(l, OBSTACLE | WATER | SKY | IGNORE)).count();
    if unknown > 0 {
        warnings.push(format!("{stem}: {unknown} pixels with unknown labels remapped to ignore"));
        for l in labels.iter_mut().filter(|l| !matches!(**l, OBSTACLE | WATER | SKY | IGNORE)) {
            *l = IGNORE;
        }
    }
    let raw_imu = gray(imu_r, &imu_p)?;
    let imu = if raw_imu.iter().all(|&v| v <= 1) {
        raw_imu
    } else if raw_imu.iter().all(|&v| v == 0 || v == 255) {
        raw_imu.iter().map(|&v| (v == 255) as u8).collect()
    } else {
        return Err(image_err(&imu_p, "IMU mask is not binary"));
    };
    let annotation = if ann_p.is_file() {
        let a: FrameAnnotation = serde_json::from_reader(BufReader::new(File::open(&ann_p)?))?;
        a.validate()?;
        Some(a)
    } else {
        None
    };
    let sample = SegSample {
        id: stem.to_string(),
        height: h,
        width: w,
        image: Tensor::from_vec(Shape::new(1, 3, h, w), image)?,
        labels,
        imu,
        annotation,
    };
    Ok((sample, warnings))
}

/// Writes one sample into the dataset layout under `root`.
pub fn write_sample(root: &Path, sample: &SegSample) -> Result<()> {
    sample.validate()?;
    for d in ["images", "masks", "imus", "annotations"] {
        fs::create_dir_all(root.join(d))?;
    }
    let [img_p, mask_p, imu_p, ann_p] = paths(root, &sample.id);
    let (w, h) = (sample.width, sample.height);
    write_png(&img_p, w, h, png::ColorType::Rgb, &sample.image_bytes())?;
    write_png(&mask_p, w, h, png::ColorType::Grayscale, &sample.labels)?;
    write_png(&imu_p, w, h, png::ColorType::Grayscale, &sample.imu)?;
    if let Some(a) = &sample.annotation {
        let mut text = serde_json::to_string_pretty(a)?;
        text.push('\n');
        fs::write(ann_p, text)?;
    }
    Ok(())
}

pub fn write_manifest(root: &Path, manifest: &Manifest) -> Result<()> {
    fs::create_dir_all(root)?;
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    fs::write(root.join("dataset.json"), text)?;
    Ok(())
}

pub fn read_manifest(root: &Path) -> Result<Option<Manifest>> {
    let p = root.join("dataset.json");
    if !p.is_file() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_reader(BufReader::new(File::open(p)?))?))
}

// ----- synthetic scenes -----------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub n: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n: 100,
            height: 96,
            width: 128,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(config_err!("synthetic scenes need at least 16x16 pixels"));
        }
        Ok(())
    }
}

/// Minimum fraction of an obstacle's bounding box covered by its pixels.
pub const MIN_BOX_COVERAGE: f64 = 0.9;

/// Renders scene `index` of the seeded sequence.
pub fn synth_scene(seed: u64, index: usize, height: usize, width: usize) -> SegSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let (h, w) = (height, width);
    let (hf, wf) = (h as f64, w as f64);

    let y0 = rng.random_range(0.25 * hf..0.55 * hf);
    let y1 = (y0 + rng.random_range(-0.08 * hf..0.08 * hf)).max(1.0);
    let horizon = [[0.0, y0], [wf - 1.0, y1]];
    let imu = imu_mask_from_horizon(horizon[0], horizon[1], h, w).expect("horizon spans the width");

    let mut labels: Vec<u8> = imu.iter().map(|&v| if v == 1 { SKY } else { WATER }).collect();
    let mut rgb = vec![[0.0f64; 3]; h * w];
    let noise = Normal::new(0.0, 1.0).expect("unit normal");

    let sky_base = [rng.random_range(140.0..190.0), rng.random_range(170.0..215.0), rng.random_range(215.0..250.0)];
    let water_base = [rng.random_range(15.0..50.0), rng.random_range(55.0..100.0), rng.random_range(95.0..140.0)];
    let wave = (rng.random_range(0.2..0.6), rng.random_range(0.6..1.4), rng.random_range(0.0..std::f64::consts::TAU));
    for r in 0..h {
        for c in 0..w {
            let p = r * w + c;
            let n: f64 = noise.sample(&mut rng);
            rgb[p] = if labels[p] == SKY {
                let t = r as f64 / hf;
                [sky_base[0] + 40.0 * t + 4.0 * n, sky_base[1] + 25.0 * t + 4.0 * n, sky_base[2] + 4.0 * n]
            } else {
                let s = 10.0 * (wave.0 * c as f64 + wave.1 * r as f64 + wave.2).sin();
                [water_base[0] + s + 6.0 * n, water_base[1] + s + 6.0 * n, water_base[2] + s + 6.0 * n]
            };
        }
    }

    // distant shoreline just below the horizon
    if rng.random_bool(0.5) {
        let amp = rng.random_range(0.01..0.06) * hf;
        let freq = rng.random_range(0.5..3.0) * std::f64::consts::TAU / wf;
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let land = [rng.random_range(60.0..110.0), rng.random_range(80.0..120.0), rng.random_range(40.0..80.0)];
        for c in 0..w {
            let line = y0 + (y1 - y0) * c as f64 / (wf - 1.0);
            let depth = amp * (1.0 + (freq * c as f64 + phase).sin()) * 0.5 + 1.0;
            for r in 0..h {
                let rf = r as f64;
                let p = r * w + c;
                if labels[p] == WATER && rf < line + depth {
                    labels[p] = OBSTACLE;
                    let n: f64 = noise.sample(&mut rng);
                    rgb[p] = [land[0] + 10.0 * n, land[1] + 10.0 * n, land[2] + 10.0 * n];
                }
            }
        }
    }

    // occasional sun glare marked as ignore
    if rng.random_bool(0.2) && y0.min(y1) > 6.0 {
        let gh = rng.random_range(2..(h / 20).max(3));
        let gw = rng.random_range(2..(w / 10).max(3));
        let top = rng.random_range(0..(y0.min(y1) as usize).saturating_sub(gh + 1).max(1));
        let left = rng.random_range(0..w - gw);
        for r in top..top + gh {
            for c in left..left + gw {
                if labels[r * w + c] == SKY {
                    labels[r * w + c] = IGNORE;
                    rgb[r * w + c] = [250.0, 250.0, 240.0];
                }
            }
        }
    }

    let danger_zone_row = (rng.random_range(0.7..0.85) * hf) as usize;
    let k = rng.random_range(0..=5);
    let mut obstacles = Vec::new();
    for _ in 0..k {
        for _attempt in 0..8 {
            if let Some(o) = place_obstacle(&mut rng, &mut labels, &mut rgb, h, w, [y0, y1], danger_zone_row) {
                obstacles.push(o);
                break;
            }
        }
    }

    let water_edge = (0..w)
        .filter_map(|c| (0..h).find(|&r| labels[r * w + c] == WATER).map(|r| [c, r]))
        .collect();
    let hw = h * w;
    let mut image = vec![0.0; 3 * hw];
    for (p, px) in rgb.iter().enumerate() {
        for ch in 0..3 {
            image[ch * hw + p] = px[ch].round().clamp(0.0, 255.0) / 255.0;
        }
    }
    SegSample {
        id: format!("synth_{index:05}"),
        height: h,
        width: w,
        image: Tensor::from_vec(Shape::new(1, 3, h, w), image).expect("sized above"),
        labels,
        imu,
        annotation: Some(FrameAnnotation {
            width: w,
            height: h,
            water_edge,
            obstacles,
            danger_zone_row,
            horizon: Some(horizon),
        }),
    }
}

/// Rasterises one obstacle (superellipse or chamfered box) into the scene.
/// Returns `None` without touching the scene when the shape would cover
/// less than [`MIN_BOX_COVERAGE`] of its bounding box.
fn place_obstacle(
    rng: &mut ChaCha8Rng,
    labels: &mut [u8],
    rgb: &mut [[f64; 3]],
    h: usize,
    w: usize,
    horizon: [f64; 2],
    danger_zone_row: usize,
) -> Option<Obstacle> {
    let (hf, wf) = (h as f64, w as f64);
    let ry = rng.random_range((0.02 * hf).max(2.0)..(0.09 * hf).max(3.0));
    let rx = ry * rng.random_range(0.8..2.5);
    let cx = rng.random_range(0.0..wf);
    let line = horizon[0] + (horizon[1] - horizon[0]) * cx / (wf - 1.0);
    let cy = if rng.random_bool(0.25) {
        line + rng.random_range(-0.5..0.5) * ry
    } else {
        rng.random_range((line + ry).min(hf - 1.0)..hf)
    };
    let superellipse = rng.random_bool(0.5);
    let exponent = rng.random_range(6.0..10.0);
    let cut = rng.random_range(0.05..0.2);
    let inside = |r: usize, c: usize| {
        let u = (c as f64 - cx) / rx;
        let v = (r as f64 - cy) / ry;
        if superellipse {
            u.abs().powf(exponent) + v.abs().powf(exponent) <= 1.0
        } else {
            u.abs() <= 1.0 && v.abs() <= 1.0 && u.abs() + v.abs() <= 2.0 - 2.0 * cut
        }
    };
    let (r0, r1) = ((cy - ry).floor().max(0.0) as usize, ((cy + ry).ceil() as usize).min(h - 1));
    let (c0, c1) = ((cx - rx).floor().max(0.0) as usize, ((cx + rx).ceil() as usize).min(w - 1));
    let pixels: Vec<(usize, usize)> = (r0..=r1)
        .flat_map(|r| (c0..=c1).map(move |c| (r, c)))
        .filter(|&(r, c)| inside(r, c))
        .collect();
    if pixels.is_empty() {
        return None;
    }
    let (min_r, max_r) = pixels.iter().fold((usize::MAX, 0), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let (min_c, max_c) = pixels.iter().fold((usize::MAX, 0), |(a, b), p| (a.min(p.1), b.max(p.1)));
    let bbox = [min_c, min_r, max_c - min_c + 1, max_r - min_r + 1];
    if (pixels.len() as f64) < MIN_BOX_COVERAGE * (bbox[2] * bbox[3]) as f64 {
        return None;
    }
    let palette = [[200.0, 40.0, 30.0], [240.0, 170.0, 20.0], [235.0, 235.0, 225.0], [50.0, 50.0, 55.0], [40.0, 150.0, 60.0]];
    let base = palette[rng.random_range(0..palette.len())];
    let noise = Normal::new(0.0, 8.0).expect("finite std");
    for &(r, c) in &pixels {
        labels[r * w + c] = OBSTACLE;
        let n: f64 = noise.sample(rng);
        rgb[r * w + c] = [base[0] + n, base[1] + n, base[2] + n];
    }
    Some(Obstacle {
        bbox,
        danger_zone: max_r >= danger_zone_row,
    })
}

/// Generates `cfg.n` scenes under `out` and writes the manifest.
pub fn synth_generate(cfg: &SynthConfig, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    for d in ["images", "masks", "imus", "annotations"] {
        fs::create_dir_all(out.join(d))?;
    }
    let samples = par::map(cfg.n, |i| synth_scene(cfg.seed, i, cfg.height, cfg.width));
    for s in &samples {
        write_sample(out, s)?;
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        generator: format!("ewasr {}", env!("CARGO_PKG_VERSION")),
        synth: Some(cfg.clone()),
        samples: samples.iter().map(|s| s.id.clone()).collect(),
    };
    write_manifest(out, &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn horizontal_horizon_marks_rows_above() {
        let m = imu_mask_from_horizon([0.0, 2.0], [4.0, 2.0], 4, 5).unwrap();
        assert_eq!(&m[..10], &[1; 10]);
        assert_eq!(&m[10..], &[0; 10]);
    }

    #[test]
    fn horizon_at_top_is_empty() {
        let m = imu_mask_from_horizon([0.0, 0.0], [7.0, 0.0], 5, 8).unwrap();
        assert!(m.iter().all(|&v| v == 0));
    }

    #[test]
    fn vertical_horizon_is_rejected() {
        assert!(imu_mask_from_horizon([2.0, 0.0], [2.0, 5.0], 4, 4).is_err());
    }

    #[test]
    fn scenes_are_valid() {
        for i in 0..10 {
            let s = synth_scene(3, i, 48, 64);
            s.validate().unwrap();
        }
    }
}
