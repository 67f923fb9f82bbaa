//! PNG dataset export, manifest records and attention overlays.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::synth::{Dataset, Keypoint, Pose, RenderedSample};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.txt";

fn image_error(path: &Path, source: image::ImageError) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

/// H×W×3 tensor in [0, 1] to an 8-bit image.
pub fn to_rgb(t: &Tensor<f32>) -> Result<RgbImage> {
    let s = t.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::shape(format!("expected H×W×3 image, got {s:?}")));
    }
    let bytes = t.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    Ok(RgbImage::from_raw(s[1] as u32, s[0] as u32, bytes).expect("buffer size matches shape"))
}

pub fn from_rgb(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::new(&[h as usize, w as usize, 3], data).expect("rgb buffer is h×w×3")
}

pub fn save_png(t: &Tensor<f32>, path: &Path) -> Result<()> {
    to_rgb(t)?.save(path).map_err(|e| image_error(path, e))
}

/// Loads a PNG as a sample without annotations.
pub fn load_png(path: &Path) -> Result<RenderedSample> {
    let img = image::open(path).map_err(|e| image_error(path, e))?.to_rgb8();
    Ok(RenderedSample {
        image: from_rgb(&img),
        keypoints: [None; 4],
        pose: Pose::Frontal,
        quality: 1.0,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub path: String,
    pub identity: usize,
    pub pose: Pose,
    pub quality: f64,
    pub keypoints: [Keypoint; 4],
}

impl ManifestRecord {
    pub fn line(&self) -> String {
        let mut s = format!("{},{},{},{:.6}", self.path, self.identity, self.pose, self.quality);
        for k in &self.keypoints {
            match k {
                Some([x, y]) => write!(s, ",{x:.3},{y:.3}"),
                None => write!(s, ",-1,-1"),
            }
            .expect("write to string");
        }
        s
    }

    pub fn parse(line: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("bad manifest line {line:?}"));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 12 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f32>().map_err(|_| bad());
        let mut keypoints = [None; 4];
        for (k, slot) in keypoints.iter_mut().enumerate() {
            let (x, y) = (num(f[4 + 2 * k])?, num(f[5 + 2 * k])?);
            if x >= 0.0 && y >= 0.0 {
                *slot = Some([x, y]);
            }
        }
        Ok(ManifestRecord {
            path: f[0].to_string(),
            identity: f[1].parse().map_err(|_| bad())?,
            pose: f[2].parse()?,
            quality: f[3].parse().map_err(|_| bad())?,
            keypoints,
        })
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(ManifestRecord::parse).collect()
}

/// Writes `images/IIII_JJ.png` per sample and the manifest; returns the manifest path.
pub fn export_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut manifest = String::new();
    for (id, pool) in dataset.by_identity.iter().enumerate() {
        for (j, &s) in pool.iter().enumerate() {
            let sample = &dataset.samples[s];
            let rel = format!("images/{id:04}_{j:02}.png");
            save_png(&sample.image, &dir.join(&rel))?;
            let record = ManifestRecord {
                path: rel,
                identity: id,
                pose: sample.pose,
                quality: sample.quality,
                keypoints: sample.keypoints,
            };
            manifest.push_str(&record.line());
            manifest.push('\n');
        }
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn heat_colour(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    [
        (1.5 - (4.0 * v - 3.0).abs()).clamp(0.0, 1.0),
        (1.5 - (4.0 * v - 2.0).abs()).clamp(0.0, 1.0),
        (1.5 - (4.0 * v - 1.0).abs()).clamp(0.0, 1.0),
    ]
}

/// Heatmap of one h×w map, scaled by its maximum, upsampled nearest-neighbour
/// to the image size and blended over it with weight `alpha`.
pub fn overlay(image: &Tensor<f32>, map: &[f32], h: usize, w: usize, alpha: f64) -> Result<RgbImage> {
    let base = to_rgb(image)?;
    if map.len() != h * w {
        return Err(Error::shape(format!("map of {} values is not {h}×{w}", map.len())));
    }
    let peak = map.iter().cloned().fold(0.0f32, f32::max).max(f32::MIN_POSITIVE) as f64;
    let (width, height) = base.dimensions();
    let mut out = RgbImage::new(width, height);
    for (x, y, px) in base.enumerate_pixels() {
        let i = (y as usize * h / height as usize).min(h - 1);
        let j = (x as usize * w / width as usize).min(w - 1);
        let level = (map[i * w + j] as f64 / peak * 255.0).round() / 255.0;
        let heat = heat_colour(level);
        let mut c = [0u8; 3];
        for ch in 0..3 {
            let v = (1.0 - alpha) * px[ch] as f64 + alpha * heat[ch] * 255.0;
            c[ch] = v.round().clamp(0.0, 255.0) as u8;
        }
        out.put_pixel(x, y, Rgb(c));
    }
    Ok(out)
}

/// One overlay per image and map of an N×h×w×M attention tensor, named
/// `imageNN_mapMM.png`. Returns the written paths.
pub fn write_overlays(samples: &[RenderedSample], maps: &Tensor<f32>, dir: &Path) -> Result<Vec<PathBuf>> {
    let s = maps.shape();
    if s.len() != 4 || s[0] != samples.len() {
        return Err(Error::shape(format!(
            "{} images but attention tensor {s:?}",
            samples.len()
        )));
    }
    let (h, w, m) = (s[1], s[2], s[3]);
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::with_capacity(s[0] * m);
    for (n, sample) in samples.iter().enumerate() {
        let block = &maps.data()[n * h * w * m..(n + 1) * h * w * m];
        for k in 0..m {
            let map: Vec<f32> = (0..h * w).map(|c| block[c * m + k]).collect();
            let path = dir.join(format!("image{n:02}_map{k:02}.png"));
            overlay(&sample.image, &map, h, w, 0.5)?
                .save(&path)
                .map_err(|e| image_error(&path, e))?;
            paths.push(path);
        }
    }
    Ok(paths)
}
