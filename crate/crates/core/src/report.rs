//! Metrics files and figures.

use std::collections::BTreeMap;
use std::path::Path;

use image::imageops::FilterType;
use image::{ImageBuffer, Luma, RgbImage};
use serde::{Deserialize, Serialize};

use crate::attention::AttentionMaps;
use crate::datasets::Image;
use crate::error::{contract, Result};
use crate::scalar::Scalar;

/// Stable schema of every metrics JSON file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: String,
    pub dataset: String,
    #[serde(rename = "U")]
    pub unseen: Option<f64>,
    #[serde(rename = "S")]
    pub seen: Option<f64>,
    #[serde(rename = "H")]
    pub harmonic: Option<f64>,
    pub top1: Option<f64>,
    pub per_class: BTreeMap<String, f64>,
}

pub const METRICS_KEYS: [&str; 7] = ["task", "dataset", "U", "S", "H", "top1", "per_class"];

impl MetricsReport {
    pub fn new(task: impl Into<String>, dataset: impl Into<String>) -> Self {
        Self {
            task: task.into(),
            dataset: dataset.into(),
            unseen: None,
            seen: None,
            harmonic: None,
            top1: None,
            per_class: BTreeMap::new(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    /// Parses a metrics file, rejecting unknown or missing keys.
    pub fn parse(text: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(text)?;
        let obj = v
            .as_object()
            .ok_or_else(|| contract("metrics JSON must be an object"))?;
        for k in obj.keys() {
            if !METRICS_KEYS.contains(&k.as_str()) {
                return Err(contract(format!("unexpected metrics key `{k}`")));
            }
        }
        for k in METRICS_KEYS {
            if !obj.contains_key(k) {
                return Err(contract(format!("metrics key `{k}` missing")));
            }
        }
        Ok(serde_json::from_value(v)?)
    }
}

/// Mean and 95% normal-approximation half-width.
pub fn mean_confidence_interval(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * (var / n as f64).sqrt())
}

#[derive(Serialize)]
struct EpisodeRow {
    episode_id: usize,
    accuracy: f64,
}

pub fn write_episode_csv(path: &Path, accuracies: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for (episode_id, &accuracy) in accuracies.iter().enumerate() {
        w.serialize(EpisodeRow {
            episode_id,
            accuracy,
        })?;
    }
    w.flush()?;
    Ok(())
}

const RAMP: [[f64; 3]; 5] = [
    [68.0, 1.0, 84.0],
    [59.0, 82.0, 139.0],
    [33.0, 145.0, 140.0],
    [94.0, 201.0, 98.0],
    [253.0, 231.0, 37.0],
];

/// Colour for `v` in `[0, 1]` (clamped) on a dark-blue to yellow ramp.
pub fn colormap(v: f64) -> [u8; 3] {
    let v = if v.is_finite() {
        v.clamp(0.0, 1.0)
    } else {
        0.0
    };
    let pos = v * (RAMP.len() - 1) as f64;
    let i = (pos.floor() as usize).min(RAMP.len() - 2);
    let t = pos - i as f64;
    let mut out = [0u8; 3];
    for c in 0..3 {
        out[c] = (RAMP[i][c] * (1.0 - t) + RAMP[i + 1][c] * t).round() as u8;
    }
    out
}

/// Heatmap of `values` reshaped row-major into `rows x cols`, each entry a
/// `cell x cell` block. Values map to colour on the fixed range `[0, 1]`.
pub fn encoding_heatmap(values: &[f64], rows: usize, cols: usize, cell: usize) -> Result<RgbImage> {
    if rows == 0 || cols == 0 || cell == 0 || rows * cols != values.len() {
        return Err(contract(format!(
            "a {}-entry vector does not fill a {rows}x{cols} grid",
            values.len()
        )));
    }
    let mut img = RgbImage::new((cols * cell) as u32, (rows * cell) as u32);
    for (i, &v) in values.iter().enumerate() {
        let (r, c) = (i / cols, i % cols);
        let px = image::Rgb(colormap(v));
        for y in 0..cell {
            for x in 0..cell {
                img.put_pixel((c * cell + x) as u32, (r * cell + y) as u32, px);
            }
        }
    }
    Ok(img)
}

pub fn render_encoding(values: &[f64], rows: usize, cols: usize, path: &Path) -> Result<()> {
    encoding_heatmap(values, rows, cols, 16)?.save(path)?;
    Ok(())
}

/// Layout `(rows, cols)` closest to square for a vector of length `n`.
pub fn square_layout(n: usize) -> (usize, usize) {
    let mut rows = (n as f64).sqrt().floor() as usize;
    while rows > 1 && n % rows != 0 {
        rows -= 1;
    }
    let rows = rows.max(1);
    (rows, n / rows)
}

/// Map `m` upsampled bilinearly to `image` size, scaled by its maximum, and
/// alpha-blended at 0.5 over the grayscale image.
pub fn attention_overlay<T: Scalar>(
    image: &Image,
    maps: &AttentionMaps<T>,
    m: usize,
) -> Result<RgbImage> {
    if m >= maps.parts {
        return Err(contract(format!("part {m} of {}", maps.parts)));
    }
    let map: Vec<f32> = maps
        .map(m)
        .iter()
        .map(|v| v.to_f64_lossy() as f32)
        .collect();
    let peak = map.iter().copied().fold(0.0f32, f32::max);
    let scaled: Vec<f32> = map
        .iter()
        .map(|&v| if peak > 0.0 { v / peak } else { 0.0 })
        .collect();
    let buf =
        ImageBuffer::<Luma<f32>, Vec<f32>>::from_raw(maps.width as u32, maps.height as u32, scaled)
            .expect("map size");
    let up = image::imageops::resize(
        &buf,
        image.width as u32,
        image.height as u32,
        FilterType::Triangle,
    );
    let gray = image.with_channels(1);
    let mut out = RgbImage::new(image.width as u32, image.height as u32);
    for (i, (px, heat)) in out.pixels_mut().zip(up.pixels()).enumerate() {
        let g = gray.data[i].clamp(0.0, 1.0) as f64 * 255.0;
        let h = colormap(heat.0[0] as f64);
        for c in 0..3 {
            px.0[c] = (0.5 * g + 0.5 * h[c] as f64).round() as u8;
        }
    }
    Ok(out)
}
