use std::path::Path;

use crate::error::{Error, Result};
use crate::hsi_io::LabelRaster;

const SATURATION: f64 = 0.75;
const VALUE: f64 = 0.95;

fn hsv_to_rgb(hue: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let h = (hue / 60.0).rem_euclid(6.0);
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r, g, b].map(|u| ((u + m) * 255.0).round() as u8)
}

/// Color of class `id` out of `classes`; 0 is black.
pub fn palette(id: u32, classes: u32) -> [u8; 3] {
    if id == 0 {
        return [0, 0, 0];
    }
    hsv_to_rgb(360.0 * (id - 1) as f64 / classes as f64, SATURATION, VALUE)
}

/// Encodes a label raster as a binary PPM.
pub fn render_ppm(labels: &LabelRaster, classes: u32) -> Result<Vec<u8>> {
    if classes == 0 {
        return Err(Error::Parameter("class count must be positive".into()));
    }
    labels.validate(classes)?;
    let colors: Vec<[u8; 3]> = (0..=classes).map(|k| palette(k, classes)).collect();
    let mut out = format!("P6\n{} {}\n255\n", labels.width(), labels.height()).into_bytes();
    out.reserve(3 * labels.ids().len());
    for &id in labels.ids() {
        out.extend_from_slice(&colors[id as usize]);
    }
    Ok(out)
}

pub fn save_ppm(path: impl AsRef<Path>, labels: &LabelRaster, classes: u32) -> Result<()> {
    std::fs::write(path, render_ppm(labels, classes)?)?;
    Ok(())
}
