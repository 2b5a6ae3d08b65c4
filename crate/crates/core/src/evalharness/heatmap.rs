use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numkernel::Tensor;

const SHADES: &[u8] = b" .:-=+*#%@";

/// One character per entry, darker for larger values, scaled to the matrix maximum.
pub fn text_heatmap(m: &Tensor) -> Result<String> {
    if m.shape().len() != 2 {
        return Err(Error::invalid("heatmaps need a matrix"));
    }
    let max = m.data().iter().copied().fold(0.0, f64::max);
    let mut s = String::with_capacity(m.rows() * (m.cols() + 1));
    for i in 0..m.rows() {
        for &v in m.row(i) {
            let level = if max > 0.0 { (v.max(0.0) / max * (SHADES.len() - 1) as f64).round() as usize } else { 0 };
            s.push(SHADES[level.min(SHADES.len() - 1)] as char);
        }
        s.push('\n');
    }
    Ok(s)
}

/// Binary greyscale PGM, white = largest entry, each entry `scale` pixels wide.
pub fn pgm_bytes(m: &Tensor, scale: usize) -> Result<Vec<u8>> {
    if m.shape().len() != 2 || scale == 0 {
        return Err(Error::invalid("heatmaps need a matrix and a positive scale"));
    }
    let (h, w) = (m.rows() * scale, m.cols() * scale);
    let max = m.data().iter().copied().fold(0.0, f64::max);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            let v = m.get(y / scale, x / scale);
            out.push(if max > 0.0 { (v.max(0.0) / max * 255.0).round() as u8 } else { 0 });
        }
    }
    Ok(out)
}

pub fn write_pgm(m: &Tensor, scale: usize, path: &Path) -> Result<()> {
    fs::write(path, pgm_bytes(m, scale)?)?;
    Ok(())
}
