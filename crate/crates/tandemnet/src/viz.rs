//! Renders region attention weights over the image grid: reshape the first
//! g*g weights to a g x g map, bilinearly upsample to the requested size,
//! min-max normalize to 8-bit gray, and write PGM plus the raw weights as
//! CSV.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Elem;
#[cfg(test)]
use crate::tensor::tol;

/// Align-corners bilinear resize of a square map: source coordinate for
/// output pixel d is d*(g-1)/(out-1), so the four corner values are kept
/// exactly.
pub fn upsample_bilinear(grid: &[Elem], g: usize, out: usize) -> Result<Vec<Elem>> {
    if g == 0 || grid.len() != g * g {
        return Err(Error::dim("upsample", format!("{} values for a {g}x{g} grid", grid.len())));
    }
    if out == 0 {
        return Err(Error::config("out_size", "must be at least 1".to_string()));
    }
    let src = |d: usize| -> Elem {
        if out == 1 {
            0.0
        } else {
            d as Elem * (g - 1) as Elem / (out - 1) as Elem
        }
    };
    let mut result = Vec::with_capacity(out * out);
    for r in 0..out {
        let y = src(r);
        let y0 = (y.floor() as usize).min(g - 1);
        let y1 = (y0 + 1).min(g - 1);
        let fy = y - y0 as Elem;
        for c in 0..out {
            let x = src(c);
            let x0 = (x.floor() as usize).min(g - 1);
            let x1 = (x0 + 1).min(g - 1);
            let fx = x - x0 as Elem;
            let top = grid[y0 * g + x0] * (1.0 - fx) + grid[y0 * g + x1] * fx;
            let bottom = grid[y1 * g + x0] * (1.0 - fx) + grid[y1 * g + x1] * fx;
            result.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Ok(result)
}

/// Min-max normalization to [0, 255]. A flat map carries no contrast and
/// renders mid gray.
pub fn to_gray(map: &[Elem]) -> Vec<u8> {
    let min = map.iter().cloned().fold(Elem::INFINITY, Elem::min);
    let max = map.iter().cloned().fold(Elem::NEG_INFINITY, Elem::max);
    if !(max - min).is_normal() {
        return vec![128; map.len()];
    }
    map.iter().map(|&v| (((v - min) / (max - min)) * 255.0).round() as u8).collect()
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::dim("pgm", format!("{} pixels for {width}x{height}", pixels.len())));
    }
    let mut f = std::fs::File::create(path)?;
    write!(f, "P5\n{width} {height}\n255\n")?;
    f.write_all(pixels)?;
    Ok(())
}

/// The raw g x g region weights, row-major, one grid row per line.
pub fn region_weights_csv(alpha: &[Elem], g: usize) -> Result<String> {
    if alpha.len() < g * g {
        return Err(Error::dim("attention map", format!("{} weights for a {g}x{g} grid", alpha.len())));
    }
    let mut out = String::new();
    for r in 0..g {
        for c in 0..g {
            if c > 0 {
                out.push(',');
            }
            out.push_str(&format!("{:.8e}", alpha[r * g + c]));
        }
        out.push('\n');
    }
    Ok(out)
}

pub struct AttentionMapFiles {
    pub pgm: PathBuf,
    pub csv: PathBuf,
}

/// Writes `stem.pgm` (upsampled, normalized map) and `stem.csv` (raw
/// weights). `alpha` holds region weights first; anything past g*g
/// (sentence weights) is ignored here.
pub fn export_attention_map(alpha: &[Elem], g: usize, out_size: usize, stem: &Path) -> Result<AttentionMapFiles> {
    if alpha.len() < g * g {
        return Err(Error::dim("attention map", format!("{} weights for a {g}x{g} grid", alpha.len())));
    }
    let up = upsample_bilinear(&alpha[..g * g], g, out_size)?;
    let gray = to_gray(&up);
    let pgm = stem.with_extension("pgm");
    let csv = stem.with_extension("csv");
    write_pgm(&pgm, out_size, out_size, &gray)?;
    std::fs::write(&csv, region_weights_csv(alpha, g)?)?;
    Ok(AttentionMapFiles { pgm, csv })
}
