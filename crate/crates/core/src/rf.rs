//! Exact receptive-field coverage of stacked dilated 3×3 convolutions.
//!
//! `coverage_map(rates)` counts, for every input offset `p`, how many
//! tap tuples `(a₁, …, a_k)` with `aᵢ ∈ {−1, 0, 1}²` satisfy
//! `Σ rᵢ·aᵢ = p`. It is the iterated convolution of dilated 3×3 indicator
//! kernels, so the map has side `1 + 2·Σ rᵢ` and total mass `9^k`.

use std::path::Path;

use image::{GrayImage, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CoverageMap {
    side: usize,
    counts: Vec<u64>,
}

impl CoverageMap {
    pub fn side(&self) -> usize {
        self.side
    }

    /// Row-major `side × side` counts; the centre cell is offset (0, 0).
    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Count at offset `(dy, dx)` from the centre (0 outside the map).
    pub fn at(&self, dy: isize, dx: isize) -> u64 {
        let r = (self.side / 2) as isize;
        if dy.abs() > r || dx.abs() > r {
            return 0;
        }
        self.counts[((dy + r) as usize) * self.side + (dx + r) as usize]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn max_count(&self) -> u64 {
        self.counts.iter().copied().max().unwrap_or(0)
    }
}

pub fn rf_size(rates: &[usize]) -> usize {
    1 + 2 * rates.iter().sum::<usize>()
}

pub fn coverage_map(rates: &[usize]) -> Result<CoverageMap> {
    if rates.is_empty() {
        return Err(Error::Usage("coverage_map needs at least one dilation rate".into()));
    }
    if rates.contains(&0) {
        return Err(Error::Usage(format!("dilation rates must be >= 1, got {rates:?}")));
    }
    let mut side = 1;
    let mut counts = vec![1u64];
    for &r in rates {
        let next_side = side + 2 * r;
        let mut next = vec![0u64; next_side * next_side];
        for y in 0..side {
            for x in 0..side {
                let c = counts[y * side + x];
                if c == 0 {
                    continue;
                }
                // Map centre shifts by r; taps land at offsets {0, r, 2r}.
                for ky in 0..3 {
                    for kx in 0..3 {
                        next[(y + ky * r) * next_side + x + kx * r] += c;
                    }
                }
            }
        }
        side = next_side;
        counts = next;
    }
    Ok(CoverageMap { side, counts })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageMetrics {
    /// Zero-count cells inside the receptive-field square.
    pub holes: usize,
    /// `1 − std / mean` over the non-zero counts, clamped to [0, 1].
    pub uniformity: f64,
    /// Non-zero cells over all cells of the square.
    pub coverage_fraction: f64,
}

pub fn coverage_metrics(m: &CoverageMap) -> CoverageMetrics {
    let nonzero: Vec<f64> = m.counts.iter().filter(|&&c| c > 0).map(|&c| c as f64).collect();
    let cells = m.counts.len();
    let holes = cells - nonzero.len();
    let n = nonzero.len() as f64;
    let mean = nonzero.iter().sum::<f64>() / n;
    let var = nonzero.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / n;
    CoverageMetrics {
        holes,
        uniformity: (1.0 - var.sqrt() / mean).clamp(0.0, 1.0),
        coverage_fraction: n / cells as f64,
    }
}

/// Analyzer report as written by the `analyze-rf` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RfReport {
    pub rates: Vec<usize>,
    pub rf_size: usize,
    pub holes: usize,
    pub coverage_fraction: f64,
    pub uniformity: f64,
}

pub fn analyze(rates: &[usize]) -> Result<(CoverageMap, RfReport)> {
    let map = coverage_map(rates)?;
    let m = coverage_metrics(&map);
    let report = RfReport {
        rates: rates.to_vec(),
        rf_size: map.side(),
        holes: m.holes,
        coverage_fraction: m.coverage_fraction,
        uniformity: m.uniformity,
    };
    Ok((map, report))
}

/// 8-bit shades, one per cell: 255 for zero coverage down to 0 for the
/// maximum count ("deeper" means more coverage).
pub fn shade(m: &CoverageMap) -> Vec<u8> {
    let max = m.max_count().max(1) as f64;
    m.counts
        .iter()
        .map(|&c| (255.0 - 255.0 * c as f64 / max).round() as u8)
        .collect()
}

pub fn render_coverage(m: &CoverageMap, path: &Path) -> Result<()> {
    let side = m.side() as u32;
    let shades = shade(m);
    let img = GrayImage::from_fn(side, side, |x, y| Luma([shades[(y * side + x) as usize]]));
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image {
                path: path.to_path_buf(),
                message: other.to_string(),
            },
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_rate_is_full_square() {
        let m = coverage_map(&[1]).unwrap();
        assert_eq!(m.side(), 3);
        assert_eq!(m.counts(), &[1; 9]);
        let metrics = coverage_metrics(&m);
        assert_eq!(metrics.holes, 0);
        assert_eq!(metrics.coverage_fraction, 1.0);
        assert_eq!(metrics.uniformity, 1.0);
    }

    #[test]
    fn rf_sizes() {
        assert_eq!(rf_size(&[1, 2, 4, 8]), 31);
        assert_eq!(rf_size(&[1, 3, 5, 9]), 37);
        assert_eq!(rf_size(&[1, 3, 5, 10]), 39);
    }

    #[test]
    fn even_rates_leave_holes() {
        let m = coverage_map(&[2, 2]).unwrap();
        assert!(coverage_metrics(&m).holes > 0);
        assert_eq!(m.at(1, 0), 0);
        assert_eq!(m.at(2, 0), 6);
    }

    #[test]
    fn empty_or_zero_rates_rejected() {
        assert!(coverage_map(&[]).is_err());
        assert!(coverage_map(&[1, 0]).is_err());
    }

    #[test]
    fn shading_darkest_at_centre() {
        let m = coverage_map(&[1, 3, 5, 9]).unwrap();
        let s = shade(&m);
        let c = m.side() / 2;
        assert_eq!(s[c * m.side() + c], 0);
        assert_eq!(*s.iter().min().unwrap(), 0);
        assert_eq!(shade(&coverage_map(&[1]).unwrap()), vec![0; 9]);
    }
}
