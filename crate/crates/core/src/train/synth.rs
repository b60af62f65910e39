//! Synthetic aerial tiles with thin, partly occluded roads.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::Sample;
use crate::error::{Error, Result};

pub const MIN_ROAD_FRACTION: f64 = 0.005;
pub const MAX_ROAD_FRACTION: f64 = 0.10;
const MAX_ATTEMPTS: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub count: usize,
    pub size: usize,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || !self.size.is_multiple_of(32) {
            return Err(Error::Config(format!("synthetic size {} must be a positive multiple of 32", self.size)));
        }
        if self.count == 0 {
            return Err(Error::Config("synthetic dataset needs at least one sample".into()));
        }
        Ok(())
    }
}

/// One generated tile as 8-bit buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthTile {
    pub id: String,
    pub size: usize,
    /// Interleaved RGB, row-major.
    pub rgb: Vec<u8>,
    /// 255 on road, 0 elsewhere.
    pub mask: Vec<u8>,
}

impl SynthTile {
    pub fn road_fraction(&self) -> f64 {
        self.mask.iter().filter(|&&m| m != 0).count() as f64 / self.mask.len() as f64
    }

    pub fn to_sample(&self) -> Sample {
        Sample::from_rgb8(self.id.clone(), self.size, self.size, &self.rgb, &self.mask)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let side = self.size as u32;
        let sat = dir.join(format!("{}_sat.png", self.id));
        image::RgbImage::from_raw(side, side, self.rgb.clone())
            .expect("buffer matches size")
            .save(&sat)
            .map_err(|e| Error::Image {
                path: sat.clone(),
                message: e.to_string(),
            })?;
        let mask = dir.join(format!("{}_mask.png", self.id));
        image::GrayImage::from_raw(side, side, self.mask.clone())
            .expect("buffer matches size")
            .save(&mask)
            .map_err(|e| Error::Image {
                path: mask.clone(),
                message: e.to_string(),
            })
    }
}

type Point = (f64, f64);

fn segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

fn edge_point(rng: &mut ChaCha8Rng, side: usize, s: f64) -> Point {
    let u = rng.random_range(0.0..s);
    match side {
        0 => (u, 0.0),
        1 => (s, u),
        2 => (u, s),
        _ => (0.0, u),
    }
}

/// Polyline crossing the tile from one edge to a different one.
fn polyline(rng: &mut ChaCha8Rng, s: f64) -> Vec<Point> {
    let from = rng.random_range(0..4);
    let to = (from + rng.random_range(1..4)) % 4;
    let a = edge_point(rng, from, s);
    let b = edge_point(rng, to, s);
    let bends = rng.random_range(0..3);
    let mut pts = vec![a];
    for k in 1..=bends {
        let t = k as f64 / (bends + 1) as f64;
        let jitter = 0.15 * s;
        pts.push((
            (a.0 + t * (b.0 - a.0) + rng.random_range(-jitter..jitter)).clamp(0.0, s),
            (a.1 + t * (b.1 - a.1) + rng.random_range(-jitter..jitter)).clamp(0.0, s),
        ));
    }
    pts.push(b);
    pts
}

/// Smooth value noise on a coarse lattice, bilinearly upsampled.
fn value_noise(rng: &mut ChaCha8Rng, size: usize, cell: usize) -> Vec<f64> {
    let g = size / cell + 2;
    let lattice: Vec<f64> = (0..g * g).map(|_| rng.random::<f64>()).collect();
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        let fy = y as f64 / cell as f64;
        let (y0, ty) = (fy.floor() as usize, fy.fract());
        for x in 0..size {
            let fx = x as f64 / cell as f64;
            let (x0, tx) = (fx.floor() as usize, fx.fract());
            let v = |yy: usize, xx: usize| lattice[yy * g + xx];
            let top = v(y0, x0) * (1.0 - tx) + v(y0, x0 + 1) * tx;
            let bot = v(y0 + 1, x0) * (1.0 - tx) + v(y0 + 1, x0 + 1) * tx;
            out[y * size + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

fn draw(rng: &mut ChaCha8Rng, size: usize) -> (Vec<u8>, Vec<u8>) {
    let s = size as f64;
    let n = size * size;
    let coarse = value_noise(rng, size, 16.max(size / 8));
    let fine = value_noise(rng, size, 4);
    let base = [
        rng.random_range(0.25..0.45),
        rng.random_range(0.35..0.55),
        rng.random_range(0.2..0.35),
    ];
    let mut rgb = vec![0.0f64; n * 3];
    for i in 0..n {
        let tex = 0.6 * coarse[i] + 0.3 * fine[i] + 0.1 * rng.random::<f64>();
        for c in 0..3 {
            rgb[i * 3 + c] = base[c] * (0.6 + 0.8 * tex);
        }
    }

    let mut mask = vec![0u8; n];
    let roads = rng.random_range(1..=3);
    let mut road_points = Vec::new();
    for _ in 0..roads {
        let line = polyline(rng, s);
        let width = rng.random_range(1..=3) as f64;
        let tone = rng.random_range(0.7..0.9);
        for y in 0..size {
            for x in 0..size {
                let p = (x as f64 + 0.5, y as f64 + 0.5);
                let d = line
                    .windows(2)
                    .map(|w| segment_distance(p, w[0], w[1]))
                    .fold(f64::INFINITY, f64::min);
                // Anti-aliased coverage of a band of the given width.
                let cover = (width / 2.0 + 0.5 - d).clamp(0.0, 1.0);
                if cover > 0.0 {
                    let i = y * size + x;
                    for c in 0..3 {
                        rgb[i * 3 + c] = rgb[i * 3 + c] * (1.0 - cover) + tone * cover;
                    }
                    if cover >= 0.5 {
                        mask[i] = 255;
                    }
                }
            }
        }
        road_points.extend(line);
    }

    // Canopy blobs, some centred on the road so it looks broken.
    let blobs = rng.random_range(2..=6);
    for k in 0..blobs {
        let (cx, cy) = if k % 2 == 0 && !road_points.is_empty() {
            let w = rng.random_range(0..road_points.len() - 1).min(road_points.len() - 2);
            let (a, b) = (road_points[w], road_points[w + 1]);
            let t = rng.random::<f64>();
            (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1))
        } else {
            (rng.random_range(0.0..s), rng.random_range(0.0..s))
        };
        let r = rng.random_range(1.5..(s / 20.0).max(2.5));
        let shade = rng.random_range(0.08..0.2);
        let (y0, y1) = (((cy - r).floor().max(0.0)) as usize, ((cy + r).ceil().min(s)) as usize);
        let (x0, x1) = (((cx - r).floor().max(0.0)) as usize, ((cx + r).ceil().min(s)) as usize);
        for y in y0..y1 {
            for x in x0..x1 {
                let d = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
                let a = (r - d + 0.5).clamp(0.0, 1.0);
                let i = y * size + x;
                let canopy = [shade * 0.6, shade * 1.4, shade * 0.5];
                for c in 0..3 {
                    rgb[i * 3 + c] = rgb[i * 3 + c] * (1.0 - a) + canopy[c] * a;
                }
            }
        }
    }

    let rgb8 = rgb.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    (rgb8, mask)
}

/// Tile `index` of the dataset identified by `seed`. Draws are repeated
/// until the road fraction lies in the accepted band.
pub fn synth_tile(seed: u64, index: usize, size: usize) -> Result<SynthTile> {
    if size == 0 || !size.is_multiple_of(32) {
        return Err(Error::Config(format!("synthetic size {size} must be a positive multiple of 32")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    for _ in 0..MAX_ATTEMPTS {
        let (rgb, mask) = draw(&mut rng, size);
        let tile = SynthTile {
            id: format!("synth{index:04}"),
            size,
            rgb,
            mask,
        };
        let f = tile.road_fraction();
        if (MIN_ROAD_FRACTION..=MAX_ROAD_FRACTION).contains(&f) {
            return Ok(tile);
        }
    }
    Err(Error::Config(format!("no tile with road fraction in band after {MAX_ATTEMPTS} draws at size {size}")))
}

pub fn synth_dataset(spec: &SynthSpec) -> Result<Vec<SynthTile>> {
    spec.validate()?;
    (0..spec.count).map(|i| synth_tile(spec.seed, i, spec.size)).collect()
}

/// Generates the dataset and writes `<id>_sat.png` / `<id>_mask.png` pairs.
pub fn write_synth_dataset(spec: &SynthSpec, dir: &Path) -> Result<Vec<SynthTile>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tiles = synth_dataset(spec)?;
    for t in &tiles {
        t.save(dir)?;
    }
    Ok(tiles)
}
