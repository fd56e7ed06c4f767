//! Dataset ingestion: IDX files, raw CHW binaries with a JSON sidecar, and a
//! seeded synthetic digit generator.

use std::path::{Path, PathBuf};

use cgnet::data::Dataset;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Where a dataset comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// MNIST-style pair of IDX files (u8 images, u8 labels).
    Idx { images: PathBuf, labels: PathBuf },
    /// Raw CHW samples; the sidecar defaults to `<path>.json`.
    Raw {
        path: PathBuf,
        #[serde(default)]
        sidecar: Option<PathBuf>,
    },
    /// Seven-segment style digits, 1x28x28, 10 classes.
    Synthetic {
        samples: usize,
        seed: u64,
        #[serde(default = "default_noise")]
        noise: f64,
    },
}

fn default_noise() -> f64 {
    0.1
}

impl DatasetSource {
    /// Resolves relative paths against `base`.
    pub fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match self {
            DatasetSource::Idx { images, labels } => {
                fix(images);
                fix(labels);
            }
            DatasetSource::Raw { path, sidecar } => {
                fix(path);
                if let Some(s) = sidecar {
                    fix(s);
                }
            }
            DatasetSource::Synthetic { .. } => {}
        }
    }

    pub fn load(&self) -> Result<Dataset<f64>> {
        match self {
            DatasetSource::Idx { images, labels } => read_idx_pair(images, labels),
            DatasetSource::Raw { path, sidecar } => {
                let side = sidecar.clone().unwrap_or_else(|| {
                    let mut s = path.clone().into_os_string();
                    s.push(".json");
                    PathBuf::from(s)
                });
                read_raw(path, &side)
            }
            DatasetSource::Synthetic { samples, seed, noise } => Ok(synthetic_digits(*samples, *seed, *noise)),
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn bad(path: &Path, msg: impl Into<String>) -> CliError {
    CliError::Data {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Parses an IDX file holding unsigned bytes; returns `(dims, values)`.
pub fn parse_idx(path: &Path, bytes: &[u8]) -> Result<(Vec<usize>, Vec<u8>)> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(bad(path, "bad IDX magic"));
    }
    if bytes[2] != 0x08 {
        return Err(bad(path, format!("unsupported IDX element type 0x{:02x}", bytes[2])));
    }
    let rank = bytes[3] as usize;
    let header = 4 + 4 * rank;
    if rank == 0 || bytes.len() < header {
        return Err(bad(path, "truncated IDX header"));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let n: usize = dims.iter().product();
    if bytes.len() - header < n {
        return Err(bad(path, format!("truncated IDX data: expected {n} bytes, found {}", bytes.len() - header)));
    }
    if bytes.len() - header > n {
        return Err(bad(path, "trailing bytes after IDX data"));
    }
    Ok((dims, bytes[header..].to_vec()))
}

/// Encodes unsigned bytes as an IDX file.
pub fn encode_idx(dims: &[usize], data: &[u8]) -> Vec<u8> {
    let mut out = vec![0, 0, 0x08, dims.len() as u8];
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(data);
    out
}

pub fn read_idx_pair(images: &Path, labels: &Path) -> Result<Dataset<f64>> {
    let (idims, ivals) = parse_idx(images, &read_file(images)?)?;
    let (ldims, lvals) = parse_idx(labels, &read_file(labels)?)?;
    let shape = match idims[..] {
        [_, h, w] => [1, h, w],
        [_, c, h, w] => [c, h, w],
        _ => return Err(bad(images, format!("images must have rank 3 or 4, got {}", idims.len()))),
    };
    if ldims.len() != 1 || ldims[0] != idims[0] {
        return Err(bad(labels, format!("{} labels for {} images", ldims.first().unwrap_or(&0), idims[0])));
    }
    let labels: Vec<usize> = lvals.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(10);
    let images = ivals.iter().map(|&v| v as f64 / 255.0).collect();
    Ok(Dataset::new(shape, images, labels, classes)?)
}

/// Sidecar of a raw CHW file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawSidecar {
    /// `[c, h, w]` of one sample.
    pub shape: [usize; 3],
    pub dtype: RawDType,
    pub classes: usize,
    pub labels: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RawDType {
    /// Bytes scaled by 1/255.
    U8,
    /// Little-endian f32, taken as is.
    F32,
}

pub fn read_raw(path: &Path, sidecar: &Path) -> Result<Dataset<f64>> {
    let text = read_file(sidecar)?;
    let de = &mut serde_json::Deserializer::from_slice(&text);
    let side: RawSidecar = serde_path_to_error::deserialize(de).map_err(|e| CliError::Config {
        path: sidecar.to_path_buf(),
        field: e.path().to_string(),
        msg: e.inner().to_string(),
    })?;
    let bytes = read_file(path)?;
    let per: usize = side.shape.iter().product();
    let elem = match side.dtype {
        RawDType::U8 => 1,
        RawDType::F32 => 4,
    };
    let want = per * elem * side.labels.len();
    if bytes.len() != want {
        return Err(bad(path, format!("expected {want} bytes for {} samples, found {}", side.labels.len(), bytes.len())));
    }
    let images = match side.dtype {
        RawDType::U8 => bytes.iter().map(|&v| v as f64 / 255.0).collect(),
        RawDType::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
    };
    Ok(Dataset::new(side.shape, images, side.labels, side.classes)?)
}

//  aaa
// f   b
//  ggg
// e   c
//  ddd
const SEGMENTS: [[(f64, f64); 2]; 7] = [
    [(0.0, 0.0), (1.0, 0.0)],
    [(1.0, 0.0), (1.0, 1.0)],
    [(1.0, 1.0), (1.0, 2.0)],
    [(0.0, 2.0), (1.0, 2.0)],
    [(0.0, 1.0), (0.0, 2.0)],
    [(0.0, 0.0), (0.0, 1.0)],
    [(0.0, 1.0), (1.0, 1.0)],
];

const DIGITS: [&[usize]; 10] = [
    &[0, 1, 2, 3, 4, 5],
    &[1, 2],
    &[0, 1, 6, 4, 3],
    &[0, 1, 6, 2, 3],
    &[5, 6, 1, 2],
    &[0, 5, 6, 2, 3],
    &[0, 5, 4, 3, 2, 6],
    &[0, 1, 2],
    &[0, 1, 2, 3, 4, 5, 6],
    &[0, 1, 2, 3, 5, 6],
];

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0);
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

/// Renders one 28x28 digit with random placement, size, slant, stroke
/// width, vertex jitter, clutter strokes and additive Gaussian noise.
fn render_digit<R: Rng>(digit: usize, noise: f64, rng: &mut R) -> Vec<f64> {
    const SIZE: usize = 28;
    let scale = rng.random_range(5.0..7.0);
    let slant = rng.random_range(-0.25..0.25);
    let thickness = rng.random_range(1.0..1.8);
    let ink = rng.random_range(0.75..1.0);
    let cx = 14.0 + rng.random_range(-3.0..3.0) - scale * 0.5;
    let cy = 14.0 + rng.random_range(-2.5..2.5) - scale;
    let mut jitter = [[(0.0, 0.0); 2]; 3];
    for row in &mut jitter {
        for v in row.iter_mut() {
            *v = (rng.random_range(-0.12..0.12), rng.random_range(-0.12..0.12));
        }
    }
    let place = |(x, y): (f64, f64)| {
        let (jx, jy) = jitter[y as usize][x as usize];
        let (x, y) = (x + jx, y + jy);
        (cx + scale * (x - slant * (y - 1.0)), cy + scale * y)
    };
    let mut segs: Vec<((f64, f64), (f64, f64), f64)> = DIGITS[digit]
        .iter()
        .map(|&s| (place(SEGMENTS[s][0]), place(SEGMENTS[s][1]), ink))
        .collect();
    // Faint clutter strokes anywhere on the canvas.
    for _ in 0..rng.random_range(0..3) {
        let a = (rng.random_range(0.0..28.0), rng.random_range(0.0..28.0));
        let len = rng.random_range(3.0..9.0);
        let ang: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let b = (a.0 + len * ang.cos(), a.1 + len * ang.sin());
        segs.push((a, b, rng.random_range(0.25..0.6)));
    }
    let gauss = Normal::new(0.0, noise.max(0.0)).expect("non-negative std");
    let mut img = vec![0.0; SIZE * SIZE];
    for (i, v) in img.iter_mut().enumerate() {
        let p = ((i % SIZE) as f64 + 0.5, (i / SIZE) as f64 + 0.5);
        let stroke = segs
            .iter()
            .map(|&(a, b, v)| (1.0 - (segment_distance(p, a, b) - thickness * 0.5).max(0.0)).clamp(0.0, 1.0) * v)
            .fold(0.0, f64::max);
        *v = (stroke + gauss.sample(rng)).clamp(0.0, 1.0);
    }
    img
}

/// `n` labelled digits; labels cycle through the classes in a seeded order.
pub fn synthetic_digits(n: usize, seed: u64, noise: f64) -> Dataset<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n * 784);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let digit = rng.random_range(0..10);
        images.extend(render_digit(digit, noise, &mut rng));
        labels.push(digit);
    }
    Dataset::new([1, 28, 28], images, labels, 10).expect("generator output is consistent")
}
