//! Computation-intensity maps: the fraction of output channels taking the
//! conditional path at each spatial position.

use serde::Serialize;

use crate::gating::DecisionMap;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IntensityMap {
    pub height: usize,
    pub width: usize,
    /// Row-major values in `[0, 1]`.
    pub values: Vec<f64>,
}

impl IntensityMap {
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Binary PGM (P5), 8-bit, pixel = `round(255 * value)`.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.values.iter().map(|v| (255.0 * v.clamp(0.0, 1.0)).round() as u8));
        out
    }

    /// Nearest-neighbour resampling to `height x width`.
    pub fn upsample(&self, height: usize, width: usize) -> IntensityMap {
        let mut values = Vec::with_capacity(height * width);
        for y in 0..height {
            let sy = y * self.height / height;
            for x in 0..width {
                values.push(self.at(sy, x * self.width / width));
            }
        }
        IntensityMap { height, width, values }
    }
}

/// Mean effective decision over output channels at every position.
pub fn intensity_map(dm: &DecisionMap) -> IntensityMap {
    let hw = dm.positions();
    let values = (0..hw)
        .map(|pos| {
            let taken = (0..dm.channels).filter(|&c| dm.effective(c, pos)).count();
            taken as f64 / dm.channels as f64
        })
        .collect();
    IntensityMap {
        height: dm.height,
        width: dm.width,
        values,
    }
}

/// Upsamples every map to `height x width` and averages them.
pub fn aggregate_intensity(maps: &[IntensityMap], height: usize, width: usize) -> IntensityMap {
    let mut values = vec![0.0; height * width];
    for m in maps {
        for (v, u) in values.iter_mut().zip(m.upsample(height, width).values) {
            *v += u;
        }
    }
    let n = maps.len().max(1) as f64;
    values.iter_mut().for_each(|v| *v /= n);
    IntensityMap { height, width, values }
}
