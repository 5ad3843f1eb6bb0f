use super::Real;
use crate::error::{Error, Result};

/// Norm below which a pixel vector is left unscaled by normalization.
pub const NORM_FLOOR: f64 = 1e-12;

/// Per-pixel embedding vectors on the reduced grid, pixel-major (`pixel * dim + d`).
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMap {
    pub width: usize,
    pub height: usize,
    pub dim: usize,
    pub data: Vec<f64>,
    pub normalized: bool,
}

impl EmbeddingMap {
    pub fn new(width: usize, height: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * dim {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {width}x{height}x{dim} embedding",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            dim,
            data,
            normalized: false,
        })
    }

    /// Builds a map from the network's channel-major `dim x pixels` layout.
    pub fn from_channel_major<T: Real>(values: &[T], width: usize, height: usize, dim: usize) -> Result<Self> {
        let px = width * height;
        if values.len() != px * dim {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {width}x{height}x{dim} embedding",
                values.len()
            )));
        }
        let mut data = vec![0.0; px * dim];
        for d in 0..dim {
            for s in 0..px {
                data[s * dim + d] = values[d * px + s].to_f64().unwrap();
            }
        }
        Ok(Self {
            width,
            height,
            dim,
            data,
            normalized: false,
        })
    }

    /// Converts a pixel-major per-pixel quantity (e.g. a gradient) to channel-major.
    pub fn to_channel_major<T: Real>(&self, pixel_major: &[f64]) -> Vec<T> {
        let px = self.pixels();
        let mut out = vec![T::zero(); px * self.dim];
        for s in 0..px {
            for d in 0..self.dim {
                out[d * px + s] = T::from_f64(pixel_major[s * self.dim + d]).unwrap();
            }
        }
        out
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn vector(&self, s: usize) -> &[f64] {
        &self.data[s * self.dim..(s + 1) * self.dim]
    }
}

/// A normalized map together with the norms needed to differentiate through it.
#[derive(Clone, Debug)]
pub struct NormalizedEmbedding {
    pub map: EmbeddingMap,
    pub norms: Vec<f64>,
    /// Pixels whose vector norm fell below the floor.
    pub degenerate: usize,
}

/// Divides each pixel vector by `max(norm, 1e-12)`.
pub fn l2_normalize(map: &EmbeddingMap) -> NormalizedEmbedding {
    let mut out = map.clone();
    let mut norms = Vec::with_capacity(map.pixels());
    let mut degenerate = 0;
    for v in out.data.chunks_exact_mut(map.dim) {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < NORM_FLOOR {
            degenerate += 1;
        }
        let scale = norm.max(NORM_FLOOR);
        v.iter_mut().for_each(|x| *x /= scale);
        norms.push(norm);
    }
    out.normalized = true;
    NormalizedEmbedding {
        map: out,
        norms,
        degenerate,
    }
}

/// Pulls a gradient on the normalized map back to the raw map.
pub fn l2_normalize_backward(normalized: &NormalizedEmbedding, d_normalized: &[f64]) -> Vec<f64> {
    let dim = normalized.map.dim;
    let mut d_raw = vec![0.0; d_normalized.len()];
    for (s, &norm) in normalized.norms.iter().enumerate() {
        let u = normalized.map.vector(s);
        let g = &d_normalized[s * dim..(s + 1) * dim];
        let out = &mut d_raw[s * dim..(s + 1) * dim];
        if norm < NORM_FLOOR {
            for (o, &gi) in out.iter_mut().zip(g) {
                *o = gi / NORM_FLOOR;
            }
        } else {
            let dot: f64 = u.iter().zip(g).map(|(a, b)| a * b).sum();
            for ((o, &gi), &ui) in out.iter_mut().zip(g).zip(u) {
                *o = (gi - ui * dot) / norm;
            }
        }
    }
    d_raw
}
