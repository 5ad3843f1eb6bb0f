//! Boundary-prior saliency: pixels moving like the image border are background.

use crate::error::{Error, Result};
use crate::flow::{reflect_index, FlowField};
use crate::mask::Mask;
use crate::net::GRID_SCALE;

/// Below this, a norm (or product of norms) counts as zero motion.
const STATIC_EPS: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyPartition {
    pub fg_mask: Mask,
    pub bg_mask: Mask,
    /// Mean boundary flow.
    pub m: [f64; 2],
    pub m_f: [f64; 2],
    pub m_b: [f64; 2],
    pub fg_empty: bool,
    pub bg_empty: bool,
    /// Masks on the embedding grid (padded size / 4).
    pub fg_grid: Mask,
    pub bg_grid: Mask,
}

/// `max(1, round(0.02 * min(H, W)))`.
pub fn default_band_width(width: usize, height: usize) -> usize {
    ((0.02 * width.min(height) as f64).round() as usize).max(1)
}

pub fn boundary_mean_flow(flow: &FlowField, band: usize) -> Result<[f64; 2]> {
    let (w, h) = (flow.width(), flow.height());
    if band == 0 || 2 * band >= w.min(h) {
        return Err(Error::BandTooWide {
            band,
            width: w,
            height: h,
        });
    }
    let mut sum = [0.0f64; 2];
    let mut n = 0usize;
    for y in 0..h {
        let edge_row = y < band || y >= h - band;
        for x in 0..w {
            if edge_row || x < band || x >= w - band {
                let v = flow.get(x, y);
                sum[0] += v[0] as f64;
                sum[1] += v[1] as f64;
                n += 1;
            }
        }
    }
    Ok([sum[0] / n as f64, sum[1] / n as f64])
}

/// Per-pixel `1 - cos(x, m)`, with static pixels and a static boundary guarded.
pub fn dissimilarity_map(flow: &FlowField, m: [f64; 2]) -> Vec<f64> {
    let m_norm = m[0].hypot(m[1]);
    flow.vectors()
        .iter()
        .map(|v| {
            let x = [v[0] as f64, v[1] as f64];
            let x_norm = x[0].hypot(x[1]);
            if x_norm * m_norm < STATIC_EPS {
                if x_norm < STATIC_EPS && m_norm < STATIC_EPS {
                    0.0
                } else {
                    1.0
                }
            } else {
                let cos = (x[0] * m[0] + x[1] * m[1]) / (x_norm * m_norm);
                (1.0 - cos).clamp(0.0, 2.0)
            }
        })
        .collect()
}

pub fn partition(flow: &FlowField, s_map: &[f64], delta: f64) -> Result<SaliencyPartition> {
    if !(delta > 0.0 && delta < 2.0) {
        return Err(Error::InvalidParameter(format!(
            "delta must lie in (0, 2), got {delta}"
        )));
    }
    let (w, h) = (flow.width(), flow.height());
    if s_map.len() != w * h {
        return Err(Error::ShapeMismatch(format!(
            "{} dissimilarities for {} pixels",
            s_map.len(),
            w * h
        )));
    }
    let fg_bits: Vec<bool> = s_map.iter().map(|&s| s >= delta).collect();
    let fg_mask = Mask::new(w, h, fg_bits)?;
    let bg_mask = fg_mask.complement();
    let mut sums = [[0.0f64; 2]; 2];
    let mut counts = [0usize; 2];
    for (v, &fg) in flow.vectors().iter().zip(fg_mask.bits()) {
        let i = fg as usize;
        sums[i][0] += v[0] as f64;
        sums[i][1] += v[1] as f64;
        counts[i] += 1;
    }
    let mean = |i: usize| {
        if counts[i] == 0 {
            [0.0, 0.0]
        } else {
            [sums[i][0] / counts[i] as f64, sums[i][1] / counts[i] as f64]
        }
    };
    let m = boundary_mean_flow(flow, default_band_width(w, h)).unwrap_or([0.0, 0.0]);
    let fg_grid = grid_majority(&fg_mask);
    let bg_grid = fg_grid.complement();
    Ok(SaliencyPartition {
        m,
        m_b: mean(0),
        m_f: mean(1),
        bg_empty: counts[0] == 0,
        fg_empty: counts[1] == 0,
        fg_mask,
        bg_mask,
        fg_grid,
        bg_grid,
    })
}

/// Band width, boundary mean, dissimilarity and threshold in one go.
pub fn saliency_partition(flow: &FlowField, delta: f64) -> Result<SaliencyPartition> {
    let band = default_band_width(flow.width(), flow.height());
    let m = boundary_mean_flow(flow, band)?;
    let s = dissimilarity_map(flow, m);
    let mut part = partition(flow, &s, delta)?;
    part.m = m;
    Ok(part)
}

/// Downsamples a mask to the embedding grid: the mask is reflect-padded to a multiple
/// of 4 and each 4x4 block is foreground only with a strict majority.
pub fn grid_majority(mask: &Mask) -> Mask {
    let (w, h) = (mask.width(), mask.height());
    let gw = w.div_ceil(GRID_SCALE);
    let gh = h.div_ceil(GRID_SCALE);
    let half = GRID_SCALE * GRID_SCALE / 2;
    let mut out = Mask::empty(gw, gh);
    for gy in 0..gh {
        for gx in 0..gw {
            let mut count = 0;
            for dy in 0..GRID_SCALE {
                let y = reflect_index(gy * GRID_SCALE + dy, h);
                for dx in 0..GRID_SCALE {
                    count += mask.get(reflect_index(gx * GRID_SCALE + dx, w), y) as usize;
                }
            }
            out.set(gx, gy, count > half);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_field_boundary_mean() {
        let f = FlowField::constant(10, 8, [3.0, -1.0]);
        assert_eq!(boundary_mean_flow(&f, 2).unwrap(), [3.0, -1.0]);
    }

    #[test]
    fn band_one_on_4x4_uses_twelve_pixels() {
        let vectors: Vec<[f32; 2]> = (0..16).map(|i| [i as f32, 0.0]).collect();
        let f = FlowField::new(4, 4, vectors).unwrap();
        // interior indices 5, 6, 9, 10 are excluded
        let expected = (120.0 - 30.0) / 12.0;
        assert_eq!(boundary_mean_flow(&f, 1).unwrap(), [expected, 0.0]);
    }

    #[test]
    fn band_limits() {
        let f = FlowField::constant(10, 6, [1.0, 0.0]);
        assert!(matches!(boundary_mean_flow(&f, 3), Err(Error::BandTooWide { .. })));
        assert!(matches!(boundary_mean_flow(&f, 0), Err(Error::BandTooWide { .. })));
        assert!(boundary_mean_flow(&f, 2).is_ok());
        assert_eq!(default_band_width(128, 128), 3);
        assert_eq!(default_band_width(20, 30), 1);
    }

    #[test]
    fn dissimilarity_cases() {
        let f = FlowField::new(
            5,
            1,
            vec![[2.0, 1.0], [-2.0, -1.0], [-1.0, 2.0], [0.0, 0.0], [1e-12, 0.0]],
        )
        .unwrap();
        let s = dissimilarity_map(&f, [2.0, 1.0]);
        assert!(s[0].abs() < 1e-12);
        assert!((s[1] - 2.0).abs() < 1e-12);
        assert!((s[2] - 1.0).abs() < 1e-12);
        assert_eq!(s[3], 1.0);
        assert_eq!(s[4], 1.0);
        let s = dissimilarity_map(&f, [0.0, 0.0]);
        assert_eq!(s[3], 0.0);
        assert_eq!(s[0], 1.0);
    }

    #[test]
    fn uniform_motion_is_all_background() {
        let f = FlowField::constant(16, 12, [0.5, 0.5]);
        let p = saliency_partition(&f, 0.1).unwrap();
        assert!(p.fg_empty && !p.bg_empty);
        assert_eq!(p.bg_mask.count(), 16 * 12);
        assert_eq!(p.m_f, [0.0, 0.0]);
        assert_eq!(p.bg_grid.count(), 4 * 3);
    }

    #[test]
    fn grid_majority_ties_go_to_background() {
        let mut m = Mask::empty(4, 4);
        for i in 0..8 {
            m.set(i % 4, i / 4, true);
        }
        assert!(!grid_majority(&m).get(0, 0));
        m.set(0, 2, true);
        assert!(grid_majority(&m).get(0, 0));
    }

    #[test]
    fn grid_majority_pads_by_reflection() {
        // 6 wide: the second block covers columns 4, 5 and reflected 4, 3
        let mut m = Mask::empty(6, 4);
        for y in 0..4 {
            m.set(4, y, true);
            m.set(5, y, true);
        }
        let g = grid_majority(&m);
        assert_eq!((g.width(), g.height()), (2, 1));
        assert!(!g.get(0, 0));
        assert!(g.get(1, 0));
    }

    #[test]
    fn rejects_bad_delta() {
        let f = FlowField::constant(8, 8, [1.0, 0.0]);
        let s = vec![0.0; 64];
        assert!(partition(&f, &s, 0.0).is_err());
        assert!(partition(&f, &s, 2.0).is_err());
    }
}
