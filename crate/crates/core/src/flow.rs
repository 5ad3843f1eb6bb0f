//! Dense optical-flow fields, the Middlebury `.flo` container and the
//! color-wheel image encoding consumed by the embedding network.

use std::io::{Read, Write};

use crate::error::{Error, Result};

/// Magic tag at the start of every `.flo` file.
pub const FLO_MAGIC: [u8; 4] = *b"PIEH";

/// Default cap on decoded pixel count (2^26).
pub const DEFAULT_MAX_PIXELS: u64 = 1 << 26;

/// Below this per-frame maximum magnitude the color wheel divides by 1.
const STATIC_MAGNITUDE: f64 = 1e-9;

/// Dense per-pixel motion vectors in pixels/frame, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    vectors: Vec<[f32; 2]>,
}

impl FlowField {
    pub fn new(width: usize, height: usize, vectors: Vec<[f32; 2]>) -> Result<Self> {
        if vectors.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "{} vectors for a {width}x{height} field",
                vectors.len()
            )));
        }
        if let Some(i) = vectors.iter().position(|v| !v[0].is_finite() || !v[1].is_finite()) {
            return Err(Error::NonFinite(format!("flow vector {i}")));
        }
        Ok(Self { width, height, vectors })
    }

    pub fn constant(width: usize, height: usize, motion: [f32; 2]) -> Self {
        Self {
            width,
            height,
            vectors: vec![motion; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vectors(&self) -> &[[f32; 2]] {
        &self.vectors
    }

    pub fn get(&self, x: usize, y: usize) -> [f32; 2] {
        self.vectors[y * self.width + x]
    }

    /// Multiplies every vector by `factor`.
    pub fn scaled(&self, factor: f32) -> Self {
        Self {
            width: self.width,
            height: self.height,
            vectors: self.vectors.iter().map(|v| [v[0] * factor, v[1] * factor]).collect(),
        }
    }

    pub fn max_magnitude(&self) -> f64 {
        self.vectors
            .iter()
            .map(|v| (v[0] as f64).hypot(v[1] as f64))
            .fold(0.0, f64::max)
    }
}

/// Decodes a `.flo` stream with the default pixel cap.
pub fn read_flo<R: Read>(reader: R) -> Result<FlowField> {
    read_flo_with_cap(reader, DEFAULT_MAX_PIXELS)
}

pub fn read_flo_with_cap<R: Read>(mut reader: R, max_pixels: u64) -> Result<FlowField> {
    let mut header = [0u8; 12];
    let got = read_full(&mut reader, &mut header)?;
    if got >= 4 && header[..4] != FLO_MAGIC {
        let mut magic = [0u8; 4];
        magic.copy_from_slice(&header[..4]);
        return Err(Error::BadMagic(magic));
    }
    if got < 12 {
        return Err(Error::Truncated {
            expected: 12,
            found: got,
        });
    }
    let width = i32::from_le_bytes(header[4..8].try_into().unwrap());
    let height = i32::from_le_bytes(header[8..12].try_into().unwrap());
    if width <= 0 || height <= 0 {
        return Err(Error::BadDimensions {
            width: width as i64,
            height: height as i64,
        });
    }
    let pixels = width as u64 * height as u64;
    if pixels > max_pixels {
        return Err(Error::Oversize {
            pixels,
            cap: max_pixels,
        });
    }
    let pixels = pixels as usize;
    let mut payload = vec![0u8; pixels * 8];
    let got = read_full(&mut reader, &mut payload)?;
    if got < payload.len() {
        return Err(Error::Truncated {
            expected: 12 + payload.len(),
            found: 12 + got,
        });
    }
    let vectors = payload
        .chunks_exact(8)
        .map(|c| {
            [
                f32::from_le_bytes(c[0..4].try_into().unwrap()),
                f32::from_le_bytes(c[4..8].try_into().unwrap()),
            ]
        })
        .collect();
    FlowField::new(width as usize, height as usize, vectors)
}

fn read_full<R: Read>(reader: &mut R, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match reader.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

pub fn write_flo<W: Write>(flow: &FlowField, mut writer: W) -> Result<()> {
    writer.write_all(&encode_flo(flow))?;
    Ok(())
}

pub fn encode_flo(flow: &FlowField) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + flow.len() * 8);
    out.extend_from_slice(&FLO_MAGIC);
    out.extend_from_slice(&(flow.width as i32).to_le_bytes());
    out.extend_from_slice(&(flow.height as i32).to_le_bytes());
    for v in &flow.vectors {
        out.extend_from_slice(&v[0].to_le_bytes());
        out.extend_from_slice(&v[1].to_le_bytes());
    }
    out
}

/// Three-channel color-wheel encoding of a flow field, channel-major, values in [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct FlowImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl FlowImage {
    pub const CHANNELS: usize = 3;

    pub fn from_channels(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != Self::CHANNELS * width * height {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a 3x{height}x{width} image",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Channel-major (R plane, G plane, B plane) values.
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let plane = self.width * self.height;
        let i = y * self.width + x;
        [self.data[i], self.data[plane + i], self.data[2 * plane + i]]
    }

    /// Pads to `(width, height)` by mirror reflection about the last row/column.
    pub fn reflect_pad(&self, width: usize, height: usize) -> Self {
        assert!(width >= self.width && height >= self.height);
        let mut data = Vec::with_capacity(Self::CHANNELS * width * height);
        for c in 0..Self::CHANNELS {
            let plane = &self.data[c * self.width * self.height..][..self.width * self.height];
            for y in 0..height {
                let sy = reflect_index(y, self.height);
                for x in 0..width {
                    data.push(plane[sy * self.width + reflect_index(x, self.width)]);
                }
            }
        }
        Self { width, height, data }
    }
}

/// Mirror index without edge repetition (`reflect` padding), folding as often as needed.
pub fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

const RY: usize = 15;
const YG: usize = 6;
const GC: usize = 4;
const CB: usize = 11;
const BM: usize = 13;
const MR: usize = 6;
const NCOLS: usize = RY + YG + GC + CB + BM + MR;

/// The 55-entry Middlebury color wheel, RGB in 0..=255.
pub fn color_wheel() -> [[f64; 3]; NCOLS] {
    let mut wheel = [[0.0; 3]; NCOLS];
    let mut col = 0;
    let ramp = |i: usize, n: usize| (255 * i / n) as f64;
    for i in 0..RY {
        wheel[col] = [255.0, ramp(i, RY), 0.0];
        col += 1;
    }
    for i in 0..YG {
        wheel[col] = [255.0 - ramp(i, YG), 255.0, 0.0];
        col += 1;
    }
    for i in 0..GC {
        wheel[col] = [0.0, 255.0, ramp(i, GC)];
        col += 1;
    }
    for i in 0..CB {
        wheel[col] = [0.0, 255.0 - ramp(i, CB), 255.0];
        col += 1;
    }
    for i in 0..BM {
        wheel[col] = [ramp(i, BM), 0.0, 255.0];
        col += 1;
    }
    for i in 0..MR {
        wheel[col] = [255.0, 0.0, 255.0 - ramp(i, MR)];
        col += 1;
    }
    wheel
}

/// Color of a flow vector already divided by the frame's maximum magnitude. RGB in [0, 1].
fn wheel_color(wheel: &[[f64; 3]; NCOLS], u: f64, v: f64) -> [f64; 3] {
    let rad = u.hypot(v);
    let angle = (-v).atan2(-u) / std::f64::consts::PI;
    let fk = (angle + 1.0) / 2.0 * (NCOLS - 1) as f64;
    let k0 = (fk.floor() as usize).min(NCOLS - 1);
    let k1 = if k0 + 1 == NCOLS { 0 } else { k0 + 1 };
    let f = fk - k0 as f64;
    let mut rgb = [0.0; 3];
    for (c, out) in rgb.iter_mut().enumerate() {
        let col0 = wheel[k0][c] / 255.0;
        let col1 = wheel[k1][c] / 255.0;
        let col = (1.0 - f) * col0 + f * col1;
        *out = if rad <= 1.0 {
            1.0 - rad * (1.0 - col)
        } else {
            col * 0.75
        };
    }
    rgb
}

/// Color-wheel encoding with per-frame maximum-magnitude saturation, mapped to [-1, 1].
pub fn flow_to_image(flow: &FlowField) -> FlowImage {
    let wheel = color_wheel();
    let max_mag = flow.max_magnitude();
    let divisor = if max_mag < STATIC_MAGNITUDE { 1.0 } else { max_mag };
    let plane = flow.len();
    let mut data = vec![0f32; 3 * plane];
    for (i, v) in flow.vectors.iter().enumerate() {
        let rgb = wheel_color(&wheel, v[0] as f64 / divisor, v[1] as f64 / divisor);
        for c in 0..3 {
            data[c * plane + i] = (2.0 * rgb[c] - 1.0).clamp(-1.0, 1.0) as f32;
        }
    }
    FlowImage {
        width: flow.width,
        height: flow.height,
        data,
    }
}
