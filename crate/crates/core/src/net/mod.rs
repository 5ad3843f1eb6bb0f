//! The motion-embedding autoencoder.
//!
//! Encoder: `conv3x3(64) -> maxpool -> conv3x3(128) -> maxpool -> conv3x3(256)`,
//! all convolutions followed by ReLU. A per-pixel MLP `256 -> 256 -> 256 -> p`
//! maps encoder features to the embedding `F`, and the spatial-attention
//! branch adds `upsample(maxpool(F) + avgpool(F))`. The decoder mirrors the
//! encoder with two stride-2 transposed convolutions (`p -> 128 -> 64`) and a
//! final linear `3x3` convolution back to three channels.
//!
//! Everything is generic over [`Real`] so the same code runs in `f32` for
//! segmentation and in `f64` for finite-difference checks.

mod adam;
mod checkpoint;
mod embedding;
pub mod layers;

use std::fmt::Debug;
use std::ops::AddAssign;

use num_traits::{Float, FromPrimitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flow::FlowImage;

pub use adam::{adam_update, AdamConfig};
pub use embedding::{l2_normalize, l2_normalize_backward, EmbeddingMap, NormalizedEmbedding};
use layers::*;

/// Spatial reduction between the input image and the embedding grid.
pub const GRID_SCALE: usize = 4;

/// Floating-point element type of the network.
pub trait Real: Float + FromPrimitive + Default + Debug + Send + Sync + AddAssign + std::iter::Sum + 'static {
    const BYTES: usize;
    const TAG: u32;

    /// # Safety
    /// Pointers and strides must describe valid `m x k`, `k x n` and `m x n` matrices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const BYTES: usize = 4;
    const TAG: u32 = 4;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f32 {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Real for f64 {
    const BYTES: usize = 8;
    const TAG: u32 = 8;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f64 {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

/// Layer widths of the autoencoder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetConfig {
    pub encoder: [usize; 3],
    pub mlp_hidden: [usize; 2],
    pub embed_dim: usize,
    pub decoder: [usize; 2],
    pub attention: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            encoder: [64, 128, 256],
            mlp_hidden: [256, 256],
            embed_dim: 10,
            decoder: [128, 64],
            attention: true,
        }
    }
}

impl NetConfig {
    /// `(name, shape, fan_in)` of every parameter tensor, in storage order.
    fn layout(&self) -> Vec<(&'static str, Vec<usize>, usize)> {
        let [e1, e2, e3] = self.encoder;
        let [h1, h2] = self.mlp_hidden;
        let p = self.embed_dim;
        let [d1, d2] = self.decoder;
        vec![
            ("conv1.weight", vec![e1, 3, 3, 3], 27),
            ("conv1.bias", vec![e1], 0),
            ("conv2.weight", vec![e2, e1, 3, 3], e1 * 9),
            ("conv2.bias", vec![e2], 0),
            ("conv3.weight", vec![e3, e2, 3, 3], e2 * 9),
            ("conv3.bias", vec![e3], 0),
            ("mlp1.weight", vec![h1, e3], e3),
            ("mlp1.bias", vec![h1], 0),
            ("mlp2.weight", vec![h2, h1], h1),
            ("mlp2.bias", vec![h2], 0),
            ("mlp3.weight", vec![p, h2], h2),
            ("mlp3.bias", vec![p], 0),
            ("deconv1.weight", vec![p, d1, 2, 2], p),
            ("deconv1.bias", vec![d1], 0),
            ("deconv2.weight", vec![d1, d2, 2, 2], d1),
            ("deconv2.bias", vec![d2], 0),
            ("out.weight", vec![3, d2, 3, 3], d2 * 9),
            ("out.bias", vec![3], 0),
        ]
    }
}

const CONV1: usize = 0;
const CONV2: usize = 2;
const CONV3: usize = 4;
const MLP1: usize = 6;
const MLP2: usize = 8;
const MLP3: usize = 10;
const DECONV1: usize = 12;
const DECONV2: usize = 14;
const OUT: usize = 16;

/// One parameter tensor with its Adam moment buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Real> Param<T> {
    fn new(name: &str, shape: Vec<usize>, value: Vec<T>) -> Self {
        let n = value.len();
        Self {
            name: name.to_string(),
            shape,
            value,
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
        }
    }
}

/// All learnable tensors plus optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct NetParams<T> {
    config: NetConfig,
    params: Vec<Param<T>>,
    step: u64,
}

/// Gradients aligned with [`NetParams::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub tensors: Vec<Vec<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_like(params: &NetParams<T>) -> Self {
        Self {
            tensors: params.params.iter().map(|p| vec![T::zero(); p.value.len()]).collect(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.tensors.iter().flatten().all(|g| g.is_zero())
    }
}

/// Activations of one forward pass, retained for [`NetParams::backward`].
#[derive(Clone, Debug)]
pub struct Forward<T> {
    /// Unnormalized embedding, `p x (grid_h * grid_w)` channel-major.
    pub embedding: Vec<T>,
    /// Reconstruction, `3 x (height * width)` channel-major.
    pub recon: Vec<T>,
    pub width: usize,
    pub height: usize,
    cache: Cache<T>,
}

#[derive(Clone, Debug)]
struct Cache<T> {
    // layer inputs are kept for convolutions computed without im2col
    input: Vec<T>,
    p1: Vec<T>,
    p2: Vec<T>,
    cols1: Vec<T>,
    a1: Vec<T>,
    arg1: Vec<u32>,
    cols2: Vec<T>,
    a2: Vec<T>,
    arg2: Vec<u32>,
    cols3: Vec<T>,
    a3: Vec<T>,
    h1: Vec<T>,
    h2: Vec<T>,
    attention: Option<AttentionCache>,
    d1: Vec<T>,
    d2: Vec<T>,
    cols_out: Vec<T>,
}

impl<T> Forward<T> {
    pub fn grid_width(&self) -> usize {
        self.width / GRID_SCALE
    }

    pub fn grid_height(&self) -> usize {
        self.height / GRID_SCALE
    }
}

impl<T: Real> NetParams<T> {
    /// Kaiming-uniform (fan-in) weights, zero biases.
    pub fn init(config: NetConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = config
            .layout()
            .into_iter()
            .map(|(name, shape, fan_in)| {
                let n: usize = shape.iter().product();
                let value = if fan_in == 0 {
                    vec![T::zero(); n]
                } else {
                    let bound = (6.0 / fan_in as f64).sqrt();
                    (0..n)
                        .map(|_| T::from_f64(rng.random_range(-bound..bound)).unwrap())
                        .collect()
                };
                Param::new(name, shape, value)
            })
            .collect();
        Self {
            config,
            params,
            step: 0,
        }
    }

    /// Network with every weight and bias set to zero.
    pub fn zeros(config: NetConfig) -> Self {
        let params = config
            .layout()
            .into_iter()
            .map(|(name, shape, _)| {
                let n = shape.iter().product();
                Param::new(name, shape, vec![T::zero(); n])
            })
            .collect();
        Self {
            config,
            params,
            step: 0,
        }
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().flat_map(|p| &p.value).all(|v| v.is_finite())
    }

    /// Converts parameter values to another precision; optimizer state is reset.
    pub fn cast<U: Real>(&self) -> NetParams<U> {
        NetParams {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| {
                    Param::new(
                        &p.name,
                        p.shape.clone(),
                        p.value
                            .iter()
                            .map(|v| U::from_f64(v.to_f64().unwrap()).unwrap())
                            .collect(),
                    )
                })
                .collect(),
            step: 0,
        }
    }

    fn w(&self, idx: usize) -> &[T] {
        &self.params[idx].value
    }

    pub fn forward_image(&self, image: &FlowImage) -> Result<Forward<T>> {
        let input: Vec<T> = image.data().iter().map(|&v| T::from_f32(v).unwrap()).collect();
        self.forward(&input, image.width(), image.height())
    }

    /// Runs the autoencoder on a `3 x height x width` channel-major image.
    ///
    /// Both dimensions must be multiples of [`GRID_SCALE`].
    pub fn forward(&self, input: &[T], width: usize, height: usize) -> Result<Forward<T>> {
        if width == 0 || height == 0 || !width.is_multiple_of(GRID_SCALE) || !height.is_multiple_of(GRID_SCALE) {
            return Err(Error::DimMismatch(format!(
                "network input {width}x{height} is not a positive multiple of {GRID_SCALE}"
            )));
        }
        if input.len() != 3 * width * height {
            return Err(Error::ShapeMismatch(format!(
                "{} input values for a 3x{height}x{width} image",
                input.len()
            )));
        }
        let cfg = &self.config;
        let [e1, e2, e3] = cfg.encoder;
        let [m1, m2] = cfg.mlp_hidden;
        let p = cfg.embed_dim;
        let [d1c, d2c] = cfg.decoder;
        let (h, w) = (height, width);
        let (h2, w2) = (h / 2, w / 2);
        let (h4, w4) = (h / 4, w / 4);
        let px = h4 * w4;

        let (mut a1, cols1) = conv3x3_forward(input, 3, h, w, self.w(CONV1), self.w(CONV1 + 1), e1);
        relu_inplace(&mut a1);
        let (p1, arg1) = maxpool2_forward(&a1, e1, h, w);
        let (mut a2, cols2) = conv3x3_forward(&p1, e1, h2, w2, self.w(CONV2), self.w(CONV2 + 1), e2);
        relu_inplace(&mut a2);
        let (p2, arg2) = maxpool2_forward(&a2, e2, h2, w2);
        let (mut a3, cols3) = conv3x3_forward(&p2, e2, h4, w4, self.w(CONV3), self.w(CONV3 + 1), e3);
        relu_inplace(&mut a3);

        let mut hid1 = linear_forward(&a3, e3, px, self.w(MLP1), self.w(MLP1 + 1), m1);
        relu_inplace(&mut hid1);
        let mut hid2 = linear_forward(&hid1, m1, px, self.w(MLP2), self.w(MLP2 + 1), m2);
        relu_inplace(&mut hid2);
        let mut embedding = linear_forward(&hid2, m2, px, self.w(MLP3), self.w(MLP3 + 1), p);
        let attention = if cfg.attention {
            let (att, cache) = attention_forward(&embedding, p, h4, w4);
            embedding.iter_mut().zip(&att).for_each(|(z, &a)| *z += a);
            Some(cache)
        } else {
            None
        };

        let mut dec1 = deconv2x2_forward(&embedding, p, h4, w4, self.w(DECONV1), self.w(DECONV1 + 1), d1c);
        relu_inplace(&mut dec1);
        let mut dec2 = deconv2x2_forward(&dec1, d1c, h2, w2, self.w(DECONV2), self.w(DECONV2 + 1), d2c);
        relu_inplace(&mut dec2);
        let (recon, cols_out) = conv3x3_forward(&dec2, d2c, h, w, self.w(OUT), self.w(OUT + 1), 3);

        if !embedding.iter().chain(&recon).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("network activations".into()));
        }
        Ok(Forward {
            embedding,
            recon,
            width,
            height,
            cache: Cache {
                input: input.to_vec(),
                p1,
                p2,
                cols1,
                a1,
                arg1,
                cols2,
                a2,
                arg2,
                cols3,
                a3,
                h1: hid1,
                h2: hid2,
                attention,
                d1: dec1,
                d2: dec2,
                cols_out,
            },
        })
    }

    /// Reverse-mode gradients of a scalar whose partial derivatives with respect to the
    /// embedding and the reconstruction are `d_embedding` and `d_recon`.
    pub fn backward(&self, fwd: &Forward<T>, d_embedding: &[T], d_recon: &[T]) -> Result<Gradients<T>> {
        if d_embedding.len() != fwd.embedding.len() || d_recon.len() != fwd.recon.len() {
            return Err(Error::ShapeMismatch(format!(
                "upstream gradients ({}, {}) vs outputs ({}, {})",
                d_embedding.len(),
                d_recon.len(),
                fwd.embedding.len(),
                fwd.recon.len()
            )));
        }
        let cfg = &self.config;
        let [e1, e2, e3] = cfg.encoder;
        let [m1, m2] = cfg.mlp_hidden;
        let p = cfg.embed_dim;
        let [d1c, d2c] = cfg.decoder;
        let (h, w) = (fwd.height, fwd.width);
        let (h2, w2) = (h / 2, w / 2);
        let (h4, w4) = (h / 4, w / 4);
        let px = h4 * w4;
        let c = &fwd.cache;
        let mut grads = Gradients::zeros_like(self);
        let g = &mut grads.tensors;

        let (gw, gb) = split_pair(g, OUT);
        let mut d_dec2 = conv3x3_backward(d_recon, &c.cols_out, &c.d2, d2c, h, w, self.w(OUT), 3, gw, gb, true)
            .expect("input gradient requested");
        relu_backward(&mut d_dec2, &c.d2);
        let (gw, gb) = split_pair(g, DECONV2);
        let mut d_dec1 = deconv2x2_backward(&d_dec2, &c.d1, d1c, h2, w2, self.w(DECONV2), d2c, gw, gb);
        relu_backward(&mut d_dec1, &c.d1);
        let (gw, gb) = split_pair(g, DECONV1);
        let mut d_z = deconv2x2_backward(&d_dec1, &fwd.embedding, p, h4, w4, self.w(DECONV1), d1c, gw, gb);
        d_z.iter_mut().zip(d_embedding).for_each(|(a, &b)| *a += b);

        let d_f = match &c.attention {
            Some(cache) => {
                let mut d_f = attention_backward(&d_z, cache);
                d_f.iter_mut().zip(&d_z).for_each(|(a, &b)| *a += b);
                d_f
            }
            None => d_z,
        };

        let (gw, gb) = split_pair(g, MLP3);
        let mut d_h2 = linear_backward(&d_f, &c.h2, m2, px, self.w(MLP3), p, gw, gb);
        relu_backward(&mut d_h2, &c.h2);
        let (gw, gb) = split_pair(g, MLP2);
        let mut d_h1 = linear_backward(&d_h2, &c.h1, m1, px, self.w(MLP2), m2, gw, gb);
        relu_backward(&mut d_h1, &c.h1);
        let (gw, gb) = split_pair(g, MLP1);
        let mut d_a3 = linear_backward(&d_h1, &c.a3, e3, px, self.w(MLP1), m1, gw, gb);
        relu_backward(&mut d_a3, &c.a3);

        let (gw, gb) = split_pair(g, CONV3);
        let d_p2 = conv3x3_backward(&d_a3, &c.cols3, &c.p2, e2, h4, w4, self.w(CONV3), e3, gw, gb, true)
            .expect("input gradient requested");
        let mut d_a2 = maxpool2_backward(&d_p2, &c.arg2, c.a2.len());
        relu_backward(&mut d_a2, &c.a2);
        let (gw, gb) = split_pair(g, CONV2);
        let d_p1 = conv3x3_backward(&d_a2, &c.cols2, &c.p1, e1, h2, w2, self.w(CONV2), e2, gw, gb, true)
            .expect("input gradient requested");
        let mut d_a1 = maxpool2_backward(&d_p1, &c.arg1, c.a1.len());
        relu_backward(&mut d_a1, &c.a1);
        let (gw, gb) = split_pair(g, CONV1);
        conv3x3_backward(&d_a1, &c.cols1, &c.input, 3, h, w, self.w(CONV1), e1, gw, gb, false);

        Ok(grads)
    }

    /// One Adam update of every parameter; increments the step counter.
    pub fn adam_step(&mut self, grads: &Gradients<T>, cfg: &AdamConfig) -> Result<()> {
        if grads.tensors.len() != self.params.len()
            || grads
                .tensors
                .iter()
                .zip(&self.params)
                .any(|(g, p)| g.len() != p.value.len())
        {
            return Err(Error::ShapeMismatch("gradients do not match parameters".into()));
        }
        if let Some(p) = grads
            .tensors
            .iter()
            .zip(&self.params)
            .find(|(g, _)| !g.iter().all(|v| v.is_finite()))
        {
            return Err(Error::NonFinite(format!("gradient of {}", p.1.name)));
        }
        self.step += 1;
        for (p, g) in self.params.iter_mut().zip(&grads.tensors) {
            adam_update(&mut p.value, g, &mut p.m, &mut p.v, self.step, cfg);
        }
        Ok(())
    }
}

fn split_pair<T>(g: &mut [Vec<T>], idx: usize) -> (&mut [T], &mut [T]) {
    let (a, b) = g[idx..].split_at_mut(1);
    (&mut a[0], &mut b[0])
}
