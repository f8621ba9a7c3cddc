//! Frame encoder: a strided convolutional backbone and coordinate features.
//!
//! Images are square RGB rasters in `[0, 1]`, stored `[S, S, 3]`
//! (height, width, channel). The backbone halves the grid per block by
//! regrouping each 2×2 pixel window into channels (space-to-depth) and
//! mixing with a pointwise convolution + ReLU; four default blocks take a
//! 64×64 image to a 4×4 feature grid. Because every output cell is a
//! function of exactly one 16×16 input patch, shifting the image by one
//! patch shifts the feature map by one cell, bitwise — a property the
//! tests pin down.
//!
//! Each grid cell also gets a fixed 8-dim coordinate descriptor (corner,
//! center, and reciprocal-size entries) mapped through a learned pointwise
//! projection ([`coordinate_features`]); position reasoning downstream
//! works entirely on those projected rows.

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::params::{Bindings, ParamStore};
use crate::tape::{Tape, TensorId};
use crate::tensor::{fmt_shape, Real, Tensor, TensorError};

/// Input channels of a frame raster.
pub const IMAGE_CHANNELS: usize = 3;
/// Width of the raw per-cell coordinate descriptor.
pub const COORD_RAW_DIM: usize = 8;

#[derive(Debug, Error)]
pub enum VisualError {
    #[error("bad frame image: {detail}")]
    Image { detail: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// A square RGB frame with values in `[0, 1]`, laid out `[S, S, 3]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameImage {
    size: usize,
    data: Vec<Real>,
}

impl FrameImage {
    pub fn new(size: usize, data: Vec<Real>) -> Result<Self, VisualError> {
        if size == 0 {
            return Err(VisualError::Image { detail: "size must be positive".into() });
        }
        let want = size * size * IMAGE_CHANNELS;
        if data.len() != want {
            return Err(VisualError::Image {
                detail: format!("expected {want} values for a {size}x{size} rgb frame, got {}", data.len()),
            });
        }
        if let Some(&v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(VisualError::Image { detail: format!("pixel value {v} outside [0, 1]") });
        }
        Ok(Self { size, data })
    }

    /// Uniform fill, handy for tests.
    pub fn filled(size: usize, value: Real) -> Result<Self, VisualError> {
        Self::new(size, vec![value; size * size * IMAGE_CHANNELS])
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn pixel(&self, i: usize, j: usize) -> [Real; IMAGE_CHANNELS] {
        let at = (i * self.size + j) * IMAGE_CHANNELS;
        [self.data[at], self.data[at + 1], self.data[at + 2]]
    }

    pub fn set_pixel(&mut self, i: usize, j: usize, rgb: [Real; IMAGE_CHANNELS]) {
        let at = (i * self.size + j) * IMAGE_CHANNELS;
        self.data[at..at + IMAGE_CHANNELS].copy_from_slice(&rgb);
    }

    /// Mirror across the vertical axis: pixel (i, j) moves to (i, S-1-j).
    pub fn flip_horizontal(&self) -> Self {
        let s = self.size;
        let mut out = vec![0.0; self.data.len()];
        for i in 0..s {
            for j in 0..s {
                let src = (i * s + j) * IMAGE_CHANNELS;
                let dst = (i * s + (s - 1 - j)) * IMAGE_CHANNELS;
                out[dst..dst + IMAGE_CHANNELS].copy_from_slice(&self.data[src..src + IMAGE_CHANNELS]);
            }
        }
        Self { size: s, data: out }
    }

    /// The frame as a `[S, S, 3]` tensor ready for the tape.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.size, self.size, IMAGE_CHANNELS], self.data.clone()).expect("validated dims")
    }
}

/// Backbone widths: output channels of each stride-2 block. The grid
/// shrinks by `2^len` overall.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualDims {
    pub image_size: usize,
    pub widths: Vec<usize>,
}

impl Default for VisualDims {
    fn default() -> Self {
        Self { image_size: 64, widths: vec![12, 24, 48, 48] }
    }
}

impl VisualDims {
    /// Grid side after all blocks.
    pub fn grid(&self) -> usize {
        self.image_size >> self.widths.len()
    }

    /// Feature width at the final block.
    pub fn feature_dim(&self) -> usize {
        *self.widths.last().expect("at least one block")
    }

    pub fn validate(&self) -> Result<(), VisualError> {
        if self.widths.is_empty() {
            return Err(VisualError::Image { detail: "backbone needs at least one block".into() });
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(VisualError::Image { detail: "block widths must be positive".into() });
        }
        if self.image_size % (1 << self.widths.len()) != 0 {
            return Err(VisualError::Image {
                detail: format!(
                    "image size {} is not divisible by the total stride {}",
                    self.image_size,
                    1 << self.widths.len()
                ),
            });
        }
        if self.grid() == 0 {
            return Err(VisualError::Image { detail: "image too small for the block count".into() });
        }
        Ok(())
    }
}

/// Register backbone block weights under `visual/block{k}/{w,b}`.
pub fn register(params: &mut ParamStore, dims: &VisualDims, rng: &mut ChaCha8Rng) {
    let mut c_in = IMAGE_CHANNELS;
    for (k, &c_out) in dims.widths.iter().enumerate() {
        let fan_in = 4 * c_in;
        let bound = (1.0 / fan_in as Real).sqrt();
        params.insert_uniform(&format!("visual/block{k}/w"), &[fan_in, c_out], bound, rng);
        params.insert(&format!("visual/block{k}/b"), Tensor::zeros(&[c_out]));
        c_in = c_out;
    }
}

/// Register a coordinate projection under `{prefix}/{w,b}` mapping the
/// raw 8-dim descriptor to `dim` channels.
pub fn register_coord_projection(params: &mut ParamStore, prefix: &str, dim: usize, rng: &mut ChaCha8Rng) {
    let bound = (1.0 / COORD_RAW_DIM as Real).sqrt();
    params.insert_uniform(&format!("{prefix}/w"), &[COORD_RAW_DIM, dim], bound, rng);
    params.insert(&format!("{prefix}/b"), Tensor::zeros(&[dim]));
}

/// Regroup each 2×2 window of `x: [H, W, C]` into channels, yielding
/// `[H/2, W/2, 4C]` with the window scanned row-major (top-left,
/// top-right, bottom-left, bottom-right).
pub fn space_to_depth(tape: &mut Tape, x: TensorId) -> Result<TensorId, TensorError> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 3 {
        return Err(TensorError::shape("space_to_depth", format!("expected [H, W, C], got {}", fmt_shape(&shape))));
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(TensorError::shape("space_to_depth", format!("odd grid {}", fmt_shape(&shape))));
    }
    let grouped = tape.reshape(x, &[h / 2, 2, w / 2, 2, c])?;
    let swapped = tape.permute(grouped, &[0, 2, 1, 3, 4])?;
    tape.reshape(swapped, &[h / 2, w / 2, 4 * c])
}

/// Run the backbone and return every block's feature map, coarsest last.
/// Block `k` output is `[S/2^(k+1), S/2^(k+1), widths[k]]`.
pub fn backbone_forward(
    tape: &mut Tape,
    b: &Bindings,
    dims: &VisualDims,
    img: TensorId,
) -> Result<Vec<TensorId>, VisualError> {
    dims.validate()?;
    let shape = tape.value(img).shape();
    let want = [dims.image_size, dims.image_size, IMAGE_CHANNELS];
    if shape != want {
        return Err(VisualError::Image {
            detail: format!("backbone expects {}, got {}", fmt_shape(&want), fmt_shape(shape)),
        });
    }
    let mut taps = Vec::with_capacity(dims.widths.len());
    let mut x = img;
    for k in 0..dims.widths.len() {
        let packed = space_to_depth(tape, x)?;
        let mixed = tape.conv1x1(packed, b.p(&format!("visual/block{k}/w")), b.p(&format!("visual/block{k}/b")))?;
        x = tape.relu(mixed)?;
        taps.push(x);
    }
    Ok(taps)
}

/// The fixed per-cell coordinate descriptor for an `h × w` grid:
/// row `i*w + j` is `[j/w, i/h, (j+0.5)/w, (i+0.5)/h, (j+1)/w, (i+1)/h, 1/w, 1/h]`
/// (left/top corner, center, right/bottom corner, cell extent).
pub fn coordinate_grid(h: usize, w: usize) -> Tensor {
    assert!(h >= 1 && w >= 1, "grid dims must be positive");
    let (fh, fw) = (h as Real, w as Real);
    let mut data = Vec::with_capacity(h * w * COORD_RAW_DIM);
    for i in 0..h {
        for j in 0..w {
            let (fi, fj) = (i as Real, j as Real);
            data.extend_from_slice(&[
                fj / fw,
                fi / fh,
                (fj + 0.5) / fw,
                (fi + 0.5) / fh,
                (fj + 1.0) / fw,
                (fi + 1.0) / fh,
                1.0 / fw,
                1.0 / fh,
            ]);
        }
    }
    Tensor::new(vec![h * w, COORD_RAW_DIM], data).expect("validated dims")
}

/// Projected coordinate rows `[HW, D']` for a grid, through the learned
/// map registered at `{prefix}/{w,b}`.
pub fn coordinate_features(
    tape: &mut Tape,
    b: &Bindings,
    prefix: &str,
    h: usize,
    w: usize,
) -> Result<TensorId, TensorError> {
    let raw = tape.constant(coordinate_grid(h, w))?;
    tape.conv1x1(raw, b.p(&format!("{prefix}/w")), b.p(&format!("{prefix}/b")))
}
