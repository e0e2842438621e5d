//! Frozen per-frame encoder stand-in and the trainable temporal fusion block.
//!
//! The encoder splits each frame into non-overlapping patches, maps every
//! flattened patch to `D` channels with a fixed seeded projection and adds a
//! 2-D sinusoidal position code. The per-frame `cls` vector is the mean patch
//! embedding (before the position code) through a second fixed map.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{fan_in_uniform, Bound, ParamId, ParamStore};
use crate::stf;
use crate::tensor::Tensor;

/// A clip of `T` frames with pixel values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    /// `[T, C, H, W]`
    pub frames: Tensor,
    pub label: usize,
    /// `[T, H, W]` object ids, 0 for background.
    pub gt_masks: Option<Tensor>,
}

impl VideoClip {
    pub fn new(frames: Tensor, label: usize, gt_masks: Option<Tensor>) -> Result<Self> {
        let s = frames.shape();
        if s.len() != 4 {
            return Err(Error::Contract(format!("frames must be [T, C, H, W], got {s:?}")));
        }
        if s[0] < 2 {
            return Err(Error::Contract(format!("a clip needs at least 2 frames, got {}", s[0])));
        }
        if let Some(m) = &gt_masks {
            if m.shape() != [s[0], s[2], s[3]] {
                return Err(Error::shape("gt_masks", &[s[0], s[2], s[3]], m.shape()));
            }
        }
        Ok(Self {
            frames,
            label,
            gt_masks,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[3]
    }
}

/// Output of the frozen encoder for one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameFeatures {
    /// `[T, D]`
    pub cls: Tensor,
    /// `[T, H*W, D]`
    pub grid: Tensor,
    pub h: usize,
    pub w: usize,
}

impl FrameFeatures {
    pub fn new(cls: Tensor, grid: Tensor, h: usize, w: usize) -> Result<Self> {
        let (cs, gs) = (cls.shape(), grid.shape());
        if cs.len() != 2 || gs.len() != 3 || cs[0] != gs[0] || cs[1] != gs[2] || gs[1] != h * w {
            return Err(Error::format(format!(
                "inconsistent features: cls {cs:?}, grid {gs:?}, patch grid {h}x{w}"
            )));
        }
        if !cls.is_finite() || !grid.is_finite() {
            return Err(Error::format("features contain non-finite values"));
        }
        Ok(Self { cls, grid, h, w })
    }

    pub fn num_frames(&self) -> usize {
        self.cls.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.cls.shape()[1]
    }

    /// Writes `cls` as `[T, D]` and `grid` as `[T, H, W, D]`.
    pub fn save(&self, cls_path: impl AsRef<Path>, grid_path: impl AsRef<Path>) -> Result<()> {
        stf::save(cls_path, &self.cls)?;
        let (t, d) = (self.num_frames(), self.dim());
        stf::save(grid_path, &self.grid.reshape(&[t, self.h, self.w, d])?)
    }
}

/// Loads precomputed features. `grid` may be `[T, H, W, D]` or `[T, HW, D]`
/// with a square patch grid.
pub fn load_features(cls_path: impl AsRef<Path>, grid_path: impl AsRef<Path>) -> Result<FrameFeatures> {
    let cls = stf::load(cls_path)?;
    let grid = stf::load(grid_path)?;
    let (h, w, grid) = match grid.shape() {
        &[t, h, w, d] => (h, w, grid.reshape(&[t, h * w, d])?),
        &[_, hw, _] => {
            let side = (hw as f64).sqrt().round() as usize;
            if side * side != hw {
                return Err(Error::format(format!(
                    "grid of {hw} patches is not square; store it as [T, H, W, D]"
                )));
            }
            (side, side, grid)
        }
        other => return Err(Error::format(format!("grid must have rank 3 or 4, got {other:?}"))),
    };
    FrameFeatures::new(cls, grid, h, w)
}

/// Base of the frequency ladder of [`sinusoidal_2d`].
pub const PE_TEMPERATURE: f64 = 10000.0;

/// 2-D sinusoidal position code of shape `[h*w, dim]`: the first half of the
/// channels encodes the row, the second half the column. Cell centers are
/// normalised to `(0, 2π)` along each axis before the usual geometric
/// frequency ladder, so the code does not depend on the grid size.
pub fn sinusoidal_2d(h: usize, w: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = Tensor::zeros(&[h * w, dim]);
    let tau = 2.0 * std::f64::consts::PI;
    let encode = |pos: f64, c: usize, width: usize| -> f64 {
        let pair = (c / 2) as f64;
        let freq = 1.0 / PE_TEMPERATURE.powf(2.0 * pair / width.max(1) as f64);
        if c % 2 == 0 {
            (pos * freq).sin()
        } else {
            (pos * freq).cos()
        }
    };
    for y in 0..h {
        for x in 0..w {
            let row = &mut out.data_mut()[(y * w + x) * dim..(y * w + x + 1) * dim];
            for (c, v) in row.iter_mut().enumerate() {
                *v = if c < half {
                    encode((y as f64 + 0.5) / h as f64 * tau, c, half)
                } else {
                    encode((x as f64 + 0.5) / w as f64 * tau, c - half, dim - half)
                };
            }
        }
    }
    out
}

/// Fixed patch-embedding encoder. Its weights are drawn once from the seed and
/// never registered as trainable parameters.
#[derive(Clone, Debug)]
pub struct StubEncoder {
    pub patch: usize,
    pub dim: usize,
    pub channels: usize,
    pub seed: u64,
    /// `[C*patch*patch, D]`
    proj: Tensor,
    /// `[D, D]`
    cls_proj: Tensor,
}

impl StubEncoder {
    pub fn new(channels: usize, patch: usize, dim: usize, seed: u64) -> Result<Self> {
        if patch == 0 || dim == 0 || channels == 0 {
            return Err(Error::config("patch size, channels and D must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fan_in = channels * patch * patch;
        let proj = fan_in_uniform(&[fan_in, dim], fan_in, &mut rng);
        let cls_proj = fan_in_uniform(&[dim, dim], dim, &mut rng);
        Ok(Self {
            patch,
            dim,
            channels,
            seed,
            proj,
            cls_proj,
        })
    }

    pub fn projection(&self) -> &Tensor {
        &self.proj
    }

    pub fn cls_projection(&self) -> &Tensor {
        &self.cls_proj
    }

    pub fn encode(&self, clip: &VideoClip) -> Result<FrameFeatures> {
        let (t, c, hi, wi) = (clip.num_frames(), clip.channels(), clip.height(), clip.width());
        let p = self.patch;
        if c != self.channels {
            return Err(Error::config(format!("encoder expects {} channels, clip has {c}", self.channels)));
        }
        if hi % p != 0 || wi % p != 0 {
            return Err(Error::config(format!(
                "image {hi}x{wi} is not divisible by patch size {p}"
            )));
        }
        let (h, w) = (hi / p, wi / p);
        let d = self.dim;
        let fan_in = c * p * p;
        let pos = sinusoidal_2d(h, w, d);
        let px = clip.frames.data();
        let proj = self.proj.data();
        let mut grid = vec![0.0; t * h * w * d];
        let mut cls = vec![0.0; t * d];
        let mut patch_vec = vec![0.0; fan_in];
        let mut mean = vec![0.0; d];
        for f in 0..t {
            mean.iter_mut().for_each(|m| *m = 0.0);
            for gy in 0..h {
                for gx in 0..w {
                    for ch in 0..c {
                        for py in 0..p {
                            for pxi in 0..p {
                                let (y, x) = (gy * p + py, gx * p + pxi);
                                patch_vec[(ch * p + py) * p + pxi] = px[((f * c + ch) * hi + y) * wi + x];
                            }
                        }
                    }
                    let cell = gy * w + gx;
                    let out = &mut grid[(f * h * w + cell) * d..(f * h * w + cell + 1) * d];
                    for (k, &v) in patch_vec.iter().enumerate() {
                        if v == 0.0 {
                            continue;
                        }
                        for (o, wv) in out.iter_mut().zip(&proj[k * d..(k + 1) * d]) {
                            *o += v * wv;
                        }
                    }
                    for (m, o) in mean.iter_mut().zip(out.iter()) {
                        *m += o;
                    }
                    for (o, e) in out.iter_mut().zip(&pos.data()[cell * d..(cell + 1) * d]) {
                        *o += e;
                    }
                }
            }
            let n = (h * w) as f64;
            for j in 0..d {
                cls[f * d + j] = (0..d)
                    .map(|k| mean[k] / n * self.cls_proj.data()[k * d + j])
                    .sum();
            }
        }
        FrameFeatures::new(
            Tensor::new(vec![t, d], cls)?,
            Tensor::new(vec![t, h * w, d], grid)?,
            h,
            w,
        )
    }
}

/// Encodes `clip` with a freshly seeded [`StubEncoder`].
pub fn encode_stub(clip: &VideoClip, patch: usize, dim: usize, seed: u64) -> Result<FrameFeatures> {
    StubEncoder::new(clip.channels(), patch, dim, seed)?.encode(clip)
}

/// Residual depthwise temporal convolution (kernel 3 along time, one tap
/// vector per channel, zero-initialised).
#[derive(Clone, Debug)]
pub struct TemporalFusion {
    pub kernel: ParamId,
    pub bias: ParamId,
}

impl TemporalFusion {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            kernel: store.add(format!("{name}.kernel"), Tensor::zeros(&[3, dim])),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim])),
        }
    }

    /// `grid[T, HW, D] -> [T, HW, D]`
    pub fn forward(&self, g: &mut Graph, p: &Bound, grid: Var) -> Result<Var> {
        g.temporal_conv(grid, p.get(self.kernel), p.get(self.bias))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(t: usize, hw: usize, seed: u64) -> VideoClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        VideoClip::new(Tensor::uniform(&[t, 3, hw, hw], 0.0, 1.0, &mut rng), 0, None).unwrap()
    }

    #[test]
    fn zero_frames_give_position_code() {
        let c = VideoClip::new(Tensor::zeros(&[2, 3, 16, 16]), 0, None).unwrap();
        let f = encode_stub(&c, 8, 4, 1).unwrap();
        let pos = sinusoidal_2d(2, 2, 4);
        for t in 0..2 {
            assert_eq!(f.grid.index0(t), pos);
        }
        assert!(f.cls.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shapes_and_determinism() {
        let c = clip(3, 16, 5);
        let a = encode_stub(&c, 8, 4, 9).unwrap();
        let b = encode_stub(&c, 8, 4, 9).unwrap();
        assert_eq!(a.grid.shape(), &[3, 4, 4]);
        assert_eq!(a.cls.shape(), &[3, 4]);
        assert_eq!((a.h, a.w), (2, 2));
        assert_eq!(a, b);
        let other = encode_stub(&c, 8, 4, 10).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn indivisible_image_is_config_error() {
        let c = clip(2, 12, 1);
        assert!(matches!(encode_stub(&c, 8, 4, 0), Err(Error::Config(_))));
    }

    #[test]
    fn clip_needs_two_frames() {
        assert!(VideoClip::new(Tensor::zeros(&[1, 3, 8, 8]), 0, None).is_err());
        assert!(VideoClip::new(Tensor::zeros(&[2, 3, 8, 8]), 0, Some(Tensor::zeros(&[2, 8, 4]))).is_err());
    }

    #[test]
    fn zero_kernel_fusion_is_identity_and_t1_padding() {
        let mut store = ParamStore::new();
        let fusion = TemporalFusion::new(&mut store, "fusion", 3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let grid = Tensor::uniform(&[4, 2, 3], -1.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(grid.clone());
        let y = fusion.forward(&mut g, &p, x).unwrap();
        assert_eq!(g.value(y), &grid);

        let k = Tensor::new(vec![3, 3], vec![5.0, 5.0, 5.0, 0.5, -1.0, 2.0, 7.0, 7.0, 7.0]).unwrap();
        *store.get_mut(fusion.kernel) = k;
        let single = Tensor::uniform(&[1, 2, 3], -1.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(single.clone());
        let y = fusion.forward(&mut g, &p, x).unwrap();
        for (i, (&o, &s)) in g.value(y).data().iter().zip(single.data()).enumerate() {
            let center = [0.5, -1.0, 2.0][i % 3];
            assert!((o - (s + center * s)).abs() < 1e-15);
        }
    }
}
