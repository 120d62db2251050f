//! Three-scale convolutional encoder and half-FPN fusion.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, ParamStore};
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

pub const LEVEL_STRIDES: [usize; 3] = [4, 8, 16];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PyramidRole {
    Original,
    Reconstructed,
}

/// Per-scale feature grids `[C_l, H/s_l, W/s_l]` at strides 4, 8, 16.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid<T> {
    pub levels: [Tensor<T>; 3],
    pub role: PyramidRole,
}

impl<T: Real> FeaturePyramid<T> {
    pub fn new(levels: [Tensor<T>; 3], role: PyramidRole) -> Result<Self> {
        for l in &levels {
            if l.shape().len() != 3 {
                return Err(Error::shape("feature-pyramid", format!("level shape {:?}", l.shape())));
            }
        }
        Ok(Self { levels, role })
    }

    pub fn shapes(&self) -> [Vec<usize>; 3] {
        std::array::from_fn(|i| self.levels[i].shape().to_vec())
    }

    pub fn is_finite(&self) -> bool {
        self.levels.iter().all(Tensor::is_finite)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub stem_channels: usize,
    pub level_channels: [usize; 3],
}

/// 7x7 stride-2 stem followed by three stride-2 3x3 stages, SiLU after each.
/// Borders are mirrored so edge cells carry image content rather than padding.
#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: EncoderConfig,
    stem: Conv2d,
    stages: [Conv2d; 3],
}

impl Encoder {
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: EncoderConfig, rng: &mut Rng) -> Result<Self> {
        if cfg.image_size == 0 || !cfg.image_size.is_multiple_of(16) {
            return Err(Error::Config(format!("image size {} must be a multiple of 16", cfg.image_size)));
        }
        let stem = Conv2d::new(store, "encoder.stem", 1, cfg.stem_channels, 7, 2, 3, true, true, rng);
        let ch = cfg.level_channels;
        let s1 = Conv2d::new(store, "encoder.stage1", cfg.stem_channels, ch[0], 3, 2, 1, true, true, rng);
        let s2 = Conv2d::new(store, "encoder.stage2", ch[0], ch[1], 3, 2, 1, true, true, rng);
        let s3 = Conv2d::new(store, "encoder.stage3", ch[1], ch[2], 3, 2, 1, true, true, rng);
        Ok(Self { cfg, stem, stages: [s1, s2, s3] })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Image `[1,H,W]` to the three level grids.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, image: Var) -> Result<[Var; 3]> {
        let s = self.cfg.image_size;
        if tape.shape(image) != [1, s, s] {
            return Err(Error::shape(
                "encoder",
                format!("image {:?}, expected [1, {s}, {s}] (one grayscale channel)", tape.shape(image)),
            ));
        }
        let x = self.stem.forward_reflect(tape, p, image)?;
        let mut x = tape.silu(x);
        let mut out = [x; 3];
        for (i, st) in self.stages.iter().enumerate() {
            let y = st.forward_reflect(tape, p, x)?;
            x = tape.silu(y);
            out[i] = x;
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct HalfFpn {
    proj: [Conv2d; 3],
    width: usize,
}

impl HalfFpn {
    pub fn new<T: Real>(store: &mut ParamStore<T>, level_channels: [usize; 3], width: usize, rng: &mut Rng) -> Self {
        let proj = std::array::from_fn(|i| {
            Conv2d::new(store, &format!("fpn.proj{}", i + 1), level_channels[i], width, 1, 1, 0, false, false, rng)
        });
        Self { proj, width }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn projections(&self) -> &[Conv2d; 3] {
        &self.proj
    }

    /// Projects each level to the common width, resizes to the stride-8
    /// grid (2x2 average for stride 4, nearest 2x for stride 16) and sums.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, levels: &[Var; 3]) -> Result<Var> {
        let l1 = self.proj[0].forward(tape, p, levels[0])?;
        let l1 = tape.avg_pool2(l1)?;
        let l2 = self.proj[1].forward(tape, p, levels[1])?;
        let l3 = self.proj[2].forward(tape, p, levels[2])?;
        let l3 = tape.upsample_nearest2(l3)?;
        let s = tape.add(l1, l2)?;
        tape.add(s, l3)
    }
}
