use serde::{Deserialize, Serialize};

use super::block::{SpssBlock, SpssBlockConfig};
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, ParamStore};
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::{Tape, Var};

/// Four-stage hierarchical decoder.
///
/// Stage strides are 16, 16, 8, 4 relative to the input image: the fused
/// stride-8 grid is first merged down to stride 16, stages 2-4 each emit one
/// reconstructed level (strides 16, 8, 4), and nearest-neighbour 2x
/// upsampling plus a 1x1 conv sits between stages 2-3 and 3-4.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub fused_channels: usize,
    pub stage_channels: [usize; 4],
    pub depths: [usize; 4],
    /// Encoder widths of levels 1..3 (strides 4, 8, 16).
    pub level_channels: [usize; 3],
    pub expansion: usize,
    pub conv_kernel: usize,
    pub state_dim: usize,
    pub dt_rank: usize,
    pub directions: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    cfg: DecoderConfig,
    merge: Conv2d,
    stages: Vec<Vec<SpssBlock>>,
    /// Channel adapters entering stage 2 and the two upsampling steps.
    adapt: Vec<Option<Conv2d>>,
    heads: Vec<Conv2d>,
}

impl Decoder {
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: DecoderConfig, rng: &mut Rng) -> Result<Self> {
        if cfg.depths.contains(&0) {
            return Err(Error::Config(format!("decoder depths must be >= 1: {:?}", cfg.depths)));
        }
        let sc = cfg.stage_channels;
        let merge = Conv2d::new(store, "decoder.merge", cfg.fused_channels, sc[0], 3, 2, 1, true, false, rng);
        let mut stages = Vec::new();
        let mut adapt = Vec::new();
        let mut heads = Vec::new();
        for s in 0..4 {
            if s > 0 {
                // stage 1 -> 2 has no resize: only adapt width when it changes.
                let needed = s > 1 || sc[s] != sc[s - 1];
                adapt.push(needed.then(|| {
                    Conv2d::new(store, &format!("decoder.up{s}"), sc[s - 1], sc[s], 1, 1, 0, true, false, rng)
                }));
            }
            let mut blocks = Vec::new();
            for b in 0..cfg.depths[s] {
                let bc = SpssBlockConfig {
                    channels: sc[s],
                    expansion: cfg.expansion,
                    conv_kernel: cfg.conv_kernel,
                    state_dim: cfg.state_dim,
                    dt_rank: cfg.dt_rank,
                    directions: cfg.directions.clone(),
                };
                blocks.push(SpssBlock::new(store, &format!("decoder.stage{s}.block{b}"), bc, rng)?);
            }
            stages.push(blocks);
            if s >= 1 {
                let level = 3 - s; // stage 1 -> level 3 (idx 2), stage 3 -> level 1 (idx 0)
                heads.push(Conv2d::new(
                    store,
                    &format!("decoder.head{}", level + 1),
                    sc[s],
                    cfg.level_channels[level],
                    1,
                    1,
                    0,
                    true,
                    false,
                    rng,
                ));
            }
        }
        Ok(Self { cfg, merge, stages, adapt, heads })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    pub fn blocks(&self) -> impl Iterator<Item = &SpssBlock> {
        self.stages.iter().flatten()
    }

    /// Fused `[F, s, s]` grid to reconstructed levels `[l1, l2, l3]`
    /// at strides 4, 8, 16.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, fused: Var) -> Result<[Var; 3]> {
        match *tape.shape(fused) {
            [c, h, w] if c == self.cfg.fused_channels && h == w && h % 2 == 0 => {}
            ref s => {
                return Err(Error::shape(
                    "decoder",
                    format!("fused grid {s:?}, expected [{}, s, s] with even s", self.cfg.fused_channels),
                ))
            }
        }
        let mut x = self.merge.forward(tape, p, fused)?;
        let mut levels = [x; 3];
        for (s, blocks) in self.stages.iter().enumerate() {
            if s > 0 {
                if s > 1 {
                    x = tape.upsample_nearest2(x)?;
                }
                if let Some(conv) = &self.adapt[s - 1] {
                    x = conv.forward(tape, p, x)?;
                }
            }
            for b in blocks {
                x = b.forward(tape, p, x)?;
            }
            if s >= 1 {
                levels[3 - s] = self.heads[s - 1].forward(tape, p, x)?;
            }
        }
        Ok(levels)
    }
}
