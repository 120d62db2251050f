//! Full network: encoder, half-FPN, prototype bank and decoder.

use crate::backbone::{Encoder, FeaturePyramid, HalfFpn, PyramidRole};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{grid_to_seq, BindMode, Bound, Init, ParamId, ParamStore};
use crate::prototype::{DistanceMap, PrototypeBank};
use crate::real::Real;
use crate::rng::{self, streams};
use crate::ssm::Decoder;
use crate::tensor::{Tape, Tensor, Var};

pub const BANK_PARAM: &str = "prototype.bank";

#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    encoder: Encoder,
    fpn: HalfFpn,
    bank: ParamId,
    decoder: Decoder,
}

/// Tape handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub org: [Var; 3],
    pub rec: [Var; 3],
    pub fused: Var,
    /// Distance map on the fused grid `[g, g]`.
    pub distance: Var,
}

/// Loss node plus its two terms for logging.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub mse: Var,
    pub distance_mean: Var,
}

/// Plain values of one inference pass.
#[derive(Clone, Debug)]
pub struct Inference<T> {
    pub org: FeaturePyramid<T>,
    pub rec: FeaturePyramid<T>,
    pub distance: DistanceMap<T>,
}

impl Model {
    /// Builds the network and its parameters from `seed`. The bank starts
    /// uniform random; training replaces it with sampled fused grids.
    pub fn new<T: Real>(cfg: ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let mut rng = rng::stream(seed, streams::PARAM_INIT);
        let encoder = Encoder::new(&mut store, cfg.encoder(), &mut rng)?;
        let fpn = HalfFpn::new(&mut store, cfg.level_channels, cfg.fused_channels, &mut rng);
        let g = cfg.fused_side();
        cfg.window().validate(g, g)?;
        let bank = store.add(
            BANK_PARAM,
            Init::Uniform { fan_in: 1 }.tensor(&[cfg.prototypes, g * g, cfg.fused_channels], &mut rng),
            true,
        );
        let decoder = Decoder::new(&mut store, cfg.decoder(), &mut rng)?;
        if !cfg.encoder_trainable {
            store.set_trainable("encoder.", false);
        }
        Ok((Self { cfg, encoder, fpn, bank, decoder }, store))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn bank_id(&self) -> ParamId {
        self.bank
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn bank<T: Real>(&self, store: &ParamStore<T>) -> PrototypeBank<T> {
        let g = self.cfg.fused_side();
        PrototypeBank::new(g, g, store.get(self.bank).clone()).expect("bank shape fixed at construction")
    }

    pub fn set_bank<T: Real>(&self, store: &mut ParamStore<T>, bank: PrototypeBank<T>) -> Result<()> {
        if bank.tensor.shape() != store.get(self.bank).shape() {
            return Err(Error::shape(
                "set-bank",
                format!("{:?} vs {:?}", bank.tensor.shape(), store.get(self.bank).shape()),
            ));
        }
        *store.get_mut(self.bank) = bank.tensor;
        Ok(())
    }

    /// Encoder levels and the fused grid only (used to seed prototypes).
    pub fn encode<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, image: Var) -> Result<([Var; 3], Var)> {
        let org = self.encoder.forward(tape, p, image)?;
        let fused = self.fpn.forward(tape, p, &org)?;
        Ok((org, fused))
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, image: Var) -> Result<ForwardVars> {
        let (org, fused) = self.encode(tape, p, image)?;
        let g = self.cfg.fused_side();
        let patches = grid_to_seq(tape, fused)?;
        let distance = tape.window_distance(p.var(self.bank), patches, g, g, self.cfg.window)?;
        let rec = self.decoder.forward(tape, p, fused)?;
        Ok(ForwardVars { org, rec, fused, distance })
    }

    /// `sum_l mse(f_org, f_rec) + epsilon * mean(bilinear_up(D))`.
    pub fn loss<T: Real>(&self, tape: &mut Tape<T>, fw: &ForwardVars, epsilon: f64) -> Result<LossVars> {
        let mut mse: Option<Var> = None;
        for (a, b) in fw.org.iter().zip(&fw.rec) {
            let m = tape.mse(*a, *b)?;
            mse = Some(match mse {
                None => m,
                Some(acc) => tape.add(acc, m)?,
            });
        }
        let mse = mse.expect("three levels");
        let s = self.cfg.image_size;
        let up = tape.upsample_bilinear(fw.distance, s, s)?;
        let distance_mean = tape.mean(up);
        let weighted = tape.scale(distance_mean, T::c(epsilon));
        let total = tape.add(mse, weighted)?;
        Ok(LossVars { total, mse, distance_mean })
    }

    /// Gradient-free pass over one `[1,S,S]` image.
    pub fn infer<T: Real>(&self, store: &ParamStore<T>, image: &Tensor<T>) -> Result<Inference<T>> {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, BindMode::Inference);
        let x = tape.constant(image.clone());
        let fw = self.forward(&mut tape, &p, x)?;
        let grab = |vars: &[Var; 3], role| {
            FeaturePyramid::new(std::array::from_fn(|i| tape.value(vars[i]).clone()), role)
        };
        let org = grab(&fw.org, PyramidRole::Original)?;
        let rec = grab(&fw.rec, PyramidRole::Reconstructed)?;
        let g = self.cfg.fused_side();
        let distance = DistanceMap { h: g, w: g, values: tape.data(fw.distance).to_vec() };
        Ok(Inference { org, rec, distance })
    }
}
