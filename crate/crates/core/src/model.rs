//! The full set of offline-learned weights and their binding to a tape.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::config::ModelConfig;
use crate::nn::{Bound, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    /// Randomly initialized weights; deterministic in `seed`.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        crate::features::init_params(&mut params, cfg, &mut rng);
        crate::seg::init_params(&mut params, cfg, &mut rng);
        crate::fusion::init_params(&mut params, cfg, &mut rng);
        Self {
            cfg: cfg.clone(),
            params,
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Net<'_, 't> {
        Net {
            cfg: &self.cfg,
            p: Bound::new(tape, &self.params, trainable),
        }
    }

    /// Current value of the learnable segmentation regularizer.
    pub fn lambda_s(&self) -> f64 {
        let tape = Tape::new();
        self.bind(&tape, false).lambda_s().item()
    }
}

/// Model weights placed on a tape; the forward pieces of every module are
/// methods on this type.
pub struct Net<'m, 't> {
    pub cfg: &'m ModelConfig,
    pub p: Bound<'t>,
}

impl<'t> Net<'_, 't> {
    pub fn tape(&self) -> &'t Tape {
        self.p.tape()
    }
}
