use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::step::{forward_loss_in, prepare_batch, PreparedBatch};
use crate::config::Config;
use crate::dataset::Dataset;
use crate::encoder::DualModel;
use crate::objectives::ObjectiveMode;
use crate::tensor::gradcheck::{grad_check, GradCheckReport};
use crate::tensor::{Graph, ParamStore, Tensor};
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct ModeGradCheck {
    pub mode: ObjectiveMode,
    pub report: GradCheckReport,
}

/// Model, parameters and one frozen batch for checking gradients.
#[derive(Clone, Debug)]
pub struct GradCheckSetup {
    pub config: Config,
    pub model: DualModel,
    pub store: ParamStore,
    pub data: Dataset,
}

impl GradCheckSetup {
    /// Generate the configured corpus in memory and initialize the model
    /// from `config.seed`, with weight matrices scaled by
    /// `grad_check.weight_scale`.
    pub fn new(config: &Config) -> Result<Self> {
        config.validate()?;
        let data = Dataset::generate(config)?;
        if data.train.len() < config.grad_check.batch_origins {
            return Err(Error::Data("not enough sequences for the gradient check batch".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (model, mut store) = DualModel::new(&config.model, data.vocab.len(), &mut rng)?;
        let scale = config.grad_check.weight_scale;
        for e in store.entries_mut() {
            if e.decay {
                e.value.data_mut().iter_mut().for_each(|x| *x *= scale);
            }
        }
        Ok(Self {
            config: config.clone(),
            model,
            store,
            data,
        })
    }

    /// Frozen masks, replacements, crops and dropout seed for `mode`.
    pub fn batch(&self, mode: ObjectiveMode) -> Result<PreparedBatch> {
        let mut tc = self.config.trainer.clone();
        tc.mode = mode;
        let originals = &self.data.train[..self.config.grad_check.batch_origins];
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(1);
        prepare_batch(&self.model, &self.store, originals, &tc, &mut rng)
    }

    /// Central-difference check of the total loss of `mode` over every
    /// parameter tensor, dropout included. Stop-gradient outputs are held at
    /// their values from the unperturbed pass.
    pub fn check(&mut self, mode: ObjectiveMode) -> Result<GradCheckReport> {
        let batch = self.batch(mode)?;
        let mut tc = self.config.trainer.clone();
        tc.mode = mode;
        let gc = self.config.grad_check.clone();
        let model = self.model.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(2);
        let mut frozen: Option<Vec<Tensor>> = None;
        grad_check(
            &mut self.store,
            |store, want| {
                let g = if want { Graph::new() } else { Graph::no_grad() };
                let g = match &frozen {
                    Some(values) => g.with_frozen_detached(values.clone()),
                    None => g,
                };
                let pass = forward_loss_in(g, &model, store, &batch, &tc, true)?;
                if frozen.is_none() {
                    frozen = Some(pass.graph.detached_values().to_vec());
                }
                let value = pass.breakdown.total;
                let grads = if want {
                    Some(pass.graph.backward(pass.total)?.for_params(store))
                } else {
                    None
                };
                Ok::<_, Error>((value, grads))
            },
            gc.epsilon,
            gc.coords_per_param,
            &mut rng,
        )
    }
}

/// Gradient check of each mode in `modes` on the same parameters.
pub fn grad_check_modes(config: &Config, modes: &[ObjectiveMode]) -> Result<Vec<ModeGradCheck>> {
    let mut setup = GradCheckSetup::new(config)?;
    modes
        .iter()
        .map(|&mode| {
            Ok(ModeGradCheck {
                mode,
                report: setup.check(mode)?,
            })
        })
        .collect()
}
