//! Seed derivations shared across commands, so datagen, training, and
//! evaluation agree on every stream without passing seeds around.

use gasp_core::lang::SurrogateGrammar;
use gasp_core::rng::derive_seed;

use crate::config::RunConfig;
use crate::errors::CliError;

/// Seed for model weight initialization.
pub fn model_init_seed(cfg: &RunConfig) -> u64 {
    derive_seed(cfg.seed, "model-init")
}

/// Effective training seed: an explicit nonzero `[train] seed` wins,
/// otherwise it derives from the global run seed.
pub fn effective_train_seed(cfg: &RunConfig) -> u64 {
    if cfg.train.seed != 0 {
        cfg.train.seed
    } else {
        derive_seed(cfg.seed, "train")
    }
}

/// The shared instruction grammar; datagen sentences and training batches
/// must come from the same one.
pub fn grammar_for(cfg: &RunConfig) -> Result<SurrogateGrammar, CliError> {
    Ok(SurrogateGrammar::new(cfg.model.vocab_size, derive_seed(cfg.seed, "surrogate-grammar"))?)
}
