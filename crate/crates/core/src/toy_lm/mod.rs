//! Small decoder-only transformer policy with a continuous-prefix input path.

mod decode;
mod model;
mod pretrain;
mod vocab;

pub use decode::{argmax, sample_logits, Decoder, Decoding, Generation};
pub use model::{ModelConfig, PolicyModel, ScoreItem};
pub(crate) use pretrain::nll_step;
pub use pretrain::{lr_at, pretrain, PretrainConfig};
pub use vocab::{Token, Vocabulary};
