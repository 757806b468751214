pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gate;
pub mod gradcheck;
pub mod inference;
pub mod layer;
pub mod model;
pub mod rng;
pub mod run;
pub mod shift;
pub mod tensor;
pub mod train;

pub use config::{Accounting, DropoutConfig, Group, HiddenInit, ModelConfig, Seeds};
pub use data::{PreparedPair, Vocab, BOS, EOS, PAD, UNK};
pub use error::{Error, Result};
pub use gate::GateKind;
pub use inference::{collapse_model, BitLanes, CollapsedModel};
pub use layer::{CollapsedLogicLayer, GumbelConfig, LayerTape, NodeInit, SoftLogicLayer};
pub use model::{Embedding, ForwardOutput, LayerGroup, ModelGrads, ModelTape, Pass, Seq2SeqModel};
pub use run::{DataConfig, Dataset, EvalReport, Evaluated, RunConfig, Trainer};
pub use tensor::Acts;
pub use train::{AdamW, GradStats, LossConfig, OptimizerConfig, PlateauScheduler, SchedulerConfig};
