//! Neural models: the multiple-choice scoring model that meta-learning
//! trains, and the recurrent policy network that weights source tasks.

mod policy;
mod scoring;

pub use policy::{PolicyNet, PolicyNetConfig, PolicyState, PolicyStateVals};
pub use scoring::{
    answer_distribution, BatchNllObjective, ChoiceInstance, EncoderConfig, ScoringModel,
};
