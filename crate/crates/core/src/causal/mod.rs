//! Back-door confounder priors and front-door visual intervention.

pub mod codebook;
pub mod confounder;
pub mod lgcam;

pub use codebook::{build_codebook, kmeans, sample_global, KMeansFit, VisualCodebook};
pub use confounder::{build_confounder_vocabulary, ConfounderVocabulary, PhraseStat};
pub use lgcam::{front_door_features, front_door_with_rng, lgcam, FrontDoorOutput, LgcamOutput, LgcamParams};
