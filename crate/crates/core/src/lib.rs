//! Speech enhancement with non-negative hidden Markov models.
//!
//! Speech and noise are each modelled by an HMM whose states carry their own
//! KL-NMF basis, so that a magnitude frame is Poisson-distributed around the
//! state's basis times a per-frame activation vector. [`trainer`] learns
//! such a model offline with EM; [`enhancer`] combines a speech model and a
//! noise model into a composite chain and filters noisy audio frame by frame
//! with an MMSE gain.

pub mod audio_io;
pub mod enhancer;
pub mod hmm_core;
pub mod kl_nmf;
pub mod metrics;
pub mod model_store;
pub mod spectral;
pub mod trainer;

pub use audio_io::{read_wav, write_wav, AudioClip};
pub use enhancer::{enhance, CompositeModel, EnhanceConfig};
pub use hmm_core::{ChainParams, CompositeIndex, ForwardState, PosteriorSet};
pub use spectral::{istft, stft, Spectrogram, StftConfig};
pub use trainer::{train, HmmNmfModel, SourceRole, TrainConfig};
