//! Corpus ingestion and training-pair synthesis.

pub mod batch;
pub mod degrade;
pub mod manifest;
pub mod mixing;
pub mod sad;
pub mod wav;

pub use batch::{make_batch, rescale_pair, DataConfig, ItemMeta, TrainBatch, RESCALE_EPS};
pub use degrade::{
    align, band_noise, degrade, external_codec, lowpass, surrogate_cutoff_hz, DegradeConfig, DegradeMethod,
    DEFAULT_BITRATES,
};
pub use manifest::{read_manifest, scan_corpus, write_manifest, CorpusLayout, ManifestEntry};
pub use mixing::{sample_mixture, Mixture, StemLibrary, StemRecord, LIBRARY_SAMPLE_RATE};
pub use sad::{detect_activity, SadConfig, Segment};
pub use wav::{read_wav, write_wav, Audio, WavFormat};
