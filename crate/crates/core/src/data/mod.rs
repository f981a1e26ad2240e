//! Audio I/O, resampling, SNR mixing, corpus manifests, batching and a
//! synthetic corpus generator.

mod corpus;
mod resample;
mod synth;
mod wav;

pub use corpus::{
    build_corpus, make_batch, mix_at_snr, snr_db, Batch, Corpus, CorpusBuild, Manifest, MixtureSpec,
    MANIFEST_HEADER, PAD_MULTIPLE,
};
pub use resample::{resample, resample_to_16k, Resampler, SUPPORTED_RATES, TARGET_RATE};
pub use synth::{speech_like, synth_corpus, synth_corpus_with, textured_noise, SynthSummary};
pub use wav::{list_wavs, read_wav, write_wav, AudioFile, WavFormat};
