//! Data plumbing: mel extraction and its binary container, frame-level
//! alignment tracks, the segment-shuffle augmentation, and a synthetic
//! mel-space corpus for desk-scale verification.

pub mod align;
pub mod corpus;
pub mod mel;
pub mod shuffle;

pub use align::{load_alignment, save_alignment, AlignmentTrack, Segment};
pub use corpus::{
    generate_synthetic_corpus, load_corpus, save_corpus, split_corpus, SyntheticCorpusSpec,
    UtteranceRecord, MEL_BANDS,
};
pub use mel::{load_mel, save_mel, wav_to_mel, MelConfig, MelSpectrogram};
pub use shuffle::{permute_segments, shuffle_by_phoneme};
