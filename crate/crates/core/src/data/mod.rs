//! Mixed-modality corpora: sample types, JSONL ingestion, synthetic
//! generators and deterministic batching.

mod batch;
mod jsonl;
mod sample;
mod synthetic;

pub use batch::{batch_indices, batches};
pub use jsonl::{load_jsonl, parse_jsonl, to_jsonl_string, write_jsonl};
pub use sample::{Corpus, CorpusDims, DomainLabel, MixedSample};
pub use synthetic::{
    class_prototypes, gen_synthetic, gen_unimodal_cm, text_trigger_marginal, Combination, SplitFractions,
    SyntheticRule, SyntheticSplits, FEATURE_SIGMA,
};

/// SplitMix64 finalizer; derives independent stream seeds from `(seed, index)`.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
