//! Audio-caption manifests, caption tokenization, target vocabularies and batching.

mod batch;
mod codec;
mod manifest;
mod normalize;
mod vocab;

pub use batch::{Batch, Collator, Example};
pub use codec::{detokenize, pretokenize, tokenize, Gpt2Codec, TextCodec, TokenSequence};
pub use manifest::{
    expand_pairs, filter_split, load_manifest, parse_manifest, write_manifest, CaptionRecord, Split,
};
pub use normalize::Normalization;
pub use vocab::{
    build_vocabulary, Vocabulary, BOS_ID, BOS_TOKEN, EOS_ID, EOS_TOKEN, PAD_ID, PAD_TOKEN, UNK_ID,
    UNK_TOKEN,
};
