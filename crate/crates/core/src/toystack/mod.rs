//! Frozen foundation-model stand-ins and the composition pipeline: toy SFM
//! encoder, pretrained-then-frozen toy LM, prompts, joining, and greedy
//! generation.

pub mod corpus;
pub mod lm;
pub mod sfm;
pub mod vocab;

pub use corpus::make_lm_corpus;
pub use lm::{
    build_toy_lm, embed_ids, greedy_generate, greedy_generate_ordered, join_j, join_j_ordered,
    lm_forward, load_toy_lm, perplexity, pretrain_toy_lm, JoinOutput, LmConfig, PretrainReport,
    ToyLM, LM_PREFIX,
};
pub use sfm::{build_toy_sfm, load_toy_sfm, sfm_encode, SfmPreset, ToySFM};
pub use vocab::{build_prompt, PromptSpec, Task, Vocab, BOS, EOS, PAD};
