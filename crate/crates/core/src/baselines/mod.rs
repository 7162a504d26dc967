//! Non-latent baselines: bilinear regression on side features and
//! text-retrieval scorers.

mod bilinear;
mod text;

pub use bilinear::{fit_bilinear, score_bilinear, BilinearModel, BilinearOptions, LAMBDA_GRID};
pub use text::{
    build_user_profiles, parse_item_text, read_item_text, score_bm25, score_cosine, score_lm_dirichlet, tokenize,
    Bm25Params, Corpus, UserProfile,
};
