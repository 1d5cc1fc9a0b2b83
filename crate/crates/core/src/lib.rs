pub mod checkpoint;
pub mod eval;
pub mod corpus;
pub mod kg;
pub mod lm;
pub mod nn;
pub mod pipeline;
pub mod policy;
pub mod reward;
pub mod rsft;
pub mod seed;
pub mod synth;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/corpus.md")]
    mod corpus {}
    #[doc = include_str!("../../../book/src/rewards.md")]
    mod rewards {}
    #[doc = include_str!("../../../book/src/language-models.md")]
    mod language_models {}
    #[doc = include_str!("../../../book/src/knowledge-graphs.md")]
    mod knowledge_graphs {}
    #[doc = include_str!("../../../book/src/policy.md")]
    mod policy {}
    #[doc = include_str!("../../../book/src/fine-tuning.md")]
    mod fine_tuning {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
}
