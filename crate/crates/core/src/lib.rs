//! Contrastive in-context learning for few-shot named entity recognition
//! and relation extraction with code-style prompts.
//!
//! The pipeline retrieves similar annotated sentences as positive
//! demonstrations, mines hard negatives from the model's own consensus
//! mistakes, renders both as Python-like functions, queries a completion
//! backend and scores the parsed output with exact-match F1.

pub mod corpus;
pub mod evaluation;
pub mod gateway;
pub mod mining;
pub mod orchestrator;
pub mod parsing;
pub mod prompting;
pub mod retrieval;
