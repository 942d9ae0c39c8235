use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::physical::ModelSpec;

use super::prompts::PromptRequest;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub text: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub latency_s: f64,
    pub usd: f64,
}

impl GenerationResult {
    pub fn priced(text: String, input_tokens: u64, output_tokens: u64, latency_s: f64, model: &ModelSpec) -> Self {
        GenerationResult {
            usd: model.cost(input_tokens, output_tokens),
            text,
            input_tokens,
            output_tokens,
            latency_s,
        }
    }
}

pub trait Backend: Send + Sync {
    /// Stable identity, part of every cache key: different backends (or
    /// different mock tables) never share cached results.
    fn id(&self) -> String;

    fn generate(&self, model: &ModelSpec, request: &PromptRequest) -> Result<GenerationResult>;

    /// Requests issued so far, including failed ones.
    fn calls(&self) -> u64;
}
