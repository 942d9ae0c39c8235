//! Model-facing work: prompts, token accounting, response parsing,
//! backends and code synthesis.

pub mod backend;
pub mod http;
pub mod mock;
pub mod parse;
pub mod prompts;
pub mod synth;
pub mod tokens;

pub use backend::{Backend, GenerationResult};
pub use http::{HttpBackend, HttpConfig};
pub use mock::{infer_pattern, Behavior, DefaultBehavior, MockBackend, MockProfile, MockRule, MockTable};
pub use parse::{parse_structured_response, parse_verdict, FieldMap};
pub use prompts::{marshal_bonded_prompt, marshal_field_prompts, marshal_filter_prompt, PromptRequest, TaskKind, TaskMeta};
pub use synth::{apply_converter, synthesize_converter, SynthesizedConverter};
pub use tokens::{count_tokens, reduce_input};
