//! Metadata-to-conversation pipeline core: unified metadata model, dataset
//! ingestion and linking, scene trees, context construction, prompt
//! handling and the iterative turn generator.

pub mod context;
pub mod generation;
pub mod ingestion;
pub mod llm;
pub mod mask;
pub mod metadata;
pub mod prompts;
pub mod scene;

pub use context::{ContextBuilder, ContextSentence, ContextSet, Origin};
pub use generation::{Conversation, GenerationParams, Generator, ReductionMode, Turn};
pub use llm::{ChatModel, ChatRequest, ChatResponse, LlmError, ModelProfile, Stage};
pub use metadata::{BBox, BoxAnnotation, ImageRef, MetadataBundle};
pub use prompts::PromptSet;
pub use scene::{SceneTree, SceneTreeParams};
