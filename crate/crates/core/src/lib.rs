pub mod classify;
pub mod embeddings;
pub mod evaluation;
pub mod imagecore;
pub mod nnet;
pub mod pretext;
pub mod projection;
pub mod synthgen;
pub mod pipeline;
