//! Claim verification engine: retrieves multimodal evidence for a post,
//! groups it into narrative clusters, drops visually unrelated evidence and
//! reaches an explained verdict through a fixed decision protocol.

pub mod model;
pub mod numeric;
pub mod providers;
pub mod clustering;
pub mod visual;
pub mod retrieval;
pub mod judgment;
pub mod pipeline;
pub mod eval;
pub mod authoring;
