//! Entity tagging for music requests, trained on a small human-annotated
//! coarse corpus plus fine-grained labels projected from listening sessions.
//!
//! Data flows `synthgen` → `engagement` → `labelgen` → `tagger` → `decode`
//! → `kb` → `eval`; `corpus` holds the shared types and file formats.

pub mod corpus;
pub mod decode;
pub mod engagement;
pub mod error;
pub mod eval;
pub mod kb;
pub mod labelgen;
pub mod synthgen;
pub mod tagger;
