//! Mask-aware text-to-image retrieval.
//!
//! Galleries are indexed offline as one embedding per region mask. A text
//! query scores each image by its best-matching region, the top candidates
//! are reranked by a relevance scorer, and every kept image is grounded to
//! one of its indexed masks via box IoU against a grounder's box.
//!
//! The stage-1 scan runs on rayon when the `parallel` feature (default) is
//! enabled and falls back to a sequential loop otherwise.

pub mod backend;
pub mod error;
pub mod grounding;
pub mod index;
pub mod kernel;
pub mod mask;
pub mod metrics;
pub mod mock;
pub mod model;
pub mod pipeline;
pub mod rerank;
pub mod search;
pub mod synthetic;

pub use error::{Error, Result};
pub use index::{build_index, index_stats, load_index, save_index, GalleryIndex, IndexStats};
pub use mask::{bbox_from_mask, bbox_iou, mask_iou, rle_decode, rle_encode};
pub use model::{BoundingBox, ImageEntry, MaskGrid, RegionMask, RegionRecord};
pub use pipeline::{
    Backends, Mode, OutagePolicy, Pipeline, PipelineConfig, SearchHit, SearchResponse,
};
pub use search::{
    ensemble_query, score_image, search, stage1_ground, QueryEmbedding, RankedResult, SearchParams,
};
