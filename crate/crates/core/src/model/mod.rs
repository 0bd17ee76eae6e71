//! Shared backbone, channel attention, embeddings, region-of-attention maps
//! and checkpoint storage.

mod attention;
mod backbone;
mod checkpoint;
mod config;
mod embed;
mod heatmap;
mod params;

pub use attention::{
    apply_attention, attention_backward, attention_from_pooled, channel_attention, channel_attention_tape, pool,
    pool_backward, AttentionTape, ChannelAttentionVector, Pooled,
};
pub(crate) use attention::sigmoid;
pub use backbone::{backward_batch, extract_features, forward_batch, BackboneTape, FeatureExtractor, FeatureMap};
pub use checkpoint::{Checkpoint, CheckpointHeader, TensorEntry, FORMAT_VERSION};
pub use config::{AttentionConfig, BackboneConfig, BackboneKind, ModelConfig};
pub use embed::{embed, embed_filtered, euclidean, normalize, normalize_backward, Embedding};
pub use heatmap::{normalize_unit, roa_heatmap, upsample_bilinear, weighted_grid, RoaHeatmap};
pub use params::{ConvParams, Params};
