//! Applications of the learned joint attention: summarization, gaze,
//! co-segmentation and heatmap overlays.

mod coseg;
mod gaze;
mod render;
mod segment;
mod summary;

pub use coseg::{
    chi_square, cosegment, cosegment_at, pair_costs, segment_features, CosegConfig, CosegResult, CosegScores,
    SegmentFeature, HIST_BINS,
};
pub use gaze::{gaze_from_heatmap, predict_gaze, top_mass_centroid, GazeResult, TOP_MASS};
pub use render::{colormap, overlay, render_heatmap, write_mask, OVERLAY_ALPHA};
pub use segment::{enforce_connectivity, rgb_to_lab, Segmentation, Segmenter, Slico};
pub use summary::{
    annotated_seconds, cosine, percentile, random_selection, resolve_threshold, select, set_metrics, summarize,
    summarize_attention, summary_metrics, Summary, SummaryMetrics, ThresholdPolicy,
};
