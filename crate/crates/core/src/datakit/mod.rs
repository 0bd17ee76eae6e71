//! Dataset ingestion, temporal alignment, triplet mining and synthetic data.

mod align;
mod frames;
mod manifest;
mod sampler;
pub mod synth;

pub use align::{align_timestamp, frames_at_one_fps};
pub use frames::{array_to_image, frame_path, image_to_array, preprocess, Frame, FrameRef, FrameStore};
pub use manifest::{
    filter_invalid_pairs, load_blacklist, load_manifest, ActionSegment, FilterReport, Manifest,
    StreamRef, VideoPair, View,
};
pub use sampler::{
    check_triplet, corresponding_second, sample_triplet, NegativeMix, SamplerConfig, Triplet,
    TripletRef, TripletSampler,
};
pub use synth::{generate_synthetic, BoxPx, PairTruth, SynthConfig, SynthDataset};
