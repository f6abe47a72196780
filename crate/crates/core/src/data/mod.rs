//! Motion state layouts, trajectory datasets and the synthetic periodic corpus.

mod dataset;
mod layout;
mod synthetic;

pub use dataset::{
    load_dataset, read_trajectory, slice_segments, window_refs, write_dataset, write_trajectory, Manifest, Motion,
    MotionDataset, Normalization, Trajectory, TrajectorySegment, WindowRef, DEFAULT_DT, MANIFEST_FILE,
};
pub use layout::{LayoutSlice, MotionState, StateLayout};
pub use synthetic::{
    default_corpus, generate_synthetic_dataset, JointSignal, SinusoidTerm, SyntheticMotionSpec, DEFAULT_INFEASIBLE,
};
