//! Feature archives, protocol stage views, batching and synthetic data.

pub mod archive;
pub mod batch;
pub mod stage;
pub mod synth;

pub use archive::{
    load_archive, load_archive_with, write_archive, ArchiveBlobs, ClassEntry, ClassRole,
    FeatureArchive, LoadOptions, Manifest, Split,
};
pub use batch::{batches, epoch_rng, MIN_BATCH};
pub use stage::{stage_view, Stage, StageView};
pub use synth::{synth_generate, SynthSpec};
