//! Feature packs, dataset manifests, checkpoints, and the synthetic-event
//! benchmark generator.

mod manifest;
mod pack;
mod synthetic;

pub use manifest::{
    load_dataset, load_manifest_file, save_manifest_file, DatasetPair, Manifest, ManifestPair,
    RetrievalDataset, Split,
};
pub use pack::{
    load_checkpoint, read_pack, read_pack_file, save_checkpoint, write_pack, write_pack_file,
    FeaturePack, CHECKPOINT_MAGIC, PACK_MAGIC, PACK_VERSION,
};
pub use synthetic::{
    draw_event_vectors, generate_synthetic, render_item, EventAssignment, HardNegativeInfo,
    SyntheticConfig,
};
