//! Scene container, normalization, patch extraction and train/test splits.

mod normalize;
mod patch;
mod scene;
mod split;

pub use normalize::NormStats;
pub use patch::{extract_patch, patch_indices, reflect_index, Patch, PatchConfig};
pub use scene::{
    quantize, read_meta, read_scene, write_file, write_scene, HsiCube, LabelMap, LidarMap, Scene,
    SceneMeta, HSI_FILE, LABELS_FILE, LIDAR_FILE, META_FILE,
};
pub use split::{make_split, SplitSpec};
