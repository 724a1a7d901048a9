//! Synthetic scenes, videos, and their bit-exact on-disk formats.

pub mod dataset;
pub mod netpbm;
pub mod scene;

pub use dataset::{
    epoch_order, generate_scenes_in_memory, load_scene_dataset, load_video_dataset,
    manifest_digest, read_meta, write_scene_dataset, write_video_dataset, LoadedScene,
    LoadedVideo, Meta, MetaConfig, MetaItem,
};
pub use netpbm::{
    decode_image, decode_labelmap, encode_image, encode_labelmap, read_image, read_labelmap,
    write_image, write_labelmap,
};
pub use scene::{
    generate_scene, generate_video, render_video, Placement, Scene, SceneConfig, ShapeKind,
    VideoConfig, VideoScene,
};
