//! Point clouds, PLY serialization and synthetic scene generation.

mod cloud;
pub mod ply;
pub mod scene;

pub use cloud::{CloudError, PointCloud, UNLABELED};
pub use ply::{read_ply, write_ply, ColorBy, PlyError, PlyFormat, LABEL_PALETTE};
pub use scene::{generate_scene, Primitive, SceneError, SceneSpec};
