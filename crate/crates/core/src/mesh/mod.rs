//! Base meshes of the domain, graded partitions of the extended direction and
//! their tensor product.

mod base;
mod bisect;
mod cylinder;
mod partition;

pub use base::{BaseMesh, Domain};
pub use cylinder::{AspectStats, CylinderMesh, MeshConditionReport, Star};
pub use partition::YPartition;
