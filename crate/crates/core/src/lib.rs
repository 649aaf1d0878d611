//! Counting fruit from UAV image sequences by associating per-frame
//! detections across views with epipolar constraints, triangulating each
//! association robustly and grouping the resulting 3-D points into rows.

pub mod association;
pub mod clustering;
pub mod geometry;
pub mod io;
pub mod synth;
pub mod triangulation;

pub use association::{
    associate_graph, build_graph, fruit_association, AssociationGraph, AssociationParams,
    FruitEstimate, NodeId,
};
pub use clustering::{kmeans_rows, pearson_correlation, row_counts, RowClustering};
pub use geometry::{CameraFrame, CameraSet, HomogeneousPoint2, HomogeneousPoint3};
pub use triangulation::{triangulation_ransac, Observation, RansacParams, TriangulationResult};
