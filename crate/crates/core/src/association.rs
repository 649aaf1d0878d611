//! Epipolar association graph and greedy fruit selection.
//!
//! Every detection becomes a node. An edge `u -> v` links a detection to a
//! detection in one of the next `k` frames whenever `v` lies within
//! `tau_epipolar` pixels of the epipolar line of `u`. Each maximal path is a
//! hypothesis that the detections along it are the same fruit; hypotheses are
//! scored by the inlier ratio of a robust triangulation and consumed greedily.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap, HashSet};

use log::{debug, warn};
use nalgebra::Point3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    epipolar_line, fundamental_from_projections, point_line_distance, CameraSet, GeometryError,
    HomogeneousPoint2, HomogeneousPoint3,
};
use crate::io::FrameDetections;
use crate::triangulation::{
    geometric_error, refine_consensus, triangulation_ransac, Observation, RansacParams, TriangulationError,
    MINIMAL_SAMPLE,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AssociationError {
    #[error("invalid association parameters: {0}")]
    InvalidParams(String),
    #[error("unknown node {0:?}")]
    UnknownNode(NodeId),
    #[error("invalid edge {from:?} -> {to:?}: {reason}")]
    InvalidEdge {
        from: NodeId,
        to: NodeId,
        reason: &'static str,
    },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Triangulation(#[from] TriangulationError),
}

/// Detection `detection_index` of frame `frame_id`. Ordered by frame, then index.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct NodeId {
    pub frame_id: u32,
    pub detection_index: u32,
}

impl NodeId {
    pub fn new(frame_id: u32, detection_index: u32) -> Self {
        Self {
            frame_id,
            detection_index,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssociationParams {
    /// Number of following frames searched for correspondences.
    pub k: usize,
    pub tau_epipolar: f64,
    pub tau_geom: f64,
    pub ransac_iterations: usize,
    pub min_track_length: usize,
    pub max_paths_per_node: usize,
    /// Estimates with a lower inlier ratio are discarded. 0 disables the filter.
    pub min_inlier_ratio: f64,
    pub rng_seed: u64,
}

impl Default for AssociationParams {
    fn default() -> Self {
        Self {
            k: 3,
            tau_epipolar: 8.0,
            tau_geom: 3.0,
            ransac_iterations: 50,
            min_track_length: MINIMAL_SAMPLE,
            max_paths_per_node: 256,
            min_inlier_ratio: 0.0,
            rng_seed: 42,
        }
    }
}

impl AssociationParams {
    pub fn validate(&self) -> Result<(), AssociationError> {
        let fail = |msg: &str| Err(AssociationError::InvalidParams(msg.to_owned()));
        if self.k < 1 {
            return fail("k must be at least 1");
        }
        if !(self.tau_epipolar.is_finite() && self.tau_epipolar >= 0.0) {
            return fail("tau_epipolar must be finite and non-negative");
        }
        if !(self.tau_geom.is_finite() && self.tau_geom > 0.0) {
            return fail("tau_geom must be finite and positive");
        }
        if self.ransac_iterations < 1 {
            return fail("ransac_iterations must be at least 1");
        }
        if self.min_track_length < MINIMAL_SAMPLE {
            return fail("min_track_length must be at least 3");
        }
        if self.max_paths_per_node < 1 {
            return fail("max_paths_per_node must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.min_inlier_ratio) {
            return fail("min_inlier_ratio must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn ransac(&self) -> RansacParams {
        RansacParams {
            iterations: self.ransac_iterations,
            tau_geom: self.tau_geom,
            min_inliers: MINIMAL_SAMPLE,
        }
    }
}

/// Directed association graph over detections. Nodes are stored in
/// [`NodeId`] order, so every edge points from a lower to a higher index.
#[derive(Debug, Clone, PartialEq)]
pub struct AssociationGraph {
    nodes: Vec<NodeId>,
    centroids: Vec<HomogeneousPoint2>,
    index: HashMap<NodeId, usize>,
    out: Vec<BTreeMap<usize, f64>>,
    frame_count: usize,
}

impl AssociationGraph {
    /// Graph with the given nodes and no edges.
    pub fn new<I>(nodes: I, frame_count: usize) -> Self
    where
        I: IntoIterator<Item = (NodeId, HomogeneousPoint2)>,
    {
        let mut pairs: Vec<_> = nodes.into_iter().collect();
        pairs.sort_by_key(|(id, _)| *id);
        pairs.dedup_by_key(|(id, _)| *id);
        let index = pairs.iter().enumerate().map(|(i, (id, _))| (*id, i)).collect();
        Self {
            out: vec![BTreeMap::new(); pairs.len()],
            centroids: pairs.iter().map(|(_, c)| *c).collect(),
            nodes: pairs.into_iter().map(|(id, _)| id).collect(),
            index,
            frame_count,
        }
    }

    pub fn add_edge(&mut self, from: NodeId, to: NodeId, distance: f64) -> Result<(), AssociationError> {
        let a = self.index_of(from)?;
        let b = self.index_of(to)?;
        if to.frame_id <= from.frame_id {
            return Err(AssociationError::InvalidEdge {
                from,
                to,
                reason: "edges must point forward in time",
            });
        }
        if self.out[a].insert(b, distance).is_some() {
            return Err(AssociationError::InvalidEdge {
                from,
                to,
                reason: "duplicate edge",
            });
        }
        Ok(())
    }

    fn index_of(&self, id: NodeId) -> Result<usize, AssociationError> {
        self.index.get(&id).copied().ok_or(AssociationError::UnknownNode(id))
    }

    pub fn frame_count(&self) -> usize {
        self.frame_count
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.out.iter().map(BTreeMap::len).sum()
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.index.contains_key(&id)
    }

    pub fn centroid(&self, id: NodeId) -> Option<&HomogeneousPoint2> {
        self.index.get(&id).map(|&i| &self.centroids[i])
    }

    /// Epipolar distance annotated on `from -> to`, if the edge exists.
    pub fn edge(&self, from: NodeId, to: NodeId) -> Option<f64> {
        let a = *self.index.get(&from)?;
        let b = *self.index.get(&to)?;
        self.out[a].get(&b).copied()
    }

    pub fn successors(&self, id: NodeId) -> Vec<NodeId> {
        self.index
            .get(&id)
            .map(|&i| self.out[i].keys().map(|&j| self.nodes[j]).collect())
            .unwrap_or_default()
    }

    /// All edges as `(from, to, distance)` in node order.
    pub fn edges(&self) -> impl Iterator<Item = (NodeId, NodeId, f64)> + '_ {
        self.out.iter().enumerate().flat_map(move |(a, targets)| {
            targets.iter().map(move |(&b, &d)| (self.nodes[a], self.nodes[b], d))
        })
    }

    /// Removes every edge whose endpoints both belong to `set`.
    pub fn remove_edges_within(&mut self, set: &[NodeId]) -> usize {
        let members: Vec<usize> = set.iter().filter_map(|id| self.index.get(id).copied()).collect();
        let mut removed = 0;
        for &a in &members {
            for &b in &members {
                if self.out[a].remove(&b).is_some() {
                    removed += 1;
                }
            }
        }
        removed
    }
}

/// An ordered chain of detections, strictly increasing in frame.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackPath {
    pub nodes: Vec<NodeId>,
}

impl TrackPath {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn observations(&self, graph: &AssociationGraph) -> Vec<Observation> {
        self.nodes
            .iter()
            .map(|id| Observation {
                frame_id: id.frame_id,
                centroid: *graph.centroid(*id).expect("path node in graph"),
            })
            .collect()
    }
}

/// A fruit hypothesis: 3-D position, supporting detections, and the share of
/// the chosen path they cover.
#[derive(Debug, Clone, PartialEq)]
pub struct FruitEstimate {
    pub position: HomogeneousPoint3,
    pub inlier_nodes: Vec<NodeId>,
    pub inlier_ratio: f64,
    pub track: TrackPath,
}

impl FruitEstimate {
    pub fn point(&self) -> Point3<f64> {
        self.position
            .to_euclidean()
            .expect("estimates are finite points")
    }
}

/// Builds the association graph over every detection.
pub fn build_graph(
    detections: &FrameDetections,
    cameras: &CameraSet,
    params: &AssociationParams,
) -> Result<AssociationGraph, AssociationError> {
    params.validate()?;

    let mut nodes = Vec::new();
    for (&frame_id, frame) in detections {
        cameras.get(frame_id)?;
        for det in frame {
            let c = HomogeneousPoint2::from_pixel(det.centroid.x, det.centroid.y);
            nodes.push((NodeId::new(frame_id, det.detection_index), c));
        }
    }

    let sequence: Vec<u32> = cameras.frame_ids().collect();
    let mut graph = AssociationGraph::new(nodes, sequence.len());

    let mut pairs = Vec::new();
    for (pos, &i) in sequence.iter().enumerate() {
        if !detections.get(&i).is_some_and(|d| !d.is_empty()) {
            continue;
        }
        for &j in sequence.iter().skip(pos + 1).take(params.k) {
            if detections.get(&j).is_some_and(|d| !d.is_empty()) {
                pairs.push((i, j));
            }
        }
    }

    let edge_lists: Vec<Vec<(NodeId, NodeId, f64)>> = pairs
        .par_iter()
        .map(|&(i, j)| frame_pair_edges(detections, cameras, i, j, params.tau_epipolar))
        .collect::<Result<_, _>>()?;

    for (from, to, d) in edge_lists.into_iter().flatten() {
        graph.add_edge(from, to, d)?;
    }
    debug!(
        "association graph: {} nodes, {} edges over {} frame pairs",
        graph.node_count(),
        graph.edge_count(),
        pairs.len()
    );
    Ok(graph)
}

fn frame_pair_edges(
    detections: &FrameDetections,
    cameras: &CameraSet,
    i: u32,
    j: u32,
    tau: f64,
) -> Result<Vec<(NodeId, NodeId, f64)>, AssociationError> {
    let f = match fundamental_from_projections(cameras.get(i)?, cameras.get(j)?) {
        Ok(f) => f,
        Err(e @ GeometryError::CoincidentCenters { .. }) => {
            warn!("skipping frame pair ({i}, {j}): {e}");
            return Ok(Vec::new());
        }
        Err(e) => return Err(e.into()),
    };

    let mut edges = Vec::new();
    for a in &detections[&i] {
        let xa = HomogeneousPoint2::from_pixel(a.centroid.x, a.centroid.y);
        let line = match epipolar_line(&f, &xa) {
            Ok(l) => l,
            Err(GeometryError::DegenerateLine) => continue,
            Err(e) => return Err(e.into()),
        };
        for b in &detections[&j] {
            let xb = HomogeneousPoint2::from_pixel(b.centroid.x, b.centroid.y);
            let d = point_line_distance(&xb, &line)?;
            if d <= tau {
                edges.push((
                    NodeId::new(i, a.detection_index),
                    NodeId::new(j, b.detection_index),
                    d,
                ));
            }
        }
    }
    Ok(edges)
}

/// Search state for longest-first path enumeration.
struct Partial {
    /// Length of the longest maximal path extending this prefix.
    bound: usize,
    /// Summed epipolar distance along the prefix.
    cost: f64,
    /// Cost of the cheapest completion to `bound` nodes.
    estimate: f64,
    path: Vec<usize>,
}

impl PartialEq for Partial {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Partial {}

impl PartialOrd for Partial {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Partial {
    // Max-heap order: longer bound, then cheaper, then lexicographically smaller.
    fn cmp(&self, other: &Self) -> Ordering {
        self.bound
            .cmp(&other.bound)
            .then_with(|| other.estimate.total_cmp(&self.estimate))
            .then_with(|| other.path.cmp(&self.path))
    }
}

const MAX_EXPANSIONS: usize = 1 << 20;

/// Maximal paths from `start`, longest first, equal lengths in lexicographic
/// node order.
///
/// At most `max_paths_per_node` paths are returned. When the cap binds, the
/// retained paths are the longest ones; among equally long paths the ones with
/// the smallest summed epipolar distance are kept.
pub fn enumerate_paths(
    graph: &AssociationGraph,
    start: NodeId,
    params: &AssociationParams,
) -> Result<Vec<TrackPath>, AssociationError> {
    let s = graph.index_of(start)?;

    // Longest path (in nodes) from each reachable node, and the cheapest way to
    // realize it. Edges increase the node index, so a reverse sweep over the
    // reachable set is topological. With this exact cost-to-go the search
    // pops complete paths by length, then cost, without widening the frontier.
    let mut reachable = vec![s];
    let mut seen = HashSet::from([s]);
    let mut cursor = 0;
    while cursor < reachable.len() {
        let u = reachable[cursor];
        cursor += 1;
        for &v in graph.out[u].keys() {
            if seen.insert(v) {
                reachable.push(v);
            }
        }
    }
    reachable.sort_unstable();
    let mut longest: HashMap<usize, (usize, f64)> = HashMap::with_capacity(reachable.len());
    for &u in reachable.iter().rev() {
        let mut best = (1, 0.0);
        for (v, &d) in &graph.out[u] {
            let (len, tail) = longest[v];
            let candidate = (len + 1, d + tail);
            if candidate.0 > best.0 || (candidate.0 == best.0 && candidate.1 < best.1) {
                best = candidate;
            }
        }
        longest.insert(u, best);
    }

    let cap = params.max_paths_per_node;
    let mut heap = BinaryHeap::from([Partial {
        bound: longest[&s].0,
        cost: 0.0,
        estimate: longest[&s].1,
        path: vec![s],
    }]);
    let mut complete = Vec::new();
    let mut expansions = 0;
    while let Some(p) = heap.pop() {
        let last = *p.path.last().expect("non-empty path");
        if graph.out[last].is_empty() {
            complete.push(p.path);
            if complete.len() == cap {
                break;
            }
            continue;
        }
        expansions += 1;
        if expansions > MAX_EXPANSIONS {
            debug!("path enumeration from {start:?} hit the expansion budget");
            break;
        }
        for (&v, &d) in &graph.out[last] {
            let mut path = Vec::with_capacity(p.path.len() + 1);
            path.extend_from_slice(&p.path);
            path.push(v);
            let (len, tail) = longest[&v];
            heap.push(Partial {
                bound: p.path.len() + len,
                cost: p.cost + d,
                estimate: p.cost + d + tail,
                path,
            });
        }
    }

    complete.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
    Ok(complete
        .into_iter()
        .map(|p| TrackPath {
            nodes: p.into_iter().map(|i| graph.nodes[i]).collect(),
        })
        .collect())
}

/// Best hypothesis for the fruit first seen at `start`.
///
/// Paths are tried longest first and a path replaces the current choice only
/// on a strictly larger inlier ratio, so among equal ratios the longest path
/// wins. The returned position is the RANSAC hypothesis, not yet refined.
pub fn fruit_estimation_3d<R: Rng + ?Sized>(
    graph: &AssociationGraph,
    start: NodeId,
    cameras: &CameraSet,
    params: &AssociationParams,
    rng: &mut R,
) -> Result<Option<FruitEstimate>, AssociationError> {
    estimate_filtered(graph, start, cameras, params, rng, |_| true)
}

/// [`fruit_estimation_3d`] restricted to hypotheses whose inlier nodes pass
/// `admissible`.
fn estimate_filtered<R, F>(
    graph: &AssociationGraph,
    start: NodeId,
    cameras: &CameraSet,
    params: &AssociationParams,
    rng: &mut R,
    admissible: F,
) -> Result<Option<FruitEstimate>, AssociationError>
where
    R: Rng + ?Sized,
    F: Fn(&[NodeId]) -> bool,
{
    let ransac = params.ransac();
    let mut best: Option<FruitEstimate> = None;
    let mut best_ratio = 0.0;
    for path in enumerate_paths(graph, start, params)? {
        if path.len() < params.min_track_length {
            continue;
        }
        let track = path.observations(graph);
        let result = triangulation_ransac(&track, cameras, &ransac, rng)?;
        let Some(point) = result.point else {
            continue;
        };
        let ratio = result.inliers.len() as f64 / path.len() as f64;
        if ratio > best_ratio {
            let inlier_nodes: Vec<NodeId> = result.inlier_indices.iter().map(|&i| path.nodes[i]).collect();
            if !admissible(&inlier_nodes) {
                continue;
            }
            best_ratio = ratio;
            best = Some(FruitEstimate {
                position: point,
                inlier_nodes,
                inlier_ratio: ratio,
                track: path,
            });
            if ratio >= 1.0 {
                // Nothing can beat a full path under the strict comparison.
                break;
            }
        }
    }
    Ok(best)
}

/// Greedy association over every detection.
pub fn fruit_association(
    detections: &FrameDetections,
    cameras: &CameraSet,
    params: &AssociationParams,
) -> Result<Vec<FruitEstimate>, AssociationError> {
    let mut graph = build_graph(detections, cameras, params)?;
    associate_graph(&mut graph, cameras, params)
}

/// Greedy selection loop over an existing graph. Edges between inliers of an
/// accepted estimate are removed; nodes are kept so that crossing tracks can
/// still pass through them.
pub fn associate_graph(
    graph: &mut AssociationGraph,
    cameras: &CameraSet,
    params: &AssociationParams,
) -> Result<Vec<FruitEstimate>, AssociationError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.rng_seed);
    let mut consumed = vec![false; graph.node_count()];
    let mut estimates = Vec::new();
    let positions: HashMap<u32, usize> = cameras.frame_ids().enumerate().map(|(i, f)| (f, i)).collect();

    for idx in 0..graph.node_count() {
        if consumed[idx] {
            continue;
        }
        let start = graph.nodes[idx];
        // Shared nodes let a crossing fruit reuse a detection, but an estimate
        // must still rest on enough detections no earlier estimate explained.
        let enough_fresh = |nodes: &[NodeId]| {
            nodes.iter().filter(|id| !consumed[graph.index[id]]).count() >= params.min_track_length
        };
        let Some(candidate) = estimate_filtered(graph, start, cameras, params, &mut rng, enough_fresh)? else {
            continue;
        };

        let track = candidate.track.observations(graph);
        let inlier_idx: Vec<usize> = candidate
            .track
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, id)| candidate.inlier_nodes.contains(id))
            .map(|(i, _)| i)
            .collect();
        let Some((position, kept)) = refine_consensus(
            &track,
            &inlier_idx,
            cameras,
            params.tau_geom,
            params.min_track_length,
        ) else {
            continue;
        };
        let inlier_nodes: Vec<NodeId> = kept.iter().map(|&i| candidate.track.nodes[i]).collect();
        let inlier_ratio = inlier_nodes.len() as f64 / candidate.track.len() as f64;
        if inlier_ratio < params.min_inlier_ratio {
            continue;
        }
        let fresh = inlier_nodes.iter().filter(|id| !consumed[graph.index[id]]).count();
        if fresh < params.min_track_length {
            continue;
        }

        graph.remove_edges_within(&inlier_nodes);
        for id in &inlier_nodes {
            consumed[graph.index[id]] = true;
        }
        if estimates
            .iter()
            .any(|e| resights(e, &inlier_nodes, graph, cameras, &positions, params))
        {
            continue;
        }
        estimates.push(FruitEstimate {
            position,
            inlier_nodes,
            inlier_ratio,
            track: candidate.track,
        });
    }
    Ok(estimates)
}

/// True if `nodes` look like a later piece of a fruit already counted as
/// `estimate`: every node is one of its inliers or, in a frame where it has
/// none, reprojects its position within `tau_geom`, and the two frame sets
/// together leave no hole wider than the lookahead. Pieces separated by a
/// longer hole stay separate estimates, as the graph could not join them.
fn resights(
    estimate: &FruitEstimate,
    nodes: &[NodeId],
    graph: &AssociationGraph,
    cameras: &CameraSet,
    positions: &HashMap<u32, usize>,
    params: &AssociationParams,
) -> bool {
    let mut frames: Vec<usize> = estimate
        .inlier_nodes
        .iter()
        .chain(nodes)
        .filter_map(|n| positions.get(&n.frame_id).copied())
        .collect();
    frames.sort_unstable();
    frames.dedup();
    if frames.windows(2).any(|w| w[1] - w[0] > params.k) {
        return false;
    }
    nodes.iter().all(|id| {
        if estimate.inlier_nodes.contains(id) {
            return true;
        }
        if estimate.inlier_nodes.iter().any(|n| n.frame_id == id.frame_id) {
            return false;
        }
        let obs = Observation {
            frame_id: id.frame_id,
            centroid: *graph.centroid(*id).expect("inlier node in graph"),
        };
        geometric_error(&estimate.position, &obs, cameras).is_ok_and(|e| e <= params.tau_geom)
    })
}
