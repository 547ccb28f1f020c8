//! Barnes-Hut octree: adaptive spatial subdivision of point masses down to
//! one particle per cube, mass/center-of-mass moments, the multipole
//! acceptance criterion, per-particle interaction lists, and the softened
//! gravitational kernel.
//!
//! Determinism notes:
//! - Nodes live in an arena in depth-first preorder; a node's id is its arena
//!   index, so ids and traversal order are reproducible for a given input.
//! - Interaction lists are returned in a canonical order: particle sources by
//!   ascending particle index, then accepted internal nodes by ascending node
//!   id. With an opening angle of zero the list is exactly "every other
//!   particle, ascending", so accumulating it with [`accel_from_sources`]
//!   reproduces [`accel_direct`] bit for bit.
//! - All accumulation loops run in a fixed order through one kernel
//!   ([`accumulate`]), so any two code paths fed the same source sequence
//!   produce bitwise-identical accelerations.

use crate::math::Vec3;
use thiserror::Error;

/// Maximum subdivision depth. Two particles closer than one part in 2^60 of
/// the root cube cannot be separated and are reported as duplicates instead.
pub const MAX_DEPTH: usize = 64;

/// A point mass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Particle {
    pub mass: f64,
    pub position: Vec3,
    pub velocity: Vec3,
}

impl Particle {
    pub fn new(mass: f64, position: Vec3, velocity: Vec3) -> Self {
        Particle { mass, position, velocity }
    }

    /// A motionless particle, convenient in tests.
    pub fn at_rest(mass: f64, position: Vec3) -> Self {
        Particle::new(mass, position, Vec3::zero())
    }
}

/// An axis-aligned cube given by its center and half-width.
///
/// Membership is half-open per axis: `center - hw <= x < center + hw`, so a
/// point on a shared face belongs to exactly one octant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cube {
    pub center: Vec3,
    pub half_width: f64,
}

impl Cube {
    pub fn new(center: Vec3, half_width: f64) -> Self {
        Cube { center, half_width }
    }

    /// Side length of the cube.
    pub fn side(&self) -> f64 {
        2.0 * self.half_width
    }

    pub fn contains(&self, p: Vec3) -> bool {
        let lo_ok = |c: f64, x: f64| c - self.half_width <= x;
        let hi_ok = |c: f64, x: f64| x < c + self.half_width;
        lo_ok(self.center.x, p.x)
            && lo_ok(self.center.y, p.y)
            && lo_ok(self.center.z, p.z)
            && hi_ok(self.center.x, p.x)
            && hi_ok(self.center.y, p.y)
            && hi_ok(self.center.z, p.z)
    }

    /// Octant index of a contained point: bit 0 = x, bit 1 = y, bit 2 = z,
    /// set when the coordinate is at or above the center (lower-inclusive
    /// halves, so assignment is unique).
    pub fn octant_of(&self, p: Vec3) -> usize {
        ((p.x >= self.center.x) as usize)
            | (((p.y >= self.center.y) as usize) << 1)
            | (((p.z >= self.center.z) as usize) << 2)
    }

    /// The sub-cube occupying the given octant.
    pub fn octant_cube(&self, octant: usize) -> Cube {
        debug_assert!(octant < 8);
        let h = 0.5 * self.half_width;
        let sign = |bit: bool| if bit { h } else { -h };
        Cube {
            center: Vec3::new(
                self.center.x + sign(octant & 1 != 0),
                self.center.y + sign(octant & 2 != 0),
                self.center.z + sign(octant & 4 != 0),
            ),
            half_width: h,
        }
    }
}

/// Opening angle for the multipole acceptance criterion. Zero means "never
/// approximate" (exact pairwise summation through the tree).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Theta(f64);

impl Theta {
    /// The exact regime: no node is ever accepted as an aggregate.
    pub const ZERO: Theta = Theta(0.0);

    pub fn new(value: f64) -> Result<Self, OctreeError> {
        if value.is_finite() && value >= 0.0 {
            Ok(Theta(value))
        } else {
            Err(OctreeError::InvalidTheta { value })
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Gravitational constant and Plummer softening length for the force kernel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForceParams {
    pub g_const: f64,
    pub softening: f64,
}

impl Default for ForceParams {
    fn default() -> Self {
        ForceParams { g_const: 1.0, softening: 1e-2 }
    }
}

impl ForceParams {
    pub fn validate(&self) -> Result<(), OctreeError> {
        if !(self.g_const.is_finite() && self.g_const > 0.0) {
            return Err(OctreeError::InvalidParams {
                name: "g_const",
                value: self.g_const,
            });
        }
        if !(self.softening.is_finite() && self.softening >= 0.0) {
            return Err(OctreeError::InvalidParams {
                name: "softening",
                value: self.softening,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum OctreeError {
    #[error("cannot bound an empty particle set")]
    EmptyParticles,
    #[error("particle {index} lies outside the root cube")]
    OutsideRoot { index: usize },
    #[error("particles {indices:?} are coincident (exceeded max tree depth {MAX_DEPTH})")]
    DuplicatePositions { indices: Vec<usize> },
    #[error("zero separation with zero softening makes the force singular")]
    SingularForce,
    #[error("opening angle must be finite and >= 0, got {value}")]
    InvalidTheta { value: f64 },
    #[error("force parameter {name} out of range: {value}")]
    InvalidParams { name: &'static str, value: f64 },
}

/// Smallest cube (with slack) containing every particle: centered on the
/// midpoint of the axis-aligned bounding box, half-width 1.001x half the
/// largest extent, floored at 1e-9 so a degenerate cloud still has volume.
pub fn bounds(particles: &[Particle]) -> Result<Cube, OctreeError> {
    let first = particles.first().ok_or(OctreeError::EmptyParticles)?;
    let mut lo = first.position;
    let mut hi = first.position;
    for p in &particles[1..] {
        lo = lo.min(p.position);
        hi = hi.max(p.position);
    }
    let extent = hi - lo;
    let max_extent = extent.x.max(extent.y).max(extent.z);
    let half_width = (0.5 * max_extent * 1.001).max(1e-9);
    Ok(Cube::new((lo + hi) * 0.5, half_width))
}

/// Tree node kind. Octants containing no particles have no node at all.
#[derive(Clone, Debug, PartialEq)]
pub enum NodeKind {
    /// Exactly one particle, identified by its index in the particle slice.
    Leaf { particle: usize },
    /// An occupied cube that was subdivided; children indexed by octant.
    Internal { children: [Option<usize>; 8] },
}

/// One octree node. `mass` and `com` are zero until [`compute_moments`] runs.
#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub cube: Cube,
    pub kind: NodeKind,
    pub mass: f64,
    pub com: Vec3,
}

impl Node {
    pub fn is_leaf(&self) -> bool {
        matches!(self.kind, NodeKind::Leaf { .. })
    }
}

/// Octree over a particle set. Node 0 is the root; nodes are stored in
/// depth-first preorder (children in octant order), so every child id is
/// greater than its parent's.
#[derive(Clone, Debug)]
pub struct Octree {
    nodes: Vec<Node>,
}

impl Octree {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> &Node {
        &self.nodes[id]
    }

    pub fn root(&self) -> &Node {
        &self.nodes[0]
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }
}

/// Builds the tree structure by recursive subdivision until each occupied
/// cube holds one particle. Moments are not computed here.
pub fn build_tree(particles: &[Particle], root: Cube) -> Result<Octree, OctreeError> {
    if particles.is_empty() {
        return Err(OctreeError::EmptyParticles);
    }
    for (index, p) in particles.iter().enumerate() {
        if !root.contains(p.position) {
            return Err(OctreeError::OutsideRoot { index });
        }
    }
    let mut nodes = Vec::with_capacity(2 * particles.len());
    let indices: Vec<usize> = (0..particles.len()).collect();
    build_rec(&mut nodes, particles, indices, root, 0)?;
    Ok(Octree { nodes })
}

fn build_rec(
    nodes: &mut Vec<Node>,
    particles: &[Particle],
    indices: Vec<usize>,
    cube: Cube,
    depth: usize,
) -> Result<usize, OctreeError> {
    debug_assert!(!indices.is_empty());
    if indices.len() == 1 {
        let id = nodes.len();
        nodes.push(Node {
            cube,
            kind: NodeKind::Leaf { particle: indices[0] },
            mass: 0.0,
            com: Vec3::zero(),
        });
        return Ok(id);
    }
    if depth >= MAX_DEPTH {
        let mut dup = indices;
        dup.sort_unstable();
        return Err(OctreeError::DuplicatePositions { indices: dup });
    }
    let mut buckets: [Vec<usize>; 8] = Default::default();
    for i in indices {
        buckets[cube.octant_of(particles[i].position)].push(i);
    }
    let id = nodes.len();
    nodes.push(Node {
        cube,
        kind: NodeKind::Internal { children: [None; 8] },
        mass: 0.0,
        com: Vec3::zero(),
    });
    for (octant, bucket) in buckets.into_iter().enumerate() {
        if bucket.is_empty() {
            continue;
        }
        let child = build_rec(nodes, particles, bucket, cube.octant_cube(octant), depth + 1)?;
        match &mut nodes[id].kind {
            NodeKind::Internal { children } => children[octant] = Some(child),
            NodeKind::Leaf { .. } => unreachable!("parent node is internal"),
        }
    }
    Ok(id)
}

/// Fills in total mass and center of mass for every node, children before
/// parents. Internal nodes sum their children in octant order; a leaf takes
/// its particle's mass and position exactly.
pub fn compute_moments(tree: &mut Octree, particles: &[Particle]) {
    // Preorder guarantees children have larger ids, so a reverse scan
    // finalizes children first.
    for id in (0..tree.nodes.len()).rev() {
        let (mass, com) = match tree.nodes[id].kind {
            NodeKind::Leaf { particle } => {
                (particles[particle].mass, particles[particle].position)
            }
            NodeKind::Internal { children } => {
                let mut mass = 0.0;
                let mut weighted = Vec3::zero();
                for child in children.into_iter().flatten() {
                    let c = &tree.nodes[child];
                    mass += c.mass;
                    weighted += c.com * c.mass;
                }
                (mass, weighted * (1.0 / mass))
            }
        };
        tree.nodes[id].mass = mass;
        tree.nodes[id].com = com;
    }
}

/// Multipole acceptance criterion: treat `node` as a single body iff
/// `s < theta * d`, where `s` is the node's cube side and `d` the distance
/// from the target position to the node's center of mass. Zero theta never
/// accepts; zero distance never accepts.
pub fn mac_accept(node: &Node, target: Vec3, theta: Theta) -> bool {
    let s = node.cube.side();
    let d = (node.com - target).norm();
    theta.0 > 0.0 && s < theta.0 * d
}

/// One entry of an interaction list: an aggregated mass seen by the target.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Source {
    pub mass: f64,
    pub com: Vec3,
    pub node_id: usize,
}

/// Collects the sources acting on particle `target`: a depth-first walk that
/// keeps whole nodes where the acceptance criterion holds and descends
/// otherwise, skipping the target's own leaf. The result is in canonical
/// order (see the module docs), so repeated calls are reproducible and the
/// exact regime matches direct summation bitwise.
pub fn interaction_list(
    tree: &Octree,
    particles: &[Particle],
    target: usize,
    theta: Theta,
) -> Vec<Source> {
    let target_pos = particles[target].position;
    let mut out = Vec::new();
    walk(tree, 0, target, target_pos, theta, &mut out);
    // Canonical order: particle sources ascending by particle index, then
    // internal sources ascending by node id (the walk already emits internal
    // nodes in ascending preorder).
    out.sort_unstable_by_key(|s| match tree.nodes[s.node_id].kind {
        NodeKind::Leaf { particle } => particle as u64,
        NodeKind::Internal { .. } => (1u64 << 63) | s.node_id as u64,
    });
    out
}

fn walk(
    tree: &Octree,
    id: usize,
    target: usize,
    target_pos: Vec3,
    theta: Theta,
    out: &mut Vec<Source>,
) {
    let node = &tree.nodes[id];
    match node.kind {
        NodeKind::Leaf { particle } => {
            if particle != target {
                out.push(Source { mass: node.mass, com: node.com, node_id: id });
            }
        }
        NodeKind::Internal { children } => {
            if mac_accept(node, target_pos, theta) {
                out.push(Source { mass: node.mass, com: node.com, node_id: id });
            } else {
                for child in children.into_iter().flatten() {
                    walk(tree, child, target, target_pos, theta, out);
                }
            }
        }
    }
}

/// Softened gravitational kernel, shared by every backend: accumulates
/// `G * m * (x_src - x_tgt) / (|x_src - x_tgt|^2 + eps^2)^(3/2)` over the
/// sources in iteration order. The operation sequence is fixed, so equal
/// source sequences give bitwise-equal results.
pub(crate) fn accumulate(
    target: Vec3,
    sources: impl Iterator<Item = (f64, Vec3)>,
    params: &ForceParams,
) -> Result<Vec3, OctreeError> {
    let eps2 = params.softening * params.softening;
    let mut acc = Vec3::zero();
    for (mass, com) in sources {
        let d = com - target;
        let denom = d.norm_sq() + eps2;
        if denom == 0.0 {
            return Err(OctreeError::SingularForce);
        }
        let w = params.g_const * mass / (denom * denom.sqrt());
        acc += d * w;
    }
    Ok(acc)
}

/// Acceleration of a target position due to a source list, accumulated in
/// list order.
pub fn accel_from_sources(
    target: Vec3,
    sources: &[Source],
    params: &ForceParams,
) -> Result<Vec3, OctreeError> {
    accumulate(target, sources.iter().map(|s| (s.mass, s.com)), params)
}

/// O(N) reference acceleration for particle `index`: the softened pairwise
/// sum over every other particle in ascending index order.
pub fn accel_direct(
    particles: &[Particle],
    index: usize,
    params: &ForceParams,
) -> Result<Vec3, OctreeError> {
    let target = particles[index].position;
    accumulate(
        target,
        particles
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != index)
            .map(|(_, p)| (p.mass, p.position)),
        params,
    )
}

/// Convenience: bounds, structure, and moments in one call.
pub fn build_with_moments(particles: &[Particle]) -> Result<Octree, OctreeError> {
    let cube = bounds(particles)?;
    let mut tree = build_tree(particles, cube)?;
    compute_moments(&mut tree, particles);
    Ok(tree)
}
