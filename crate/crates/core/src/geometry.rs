//! Combining-tree geometry: how many tree nodes exist at each level, how the
//! breadth-first node array is laid out, and which leaf covers which CPU.
//!
//! The tree is stored as a flat array in breadth-first order, so walking all
//! nodes is a linear scan and `level_start` gives the offset of the left-most
//! node of each level.

use serde::Serialize;
use thiserror::Error;

/// Maximum tree depth. Four levels of 64-way fan-out cover 16,777,216 CPUs.
pub const MAX_LEVELS: usize = 4;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GeometryError {
    #[error("cpu count must be at least 1")]
    NoCpus,
    #[error("fanout {0} out of range (2..=64)")]
    BadFanout(usize),
    #[error("{cpus} CPUs exceed the {max} supported by a {levels}-level tree")]
    TooManyCpus { cpus: usize, max: usize, levels: usize },
    #[error("node index {0} out of range ({1} nodes)")]
    NodeOutOfRange(usize, usize),
}

/// Shape of the combining tree for a given CPU count and fan-outs.
///
/// `levels[0]` is always 1 (the root); `levels[last]` holds the leaf nodes.
/// CPUs attach below the leaves, `leaf_fanout` per leaf, densely left-packed.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct TreeGeometry {
    pub cpus: usize,
    pub leaf_fanout: usize,
    pub interior_fanout: usize,
    /// Node count per level, root first.
    pub levels: Vec<usize>,
    /// Array offset of the left-most node of each level (prefix sum of `levels`).
    pub level_start: Vec<usize>,
    /// Leaf node index for each CPU.
    pub cpu_to_leaf: Vec<usize>,
    pub total_nodes: usize,
}

/// Computes the minimal-depth tree covering `cpus` CPUs with the given fan-outs.
pub fn compute_geometry(
    cpus: usize,
    leaf_fanout: usize,
    interior_fanout: usize,
) -> Result<TreeGeometry, GeometryError> {
    if cpus == 0 {
        return Err(GeometryError::NoCpus);
    }
    for f in [leaf_fanout, interior_fanout] {
        if !(2..=64).contains(&f) {
            return Err(GeometryError::BadFanout(f));
        }
    }
    let max = interior_fanout.pow((MAX_LEVELS - 1) as u32) * leaf_fanout;
    if cpus > max {
        return Err(GeometryError::TooManyCpus { cpus, max, levels: MAX_LEVELS });
    }

    // Build bottom-up: leaves sized by leaf_fanout, every level above by
    // interior_fanout, until a single root remains.
    let mut rev = vec![cpus.div_ceil(leaf_fanout)];
    while *rev.last().unwrap() > 1 {
        let below = *rev.last().unwrap();
        rev.push(below.div_ceil(interior_fanout));
    }
    rev.reverse();
    let levels = rev;
    debug_assert!(levels.len() <= MAX_LEVELS);

    let mut level_start = Vec::with_capacity(levels.len());
    let mut acc = 0;
    for n in &levels {
        level_start.push(acc);
        acc += n;
    }
    let total_nodes = acc;

    let leaf_base = *level_start.last().unwrap();
    let cpu_to_leaf = (0..cpus).map(|c| leaf_base + c / leaf_fanout).collect();

    Ok(TreeGeometry {
        cpus,
        leaf_fanout,
        interior_fanout,
        levels,
        level_start,
        cpu_to_leaf,
        total_nodes,
    })
}

impl TreeGeometry {
    /// Level (0 = root) of a node index.
    pub fn level_of(&self, node: usize) -> Result<usize, GeometryError> {
        if node >= self.total_nodes {
            return Err(GeometryError::NodeOutOfRange(node, self.total_nodes));
        }
        Ok(self
            .level_start
            .iter()
            .rposition(|&s| s <= node)
            .expect("level_start[0] == 0"))
    }

    /// Ordinal of a node within its level.
    pub fn ordinal_of(&self, node: usize) -> Result<usize, GeometryError> {
        let lvl = self.level_of(node)?;
        Ok(node - self.level_start[lvl])
    }

    /// Index of the parent node, or `None` for the root.
    ///
    /// Children are assigned to parents left-to-right, densely; the position of
    /// a child in its parent's mask is `grpmask_bit_of`.
    pub fn parent_of(&self, node: usize) -> Result<Option<usize>, GeometryError> {
        let lvl = self.level_of(node)?;
        if lvl == 0 {
            return Ok(None);
        }
        let ord = node - self.level_start[lvl];
        Ok(Some(self.level_start[lvl - 1] + ord / self.interior_fanout))
    }

    /// Bit position of this node in its parent's quiescent-state mask.
    pub fn grpmask_bit_of(&self, node: usize) -> Result<usize, GeometryError> {
        let lvl = self.level_of(node)?;
        if lvl == 0 {
            return Ok(0);
        }
        Ok((node - self.level_start[lvl]) % self.interior_fanout)
    }

    /// Child node indices of an interior node (empty for leaves).
    pub fn children_of(&self, node: usize) -> Result<Vec<usize>, GeometryError> {
        let lvl = self.level_of(node)?;
        if lvl + 1 >= self.levels.len() {
            return Ok(Vec::new());
        }
        let ord = node - self.level_start[lvl];
        let child_level = lvl + 1;
        let first = ord * self.interior_fanout;
        let last = ((ord + 1) * self.interior_fanout).min(self.levels[child_level]);
        Ok((first..last).map(|o| self.level_start[child_level] + o).collect())
    }

    pub fn is_leaf(&self, node: usize) -> bool {
        node >= self.level_start[self.levels.len() - 1]
    }

    /// Lowest and highest CPU number covered by the subtree rooted at `node`.
    pub fn cpu_span_of(&self, node: usize) -> Result<(usize, usize), GeometryError> {
        let lvl = self.level_of(node)?;
        let ord = node - self.level_start[lvl];
        // Width of a full subtree at this level, in CPUs.
        let mut width = self.leaf_fanout;
        for _ in (lvl + 1)..self.levels.len() {
            width *= self.interior_fanout;
        }
        let lo = ord * width;
        let hi = ((ord + 1) * width).min(self.cpus) - 1;
        Ok((lo, hi))
    }

    /// CPUs directly attached to a leaf node.
    pub fn cpus_of_leaf(&self, leaf: usize) -> Result<Vec<usize>, GeometryError> {
        let (lo, hi) = self.cpu_span_of(leaf)?;
        Ok((lo..=hi).collect())
    }

    pub fn root(&self) -> usize {
        0
    }

    pub fn leaf_of_cpu(&self, cpu: usize) -> usize {
        self.cpu_to_leaf[cpu]
    }

    /// Bit position of a CPU in its leaf's quiescent-state mask.
    pub fn cpu_grpmask_bit(&self, cpu: usize) -> usize {
        cpu % self.leaf_fanout
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_4096_cpu_tree() {
        let g = compute_geometry(4096, 16, 64).unwrap();
        assert_eq!(g.levels, vec![1, 4, 256]);
        assert_eq!(g.total_nodes, 261);
        assert_eq!(g.level_start, vec![0, 1, 5]);
    }

    #[test]
    fn two_cpu_tree_is_single_root() {
        let g = compute_geometry(2, 16, 64).unwrap();
        assert_eq!(g.levels, vec![1]);
        assert_eq!(g.total_nodes, 1);
        assert_eq!(g.cpu_to_leaf, vec![0, 0]);
    }

    #[test]
    fn degenerate_single_cpu() {
        let g = compute_geometry(1, 2, 2).unwrap();
        assert_eq!(g.levels, vec![1]);
    }

    #[test]
    fn rejects_more_than_four_levels() {
        let max = 64usize.pow(3) * 64;
        assert_eq!(max, 16_777_216);
        assert!(compute_geometry(max, 64, 64).is_ok());
        assert_eq!(
            compute_geometry(max + 1, 64, 64),
            Err(GeometryError::TooManyCpus { cpus: max + 1, max, levels: 4 })
        );
    }

    #[test]
    fn rejects_bad_inputs() {
        assert_eq!(compute_geometry(0, 16, 64), Err(GeometryError::NoCpus));
        assert_eq!(compute_geometry(4, 1, 64), Err(GeometryError::BadFanout(1)));
        assert_eq!(compute_geometry(4, 16, 65), Err(GeometryError::BadFanout(65)));
    }

    #[test]
    fn parent_of_paper_tree() {
        let g = compute_geometry(4096, 16, 64).unwrap();
        assert_eq!(g.parent_of(0).unwrap(), None);
        assert_eq!(g.parent_of(3).unwrap(), Some(0));
        // Node 5 is the first leaf, child 0 of interior node 1.
        assert_eq!(g.parent_of(5).unwrap(), Some(1));
        assert!(g.parent_of(261).is_err());
    }

    /// Oracle: build the parent table by forward child assignment (each parent
    /// takes the next `interior_fanout` nodes of the level below, left to
    /// right) and compare with the arithmetic `parent_of`.
    fn parent_table_oracle(g: &TreeGeometry) -> Vec<Option<usize>> {
        let mut table = vec![None; g.total_nodes];
        for lvl in 0..g.levels.len().saturating_sub(1) {
            let mut child = g.level_start[lvl + 1];
            let child_end = child + g.levels[lvl + 1];
            for ord in 0..g.levels[lvl] {
                let parent = g.level_start[lvl] + ord;
                for _ in 0..g.interior_fanout {
                    if child >= child_end {
                        break;
                    }
                    table[child] = Some(parent);
                    child += 1;
                }
            }
        }
        table
    }

    #[test]
    fn parent_of_matches_forward_assignment_oracle() {
        for (cpus, lf, inf) in [(4096, 16, 64), (70, 4, 3), (9, 2, 2), (100, 8, 4)] {
            let g = compute_geometry(cpus, lf, inf).unwrap();
            let oracle = parent_table_oracle(&g);
            for n in 0..g.total_nodes {
                assert_eq!(g.parent_of(n).unwrap(), oracle[n], "node {n} of {cpus}/{lf}/{inf}");
            }
        }
    }

    #[test]
    fn child_round_trip() {
        let g = compute_geometry(300, 8, 4).unwrap();
        for n in 1..g.total_nodes {
            let p = g.parent_of(n).unwrap().unwrap();
            assert!(g.children_of(p).unwrap().contains(&n));
        }
    }

    #[test]
    fn leaf_spans_are_disjoint_and_contiguous() {
        let g = compute_geometry(75, 8, 4).unwrap();
        let leaf_base = *g.level_start.last().unwrap();
        let mut next = 0usize;
        for leaf in leaf_base..g.total_nodes {
            let (lo, hi) = g.cpu_span_of(leaf).unwrap();
            assert_eq!(lo, next);
            assert!(hi - lo + 1 <= g.leaf_fanout);
            next = hi + 1;
        }
        assert_eq!(next, 75);
        for cpu in 0..75 {
            let leaf = g.leaf_of_cpu(cpu);
            let (lo, hi) = g.cpu_span_of(leaf).unwrap();
            assert!(lo <= cpu && cpu <= hi);
        }
    }

    #[test]
    fn deterministic() {
        let a = compute_geometry(1234, 16, 64).unwrap();
        let b = compute_geometry(1234, 16, 64).unwrap();
        assert_eq!(a, b);
    }
}
