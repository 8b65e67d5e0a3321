//! Joint taxonomy, kinematic edges, and the row-normalized adjacency used by
//! the graph layers.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skeleton {
    joint_names: Vec<String>,
    edges: Vec<(usize, usize)>,
    root_index: usize,
}

/// On-disk form: edges and root refer to joints by name.
#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct SkeletonFile {
    joints: Vec<String>,
    edges: Vec<[String; 2]>,
    root: String,
}

const DEFAULT_JOINTS: [&str; 16] = [
    "pelvis",
    "spine",
    "neck",
    "head",
    "left_shoulder",
    "left_elbow",
    "left_wrist",
    "right_shoulder",
    "right_elbow",
    "right_wrist",
    "left_hip",
    "left_knee",
    "left_ankle",
    "right_hip",
    "right_knee",
    "right_ankle",
];

const DEFAULT_EDGES: [(usize, usize); 15] = [
    (0, 1),
    (1, 2),
    (2, 3),
    (2, 4),
    (4, 5),
    (5, 6),
    (2, 7),
    (7, 8),
    (8, 9),
    (0, 10),
    (10, 11),
    (11, 12),
    (0, 13),
    (13, 14),
    (14, 15),
];

impl Skeleton {
    pub fn new(joint_names: Vec<String>, edges: Vec<(usize, usize)>, root_index: usize) -> Result<Self> {
        let n = joint_names.len();
        if n == 0 {
            return Err(CoreError::Skeleton("no joints".into()));
        }
        let mut seen_names = BTreeSet::new();
        for name in &joint_names {
            if !seen_names.insert(name.as_str()) {
                return Err(CoreError::Skeleton(format!("duplicate joint `{name}`")));
            }
        }
        if root_index >= n {
            return Err(CoreError::Skeleton(format!("root index {root_index} out of range for {n} joints")));
        }
        let mut seen = BTreeSet::new();
        for &(a, b) in &edges {
            if a >= n || b >= n {
                return Err(CoreError::Skeleton(format!("edge ({a}, {b}) out of range for {n} joints")));
            }
            if a == b {
                return Err(CoreError::Skeleton(format!("self edge at joint {a}")));
            }
            if !seen.insert((a.min(b), a.max(b))) {
                return Err(CoreError::Skeleton(format!("duplicate edge ({a}, {b})")));
            }
        }
        let skel = Self {
            joint_names,
            edges,
            root_index,
        };
        if !skel.is_connected() {
            return Err(CoreError::Skeleton("joint graph is not connected".into()));
        }
        Ok(skel)
    }

    /// Pelvis-rooted 16-joint human skeleton.
    pub fn default_human() -> Self {
        Self::new(
            DEFAULT_JOINTS.iter().map(|s| s.to_string()).collect(),
            DEFAULT_EDGES.to_vec(),
            0,
        )
        .expect("built-in skeleton is valid")
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: SkeletonFile = toml::from_str(text).map_err(|e| CoreError::Skeleton(e.to_string()))?;
        let index: HashMap<&str, usize> = file
            .joints
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i))
            .collect();
        let lookup = |name: &str| {
            index
                .get(name)
                .copied()
                .ok_or_else(|| CoreError::Skeleton(format!("unknown joint `{name}`")))
        };
        let edges = file
            .edges
            .iter()
            .map(|[a, b]| Ok((lookup(a)?, lookup(b)?)))
            .collect::<Result<Vec<_>>>()?;
        let root = lookup(&file.root)?;
        Self::new(file.joints.clone(), edges, root)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        let file = SkeletonFile {
            joints: self.joint_names.clone(),
            edges: self
                .edges
                .iter()
                .map(|&(a, b)| [self.joint_names[a].clone(), self.joint_names[b].clone()])
                .collect(),
            root: self.joint_names[self.root_index].clone(),
        };
        toml::to_string(&file).expect("skeleton serializes")
    }

    pub fn num_joints(&self) -> usize {
        self.joint_names.len()
    }

    pub fn joint_names(&self) -> &[String] {
        &self.joint_names
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn root_index(&self) -> usize {
        self.root_index
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.joint_names.iter().position(|n| n == name)
    }

    /// Parent of every joint in a breadth-first tree rooted at the root joint.
    pub fn parents(&self) -> Vec<Option<usize>> {
        let n = self.num_joints();
        let mut parent = vec![None; n];
        let mut visited = vec![false; n];
        let mut queue = std::collections::VecDeque::from([self.root_index]);
        visited[self.root_index] = true;
        while let Some(j) = queue.pop_front() {
            for &(a, b) in &self.edges {
                let other = if a == j {
                    b
                } else if b == j {
                    a
                } else {
                    continue;
                };
                if !visited[other] {
                    visited[other] = true;
                    parent[other] = Some(j);
                    queue.push_back(other);
                }
            }
        }
        parent
    }

    fn is_connected(&self) -> bool {
        let parents = self.parents();
        (0..self.num_joints()).all(|j| j == self.root_index || parents[j].is_some())
    }

    /// Relabels joints so that new joint `i` is old joint `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.num_joints();
        let mut inverse = vec![usize::MAX; n];
        if perm.len() != n {
            return Err(CoreError::Skeleton(format!("permutation of length {} for {n} joints", perm.len())));
        }
        for (i, &p) in perm.iter().enumerate() {
            if p >= n || inverse[p] != usize::MAX {
                return Err(CoreError::Skeleton("not a permutation".into()));
            }
            inverse[p] = i;
        }
        Self::new(
            perm.iter().map(|&p| self.joint_names[p].clone()).collect(),
            self.edges.iter().map(|&(a, b)| (inverse[a], inverse[b])).collect(),
            inverse[self.root_index],
        )
    }
}

/// Dense square matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyMatrix {
    n: usize,
    values: Vec<f64>,
}

impl AdjacencyMatrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(CoreError::invalid("adjacency", "matrix is not square"));
        }
        Ok(Self {
            n,
            values: rows.concat(),
        })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n..][..self.n]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    /// Copy with the diagonal zeroed.
    pub fn off_diagonal(&self) -> Self {
        let mut out = self.clone();
        for i in 0..self.n {
            out.values[i * self.n + i] = 0.0;
        }
        out
    }

    /// `P A Pᵀ` where new index `i` is old index `perm[i]`.
    pub fn conjugated(&self, perm: &[usize]) -> Self {
        let n = self.n;
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                values[i * n + j] = self.get(perm[i], perm[j]);
            }
        }
        Self { n, values }
    }
}

/// Symmetric 0/1 skeletal adjacency with unit diagonal.
pub fn build_adjacency(skel: &Skeleton) -> AdjacencyMatrix {
    let n = skel.num_joints();
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        values[i * n + i] = 1.0;
    }
    for &(a, b) in skel.edges() {
        values[a * n + b] = 1.0;
        values[b * n + a] = 1.0;
    }
    AdjacencyMatrix { n, values }
}

/// Divides each row by its L1 norm.
pub fn normalize_adjacency(a: &AdjacencyMatrix) -> Result<AdjacencyMatrix> {
    let n = a.n;
    let mut values = a.values.clone();
    for i in 0..n {
        let row = &mut values[i * n..][..n];
        let sum: f64 = row.iter().map(|v| v.abs()).sum();
        if sum == 0.0 {
            return Err(CoreError::Skeleton(format!("adjacency row {i} is all zero")));
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    Ok(AdjacencyMatrix { n, values })
}
