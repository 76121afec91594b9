use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// How the binary adjacency is post-processed before it regulates the
/// up-sampling transform.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdjacencyNorm {
    /// Raw binary matrix.
    #[default]
    None,
    /// `D^{-1/2} A D^{-1/2}`.
    Symmetric,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdjacencyOptions {
    pub self_loops: bool,
    pub normalize: AdjacencyNorm,
}

impl Default for AdjacencyOptions {
    fn default() -> Self {
        AdjacencyOptions { self_loops: true, normalize: AdjacencyNorm::None }
    }
}

/// Joints and bones of a skeleton.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonGraph {
    name: String,
    n_joints: usize,
    edges: Vec<(usize, usize)>,
    joint_names: Option<Vec<String>>,
}

/// Names accepted by [`SkeletonGraph::builtin`].
pub const BUILTIN_GRAPHS: [&str; 3] = ["chain17", "star9", "ntu25-like"];

const NTU25_NAMES: [&str; 25] = [
    "spine_base",
    "spine_mid",
    "neck",
    "head",
    "left_shoulder",
    "left_elbow",
    "left_wrist",
    "left_hand",
    "right_shoulder",
    "right_elbow",
    "right_wrist",
    "right_hand",
    "left_hip",
    "left_knee",
    "left_ankle",
    "left_foot",
    "right_hip",
    "right_knee",
    "right_ankle",
    "right_foot",
    "spine_shoulder",
    "left_hand_tip",
    "left_thumb",
    "right_hand_tip",
    "right_thumb",
];

// Kinect v2 bone list, 1-based.
const NTU25_EDGES: [(usize, usize); 24] = [
    (1, 2),
    (2, 21),
    (3, 21),
    (4, 3),
    (5, 21),
    (6, 5),
    (7, 6),
    (8, 7),
    (9, 21),
    (10, 9),
    (11, 10),
    (12, 11),
    (13, 1),
    (14, 13),
    (15, 14),
    (16, 15),
    (17, 1),
    (18, 17),
    (19, 18),
    (20, 19),
    (22, 8),
    (23, 8),
    (24, 12),
    (25, 12),
];

impl SkeletonGraph {
    pub fn new(
        name: impl Into<String>,
        n_joints: usize,
        edges: Vec<(usize, usize)>,
        joint_names: Option<Vec<String>>,
    ) -> Result<Self> {
        if n_joints == 0 {
            return Err(Error::config("a skeleton needs at least one joint"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for &(i, j) in &edges {
            if i >= n_joints || j >= n_joints {
                return Err(Error::config(format!("edge ({i},{j}) out of range for {n_joints} joints")));
            }
            if i == j {
                return Err(Error::config(format!("edge ({i},{i}) is a self-loop; self-loops are added by the adjacency options")));
            }
            if !seen.insert((i.min(j), i.max(j))) {
                return Err(Error::config(format!("duplicate edge ({i},{j})")));
            }
        }
        if let Some(names) = &joint_names {
            if names.len() != n_joints {
                return Err(Error::config(format!("{} joint names for {n_joints} joints", names.len())));
            }
        }
        Ok(SkeletonGraph { name: name.into(), n_joints, edges, joint_names })
    }

    pub fn builtin(name: &str) -> Result<Self> {
        match name {
            "chain17" => Self::new(name, 17, (0..16).map(|i| (i, i + 1)).collect(), None),
            "star9" => Self::new(name, 9, (1..9).map(|i| (0, i)).collect(), None),
            "ntu25-like" => Self::new(
                name,
                25,
                NTU25_EDGES.iter().map(|&(a, b)| (a - 1, b - 1)).collect(),
                Some(NTU25_NAMES.iter().map(|s| s.to_string()).collect()),
            ),
            other => Err(Error::config(format!(
                "unknown skeleton `{other}` (expected one of {})",
                BUILTIN_GRAPHS.join(", ")
            ))),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn n_joints(&self) -> usize {
        self.n_joints
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn joint_name(&self, j: usize) -> String {
        match &self.joint_names {
            Some(names) => names[j].clone(),
            None => format!("j{j}"),
        }
    }

    pub fn degree(&self, j: usize) -> usize {
        self.edges.iter().filter(|&&(a, b)| a == j || b == j).count()
    }

    /// Neighbor lists `{j : A[i][j] = 1}`, sorted.
    pub fn neighbors(&self, self_loops: bool) -> Vec<Vec<usize>> {
        let mut nb = vec![Vec::new(); self.n_joints];
        for &(i, j) in &self.edges {
            nb[i].push(j);
            nb[j].push(i);
        }
        for (i, list) in nb.iter_mut().enumerate() {
            if self_loops {
                list.push(i);
            }
            list.sort_unstable();
        }
        nb
    }

    /// `N×N` adjacency, binary unless normalization is requested.
    pub fn adjacency<T: Scalar>(&self, opts: AdjacencyOptions) -> Tensor<T> {
        let n = self.n_joints;
        let mut a = vec![0.0f64; n * n];
        for (i, list) in self.neighbors(opts.self_loops).iter().enumerate() {
            for &j in list {
                a[i * n + j] = 1.0;
            }
        }
        if opts.normalize == AdjacencyNorm::Symmetric {
            let d: Vec<f64> = (0..n).map(|i| a[i * n..][..n].iter().sum::<f64>()).collect();
            for i in 0..n {
                for j in 0..n {
                    if a[i * n + j] != 0.0 {
                        a[i * n + j] /= (d[i] * d[j]).sqrt();
                    }
                }
            }
        }
        Tensor::new(vec![n, n], a.into_iter().map(T::lit).collect()).expect("n×n")
    }

    /// Parent of every joint in a breadth-first tree rooted at joint 0
    /// (`None` for roots of each component).
    pub fn bfs_parents(&self) -> Vec<Option<usize>> {
        let nb = self.neighbors(false);
        let mut parent = vec![None; self.n_joints];
        let mut seen = vec![false; self.n_joints];
        for root in 0..self.n_joints {
            if seen[root] {
                continue;
            }
            seen[root] = true;
            let mut queue = std::collections::VecDeque::from([root]);
            while let Some(u) = queue.pop_front() {
                for &v in &nb[u] {
                    if !seen[v] {
                        seen[v] = true;
                        parent[v] = Some(u);
                        queue.push_back(v);
                    }
                }
            }
        }
        parent
    }
}
