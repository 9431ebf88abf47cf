use ndarray::Array2;

use crate::error::{Error, Result};

/// Joint graph shared by every pose sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonTopology {
    joint_count: usize,
    edges: Vec<(usize, usize)>,
    adjacency: Array2<f64>,
}

/// Joint order of the 13-joint body.
pub const JOINT_NAMES: [&str; 13] = [
    "head",
    "neck",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
    "r_shoulder",
    "r_elbow",
    "r_wrist",
    "pelvis",
    "l_hip",
    "l_knee",
    "r_hip",
    "r_knee",
];

const BODY_EDGES: [(usize, usize); 12] = [
    (0, 1),
    (1, 2),
    (2, 3),
    (3, 4),
    (1, 5),
    (5, 6),
    (6, 7),
    (1, 8),
    (8, 9),
    (9, 10),
    (8, 11),
    (11, 12),
];

impl SkeletonTopology {
    /// Builds a topology from an edge list. The graph must be connected.
    pub fn new(joint_count: usize, edges: Vec<(usize, usize)>) -> Result<Self> {
        if joint_count == 0 {
            return Err(Error::InvalidConfig("skeleton needs at least one joint".into()));
        }
        let mut adjacency = Array2::zeros((joint_count, joint_count));
        for &(a, b) in &edges {
            if a >= joint_count || b >= joint_count || a == b {
                return Err(Error::InvalidConfig(format!("bad skeleton edge ({a}, {b})")));
            }
            adjacency[[a, b]] = 1.0;
            adjacency[[b, a]] = 1.0;
        }
        let topo = Self {
            joint_count,
            edges,
            adjacency,
        };
        if !topo.is_connected() {
            return Err(Error::InvalidConfig("skeleton graph is not connected".into()));
        }
        Ok(topo)
    }

    /// The 13-joint body: head, neck, both arms, pelvis, both legs to the knee.
    pub fn body13() -> Self {
        Self::new(13, BODY_EDGES.to_vec()).expect("static skeleton is valid")
    }

    /// A chain `0 - 1 - ... - (n-1)`; used for small test graphs.
    pub fn chain(n: usize) -> Result<Self> {
        Self::new(n, (1..n).map(|i| (i - 1, i)).collect())
    }

    pub fn joint_count(&self) -> usize {
        self.joint_count
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Symmetric 0/1 adjacency without self-loops.
    pub fn adjacency(&self) -> &Array2<f64> {
        &self.adjacency
    }

    /// `D⁻¹ (A + I)`: each row sums to one.
    pub fn normalized_adjacency(&self) -> Array2<f64> {
        row_normalize(&(&self.adjacency + &Array2::<f64>::eye(self.joint_count)))
    }

    fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.joint_count];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(j) = stack.pop() {
            for k in 0..self.joint_count {
                if self.adjacency[[j, k]] > 0.0 && !seen[k] {
                    seen[k] = true;
                    stack.push(k);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

/// Divides each row by its sum. Rows summing to zero are left as zeros.
pub fn row_normalize(m: &Array2<f64>) -> Array2<f64> {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let s = row.sum();
        if s != 0.0 {
            row.mapv_inplace(|v| v / s);
        }
    }
    out
}
