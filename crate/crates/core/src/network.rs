//! Graph description of the grid: prosumers are nodes, RL lines are edges.
//!
//! Edge `k = (a, b)` is oriented from its positive end `a` to its negative
//! end `b`. The orientation only fixes the sign convention of the line
//! current; every derived quantity used downstream is invariant under
//! flipping an edge.

use std::collections::VecDeque;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, GridError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridTopology {
    n: usize,
    edges: Vec<(usize, usize)>,
}

impl GridTopology {
    /// Builds a topology, rejecting self-loops, out-of-range endpoints and
    /// disconnected graphs.
    pub fn new(n: usize, edges: Vec<(usize, usize)>) -> Result<Self> {
        if n == 0 {
            return Err(GridError::Topology("graph has no nodes".into()));
        }
        for (k, &(a, b)) in edges.iter().enumerate() {
            if a >= n || b >= n {
                return Err(GridError::Topology(format!(
                    "edge {k} = ({a}, {b}) references a node outside [0, {n})"
                )));
            }
            if a == b {
                return Err(GridError::Topology(format!("edge {k} is a self-loop on node {a}")));
            }
        }
        let topo = GridTopology { n, edges };
        if !topo.is_connected() {
            return Err(GridError::Topology("graph is not connected".into()));
        }
        Ok(topo)
    }

    /// Ring `0 - 1 - ... - (n-1) - 0`. For `n = 10` this is the layout of the
    /// ten-prosumer test grid; `n = 2` degenerates to a single line.
    pub fn ring(n: usize) -> Result<Self> {
        let edges = match n {
            0 | 1 => Vec::new(),
            2 => vec![(0, 1)],
            _ => (0..n).map(|i| (i, (i + 1) % n)).collect(),
        };
        Self::new(n, edges)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Nodes sharing a line with `i`, in edge order. Parallel lines yield
    /// repeated entries.
    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.edges.iter().filter_map(move |&(a, b)| {
            if a == i {
                Some(b)
            } else if b == i {
                Some(a)
            } else {
                None
            }
        })
    }

    /// Same graph with edge `k` relabeled in the opposite direction.
    pub fn with_flipped_edge(&self, k: usize) -> Self {
        let mut edges = self.edges.clone();
        let (a, b) = edges[k];
        edges[k] = (b, a);
        GridTopology { n: self.n, edges }
    }

    fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.n];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        while let Some(i) = queue.pop_front() {
            for j in self.neighbors(i) {
                if !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    pub fn incidence_matrix(&self) -> DMatrix<f64> {
        let mut b = DMatrix::zeros(self.n, self.m());
        for (k, &(pos, neg)) in self.edges.iter().enumerate() {
            b[(pos, k)] = 1.0;
            b[(neg, k)] = -1.0;
        }
        b
    }

    /// Conductance-weighted Laplacian `B R^-1 B^T`.
    ///
    /// Assembled edge by edge rather than through the triple product, so the
    /// zero row sums hold exactly.
    pub fn weighted_laplacian(&self, line_resistances: &[f64]) -> Result<DMatrix<f64>> {
        check_len("line resistances", self.m(), line_resistances.len())?;
        let mut lap = DMatrix::zeros(self.n, self.n);
        for (k, (&(a, b), &r)) in self.edges.iter().zip(line_resistances).enumerate() {
            if !(r > 0.0 && r.is_finite()) {
                return Err(GridError::param(
                    format!("lines[{k}].R"),
                    format!("resistance must be positive and finite, got {r}"),
                ));
            }
            let g = 1.0 / r;
            lap[(a, a)] += g;
            lap[(b, b)] += g;
            lap[(a, b)] -= g;
            lap[(b, a)] -= g;
        }
        Ok(lap)
    }
}

/// Second-smallest eigenvalue of a symmetric Laplacian (Fiedler value).
/// Strictly positive exactly when the underlying graph is connected.
pub fn algebraic_connectivity(laplacian: &DMatrix<f64>) -> f64 {
    if laplacian.nrows() < 2 {
        return 0.0;
    }
    let mut eig: Vec<f64> = SymmetricEigen::new(laplacian.clone())
        .eigenvalues
        .iter()
        .copied()
        .collect();
    eig.sort_by(|a, b| a.total_cmp(b));
    eig[1]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smallest_graph_incidence() {
        let topo = GridTopology::new(2, vec![(0, 1)]).unwrap();
        let b = topo.incidence_matrix();
        assert_eq!(b, DMatrix::from_row_slice(2, 1, &[1.0, -1.0]));
    }

    #[test]
    fn ring_of_ten_incidence_structure() {
        let topo = GridTopology::ring(10).unwrap();
        let b = topo.incidence_matrix();
        for k in 0..10 {
            let col = b.column(k);
            assert_eq!(col.iter().filter(|&&x| x == 1.0).count(), 1);
            assert_eq!(col.iter().filter(|&&x| x == -1.0).count(), 1);
            assert_eq!(col.sum(), 0.0);
        }
        for i in 0..10 {
            assert_eq!(b.row(i).iter().filter(|&&x| x != 0.0).count(), 2);
        }
    }

    #[test]
    fn two_node_laplacian_by_hand() {
        let topo = GridTopology::new(2, vec![(0, 1)]).unwrap();
        let l = topo.weighted_laplacian(&[0.1]).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[10.0, -10.0, -10.0, 10.0]);
        assert!((l - expected).abs().max() < 1e-12);
    }

    #[test]
    fn uniform_ring_has_ones_in_kernel() {
        let topo = GridTopology::ring(10).unwrap();
        let l = topo.weighted_laplacian(&[0.075; 10]).unwrap();
        let ones = nalgebra::DVector::from_element(10, 1.0);
        assert!((&l * ones).amax() < 1e-12);
        assert!(algebraic_connectivity(&l) > 1e-6);
    }

    #[test]
    fn rejects_bad_topologies() {
        assert!(matches!(
            GridTopology::new(3, vec![(0, 1), (1, 1)]),
            Err(GridError::Topology(_))
        ));
        assert!(matches!(
            GridTopology::new(3, vec![(0, 3)]),
            Err(GridError::Topology(_))
        ));
        assert!(matches!(
            GridTopology::new(4, vec![(0, 1), (2, 3)]),
            Err(GridError::Topology(_))
        ));
        assert!(GridTopology::new(0, vec![]).is_err());
    }

    #[test]
    fn nonpositive_resistance_is_a_parameter_error() {
        let topo = GridTopology::ring(3).unwrap();
        let err = topo.weighted_laplacian(&[0.1, 0.0, 0.1]).unwrap_err();
        assert!(matches!(err, GridError::Parameter { ref field, .. } if field == "lines[1].R"));
        assert!(topo.weighted_laplacian(&[0.1, 0.1]).is_err());
    }

    #[test]
    fn neighbors_of_ring_node() {
        let topo = GridTopology::ring(5).unwrap();
        let mut nb: Vec<_> = topo.neighbors(0).collect();
        nb.sort();
        assert_eq!(nb, vec![1, 4]);
    }
}
