//! Feature map → patch graph with clamped-cosine adjacency.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{config_err, Result};
use crate::linalg::{matmul, Matrix};

/// `h × h × c` tensor stored as `h²` row-major spatial positions of `c` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    h: usize,
    c: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(h: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if h < 2 || c < 1 {
            return Err(config_err(format!(
                "feature map needs h >= 2 and c >= 1, got {h}x{c}"
            )));
        }
        if data.len() != h * h * c {
            return Err(config_err(format!(
                "feature map data has {} values, expected {}",
                data.len(),
                h * h * c
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(config_err("feature map has non-finite entries"));
        }
        Ok(Self { h, c, data })
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn c(&self) -> usize {
        self.c
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Feature vector at spatial position `(row, col)`.
    pub fn at(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.h + col) * self.c;
        &self.data[start..start + self.c]
    }

    /// Reassembles a feature map from an `h² × c` node matrix.
    pub fn from_nodes(h: usize, x: &Matrix) -> Result<Self> {
        Self::new(h, x.cols(), x.data().to_vec())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    /// Node features, `N × L`.
    pub x: Matrix,
    /// Clamped cosine adjacency, `N × N`.
    pub a: Matrix,
    /// `D^-1/2 Ā D^-1/2`, see [`normalize_adjacency`].
    pub a_norm: Matrix,
    /// `Ã X`, constant for a fixed graph and reused by every forward pass.
    pub ax: Matrix,
}

impl Graph {
    pub fn nodes(&self) -> usize {
        self.x.rows()
    }

    pub fn features(&self) -> usize {
        self.x.cols()
    }

    /// Builds a graph from node features directly.
    pub fn from_nodes(x: Matrix) -> Result<Self> {
        let a = cosine_adjacency(&x);
        let a_norm = normalize_adjacency(&a);
        let ax = matmul(&a_norm, &x)?;
        Ok(Self { x, a, a_norm, ax })
    }
}

/// `a_ij = max(x_i·x_j / (‖x_i‖‖x_j‖), 0)`, and 0 when either vector is zero.
pub fn cosine_adjacency(x: &Matrix) -> Matrix {
    let n = x.rows();
    let norms: Vec<f64> = (0..n)
        .map(|i| libm::sqrt(x.row(i).iter().map(|v| v * v).sum()))
        .collect();
    let mut a = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = if norms[i] == 0.0 || norms[j] == 0.0 {
                0.0
            } else if i == j {
                1.0
            } else {
                let dot: f64 = x.row(i).iter().zip(x.row(j)).map(|(p, q)| p * q).sum();
                (dot / (norms[i] * norms[j])).clamp(0.0, 1.0)
            };
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
    a
}

pub fn to_graph(fm: &FeatureMap) -> Result<Graph> {
    let x = Matrix::from_vec(fm.h * fm.h, fm.c, fm.data.clone())?;
    Graph::from_nodes(x)
}

/// Symmetric normalization with unit self-loops, `D^-1/2 Ā D^-1/2`.
///
/// `Ā` is `A` with its diagonal set to 1 and `D` is the row-sum degree of
/// `Ā`. Cosine adjacency already has `a_ii = 1` for every nonzero node, so
/// the self-loop is counted once; zero nodes gain the loop they lack.
pub fn normalize_adjacency(a: &Matrix) -> Matrix {
    let n = a.rows();
    let mut out = a.clone();
    for i in 0..n {
        out[(i, i)] = 1.0;
    }
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| 1.0 / libm::sqrt(out.row(i).iter().sum::<f64>()))
        .collect();
    for i in 0..n {
        let di = inv_sqrt[i];
        for (j, v) in out.row_mut(i).iter_mut().enumerate() {
            *v *= di * inv_sqrt[j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::rand_matrix;
    use proptest::prelude::*;

    #[test]
    fn shared_vector_gives_all_ones() {
        let h = 3;
        let v = [0.3, -0.2, 0.9];
        let data = (0..h * h).flat_map(|_| v).collect();
        let g = to_graph(&FeatureMap::new(h, 3, data).unwrap()).unwrap();
        for &a in g.a.data() {
            assert!((a - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn opposite_vectors_clamp_to_zero() {
        let x = Matrix::from_rows(&[[1.0, 0.0], [-1.0, 0.0]]);
        let a = cosine_adjacency(&x);
        assert_eq!(a[(0, 1)], 0.0);
        assert_eq!(a[(0, 0)], 1.0);
    }

    #[test]
    fn zero_vector_has_no_similarity() {
        let x = Matrix::from_rows(&[[0.0, 0.0], [1.0, 2.0]]);
        let a = cosine_adjacency(&x);
        assert_eq!(a[(0, 0)], 0.0);
        assert_eq!(a[(0, 1)], 0.0);
        let n = normalize_adjacency(&a);
        assert_eq!(n[(0, 0)], 1.0);
    }

    #[test]
    fn feature_map_validation() {
        assert!(FeatureMap::new(1, 3, alloc::vec![0.0; 3]).is_err());
        assert!(FeatureMap::new(2, 3, alloc::vec![0.0; 11]).is_err());
        assert!(FeatureMap::new(2, 1, alloc::vec![f64::NAN; 4]).is_err());
    }

    #[test]
    fn normalization_cases() {
        assert_eq!(
            normalize_adjacency(&Matrix::zeros(3, 3)),
            Matrix::identity(3)
        );
        let n = normalize_adjacency(&Matrix::filled(2, 2, 1.0));
        // degrees 2: every entry 1/2
        for &v in n.data() {
            assert!((v - 0.5).abs() < 1e-12);
        }
        let x = rand_matrix(8, 4, 1, 1.0);
        let g = Graph::from_nodes(x).unwrap();
        assert!(g.a_norm.is_symmetric(1e-12));
    }

    proptest! {
        #[test]
        fn nodes_reshape_back_exactly(
            (h, c, data) in (2usize..5, 1usize..5).prop_flat_map(|(h, c)| {
                (Just(h), Just(c), proptest::collection::vec(-3.0f64..3.0, h * h * c))
            })
        ) {
            let fm = FeatureMap::new(h, c, data).unwrap();
            let g = to_graph(&fm).unwrap();
            let back = FeatureMap::from_nodes(h, &g.x).unwrap();
            let bits = |m: &FeatureMap| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&back), bits(&fm));
        }

        #[test]
        fn adjacency_ignores_positive_node_scaling(
            seed in any::<u64>(),
            node in 0usize..9,
            k in 1e-3f64..1e3,
        ) {
            let x = rand_matrix(9, 4, seed, 1.0);
            let mut scaled = x.clone();
            for v in scaled.row_mut(node) {
                *v *= k;
            }
            let (a, b) = (cosine_adjacency(&x), cosine_adjacency(&scaled));
            for (p, q) in a.data().iter().zip(b.data()) {
                prop_assert!((p - q).abs() < 1e-12);
            }
        }
    }
}
