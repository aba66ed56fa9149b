//! Incidence and Laplacian matrices, singular-value bounds, and the
//! CADMM iteration matrix.
//!
//! `M+ = A1' + A2'` and `M- = A1' - A2'` are the unoriented and oriented
//! node-by-arc incidence matrices, with `L+ = M+ M+' / 2`, `L- = M- M-' / 2`
//! and degree matrix `W = (L+ + L-) / 2`. Singular values of the
//! rectangular incidence matrices are taken from the eigenvalues of the
//! `N x N` Laplacians, since `M M' = 2L`.

use serde::{Deserialize, Serialize};

use crate::error::{ConsensusError, Result};
use crate::graph::Graph;
use crate::linalg::{symmetric_eigen, Matrix, SymmetricEigen};

/// All incidence-derived matrices of a graph.
#[derive(Debug, Clone)]
pub struct IncidenceSet {
    /// `2E x N`, row `q` has a one at the tail of arc `q`.
    pub a1: Matrix,
    /// `2E x N`, row `q` has a one at the head of arc `q`.
    pub a2: Matrix,
    pub m_plus: Matrix,
    pub m_minus: Matrix,
    pub l_plus: Matrix,
    pub l_minus: Matrix,
    pub w: Matrix,
}

impl IncidenceSet {
    pub fn n(&self) -> usize {
        self.w.rows()
    }

    pub fn arcs(&self) -> usize {
        self.a1.rows()
    }
}

pub fn build_incidence(g: &Graph) -> IncidenceSet {
    let n = g.n();
    let arcs = g.arcs();
    let mut a1 = Matrix::zeros(arcs, n);
    let mut a2 = Matrix::zeros(arcs, n);
    for q in 0..arcs {
        let (i, j) = g.arc(q);
        a1[(q, i)] = 1.0;
        a2[(q, j)] = 1.0;
    }
    let a1t = a1.transpose();
    let a2t = a2.transpose();
    let m_plus = a1t.add(&a2t);
    let m_minus = a1t.sub(&a2t);
    let l_plus = m_plus.matmul(&m_plus.transpose()).scale(0.5);
    let l_minus = m_minus.matmul(&m_minus.transpose()).scale(0.5);
    let w = l_plus.add(&l_minus).scale(0.5);
    IncidenceSet {
        a1,
        a2,
        m_plus,
        m_minus,
        l_plus,
        l_minus,
        w,
    }
}

/// Singular-value quantities governing the linear rate of CADMM.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralBounds {
    pub sigma_max_mplus: f64,
    /// Smallest nonzero singular value of `M-`.
    pub sigma_min_mminus: f64,
    pub sigma_max_mminus: f64,
    /// Contraction factor: the G-norm error shrinks by `1 / (1 + delta)` per step.
    pub delta: f64,
    pub rho: f64,
}

impl SpectralBounds {
    /// `1 / (1 + delta)`.
    pub fn contraction(&self) -> f64 {
        1.0 / (1.0 + self.delta)
    }

    /// Multiplier of the R-linear envelope on the stacked iterate error.
    pub fn envelope_factor(&self) -> f64 {
        1.0 + (self.rho / (1.0 + self.delta)).sqrt() * self.sigma_max_mminus
    }
}

/// `min{ s^2 / (2 S^2), 4 rho s^2 / (rho^2 S^2 s^2 + 8) }` with
/// `S = sigma_max(M+)`, `s = sigma~_min(M-)`.
pub fn contraction_delta(sigma_max_mplus: f64, sigma_min_mminus: f64, rho: f64) -> f64 {
    let s2 = sigma_min_mminus * sigma_min_mminus;
    let big2 = sigma_max_mplus * sigma_max_mplus;
    let first = s2 / (2.0 * big2);
    let second = 4.0 * rho * s2 / (rho * rho * big2 * s2 + 8.0);
    first.min(second)
}

/// Tolerance below which a Laplacian eigenvalue is treated as zero.
fn zero_eig_tol(l: &Matrix) -> f64 {
    1e-9 * l.max_abs().max(1.0) * l.rows() as f64
}

pub fn spectral_bounds(inc: &IncidenceSet, rho: f64) -> Result<SpectralBounds> {
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(ConsensusError::param(format!("rho must be positive, got {rho}")));
    }
    let plus = symmetric_eigen(&inc.l_plus)?;
    let minus = symmetric_eigen(&inc.l_minus)?;
    let lambda2 = algebraic_connectivity(&minus, &inc.l_minus)?;
    let lmax_plus = *plus.values.last().expect("nonempty spectrum");
    let lmax_minus = *minus.values.last().expect("nonempty spectrum");

    let sigma_max_mplus = (2.0 * lmax_plus).sqrt();
    let sigma_min_mminus = (2.0 * lambda2).sqrt();
    let sigma_max_mminus = (2.0 * lmax_minus).sqrt();
    let delta = contraction_delta(sigma_max_mplus, sigma_min_mminus, rho);
    // Written to reject NaN as well.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(delta > 0.0) {
        return Err(ConsensusError::numerical(format!(
            "non-positive contraction factor {delta}"
        )));
    }
    Ok(SpectralBounds {
        sigma_max_mplus,
        sigma_min_mminus,
        sigma_max_mminus,
        delta,
        rho,
    })
}

/// Second-smallest eigenvalue of the signed Laplacian, checking that the
/// smallest is zero and simple.
fn algebraic_connectivity(eig: &SymmetricEigen, l_minus: &Matrix) -> Result<f64> {
    let tol = zero_eig_tol(l_minus);
    let vals = &eig.values;
    if vals.len() < 2 {
        return Err(ConsensusError::numerical("Laplacian smaller than 2x2"));
    }
    if vals[0].abs() > tol {
        return Err(ConsensusError::numerical(format!(
            "smallest Laplacian eigenvalue {:.3e} is not zero",
            vals[0]
        )));
    }
    if vals[1] <= tol {
        return Err(ConsensusError::numerical(format!(
            "zero eigenvalue is not simple (second eigenvalue {:.3e}); graph disconnected?",
            vals[1]
        )));
    }
    Ok(vals[1])
}

/// The `3N x 3N` matrix of the linear CADMM recurrence on `s = [x; alpha; r]`.
#[derive(Debug, Clone)]
pub struct IterationMatrix {
    pub d: Matrix,
    /// `(I + 2 rho W)^{-1}`, diagonal.
    pub d0: Matrix,
    n: usize,
}

impl IterationMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    /// Applies `D` to the stacked state.
    pub fn apply(&self, s: &[f64]) -> Vec<f64> {
        self.d.matvec(s)
    }
}

/// Stacks `[x; alpha; r]`.
pub fn stack_state(x: &[f64], alpha: &[f64], r: &[f64]) -> Vec<f64> {
    let mut s = Vec::with_capacity(x.len() * 3);
    s.extend_from_slice(x);
    s.extend_from_slice(alpha);
    s.extend_from_slice(r);
    s
}

pub fn build_iteration_matrix(inc: &IncidenceSet, rho: f64, n: usize) -> Result<IterationMatrix> {
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(ConsensusError::param(format!("rho must be positive, got {rho}")));
    }
    if inc.n() != n {
        return Err(ConsensusError::param(format!(
            "iteration matrix size {n} does not match incidence set with {} nodes",
            inc.n()
        )));
    }
    let d0_diag: Vec<f64> = (0..n).map(|i| 1.0 / (1.0 + 2.0 * rho * inc.w[(i, i)])).collect();
    let d0 = Matrix::from_diag(&d0_diag);
    let eye = Matrix::identity(n);

    let d0_lp = d0.matmul(&inc.l_plus);
    let lm_d0 = inc.l_minus.matmul(&d0);

    let mut d = Matrix::zeros(3 * n, 3 * n);
    d.set_block(0, 0, &d0_lp.scale(rho));
    d.set_block(0, n, &d0.scale(-1.0));
    d.set_block(0, 2 * n, &d0);
    d.set_block(n, 0, &inc.l_minus.matmul(&d0_lp).scale(rho * rho));
    d.set_block(n, n, &eye.sub(&lm_d0.scale(rho)));
    d.set_block(n, 2 * n, &lm_d0.scale(rho));
    d.set_block(2 * n, 2 * n, &eye);
    Ok(IterationMatrix { d, d0, n })
}

/// `D^k` for `k = 2^p`, squaring until two successive powers differ by less
/// than `tol` (relative to the larger max-norm, floored at one).
///
/// The limit is a non-orthogonal projector, so once the powers reach the
/// rounding floor further squaring amplifies rounding error. When the
/// difference stops shrinking below `FLOOR_GUARD` the best power seen so far
/// is returned.
pub fn iteration_matrix_limit(dm: &IterationMatrix, tol: f64, max_pow: usize) -> Result<Matrix> {
    const FLOOR_GUARD: f64 = 1e-8;
    let mut p = dm.d.clone();
    let mut best: Option<(f64, Matrix)> = None;
    for _ in 0..max_pow {
        let next = p.matmul(&p);
        let scale = next.max_abs().max(p.max_abs()).max(1.0);
        let diff = next.sub(&p).max_abs() / scale;
        if !diff.is_finite() {
            return Err(ConsensusError::numerical("matrix powers diverged"));
        }
        if diff < tol {
            return Ok(next);
        }
        match &best {
            Some((b, m)) if diff >= *b && *b < FLOOR_GUARD => return Ok(m.clone()),
            Some((b, _)) if diff >= *b => {}
            _ => best = Some((diff, next.clone())),
        }
        p = next;
    }
    Err(ConsensusError::numerical(format!(
        "D^(2^k) did not settle to {tol:.1e} within {max_pow} squarings"
    )))
}

/// Deviation of a limit matrix from the expected block structure:
/// zero first block column, zero `(3,2)` block, `(1,3) = 11'/N`,
/// `(2,3) = I - 11'/N`, `(3,3) = I`, and equal columns within the
/// `(1,2)` and `(2,2)` blocks.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LimitStructure {
    pub zero_blocks: f64,
    pub averaging_block: f64,
    pub centering_block: f64,
    pub identity_block: f64,
    pub column_spread: f64,
}

impl LimitStructure {
    pub fn max_deviation(&self) -> f64 {
        self.zero_blocks
            .max(self.averaging_block)
            .max(self.centering_block)
            .max(self.identity_block)
            .max(self.column_spread)
    }
}

pub fn limit_structure(dstar: &Matrix, n: usize) -> LimitStructure {
    let blk = |bi: usize, bj: usize| dstar.block(bi * n, bj * n, n, n);
    let zero_blocks = [blk(0, 0), blk(1, 0), blk(2, 0), blk(2, 1)]
        .iter()
        .map(Matrix::max_abs)
        .fold(0.0, f64::max);
    let avg = Matrix::from_rows(&vec![vec![1.0 / n as f64; n]; n]);
    let averaging_block = blk(0, 2).sub(&avg).max_abs();
    let centering_block = blk(1, 2).sub(&Matrix::identity(n).sub(&avg)).max_abs();
    let identity_block = blk(2, 2).sub(&Matrix::identity(n)).max_abs();
    let spread = |m: &Matrix| {
        (0..n)
            .flat_map(|i| (1..n).map(move |j| (i, j)))
            .map(|(i, j)| (m[(i, j)] - m[(i, 0)]).abs())
            .fold(0.0, f64::max)
    };
    let column_spread = spread(&blk(0, 1)).max(spread(&blk(1, 1)));
    LimitStructure {
        zero_blocks,
        averaging_block,
        centering_block,
        identity_block,
        column_spread,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{complete, star};

    fn two_node() -> Graph {
        Graph::from_edges(2, &[(0, 1)]).unwrap()
    }

    #[test]
    fn two_node_incidence() {
        let inc = build_incidence(&two_node());
        assert_eq!(inc.l_minus, Matrix::from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0]]));
        assert_eq!(inc.m_plus, Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]));
        assert_eq!(inc.m_minus, Matrix::from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0]]));
        assert_eq!(inc.w, Matrix::identity(2));
    }

    #[test]
    fn star_degree_matrix() {
        let inc = build_incidence(&star(3).unwrap());
        assert_eq!(inc.w, Matrix::from_diag(&[2.0, 1.0, 1.0]));
    }

    #[test]
    fn incidence_rows_are_unit() {
        let g = complete(5).unwrap();
        let inc = build_incidence(&g);
        for q in 0..g.arcs() {
            assert_eq!(inc.a1.row(q).iter().sum::<f64>(), 1.0);
            assert_eq!(inc.a2.row(q).iter().sum::<f64>(), 1.0);
            let (i, j) = g.arc(q);
            assert_eq!(inc.a1[(q, i)], 1.0);
            assert_eq!(inc.a2[(q, j)], 1.0);
        }
    }

    #[test]
    fn two_node_bounds() {
        let b = spectral_bounds(&build_incidence(&two_node()), 1.0).unwrap();
        assert!((b.sigma_max_mplus - 2.0).abs() < 1e-12);
        assert!((b.sigma_min_mminus - 2.0).abs() < 1e-12);
        assert!((b.sigma_max_mminus - 2.0).abs() < 1e-12);
        assert!((b.delta - 0.5).abs() < 1e-12);
        assert!((b.contraction() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn bad_rho_rejected() {
        let inc = build_incidence(&two_node());
        assert!(spectral_bounds(&inc, 0.0).is_err());
        assert!(spectral_bounds(&inc, -1.0).is_err());
        assert!(build_iteration_matrix(&inc, f64::NAN, 2).is_err());
        assert!(build_iteration_matrix(&inc, 1.0, 3).is_err());
    }

    #[test]
    fn two_node_d0() {
        let dm = build_iteration_matrix(&build_incidence(&two_node()), 1.0, 2).unwrap();
        assert_eq!(dm.d0, Matrix::from_diag(&[1.0 / 3.0, 1.0 / 3.0]));
    }

    #[test]
    fn third_block_row_keeps_r() {
        let g = star(4).unwrap();
        let dm = build_iteration_matrix(&build_incidence(&g), 0.7, 4).unwrap();
        let s: Vec<f64> = (0..12).map(|k| (k as f64 * 0.37).sin()).collect();
        let out = dm.apply(&s);
        assert_eq!(&out[8..], &s[8..]);
    }

    #[test]
    fn two_node_limit() {
        let dm = build_iteration_matrix(&build_incidence(&two_node()), 1.0, 2).unwrap();
        let dstar = iteration_matrix_limit(&dm, 1e-13, 64).unwrap();
        assert!(limit_structure(&dstar, 2).max_deviation() < 1e-9);
    }
}
