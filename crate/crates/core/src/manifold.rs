//! The oblique manifold: matrices whose rows all have unit Euclidean norm.
//!
//! A filter bank `W` (one filter per row) lives on a product of unit spheres,
//! one sphere per row. The pieces needed for first-order optimization are:
//!
//! ```text
//! tangent projection   Π_W(Z) = Z - Diag(diag(Z Wᵀ)) W
//! retraction           R(Y)   = rows of Y divided by their norms
//! unit-norm step       W⁺     = R(W - λ Π_W(∇L))
//! ```
//!
//! The retraction collapses every positive row-scaling `Diag(α) W` onto the same
//! point, which is exactly the symmetry batch normalization introduces.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::math;
use crate::numerics::{axpy, dot, Matrix};
use crate::{Error, Result, Rng};

/// Rows with a norm below this carry no usable direction; retracting them is an error.
pub const DEGENERATE_ROW_NORM: f64 = 1e-12;

/// Accepted deviation of a row norm from 1 when wrapping an external matrix.
pub const UNIT_ROW_TOLERANCE: f64 = 1e-10;

/// A point on the oblique manifold. Every row has unit norm.
#[derive(Clone, Debug, PartialEq)]
pub struct ObliquePoint {
    mat: Matrix,
}

impl ObliquePoint {
    /// Wraps `mat`, checking that it is non-empty and its rows are unit-norm
    /// within [`UNIT_ROW_TOLERANCE`].
    pub fn new(mat: Matrix) -> Result<Self> {
        if mat.rows() == 0 || mat.cols() == 0 {
            return Err(Error::Precondition(format!(
                "oblique point needs at least one row and column, got {}x{}",
                mat.rows(),
                mat.cols()
            )));
        }
        if let Some(dev) = max_unit_deviation(&mat).filter(|d| *d > UNIT_ROW_TOLERANCE) {
            return Err(Error::Precondition(format!("rows are not unit-norm (max deviation {dev:e})")));
        }
        Ok(ObliquePoint { mat })
    }

    #[inline]
    pub fn as_matrix(&self) -> &Matrix {
        &self.mat
    }

    pub fn into_matrix(self) -> Matrix {
        self.mat
    }

    pub fn n_filters(&self) -> usize {
        self.mat.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.mat.cols()
    }
}

/// Largest `|‖wᵢ‖ - 1|` over the rows of `mat`, `None` for an empty matrix.
pub fn max_unit_deviation(mat: &Matrix) -> Option<f64> {
    mat.row_iter().map(|r| (math::sqrt(dot(r, r)) - 1.0).abs()).reduce(f64::max)
}

/// `Π_W(Z) = Z - Diag(diag(Z Wᵀ)) W`: removes from each row of `z` its
/// component along the matching filter.
pub fn project_to_tangent(point: &ObliquePoint, z: &Matrix) -> Result<Matrix> {
    let w = point.as_matrix();
    w.check_same_shape("project_to_tangent", z)?;
    let mut out = z.clone();
    for i in 0..w.rows() {
        let wi = w.row(i);
        let coef = dot(z.row(i), wi);
        axpy(-coef, wi, out.row_mut(i));
    }
    Ok(out)
}

/// Row-wise normalization back onto the manifold.
pub fn retract(w_tilde: &Matrix) -> Result<ObliquePoint> {
    if w_tilde.rows() == 0 || w_tilde.cols() == 0 {
        return Err(Error::Precondition("cannot retract an empty matrix".into()));
    }
    let mut out = w_tilde.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let norm = math::sqrt(dot(row, row));
        // NaN norms fail this test too
        if norm < DEGENERATE_ROW_NORM || !norm.is_finite() {
            return Err(Error::DegenerateRetraction { row: i, norm });
        }
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Ok(ObliquePoint { mat: out })
}

/// Riemannian gradient on the unit sphere: `g - (wᵀg) w` for a unit vector `w`.
pub fn riemannian_grad(w: &[f64], g: &[f64]) -> Result<Vec<f64>> {
    if w.len() != g.len() {
        return Err(Error::shape("riemannian_grad", format!("point has {} entries, gradient {}", w.len(), g.len())));
    }
    let norm = math::sqrt(dot(w, w));
    if (norm - 1.0).abs() > UNIT_ROW_TOLERANCE || norm.is_nan() {
        return Err(Error::Precondition(format!("point has norm {norm}, expected 1")));
    }
    let coef = dot(w, g);
    let mut out = g.to_vec();
    axpy(-coef, w, &mut out);
    Ok(out)
}

/// One unit-norm SGD step: project the Euclidean gradient onto the tangent space,
/// step against it, and retract.
///
/// Rows whose tangent step is exactly zero are returned untouched, since a
/// retraction maps a zero tangent vector to the base point.
pub fn un_step(point: &ObliquePoint, grad: &Matrix, lr: f64) -> Result<ObliquePoint> {
    if lr < 0.0 || !lr.is_finite() {
        return Err(Error::Precondition(format!("learning rate must be >= 0, got {lr}")));
    }
    let tangent = project_to_tangent(point, grad)?;
    let w = point.as_matrix();
    let mut out = w.clone();
    for i in 0..w.rows() {
        let step = tangent.row(i);
        if lr == 0.0 || step.iter().all(|v| *v == 0.0) {
            continue;
        }
        let row = out.row_mut(i);
        axpy(-lr, step, row);
        let norm = math::sqrt(dot(row, row));
        if norm < DEGENERATE_ROW_NORM || !norm.is_finite() {
            return Err(Error::DegenerateRetraction { row: i, norm });
        }
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Ok(ObliquePoint { mat: out })
}

/// Standard-normal entries, then every row normalized.
pub fn random_point(n_filters: usize, in_dim: usize, rng: &mut Rng) -> ObliquePoint {
    assert!(n_filters >= 1 && in_dim >= 1, "oblique point dimensions must be >= 1");
    let mut mat = Matrix::zeros(n_filters, in_dim);
    for i in 0..n_filters {
        loop {
            let row = mat.row_mut(i);
            row.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
            if math::sqrt(dot(row, row)) >= DEGENERATE_ROW_NORM {
                break;
            }
        }
    }
    retract(&mat).expect("rows resampled until non-degenerate")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::testutil::gaussian;
    use crate::numerics::{diag_scale_rows, matmul, row_l2_norms};
    use crate::seeded_rng;
    use alloc::vec;

    fn unit(rows: &[&[f64]]) -> ObliquePoint {
        ObliquePoint::new(Matrix::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn projecting_the_point_gives_zero() {
        let mut rng = seeded_rng(10, 0);
        let w = random_point(4, 7, &mut rng);
        let p = project_to_tangent(&w, w.as_matrix()).unwrap();
        assert!(p.as_slice().iter().all(|v| v.abs() <= 1e-15));
    }

    #[test]
    fn axis_aligned_projection() {
        let w = unit(&[&[1.0, 0.0]]);
        let z = Matrix::from_rows(&[[3.5, -2.0]]).unwrap();
        assert_eq!(project_to_tangent(&w, &z).unwrap().as_slice(), &[0.0, -2.0]);
    }

    #[test]
    fn projection_matches_explicit_formula() {
        let mut rng = seeded_rng(11, 0);
        let w = random_point(4, 7, &mut rng);
        let z = gaussian(4, 7, &mut rng);
        let p = project_to_tangent(&w, &z).unwrap();
        for i in 0..4 {
            assert!(dot(w.as_matrix().row(i), p.row(i)).abs() <= 1e-13);
        }
        // Z - Diag(diag(Z Wᵀ)) W with every matrix materialized
        let zwt = matmul(&z, &w.as_matrix().transpose()).unwrap();
        let mut d = Matrix::zeros(4, 4);
        for i in 0..4 {
            d.set(i, i, zwt.get(i, i));
        }
        let mut oracle = z.clone();
        oracle.add_scaled(-1.0, &matmul(&d, w.as_matrix()).unwrap()).unwrap();
        assert!(p.max_abs_diff(&oracle) <= 1e-14);
    }

    #[test]
    fn projection_shape_error() {
        let w = unit(&[&[1.0, 0.0]]);
        assert!(matches!(project_to_tangent(&w, &Matrix::zeros(1, 3)), Err(Error::Shape { .. })));
    }

    #[test]
    fn retract_examples() {
        let r = retract(&Matrix::from_rows(&[[3.0, 4.0]]).unwrap()).unwrap();
        assert_eq!(r.as_matrix().as_slice(), &[0.6, 0.8]);

        let mut rng = seeded_rng(12, 0);
        let w = random_point(5, 9, &mut rng);
        let again = retract(w.as_matrix()).unwrap();
        assert!(again.as_matrix().max_abs_diff(w.as_matrix()) <= 1e-15);

        let err = retract(&Matrix::from_rows(&[[1.0, 0.0], [1e-13, 0.0]]).unwrap()).unwrap_err();
        assert!(matches!(err, Error::DegenerateRetraction { row: 1, .. }));
        assert!(err.is_divergence());
    }

    #[test]
    fn retract_collapses_positive_scalings() {
        use rand::Rng as _;
        let mut rng = seeded_rng(13, 0);
        let w = gaussian(6, 5, &mut rng);
        let alpha: Vec<f64> = (0..6).map(|_| libm::exp(rng.random_range(-5.0..5.0))).collect();
        let a = retract(&w).unwrap();
        let b = retract(&diag_scale_rows(&alpha, &w).unwrap()).unwrap();
        assert!(a.as_matrix().max_abs_diff(b.as_matrix()) <= 1e-14);
    }

    #[test]
    fn retract_keeps_sign_flips_distinct() {
        let w = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        let a = retract(&w).unwrap();
        let b = retract(&diag_scale_rows(&[-1.0], &w).unwrap()).unwrap();
        assert_eq!(b.as_matrix(), &a.as_matrix().scaled(-1.0));
    }

    #[test]
    fn riemannian_grad_examples() {
        let w = [0.6, 0.8];
        let g = riemannian_grad(&w, &[1.8, 2.4]).unwrap();
        assert!(g.iter().all(|v| v.abs() <= 1e-15));
        assert_eq!(riemannian_grad(&[1.0, 0.0], &[4.0, -7.0]).unwrap(), vec![0.0, -7.0]);
        assert!(matches!(riemannian_grad(&[1.0, 1.0], &[0.0, 0.0]), Err(Error::Precondition(_))));
        assert!(riemannian_grad(&[1.0, 0.0], &[0.0]).is_err());
    }

    #[test]
    fn riemannian_grad_matches_matrix_form() {
        let mut rng = seeded_rng(14, 0);
        let w = random_point(1, 10, &mut rng);
        let g = gaussian(1, 10, &mut rng);
        let v = riemannian_grad(w.as_matrix().row(0), g.as_slice()).unwrap();
        let m = project_to_tangent(&w, &g).unwrap();
        let vm = Matrix::from_vec(1, 10, v.clone()).unwrap();
        assert!(vm.max_abs_diff(&m) <= 1e-14);
        assert!(dot(&v, w.as_matrix().row(0)).abs() <= 1e-12);
    }

    #[test]
    fn un_step_fixed_points() {
        let mut rng = seeded_rng(15, 0);
        let w = random_point(3, 4, &mut rng);
        assert_eq!(un_step(&w, &Matrix::zeros(3, 4), 0.1).unwrap(), w);
        let g = gaussian(3, 4, &mut rng);
        assert_eq!(un_step(&w, &g, 0.0).unwrap(), w);
        assert!(un_step(&w, &g, -1.0).is_err());
    }

    #[test]
    fn un_step_hand_example() {
        // normalize([1,0] - 0.1 * [0,1])
        let w = unit(&[&[1.0, 0.0]]);
        let g = Matrix::from_rows(&[[5.0, 1.0]]).unwrap();
        let out = un_step(&w, &g, 0.1).unwrap();
        let s = libm::sqrt(1.01);
        let expect = [1.0 / s, -0.1 / s];
        for (a, b) in out.as_matrix().as_slice().iter().zip(expect) {
            assert!((a - b).abs() <= 1e-15);
        }
    }

    #[test]
    fn random_point_contract() {
        for seed in 0..5 {
            let w = random_point(8, 13, &mut seeded_rng(seed, 0));
            assert!(max_unit_deviation(w.as_matrix()).unwrap() <= 1e-12);
        }
        let a = random_point(6, 6, &mut seeded_rng(99, 0));
        let b = random_point(6, 6, &mut seeded_rng(99, 0));
        assert_eq!(a, b);
    }

    #[test]
    fn random_point_entries_are_centered() {
        // row normalization keeps the entries symmetric about zero; compare the
        // pre-normalization draw, which is what the sampling check is about
        let mut rng = seeded_rng(16, 0);
        let raw = gaussian(64, 784, &mut rng);
        let n = raw.as_slice().len() as f64;
        let mean = raw.as_slice().iter().sum::<f64>() / n;
        assert!(mean.abs() <= 4.0 / libm::sqrt(n));
        let w = random_point(64, 784, &mut seeded_rng(16, 0));
        assert_eq!(w.as_matrix().as_slice().len(), raw.as_slice().len());
        assert!(row_l2_norms(w.as_matrix()).iter().all(|n| (n - 1.0).abs() <= 1e-12));
    }

    #[test]
    fn oblique_point_validation() {
        assert!(ObliquePoint::new(Matrix::from_rows(&[[1.0, 1.0]]).unwrap()).is_err());
        assert!(ObliquePoint::new(Matrix::zeros(0, 3)).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn tangency_idempotence_linearity(seed in any::<u64>(), rows in 1usize..8, cols in 1usize..12, a in -3.0f64..3.0, b in -3.0f64..3.0) {
                let mut rng = seeded_rng(seed, 0);
                let w = random_point(rows, cols, &mut rng);
                let z1 = gaussian(rows, cols, &mut rng);
                let z2 = gaussian(rows, cols, &mut rng);
                let p1 = project_to_tangent(&w, &z1).unwrap();
                for i in 0..rows {
                    prop_assert!(dot(w.as_matrix().row(i), p1.row(i)).abs() <= 1e-12);
                }
                let pp = project_to_tangent(&w, &p1).unwrap();
                prop_assert!(pp.max_abs_diff(&p1) <= 1e-12);

                let mut comb = z1.scaled(a);
                comb.add_scaled(b, &z2).unwrap();
                let lhs = project_to_tangent(&w, &comb).unwrap();
                let mut rhs = p1.scaled(a);
                rhs.add_scaled(b, &project_to_tangent(&w, &z2).unwrap()).unwrap();
                prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-12);
            }

            #[test]
            fn un_step_stays_on_manifold(seed in any::<u64>(), lr in 1e-4f64..10.0) {
                let mut rng = seeded_rng(seed, 0);
                let w = random_point(5, 7, &mut rng);
                let g = gaussian(5, 7, &mut rng);
                let out = un_step(&w, &g, lr).unwrap();
                prop_assert!(max_unit_deviation(out.as_matrix()).unwrap() <= 1e-12);
            }
        }
    }
}
