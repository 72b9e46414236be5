//! Dense linear-algebra helpers shared by every module.
//!
//! All pseudoinverses go through a thin SVD with a relative singular-value
//! cutoff. Vectorization is column-major everywhere, so that
//! `vec(A X B) = (Bᵀ ⊗ A) vec(X)`.

use nalgebra::{allocator::Allocator, DMatrix, DVector, DefaultAllocator, Dim, Matrix3, OMatrix, Vector3};

/// Relative singular-value cutoff used for every controller pseudoinverse.
pub const PINV_RCOND: f64 = 1e-8;

/// Relative cutoff used for rank decisions on the Kronecker system.
pub const RANK_RCOND: f64 = 1e-10;

/// How a Moore-Penrose pseudoinverse is formed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PinvOptions {
    /// Singular values below `rcond * sigma_max` are treated as zero.
    pub rcond: f64,
    /// Damping λ²; `σ / (σ² + λ²)` replaces `1/σ` when non-zero.
    pub damping: f64,
}

impl Default for PinvOptions {
    fn default() -> Self {
        Self {
            rcond: PINV_RCOND,
            damping: 0.0,
        }
    }
}

/// Thin SVD summary: singular values sorted in decreasing order.
pub fn singular_values(a: &DMatrix<f64>) -> Vec<f64> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return Vec::new();
    }
    let mut s: Vec<f64> = a.clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|x, y| y.partial_cmp(x).unwrap());
    s
}

/// Numerical rank with threshold `rcond * sigma_max`.
pub fn rank(a: &DMatrix<f64>, rcond: f64) -> usize {
    let s = singular_values(a);
    match s.first() {
        Some(&smax) if smax > 0.0 => s.iter().filter(|&&x| x > rcond * smax).count(),
        _ => 0,
    }
}

/// 2-norm condition number (`inf` for rank-deficient input).
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    let s = singular_values(a);
    match (s.first(), s.last()) {
        (Some(&hi), Some(&lo)) if lo > 0.0 => hi / lo,
        (Some(_), Some(_)) => f64::INFINITY,
        _ => 1.0,
    }
}

/// Moore-Penrose pseudoinverse via SVD.
pub fn pinv_with(a: &DMatrix<f64>, opts: PinvOptions) -> DMatrix<f64> {
    let (r, c) = a.shape();
    if r == 0 || c == 0 {
        return DMatrix::zeros(c, r);
    }
    let svd = a.clone().svd(true, true);
    let u = svd.u.as_ref().expect("u requested");
    let vt = svd.v_t.as_ref().expect("v_t requested");
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let mut out = DMatrix::zeros(c, r);
    if smax == 0.0 {
        return out;
    }
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s <= opts.rcond * smax {
            continue;
        }
        let inv = if opts.damping > 0.0 {
            s / (s * s + opts.damping)
        } else {
            1.0 / s
        };
        // out += v_k * inv * u_kᵀ
        let vk = vt.row(k).transpose();
        let uk = u.column(k);
        out.ger(inv, &vk, &uk, 1.0);
    }
    out
}

/// Pseudoinverse with the default controller cutoff.
pub fn pinv(a: &DMatrix<f64>) -> DMatrix<f64> {
    pinv_with(a, PinvOptions::default())
}

/// Orthogonal projector onto the null space of `a`, `1 - a† a`.
pub fn null_projector(a: &DMatrix<f64>, opts: PinvOptions) -> DMatrix<f64> {
    let n = a.ncols();
    DMatrix::identity(n, n) - pinv_with(a, opts) * a
}

/// Orthonormal basis (as columns) of the range of a symmetric projector.
pub fn projector_basis(p: &DMatrix<f64>) -> DMatrix<f64> {
    let n = p.nrows();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let sym = (p + p.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let cols: Vec<DVector<f64>> = eig
        .eigenvalues
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > 0.5)
        .map(|(i, _)| eig.eigenvectors.column(i).into_owned())
        .collect();
    if cols.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        DMatrix::from_columns(&cols)
    }
}

/// Kronecker product `a ⊗ b`.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = DMatrix::zeros(ar * br, ac * bc);
    for j in 0..ac {
        for i in 0..ar {
            let aij = a[(i, j)];
            if aij == 0.0 {
                continue;
            }
            out.view_mut((i * br, j * bc), (br, bc)).copy_from(&(b * aij));
        }
    }
    out
}

/// Column-major vectorization.
pub fn vec_cm(a: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(a.as_slice())
}

/// Inverse of [`vec_cm`].
pub fn unvec_cm(v: &[f64], rows: usize, cols: usize) -> DMatrix<f64> {
    assert_eq!(v.len(), rows * cols, "unvec: length mismatch");
    DMatrix::from_column_slice(rows, cols, v)
}

/// Cross-product matrix: `skew3(a) * b == a × b`.
pub fn skew3(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Symmetric part `(a + aᵀ)/2`.
pub fn sym(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Smallest eigenvalue of the symmetric part.
pub fn min_sym_eigenvalue(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return f64::INFINITY;
    }
    sym(a).symmetric_eigenvalues().iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Symmetric within `rel_tol · max(1, ‖a‖)` and positive definite
/// (Cholesky succeeds and the smallest eigenvalue is positive).
pub fn is_spd(a: &DMatrix<f64>, rel_tol: f64) -> bool {
    if !a.is_square() {
        return false;
    }
    let scale = a.norm().max(1.0);
    if (a - a.transpose()).norm() > rel_tol * scale {
        return false;
    }
    let s = sym(a);
    s.clone().cholesky().is_some() && min_sym_eigenvalue(&s) > 0.0
}

/// Maximum real part over the eigenvalues of a real square matrix.
pub fn spectral_abscissa(a: &DMatrix<f64>) -> f64 {
    eigenvalues(a).iter().map(|z| z.0).fold(f64::NEG_INFINITY, f64::max)
}

/// Eigenvalues `(re, im)` of a real square matrix, sorted by decreasing real part.
pub fn eigenvalues(a: &DMatrix<f64>) -> Vec<(f64, f64)> {
    if a.nrows() == 0 {
        return Vec::new();
    }
    let ev = a.clone().complex_eigenvalues();
    let mut out: Vec<(f64, f64)> = ev.iter().map(|z| (z.re, z.im)).collect();
    out.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap().then(y.1.partial_cmp(&x.1).unwrap()));
    out
}

fn one_norm<D: Dim>(a: &OMatrix<f64, D, D>) -> f64
where
    DefaultAllocator: Allocator<D, D>,
{
    a.column_iter()
        .map(|c| c.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Matrix exponential by scaling and squaring of a truncated Taylor series.
///
/// The degree is the smallest one whose truncation bound
/// `θ^(k+1)/(k+1)!` drops below the unit roundoff for the scaled 1-norm θ,
/// so tiny arguments cost one or two products.
pub fn expm<D: Dim>(a: &OMatrix<f64, D, D>) -> OMatrix<f64, D, D>
where
    DefaultAllocator: Allocator<D, D>,
{
    let (nr, nc) = a.shape_generic();
    let norm = one_norm(a);
    let id = OMatrix::<f64, D, D>::identity_generic(nr, nc);
    if norm == 0.0 {
        return id;
    }
    let mut squarings = 0u32;
    let mut theta = norm;
    while theta > 0.5 {
        theta *= 0.5;
        squarings += 1;
    }
    let scaled = a * (0.5f64).powi(squarings as i32);
    // Smallest k with θ^(k+1)/(k+1)! ≤ 2^-53.
    let mut degree = 1usize;
    let mut bound = theta * theta / 2.0;
    while bound > f64::EPSILON * 0.5 && degree < 30 {
        degree += 1;
        bound *= theta / (degree as f64 + 1.0);
    }
    // Horner: I + A/1 (I + A/2 (I + ... (I + A/k)))
    let mut acc = id.clone();
    for k in (1..=degree).rev() {
        acc = &scaled * &acc * (1.0 / k as f64);
        acc += &id;
    }
    for _ in 0..squarings {
        acc = &acc * &acc;
    }
    acc
}
