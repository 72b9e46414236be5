//! Tracker driving `X = Oᵀ exp(L) O` toward an arbitrary target `K*`.
//!
//! The factors evolve as `L̇ = U`, `Ȯ = O S(v)` with
//!
//! ```text
//! B1 = exp(L) − O K* Oᵀ            U = −K_U exp(−L) diag(B1)
//! B2 = X K*ᵀ − K*ᵀ X               v = K_v S⁻¹((B2 − B2ᵀ)/2)
//! ```
//!
//! which makes `V = |K* − X|²` non-increasing for any `K*`: the diagonal
//! part contributes `−2 Σ K_U,i B1_ii²` and the rotation part
//! `−4 wᵀK_v w` with `w = S⁻¹((B2 − B2ᵀ)/2)`, so any SPD `K_v` works.
//!
//! Skew basis: pairs `(i, j)`, `i < j`, in lexicographic order, with
//! `S(v) = Σ_k v_k (E_ij − E_ji)`.

use nalgebra::allocator::Allocator;
use nalgebra::{Const, DMatrix, DVector, DefaultAllocator, Dim, Dyn, OMatrix, OVector};

use crate::error::{Error, Result};
use crate::linalg::{expm, sym};

/// Slack under which an increase of `V` is attributed to rounding.
pub const MONOTONE_TOL: f64 = 1e-9;
/// Deepest step halving tried by the monotone guard.
pub const GUARD_MAX_DEPTH: u32 = 20;
/// Consecutive small changes that count as a stall.
pub const STALL_WINDOW: usize = 10;

pub fn skew_pairs(m: usize) -> Vec<(usize, usize)> {
    (0..m).flat_map(|i| (i + 1..m).map(move |j| (i, j))).collect()
}

pub fn skew_dim(m: usize) -> usize {
    m * m.saturating_sub(1) / 2
}

/// `S(v)`.
pub fn skew_from_vec(v: &DVector<f64>, m: usize) -> DMatrix<f64> {
    let mut s = DMatrix::zeros(m, m);
    for (k, (i, j)) in skew_pairs(m).into_iter().enumerate() {
        s[(i, j)] = v[k];
        s[(j, i)] = -v[k];
    }
    s
}

/// `S⁻¹` applied to the skew part of `a`.
pub fn vec_from_skew(a: &DMatrix<f64>) -> DVector<f64> {
    let pairs = skew_pairs(a.nrows());
    DVector::from_iterator(
        pairs.len(),
        pairs.iter().map(|&(i, j)| 0.5 * (a[(i, j)] - a[(j, i)])),
    )
}

/// Integer matrix `T` with `vec(S(x)) = T x` (column-major vec).
pub fn t_matrix(m: usize) -> DMatrix<f64> {
    let pairs = skew_pairs(m);
    let mut t = DMatrix::zeros(m * m, pairs.len());
    for (k, (i, j)) in pairs.into_iter().enumerate() {
        t[(i + j * m, k)] = 1.0;
        t[(j + i * m, k)] = -1.0;
    }
    t
}

#[derive(Clone, Debug, PartialEq)]
pub enum KvGain {
    Scalar(f64),
    /// One entry per skew pair.
    Diagonal(DVector<f64>),
    /// General SPD matrix on the skew coordinates.
    Full(DMatrix<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackerGains {
    pub k_u: DVector<f64>,
    pub k_v: KvGain,
}

impl TrackerGains {
    pub fn identity(m: usize) -> Self {
        Self {
            k_u: DVector::from_element(m, 1.0),
            k_v: KvGain::Scalar(1.0),
        }
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        if self.k_u.len() != m {
            return Err(Error::DimensionMismatch {
                what: "K_U",
                expected: m,
                got: self.k_u.len(),
            });
        }
        if self.k_u.iter().any(|k| !(*k > 0.0)) {
            return Err(Error::Invalid("K_U entries must be positive".into()));
        }
        let p = skew_dim(m);
        match &self.k_v {
            KvGain::Scalar(k) if !(*k > 0.0) => {
                Err(Error::Invalid("K_v must be positive".into()))
            }
            KvGain::Diagonal(d) if d.len() != p => Err(Error::DimensionMismatch {
                what: "K_v diagonal",
                expected: p,
                got: d.len(),
            }),
            KvGain::Diagonal(d) if d.iter().any(|k| !(*k > 0.0)) => {
                Err(Error::Invalid("K_v entries must be positive".into()))
            }
            KvGain::Full(k) if k.shape() != (p, p) => Err(Error::DimensionMismatch {
                what: "K_v",
                expected: p,
                got: k.nrows(),
            }),
            KvGain::Full(k) => {
                let asym = (k - k.transpose()).norm();
                if asym > 1e-12 * k.norm().max(1.0) || !crate::linalg::is_spd(k, 1e-12) {
                    Err(Error::Invalid("K_v must be symmetric positive definite".into()))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackerState {
    pub o: DMatrix<f64>,
    pub l: DVector<f64>,
}

impl TrackerState {
    pub fn identity(m: usize) -> Self {
        Self {
            o: DMatrix::identity(m, m),
            l: DVector::zeros(m),
        }
    }

    /// `O = I` and, for a nearly symmetric target with positive definite
    /// symmetric part, `L` from its eigenvalues (clamped away from zero),
    /// placed in the order of the target's diagonal. Otherwise `L = 0`.
    pub fn warm_start(kstar: &DMatrix<f64>) -> Self {
        let m = kstar.nrows();
        let scale = kstar.norm();
        let mut state = Self::identity(m);
        if scale == 0.0 || (kstar - kstar.transpose()).norm() > 1e-6 * scale {
            return state;
        }
        let ks = sym(kstar);
        let mut eig: Vec<f64> = ks.clone().symmetric_eigenvalues().iter().copied().collect();
        if eig.iter().any(|e| *e <= 0.0) {
            return state;
        }
        eig.sort_by(f64::total_cmp);
        let floor = 1e-6 * eig[m - 1];
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| ks[(a, a)].total_cmp(&ks[(b, b)]));
        for (rank, &i) in order.iter().enumerate() {
            state.l[i] = eig[rank].max(floor).ln();
        }
        state
    }

    pub fn dim(&self) -> usize {
        self.l.len()
    }

    pub fn orthogonality_error(&self) -> f64 {
        let m = self.dim();
        (self.o.transpose() * &self.o - DMatrix::<f64>::identity(m, m)).norm()
    }
}

/// `X = Oᵀ exp(L) O`.
pub fn x_of(state: &TrackerState) -> DMatrix<f64> {
    let mut eo = state.o.clone();
    for (i, mut row) in eo.row_iter_mut().enumerate() {
        row *= state.l[i].exp();
    }
    sym(&(state.o.transpose() * eo))
}

pub fn lyapunov_value(state: &TrackerState, kstar: &DMatrix<f64>) -> f64 {
    (kstar - x_of(state)).norm_squared()
}

/// The exogenous inputs `(U, v)`.
pub fn control_inputs(
    state: &TrackerState,
    kstar: &DMatrix<f64>,
    gains: &TrackerGains,
) -> (DVector<f64>, DVector<f64>) {
    let m = state.dim();
    let o = &state.o;
    let e = state.l.map(f64::exp);
    let x = x_of(state);
    let b1 = DMatrix::from_diagonal(&e) - o * kstar * o.transpose();
    let u = DVector::from_fn(m, |i, _| -gains.k_u[i] * b1[(i, i)] / e[i]);
    let b2 = &x * kstar.transpose() - kstar.transpose() * &x;
    let w = vec_from_skew(&b2);
    let v = apply_kv(&gains.k_v, &w);
    (u, v)
}

fn apply_kv(kv: &KvGain, w: &DVector<f64>) -> DVector<f64> {
    match kv {
        KvGain::Scalar(k) => w * *k,
        KvGain::Diagonal(d) => w.component_mul(d),
        KvGain::Full(k) => k * w,
    }
}

/// How `O` is advanced over one step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum OrthoUpdate {
    /// `O ← O expm(dt S(v))`, then a Newton-Schulz polar correction.
    #[default]
    Exponential,
    /// `O ← O (I + dt S(v))` followed by projection onto the orthogonal group.
    EulerProjection,
}

/// One fixed step.
pub fn step(state: &TrackerState, kstar: &DMatrix<f64>, gains: &TrackerGains, dt: f64) -> TrackerState {
    step_with(state, kstar, gains, dt, OrthoUpdate::Exponential)
}

pub fn step_with(
    state: &TrackerState,
    kstar: &DMatrix<f64>,
    gains: &TrackerGains,
    dt: f64,
    update: OrthoUpdate,
) -> TrackerState {
    let m = state.dim();
    let (_, v) = control_inputs(state, kstar, gains);
    let s = skew_from_vec(&v, m) * dt;
    let o = match update {
        OrthoUpdate::Exponential => polar_guard(&state.o * expm(&s)).0,
        OrthoUpdate::EulerProjection => {
            let o = &state.o * (DMatrix::identity(m, m) + s);
            let svd = o.svd(true, true);
            svd.u.unwrap() * svd.v_t.unwrap()
        }
    };
    TrackerState {
        o,
        l: advance_l(&state.o, &state.l, kstar, &gains.k_u, dt),
    }
}

/// Smallest eigenvalue kept for `X`, relative to `max(1, |K*|)`.
pub const EIGENVALUE_FLOOR: f64 = 1e-12;

/// Exact solution of `L̇ = U` over one step with `O` frozen: in terms of
/// `y_i = exp(l_i)` the law reads `ẏ_i = −K_U,i (y_i − c_i)` with
/// `c = diag(O K* Oᵀ)`, so `y_i` relaxes toward `c_i` without overshoot.
/// When `c_i ≤ 0`, `y_i` would reach zero in finite time; it is held at
/// [`EIGENVALUE_FLOOR`] instead.
fn advance_l(o: &DMatrix<f64>, l: &DVector<f64>, kstar: &DMatrix<f64>, ku: &DVector<f64>, dt: f64) -> DVector<f64> {
    let ok = o * kstar;
    let floor = EIGENVALUE_FLOOR * kstar.norm().max(1.0);
    DVector::from_fn(l.len(), |i, _| {
        let c = ok.row(i).dot(&o.row(i));
        relax(l[i], c, ku[i] * dt, floor)
    })
}

fn relax(l: f64, c: f64, rate_dt: f64, floor: f64) -> f64 {
    let y0 = l.exp();
    let y = c + (y0 - c) * (-rate_dt).exp();
    // Never below the floor, nor below a start that already was.
    let y = y.max(floor.min(y0));
    if y > 0.0 { y.ln() } else { l }
}

/// One Newton-Schulz iteration toward the polar factor; returns the
/// orthogonality error measured before the correction.
fn polar_guard<D: Dim>(o: OMatrix<f64, D, D>) -> (OMatrix<f64, D, D>, f64)
where
    DefaultAllocator: Allocator<D, D>,
{
    let (r, c) = o.shape_generic();
    let id = OMatrix::<f64, D, D>::identity_generic(r, c);
    let g = o.transpose() * &o;
    let err = (&g - &id).norm();
    if err <= f64::EPSILON {
        return (o, err);
    }
    let fix = (id * 3.0 - g) * 0.5;
    (o * fix, err)
}

#[derive(Clone, Debug)]
pub struct TrackOptions {
    pub dt: f64,
    pub max_steps: usize,
    /// Relative stall tolerance; zero disables stall detection.
    pub stall_tol: f64,
    pub monotone_guard: bool,
    pub update: OrthoUpdate,
    /// Keep every `record_stride`-th step in the trace (0 keeps none).
    pub record_stride: usize,
}

impl Default for TrackOptions {
    fn default() -> Self {
        Self {
            dt: 1e-2,
            max_steps: 100_000,
            stall_tol: 1e-12,
            monotone_guard: true,
            update: OrthoUpdate::Exponential,
            record_stride: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrackStatus {
    /// `V` reached zero to rounding.
    Converged,
    /// `V` stopped changing before reaching zero.
    Stalled,
    MaxSteps,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackRecord {
    pub step: usize,
    pub v: f64,
    pub orth_err: f64,
}

#[derive(Clone, Debug)]
pub struct TrackResult {
    pub state: TrackerState,
    pub x: DMatrix<f64>,
    pub status: TrackStatus,
    pub steps: usize,
    pub v0: f64,
    pub v_final: f64,
    /// Largest per-step increase of `V` relative to `1 + V`.
    pub max_increase: f64,
    pub max_orth_error: f64,
    pub trace: Vec<TrackRecord>,
}

impl TrackResult {
    pub fn is_monotone(&self) -> bool {
        self.max_increase <= MONOTONE_TOL
    }

    /// Trace as CSV with header `step,V,orth_err`.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("step,V,orth_err\n");
        for r in &self.trace {
            out.push_str(&format!(
                "{},{},{}\n",
                r.step,
                crate::io::fmt_f64(r.v),
                crate::io::fmt_f64(r.orth_err)
            ));
        }
        out
    }
}

/// `V` counts as zero below this fraction of `1 + V(0)`.
const CONVERGED_REL: f64 = 1e-24;

/// Runs the tracker until `V` vanishes, stalls, or `max_steps` is reached.
pub fn track(
    kstar: &DMatrix<f64>,
    init: &TrackerState,
    gains: &TrackerGains,
    opts: &TrackOptions,
) -> Result<TrackResult> {
    let m = kstar.nrows();
    if kstar.ncols() != m {
        return Err(Error::DimensionMismatch {
            what: "target columns",
            expected: m,
            got: kstar.ncols(),
        });
    }
    if init.dim() != m || init.o.shape() != (m, m) {
        return Err(Error::DimensionMismatch {
            what: "tracker state",
            expected: m,
            got: init.dim(),
        });
    }
    gains.validate(m)?;
    if !(opts.dt > 0.0) {
        return Err(Error::Invalid("tracker step must be positive".into()));
    }
    macro_rules! fixed {
        ($($n:literal)*) => {
            match m {
                $($n => run::<Const<$n>>(Const::<$n>, kstar, init, gains, opts),)*
                _ => run::<Dyn>(Dyn(m), kstar, init, gains, opts),
            }
        };
    }
    Ok(fixed!(1 2 3 4 5 6 7 8 9 10 11 12 13 14))
}

/// Working copy of the problem in a fixed or dynamic dimension.
struct Kernel<'a, D: Dim>
where
    DefaultAllocator: Allocator<D, D> + Allocator<D>,
{
    dim: D,
    kstar: OMatrix<f64, D, D>,
    ks: OMatrix<f64, D, D>,
    ku: OVector<f64, D>,
    kv: &'a KvGain,
    floor: f64,
    pairs: Vec<(usize, usize)>,
    update: OrthoUpdate,
}

struct Point<D: Dim>
where
    DefaultAllocator: Allocator<D, D> + Allocator<D>,
{
    o: OMatrix<f64, D, D>,
    l: OVector<f64, D>,
    x: OMatrix<f64, D, D>,
    v: f64,
    orth_err: f64,
}

impl<D: Dim> Kernel<'_, D>
where
    DefaultAllocator: Allocator<D, D> + Allocator<D>,
{
    fn point(&self, o: OMatrix<f64, D, D>, l: OVector<f64, D>, orth_err: f64) -> Point<D> {
        let mut eo = o.clone();
        for (i, mut row) in eo.row_iter_mut().enumerate() {
            row *= l[i].exp();
        }
        let mut x = o.transpose() * eo;
        for &(i, j) in &self.pairs {
            let a = 0.5 * (x[(i, j)] + x[(j, i)]);
            x[(i, j)] = a;
            x[(j, i)] = a;
        }
        let v = (&self.kstar - &x).norm_squared();
        Point { o, l, x, v, orth_err }
    }

    fn advance(&self, p: &Point<D>, dt: f64) -> Point<D> {
        let n = self.dim.value();
        // diag(O K* Oᵀ) from the rows of O K*.
        let ok = &p.o * &self.kstar;
        let mut l = p.l.clone();
        for i in 0..n {
            l[i] = relax(p.l[i], ok.row(i).dot(&p.o.row(i)), self.ku[i] * dt, self.floor);
        }
        // (B2 − B2ᵀ)/2 = X K_s − K_s X with K_s the symmetric part of K*.
        let xk = &p.x * &self.ks;
        let mut s = OMatrix::<f64, D, D>::zeros_generic(self.dim, self.dim);
        match self.kv {
            KvGain::Scalar(k) => {
                for &(i, j) in &self.pairs {
                    let w = k * (xk[(i, j)] - xk[(j, i)]);
                    s[(i, j)] = dt * w;
                    s[(j, i)] = -dt * w;
                }
            }
            KvGain::Diagonal(d) => {
                for (k, &(i, j)) in self.pairs.iter().enumerate() {
                    let w = d[k] * (xk[(i, j)] - xk[(j, i)]);
                    s[(i, j)] = dt * w;
                    s[(j, i)] = -dt * w;
                }
            }
            KvGain::Full(kv) => {
                let w = DVector::from_iterator(
                    self.pairs.len(),
                    self.pairs.iter().map(|&(i, j)| xk[(i, j)] - xk[(j, i)]),
                );
                let v = kv * w;
                for (k, &(i, j)) in self.pairs.iter().enumerate() {
                    s[(i, j)] = dt * v[k];
                    s[(j, i)] = -dt * v[k];
                }
            }
        }
        let (o, orth_err) = match self.update {
            OrthoUpdate::Exponential => {
                if s.amax() == 0.0 {
                    polar_guard(p.o.clone())
                } else {
                    polar_guard(&p.o * expm(&s))
                }
            }
            OrthoUpdate::EulerProjection => {
                let id = OMatrix::<f64, D, D>::identity_generic(self.dim, self.dim);
                let o = &p.o * (&id + s);
                let err = (o.transpose() * &o - id).norm();
                let dyn_o = DMatrix::from_iterator(n, n, o.iter().copied());
                let svd = dyn_o.svd(true, true);
                let proj = svd.u.unwrap() * svd.v_t.unwrap();
                let back = OMatrix::<f64, D, D>::from_iterator_generic(self.dim, self.dim, proj.iter().copied());
                (back, err)
            }
        };
        self.point(o, l, orth_err)
    }

    /// One step with the monotone guard: on an increase of `V` the step is
    /// split in two guarded halves, down to `GUARD_MAX_DEPTH` levels.
    fn guarded(&self, p: &Point<D>, dt: f64, depth: u32) -> Point<D> {
        let next = self.advance(p, dt);
        if next.v <= p.v + 1e-14 * (1.0 + p.v) || depth >= GUARD_MAX_DEPTH {
            return next;
        }
        let half = self.guarded(p, 0.5 * dt, depth + 1);
        self.guarded(&half, 0.5 * dt, depth + 1)
    }
}

fn run<D: Dim>(
    dim: D,
    kstar: &DMatrix<f64>,
    init: &TrackerState,
    gains: &TrackerGains,
    opts: &TrackOptions,
) -> TrackResult
where
    DefaultAllocator: Allocator<D, D> + Allocator<D>,
{
    let m = dim.value();
    let conv = |k: &DMatrix<f64>| OMatrix::<f64, D, D>::from_iterator_generic(dim, dim, k.iter().copied());
    let kernel = Kernel {
        dim,
        kstar: conv(kstar),
        ks: conv(&sym(kstar)),
        ku: OVector::<f64, D>::from_iterator_generic(dim, Const::<1>, gains.k_u.iter().copied()),
        kv: &gains.k_v,
        floor: EIGENVALUE_FLOOR * kstar.norm().max(1.0),
        pairs: skew_pairs(m),
        update: opts.update,
    };
    let init_o = conv(&init.o);
    let init_err = {
        let id = OMatrix::<f64, D, D>::identity_generic(dim, dim);
        (init_o.transpose() * &init_o - id).norm()
    };
    let mut p = kernel.point(
        init_o,
        OVector::<f64, D>::from_iterator_generic(dim, Const::<1>, init.l.iter().copied()),
        init_err,
    );
    let v0 = p.v;
    let zero = CONVERGED_REL * (1.0 + v0);
    let mut trace = Vec::new();
    let record = |trace: &mut Vec<TrackRecord>, step: usize, p: &Point<D>| {
        if opts.record_stride > 0 && step.is_multiple_of(opts.record_stride) {
            trace.push(TrackRecord {
                step,
                v: p.v,
                orth_err: p.orth_err,
            });
        }
    };
    record(&mut trace, 0, &p);
    let mut status = TrackStatus::MaxSteps;
    let mut steps = 0;
    let mut max_increase: f64 = 0.0;
    let mut max_orth = p.orth_err;
    let mut quiet = 0usize;
    if p.v <= zero {
        status = TrackStatus::Converged;
    } else {
        while steps < opts.max_steps {
            let next = if opts.monotone_guard {
                kernel.guarded(&p, opts.dt, 0)
            } else {
                kernel.advance(&p, opts.dt)
            };
            steps += 1;
            max_increase = max_increase.max((next.v - p.v) / (1.0 + p.v));
            max_orth = max_orth.max(next.orth_err);
            let change = (next.v - p.v).abs();
            p = next;
            record(&mut trace, steps, &p);
            if p.v <= zero {
                status = TrackStatus::Converged;
                break;
            }
            if opts.stall_tol > 0.0 && change < opts.stall_tol * p.v {
                quiet += 1;
                if quiet >= STALL_WINDOW {
                    status = TrackStatus::Stalled;
                    break;
                }
            } else {
                quiet = 0;
            }
        }
    }
    if opts.record_stride > 0 && trace.last().is_some_and(|r| r.step != steps) {
        trace.push(TrackRecord {
            step: steps,
            v: p.v,
            orth_err: p.orth_err,
        });
    }
    let state = TrackerState {
        o: DMatrix::from_iterator(m, m, p.o.iter().copied()),
        l: DVector::from_iterator(m, p.l.iter().copied()),
    };
    let x = DMatrix::from_iterator(m, m, p.x.iter().copied());
    TrackResult {
        state,
        x,
        status,
        steps,
        v0,
        v_final: p.v,
        max_increase,
        max_orth_error: max_orth,
        trace,
    }
}
