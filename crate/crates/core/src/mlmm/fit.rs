//! Maximum likelihood by expectation-conditional-maximization.
//!
//! The basic map takes the GLS update of `β` given `(D, R)`, then one EM
//! update of `(D, R)` given `β`; neither step decreases the likelihood.
//! The map is accelerated by squared extrapolation (SQUAREM), keeping an
//! extrapolated point only when it beats the plain EM step. After a few such
//! cycles the fit switches to L-BFGS in log-Cholesky coordinates of `(D, R)`,
//! with the score read off the same E-step moments.
//!
//! Every observed day shares one design row `x_d` across biomarkers, so all
//! per-patient Gram matrices are Kronecker sums over missingness patterns
//! and the data enter only through per-pattern sufficient statistics.

use std::collections::{BTreeMap, VecDeque};

use nalgebra::{DMatrix, DVector};

use super::{Coefficient, FitDiagnostics, FitMode, MlmmFit, FIT_FORMAT_VERSION, MIN_STRATUM};
use crate::cohort::{CohortDataset, PatientRecord};
use crate::error::{Error, Result};
use crate::linalg;
use crate::transforms::{check_rank, DesignSpec, TimeAxis};

#[derive(Clone, Debug, PartialEq)]
pub struct FitOptions {
    pub max_iter: usize,
    /// Relative change in log-likelihood that counts as converged.
    pub tol: f64,
    pub min_stratum: usize,
    pub keep_trace: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { max_iter: 500, tol: 1e-8, min_stratum: MIN_STRATUM, keep_trace: false }
    }
}

/// Sufficient statistics of one patient's days sharing a missingness pattern.
struct PatternStats {
    mask: usize,
    n: usize,
    sxx: DMatrix<f64>,
    /// `Σ y_d x_d'` with unobserved entries of `y_d` set to zero (`K × p`).
    syx: DMatrix<f64>,
    syy: DMatrix<f64>,
}

struct Subject {
    patterns: Vec<PatternStats>,
    n_obs: usize,
}

/// Quantities derived from `R` for one pattern.
struct PatternR {
    /// `R_OO^{-1}` padded with zeros to `K × K`.
    rinv: DMatrix<f64>,
    logdet: f64,
    /// Maps observed residuals to the full `K`-vector of conditional means.
    a: DMatrix<f64>,
    /// Conditional covariance of the unobserved residuals, padded.
    s: DMatrix<f64>,
    obs: Vec<usize>,
}

fn pattern_r(r: &DMatrix<f64>, mask: usize) -> Result<PatternR> {
    let k = r.nrows();
    let obs: Vec<usize> = (0..k).filter(|j| mask & (1 << j) != 0).collect();
    let mis: Vec<usize> = (0..k).filter(|j| mask & (1 << j) == 0).collect();
    let r_oo = r.select_rows(&obs).select_columns(&obs);
    let chol = linalg::cholesky(&r_oo)?;
    let r_oo_inv = chol.inverse();
    let mut rinv = DMatrix::zeros(k, k);
    for (a, &i) in obs.iter().enumerate() {
        for (b, &j) in obs.iter().enumerate() {
            rinv[(i, j)] = r_oo_inv[(a, b)];
        }
    }
    let mut amat = DMatrix::zeros(k, obs.len());
    for (a, &i) in obs.iter().enumerate() {
        amat[(i, a)] = 1.0;
    }
    let mut s = DMatrix::zeros(k, k);
    if !mis.is_empty() {
        let r_mo = r.select_rows(&mis).select_columns(&obs);
        let reg = &r_mo * &r_oo_inv;
        let cond = r.select_rows(&mis).select_columns(&mis) - &reg * r_mo.transpose();
        for (a, &i) in mis.iter().enumerate() {
            for b in 0..obs.len() {
                amat[(i, b)] = reg[(a, b)];
            }
            for (b, &j) in mis.iter().enumerate() {
                s[(i, j)] = cond[(a, b)];
            }
        }
    }
    Ok(PatternR { rinv, logdet: linalg::chol_logdet(&chol), a: amat, s, obs })
}

/// `target[(k*a + i, l*b + j)] += c[(k, l)] * block[(i, j)]`.
fn add_kron(target: &mut DMatrix<f64>, c: &DMatrix<f64>, block: &DMatrix<f64>) {
    let (a, b) = block.shape();
    for k in 0..c.nrows() {
        for l in 0..c.ncols() {
            let ckl = c[(k, l)];
            if ckl == 0.0 {
                continue;
            }
            for j in 0..b {
                for i in 0..a {
                    target[(k * a + i, l * b + j)] += ckl * block[(i, j)];
                }
            }
        }
    }
}

fn subject_stats(patient: &PatientRecord, axis: TimeAxis, spec: &DesignSpec) -> Subject {
    let k = spec.num_biomarkers();
    let p = spec.p();
    let mut by_mask: BTreeMap<usize, PatternStats> = BTreeMap::new();
    let mut n_obs = 0;
    for day in 1..=patient.last_day() {
        let mut mask = 0usize;
        let mut y = DVector::zeros(k);
        for kk in 0..k {
            if let Some(v) = patient.value(kk, day) {
                mask |= 1 << kk;
                y[kk] = v;
                n_obs += 1;
            }
        }
        if mask == 0 {
            continue;
        }
        let x = DVector::from_vec(spec.row(axis.time(day), &patient.covariates, &patient.baseline));
        let st = by_mask.entry(mask).or_insert_with(|| PatternStats {
            mask,
            n: 0,
            sxx: DMatrix::zeros(p, p),
            syx: DMatrix::zeros(k, p),
            syy: DMatrix::zeros(k, k),
        });
        st.n += 1;
        st.sxx.ger(1.0, &x, &x, 1.0);
        st.syx.ger(1.0, &y, &x, 1.0);
        st.syy.ger(1.0, &y, &y, 1.0);
    }
    Subject { patterns: by_mask.into_values().collect(), n_obs }
}

/// Per-subject Gram blocks given `R`.
struct Grams {
    xrx: DMatrix<f64>,
    zrx: DMatrix<f64>,
    zrz: DMatrix<f64>,
    xry: DVector<f64>,
    yry: f64,
    logdet_r: f64,
}

fn grams(s: &Subject, pr: &BTreeMap<usize, PatternR>, k: usize, p: usize, q: usize) -> Grams {
    let mut g = Grams {
        xrx: DMatrix::zeros(k * p, k * p),
        zrx: DMatrix::zeros(k * q, k * p),
        zrz: DMatrix::zeros(k * q, k * q),
        xry: DVector::zeros(k * p),
        yry: 0.0,
        logdet_r: 0.0,
    };
    for st in &s.patterns {
        let r = &pr[&st.mask];
        add_kron(&mut g.xrx, &r.rinv, &st.sxx);
        if q > 0 {
            add_kron(&mut g.zrx, &r.rinv, &st.sxx.rows(0, q).into_owned());
            add_kron(&mut g.zrz, &r.rinv, &st.sxx.view((0, 0), (q, q)).into_owned());
        }
        let w = &r.rinv * &st.syx;
        for kk in 0..k {
            for j in 0..p {
                g.xry[kk * p + j] += w[(kk, j)];
            }
        }
        g.yry += (&r.rinv * &st.syy).trace();
        g.logdet_r += st.n as f64 * r.logdet;
    }
    g
}

fn zry(xry: &DVector<f64>, k: usize, p: usize, q: usize) -> DVector<f64> {
    DVector::from_fn(k * q, |i, _| xry[(i / q) * p + i % q])
}

/// Posterior covariance of `b` (`H C^{-1} H`) and `log det C`, with `H = D^{1/2}`.
fn posterior_cov(h: &DMatrix<f64>, zrz: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    let n = h.nrows();
    let c = DMatrix::identity(n, n) + h * zrz * h;
    let chol = linalg::cholesky(&c)?;
    let mut v = h * chol.solve(h);
    linalg::symmetrize(&mut v);
    Ok((v, linalg::chol_logdet(&chol)))
}

struct Problem {
    subjects: Vec<Subject>,
    k: usize,
    p: usize,
    q: usize,
    n_obs: usize,
    n_days: usize,
}

#[derive(Clone)]
struct Theta {
    d: DMatrix<f64>,
    r: DMatrix<f64>,
}

impl Theta {
    fn sub(&self, o: &Theta) -> Theta {
        Theta { d: &self.d - &o.d, r: &self.r - &o.r }
    }

    fn add(&self, o: &Theta) -> Theta {
        Theta { d: &self.d + &o.d, r: &self.r + &o.r }
    }

    fn scale(&self, c: f64) -> Theta {
        Theta { d: &self.d * c, r: &self.r * c }
    }

    fn norm(&self) -> f64 {
        (self.d.norm_squared() + self.r.norm_squared()).sqrt()
    }

    fn projected(&self) -> Theta {
        Theta { d: linalg::project_psd(&self.d, 0.0), r: linalg::project_psd(&self.r, 1e-10) }
    }
}

/// Profiled state at `theta`: the GLS `β`, the log-likelihood, and the EM image of `theta`.
struct Evaluation {
    theta: Theta,
    beta: DVector<f64>,
    info: DMatrix<f64>,
    ll: f64,
    next: Theta,
    /// `Σ E[b b']` over subjects and `Σ E[e e']` over days, before averaging.
    s_d: DMatrix<f64>,
    s_r: DMatrix<f64>,
}

impl Problem {
    fn pattern_rs(&self, r: &DMatrix<f64>) -> Result<BTreeMap<usize, PatternR>> {
        let mut out = BTreeMap::new();
        for s in &self.subjects {
            for st in &s.patterns {
                if !out.contains_key(&st.mask) {
                    out.insert(st.mask, pattern_r(r, st.mask)?);
                }
            }
        }
        Ok(out)
    }

    /// GLS estimate of `β` and its information matrix `Σ X'V^{-1}X`.
    fn gls(&self, theta: &Theta) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let (k, p, q) = (self.k, self.p, self.q);
        let pr = self.pattern_rs(&theta.r)?;
        let h = linalg::sqrt_psd(&theta.d);
        let mut info = DMatrix::zeros(k * p, k * p);
        let mut rhs = DVector::zeros(k * p);
        for s in &self.subjects {
            let g = grams(s, &pr, k, p, q);
            info += &g.xrx;
            rhs += &g.xry;
            if q > 0 {
                let (vb, _) = posterior_cov(&h, &g.zrz)?;
                let t = g.zrx.transpose() * &vb;
                info -= &t * &g.zrx;
                rhs -= &t * zry(&g.xry, k, p, q);
            }
        }
        linalg::symmetrize(&mut info);
        let chol = linalg::cholesky(&info)?;
        Ok((chol.solve(&rhs), info))
    }

    /// Log-likelihood at `(β, θ)` and the EM update of `θ`.
    fn em_step(&self, beta: &DVector<f64>, theta: &Theta) -> Result<(f64, Theta, DMatrix<f64>, DMatrix<f64>)> {
        let (k, p, q) = (self.k, self.p, self.q);
        let pr = self.pattern_rs(&theta.r)?;
        let h = linalg::sqrt_psd(&theta.d);
        let mut ll = -0.5 * self.n_obs as f64 * (2.0 * std::f64::consts::PI).ln();
        let mut d_acc = DMatrix::zeros(k * q, k * q);
        let mut r_acc = DMatrix::zeros(k, k);
        for s in &self.subjects {
            let g = grams(s, &pr, k, p, q);
            let xb = &g.xrx * beta;
            let rrr = g.yry - 2.0 * beta.dot(&g.xry) + beta.dot(&xb);
            let (vb, bhat, quad, logdet_c) = if q > 0 {
                let (vb, logdet_c) = posterior_cov(&h, &g.zrz)?;
                let w = zry(&g.xry, k, p, q) - &g.zrx * beta;
                let bhat = &vb * &w;
                (vb, bhat.clone(), rrr - w.dot(&bhat), logdet_c)
            } else {
                (DMatrix::zeros(0, 0), DVector::zeros(0), rrr, 0.0)
            };
            ll -= 0.5 * (g.logdet_r + logdet_c + quad);
            if q > 0 {
                d_acc += &vb;
                d_acc.ger(1.0, &bhat, &bhat, 1.0);
            }
            // subject-specific coefficients: column k is β_k plus the padded b_k
            let gamma = DMatrix::from_fn(p, k, |j, kk| beta[kk * p + j] + if j < q { bhat[kk * q + j] } else { 0.0 });
            for st in &s.patterns {
                let r = &pr[&st.mask];
                let cross = &st.syx * &gamma;
                let mut e = &st.syy - &cross - cross.transpose() + gamma.transpose() * &st.sxx * &gamma;
                if q > 0 {
                    let szz = st.sxx.view((0, 0), (q, q));
                    for a in &r.obs {
                        for b in &r.obs {
                            let v = vb.view((a * q, b * q), (q, q));
                            e[(*a, *b)] += v.component_mul(&szz).sum();
                        }
                    }
                }
                let e_oo = e.select_rows(&r.obs).select_columns(&r.obs);
                r_acc += &r.a * e_oo * r.a.transpose() + &r.s * st.n as f64;
            }
        }
        let n = self.subjects.len() as f64;
        let d = if q > 0 { linalg::project_psd(&(&d_acc / n), 0.0) } else { d_acc.clone() };
        let r = linalg::project_psd(&(&r_acc / self.n_days as f64), 1e-10);
        Ok((ll, Theta { d, r }, d_acc, r_acc))
    }

    fn evaluate(&self, theta: Theta) -> Result<Evaluation> {
        let (beta, info) = self.gls(&theta)?;
        let (ll, next, s_d, s_r) = self.em_step(&beta, &theta)?;
        if !ll.is_finite() {
            return Err(Error::NonFiniteInput);
        }
        Ok(Evaluation { theta, beta, info, ll, next, s_d, s_r })
    }

    /// Score of the profiled log-likelihood in log-Cholesky coordinates.
    ///
    /// By Fisher's identity the score in `D` is `½ D⁻¹(S_D − nD)D⁻¹` with `S_D`
    /// the E-step moment sum, and likewise for `R`; the chain rule through
    /// `D = LL'` gives `2 G L`, scaled by `L_ii` on the log diagonal.
    fn score(&self, e: &Evaluation, factors: &[DMatrix<f64>; 2]) -> DVector<f64> {
        let mut out = Vec::new();
        let parts = [(&e.theta.d, &e.s_d, self.subjects.len()), (&e.theta.r, &e.s_r, self.n_days)];
        for ((m, s, n), l) in parts.into_iter().zip(factors) {
            let dim = m.nrows();
            if dim == 0 {
                continue;
            }
            let linv = l.solve_lower_triangular(&DMatrix::identity(dim, dim)).expect("positive diagonal");
            let grad = linv.transpose() * &linv * (s - m * n as f64) * linv.transpose();
            for j in 0..dim {
                for i in j..dim {
                    out.push(if i == j { grad[(i, i)] * l[(i, i)] } else { grad[(i, j)] });
                }
            }
        }
        DVector::from_vec(out)
    }

    /// Limited-memory BFGS ascent from `cur` with an Armijo backtracking search.
    fn quasi_newton(
        &self,
        mut cur: Evaluation,
        mut iterations: usize,
        options: &FitOptions,
        trace: &mut Vec<f64>,
    ) -> Result<(Evaluation, usize, bool)> {
        let dims = [cur.theta.d.nrows(), cur.theta.r.nrows()];
        let factors = [chol_factor(&cur.theta.d), chol_factor(&cur.theta.r)];
        let mut x = pack(&factors);
        // re-evaluate at the packed point, which may carry a tiny jitter
        cur = self.evaluate(unpack(&x, dims).0)?;
        let mut g = self.score(&cur, &factors);
        let mut memory: VecDeque<(DVector<f64>, DVector<f64>)> = VecDeque::new();
        while iterations < options.max_iter {
            iterations += 1;
            let mut dir = lbfgs_direction(&g, &memory);
            if dir.dot(&g) <= 0.0 {
                memory.clear();
                dir = g.clone();
            }
            let slope = dir.dot(&g);
            let mut step = if memory.is_empty() { 1.0_f64.min(0.1 / g.amax().max(1e-300)) } else { 1.0 };
            let mut accepted = None;
            for _ in 0..LINE_SEARCH_STEPS {
                let xn = &x + &dir * step;
                let (theta, fn_) = unpack(&xn, dims);
                if let Ok(e) = self.evaluate(theta) {
                    if e.ll >= cur.ll + ARMIJO * step * slope {
                        accepted = Some((xn, fn_, e));
                        break;
                    }
                }
                step *= 0.5;
            }
            // no ascent left at working precision
            let Some((xn, fn_, next)) = accepted else {
                return Ok((cur, iterations, true));
            };
            let gn = self.score(&next, &fn_);
            let s = &xn - &x;
            let y = &g - &gn;
            if s.dot(&y) > 1e-12 * s.norm() * y.norm() {
                memory.push_back((s, y));
                if memory.len() > LBFGS_MEMORY {
                    memory.pop_front();
                }
            }
            let rel = (next.ll - cur.ll) / cur.ll.abs().max(1.0);
            (x, g, cur) = (xn, gn, next);
            trace.push(cur.ll);
            if rel.abs() < options.tol {
                return Ok((cur, iterations, true));
            }
        }
        Ok((cur, iterations, false))
    }

    /// OLS per biomarker; `R` and `D` start diagonal at fractions of the residual variance.
    fn start(&self) -> Result<(DVector<f64>, Theta)> {
        let (k, p, q) = (self.k, self.p, self.q);
        let mut beta = DVector::zeros(k * p);
        let mut var = vec![0.0; k];
        for kk in 0..k {
            let mut gram = DMatrix::zeros(p, p);
            let mut rhs = DVector::zeros(p);
            let mut yy = 0.0;
            let mut n = 0usize;
            for s in &self.subjects {
                for st in s.patterns.iter().filter(|st| st.mask & (1 << kk) != 0) {
                    gram += &st.sxx;
                    rhs += st.syx.row(kk).transpose();
                    yy += st.syy[(kk, kk)];
                    n += st.n;
                }
            }
            let b = linalg::cholesky(&gram)?.solve(&rhs);
            let rss = yy - 2.0 * b.dot(&rhs) + b.dot(&(&gram * &b));
            var[kk] = (rss / n.max(1) as f64).max(1e-8);
            beta.rows_mut(kk * p, p).copy_from(&b);
        }
        let r = DMatrix::from_diagonal(&DVector::from_fn(k, |i, _| 0.5 * var[i]));
        let d = DMatrix::from_diagonal(&DVector::from_fn(k * q, |i, _| {
            let scale = if i % q == 0 { 0.5 } else { 0.05 };
            scale * var[i / q]
        }));
        Ok((beta, Theta { d, r }))
    }

    fn check_rank(&self, spec: &DesignSpec) -> Result<()> {
        let names = spec.block_column_names();
        let mut bad: Vec<String> = Vec::new();
        for kk in 0..self.k {
            let mut gram = DMatrix::zeros(self.p, self.p);
            for s in &self.subjects {
                for st in s.patterns.iter().filter(|st| st.mask & (1 << kk) != 0) {
                    gram += &st.sxx;
                }
            }
            if let Err(Error::RankDeficient(cols)) = check_rank(&gram, &names) {
                for c in cols {
                    if !bad.contains(&c) {
                        bad.push(c);
                    }
                }
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::RankDeficient(bad))
        }
    }
}

const SQUAREM_CYCLES: usize = 10;
const LBFGS_MEMORY: usize = 30;
const LINE_SEARCH_STEPS: usize = 40;
const ARMIJO: f64 = 1e-4;

/// Lower Cholesky factor; a boundary point gets the smallest diagonal jitter that works.
fn chol_factor(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let scale = (a.trace() / n.max(1) as f64).abs().max(1e-300);
    let mut jitter = 0.0;
    loop {
        let shifted = a + DMatrix::identity(n, n) * jitter;
        if let Some(c) = shifted.cholesky() {
            return c.l();
        }
        jitter = if jitter == 0.0 { 1e-10 * scale } else { jitter * 10.0 };
    }
}

fn pack(factors: &[DMatrix<f64>; 2]) -> DVector<f64> {
    let mut out = Vec::new();
    for l in factors {
        for j in 0..l.ncols() {
            for i in j..l.nrows() {
                out.push(if i == j { l[(i, i)].ln() } else { l[(i, j)] });
            }
        }
    }
    DVector::from_vec(out)
}

fn unpack(x: &DVector<f64>, dims: [usize; 2]) -> (Theta, [DMatrix<f64>; 2]) {
    let mut it = x.iter();
    let mut factor = |n: usize| {
        let mut l = DMatrix::zeros(n, n);
        for j in 0..n {
            for i in j..n {
                let v = *it.next().expect("coordinate count");
                l[(i, j)] = if i == j { v.exp() } else { v };
            }
        }
        l
    };
    let factors = [factor(dims[0]), factor(dims[1])];
    let square = |l: &DMatrix<f64>| {
        let mut m = l * l.transpose();
        linalg::symmetrize(&mut m);
        m
    };
    (Theta { d: square(&factors[0]), r: square(&factors[1]) }, factors)
}

/// `H g` by the two-loop recursion, with `memory` holding `(Δx, −Δscore)` pairs.
fn lbfgs_direction(g: &DVector<f64>, memory: &VecDeque<(DVector<f64>, DVector<f64>)>) -> DVector<f64> {
    let mut q = g.clone();
    let mut alphas = Vec::with_capacity(memory.len());
    for (s, y) in memory.iter().rev() {
        let a = s.dot(&q) / s.dot(y);
        q -= y * a;
        alphas.push(a);
    }
    if let Some((s, y)) = memory.back() {
        q *= s.dot(y) / y.dot(y);
    }
    for ((s, y), a) in memory.iter().zip(alphas.into_iter().rev()) {
        let b = y.dot(&q) / s.dot(y);
        q += s * (a - b);
    }
    q
}

/// Fits the mixed model to the (already transformed) patients selected by `mode`.
///
/// Hitting `max_iter` is not an error: the last iterate is returned with
/// `diagnostics.converged == false`.
pub fn fit(dataset: &CohortDataset, mode: FitMode, spec: &DesignSpec, options: &FitOptions) -> Result<MlmmFit> {
    let selected = mode.select(dataset);
    if let FitMode::Retrospective(m) = mode {
        if selected.len() < options.min_stratum {
            return Err(Error::InsufficientStratum {
                stratum: m.name().to_string(),
                got: selected.len(),
                needed: options.min_stratum,
            });
        }
    }
    if selected.is_empty() {
        return Err(Error::InvalidConfig("no patients to fit".into()));
    }
    if spec.num_biomarkers() != dataset.schema.num_biomarkers() {
        return Err(Error::DimensionMismatch("design spec and dataset disagree on biomarkers".into()));
    }
    let subjects: Vec<Subject> = selected.iter().map(|(p, axis)| subject_stats(p, *axis, spec)).collect();
    let n_obs = subjects.iter().map(|s| s.n_obs).sum();
    let n_days = subjects.iter().flat_map(|s| &s.patterns).map(|st| st.n).sum();
    let problem = Problem { subjects, k: spec.num_biomarkers(), p: spec.p(), q: spec.q(), n_obs, n_days };
    problem.check_rank(spec)?;

    let (_, theta0) = problem.start()?;
    let mut cur = problem.evaluate(theta0)?;
    let mut trace = vec![cur.ll];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < options.max_iter.min(SQUAREM_CYCLES) {
        iterations += 1;
        // one SQUAREM cycle: two EM maps, an extrapolated candidate, and a
        // fall back to the plain double EM step whenever the candidate is worse
        let e1 = problem.evaluate(cur.next.clone())?;
        let (t0, t1, t2) = (&cur.theta, &e1.theta, &e1.next);
        let r = t1.sub(t0);
        let v = t2.sub(t1).sub(&r);
        let (nr, nv) = (r.norm(), v.norm());
        let candidate = if nv > 0.0 && nr > 0.0 {
            let alpha = (-nr / nv).min(-1.0);
            t0.sub(&r.scale(2.0 * alpha)).add(&v.scale(alpha * alpha)).projected()
        } else {
            t2.clone()
        };
        let next = match problem.evaluate(candidate) {
            Ok(e) if e.ll >= e1.ll => e,
            _ => problem.evaluate(t2.clone())?,
        };
        let rel = (next.ll - cur.ll) / cur.ll.abs().max(1.0);
        cur = next;
        trace.push(cur.ll);
        if rel.abs() < options.tol {
            converged = true;
            break;
        }
    }
    // EM crawls along weakly identified directions of D; quasi-Newton
    // steps on the same objective finish the ascent
    if !converged && iterations < options.max_iter {
        (cur, iterations, converged) = problem.quasi_newton(cur, iterations, options, &mut trace)?;
    }
    let Evaluation { theta, beta, info, ll, .. } = cur;

    let cov = linalg::cholesky(&info)?.inverse();
    let coefficients = spec
        .column_names()
        .into_iter()
        .enumerate()
        .map(|(i, name)| Coefficient { name, estimate: beta[i], se: cov[(i, i)].max(0.0).sqrt() })
        .collect();
    Ok(MlmmFit {
        version: FIT_FORMAT_VERSION,
        mode,
        spec: spec.clone(),
        coefficients,
        d: theta.d,
        r: theta.r,
        diagnostics: FitDiagnostics {
            loglik: ll,
            iterations,
            converged,
            n_patients: problem.subjects.len(),
            n_observations: n_obs,
            trace: if options.keep_trace { trace } else { Vec::new() },
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{BiomarkerId, CohortSchema, CovariateDef, CovariateValue, Outcome};
    use crate::mlmm::marginal_joint;
    use crate::transforms::{build_design, SplineBasis};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn schema(k: usize) -> CohortSchema {
        CohortSchema {
            biomarkers: (0..k).map(|i| BiomarkerId { index: i, name: format!("b{i}"), unit: String::new() }).collect(),
            covariates: vec![CovariateDef::real("x1"), CovariateDef::real("x2")],
            horizon: 8,
        }
    }

    /// Small random-intercept data with some missing cells.
    fn toy(seed: u64, n: usize, missing: bool) -> (CohortDataset, DesignSpec) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nrm = Normal::new(0.0, 1.0).unwrap();
        let sch = schema(2);
        let mut patients = Vec::new();
        for i in 0..n {
            let x1 = nrm.sample(&mut rng);
            let x2 = nrm.sample(&mut rng);
            let y0 = vec![nrm.sample(&mut rng), nrm.sample(&mut rng)];
            let mut p = PatientRecord::new(
                &format!("p{i}"),
                vec![CovariateValue::Real(x1), CovariateValue::Real(x2)],
                y0.clone(),
                8,
                Outcome::Censored,
            );
            let b = [0.8 * nrm.sample(&mut rng), 0.5 * nrm.sample(&mut rng)];
            for d in 1..=8u32 {
                let e0 = 0.6 * nrm.sample(&mut rng);
                let e1 = 0.5 * e0 + 0.4 * nrm.sample(&mut rng);
                let t = d as f64 / 8.0;
                let v0 = 1.0 + 0.5 * t + 0.3 * x1 + 0.4 * y0[0] + b[0] + e0;
                let v1 = -0.5 + t - 0.2 * x2 + 0.3 * y0[1] + b[1] + e1;
                let drop = missing && (i + d as usize) % 5 == 0;
                p.set_value(0, d, Some(v0));
                p.set_value(1, d, if drop { None } else { Some(v1) });
            }
            patients.push(p);
        }
        let ds = CohortDataset::new(sch.clone(), patients).unwrap();
        let basis = SplineBasis::new(vec![3.0, 5.0], (1.0, 8.0)).unwrap();
        (ds, DesignSpec::new(basis, &sch.covariates, sch.biomarker_names()))
    }

    fn brute_loglik(fit: &MlmmFit, ds: &CohortDataset) -> f64 {
        ds.patients
            .iter()
            .map(|p| {
                let des = build_design(p, TimeAxis::Prospective, &fit.spec);
                let b = marginal_joint(fit, &des).unwrap();
                let y = DVector::from_iterator(des.cells.len(), des.cells.iter().map(|c| p.value(c.biomarker, c.day).unwrap()));
                linalg::gaussian_logpdf(&y, &b.mean, &b.cov).unwrap()
            })
            .sum()
    }

    #[test]
    fn loglik_matches_dense_computation_and_increases() {
        let (ds, spec) = toy(1, 60, true);
        let opts = FitOptions { keep_trace: true, ..FitOptions::default() };
        let fit = fit(&ds, FitMode::Prospective, &spec, &opts).unwrap();
        assert!(fit.diagnostics.converged);
        let dense = brute_loglik(&fit, &ds);
        assert!((dense - fit.diagnostics.loglik).abs() < 1e-6 * dense.abs(), "{dense} vs {}", fit.diagnostics.loglik);
        for w in fit.diagnostics.trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-10 * w[0].abs(), "loglik decreased: {} -> {}", w[0], w[1]);
        }
        assert!(linalg::min_eigenvalue(&fit.d) >= -1e-10);
        assert!(linalg::min_eigenvalue(&fit.r) > 0.0);
    }

    #[test]
    fn no_random_effects_on_complete_data_is_ols() {
        let (ds, mut spec) = toy(2, 40, false);
        spec.random_effects = false;
        let fit = fit(&ds, FitMode::Prospective, &spec, &FitOptions::default()).unwrap();
        let p = spec.p();
        for k in 0..2 {
            let mut x = Vec::new();
            let mut y = Vec::new();
            for pt in &ds.patients {
                for d in 1..=8 {
                    x.extend(spec.row(d as f64, &pt.covariates, &pt.baseline));
                    y.push(pt.value(k, d).unwrap());
                }
            }
            let x = DMatrix::from_row_slice(y.len(), p, &x);
            let y = DVector::from_vec(y);
            let ols = (x.transpose() * &x).cholesky().unwrap().solve(&(x.transpose() * y));
            for j in 0..p {
                assert!((ols[j] - fit.beta()[k * p + j]).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn duplicated_column_is_named() {
        let (mut ds, spec) = toy(3, 30, false);
        for p in &mut ds.patients {
            p.covariates[1] = p.covariates[0].clone();
        }
        match fit(&ds, FitMode::Prospective, &spec, &FitOptions::default()) {
            Err(Error::RankDeficient(cols)) => assert_eq!(cols, ["x2"]),
            other => panic!("unexpected {:?}", other.map(|f| f.diagnostics)),
        }
    }

    #[test]
    fn small_stratum_is_rejected() {
        let (ds, spec) = toy(4, 30, false);
        let err = fit(&ds, FitMode::Retrospective(crate::cohort::EventType::Death), &spec, &FitOptions::default()).unwrap_err();
        assert!(matches!(err, Error::InsufficientStratum { got: 0, .. }));
    }
}
