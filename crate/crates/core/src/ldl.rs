//! Sparse `L D L^T` factorization without numerical pivoting.
//!
//! Works for SPD matrices under any ordering and for the saddle-point
//! matrices of this crate under [`saddle_ordering`], which eliminates every
//! pressure unknown only after all of its velocity neighbours. Complex
//! matrices are factorized as complex symmetric (`A = L D L^T`, no
//! conjugation), which is what shifted resolvent systems need.

use crate::error::{Error, Result};
use crate::sparse::{CsrMatrix, Scalar};

const NONE: usize = usize::MAX;

/// Relative pivot threshold below which the factorization reports breakdown.
pub const PIVOT_TOLERANCE: f64 = 1e-14;

/// Approximate minimum degree ordering of the symmetric pattern of `a`.
/// Returns `perm` with `perm[new] = old`.
pub fn amd_ordering<T: Scalar>(a: &CsrMatrix<T>) -> Result<Vec<usize>> {
    amd_ordering_subset(a, a.rows)
}

/// AMD restricted to the leading `n` rows/columns of `a`.
fn amd_ordering_subset<T: Scalar>(a: &CsrMatrix<T>, n: usize) -> Result<Vec<usize>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut ap = Vec::with_capacity(n + 1);
    let mut ai = Vec::new();
    ap.push(0usize);
    for i in 0..n {
        let mut row: Vec<usize> = a.row(i).map(|(j, _)| j).filter(|&j| j < n).collect();
        row.push(i);
        row.sort_unstable();
        row.dedup();
        ai.extend(row);
        ap.push(ai.len());
    }
    let control = amd::Control::default();
    let (p, _, _) = amd::order::<usize>(n, &ap, &ai, &control).map_err(|s| Error::Ordering(format!("{s:?}")))?;
    Ok(p)
}

/// Ordering for a saddle matrix laid out as `[velocity | pressure | multiplier?]`.
///
/// Velocities follow AMD; each pressure is placed right after the last of
/// its velocity neighbours. With a mean multiplier the multiplier goes
/// immediately before the final pressure so every leading block stays
/// nonsingular despite the constant-pressure kernel of `B^T`.
pub fn saddle_ordering<T: Scalar>(
    a: &CsrMatrix<T>,
    n_velocity: usize,
    n_pressure: usize,
    has_multiplier: bool,
) -> Result<Vec<usize>> {
    let n_core = n_velocity + n_pressure;
    let expected = n_core + usize::from(has_multiplier);
    if a.rows != expected {
        return Err(Error::DimensionMismatch { expected, got: a.rows });
    }
    let amd = amd_ordering_subset(a, n_core)?;
    let mut pos = vec![0usize; n_core];
    for (k, &old) in amd.iter().enumerate() {
        pos[old] = k;
    }
    // pressure -> AMD position of its last velocity neighbour
    let mut after: Vec<Vec<usize>> = vec![Vec::new(); n_core];
    let mut orphans = Vec::new();
    for p in n_velocity..n_core {
        let last = a.row(p).filter(|&(j, _)| j < n_velocity).map(|(j, _)| pos[j]).max();
        match last {
            Some(k) => after[k].push(p),
            None => orphans.push(p),
        }
    }
    let mut order = Vec::with_capacity(expected);
    for &old in &amd {
        if old < n_velocity {
            order.push(old);
            let k = pos[old];
            let mut ps = std::mem::take(&mut after[k]);
            ps.sort_by_key(|&p| pos[p]);
            order.extend(ps);
        }
    }
    order.extend(orphans);
    if has_multiplier {
        let mult = n_core;
        if n_pressure == 0 {
            order.push(mult);
        } else {
            let last = order.pop().expect("non-empty");
            order.push(mult);
            order.push(last);
        }
    }
    debug_assert_eq!(order.len(), expected);
    Ok(order)
}

/// Numeric `L D L^T` factor of `P A P^T`.
#[derive(Debug, Clone)]
pub struct LdlFactor<T> {
    n: usize,
    perm: Vec<usize>,
    lp: Vec<usize>,
    li: Vec<usize>,
    lx: Vec<T>,
    d: Vec<T>,
    d_inv: Vec<T>,
}

impl<T: Scalar> LdlFactor<T> {
    /// Factorize with an AMD ordering.
    pub fn new(a: &CsrMatrix<T>) -> Result<Self> {
        let perm = amd_ordering(a)?;
        Self::with_ordering(a, perm)
    }

    /// Factorize symmetric `a` (both triangles stored) under `perm[new] = old`.
    pub fn with_ordering(a: &CsrMatrix<T>, perm: Vec<usize>) -> Result<Self> {
        let n = a.rows;
        if a.cols != n || perm.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: perm.len() });
        }
        let mut iperm = vec![NONE; n];
        for (new, &old) in perm.iter().enumerate() {
            if old >= n || iperm[old] != NONE {
                return Err(Error::Ordering("invalid permutation".into()));
            }
            iperm[old] = new;
        }
        // upper triangle of P A P^T in CSC
        let mut col_count = vec![0usize; n + 1];
        for i in 0..n {
            for (j, _) in a.row(i) {
                let (r, c) = (iperm[i], iperm[j]);
                if r <= c {
                    col_count[c + 1] += 1;
                }
            }
        }
        for c in 0..n {
            col_count[c + 1] += col_count[c];
        }
        let ap = col_count.clone();
        let mut next = col_count;
        let nnz = ap[n];
        let mut ai = vec![0usize; nnz];
        let mut ax = vec![T::zero(); nnz];
        for i in 0..n {
            for (j, v) in a.row(i) {
                let (r, c) = (iperm[i], iperm[j]);
                if r <= c {
                    ai[next[c]] = r;
                    ax[next[c]] = v;
                    next[c] += 1;
                }
            }
        }
        let scale = a.max_abs().max(f64::MIN_POSITIVE);

        // elimination tree and column counts
        let mut etree = vec![NONE; n];
        let mut lnz = vec![0usize; n];
        let mut work = vec![NONE; n];
        for j in 0..n {
            work[j] = j;
            for p in ap[j]..ap[j + 1] {
                let mut i = ai[p];
                while i != j && work[i] != j {
                    if etree[i] == NONE {
                        etree[i] = j;
                    }
                    lnz[i] += 1;
                    work[i] = j;
                    i = etree[i];
                }
            }
        }
        let mut lp = vec![0usize; n + 1];
        for i in 0..n {
            lp[i + 1] = lp[i] + lnz[i];
        }
        let total = lp[n];
        let mut li = vec![0usize; total];
        let mut lx = vec![T::zero(); total];
        let mut d = vec![T::zero(); n];
        let mut d_inv = vec![T::zero(); n];

        let mut y_vals = vec![T::zero(); n];
        let mut y_idx = vec![0usize; n];
        let mut elim = vec![0usize; n];
        let mut used = vec![false; n];
        let mut next_space: Vec<usize> = lp[..n].to_vec();

        for k in 0..n {
            let mut n_y = 0usize;
            d[k] = T::zero();
            for p in ap[k]..ap[k + 1] {
                let b = ai[p];
                if b == k {
                    d[k] += ax[p];
                    continue;
                }
                y_vals[b] += ax[p];
                if !used[b] {
                    used[b] = true;
                    elim[0] = b;
                    let mut n_e = 1usize;
                    let mut nx = etree[b];
                    while nx != NONE && nx < k {
                        if used[nx] {
                            break;
                        }
                        used[nx] = true;
                        elim[n_e] = nx;
                        n_e += 1;
                        nx = etree[nx];
                    }
                    while n_e > 0 {
                        n_e -= 1;
                        y_idx[n_y] = elim[n_e];
                        n_y += 1;
                    }
                }
            }
            for t in (0..n_y).rev() {
                let c = y_idx[t];
                let slot = next_space[c];
                let yc = y_vals[c];
                for q in lp[c]..slot {
                    let r = li[q];
                    y_vals[r] -= lx[q] * yc;
                }
                let l = yc * d_inv[c];
                li[slot] = k;
                lx[slot] = l;
                d[k] -= yc * l;
                next_space[c] += 1;
                y_vals[c] = T::zero();
                used[c] = false;
            }
            let threshold = PIVOT_TOLERANCE * scale;
            if !d[k].is_finite() || d[k].modulus() <= threshold {
                return Err(Error::FactorizationBreakdown {
                    pivot: k,
                    row: perm[k],
                    value: d[k].modulus(),
                    threshold,
                });
            }
            d_inv[k] = T::one() / d[k];
        }
        Ok(Self { n, perm, lp, li, lx, d, d_inv })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz_l(&self) -> usize {
        self.lx.len()
    }

    /// Pivots of `D` in elimination order.
    pub fn pivots(&self) -> &[T] {
        &self.d
    }

    pub fn solve(&self, b: &[T]) -> Vec<T> {
        assert_eq!(b.len(), self.n);
        let mut x: Vec<T> = self.perm.iter().map(|&old| b[old]).collect();
        for i in 0..self.n {
            let xi = x[i];
            for q in self.lp[i]..self.lp[i + 1] {
                x[self.li[q]] -= self.lx[q] * xi;
            }
        }
        for i in 0..self.n {
            x[i] *= self.d_inv[i];
        }
        for i in (0..self.n).rev() {
            let mut xi = x[i];
            for q in self.lp[i]..self.lp[i + 1] {
                xi -= self.lx[q] * x[self.li[q]];
            }
            x[i] = xi;
        }
        let mut out = vec![T::zero(); self.n];
        for (new, &old) in self.perm.iter().enumerate() {
            out[old] = x[new];
        }
        out
    }

    /// Solve followed by iterative refinement against `a` until the residual
    /// stops improving or `max_steps` is reached.
    pub fn solve_refined(&self, a: &CsrMatrix<T>, b: &[T], max_steps: usize) -> Vec<T> {
        let mut x = self.solve(b);
        let mut best = residual_norm(a, &x, b);
        for _ in 0..max_steps {
            if best == 0.0 {
                break;
            }
            let ax = a.mul_vec(&x);
            let r: Vec<T> = b.iter().zip(&ax).map(|(bi, ai)| *bi - *ai).collect();
            let dx = self.solve(&r);
            let cand: Vec<T> = x.iter().zip(&dx).map(|(xi, di)| *xi + *di).collect();
            let res = residual_norm(a, &cand, b);
            if res < best {
                let gain = best / res.max(f64::MIN_POSITIVE);
                x = cand;
                best = res;
                if gain < 2.0 {
                    break;
                }
            } else {
                break;
            }
        }
        x
    }
}

impl LdlFactor<f64> {
    /// Number of positive and negative pivots (Sylvester inertia).
    pub fn inertia(&self) -> (usize, usize) {
        let pos = self.d.iter().filter(|&&v| v > 0.0).count();
        (pos, self.n - pos)
    }
}

fn residual_norm<T: Scalar>(a: &CsrMatrix<T>, x: &[T], b: &[T]) -> f64 {
    let ax = a.mul_vec(x);
    b.iter().zip(&ax).map(|(bi, ai)| (*bi - *ai).modulus()).fold(0.0, f64::max)
}
