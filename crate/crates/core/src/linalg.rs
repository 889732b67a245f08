//! Small dense and banded linear-algebra helpers.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Condition numbers above this are treated as numerically singular.
pub const SINGULAR_CONDITION: f64 = 1e12;

/// Nearest positive semi-definite matrix in Frobenius norm: negative
/// eigenvalues are clamped to zero.
pub fn project_psd(q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !q.is_square() {
        return Err(Error::dims(
            "matrix to project (columns)",
            q.nrows(),
            q.ncols(),
        ));
    }
    if (q - q.transpose()).amax() > 1e-10 * (1.0 + q.amax()) {
        return Err(Error::NotSymmetric("matrix to project"));
    }
    let eig = q.clone().symmetric_eigen();
    let clamped = eig.eigenvalues.map(|l| l.max(0.0));
    let v = &eig.eigenvectors;
    let p = v * DMatrix::from_diagonal(&clamped) * v.transpose();
    Ok((&p + p.transpose()) * 0.5)
}

pub fn singular_values(a: &DMatrix<f64>) -> DVector<f64> {
    a.clone().svd(false, false).singular_values
}

pub fn sigma_max(a: &DMatrix<f64>) -> f64 {
    singular_values(a).max()
}

pub fn sigma_min(a: &DMatrix<f64>) -> f64 {
    singular_values(a).min()
}

/// `σ_max / σ_min`, infinite for an exactly singular matrix.
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    let s = singular_values(a);
    let min = s.min();
    if min == 0.0 {
        f64::INFINITY
    } else {
        s.max() / min
    }
}

/// Errors with [`Error::Singular`] when `a` is too ill-conditioned to solve.
pub fn check_conditioning(a: &DMatrix<f64>) -> Result<()> {
    let condition = condition_number(a);
    if condition > SINGULAR_CONDITION || !condition.is_finite() {
        return Err(Error::Singular { condition });
    }
    Ok(())
}

/// Central finite differences `(f(x + h e_k) − f(x − h e_k)) / 2h`.
pub fn central_difference(
    f: impl Fn(&[f64]) -> Result<f64>,
    x: &[f64],
    h: f64,
) -> Result<DVector<f64>> {
    let mut out = DVector::zeros(x.len());
    let mut probe = x.to_vec();
    for k in 0..x.len() {
        probe[k] = x[k] + h;
        let plus = f(&probe)?;
        probe[k] = x[k] - h;
        let minus = f(&probe)?;
        probe[k] = x[k];
        out[k] = (plus - minus) / (2.0 * h);
    }
    Ok(out)
}

/// `‖a − b‖ / (1 + ‖b‖)`.
pub fn relative_error(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / (1.0 + b.norm())
}

/// Lower and upper bandwidths of the structurally nonzero entries.
pub fn bandwidths(entries: impl IntoIterator<Item = (usize, usize)>) -> (usize, usize) {
    entries.into_iter().fold((0, 0), |(kl, ku), (r, c)| {
        (kl.max(r.saturating_sub(c)), ku.max(c.saturating_sub(r)))
    })
}

/// LU factorization with partial pivoting restricted to a band, in place on
/// dense storage. Row interchanges widen the upper band to `kl + ku`.
#[derive(Clone, Debug)]
pub struct BandedLu {
    lu: DMatrix<f64>,
    pivots: Vec<usize>,
    kl: usize,
    ku: usize,
}

impl BandedLu {
    pub fn factor(mut a: DMatrix<f64>, kl: usize, ku: usize) -> Result<Self> {
        let n = a.nrows();
        if !a.is_square() {
            return Err(Error::dims("banded matrix (columns)", n, a.ncols()));
        }
        let scale = a.amax().max(f64::MIN_POSITIVE);
        let upper = kl + ku;
        let mut pivots = vec![0; n];
        for k in 0..n {
            let rmax = (k + kl).min(n - 1);
            let cmax = (k + upper).min(n - 1);
            let mut p = k;
            let mut best = a[(k, k)].abs();
            for i in k + 1..=rmax {
                let v = a[(i, k)].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if best <= 1e-14 * scale {
                return Err(Error::Singular {
                    condition: if best == 0.0 {
                        f64::INFINITY
                    } else {
                        scale / best
                    },
                });
            }
            pivots[k] = p;
            if p != k {
                for j in k..=cmax {
                    a.swap((k, j), (p, j));
                }
            }
            let d = a[(k, k)];
            for i in k + 1..=rmax {
                a[(i, k)] /= d;
            }
            for j in k + 1..=cmax {
                let akj = a[(k, j)];
                if akj != 0.0 {
                    for i in k + 1..=rmax {
                        let l = a[(i, k)];
                        a[(i, j)] -= l * akj;
                    }
                }
            }
        }
        Ok(Self {
            lu: a,
            pivots,
            kl,
            ku: upper,
        })
    }

    pub fn dim(&self) -> usize {
        self.lu.nrows()
    }

    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.dim();
        let lu = &self.lu;
        for k in 0..n {
            let p = self.pivots[k];
            if p != k {
                b.swap(k, p);
            }
            let bk = b[k];
            if bk != 0.0 {
                for i in k + 1..=(k + self.kl).min(n.saturating_sub(1)) {
                    b[i] -= lu[(i, k)] * bk;
                }
            }
        }
        for k in (0..n).rev() {
            let bk = b[k] / lu[(k, k)];
            b[k] = bk;
            if bk != 0.0 {
                for i in k.saturating_sub(self.ku)..k {
                    b[i] -= lu[(i, k)] * bk;
                }
            }
        }
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.solve_in_place(x.as_mut_slice());
        x
    }

    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        for mut col in x.column_iter_mut() {
            self.solve_in_place(col.as_mut_slice());
        }
        x
    }
}
