//! Householder least squares with limited column pivoting.
//!
//! Columns whose norm, after projecting out the columns already accepted,
//! falls below `tol` times their original norm are treated as aliased and
//! skipped. Accepted columns keep their original order, so collinear columns
//! are always dropped from the end of the design.

pub(crate) struct LeastSquares {
    pub coefficients: Vec<f64>,
    pub aliased: Vec<bool>,
}

/// Solves `min_b sum_i (sqrt_w[i] * (z[i] - x[i,] b))^2` for a column-major `n x p` matrix.
pub(crate) fn weighted_least_squares(
    x: &[f64],
    n: usize,
    p: usize,
    sqrt_w: &[f64],
    z: &[f64],
    tol: f64,
) -> LeastSquares {
    debug_assert_eq!(x.len(), n * p);
    let mut a: Vec<f64> = Vec::with_capacity(n * p);
    for j in 0..p {
        let col = &x[j * n..(j + 1) * n];
        a.extend(col.iter().zip(sqrt_w).map(|(v, s)| v * s));
    }
    let mut b: Vec<f64> = z.iter().zip(sqrt_w).map(|(v, s)| v * s).collect();
    let norms: Vec<f64> = (0..p).map(|j| norm(&a[j * n..(j + 1) * n])).collect();

    let mut aliased = vec![false; p];
    let mut kept: Vec<usize> = Vec::with_capacity(p);
    let mut v = vec![0.0; n];

    for c in 0..p {
        let k = kept.len();
        if k >= n {
            aliased[c] = true;
            continue;
        }
        let resid = norm(&a[c * n + k..(c + 1) * n]);
        if norms[c] == 0.0 || resid <= tol * norms[c] {
            aliased[c] = true;
            continue;
        }
        // Householder vector for rows k..n of column c.
        let head = a[c * n + k];
        let alpha = if head >= 0.0 { -resid } else { resid };
        for i in k..n {
            v[i] = a[c * n + i];
        }
        v[k] -= alpha;
        let vnorm2: f64 = v[k..n].iter().map(|t| t * t).sum();
        if vnorm2 > 0.0 {
            for d in (c + 1)..p {
                reflect(&mut a[d * n..(d + 1) * n], &v, k, vnorm2);
            }
            reflect(&mut b, &v, k, vnorm2);
        }
        a[c * n + k] = alpha;
        for i in (k + 1)..n {
            a[c * n + i] = 0.0;
        }
        kept.push(c);
    }

    // Back substitution on the upper-triangular block of kept columns.
    let r = kept.len();
    let mut sol = vec![0.0; r];
    for i in (0..r).rev() {
        let mut s = b[i];
        for j in (i + 1)..r {
            s -= a[kept[j] * n + i] * sol[j];
        }
        sol[i] = s / a[kept[i] * n + i];
    }
    let mut coefficients = vec![0.0; p];
    for (i, &c) in kept.iter().enumerate() {
        coefficients[c] = sol[i];
    }
    LeastSquares {
        coefficients,
        aliased,
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|t| t * t).sum::<f64>().sqrt()
}

fn reflect(col: &mut [f64], v: &[f64], k: usize, vnorm2: f64) {
    let s: f64 = (k..col.len()).map(|i| v[i] * col[i]).sum();
    let f = 2.0 * s / vnorm2;
    for i in k..col.len() {
        col[i] -= f * v[i];
    }
}
