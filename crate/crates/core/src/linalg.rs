//! Small dense helpers for dimension 2 and 3.

/// Determinant of a row-major `d x d` matrix, `d` in {1, 2, 3}.
pub fn det(m: &[f64], d: usize) -> f64 {
    match d {
        1 => m[0],
        2 => m[0] * m[3] - m[1] * m[2],
        3 => {
            m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) + m[2] * (m[3] * m[7] - m[4] * m[6])
        }
        _ => panic!("det: unsupported dimension {d}"),
    }
}

/// Inverse of a row-major `d x d` matrix. Returns `None` when singular.
pub fn inverse(m: &[f64], d: usize) -> Option<Vec<f64>> {
    let dt = det(m, d);
    if dt == 0.0 || !dt.is_finite() {
        return None;
    }
    let inv = match d {
        1 => vec![1.0 / m[0]],
        2 => vec![m[3] / dt, -m[1] / dt, -m[2] / dt, m[0] / dt],
        3 => {
            let c = |r0: usize, c0: usize, r1: usize, c1: usize| {
                m[r0 * 3 + c0] * m[r1 * 3 + c1] - m[r0 * 3 + c1] * m[r1 * 3 + c0]
            };
            vec![
                c(1, 1, 2, 2) / dt,
                -c(0, 1, 2, 2) / dt,
                c(0, 1, 1, 2) / dt,
                -c(1, 0, 2, 2) / dt,
                c(0, 0, 2, 2) / dt,
                -c(0, 0, 1, 2) / dt,
                c(1, 0, 2, 1) / dt,
                -c(0, 0, 2, 1) / dt,
                c(0, 0, 1, 1) / dt,
            ]
        }
        _ => return None,
    };
    Some(inv)
}

/// Solves `a x = b` for symmetric positive semidefinite `a` (row major,
/// `n x n`) by Cholesky with pivots below `tol` treated as zero.
pub fn cholesky_solve(a: &[f64], b: &[f64], n: usize, tol: f64) -> Vec<f64> {
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut dj = a[j * n + j];
        for k in 0..j {
            dj -= l[j * n + k] * l[j * n + k];
        }
        if dj <= tol {
            continue;
        }
        let dj = dj.sqrt();
        l[j * n + j] = dj;
        for i in j + 1..n {
            let mut v = a[i * n + j];
            for k in 0..j {
                v -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = v / dj;
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        if l[i * n + i] == 0.0 {
            continue;
        }
        let mut v = b[i];
        for k in 0..i {
            v -= l[i * n + k] * y[k];
        }
        y[i] = v / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        if l[i * n + i] == 0.0 {
            continue;
        }
        let mut v = y[i];
        for k in i + 1..n {
            v -= l[k * n + i] * x[k];
        }
        x[i] = v / l[i * n + i];
    }
    x
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_roundtrip_3d() {
        let m = [2.0, 1.0, 0.5, -1.0, 3.0, 0.0, 0.25, 0.0, 1.5];
        let inv = inverse(&m, 3).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                let v: f64 = (0..3).map(|k| m[r * 3 + k] * inv[k * 3 + c]).sum();
                let e = if r == c { 1.0 } else { 0.0 };
                assert!((v - e).abs() < 1e-14);
            }
        }
    }
}
