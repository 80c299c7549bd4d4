//! Independent reference computations used by the integration tests. Nothing
//! here calls into the library's linear algebra.

#![allow(dead_code)]

/// Row-major dense matrix as nested vectors.
pub type Dense = Vec<Vec<f64>>;

pub fn from_slice(rows: usize, cols: usize, data: &[f64]) -> Dense {
    (0..rows).map(|i| data[i * cols..(i + 1) * cols].to_vec()).collect()
}

pub fn transpose(a: &Dense) -> Dense {
    let (r, c) = (a.len(), a[0].len());
    (0..c).map(|j| (0..r).map(|i| a[i][j]).collect()).collect()
}

pub fn mul(a: &Dense, b: &Dense) -> Dense {
    let (r, k, c) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; c]; r];
    for i in 0..r {
        for j in 0..c {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

/// Gaussian elimination with partial pivoting; `a` square, `b` with any
/// number of right-hand columns.
pub fn solve(a: &Dense, b: &Dense) -> Dense {
    let n = a.len();
    let m = b[0].len();
    let mut aug: Dense = (0..n).map(|i| [a[i].clone(), b[i].clone()].concat()).collect();
    for col in 0..n {
        let p = (col..n).max_by(|&x, &y| aug[x][col].abs().total_cmp(&aug[y][col].abs())).unwrap();
        aug.swap(col, p);
        let piv = aug[col][col];
        assert!(piv.abs() > 1e-300, "singular system in oracle");
        for r in 0..n {
            if r != col {
                let f = aug[r][col] / piv;
                for c in col..n + m {
                    aug[r][c] -= f * aug[col][c];
                }
            }
        }
    }
    (0..n).map(|i| (0..m).map(|j| aug[i][n + j] / aug[i][i]).collect()).collect()
}

/// `a + Mᵀ (M Mᵀ)⁻¹ (B − M a)`: projection of `a` onto `{Z : M Z = B}`.
pub fn project_affine(m: &Dense, b: &Dense, a: &Dense) -> Dense {
    let ma = mul(m, a);
    let rhs: Dense = b.iter().zip(&ma).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p - q).collect()).collect();
    let gram = mul(m, &transpose(m));
    let lam = solve(&gram, &rhs);
    let corr = mul(&transpose(m), &lam);
    a.iter().zip(&corr).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

/// Basis of the null space of a full-row-rank `n × d` matrix whose leading
/// `n × n` block is invertible: one vector per free coordinate.
pub fn null_basis(m: &Dense) -> Vec<Vec<f64>> {
    let n = m.len();
    let d = m[0].len();
    let lead: Dense = m.iter().map(|r| r[..n].to_vec()).collect();
    let mut basis = Vec::new();
    for f in n..d {
        let rhs: Dense = m.iter().map(|r| vec![-r[f]]).collect();
        let x = solve(&lead, &rhs);
        let mut v = vec![0.0; d];
        for i in 0..n {
            v[i] = x[i][0];
        }
        v[f] = 1.0;
        basis.push(v);
    }
    basis
}

/// Solution of `M z = b` with the free coordinates set to zero.
pub fn particular(m: &Dense, b: &[f64]) -> Vec<f64> {
    let n = m.len();
    let d = m[0].len();
    let lead: Dense = m.iter().map(|r| r[..n].to_vec()).collect();
    let x = solve(&lead, &b.iter().map(|&v| vec![v]).collect::<Dense>());
    let mut z = vec![0.0; d];
    for i in 0..n {
        z[i] = x[i][0];
    }
    z
}

/// Minimizes a function of two variables by repeated grid refinement.
pub fn grid_min_2d(f: impl Fn(f64, f64) -> f64, center: (f64, f64), half_width: f64, rounds: usize) -> (f64, f64, f64) {
    let (mut cx, mut cy) = center;
    let mut w = half_width;
    let k = 40;
    let mut best = (f64::INFINITY, cx, cy);
    for _ in 0..rounds {
        for i in 0..=k {
            for j in 0..=k {
                let x = cx - w + 2.0 * w * i as f64 / k as f64;
                let y = cy - w + 2.0 * w * j as f64 / k as f64;
                let v = f(x, y);
                if v < best.0 {
                    best = (v, x, y);
                }
            }
        }
        cx = best.1;
        cy = best.2;
        w *= 8.0 / k as f64;
    }
    best
}

/// Squared distance from `anchor` to the closest point `p + Σ c_k v_k`,
/// found by grid search over a two-dimensional null space.
pub fn grid_distance_sq(p: &[f64], basis: &[Vec<f64>], anchor: &[f64]) -> f64 {
    assert_eq!(basis.len(), 2);
    let dist = |a: f64, b: f64| -> f64 {
        (0..p.len())
            .map(|i| {
                let v = p[i] + a * basis[0][i] + b * basis[1][i] - anchor[i];
                v * v
            })
            .sum()
    };
    // Each basis vector owns a unit coordinate, so the minimizer has |c| ≤ 2‖p − anchor‖.
    let scale: f64 = p.iter().zip(anchor).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt() * 10.0 + 1.0;
    grid_min_2d(dist, (0.0, 0.0), scale, 24).0
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

pub fn frob_dist_sq(a: &Dense, b: &Dense) -> f64 {
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y) * (x - y)).sum()
}
