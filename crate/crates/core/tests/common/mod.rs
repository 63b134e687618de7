//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use ndarray::{Array1, Array2};

/// Periodic convolution by direct summation, tap `(a, b)` shifting by
/// `(a - (kh-1)/2, b - (kw-1)/2)`.
pub fn brute_convolve(kernel: &Array2<f64>, x: &Array2<f64>) -> Array2<f64> {
    let (h, w) = x.dim();
    let (kh, kw) = kernel.dim();
    let (ca, cb) = ((kh - 1) / 2, (kw - 1) / 2);
    let mut out = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for a in 0..kh {
                for b in 0..kw {
                    let r = (i + h * kh + ca - a) % h;
                    let c = (j + w * kw + cb - b) % w;
                    acc += kernel[[a, b]] * x[[r, c]];
                }
            }
            out[[i, j]] = acc;
        }
    }
    out
}

/// Dense matrix of the periodic convolution on an `h x w` grid, built
/// column by column from impulses.
pub fn dense_circulant(kernel: &Array2<f64>, shape: (usize, usize)) -> Array2<f64> {
    let n = shape.0 * shape.1;
    let mut m = Array2::zeros((n, n));
    for col in 0..n {
        let mut e = Array2::zeros(shape);
        e[[col / shape.1, col % shape.1]] = 1.0;
        let resp = brute_convolve(kernel, &e);
        for (row, v) in resp.iter().enumerate() {
            m[[row, col]] = *v;
        }
    }
    m
}

/// Gaussian elimination with partial pivoting.
pub fn dense_solve(a: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let n = a.nrows();
    let mut m = a.clone();
    let mut x = b.clone();
    for k in 0..n {
        let p = (k..n)
            .max_by(|&i, &j| m[[i, k]].abs().total_cmp(&m[[j, k]].abs()))
            .unwrap();
        if p != k {
            for c in 0..n {
                m.swap([k, c], [p, c]);
            }
            x.swap(k, p);
        }
        let piv = m[[k, k]];
        assert!(piv.abs() > 1e-14, "singular system");
        for i in k + 1..n {
            let f = m[[i, k]] / piv;
            if f != 0.0 {
                for c in k..n {
                    m[[i, c]] -= f * m[[k, c]];
                }
                x[i] -= f * x[k];
            }
        }
    }
    for k in (0..n).rev() {
        let mut acc = x[k];
        for c in k + 1..n {
            acc -= m[[k, c]] * x[c];
        }
        x[k] = acc / m[[k, k]];
    }
    x
}

/// Pixel indices covered by every row of a design, enumerated from the
/// block definitions.
pub fn enumerate_footprints(blocks: &[(usize, usize, usize)], side: usize) -> Vec<Vec<usize>> {
    let mut rows = Vec::new();
    for &(f, s, n) in blocks {
        let mut starts = Vec::new();
        let mut p = 0;
        while p + f <= side {
            starts.push(p);
            p += s;
        }
        for _ in 0..n {
            for &r0 in &starts {
                for &c0 in &starts {
                    let mut fp = Vec::new();
                    for r in r0..r0 + f {
                        for c in c0..c0 + f {
                            fp.push(r * side + c);
                        }
                    }
                    rows.push(fp);
                }
            }
        }
    }
    rows
}

pub fn max_abs_diff(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// 1D total variation denoising on 16 samples: `A = I` on a `1 x 16` grid
/// and `L = lambda D` with `D` the forward difference.
pub fn tv_instance(lambda: f64) -> (Array1<f64>, Array2<f64>) {
    let clean = [
        0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0, -0.5, -0.5, -0.5, 0.3, 0.3, 0.3, 0.3,
    ];
    let noise = [
        0.12, -0.08, 0.05, -0.11, 0.07, 0.02, -0.09, 0.13, -0.04, 0.06, -0.1, 0.03, 0.09, -0.06, 0.01, -0.02,
    ];
    let z = Array1::from_iter(clean.iter().zip(&noise).map(|(c, n)| c + n));
    let mut l = Array2::zeros((15, 16));
    for i in 0..15 {
        l[[i, i]] = -lambda;
        l[[i, i + 1]] = lambda;
    }
    (z, l)
}

fn tv_objective(z: &Array1<f64>, l: &Array2<f64>, x: &Array1<f64>) -> f64 {
    let r = x - z;
    0.5 * r.dot(&r) + l.dot(x).iter().map(|v| v.abs()).sum::<f64>()
}

/// Best objective of subgradient descent with `1/sqrt(t)` steps on
/// `1/2 |x - z|^2 + |L x|_1`, followed by an exact solve on each fused
/// pattern of the best iterate: rows with `|L x| < delta` are held at zero
/// and the others at their sign, which leaves a linear KKT system.
pub fn subgradient_oracle(z: &Array1<f64>, l: &Array2<f64>, iters: usize) -> (f64, Array1<f64>) {
    let mut x = z.clone();
    let mut best = (tv_objective(z, l, &x), x.clone());
    for t in 1..=iters {
        let lx = l.dot(&x);
        let sign = lx.mapv(|v| {
            if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            }
        });
        let g = &x - z + l.t().dot(&sign);
        x = &x - &(g * (0.5 / (t as f64).sqrt()));
        let f = tv_objective(z, l, &x);
        if f < best.0 {
            best = (f, x.clone());
        }
    }

    let n = z.len();
    let seed_x = best.1.clone();
    let lx = l.dot(&seed_x);
    for delta in [1e-1, 3e-2, 1e-2, 3e-3, 1e-3, 1e-4, 1e-5, 1e-6] {
        let fused: Vec<usize> = (0..lx.len()).filter(|&i| lx[i].abs() < delta).collect();
        let mut rhs_x = z.clone();
        for i in 0..lx.len() {
            if lx[i].abs() >= delta {
                rhs_x -= &(&l.row(i) * lx[i].signum());
            }
        }
        let m = fused.len();
        let mut kkt = Array2::zeros((n + m, n + m));
        let mut rhs = Array1::zeros(n + m);
        for i in 0..n {
            kkt[[i, i]] = 1.0;
            rhs[i] = rhs_x[i];
        }
        for (k, &row) in fused.iter().enumerate() {
            for j in 0..n {
                kkt[[n + k, j]] = l[[row, j]];
                kkt[[j, n + k]] = l[[row, j]];
            }
        }
        let sol = dense_solve(&kkt, &rhs);
        let cand = sol.slice(ndarray::s![..n]).to_owned();
        let f = tv_objective(z, l, &cand);
        if f < best.0 {
            best = (f, cand);
        }
    }
    best
}
