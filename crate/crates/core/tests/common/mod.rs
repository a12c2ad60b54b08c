//! Test-only oracles. Nothing here calls into the library's numerical code.
#![allow(dead_code)]

use flat_core::model::{DecoderWeights, ModelConfig};
use nalgebra::DMatrix;

pub type Rows = Vec<Vec<f64>>;

pub fn to_rows(m: &DMatrix<f64>) -> Rows {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

pub fn from_rows(r: &Rows) -> DMatrix<f64> {
    let cols = r.first().map_or(0, |x| x.len());
    DMatrix::from_fn(r.len(), cols, |i, j| r[i][j])
}

/// Cyclic Jacobi eigenvalue iteration for a symmetric matrix. Returns
/// eigenvalues sorted descending and matching eigenvector columns.
pub fn jacobi_eigen(a: &Rows) -> (Vec<f64>, Rows) {
    let n = a.len();
    let mut a = a.clone();
    let mut v: Rows = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        let scale: f64 = (0..n).map(|i| a[i][i] * a[i][i]).sum::<f64>().max(1e-300);
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k][p];
                    let vkq = v[k][q];
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&x, &y| a[y][y].total_cmp(&a[x][x]));
    let vals = idx.iter().map(|&i| a[i][i]).collect();
    let vecs = (0..n).map(|r| idx.iter().map(|&c| v[r][c]).collect()).collect();
    (vals, vecs)
}

/// Squared singular values of `y` (eigenvalues of `yᵀy`) via Jacobi, sorted
/// descending and clamped at zero.
pub fn gram_spectrum(y: &DMatrix<f64>) -> Vec<f64> {
    let n = y.ncols();
    let rows = to_rows(y);
    let g: Rows = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| rows.iter().map(|r| r[i] * r[j]).sum())
                .collect()
        })
        .collect();
    jacobi_eigen(&g).0.into_iter().map(|x| x.max(0.0)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `x Wᵀ` with explicit loops.
fn linear(x: &Rows, w: &Rows) -> Rows {
    x.iter()
        .map(|row| w.iter().map(|wr| dot(row, wr)).collect())
        .collect()
}

fn rmsnorm(x: &Rows, g: &[f64], eps: f64) -> Rows {
    x.iter()
        .map(|row| {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            row.iter().zip(g).map(|(v, gi)| v * inv * gi).collect()
        })
        .collect()
}

pub struct NaiveOut {
    pub y: Rows,
    pub attn: Rows,
    /// per kv-head value projection
    pub v: Vec<Rows>,
    pub act: Rows,
}

/// Loop-based reference of the pre-norm causal decoder.
pub fn naive_decoder(w: &DecoderWeights, x: &Rows, c: &ModelConfig) -> NaiveOut {
    let n = x.len();
    let dh = c.d_head;
    let wq = to_rows(&w.w_q);
    let wk = to_rows(&w.w_k);
    let wv = to_rows(&w.w_v);
    let wo = to_rows(&w.w_o);
    let up = to_rows(&w.w_up);
    let down = to_rows(&w.w_down);
    let ga: Vec<f64> = w.rms_attn.iter().copied().collect();
    let gm: Vec<f64> = w.rms_mlp.iter().copied().collect();

    let xn = rmsnorm(x, &ga, c.norm_eps);
    let q = linear(&xn, &wq);
    let k = linear(&xn, &wk);
    let v = linear(&xn, &wv);
    let group = c.n_q_heads / c.n_kv_heads;

    let mut heads = vec![vec![0.0; c.n_q_heads * dh]; n];
    for h in 0..c.n_q_heads {
        let g = h / group;
        for i in 0..n {
            let logits: Vec<f64> = (0..=i)
                .map(|j| {
                    dot(&q[i][h * dh..(h + 1) * dh], &k[j][g * dh..(g + 1) * dh])
                        / (dh as f64).sqrt()
                })
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for d in 0..dh {
                heads[i][h * dh + d] = (0..=i).map(|j| e[j] / z * v[j][g * dh + d]).sum();
            }
        }
    }
    let attn = linear(&heads, &wo);
    let mid: Rows = x
        .iter()
        .zip(&attn)
        .map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + q).collect())
        .collect();
    let xm = rmsnorm(&mid, &gm, c.norm_eps);
    let act: Rows = linear(&xm, &up)
        .into_iter()
        .map(|r| r.into_iter().map(|z| z / (1.0 + (-z).exp())).collect())
        .collect();
    let mlp = linear(&act, &down);
    let y = mid
        .iter()
        .zip(&mlp)
        .map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + q).collect())
        .collect();
    let v_heads = (0..c.n_kv_heads)
        .map(|g| v.iter().map(|r| r[g * dh..(g + 1) * dh].to_vec()).collect())
        .collect();
    NaiveOut {
        y,
        attn,
        v: v_heads,
        act,
    }
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    (a - b).abs().max()
}

pub fn rel_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let base = b.norm().max(f64::MIN_POSITIVE);
    (a - b).norm() / base
}

/// Exhaustive enumeration of the feasible grid (sum equals the grid point
/// nearest `b`), minimising `‖w − target‖₂`.
pub fn brute_grid(target: &[f64], b: f64, step: f64) -> (Vec<f64>, f64) {
    let units = (1.0 / step).round() as usize;
    let goal = (b / step).round() as usize;
    let l = target.len();
    let mut best = (vec![], f64::INFINITY);
    let mut u = vec![0usize; l];
    loop {
        if u.iter().sum::<usize>() == goal {
            let w: Vec<f64> = u.iter().map(|&x| x as f64 * step).collect();
            let obj = w
                .iter()
                .zip(target)
                .map(|(a, t)| (a - t).powi(2))
                .sum::<f64>()
                .sqrt();
            if obj < best.1 {
                best = (w, obj);
            }
        }
        let mut i = 0;
        loop {
            if i == l {
                return best;
            }
            u[i] += 1;
            if u[i] <= units {
                break;
            }
            u[i] = 0;
            i += 1;
        }
    }
}

/// Gauss-Jordan elimination with partial pivoting: solves `a x = b`.
pub fn solve_dense(a: &Rows, b: &Rows) -> Rows {
    let n = a.len();
    let m = b[0].len();
    let mut aug: Rows = (0..n)
        .map(|i| a[i].iter().chain(b[i].iter()).cloned().collect())
        .collect();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&x, &y| aug[x][col].abs().total_cmp(&aug[y][col].abs()))
            .unwrap();
        aug.swap(col, piv);
        let p = aug[col][col];
        for v in aug[col].iter_mut() {
            *v /= p;
        }
        for row in 0..n {
            if row != col {
                let f = aug[row][col];
                if f != 0.0 {
                    for j in 0..n + m {
                        aug[row][j] -= f * aug[col][j];
                    }
                }
            }
        }
    }
    aug.into_iter().map(|r| r[n..].to_vec()).collect()
}
