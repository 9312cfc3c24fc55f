//! Exact solution of the soft-margin SVM dual for tiny problems.
//!
//! The problem solved is the one the trainer solves: hinge loss, box
//! constraints `0 <= a_i <= C`, the bias folded into the kernel as a
//! constant feature `1` (so no equality constraint). Every split of the
//! points into at-lower-bound / free / at-upper-bound is tried; free
//! multipliers come from the linear system the stationarity condition gives,
//! and the split is accepted when all KKT conditions hold.

const EPS: f64 = 1e-9;

pub struct Separator {
    pub w: Vec<f64>,
    pub b: f64,
}

impl Separator {
    pub fn score(&self, x: &[f64]) -> f64 {
        self.w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.b
    }
}

fn kernel(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() + 1.0
}

/// Gaussian elimination with partial pivoting; `None` when singular.
fn solve_linear(mut a: Vec<Vec<f64>>, mut rhs: Vec<f64>) -> Option<Vec<f64>> {
    let n = rhs.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot);
        rhs.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            rhs[row] -= f * rhs[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (rhs[row] - s) / a[row][row];
    }
    Some(x)
}

pub fn solve(points: &[Vec<f64>], labels: &[f64], c: f64) -> Option<Separator> {
    let n = points.len();
    assert!(n <= 10, "enumeration is exponential");
    let q: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| labels[i] * labels[j] * kernel(&points[i], &points[j]))
                .collect()
        })
        .collect();
    let total = 3usize.pow(n as u32);
    for code in 0..total {
        // 0 = lower bound, 1 = free, 2 = upper bound
        let state: Vec<usize> = (0..n).map(|i| code / 3usize.pow(i as u32) % 3).collect();
        let free: Vec<usize> = (0..n).filter(|&i| state[i] == 1).collect();
        let mut alpha: Vec<f64> = state.iter().map(|&s| if s == 2 { c } else { 0.0 }).collect();
        if !free.is_empty() {
            let a: Vec<Vec<f64>> = free
                .iter()
                .map(|&i| free.iter().map(|&j| q[i][j]).collect())
                .collect();
            let rhs: Vec<f64> = free
                .iter()
                .map(|&i| 1.0 - (0..n).filter(|&j| state[j] == 2).map(|j| q[i][j] * c).sum::<f64>())
                .collect();
            let Some(sol) = solve_linear(a, rhs) else {
                continue;
            };
            if sol.iter().any(|&v| v < -EPS || v > c + EPS) {
                continue;
            }
            for (k, &i) in free.iter().enumerate() {
                alpha[i] = sol[k];
            }
        }
        // gradient of the dual objective: 1 - (Q a)_i = 1 - y_i f(x_i)
        let ok = (0..n).all(|i| {
            let g = 1.0 - (0..n).map(|j| q[i][j] * alpha[j]).sum::<f64>();
            match state[i] {
                0 => g <= 1e-7,
                2 => g >= -1e-7,
                _ => true,
            }
        });
        if ok {
            let dim = points[0].len();
            let mut w = vec![0.0; dim];
            let mut b = 0.0;
            for i in 0..n {
                for d in 0..dim {
                    w[d] += alpha[i] * labels[i] * points[i][d];
                }
                b += alpha[i] * labels[i];
            }
            return Some(Separator { w, b });
        }
    }
    None
}
