//! Independent scalar reimplementations used as test oracles.

use attnsteer::model::AttentionStack;
use attnsteer::numcore::Tensor;

/// `(1 − inside / total)²` over a box given by its corners, cell centers
/// on the boundary counting as inside.
pub fn hard(a: &Tensor, [x0, y0, x1, y1]: [f64; 4]) -> f64 {
    let grid = a.rows();
    let (mut inside, mut total) = (0.0, 0.0);
    for row in 0..grid {
        for col in 0..grid {
            let cx = (col as f64 + 0.5) / grid as f64;
            let cy = (row as f64 + 0.5) / grid as f64;
            let v = a.get2(row, col);
            if x0 <= cx && cx <= x1 && y0 <= cy && cy <= y1 {
                inside += v;
            }
            total += v;
        }
    }
    (1.0 - inside / total) * (1.0 - inside / total)
}

pub fn distance(points: &[[f64; 2]], grid: usize, row: usize, col: usize) -> f64 {
    let cx = (col as f64 + 0.5) / grid as f64;
    let cy = (row as f64 + 0.5) / grid as f64;
    let mut best = f64::INFINITY;
    for p in points {
        let d2 = (p[0] - cx) * (p[0] - cx) + (p[1] - cy) * (p[1] - cy);
        if d2 < best {
            best = d2;
        }
    }
    best.sqrt()
}

pub fn soft(a: &Tensor, points: &[[f64; 2]], sigma: f64, normalized: bool) -> f64 {
    let grid = a.rows();
    let (mut num, mut den) = (0.0, 0.0);
    for row in 0..grid {
        for col in 0..grid {
            let d = distance(points, grid, row, col);
            let mut w = (-d * d / (2.0 * sigma * sigma)).exp();
            if !normalized {
                w /= sigma * (2.0 * std::f64::consts::PI).sqrt();
            }
            num += w * a.get2(row, col);
            den += a.get2(row, col);
        }
    }
    let r = if normalized { num / den } else { (num / den).clamp(0.0, 1.0) };
    (1.0 - r) * (1.0 - r)
}

/// Mean of `maps[l][h][r][j]` over the layer window, every head and the
/// given query rows, for each visual column `j`.
pub fn aggregate(stack: &AttentionStack, layers: std::ops::RangeInclusive<usize>, rows: &[usize]) -> Vec<f64> {
    let n_v = stack.layout.n_visual;
    let mut out = vec![0.0; n_v];
    for (j, o) in out.iter_mut().enumerate() {
        let mut s = 0.0;
        let mut count = 0.0;
        for l in layers.clone() {
            for map in &stack.maps[l] {
                for &r in rows {
                    s += map.get2(r, j);
                    count += 1.0;
                }
            }
        }
        *o = s / count;
    }
    out
}

/// The four bias-corrected moment equations, one coordinate at a time.
#[derive(Default)]
pub struct ScalarAdam {
    pub m: f64,
    pub v: f64,
    pub t: i32,
}

impl ScalarAdam {
    pub fn step(&mut self, p: f64, g: f64, lr: f64, b1: f64, b2: f64, eps: f64) -> f64 {
        self.t += 1;
        self.m = b1 * self.m + (1.0 - b1) * g;
        self.v = b2 * self.v + (1.0 - b2) * g * g;
        let m_hat = self.m / (1.0 - b1.powf(self.t as f64));
        let v_hat = self.v / (1.0 - b2.powf(self.t as f64));
        p - lr * m_hat / (v_hat.sqrt() + eps)
    }
}
