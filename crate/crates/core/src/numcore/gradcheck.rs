use super::tensor::Tensor;
use crate::par::{map_indexed, Exec};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Central-difference gradient of a scalar function:
/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every element `i`.
pub fn finite_difference_grad<F>(f: F, x: &Tensor, h: f64) -> Tensor
where
    F: Fn(&Tensor) -> f64 + Sync + Send,
{
    let idx: Vec<usize> = (0..x.len()).collect();
    let vals = finite_difference_at(&f, x, h, &idx, Exec::Sequential);
    Tensor::new(x.shape().to_vec(), vals).expect("same shape")
}

/// Central differences at selected flat coordinates only.
pub fn finite_difference_at<F>(f: &F, x: &Tensor, h: f64, coords: &[usize], exec: Exec) -> Vec<f64>
where
    F: Fn(&Tensor) -> f64 + Sync + Send,
{
    map_indexed(exec, coords.len(), |n| {
        let i = coords[n];
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        (f(&xp) - f(&xm)) / (2.0 * h)
    })
}

/// `|a − b| / max(|a|, |b|)`, defined as 0 when both are exactly zero.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs());
    if denom == 0.0 {
        0.0
    } else {
        (a - b).abs() / denom
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::new(vec![2, 3], vec![0.3, -1.0, 2.0, 5.0, 0.0, 1e-3]).unwrap();
        let g = finite_difference_grad(|t| t.sum(), &x, DEFAULT_STEP);
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn square_at_three() {
        let x = Tensor::scalar(3.0);
        let g = finite_difference_grad(|t| t.item() * t.item(), &x, DEFAULT_STEP);
        assert!((g.item() - 6.0).abs() < 1e-7);
    }
}
