//! Central-difference gradient verification.
//!
//! The machinery perturbs f64 parameter arenas directly, so the probe
//! step is exact in the arithmetic being tested and the comparison
//! tolerances are meaningful. Callers provide a loss closure that runs
//! whatever forward pass they want verified.

use super::params::{GradStore, Params};
use crate::error::Result;

/// Probe step for central differences. With 64-bit accumulation the
/// truncation error at this epsilon sits orders of magnitude below the
/// acceptance tolerance.
pub const FD_EPSILON: f64 = 1e-3;
/// Maximum allowed relative error between analytic and FD gradients.
pub const FD_TOLERANCE: f64 = 1e-4;
/// Absolute floor in the relative-error denominator; below this both
/// gradients are indistinguishable from zero at FD resolution.
pub const FD_FLOOR: f64 = 1e-6;

/// Central finite differences of `loss` with respect to every entry of
/// every tensor in `p`. The arena is restored before returning.
pub fn fd_gradients(
    p: &mut Params<f64>,
    loss: &mut dyn FnMut(&Params<f64>) -> Result<f64>,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(p.len());
    for t in 0..p.len() {
        let n = p.data(t).len();
        let mut g = vec![0.0; n];
        for j in 0..n {
            let orig = p.data(t)[j];
            p.data_mut(t)[j] = orig + FD_EPSILON;
            let up = loss(p)?;
            p.data_mut(t)[j] = orig - FD_EPSILON;
            let down = loss(p)?;
            p.data_mut(t)[j] = orig;
            g[j] = (up - down) / (2.0 * FD_EPSILON);
        }
        out.push(g);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct GradComparison {
    pub max_rel_err: f64,
    pub worst_tensor: String,
    pub worst_entry: usize,
    pub analytic: f64,
    pub fd: f64,
}

/// Worst relative disagreement across all tensors, with the floor
/// applied to the denominator.
pub fn compare(p: &Params<f64>, analytic: &GradStore<f64>, fd: &[Vec<f64>]) -> GradComparison {
    let mut worst = GradComparison {
        max_rel_err: 0.0,
        worst_tensor: String::new(),
        worst_entry: 0,
        analytic: 0.0,
        fd: 0.0,
    };
    for t in 0..fd.len() {
        for (j, (&a, &b)) in analytic.data(t).iter().zip(fd[t].iter()).enumerate() {
            let rel = (a - b).abs() / a.abs().max(b.abs()).max(FD_FLOOR);
            if rel > worst.max_rel_err {
                worst = GradComparison {
                    max_rel_err: rel,
                    worst_tensor: p.name(t).to_string(),
                    worst_entry: j,
                    analytic: a,
                    fd: b,
                };
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn machinery_recovers_quadratic_gradients() {
        let mut p = Params::<f64>::new();
        p.push("x", &[3], false, vec![0.3, -1.2, 2.0]);
        // L = sum(x^2) -> dL/dx = 2x.
        let fd = fd_gradients(&mut p, &mut |p| Ok(p.data(0).iter().map(|v| v * v).sum()))
            .unwrap();
        for (a, x) in fd[0].iter().zip([0.3, -1.2, 2.0]) {
            assert!((a - 2.0 * x).abs() < 1e-9, "{a} vs {}", 2.0 * x);
        }
        // The arena is restored.
        assert_eq!(p.data(0), &[0.3, -1.2, 2.0]);
    }

    #[test]
    fn constant_loss_has_zero_fd_gradient() {
        let mut p = Params::<f64>::new();
        p.push("x", &[4], false, vec![1.0; 4]);
        let fd = fd_gradients(&mut p, &mut |_| Ok(3.5)).unwrap();
        assert!(fd[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn compare_reports_the_worst_entry() {
        let mut p = Params::<f64>::new();
        p.push("a", &[2], false, vec![0.0; 2]);
        p.push("b", &[2], false, vec![0.0; 2]);
        let mut g = GradStore::zeroed(&p);
        g.data_mut(0).copy_from_slice(&[1.0, 2.0]);
        g.data_mut(1).copy_from_slice(&[3.0, 4.0]);
        let fd = vec![vec![1.0, 2.0], vec![3.0, 4.4]];
        let cmp = compare(&p, &g, &fd);
        assert_eq!(cmp.worst_tensor, "b");
        assert_eq!(cmp.worst_entry, 1);
        assert!((cmp.max_rel_err - 0.4 / 4.4).abs() < 1e-12);
    }
}
