use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Probe at most this many coordinates per tensor (plus the coordinate of
    /// largest analytic gradient). `None` probes every coordinate.
    pub max_coords_per_tensor: Option<usize>,
    pub seed: u64,
    /// Smallest denominator of a relative error. Central differences carry
    /// round-off of order `ε·|f|/step`, so gradients below this floor are
    /// effectively judged on absolute error.
    pub denominator_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            max_coords_per_tensor: None,
            seed: 0,
            denominator_floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CoordinateCheck {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub tensor: usize,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<CoordinateCheck>,
    pub failures: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub max_rel_error: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    if !analytic.is_finite() || !numeric.is_finite() {
        return f64::INFINITY;
    }
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the tape gradient of `f` at `theta` against central differences.
///
/// `f` receives a fresh graph and one leaf per tensor of `theta`, and must
/// return a scalar node. A probe whose value is not finite is recorded as a
/// failing coordinate.
pub fn finite_diff_check<F>(mut f: F, theta: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut graph = Graph::new();
    let vars: Vec<Var> = theta.iter().map(|t| graph.param(t)).collect();
    let root = f(&mut graph, &vars)?;
    let grads = graph.backward(root)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(theta)
        .map(|(&v, t)| grads.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();
    drop(graph);

    let mut eval = |params: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vs: Vec<Var> = params.iter().map(|t| g.constant(t)).collect();
        let r = f(&mut g, &vs)?;
        Ok(g.value(r).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe = theta.to_vec();
    let mut tensors = Vec::with_capacity(theta.len());
    let mut overall = 0.0f64;
    let mut passed = true;
    for (ti, grad) in analytic.iter().enumerate() {
        let n = theta[ti].len();
        let coords: Vec<usize> = match opts.max_coords_per_tensor {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                let peak = (0..n)
                    .max_by(|&a, &b| grad[a].abs().total_cmp(&grad[b].abs()))
                    .unwrap_or(0);
                if !c.contains(&peak) {
                    c.push(peak);
                }
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let mut check = TensorCheck {
            tensor: ti,
            checked: coords.len(),
            max_rel_error: 0.0,
            worst: None,
            failures: 0,
        };
        for &i in &coords {
            let orig = theta[ti].data()[i];
            probe[ti].data_mut()[i] = orig + opts.step;
            let plus = eval(&probe)?;
            probe[ti].data_mut()[i] = orig - opts.step;
            let minus = eval(&probe)?;
            probe[ti].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let rel = relative_error(grad[i], numeric, opts.denominator_floor);
            if !(rel < opts.tolerance) {
                check.failures += 1;
            }
            if check.worst.is_none() || rel > check.max_rel_error {
                check.max_rel_error = rel;
                check.worst = Some(CoordinateCheck {
                    index: i,
                    analytic: grad[i],
                    numeric,
                    rel_error: rel,
                });
            }
        }
        overall = overall.max(check.max_rel_error);
        passed &= check.failures == 0;
        tensors.push(check);
    }
    Ok(GradCheckReport {
        tensors,
        max_rel_error: overall,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::vector(&[0.3, -1.2, 4.0]);
        let report = finite_diff_check(|g, v| Ok(g.sum(v[0])), &[x], &GradCheckOptions::default()).unwrap();
        assert!(report.passed);
        assert!(report.max_rel_error < 1e-9);
    }

    #[test]
    fn quadratic_matches_closed_form() {
        let x = Tensor::vector(&[3.0]);
        let mut g = Graph::new();
        let v = g.param(&x);
        let sq = g.powi(v, 2);
        let root = g.sum(sq);
        let grads = g.backward(root).unwrap();
        assert_eq!(grads.get(v).unwrap(), &[6.0]);
        let report = finite_diff_check(
            |g, v| {
                let sq = g.powi(v[0], 2);
                Ok(g.sum(sq))
            },
            &[x],
            &GradCheckOptions::default(),
        )
        .unwrap();
        let worst = report.tensors[0].worst.as_ref().unwrap();
        assert!((worst.numeric - 6.0).abs() < 1e-9);
        assert!(report.passed);
    }

    #[test]
    fn non_finite_probe_is_a_failure_not_a_panic() {
        // log(x) at x = 5e-6 with step 1e-5 probes log of a negative number.
        let x = Tensor::vector(&[5e-6]);
        let report = finite_diff_check(
            |g, v| {
                let l = g.log(v[0]);
                Ok(g.sum(l))
            },
            &[x],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(!report.passed);
        assert_eq!(report.tensors[0].failures, 1);
    }

    #[test]
    fn sampling_caps_coordinates() {
        let x = Tensor::new(vec![10, 10], (0..100).map(|i| i as f64 * 0.01).collect()).unwrap();
        let opts = GradCheckOptions {
            max_coords_per_tensor: Some(5),
            ..Default::default()
        };
        let report = finite_diff_check(
            |g, v| {
                let s = g.powi(v[0], 3);
                Ok(g.sum(s))
            },
            &[x],
            &opts,
        )
        .unwrap();
        assert!(report.tensors[0].checked <= 6);
        assert!(report.passed);
    }
}
