//! Central finite-difference check of analytic gradients in 64-bit mode.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Denominator floor for relative error so that vanishing gradients are
/// compared in absolute terms.
pub const ABS_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, element index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }

    fn merge(&mut self, other: &GradCheckReport, input_offset: usize) {
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst.map(|(i, e)| (i + input_offset, e));
            self.analytic_at_worst = other.analytic_at_worst;
            self.numeric_at_worst = other.numeric_at_worst;
        }
        self.checked += other.checked;
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// Checks `d f / d x` for a scalar-valued `f` of one tensor.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    grad_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(x), h, tol, None)
}

/// Checks the gradient of `f` with respect to every tensor in `inputs`.
/// With `max_entries = Some(k)`, only `k` evenly spaced entries of each input
/// are perturbed.
pub fn grad_check_many<F>(
    f: F,
    inputs: &[Tensor<f64>],
    h: f64,
    tol: f64,
    max_entries: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(Error::Backward("grad_check requires a scalar function"));
    }
    g.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        checked: 0,
        tol,
    };
    let mut values = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = g
            .grad(*var)
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let n = inputs[i].len();
        let step = max_entries.map_or(1, |k| (n / k.max(1)).max(1));
        for e in (0..n).step_by(step) {
            let orig = values[i].data()[e];
            values[i].data_mut()[e] = orig + h;
            let plus = eval(&values)?;
            values[i].data_mut()[e] = orig - h;
            let minus = eval(&values)?;
            values[i].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[e];
            let err = relative_error(a, numeric);
            let single = GradCheckReport {
                max_rel_error: err,
                worst: Some((i, e)),
                analytic_at_worst: a,
                numeric_at_worst: numeric,
                checked: 1,
                tol,
            };
            report.merge(&single, 0);
        }
    }
    Ok(report)
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_f64(shape, &v).expect("shape")
}

type Case = (&'static str, Vec<Vec<usize>>, fn(&mut Graph<f64>, &[Var]) -> Result<Var>);

/// Every differentiable primitive composed with a random projection to a
/// scalar, checked at seeded random inputs.
pub fn primitive_suite(h: f64, tol: f64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let cases: Vec<Case> = vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |g, v| g.matmul(v[0], v[1])),
        ("matmul_batched", vec![vec![2, 3, 4], vec![2, 4, 2]], |g, v| g.matmul(v[0], v[1])),
        ("matmul_shared", vec![vec![2, 3, 4], vec![4, 2]], |g, v| g.matmul(v[0], v[1])),
        ("add", vec![vec![2, 3], vec![3]], |g, v| g.add(v[0], v[1])),
        ("add_bias", vec![vec![2, 3, 4], vec![2, 4]], |g, v| g.add_bias(v[0], v[1])),
        ("linear_generated", vec![vec![2, 3, 4], vec![2, 20]], |g, v| {
            let w = g.narrow(v[1], 1, 0, 16)?;
            let w = g.reshape(w, &[2, 4, 4])?;
            let b = g.narrow(v[1], 1, 16, 4)?;
            g.linear(v[0], w, b)
        }),
        ("mul", vec![vec![3, 3], vec![3, 3]], |g, v| g.mul(v[0], v[1])),
        ("scale", vec![vec![5]], |g, v| Ok(g.scale(v[0], 1.7))),
        ("relu", vec![vec![6]], |g, v| Ok(g.relu(v[0]))),
        ("softmax_last", vec![vec![3, 4]], |g, v| g.softmax(v[0], 1)),
        ("softmax_inner", vec![vec![3, 4, 2]], |g, v| g.softmax(v[0], 1)),
        ("layer_norm", vec![vec![3, 5], vec![5], vec![5]], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)),
        ("embedding", vec![vec![5, 3]], |g, v| g.embedding(v[0], &[4, 0, 4, 2])),
        ("permute", vec![vec![2, 3, 4]], |g, v| g.permute(v[0], &[2, 0, 1])),
        ("transpose", vec![vec![2, 3, 4]], |g, v| g.transpose(v[0])),
        ("concat", vec![vec![2, 3], vec![2, 2]], |g, v| g.concat(&[v[0], v[1]], 1)),
        ("narrow", vec![vec![4, 3]], |g, v| g.narrow(v[0], 0, 1, 2)),
        ("mean", vec![vec![2, 3]], |g, v| Ok(g.mean(v[0]))),
        ("cross_entropy", vec![vec![4, 5]], |g, v| g.cross_entropy_label_smoothed(v[0], &[1, 0, 4, 3], 0.1, 0)),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut out = Vec::with_capacity(cases.len());
    for (name, shapes, f) in cases {
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| random(s, &mut rng)).collect();
        let out_shape: Vec<usize> = {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
            let y = f(&mut g, &vars)?;
            g.shape(y).to_vec()
        };
        let proj = random(&out_shape, &mut rng);
        let report = grad_check_many(
            |g, vars| {
                let y = f(g, vars)?;
                let p = g.constant(proj.clone());
                let z = g.mul(y, p)?;
                Ok(g.sum(z))
            },
            &inputs,
            h,
            tol,
            None,
        )?;
        out.push((name, report));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_passes() {
        for (name, r) in primitive_suite(1e-6, 1e-4).unwrap() {
            assert!(r.passed(), "{name}: {r:?}");
            assert!(r.checked > 0);
        }
    }

    #[test]
    fn sum_has_zero_error() {
        let x = Tensor::from_f64(&[2, 3], &[0.3, -1.0, 2.0, 4.5, 0.0, 1.25]).unwrap();
        let r = grad_check(|g, x| Ok(g.sum(x)), &x, 1e-3, 1e-3).unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
        assert_eq!(r.checked, 6);
    }

    #[test]
    fn corrupted_backward_rule_fails() {
        let x = Tensor::from_f64(&[4], &[0.5, -1.5, 2.0, 0.75]).unwrap();
        // derivative of x³ should be 3x², not 2x²
        let r = grad_check(
            |g, x| {
                let y = g.elementwise(x, |v| v * v * v, |v| 2.0 * v * v);
                Ok(g.sum(y))
            },
            &x,
            1e-3,
            1e-3,
        )
        .unwrap();
        assert!(!r.passed());
        let ok = grad_check(
            |g, x| {
                let y = g.elementwise(x, |v| v * v * v, |v| 3.0 * v * v);
                Ok(g.sum(y))
            },
            &x,
            1e-3,
            1e-3,
        )
        .unwrap();
        assert!(ok.passed(), "{ok:?}");
    }
}
