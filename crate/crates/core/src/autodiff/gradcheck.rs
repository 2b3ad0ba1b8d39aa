//! Central-difference verification of analytic gradients.

use rand::rngs::StdRng;

use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::{ensure, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradientCheck {
    /// Finite-difference step.
    pub step: f64,
    /// A coordinate whose one-sided slopes differ by more than this
    /// (relative to `max(1, |central|)`) is treated as a kink and skipped.
    pub kink_tolerance: f64,
}

impl Default for GradientCheck {
    fn default() -> Self {
        GradientCheck {
            step: 1e-5,
            kink_tolerance: 1e-3,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |numeric|)` over checked coordinates.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates skipped as non-differentiable sample points.
    pub kinks: usize,
    /// Number of fresh samples drawn by [`GradientCheck::sampled`].
    pub resamples: usize,
}

impl GradientCheck {
    pub fn new(step: f64) -> Self {
        GradientCheck {
            step,
            ..Default::default()
        }
    }

    /// Check gradients of a scalar function with respect to every element
    /// of every input tensor.
    pub fn inputs<F>(&self, inputs: &[Tensor], f: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    {
        let eval = |vals: &[Tensor]| -> Result<f64> {
            let mut g = Graph::new();
            let vars: Vec<Var> = vals.iter().map(|t| g.input(t.clone())).collect();
            let out = f(&mut g, &vars)?;
            g.value(out).item()
        };
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input_with_grad(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let grads = g.backward(out)?;
        let analytic: Vec<Tensor> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| {
                grads
                    .wrt(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
            })
            .collect();

        let mut report = GradCheckReport::default();
        let mut work = inputs.to_vec();
        for (ti, an) in analytic.iter().enumerate() {
            for j in 0..an.len() {
                let x0 = work[ti].data()[j];
                let at = |x: f64, work: &mut Vec<Tensor>| -> Result<f64> {
                    work[ti].data_mut()[j] = x;
                    eval(work)
                };
                let f0 = at(x0, &mut work)?;
                let fp = at(x0 + self.step, &mut work)?;
                let fm = at(x0 - self.step, &mut work)?;
                work[ti].data_mut()[j] = x0;
                self.score(&mut report, an.data()[j], f0, fp, fm);
            }
        }
        Ok(report)
    }

    /// Check gradients of a scalar function with respect to every trainable
    /// parameter in `store`.
    pub fn params<F>(&self, store: &ParamStore, f: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
    {
        let mut g = Graph::new();
        let out = f(&mut g, store)?;
        let grads = g.backward(out)?;
        let mut analytic = store.clone();
        analytic.zero_grad();
        analytic.accumulate(&grads);

        let mut work = store.clone();
        let mut report = GradCheckReport::default();
        let ids: Vec<_> = store.trainable().collect();
        for id in ids {
            for j in 0..store.value(id).len() {
                let x0 = store.value(id).data()[j];
                let mut at = |x: f64| -> Result<f64> {
                    work.value_mut(id).data_mut()[j] = x;
                    let mut g = Graph::new();
                    let out = f(&mut g, &work)?;
                    g.value(out).item()
                };
                let f0 = at(x0)?;
                let fp = at(x0 + self.step)?;
                let fm = at(x0 - self.step)?;
                work.value_mut(id).data_mut()[j] = x0;
                self.score(&mut report, analytic.grad(id).data()[j], f0, fp, fm);
            }
        }
        Ok(report)
    }

    /// Draw inputs from `sample` and check them, drawing again while the
    /// sample lands on a non-differentiable point.
    pub fn sampled<S, F>(
        &self,
        rng: &mut StdRng,
        max_attempts: usize,
        mut sample: S,
        f: F,
    ) -> Result<GradCheckReport>
    where
        S: FnMut(&mut StdRng) -> Vec<Tensor>,
        F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    {
        ensure!(max_attempts > 0, "need at least one sampling attempt");
        let mut last = GradCheckReport::default();
        for attempt in 0..max_attempts {
            let inputs = sample(rng);
            last = self.inputs(&inputs, &f)?;
            last.resamples = attempt;
            if last.kinks == 0 {
                return Ok(last);
            }
        }
        Ok(last)
    }

    fn score(&self, report: &mut GradCheckReport, analytic: f64, f0: f64, fp: f64, fm: f64) {
        let h = self.step;
        let central = (fp - fm) / (2.0 * h);
        let forward = (fp - f0) / h;
        let backward = (f0 - fm) / h;
        let scale = central.abs().max(1.0);
        if (forward - backward).abs() > self.kink_tolerance * scale {
            report.kinks += 1;
            return;
        }
        let err = (analytic - central).abs() / scale;
        report.max_rel_error = report.max_rel_error.max(err);
        report.checked += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::conv::ConvSpec;
    use rand::{Rng, SeedableRng};

    #[test]
    fn linear_map_has_exact_derivative() {
        let x = Tensor::new(vec![3], vec![0.3, -1.2, 2.0]).unwrap();
        let report = GradientCheck::default()
            .inputs(&[x], |g, v| {
                let y = g.scale(v[0], 3.0);
                Ok(g.sum(y))
            })
            .unwrap();
        assert_eq!(report.checked, 3);
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn conv2d_passes_check() {
        let mut rng = StdRng::seed_from_u64(2024);
        let x = Tensor::from_fn(vec![1, 2, 6, 6], |_| rng.random_range(-1.0..1.0));
        let k = Tensor::from_fn(vec![3, 2, 3, 3], |_| rng.random_range(-1.0..1.0));
        let b = Tensor::from_fn(vec![3], |_| rng.random_range(-1.0..1.0));
        let w = Tensor::from_fn(vec![1, 3, 6, 6], |_| rng.random_range(-1.0..1.0));
        let report = GradientCheck::default()
            .inputs(&[x, k, b], |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), ConvSpec::new(1, 1, 1))?;
                let wv = g.input(w.clone());
                // weighted sum so every output has a distinct cotangent
                let p = g.add(y, wv)?;
                let q = g.sigmoid(p);
                Ok(g.sum(q))
            })
            .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
        assert_eq!(report.kinks, 0);
    }

    #[test]
    fn max_pool_tie_is_flagged_then_resampled() {
        let tie = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let pool = |g: &mut Graph, v: &[Var]| {
            let y = g.max_pool(v[0], 2, 2)?;
            Ok(g.sum(y))
        };
        let at_tie = GradientCheck::default().inputs(&[tie.clone()], pool).unwrap();
        assert!(at_tie.kinks > 0);

        let mut rng = StdRng::seed_from_u64(1);
        let mut first = true;
        let report = GradientCheck::default()
            .sampled(
                &mut rng,
                5,
                |rng| {
                    if std::mem::take(&mut first) {
                        vec![tie.clone()]
                    } else {
                        vec![Tensor::from_fn(vec![1, 1, 2, 2], |_| rng.random_range(-1.0..1.0))]
                    }
                },
                pool,
            )
            .unwrap();
        assert_eq!(report.kinks, 0);
        assert!(report.resamples >= 1);
        assert!(report.max_rel_error < 1e-8);
    }
}
