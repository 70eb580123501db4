//! Limited-memory quasi-Newton minimizer with a strong-Wolfe line search.
//!
//! Unconstrained: the law fitters handle bounds by reparametrizing (exp,
//! softplus, scaled sigmoid), so no projection is needed here. The
//! implementation is the standard two-loop recursion (Nocedal & Wright,
//! Algorithms 7.4/7.5) with 10 correction pairs and bracketing line search
//! (Algorithms 3.5/3.6), bisection in the zoom phase for robustness on the
//! flat valleys these fits produce.

/// Termination and line-search settings.
#[derive(Debug, Clone)]
pub struct Options {
    pub max_iters: usize,
    /// Euclidean gradient-norm threshold counting as converged.
    pub grad_tol: f64,
    /// Number of stored correction pairs.
    pub memory: usize,
    /// Armijo (sufficient decrease) constant.
    pub c1: f64,
    /// Curvature constant.
    pub c2: f64,
    /// Record accepted objective values per iteration.
    pub trace: bool,
}

impl Default for Options {
    fn default() -> Self {
        Options {
            max_iters: 500,
            grad_tol: 1e-8,
            memory: 10,
            c1: 1e-4,
            c2: 0.9,
            trace: false,
        }
    }
}

/// Result of one minimization run.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    /// Whether the gradient tolerance was reached.
    pub converged: bool,
    /// Objective after each accepted step, when requested.
    pub trace: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Minimizes `f` from `x0`. The objective fills the gradient slice and
/// returns the value; it must be smooth wherever it is finite.
pub fn minimize<F>(mut f: F, x0: &[f64], opts: &Options) -> Outcome
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut g = vec![0.0; n];
    let mut fx = f(&x, &mut g);
    let mut trace = Vec::new();

    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Outcome {
            x,
            value: fx,
            grad_norm: f64::INFINITY,
            iterations: 0,
            converged: false,
            trace,
        };
    }
    if opts.trace {
        trace.push(fx);
    }

    // correction history, newest last
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut rho: Vec<f64> = Vec::new();

    let mut iter = 0;
    while iter < opts.max_iters {
        let gnorm = norm(&g);
        if gnorm <= opts.grad_tol {
            return Outcome {
                x,
                value: fx,
                grad_norm: gnorm,
                iterations: iter,
                converged: true,
                trace,
            };
        }

        // two-loop recursion for d = -H g
        let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
        let m = s_hist.len();
        let mut alpha_hist = vec![0.0; m];
        for i in (0..m).rev() {
            let a = rho[i] * dot(&s_hist[i], &d);
            alpha_hist[i] = a;
            for (dj, yj) in d.iter_mut().zip(&y_hist[i]) {
                *dj -= a * yj;
            }
        }
        if m > 0 {
            let last = m - 1;
            let gamma = dot(&s_hist[last], &y_hist[last]) / dot(&y_hist[last], &y_hist[last]);
            if gamma.is_finite() && gamma > 0.0 {
                for dj in d.iter_mut() {
                    *dj *= gamma;
                }
            }
        }
        for i in 0..m {
            let b = rho[i] * dot(&y_hist[i], &d);
            for (dj, sj) in d.iter_mut().zip(&s_hist[i]) {
                *dj += (alpha_hist[i] - b) * sj;
            }
        }

        let mut dg = dot(&d, &g);
        if !(dg < 0.0) {
            // curvature history went stale; fall back to steepest descent
            s_hist.clear();
            y_hist.clear();
            rho.clear();
            d = g.iter().map(|v| -v).collect();
            dg = -dot(&g, &g);
        }

        match line_search(&mut f, &x, fx, &d, dg, opts) {
            Some(step) => {
                let mut s = vec![0.0; n];
                let mut y = vec![0.0; n];
                for i in 0..n {
                    s[i] = step.x[i] - x[i];
                    y[i] = step.g[i] - g[i];
                }
                let sy = dot(&s, &y);
                // guard against numerically useless pairs
                if sy > 1e-12 * norm(&s) * norm(&y) {
                    if s_hist.len() == opts.memory {
                        s_hist.remove(0);
                        y_hist.remove(0);
                        rho.remove(0);
                    }
                    rho.push(1.0 / sy);
                    s_hist.push(s);
                    y_hist.push(y);
                }
                x = step.x;
                g = step.g;
                fx = step.value;
                if opts.trace {
                    trace.push(fx);
                }
            }
            None => {
                // cannot make progress along any direction we can build
                return Outcome {
                    grad_norm: norm(&g),
                    x,
                    value: fx,
                    iterations: iter,
                    converged: false,
                    trace,
                };
            }
        }
        iter += 1;
    }

    let gnorm = norm(&g);
    Outcome {
        converged: gnorm <= opts.grad_tol,
        x,
        value: fx,
        grad_norm: gnorm,
        iterations: iter,
        trace,
    }
}

struct Accepted {
    x: Vec<f64>,
    g: Vec<f64>,
    value: f64,
}

struct Trial {
    alpha: f64,
    value: f64,
    dg: f64,
    x: Vec<f64>,
    g: Vec<f64>,
}

/// Strong-Wolfe bracketing search along `d`. Returns None when no acceptable
/// step exists within the evaluation budget.
fn line_search<F>(
    f: &mut F,
    x0: &[f64],
    f0: f64,
    d: &[f64],
    dg0: f64,
    opts: &Options,
) -> Option<Accepted>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let eval = |alpha: f64, f: &mut F| -> Trial {
        let mut x = vec![0.0; n];
        for i in 0..n {
            x[i] = x0[i] + alpha * d[i];
        }
        let mut g = vec![0.0; n];
        let value = f(&x, &mut g);
        let dg = if value.is_finite() { dot(&g, d) } else { f64::INFINITY };
        Trial { alpha, value, dg, x, g }
    };

    let wolfe = |t: &Trial| {
        t.value <= f0 + opts.c1 * t.alpha * dg0 && t.dg.abs() <= -opts.c2 * dg0
    };
    let accept = |t: Trial| -> Option<Accepted> {
        Some(Accepted {
            x: t.x,
            g: t.g,
            value: t.value,
        })
    };

    const MAX_BRACKET: usize = 20;
    const MAX_ZOOM: usize = 40;

    let mut prev_alpha = 0.0;
    let mut prev_value = f0;
    let mut alpha = 1.0;
    let mut bracket: Option<(f64, f64, f64)> = None; // (lo, f_lo, hi)

    for i in 0..MAX_BRACKET {
        let t = eval(alpha, f);
        if !t.value.is_finite() || t.value > f0 + opts.c1 * alpha * dg0 || (i > 0 && t.value >= prev_value)
        {
            bracket = Some((prev_alpha, prev_value, alpha));
            break;
        }
        if wolfe(&t) {
            return accept(t);
        }
        if t.dg >= 0.0 {
            bracket = Some((alpha, t.value, prev_alpha));
            break;
        }
        prev_alpha = alpha;
        prev_value = t.value;
        alpha *= 2.0;
        if alpha > 1e10 {
            // direction is a descent ray with no curvature in budget; take it
            return accept(t);
        }
    }

    let (mut lo, mut f_lo, mut hi) = bracket?;
    let mut best: Option<Trial> = None;
    for _ in 0..MAX_ZOOM {
        let mid = 0.5 * (lo + hi);
        if (hi - lo).abs() <= 1e-16 * lo.abs().max(1.0) {
            break;
        }
        let t = eval(mid, f);
        if !t.value.is_finite() || t.value > f0 + opts.c1 * mid * dg0 || t.value >= f_lo {
            hi = mid;
            continue;
        }
        if wolfe(&t) {
            return accept(t);
        }
        let going_up = t.dg * (hi - lo) >= 0.0;
        if going_up {
            hi = lo;
        }
        lo = mid;
        f_lo = t.value;
        best = Some(t);
    }

    // the zoom shrank to nothing; settle for plain decrease if we saw one
    match best {
        Some(t) if t.value < f0 => accept(t),
        _ => {
            if lo > 0.0 && f_lo < f0 {
                let t = eval(lo, f);
                if t.value < f0 {
                    return accept(t);
                }
            }
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run<F>(f: F, x0: &[f64]) -> Outcome
    where
        F: FnMut(&[f64], &mut [f64]) -> f64,
    {
        minimize(
            f,
            x0,
            &Options {
                trace: true,
                ..Default::default()
            },
        )
    }

    #[test]
    fn quadratic_bowl_converges() {
        let out = run(
            |x, g| {
                g[0] = 2.0 * (x[0] - 3.0);
                g[1] = 8.0 * (x[1] + 1.0);
                (x[0] - 3.0).powi(2) + 4.0 * (x[1] + 1.0).powi(2)
            },
            &[0.0, 0.0],
        );
        assert!(out.converged, "{out:?}");
        assert!((out.x[0] - 3.0).abs() < 1e-7);
        assert!((out.x[1] + 1.0).abs() < 1e-7);
    }

    #[test]
    fn rosenbrock_converges_to_the_valley_floor() {
        let out = run(
            |x, g| {
                let (a, b) = (x[0], x[1]);
                g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
                g[1] = 200.0 * (b - a * a);
                (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
            },
            &[-1.2, 1.0],
        );
        assert!(out.converged, "{out:?}");
        assert!((out.x[0] - 1.0).abs() < 1e-6, "{:?}", out.x);
        assert!((out.x[1] - 1.0).abs() < 1e-6, "{:?}", out.x);
    }

    #[test]
    fn accepted_objectives_never_increase() {
        let out = run(
            |x, g| {
                let (a, b) = (x[0], x[1]);
                g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
                g[1] = 200.0 * (b - a * a);
                (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
            },
            &[-1.2, 1.0],
        );
        for w in out.trace.windows(2) {
            assert!(
                w[1] <= w[0] + 1e-12,
                "objective rose from {} to {}",
                w[0],
                w[1]
            );
        }
    }

    #[test]
    fn exp_valley_like_a_law_fit_converges() {
        // mimics the fits: sum of squared log-residuals of a power law
        let data: Vec<(f64, f64)> = (1..=20)
            .map(|i| {
                let r = i as f64;
                (r, 5.0 * r.powf(-0.7) + 0.3)
            })
            .collect();
        let out = run(
            |x, g| {
                let (a, p, e) = (x[0].exp(), x[1], x[2].exp());
                let mut val = 0.0;
                g.fill(0.0);
                for &(r, y) in &data {
                    let pred = a * r.powf(p) + e;
                    let u = pred.ln() - y.ln();
                    val += 0.5 * u * u;
                    let w = u / pred;
                    g[0] += w * a * r.powf(p);
                    g[1] += w * a * r.powf(p) * r.ln();
                    g[2] += w * e;
                }
                val
            },
            &[0.0, -1.0, -2.0],
        );
        assert!(out.converged, "{out:?}");
        assert!((out.x[0].exp() - 5.0).abs() / 5.0 < 1e-5, "{:?}", out.x);
        assert!((out.x[1] + 0.7).abs() < 1e-5, "{:?}", out.x);
        assert!((out.x[2].exp() - 0.3).abs() / 0.3 < 1e-4, "{:?}", out.x);
    }

    #[test]
    fn non_finite_start_reports_failure() {
        let out = run(
            |x, g| {
                g[0] = 1.0;
                if x[0] < 10.0 {
                    f64::NAN
                } else {
                    x[0]
                }
            },
            &[0.0],
        );
        assert!(!out.converged);
        assert_eq!(out.iterations, 0);
    }

    #[test]
    fn already_at_the_minimum_stops_immediately() {
        let out = run(
            |x, g| {
                g[0] = 2.0 * x[0];
                x[0] * x[0]
            },
            &[0.0],
        );
        assert!(out.converged);
        assert_eq!(out.iterations, 0);
    }
}
