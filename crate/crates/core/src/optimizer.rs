//! Alternating minimization of the structure-propagation objective
//!
//! ```text
//! f(V, beta) = sum_{c in seen} sum_n l(x_n, I[y_n = c], a_c)
//!            + lambda/2 * sum_{c in seen} |a_c|^2
//!            + gamma/2  * |beta_img W_img - sum_j beta_j W_j|_F^2
//! a_c        = sum_u (sum_g beta_g W_g[c, u]) v_u
//! ```
//!
//! over phantoms `V` and simplex weights `beta`. With `beta` fixed the problem
//! in `V` is smooth and convex (squared hinge) and is solved with L-BFGS.
//! With `V` fixed the scores are linear in `beta`, so the restricted problem
//! is a small convex piecewise quadratic over the simplex, solved by
//! projected gradient with backtracking.
//!
//! When the image graph is still the zero placeholder its weight is pinned to
//! zero; otherwise the alignment penalty would reward moving mass onto a graph
//! that carries no information.

use std::collections::VecDeque;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::SimilarityGraph;
use crate::model::{blended_weights, check_simplex, SIMPLEX_SLACK};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HingeKind {
    /// `max(0, 1 - y z)^2`
    #[default]
    Squared,
    /// `max(0, 1 - y z)`, for ablations only; not differentiable at the hinge.
    Plain,
}

impl std::str::FromStr for HingeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "squared" => Ok(Self::Squared),
            "plain" => Ok(Self::Plain),
            other => Err(Error::InvalidParameter(format!("unknown hinge kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverSettings {
    pub max_outer_iters: usize,
    /// Relative objective decrease below which the outer loop stops.
    pub outer_tolerance: f64,
    pub v_tolerance: f64,
    pub beta_tolerance: f64,
    pub v_max_steps: usize,
    pub beta_max_steps: usize,
    pub lbfgs_memory: usize,
    /// Sufficient-decrease constant for the backtracking line searches.
    pub armijo: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            max_outer_iters: 50,
            outer_tolerance: 1e-5,
            v_tolerance: 1e-6,
            beta_tolerance: 1e-6,
            v_max_steps: 500,
            beta_max_steps: 500,
            lbfgs_memory: 10,
            armijo: 1e-4,
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("outer_tolerance", self.outer_tolerance),
            ("v_tolerance", self.v_tolerance),
            ("beta_tolerance", self.beta_tolerance),
            ("armijo", self.armijo),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} must be positive")));
            }
        }
        if self.max_outer_iters == 0 || self.v_max_steps == 0 || self.lbfgs_memory == 0 {
            return Err(Error::InvalidParameter("iteration limits must be at least 1".into()));
        }
        Ok(())
    }
}

/// The objective for one training set and one list of graphs.
#[derive(Clone, Debug)]
pub struct Objective<'a> {
    features: ArrayView2<'a, f64>,
    labels: &'a [usize],
    graphs: Vec<SimilarityGraph>,
    has_image: bool,
    pub lambda: f64,
    pub gamma: f64,
    pub hinge: HingeKind,
}

impl<'a> Objective<'a> {
    /// `features` are the N training rows, `labels[n]` the dense seen index of
    /// row `n`. `graphs` are ordered `[image, sources...]` when `has_image`,
    /// otherwise `[sources...]`.
    pub fn new(
        features: ArrayView2<'a, f64>,
        labels: &'a [usize],
        graphs: Vec<SimilarityGraph>,
        has_image: bool,
        lambda: f64,
        gamma: f64,
        hinge: HingeKind,
    ) -> Result<Self> {
        let first = graphs
            .first()
            .ok_or_else(|| Error::InvalidParameter("no graphs".into()))?;
        let shape = first.weights.dim();
        if graphs.iter().any(|g| g.weights.dim() != shape) {
            return Err(Error::DimensionMismatch("graphs differ in shape".into()));
        }
        if has_image && graphs.len() < 2 {
            return Err(Error::InvalidParameter(
                "an image graph needs at least one semantic graph beside it".into(),
            ));
        }
        if features.nrows() != labels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} training rows, {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= shape.0) {
            return Err(Error::DimensionMismatch(format!(
                "label index {bad} out of range for {} seen classes",
                shape.0
            )));
        }
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidParameter(format!("lambda must be positive, got {lambda}")));
        }
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(Error::InvalidParameter(format!("gamma must be non-negative, got {gamma}")));
        }
        Ok(Self {
            features,
            labels,
            graphs,
            has_image,
            lambda,
            gamma,
            hinge,
        })
    }

    pub fn graphs(&self) -> &[SimilarityGraph] {
        &self.graphs
    }

    pub fn features(&self) -> ArrayView2<'a, f64> {
        self.features
    }

    pub fn labels(&self) -> &'a [usize] {
        self.labels
    }

    pub fn has_image(&self) -> bool {
        self.has_image
    }

    /// Length of `beta`.
    pub fn k(&self) -> usize {
        self.graphs.len()
    }

    pub fn n_seen(&self) -> usize {
        self.graphs[0].n_seen()
    }

    pub fn n_unseen(&self) -> usize {
        self.graphs[0].n_unseen()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// True while the image slot holds the zero placeholder graph.
    pub fn image_pinned(&self) -> bool {
        self.has_image && self.graphs[0].zero_init
    }

    fn sign(&self, g: usize) -> f64 {
        if self.has_image && g == 0 {
            1.0
        } else {
            -1.0
        }
    }

    /// Uniform weights over the free coordinates.
    pub fn initial_beta(&self) -> Array1<f64> {
        let k = self.k();
        let mut beta = Array1::zeros(k);
        let start = usize::from(self.image_pinned());
        let share = 1.0 / (k - start) as f64;
        beta.slice_mut(ndarray::s![start..]).fill(share);
        beta
    }

    fn check_shapes(&self, v: ArrayView2<'_, f64>, beta: ArrayView1<'_, f64>) -> Result<()> {
        if v.dim() != (self.n_unseen(), self.dim()) {
            return Err(Error::DimensionMismatch(format!(
                "phantom matrix is {:?}, expected {:?}",
                v.dim(),
                (self.n_unseen(), self.dim())
            )));
        }
        if beta.len() != self.k() {
            return Err(Error::DimensionMismatch(format!(
                "{} weights for {} graphs",
                beta.len(),
                self.k()
            )));
        }
        Ok(())
    }

    /// `beta_img W_img - sum_j beta_j W_j` (image term absent without an image slot).
    pub fn alignment_residual(&self, beta: ArrayView1<'_, f64>) -> Array2<f64> {
        let mut m = Array2::zeros(self.graphs[0].weights.dim());
        for (g, graph) in self.graphs.iter().enumerate() {
            m.scaled_add(self.sign(g) * beta[g], &graph.weights);
        }
        m
    }

    fn alignment_value(&self, beta: ArrayView1<'_, f64>) -> f64 {
        if self.gamma == 0.0 {
            return 0.0;
        }
        let m = self.alignment_residual(beta);
        0.5 * self.gamma * m.iter().map(|x| x * x).sum::<f64>()
    }

    /// Full objective value.
    pub fn value(&self, v: ArrayView2<'_, f64>, beta: ArrayView1<'_, f64>) -> Result<f64> {
        self.check_shapes(v, beta)?;
        let blended = blended_weights(beta, &self.graphs)?;
        Ok(self.v_value_grad(&blended, v, false).0 + self.alignment_value(beta))
    }

    /// Loss and ridge part for fixed blended weights, optionally with the
    /// gradient in `V`.
    fn v_value_grad(
        &self,
        blended: &Array2<f64>,
        v: ArrayView2<'_, f64>,
        with_grad: bool,
    ) -> (f64, Option<Array2<f64>>) {
        let a = blended.dot(&v);
        let z = self.features.dot(&a.t());
        let (loss, dz) = hinge_terms(z.view(), self.labels, self.hinge, with_grad);
        let ridge = 0.5 * self.lambda * a.iter().map(|x| x * x).sum::<f64>();
        let grad = dz.map(|dz| {
            let mut ga = dz.t().dot(&self.features);
            ga.scaled_add(self.lambda, &a);
            blended.t().dot(&ga)
        });
        (loss + ridge, grad)
    }

    /// Objective value and gradient with respect to `V`.
    pub fn grad_v(&self, v: ArrayView2<'_, f64>, beta: ArrayView1<'_, f64>) -> Result<(f64, Array2<f64>)> {
        self.check_shapes(v, beta)?;
        let blended = blended_weights(beta, &self.graphs)?;
        let (val, grad) = self.v_value_grad(&blended, v, true);
        Ok((val + self.alignment_value(beta), grad.expect("requested")))
    }

    /// Gradient with respect to `beta`, treating the objective as a function
    /// on all of `R^k`.
    pub fn grad_beta(&self, v: ArrayView2<'_, f64>, beta: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        self.check_shapes(v, beta)?;
        let blended = blended_weights(beta, &self.graphs)?;
        let a = blended.dot(&v);
        let z = self.features.dot(&a.t());
        let (_, dz) = hinge_terms(z.view(), self.labels, self.hinge, true);
        let mut ga = dz.expect("requested").t().dot(&self.features);
        ga.scaled_add(self.lambda, &a);
        let gv = ga.dot(&v.t());
        let m = self.alignment_residual(beta);
        Ok(self
            .graphs
            .iter()
            .enumerate()
            .map(|(g, graph)| {
                let data: f64 = graph.weights.iter().zip(gv.iter()).map(|(w, x)| w * x).sum();
                let align: f64 = graph.weights.iter().zip(m.iter()).map(|(w, x)| w * x).sum();
                data + self.gamma * self.sign(g) * align
            })
            .collect())
    }
}

/// One-vs-rest hinge loss over scores `z` (N x S); `labels[n]` marks the
/// positive column of row `n`.
fn hinge_terms(
    z: ArrayView2<'_, f64>,
    labels: &[usize],
    kind: HingeKind,
    with_grad: bool,
) -> (f64, Option<Array2<f64>>) {
    let mut loss = 0.0;
    let mut dz = with_grad.then(|| Array2::zeros(z.dim()));
    for (n, row) in z.rows().into_iter().enumerate() {
        for (c, &score) in row.iter().enumerate() {
            let y = if labels[n] == c { 1.0 } else { -1.0 };
            let r = 1.0 - y * score;
            if r > 0.0 {
                match kind {
                    HingeKind::Squared => {
                        loss += r * r;
                        if let Some(d) = dz.as_mut() {
                            d[[n, c]] = -2.0 * y * r;
                        }
                    }
                    HingeKind::Plain => {
                        loss += r;
                        if let Some(d) = dz.as_mut() {
                            d[[n, c]] = -y;
                        }
                    }
                }
            }
        }
    }
    (loss, dz)
}

fn dot(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

fn sum_sq(a: &Array1<f64>) -> f64 {
    a.iter().map(|x| x * x).sum()
}

fn rel_decrease(before: f64, after: f64) -> f64 {
    let scale = before.abs();
    if scale == 0.0 {
        0.0
    } else {
        (before - after) / scale
    }
}

/// Minimizes over `V` with `beta` fixed, starting from `v_init`.
///
/// L-BFGS with an Armijo backtracking line search. The returned point never
/// has a larger objective than `v_init`. Stops once the relative decrease of
/// two consecutive steps falls below `v_tolerance`, or after `v_max_steps`.
pub fn solve_v(
    objective: &Objective<'_>,
    beta: ArrayView1<'_, f64>,
    settings: &SolverSettings,
    v_init: ArrayView2<'_, f64>,
) -> Result<Array2<f64>> {
    objective.check_shapes(v_init, beta)?;
    check_simplex(beta, SIMPLEX_SLACK)?;
    let blended = blended_weights(beta, &objective.graphs)?;
    let eval = |v: &Array2<f64>| {
        let (f, g) = objective.v_value_grad(&blended, v.view(), true);
        (f, g.expect("requested"))
    };

    let mut x = v_init.to_owned();
    let (mut f, mut g) = eval(&x);
    if !f.is_finite() {
        return Err(Error::NonFinite);
    }
    let mut history: VecDeque<(Array2<f64>, Array2<f64>, f64)> = VecDeque::new();
    let mut slow_steps = 0;

    for _ in 0..settings.v_max_steps {
        let gnorm = g.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if gnorm == 0.0 {
            break;
        }
        let mut d = lbfgs_direction(&g, &history);
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            history.clear();
            d = g.mapv(|x| -x);
            slope = -dot(&g, &g);
        }
        let mut step = if history.is_empty() {
            (1.0 / gnorm).min(1.0)
        } else {
            1.0
        };

        let mut accepted = None;
        let mut saw_finite = false;
        for _ in 0..60 {
            let cand = &x + &(&d * step);
            let (fc, gc) = eval(&cand);
            if fc.is_finite() {
                saw_finite = true;
                if fc <= f + settings.armijo * step * slope {
                    accepted = Some((cand, fc, gc));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((xn, fn_, gn)) = accepted else {
            if !saw_finite {
                return Err(Error::NonFinite);
            }
            if history.is_empty() {
                break;
            }
            history.clear();
            continue;
        };

        let s = &xn - &x;
        let y = &gn - &g;
        let sy = dot(&s, &y);
        if sy > 1e-300 {
            if history.len() == settings.lbfgs_memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        let dec = rel_decrease(f, fn_);
        x = xn;
        f = fn_;
        g = gn;
        if dec < settings.v_tolerance {
            slow_steps += 1;
            if slow_steps >= 2 {
                break;
            }
        } else {
            slow_steps = 0;
        }
    }
    Ok(x)
}

fn lbfgs_direction(g: &Array2<f64>, history: &VecDeque<(Array2<f64>, Array2<f64>, f64)>) -> Array2<f64> {
    let mut q = g.clone();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * dot(s, &q);
        q.scaled_add(-a, y);
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        q *= dot(s, y) / dot(y, y);
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(y, &q);
        q.scaled_add(a - b, s);
    }
    q.mapv_inplace(|x| -x);
    q
}

/// Euclidean projection onto the probability simplex (sort-based).
pub fn project_simplex(y: ArrayView1<'_, f64>) -> Array1<f64> {
    let mut sorted: Vec<f64> = y.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (i, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let t = (cumsum - 1.0) / (i + 1) as f64;
        if u - t > 0.0 {
            theta = t;
        }
    }
    let mut out = y.mapv(|v| (v - theta).max(0.0));
    let total = out.sum();
    if total > 0.0 {
        out /= total;
    } else {
        let n = out.len();
        out.fill(1.0 / n as f64);
    }
    out
}

/// The objective restricted to `beta` for fixed `V`:
/// `hinge(sum_g beta_g Z_g) + 1/2 beta^T H beta`.
struct BetaProblem<'o> {
    scores: Vec<Array2<f64>>,
    quad: Array2<f64>,
    labels: &'o [usize],
    hinge: HingeKind,
}

impl<'o> BetaProblem<'o> {
    fn new(objective: &'o Objective<'_>, v: ArrayView2<'_, f64>) -> Self {
        let k = objective.k();
        let parts: Vec<Array2<f64>> = objective.graphs.iter().map(|g| g.weights.dot(&v)).collect();
        let scores = parts.iter().map(|a| objective.features.dot(&a.t())).collect();
        let mut quad = Array2::zeros((k, k));
        for i in 0..k {
            for j in 0..=i {
                let ridge = objective.lambda * dot(&parts[i], &parts[j]);
                let align = objective.gamma
                    * objective.sign(i)
                    * objective.sign(j)
                    * dot(&objective.graphs[i].weights, &objective.graphs[j].weights);
                quad[[i, j]] = ridge + align;
                quad[[j, i]] = ridge + align;
            }
        }
        Self {
            scores,
            quad,
            labels: objective.labels,
            hinge: objective.hinge,
        }
    }

    fn combined(&self, beta: &Array1<f64>) -> Array2<f64> {
        let mut z = Array2::zeros(self.scores[0].dim());
        for (b, zg) in beta.iter().zip(&self.scores) {
            z.scaled_add(*b, zg);
        }
        z
    }

    fn value_grad(&self, beta: &Array1<f64>) -> (f64, Array1<f64>) {
        let z = self.combined(beta);
        let (loss, dz) = hinge_terms(z.view(), self.labels, self.hinge, true);
        let dz = dz.expect("requested");
        // Serial sums: a pinned zero coordinate must not change rounding.
        let hb: Array1<f64> = self
            .quad
            .rows()
            .into_iter()
            .map(|row| row.iter().zip(beta).map(|(q, b)| q * b).sum())
            .collect();
        let val = loss + 0.5 * beta.iter().zip(&hb).map(|(b, h)| b * h).sum::<f64>();
        let grad = self.scores.iter().zip(hb.iter()).map(|(zg, h)| dot(&dz, zg) + h).collect();
        (val, grad)
    }
}

/// Minimizes over `beta` on the simplex with `V` fixed, starting from
/// `beta_init`. The image weight stays at zero while the image graph is the
/// placeholder.
pub fn solve_beta(
    objective: &Objective<'_>,
    v: ArrayView2<'_, f64>,
    settings: &SolverSettings,
    beta_init: ArrayView1<'_, f64>,
) -> Result<Array1<f64>> {
    objective.check_shapes(v, beta_init)?;
    check_simplex(beta_init, SIMPLEX_SLACK)?;
    let k = objective.k();
    let start = usize::from(objective.image_pinned());
    let embed = |free: &Array1<f64>| {
        let mut full = Array1::zeros(k);
        full.slice_mut(ndarray::s![start..]).assign(free);
        full
    };
    let mut free = project_simplex(beta_init.slice(ndarray::s![start..]));
    let initial = embed(&free);
    if k - start == 1 {
        return Ok(initial);
    }

    let problem = BetaProblem::new(objective, v);
    let restricted = |free: &Array1<f64>| {
        let (f, g) = problem.value_grad(&embed(free));
        (f, g.slice(ndarray::s![start..]).to_owned())
    };
    let (mut f, mut g) = restricted(&free);
    let mut step = 1.0 / problem.quad.diag().iter().fold(1e-12f64, |m, x| m.max(x.abs()));
    let mut slow_steps = 0;

    for _ in 0..settings.beta_max_steps {
        let mut accepted = None;
        for _ in 0..80 {
            let cand = project_simplex((&free - &(&g * step)).view());
            let diff = &cand - &free;
            let (fc, gc) = restricted(&cand);
            let lin: f64 = g.iter().zip(&diff).map(|(a, b)| a * b).sum();
            let bound = f + lin + sum_sq(&diff) / (2.0 * step);
            if fc.is_finite() && fc <= bound + 1e-15 * f.abs() {
                accepted = Some((cand, diff, fc, gc));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, diff, fc, gc)) = accepted else {
            break;
        };
        let moved = diff.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let dg = &gc - &g;
        let sy: f64 = diff.iter().zip(&dg).map(|(a, b)| a * b).sum();
        step = if sy > 0.0 { sum_sq(&diff) / sy } else { step * 2.0 };
        step = step.clamp(1e-14, 1e14);
        let dec = rel_decrease(f, fc);
        if fc <= f {
            free = cand;
            f = fc;
            g = gc;
        }
        if moved <= 1e-14 {
            break;
        }
        if dec < settings.beta_tolerance {
            slow_steps += 1;
            if slow_steps >= 3 {
                break;
            }
        } else {
            slow_steps = 0;
        }
    }

    let result = embed(&free);
    let before = objective.value(v, initial.view())?;
    let after = objective.value(v, result.view())?;
    Ok(if after <= before { result } else { initial })
}

/// Output of [`alternate`].
#[derive(Clone, Debug, PartialEq)]
pub struct AlternateResult {
    pub phantoms: Array2<f64>,
    pub beta: Array1<f64>,
    /// Objective at the starting point, then after each outer iteration.
    pub trace: Vec<f64>,
}

/// Alternates [`solve_v`] and [`solve_beta`] from `V = 0` and uniform
/// weights.
pub fn alternate(objective: &Objective<'_>, settings: &SolverSettings) -> Result<AlternateResult> {
    let v0 = Array2::zeros((objective.n_unseen(), objective.dim()));
    alternate_from(objective, settings, v0, objective.initial_beta())
}

/// [`alternate`] from a given starting point. `beta_init` is re-projected
/// if the image weight must be pinned.
pub fn alternate_from(
    objective: &Objective<'_>,
    settings: &SolverSettings,
    v_init: Array2<f64>,
    beta_init: Array1<f64>,
) -> Result<AlternateResult> {
    settings.validate()?;
    check_simplex(beta_init.view(), SIMPLEX_SLACK)?;
    let mut beta = if objective.image_pinned() && beta_init[0] != 0.0 {
        let mut b = beta_init.clone();
        b[0] = 0.0;
        let tail = project_simplex(b.slice(ndarray::s![1..]));
        b.slice_mut(ndarray::s![1..]).assign(&tail);
        b
    } else {
        beta_init
    };
    let mut v = v_init;
    let mut f = objective.value(v.view(), beta.view())?;
    let mut trace = vec![f];
    for _ in 0..settings.max_outer_iters {
        v = solve_v(objective, beta.view(), settings, v.view())?;
        beta = solve_beta(objective, v.view(), settings, beta.view())?;
        let next = objective.value(v.view(), beta.view())?;
        let dec = rel_decrease(f, next);
        trace.push(next);
        f = next;
        if dec < settings.outer_tolerance {
            break;
        }
    }
    Ok(AlternateResult {
        phantoms: v,
        beta,
        trace,
    })
}
