//! Shared helpers for the integration tests: random instances and a naive,
//! loop-based objective that shares no code with the library.
#![allow(dead_code)]

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use ndarray::s;
use structprop::graph::graph_from_prototypes;
use structprop::synth::SourceNoise;
use structprop::{
    class_prototypes, generate, ClassId, ClassPrototypes, HingeKind, Objective, SimilarityGraph, SolverSettings,
    Space, SynthParams, TrainingSet,
};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let z: f64 = StandardNormal.sample(rng);
        scale * z
    })
}

/// A random row-stochastic matrix with strictly positive entries.
pub fn stochastic(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let mut m = Array2::from_shape_fn((rows, cols), |_| rng.random_range(0.05..1.0));
    for mut row in m.rows_mut() {
        let s = row.sum();
        row /= s;
    }
    m
}

pub fn graph(weights: Array2<f64>, space: Space) -> SimilarityGraph {
    SimilarityGraph {
        space,
        weights,
        sigma: 1.0,
        zero_init: false,
    }
}

/// A small optimization problem with its own storage.
pub struct Instance {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub graphs: Vec<Array2<f64>>,
    pub has_image: bool,
    pub lambda: f64,
    pub gamma: f64,
    pub hinge: HingeKind,
}

impl Instance {
    pub fn random(
        rng: &mut ChaCha8Rng,
        seen: usize,
        unseen: usize,
        dim: usize,
        n: usize,
        sources: usize,
        has_image: bool,
    ) -> Self {
        let features = normal_matrix(rng, n, dim, 1.0);
        let labels = (0..n).map(|i| if i < seen { i } else { rng.random_range(0..seen) }).collect();
        let k = sources + usize::from(has_image);
        let graphs = (0..k).map(|_| stochastic(rng, seen, unseen)).collect();
        Self {
            features,
            labels,
            graphs,
            has_image,
            lambda: 2f64.powf(rng.random_range(-4.0..1.0)),
            gamma: 2f64.powf(rng.random_range(-3.0..3.0)),
            hinge: HingeKind::Squared,
        }
    }

    /// Three seen and two unseen synthetic classes in three dimensions: the
    /// semantic graph comes from the `att` table, the image graph from the
    /// true class means, as after a perfect propagation round.
    pub fn synthetic(seed: u64, lambda: f64, gamma: f64) -> Self {
        let p = SynthParams {
            seen: 3,
            unseen: 2,
            dim: 3,
            train_per_class: 5,
            test_per_class: 5,
            feature_noise: 0.5,
            semantic_dim: 4,
            sources: vec![SourceNoise {
                name: "att".into(),
                noise: 0.3,
            }],
            seed,
            ..Default::default()
        };
        let d = generate(&p).unwrap();
        let ds = &d.dataset;
        let table = ds.semantic("att").unwrap();
        let sem = graph_from_prototypes(
            &ClassPrototypes::semantic("att", ds.seen().to_vec(), table.slice(s![..3, ..])),
            &ClassPrototypes::semantic("att", ds.unseen().to_vec(), table.slice(s![3.., ..])),
            1.0,
        )
        .unwrap();
        let train = TrainingSet::from_dataset(ds);
        let seen_labels: Vec<Option<ClassId>> = ds.labels().iter().copied().filter(Option::is_some).collect();
        let seen = class_prototypes(train.features.view(), &seen_labels, ds.seen());
        let truth: Vec<Option<ClassId>> = d.truth.iter().map(|&c| Some(c)).collect();
        let unseen = class_prototypes(ds.test_features().view(), &truth, ds.unseen());
        let image = graph_from_prototypes(&seen, &unseen, 1.0).unwrap();
        Self {
            features: train.features,
            labels: train.labels,
            graphs: vec![image.weights, sem.weights],
            has_image: true,
            lambda,
            gamma,
            hinge: HingeKind::Squared,
        }
    }

    pub fn objective(&self) -> Objective<'_> {
        let graphs = self
            .graphs
            .iter()
            .enumerate()
            .map(|(g, w)| {
                let space = if self.has_image && g == 0 {
                    Space::Image
                } else {
                    Space::Semantic(format!("s{g}"))
                };
                graph(w.clone(), space)
            })
            .collect();
        Objective::new(
            self.features.view(),
            &self.labels,
            graphs,
            self.has_image,
            self.lambda,
            self.gamma,
            self.hinge,
        )
        .unwrap()
    }

    pub fn seen(&self) -> usize {
        self.graphs[0].nrows()
    }

    pub fn unseen(&self) -> usize {
        self.graphs[0].ncols()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// The objective written out term by term.
    pub fn naive_value(&self, v: &Array2<f64>, beta: &[f64]) -> f64 {
        let (s_n, u_n, d_n) = (self.seen(), self.unseen(), self.dim());
        let mut a = vec![vec![0.0; d_n]; s_n];
        for s in 0..s_n {
            for d in 0..d_n {
                for u in 0..u_n {
                    let mut w = 0.0;
                    for (g, graph) in self.graphs.iter().enumerate() {
                        w += beta[g] * graph[[s, u]];
                    }
                    a[s][d] += w * v[[u, d]];
                }
            }
        }
        let mut loss = 0.0;
        for (n, &label) in self.labels.iter().enumerate() {
            for (s, a_s) in a.iter().enumerate() {
                let y = if label == s { 1.0 } else { -1.0 };
                let score: f64 = (0..d_n).map(|d| a_s[d] * self.features[[n, d]]).sum();
                let r = (1.0 - y * score).max(0.0);
                loss += match self.hinge {
                    HingeKind::Squared => r * r,
                    HingeKind::Plain => r,
                };
            }
        }
        let ridge: f64 = a.iter().flatten().map(|x| x * x).sum::<f64>() * self.lambda / 2.0;
        let mut align = 0.0;
        for s in 0..s_n {
            for u in 0..u_n {
                let mut m = 0.0;
                for (g, graph) in self.graphs.iter().enumerate() {
                    let sign = if self.has_image && g == 0 { 1.0 } else { -1.0 };
                    m += sign * beta[g] * graph[[s, u]];
                }
                align += m * m;
            }
        }
        loss + ridge + self.gamma / 2.0 * align
    }

    /// Minimizes over `V` for fixed `beta` (squared hinge only) with a
    /// damped semi-smooth Newton method: gradient and generalized Hessian
    /// are assembled term by term, steps are backtracked on
    /// [`Instance::naive_value`]. Returns the point and its value.
    pub fn newton_v(&self, beta: &[f64], mut v: Array2<f64>) -> (Array2<f64>, f64) {
        assert_eq!(self.hinge, HingeKind::Squared);
        let (s_n, u_n, d_n) = (self.seen(), self.unseen(), self.dim());
        let m = u_n * d_n;
        let w: Vec<Vec<f64>> = (0..s_n)
            .map(|s| {
                (0..u_n)
                    .map(|u| self.graphs.iter().zip(beta).map(|(g, b)| b * g[[s, u]]).sum())
                    .collect()
            })
            .collect();
        let mut f = self.naive_value(&v, beta);
        for _ in 0..200 {
            let mut grad = vec![0.0; m];
            let mut hess = vec![vec![0.0; m]; m];
            for (n, &label) in self.labels.iter().enumerate() {
                for (s, w_s) in w.iter().enumerate() {
                    let y = if label == s { 1.0 } else { -1.0 };
                    // phi[u*D + d] = d score / d V[u, d]
                    let phi: Vec<f64> = (0..m).map(|i| w_s[i / d_n] * self.features[[n, i % d_n]]).collect();
                    let score: f64 = phi.iter().zip(v.iter()).map(|(p, x)| p * x).sum();
                    let r = 1.0 - y * score;
                    if r > 0.0 {
                        for i in 0..m {
                            grad[i] -= 2.0 * y * r * phi[i];
                            for j in 0..m {
                                hess[i][j] += 2.0 * phi[i] * phi[j];
                            }
                        }
                    }
                }
            }
            for w_s in &w {
                for d in 0..d_n {
                    let a: f64 = (0..u_n).map(|u| w_s[u] * v[[u, d]]).sum();
                    for u in 0..u_n {
                        grad[u * d_n + d] += self.lambda * w_s[u] * a;
                        for q in 0..u_n {
                            hess[u * d_n + d][q * d_n + d] += self.lambda * w_s[u] * w_s[q];
                        }
                    }
                }
            }
            let gmax = grad.iter().fold(0.0f64, |acc, g| acc.max(g.abs()));
            if gmax <= 1e-13 * f.max(1.0) {
                break;
            }
            for (i, row) in hess.iter_mut().enumerate() {
                row[i] += 1e-12;
            }
            let step = solve_dense(hess, grad.iter().map(|g| -g).collect());
            let slope: f64 = step.iter().zip(&grad).map(|(p, g)| p * g).sum();
            let mut t = 1.0;
            let mut moved = false;
            for _ in 0..60 {
                let cand = &v + &Array2::from_shape_fn((u_n, d_n), |(u, d)| t * step[u * d_n + d]);
                let fc = self.naive_value(&cand, beta);
                if fc <= f + 1e-4 * t * slope {
                    moved = fc < f;
                    v = cand;
                    f = fc;
                    break;
                }
                t *= 0.5;
            }
            if !moved {
                break;
            }
        }
        (v, f)
    }
}

/// Gaussian elimination with partial pivoting.
pub fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let factor = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= factor * a[col][k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let tail: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - tail) / a[row][row];
    }
    x
}

/// Solver settings tight enough for comparisons against exhaustive oracles.
pub fn tight_settings() -> SolverSettings {
    SolverSettings {
        outer_tolerance: 1e-10,
        max_outer_iters: 2000,
        v_tolerance: 1e-10,
        beta_tolerance: 1e-10,
        ..Default::default()
    }
}

/// Grid over the image weight (`[t, 1 - t]`) with a Newton solve in `V` at
/// each point, then a golden-section refinement around the best grid point.
pub fn joint_oracle(inst: &Instance, spacing: f64) -> f64 {
    let steps = (1.0 / spacing).round() as usize;
    let zero = || Array2::zeros((inst.unseen(), inst.dim()));
    let mut best = (f64::INFINITY, 0.0);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let f = inst.newton_v(&[t, 1.0 - t], zero()).1;
        if f < best.0 {
            best = (f, t);
        }
    }
    let profile = |t: f64| inst.newton_v(&[t, 1.0 - t], zero()).1;
    let (mut lo, mut hi) = ((best.1 - spacing).max(0.0), (best.1 + spacing).min(1.0));
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..40 {
        let c = hi - phi * (hi - lo);
        let e = lo + phi * (hi - lo);
        if profile(c) < profile(e) {
            hi = e;
        } else {
            lo = c;
        }
    }
    best.0.min(profile(0.5 * (lo + hi)))
}

pub fn simplex_ok(beta: &Array1<f64>, tol: f64) -> bool {
    beta.iter().all(|&b| b >= -tol) && (beta.sum() - 1.0).abs() <= tol
}
