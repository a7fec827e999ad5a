//! Temperature-softened distillation losses and the adaptive weight solver.
//!
//! Distilling from two teachers at once is treated as a multi-objective
//! problem: the weights are the minimizer of `½‖Σ α_m g_m‖²` over the capped
//! simplex `{Σ α_m = 1, 0 ≤ α_m ≤ C}`, where `g_m` is the gradient of the
//! m-th teacher's distillation loss with respect to the student's shared
//! features. The two-vector case has a closed form; the general case runs
//! Frank-Wolfe with exact line search over the polytope.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::Mat;

/// Which quadratic-program solver backs [`min_norm_weights`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    /// Exact closed form; two gradient vectors only.
    ClosedForm2,
    /// Frank-Wolfe over the capped simplex; any number of vectors.
    FrankWolfe,
}

/// How the trainer assigns the two distillation weights each step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "alpha")]
pub enum WeightMode {
    /// Solve the min-norm problem on the batch's feature gradients.
    Adaptive,
    /// Fixed weight for teacher 1 (teacher 2 gets `1 - alpha`).
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    /// Softening temperature for both student and teacher logits.
    pub temperature: f64,
    /// Box bound `C` on each weight.
    pub c_bound: f64,
    pub solver: Solver,
    pub weight_mode: WeightMode,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            temperature: 1.0,
            c_bound: 1.0,
            solver: Solver::ClosedForm2,
            weight_mode: WeightMode::Adaptive,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::config("temperature", "must be > 0"));
        }
        if !(self.c_bound > 0.0 && self.c_bound <= 1.0) {
            return Err(Error::config("c_bound", "must be in (0, 1]"));
        }
        if let WeightMode::Fixed(a) = self.weight_mode {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::config("weight_mode.alpha", "must be in [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Solution of the constrained min-norm problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinNormSolution {
    /// Convex weights, one per gradient vector; sum to 1, each in `[0, C]`.
    pub alphas: Vec<f64>,
    /// Attained value of `½‖Σ α_m g_m‖²`.
    pub objective: f64,
}

/// Temperature-softened softmax of one logits row.
pub fn soften(logits_row: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::config("temperature", "must be > 0"));
    }
    let scaled: Vec<f64> = logits_row.iter().map(|&x| x / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scaled.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    Ok(out)
}

/// Token-averaged cross-entropy between the softened teacher and softened
/// student distributions. Always at least the softened teacher's entropy,
/// with equality exactly when the softened rows coincide.
pub fn kd_loss(student_logits: &Mat, teacher_logits: &Mat, temperature: f64) -> Result<f64> {
    if student_logits.rows() != teacher_logits.rows()
        || student_logits.cols() != teacher_logits.cols()
    {
        return Err(Error::Input(format!(
            "logit shapes differ: {}x{} vs {}x{}",
            student_logits.rows(),
            student_logits.cols(),
            teacher_logits.rows(),
            teacher_logits.cols()
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::config("temperature", "must be > 0"));
    }
    let n = student_logits.rows();
    if n == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for j in 0..n {
        let p_t = soften(teacher_logits.row(j), temperature)?;
        let log_ps = log_softmax_scaled(student_logits.row(j), temperature);
        let mut h = 0.0;
        for (pt, lps) in p_t.iter().zip(&log_ps) {
            h -= pt * lps;
        }
        total += h;
    }
    Ok(total / n as f64)
}

fn log_softmax_scaled(row: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = row.iter().map(|&x| x / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = scaled.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    scaled.iter().map(|&x| x - max - log_sum).collect()
}

/// Total student loss: `ce + alpha * kd1 + (1 - alpha) * kd2`.
pub fn total_student_loss(ce: f64, kd1: f64, kd2: f64, alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config("alpha", "must be in [0, 1]"));
    }
    Ok(ce + alpha * kd1 + (1.0 - alpha) * kd2)
}

/// Minimizes `½‖Σ α_m g_m‖²` subject to `Σ α_m = 1`, `0 ≤ α_m ≤ C`.
///
/// All-identical gradients are a degenerate tie (any feasible point is
/// optimal) resolved symmetrically to the uniform weights.
pub fn min_norm_weights(
    feature_grads: &[Vec<f64>],
    c_bound: f64,
    solver: Solver,
) -> Result<MinNormSolution> {
    let m = feature_grads.len();
    if m < 2 {
        return Err(Error::Input("need at least 2 gradient vectors".into()));
    }
    let dim = feature_grads[0].len();
    if dim == 0 {
        return Err(Error::Input("zero-length gradient vectors".into()));
    }
    if feature_grads.iter().any(|g| g.len() != dim) {
        return Err(Error::Input("gradient vectors differ in length".into()));
    }
    if !(c_bound > 0.0 && c_bound <= 1.0) {
        return Err(Error::config("c_bound", "must be in (0, 1]"));
    }
    if c_bound * (m as f64) < 1.0 - 1e-12 {
        return Err(Error::config(
            "c_bound",
            format!("C must be >= 1/M = {}", 1.0 / m as f64),
        ));
    }
    if feature_grads.windows(2).all(|w| w[0] == w[1]) {
        let alphas = vec![1.0 / m as f64; m];
        let objective = objective_of(feature_grads, &alphas);
        return Ok(MinNormSolution { alphas, objective });
    }
    match solver {
        Solver::ClosedForm2 => {
            if m != 2 {
                return Err(Error::Input(format!(
                    "closed_form_2 solves exactly 2 vectors, got {m}"
                )));
            }
            Ok(closed_form_2(&feature_grads[0], &feature_grads[1], c_bound))
        }
        Solver::FrankWolfe => Ok(frank_wolfe(feature_grads, c_bound)),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn objective_of(grads: &[Vec<f64>], alphas: &[f64]) -> f64 {
    let dim = grads[0].len();
    let mut combined = vec![0.0; dim];
    for (g, &a) in grads.iter().zip(alphas) {
        for (c, &v) in combined.iter_mut().zip(g) {
            *c += a * v;
        }
    }
    0.5 * dot(&combined, &combined)
}

/// Two-vector case: the objective is a 1-D convex quadratic in α₁, so the
/// unconstrained minimizer `((g₂-g₁)·g₂) / ‖g₁-g₂‖²` clipped into
/// `[1-C, C] ∩ [0, 1]` is exact.
fn closed_form_2(g1: &[f64], g2: &[f64], c_bound: f64) -> MinNormSolution {
    let diff: Vec<f64> = g1.iter().zip(g2).map(|(a, b)| a - b).collect();
    let denom = dot(&diff, &diff);
    let alpha1 = if denom == 0.0 {
        0.5
    } else {
        let raw = (dot(g2, g2) - dot(g1, g2)) / denom;
        raw.clamp(0.0, 1.0).clamp(1.0 - c_bound, c_bound)
    };
    let alphas = vec![alpha1, 1.0 - alpha1];
    let objective = objective_of(&[g1.to_vec(), g2.to_vec()], &alphas);
    MinNormSolution { alphas, objective }
}

const FW_GAP_TOL: f64 = 1e-9;
const FW_MAX_ITERS: usize = 10_000;

/// Frank-Wolfe with exact line search. The linear minimization oracle over
/// the capped simplex greedily loads mass `C` onto the coordinates with the
/// smallest gradient; termination is on the duality gap.
fn frank_wolfe(grads: &[Vec<f64>], c_bound: f64) -> MinNormSolution {
    let m = grads.len();
    // Gram matrix of the gradient vectors.
    let mut q = vec![vec![0.0; m]; m];
    for i in 0..m {
        for j in i..m {
            let v = dot(&grads[i], &grads[j]);
            q[i][j] = v;
            q[j][i] = v;
        }
    }
    let mut alphas = vec![1.0 / m as f64; m];
    for _ in 0..FW_MAX_ITERS {
        // ∇f(α) = Q α.
        let grad: Vec<f64> = (0..m).map(|i| dot(&q[i], &alphas)).collect();
        let s = capped_simplex_lmo(&grad, c_bound);
        let gap: f64 = (0..m).map(|i| grad[i] * (alphas[i] - s[i])).sum();
        if gap <= FW_GAP_TOL {
            break;
        }
        let d: Vec<f64> = (0..m).map(|i| s[i] - alphas[i]).collect();
        // Curvature dᵀQd for the exact step along d.
        let mut dqd = 0.0;
        for i in 0..m {
            dqd += d[i] * dot(&q[i], &d);
        }
        let step = if dqd <= 0.0 { 1.0 } else { (gap / dqd).clamp(0.0, 1.0) };
        for i in 0..m {
            alphas[i] += step * d[i];
        }
    }
    // Clean tiny constraint violations from float accumulation.
    for a in &mut alphas {
        *a = a.clamp(0.0, c_bound);
    }
    let sum: f64 = alphas.iter().sum();
    for a in &mut alphas {
        *a /= sum;
    }
    let objective = objective_of(grads, &alphas);
    MinNormSolution { alphas, objective }
}

/// Vertex of `{Σ s = 1, 0 ≤ s ≤ C}` minimizing `⟨grad, s⟩`.
fn capped_simplex_lmo(grad: &[f64], c_bound: f64) -> Vec<f64> {
    let m = grad.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| grad[a].partial_cmp(&grad[b]).unwrap().then(a.cmp(&b)));
    let mut s = vec![0.0; m];
    let mut remaining = 1.0;
    for &i in &order {
        let take = c_bound.min(remaining);
        s[i] = take;
        remaining -= take;
        if remaining <= 0.0 {
            break;
        }
    }
    s
}
