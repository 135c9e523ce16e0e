//! Cosine similarity and the symmetric in-batch contrastive (InfoNCE) loss.
//!
//! Row `i` of `a` and row `i` of `b` form the positive pair; every other
//! combination in the batch is a negative. The loss is the mean of the
//! row-wise and column-wise cross-entropies of the temperature-scaled cosine
//! similarity matrix. Gradients are taken with respect to the unnormalized
//! inputs and to `ln τ`.

use ndarray::{Array1, Array2, Axis, Zip};

use crate::error::{Error, Result};

/// Rows whose norm falls below this are divided by it instead.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    /// `scores[i][j] = cos(a_i, b_j) / tau`
    pub scores: Array2<f64>,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grad_a: Array2<f64>,
    pub grad_b: Array2<f64>,
    /// Derivative with respect to `ln τ`.
    pub grad_log_tau: f64,
}

fn row_norms(rows: &Array2<f64>) -> Array1<f64> {
    rows.map_axis(Axis(1), |r| r.dot(&r).sqrt().max(NORM_EPS))
}

pub fn l2_normalize(rows: &Array2<f64>) -> Array2<f64> {
    let norms = row_norms(rows);
    rows / &norms.insert_axis(Axis(1))
}

/// Cosine similarities between every row of `a` and every row of `b`.
/// Row counts may differ.
pub fn cosine_matrix(a: &Array2<f64>, b: &Array2<f64>) -> Result<Array2<f64>> {
    if a.ncols() != b.ncols() {
        return Err(Error::Shape(format!(
            "embedding dims differ: {} vs {}",
            a.ncols(),
            b.ncols()
        )));
    }
    Ok(l2_normalize(a).dot(&l2_normalize(b).t()))
}

fn check_pair(a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("a is {:?} but b is {:?}", a.dim(), b.dim())));
    }
    if a.nrows() == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if !a.iter().chain(b.iter()).all(|v| v.is_finite()) {
        return Err(Error::NonFinite("contrastive inputs".into()));
    }
    Ok(())
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

pub fn similarity(a: &Array2<f64>, b: &Array2<f64>, tau: f64) -> Result<SimilarityMatrix> {
    check_pair(a, b)?;
    check_tau(tau)?;
    Ok(SimilarityMatrix {
        scores: cosine_matrix(a, b)? / tau,
        tau,
    })
}

/// Softmax of each row with max subtraction; also returns `-mean_i log p[i][i]`.
fn softmax_rows(scores: &Array2<f64>) -> (Array2<f64>, f64) {
    let n = scores.nrows();
    let mut probs = Array2::zeros(scores.raw_dim());
    let mut nll = 0.0;
    for (i, (row, mut out)) in scores.rows().into_iter().zip(probs.rows_mut()).enumerate() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let log_sum = sum.ln();
        Zip::from(&mut out).and(&row).for_each(|p, &v| *p = (v - max - log_sum).exp());
        nll -= row[i] - max - log_sum;
    }
    (probs, nll / n as f64)
}

/// Backpropagates through `x / max(|x|, eps)` row by row.
fn normalize_backward(raw: &Array2<f64>, unit: &Array2<f64>, grad_unit: &Array2<f64>) -> Array2<f64> {
    let norms = raw.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    let mut out = grad_unit.clone();
    for ((mut g, u), &n) in out.rows_mut().into_iter().zip(unit.rows()).zip(&norms) {
        if n > NORM_EPS {
            let proj = u.dot(&g);
            Zip::from(&mut g).and(&u).for_each(|gk, &uk| *gk = (*gk - uk * proj) / n);
        } else {
            g.mapv_inplace(|v| v / NORM_EPS);
        }
    }
    out
}

/// Symmetric InfoNCE over a batch of positive pairs, with analytic gradients.
pub fn symmetric_contrastive_loss(a: &Array2<f64>, b: &Array2<f64>, tau: f64) -> Result<LossOutput> {
    check_pair(a, b)?;
    check_tau(tau)?;
    let n = a.nrows();
    let a_unit = l2_normalize(a);
    let b_unit = l2_normalize(b);
    let scores = a_unit.dot(&b_unit.t()) / tau;

    let (row_probs, row_loss) = softmax_rows(&scores);
    let scores_t = scores.t().to_owned();
    let (col_probs_t, col_loss) = softmax_rows(&scores_t);
    let loss = (0.5 * (row_loss + col_loss)).max(0.0);

    // dL/dscores = (P + Q - 2I) / (2n)
    let mut grad_scores = row_probs + col_probs_t.t();
    for i in 0..n {
        grad_scores[[i, i]] -= 2.0;
    }
    grad_scores /= 2.0 * n as f64;

    let grad_log_tau = -(&grad_scores * &scores).sum();
    let grad_cos = grad_scores / tau;
    let grad_a_unit = grad_cos.dot(&b_unit);
    let grad_b_unit = grad_cos.t().dot(&a_unit);

    let out = LossOutput {
        loss,
        grad_a: normalize_backward(a, &a_unit, &grad_a_unit),
        grad_b: normalize_backward(b, &b_unit, &grad_b_unit),
        grad_log_tau,
    };
    if !out.loss.is_finite()
        || !out.grad_log_tau.is_finite()
        || !out.grad_a.iter().chain(out.grad_b.iter()).all(|v| v.is_finite())
    {
        return Err(Error::NonFinite("contrastive loss or gradient".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((rows, cols), || -> f64 { StandardNormal.sample(&mut rng) })
    }

    #[test]
    fn normalize_examples() {
        assert_abs_diff_eq!(l2_normalize(&array![[3.0, 4.0]]), array![[0.6, 0.8]], epsilon = 1e-15);
        assert_eq!(l2_normalize(&array![[0.0, 0.0]]), array![[0.0, 0.0]]);
        let x = randn(3, 5, 1);
        assert_abs_diff_eq!(l2_normalize(&(&x * 7.5)), l2_normalize(&x), epsilon = 1e-15);
    }

    #[test]
    fn similarity_examples() {
        let e = array![[1.0, 0.0]];
        assert_eq!(similarity(&e, &e, 1.0).unwrap().scores, array![[1.0]]);
        assert_eq!(similarity(&e, &array![[0.0, 1.0]], 1.0).unwrap().scores, array![[0.0]]);
        let s = similarity(&e, &e, 0.07).unwrap().scores[[0, 0]];
        assert_abs_diff_eq!(s, 14.285714285714286, epsilon = 1e-12);
    }

    #[test]
    fn similarity_errors() {
        let e = array![[1.0, 0.0]];
        assert!(similarity(&e, &array![[1.0, 0.0, 0.0]], 1.0).is_err());
        assert!(similarity(&e, &e, 0.0).is_err());
        assert!(similarity(&e, &e, -1.0).is_err());
    }

    #[test]
    fn single_pair_loss_is_zero() {
        let out = symmetric_contrastive_loss(&array![[0.3, -2.0]], &array![[5.0, 1.0]], 0.07).unwrap();
        assert_eq!(out.loss, 0.0);
    }

    #[test]
    fn identical_rows_give_ln_b() {
        let a = Array2::from_shape_fn((4, 3), |(_, j)| [1.0, 2.0, -1.0][j]);
        let b = Array2::from_shape_fn((4, 3), |(_, j)| [0.5, 0.0, 3.0][j]);
        let out = symmetric_contrastive_loss(&a, &b, 0.07).unwrap();
        assert_abs_diff_eq!(out.loss, 4f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(out.loss, 1.386294, epsilon = 1e-6);
    }

    #[test]
    fn two_orthogonal_pairs_by_hand() {
        // each row softmax is [e, 1] / (e + 1) so CE = ln(1 + e^-1)
        let eye = array![[1.0, 0.0], [0.0, 1.0]];
        let out = symmetric_contrastive_loss(&eye, &eye, 1.0).unwrap();
        assert_abs_diff_eq!(out.loss, (1.0 + (-1f64).exp()).ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(out.loss, 0.313262, epsilon = 1e-6);
    }

    #[test]
    fn tiny_tau_is_finite() {
        let a = randn(6, 4, 2);
        let b = randn(6, 4, 3);
        let out = symmetric_contrastive_loss(&a, &b, 0.01).unwrap();
        assert!(out.loss.is_finite());
        let out = symmetric_contrastive_loss(&a, &b, 1e-4).unwrap();
        assert!(out.loss.is_finite());
    }

    #[test]
    fn zero_row_is_legal() {
        let a = array![[0.0, 0.0], [1.0, 0.0]];
        let b = array![[1.0, 1.0], [0.0, 1.0]];
        let s = similarity(&a, &b, 1.0).unwrap();
        assert_eq!(s.scores.row(0).to_vec(), vec![0.0, 0.0]);
        assert!(symmetric_contrastive_loss(&a, &b, 0.5).is_ok());
    }

    #[test]
    fn shape_and_finiteness_errors() {
        let a = randn(3, 2, 1);
        assert!(symmetric_contrastive_loss(&a, &randn(2, 2, 1), 1.0).is_err());
        assert!(symmetric_contrastive_loss(&Array2::zeros((0, 2)), &Array2::zeros((0, 2)), 1.0).is_err());
        let mut bad = a.clone();
        bad[[1, 1]] = f64::INFINITY;
        assert!(matches!(symmetric_contrastive_loss(&bad, &a, 1.0), Err(Error::NonFinite(_))));
    }

    fn loss_at(a: &Array2<f64>, b: &Array2<f64>, log_tau: f64) -> f64 {
        symmetric_contrastive_loss(a, b, log_tau.exp()).unwrap().loss
    }

    #[test]
    fn gradients_match_central_differences() {
        let h = 1e-5;
        for seed in 0..5 {
            let a = randn(5, 3, 10 + seed);
            let b = randn(5, 3, 20 + seed);
            let log_tau = (0.3f64).ln();
            let out = symmetric_contrastive_loss(&a, &b, log_tau.exp()).unwrap();
            let rel = |fd: f64, an: f64| (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            for idx in ndarray::indices(a.dim()) {
                let (mut p, mut m) = (a.clone(), a.clone());
                p[idx] += h;
                m[idx] -= h;
                let fd = (loss_at(&p, &b, log_tau) - loss_at(&m, &b, log_tau)) / (2.0 * h);
                assert!(rel(fd, out.grad_a[idx]) < 1e-4, "a{idx:?}");
                let (mut p, mut m) = (b.clone(), b.clone());
                p[idx] += h;
                m[idx] -= h;
                let fd = (loss_at(&a, &p, log_tau) - loss_at(&a, &m, log_tau)) / (2.0 * h);
                assert!(rel(fd, out.grad_b[idx]) < 1e-4, "b{idx:?}");
            }
            let fd = (loss_at(&a, &b, log_tau + h) - loss_at(&a, &b, log_tau - h)) / (2.0 * h);
            assert!(rel(fd, out.grad_log_tau) < 1e-4);
        }
    }

    #[test]
    fn gradient_descent_decreases_loss() {
        let mut a = randn(8, 4, 77);
        let b = randn(8, 4, 78);
        let lr = 0.05;
        let mut prev = symmetric_contrastive_loss(&a, &b, 0.5).unwrap();
        for step in 0..200 {
            a = &a - &(&prev.grad_a * lr);
            let next = symmetric_contrastive_loss(&a, &b, 0.5).unwrap();
            assert!(next.loss < prev.loss, "step {step}: {} -> {}", prev.loss, next.loss);
            prev = next;
        }
    }
}
