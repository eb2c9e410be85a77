//! Composite training loss: cross-entropy over seen classes, reconstruction
//! of the unified text embedding, and regression between the two output
//! embeddings.
//!
//! Every component is a mean over the `n` samples of the batch. The
//! cross-entropy logits are raw dot products `θ_w[j] · θ_o[i]` with no
//! normalization or temperature.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{ForwardTrace, LossTerms, TraceGrads};
use crate::nn::{mean_squared_error, softmax_cross_entropy, Matrix, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossOptions {
    pub terms: LossTerms,
    /// Treat `w` as a constant target inside the reconstruction loss.
    pub stop_target_gradient: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            terms: LossTerms::ALL,
            stop_target_gradient: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ce: f64,
    pub l_rec: f64,
    pub l_reg: f64,
    pub l_total: f64,
}

/// A loss value with its gradient w.r.t. the trace.
#[derive(Debug, Clone)]
pub struct Scored<T> {
    pub value: T,
    pub grads: TraceGrads<T>,
}

fn scatter_rows<T: Real>(dst: &mut Matrix<T>, rows: &[usize], src: &Matrix<T>, sign: T) {
    for (i, &r) in rows.iter().enumerate() {
        for (d, &s) in dst.row_mut(r).iter_mut().zip(src.row(i)) {
            *d += sign * s;
        }
    }
}

pub fn loss_ce<T: Real>(trace: &ForwardTrace<T>) -> Result<Scored<T>> {
    let logits = trace.theta_o.matmul_t(&trace.theta_w)?;
    let (value, g) = softmax_cross_entropy(&logits, &trace.gt_rows)?;
    let mut grads = TraceGrads::zeros_like(trace);
    grads.theta_o = g.matmul(&trace.theta_w)?;
    grads.theta_w = g.t_matmul(&trace.theta_o)?;
    Ok(Scored { value, grads })
}

pub fn loss_rec<T: Real>(trace: &ForwardTrace<T>, stop_target_gradient: bool) -> Result<Scored<T>> {
    let target = trace.w.gather_rows(&trace.gt_rows);
    let (from_o, g_o) = mean_squared_error(&trace.rho_o, &target)?;
    let rho_w_rows = trace.rho_w.gather_rows(&trace.gt_rows);
    let (from_w, g_w) = mean_squared_error(&rho_w_rows, &target)?;

    let mut grads = TraceGrads::zeros_like(trace);
    grads.rho_o = g_o.clone();
    scatter_rows(&mut grads.rho_w, &trace.gt_rows, &g_w, T::ONE);
    if !stop_target_gradient {
        scatter_rows(&mut grads.w, &trace.gt_rows, &g_o, -T::ONE);
        scatter_rows(&mut grads.w, &trace.gt_rows, &g_w, -T::ONE);
    }
    Ok(Scored {
        value: from_o + from_w,
        grads,
    })
}

pub fn loss_reg<T: Real>(trace: &ForwardTrace<T>) -> Result<Scored<T>> {
    let target = trace.theta_w.gather_rows(&trace.gt_rows);
    let (value, g) = mean_squared_error(&trace.theta_o, &target)?;
    let mut grads = TraceGrads::zeros_like(trace);
    scatter_rows(&mut grads.theta_w, &trace.gt_rows, &g, -T::ONE);
    grads.theta_o = g;
    Ok(Scored { value, grads })
}

/// Unweighted sum of the enabled components. Disabled components report 0
/// and contribute no gradient.
pub fn loss_total<T: Real>(
    trace: &ForwardTrace<T>,
    options: &LossOptions,
) -> Result<(LossBreakdown, TraceGrads<T>)> {
    let mut grads = TraceGrads::zeros_like(trace);
    let mut b = LossBreakdown::default();
    let mut total = T::ZERO;
    if options.terms.ce {
        let s = loss_ce(trace)?;
        b.l_ce = s.value.to_f64();
        total += s.value;
        grads.accumulate(&s.grads)?;
    }
    if options.terms.rec {
        let s = loss_rec(trace, options.stop_target_gradient)?;
        b.l_rec = s.value.to_f64();
        total += s.value;
        grads.accumulate(&s.grads)?;
    }
    if options.terms.reg {
        let s = loss_reg(trace)?;
        b.l_reg = s.value.to_f64();
        total += s.value;
        grads.accumulate(&s.grads)?;
    }
    b.l_total = total.to_f64();
    Ok((b, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn trace(theta_o: Matrix<f64>, theta_w: Matrix<f64>, gt: Vec<usize>) -> ForwardTrace<f64> {
        let b = theta_o.rows();
        let c = theta_w.rows();
        ForwardTrace {
            o: Matrix::zeros(b, 3),
            theta_o,
            w: Matrix::zeros(c, 3),
            theta_w,
            rho_o: Matrix::zeros(b, 3),
            rho_w: Matrix::zeros(c, 3),
            gt_rows: gt,
        }
    }

    #[test]
    fn ce_with_orthonormal_classes() {
        let theta_w = Matrix::<f64>::identity(3);
        let theta_o = Matrix::from_rows(&[[10.0, 0.0, 0.0], [0.0, 0.0, 10.0]]);
        let s = loss_ce(&trace(theta_o, theta_w, vec![0, 2])).unwrap();
        let expected = -(10f64.exp() / (10f64.exp() + 2.0)).ln();
        assert!((s.value - expected).abs() < 1e-15);
        assert!((s.value - 9.1e-5).abs() < 1e-6);
    }

    #[test]
    fn ce_with_zero_output_is_ln_k() {
        let theta_w = Matrix::from_rows(&[[1.0, 2.0], [-0.5, 0.3], [4.0, 0.0]]);
        let s = loss_ce(&trace(Matrix::zeros(2, 2), theta_w, vec![1, 2])).unwrap();
        assert_eq!(s.value, 3f64.ln());
    }

    #[test]
    fn ce_matches_hand_softmax() {
        // logits row 0 = [1, 2], row 1 = [0.5, -0.5]
        let theta_w = Matrix::<f64>::identity(2);
        let theta_o = Matrix::from_rows(&[[1.0, 2.0], [0.5, -0.5]]);
        let s = loss_ce(&trace(theta_o, theta_w, vec![0, 0])).unwrap();
        let l0 = -(1f64.exp() / (1f64.exp() + 2f64.exp())).ln();
        let l1 = -(0.5f64.exp() / (0.5f64.exp() + (-0.5f64).exp())).ln();
        assert!((s.value - (l0 + l1) / 2.0).abs() < 1e-6);
    }

    #[test]
    fn rec_values() {
        let mut t = trace(Matrix::zeros(1, 2), Matrix::zeros(2, 2), vec![1]);
        t.w = Matrix::from_rows(&[[9.0, 9.0, 9.0], [0.5, 0.5, 0.5]]);
        t.rho_o = Matrix::from_rows(&[[0.5, 0.5, 0.5]]);
        t.rho_w = t.w.clone();
        assert_eq!(loss_rec(&t, false).unwrap().value, 0.0);

        t.rho_o = Matrix::from_rows(&[[1.5, 0.5, 0.5]]);
        t.rho_w = Matrix::from_rows(&[[9.0, 9.0, 9.0], [0.5, 2.5, 0.5]]);
        assert_eq!(loss_rec(&t, false).unwrap().value, 5.0);

        let mut doubled = t.clone();
        doubled.rho_o = t.rho_o.vconcat(&t.rho_o).unwrap();
        doubled.gt_rows = vec![1, 1];
        assert_eq!(loss_rec(&doubled, false).unwrap().value, 5.0);
    }

    #[test]
    fn stop_gradient_only_removes_target_gradient() {
        let mut t = trace(Matrix::zeros(1, 2), Matrix::zeros(2, 2), vec![1]);
        t.w = Matrix::from_rows(&[[9.0, 9.0, 9.0], [0.5, 0.5, 0.5]]);
        t.rho_o = Matrix::from_rows(&[[1.5, 0.5, 0.5]]);
        t.rho_w = Matrix::from_rows(&[[9.0, 9.0, 9.0], [0.5, 2.5, 0.5]]);
        let live = loss_rec(&t, false).unwrap();
        let stopped = loss_rec(&t, true).unwrap();
        assert_eq!(live.value, stopped.value);
        assert_eq!(live.grads.rho_o, stopped.grads.rho_o);
        assert_eq!(stopped.grads.w.max_abs(), 0.0);
        assert_eq!(live.grads.w.row(1), &[-2.0, -4.0, 0.0]);
    }

    #[test]
    fn reg_values() {
        let theta_w = Matrix::from_vec(1, 64, vec![1.0; 64]).unwrap();
        let theta_o = Matrix::from_vec(1, 64, vec![1.5; 64]).unwrap();
        assert_eq!(loss_reg(&trace(theta_o, theta_w.clone(), vec![0])).unwrap().value, 16.0);
        assert_eq!(loss_reg(&trace(theta_w.clone(), theta_w, vec![0])).unwrap().value, 0.0);
    }

    #[test]
    fn total_is_sum_of_enabled_terms() {
        let theta_w = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        let mut t = trace(Matrix::from_rows(&[[0.2, 0.7]]), theta_w, vec![1]);
        t.rho_o = Matrix::from_rows(&[[1.0, 0.0, 0.0]]);
        let ce = loss_ce(&t).unwrap().value;
        let rec = loss_rec(&t, false).unwrap().value;
        let reg = loss_reg(&t).unwrap().value;
        let (b, _) = loss_total(&t, &LossOptions::default()).unwrap();
        assert_eq!(b.l_total, ce + rec + reg);

        let (only_reg, g) = loss_total(
            &t,
            &LossOptions {
                terms: LossTerms::REG_ONLY,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!((only_reg.l_ce, only_reg.l_rec, only_reg.l_reg), (0.0, 0.0, reg));
        assert_eq!(only_reg.l_total, reg);
        assert_eq!(g.rho_o.max_abs(), 0.0);
    }

    proptest! {
        #[test]
        fn reg_is_permutation_invariant(
            rows in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 4), 3),
            gt in prop::collection::vec(0usize..2, 3),
        ) {
            let theta_w = Matrix::from_rows(&[[0.1, 0.2, 0.3, 0.4], [-1.0, 0.0, 1.0, 2.0]]);
            let theta_o = Matrix::from_rows(&rows);
            let forward = loss_reg(&trace(theta_o.clone(), theta_w.clone(), gt.clone())).unwrap().value;
            let perm = [2, 0, 1];
            let permuted = loss_reg(&trace(
                theta_o.gather_rows(&perm),
                theta_w,
                perm.iter().map(|&i| gt[i]).collect(),
            )).unwrap().value;
            prop_assert!((forward - permuted).abs() < 1e-12);
            prop_assert!(forward >= 0.0);
        }
    }
}
