//! Pose regression head and the homoscedastic pose loss.
//!
//! Two small MLPs map the pooled transformer feature to a translation
//! `l ∈ R^3` and a quaternion `q ∈ R^4`. The loss balances the translation
//! and rotation terms with learnable log-variances:
//!
//! `L = ||l - l̂||_1 e^{-beta} + beta + ||log q - log q̂||_1 e^{-gamma} + gamma`
//!
//! where `log` is the unit-quaternion logarithm.

use candle_core::{Tensor, Var};
use candle_nn::{Linear, Module};

use crate::error::{Error, Result};
use crate::nn::{acos, dropout, Init, Mode, ParamStore};

/// Threshold below which the quaternion log switches to its small-angle form.
const SMALL_ANGLE: f64 = 1e-8;

fn linear(
    ps: &mut ParamStore,
    prefix: &str,
    in_dim: usize,
    out_dim: usize,
    bias: Init,
) -> Result<Linear> {
    let w = ps.param(&format!("{prefix}.weight"), &[out_dim, in_dim], Init::FanIn)?;
    let b = ps.param(&format!("{prefix}.bias"), &[out_dim], bias)?;
    Ok(Linear::new(w, Some(b)))
}

/// Two parallel MLP regressors over the pooled feature vector.
pub struct PoseHead {
    trans_fc1: Linear,
    trans_fc2: Linear,
    rot_fc1: Linear,
    rot_fc2: Linear,
    dropout_rate: f64,
}

impl PoseHead {
    pub fn new(ps: &mut ParamStore, prefix: &str, d_model: usize, dropout_rate: f64) -> Result<Self> {
        Ok(Self {
            trans_fc1: linear(ps, &format!("{prefix}.trans.fc1"), d_model, d_model, Init::Const(0.0))?,
            trans_fc2: linear(ps, &format!("{prefix}.trans.fc2"), d_model, 3, Init::Const(0.0))?,
            rot_fc1: linear(ps, &format!("{prefix}.rot.fc1"), d_model, d_model, Init::Const(0.0))?,
            // Bias the raw rotation output toward the identity quaternion so
            // the head starts near a valid orientation.
            rot_fc2: linear(
                ps,
                &format!("{prefix}.rot.fc2"),
                d_model,
                4,
                Init::Values(vec![1.0, 0.0, 0.0, 0.0]),
            )?,
            dropout_rate,
        })
    }

    /// Returns `(l, q_raw)` with shapes `(B, 3)` and `(B, 4)`; `q_raw` is the
    /// unnormalized quaternion in `(w, x, y, z)` order.
    pub fn forward(&self, pooled: &Tensor, mode: &mut Mode) -> Result<(Tensor, Tensor)> {
        let th = self.trans_fc1.forward(pooled)?.gelu()?;
        let th = dropout(&th, self.dropout_rate, mode)?;
        let l = self.trans_fc2.forward(&th)?;
        let rh = self.rot_fc1.forward(pooled)?.gelu()?;
        let rh = dropout(&rh, self.dropout_rate, mode)?;
        let q = self.rot_fc2.forward(&rh)?;
        Ok((l, q))
    }
}

/// Normalizes raw quaternions to unit length and flips each onto the `w >= 0`
/// hemisphere. The flip sign is detached so gradients flow through the
/// normalization only.
pub fn canonicalize_quat_t(q_raw: &Tensor) -> Result<Tensor> {
    let (_, four) = q_raw.dims2()?;
    if four != 4 {
        return Err(Error::Shape(format!("expected (B, 4) quaternions, got last dim {four}")));
    }
    let norm = q_raw.sqr()?.sum_keepdim(1)?.sqrt()?;
    let min_norm = norm.min_all()?.to_scalar::<f64>()?;
    if !min_norm.is_finite() || min_norm < 1e-12 {
        return Err(Error::DegenerateQuaternion);
    }
    let unit = q_raw.broadcast_div(&norm)?;
    let w = unit.narrow(1, 0, 1)?;
    // sign = +1 where w >= 0, -1 otherwise; constant w.r.t. the parameters.
    let sign = ((w.ge(0.0)?.to_dtype(q_raw.dtype())? * 2.0)? - 1.0)?.detach();
    Ok(unit.broadcast_mul(&sign)?)
}

/// Logarithm of unit quaternions, batched: `(B, 4)` in `(w, x, y, z)` order to
/// `(B, 3)`. Uses `(v / ||v||) acos(w)` and the small-angle form `v / w` when
/// `||v|| < 1e-8`.
pub fn quat_log_t(q: &Tensor) -> Result<Tensor> {
    let w = q.narrow(1, 0, 1)?;
    let v = q.narrow(1, 1, 3)?;
    let vn = v.sqr()?.sum_keepdim(1)?.sqrt()?;

    // Both branches are evaluated everywhere, so each must stay finite (and
    // produce finite gradients) even where it is not selected.
    let one = vn.ones_like()?;
    let w_safe = w.abs()?.ge(0.5)?.where_cond(&w, &one)?;
    let small = v.broadcast_div(&w_safe)?;

    let vn_floor = (&one * SMALL_ANGLE)?;
    let vn_safe = vn.maximum(&vn_floor)?;
    let w_clamped = w.clamp(-1.0 + 1e-12, 1.0 - 1e-12)?;
    let angle = acos(&w_clamped)?;
    let large = v.broadcast_div(&vn_safe)?.broadcast_mul(&angle)?;

    let cond = vn.lt(SMALL_ANGLE)?.broadcast_as(v.shape())?;
    Ok(cond.where_cond(&small, &large)?)
}

/// Learnable homoscedastic balance terms.
pub struct LossParams {
    pub beta: Var,
    pub gamma: Var,
}

impl LossParams {
    pub fn new(ps: &mut ParamStore, beta0: f64, gamma0: f64) -> Result<Self> {
        Ok(Self {
            beta: ps.param_var("loss.beta", &[1], Init::Const(beta0))?,
            gamma: ps.param_var("loss.gamma", &[1], Init::Const(gamma0))?,
        })
    }

    pub fn beta_value(&self) -> Result<f64> {
        Ok(self.beta.as_tensor().reshape(1)?.get(0)?.to_scalar::<f64>()?)
    }

    pub fn gamma_value(&self) -> Result<f64> {
        Ok(self.gamma.as_tensor().reshape(1)?.get(0)?.to_scalar::<f64>()?)
    }
}

/// Batch-mean L1 over the last dim, kept as a scalar tensor in the graph.
fn mean_l1(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.abs()?.sum(1)?.mean(0)?)
}

/// The full pose loss. `target_q` must already be unit, `w >= 0` quaternions;
/// `pred_q_raw` is normalized and canonicalized internally.
pub fn pose_loss(
    pred_l: &Tensor,
    pred_q_raw: &Tensor,
    target_l: &Tensor,
    target_q: &Tensor,
    params: &LossParams,
) -> Result<Tensor> {
    let pred_q = canonicalize_quat_t(pred_q_raw)?;
    let trans_term = mean_l1(pred_l, target_l)?;
    let rot_term = mean_l1(&quat_log_t(&pred_q)?, &quat_log_t(target_q)?)?;
    let beta = params.beta.as_tensor().reshape(())?;
    let gamma = params.gamma.as_tensor().reshape(())?;
    let loss = ((trans_term * beta.neg()?.exp()?)? + &beta)?;
    Ok((loss + ((rot_term * gamma.neg()?.exp()?)? + &gamma)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quat::UnitQuaternion;
    use candle_core::Device;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn quat_batch(quats: &[UnitQuaternion]) -> Tensor {
        let data: Vec<f64> = quats.iter().flat_map(|q| q.as_wxyz()).collect();
        Tensor::from_vec(data, (quats.len(), 4), &Device::Cpu).unwrap()
    }

    fn random_unit_quat(rng: &mut ChaCha8Rng) -> UnitQuaternion {
        UnitQuaternion::canonicalize([
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ])
        .unwrap()
    }

    #[test]
    fn batched_log_matches_scalar_log() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let quats: Vec<UnitQuaternion> = (0..64).map(|_| random_unit_quat(&mut rng)).collect();
        let batch = quat_batch(&quats);
        let logs = quat_log_t(&batch).unwrap();
        for (i, q) in quats.iter().enumerate() {
            let expect = q.log();
            let got = logs.get(i).unwrap().to_vec1::<f64>().unwrap();
            for k in 0..3 {
                assert!(
                    (got[k] - expect[k]).abs() < 1e-9,
                    "quat {i} component {k}: {} vs {}",
                    got[k],
                    expect[k]
                );
            }
        }
    }

    #[test]
    fn log_of_identity_is_zero_and_finite_gradients_near_identity() {
        let q = quat_batch(&[UnitQuaternion::identity()]);
        let logs = quat_log_t(&q).unwrap();
        assert_eq!(logs.flatten_all().unwrap().to_vec1::<f64>().unwrap(), vec![0.0; 3]);

        // Gradient through an almost-identity quaternion must be finite.
        let raw = Var::from_tensor(
            &Tensor::from_vec(vec![1.0f64, 1e-10, 0.0, 0.0], (1, 4), &Device::Cpu).unwrap(),
        )
        .unwrap();
        let canon = canonicalize_quat_t(raw.as_tensor()).unwrap();
        let out = quat_log_t(&canon).unwrap().sqr().unwrap().sum_all().unwrap();
        let grads = out.backward().unwrap();
        let g = grads.get(&raw).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for gi in g {
            assert!(gi.is_finite(), "gradient {gi} not finite");
        }
    }

    #[test]
    fn canonicalize_normalizes_and_flips() {
        let raw = Tensor::from_vec(
            vec![-2.0f64, 0.0, 0.0, 0.0, 0.0, 3.0, 0.0, 0.0],
            (2, 4),
            &Device::Cpu,
        )
        .unwrap();
        let canon = canonicalize_quat_t(&raw).unwrap();
        let rows = canon.to_vec2::<f64>().unwrap();
        // -2 identity flips to +identity.
        assert_eq!(rows[0], vec![1.0, 0.0, 0.0, 0.0]);
        // w = 0: sign of w >= 0 keeps it as-is, normalized.
        assert_eq!(rows[1], vec![0.0, 1.0, 0.0, 0.0]);
        // Unit norm afterwards.
        for row in rows {
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn canonicalize_rejects_near_zero_quaternions() {
        let raw = Tensor::from_vec(vec![1e-15f64, 0.0, 0.0, 0.0], (1, 4), &Device::Cpu).unwrap();
        assert!(matches!(
            canonicalize_quat_t(&raw).unwrap_err(),
            Error::DegenerateQuaternion
        ));
    }

    #[test]
    fn loss_at_perfect_prediction_is_beta_plus_gamma() {
        let mut ps = ParamStore::new(0);
        let params = LossParams::new(&mut ps, -3.0, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = quat_batch(&[random_unit_quat(&mut rng), random_unit_quat(&mut rng)]);
        let l = Tensor::from_vec(vec![0.5f64, -1.0, 2.0, 0.0, 0.1, -0.2], (2, 3), &Device::Cpu)
            .unwrap();
        let loss = pose_loss(&l, &q, &l, &q, &params).unwrap().to_scalar::<f64>().unwrap();
        assert!((loss - (-3.0 + 0.0)).abs() < 1e-12, "loss = {loss}");
    }

    #[test]
    fn loss_matches_hand_computed_value() {
        // One sample, known translation error, identity rotations.
        let mut ps = ParamStore::new(0);
        let params = LossParams::new(&mut ps, -1.0, 0.5).unwrap();
        let q = quat_batch(&[UnitQuaternion::identity()]);
        let l_pred = Tensor::from_vec(vec![1.0f64, 2.0, 3.0], (1, 3), &Device::Cpu).unwrap();
        let l_true = Tensor::from_vec(vec![0.0f64, 0.0, 1.0], (1, 3), &Device::Cpu).unwrap();
        // ||l - l̂||_1 = 1 + 2 + 2 = 5; rotation term = 0.
        let expect = 5.0 * (1.0f64).exp() + (-1.0) + 0.0 * (-0.5f64).exp() + 0.5;
        let loss = pose_loss(&l_pred, &q, &l_true, &q, &params)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!((loss - expect).abs() < 1e-12, "{loss} vs {expect}");
    }

    #[test]
    fn loss_increases_with_rotation_error() {
        let mut ps = ParamStore::new(0);
        let params = LossParams::new(&mut ps, 0.0, 0.0).unwrap();
        let l = Tensor::zeros((1, 3), crate::nn::DTYPE, &Device::Cpu).unwrap();
        let target = quat_batch(&[UnitQuaternion::identity()]);
        let small = quat_batch(&[UnitQuaternion::exp([0.0, 0.0, 0.05])]);
        let big = quat_batch(&[UnitQuaternion::exp([0.0, 0.0, 0.5])]);
        let loss_small = pose_loss(&l, &small, &l, &target, &params)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        let loss_big = pose_loss(&l, &big, &l, &target, &params)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!(loss_big > loss_small);
    }

    #[test]
    fn loss_gradients_reach_beta_and_gamma() {
        let mut ps = ParamStore::new(0);
        let params = LossParams::new(&mut ps, -3.0, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let target_q = quat_batch(&[random_unit_quat(&mut rng)]);
        let pred_q = quat_batch(&[random_unit_quat(&mut rng)]);
        let l_pred = Tensor::from_vec(vec![0.3f64, -0.7, 0.2], (1, 3), &Device::Cpu).unwrap();
        let l_true = Tensor::zeros((1, 3), crate::nn::DTYPE, &Device::Cpu).unwrap();
        let loss = pose_loss(&l_pred, &pred_q, &l_true, &target_q, &params).unwrap();
        let grads = loss.backward().unwrap();
        // d(loss)/d(beta) = 1 - t e^{-beta} where t is the translation term.
        let t = (&l_pred - &l_true)
            .unwrap()
            .abs()
            .unwrap()
            .sum_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        let g_beta = grads
            .get(&params.beta)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap()[0];
        let expect = 1.0 - t * (3.0f64).exp();
        assert!((g_beta - expect).abs() < 1e-9, "{g_beta} vs {expect}");
        assert!(grads.get(&params.gamma).is_some());
    }

    #[test]
    fn head_initial_rotation_is_near_identity() {
        let mut ps = ParamStore::new(3);
        let head = PoseHead::new(&mut ps, "head", 16, 0.0).unwrap();
        let pooled = Tensor::zeros((2, 16), crate::nn::DTYPE, &Device::Cpu).unwrap();
        let (l, q) = head.forward(&pooled, &mut Mode::Eval).unwrap();
        assert_eq!(l.dims(), &[2, 3]);
        assert_eq!(q.dims(), &[2, 4]);
        // Zero input through zero-bias layers leaves only the rotation bias.
        let row = q.get(0).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(row, vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(l.get(0).unwrap().to_vec1::<f64>().unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn head_outputs_depend_on_input() {
        let mut ps = ParamStore::new(4);
        let head = PoseHead::new(&mut ps, "head", 16, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let xa = Tensor::from_vec(a, (1, 16), &Device::Cpu).unwrap();
        let xb = Tensor::from_vec(b, (1, 16), &Device::Cpu).unwrap();
        let (la, qa) = head.forward(&xa, &mut Mode::Eval).unwrap();
        let (lb, qb) = head.forward(&xb, &mut Mode::Eval).unwrap();
        let dl = (la - lb).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        let dq = (qa - qb).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(dl > 1e-9);
        assert!(dq > 1e-9);
    }
}
