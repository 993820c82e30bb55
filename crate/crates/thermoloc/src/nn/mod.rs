//! Tensor-side building blocks shared by the backbone and the pose head:
//! a seed-deterministic parameter store, batch normalization whose running
//! statistics live in the checkpointed variable map, seeded dropout, and a
//! differentiable `acos` (candle has no arc-cosine op).

use candle_core::{CpuStorage, CustomOp1, DType, Device, Layout, Shape, Tensor, Var};
use candle_nn::VarMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Forward-pass mode. Training mode carries the RNG that drives dropout so
/// that runs with the same seed are bitwise reproducible (the CPU backend of
/// candle cannot be seeded).
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Parameter initialization schemes.
#[derive(Debug, Clone)]
pub enum Init {
    Const(f64),
    /// Zero-mean normal with the given standard deviation.
    Normal(f64),
    /// Uniform in `+-sqrt(1 / fan_in)`, the usual default for conv/linear
    /// weights; `fan_in` is the product of all dimensions but the first.
    FanIn,
    /// Explicit values, e.g. structured biases.
    Values(Vec<f64>),
}

/// Named-parameter registry with deterministic initialization.
///
/// Parameters are `f64` on the CPU. Creation order is the initialization
/// order, so building the same model twice from the same seed yields
/// identical weights. The underlying [`VarMap`] provides safetensors
/// save/load for checkpoints.
pub struct ParamStore {
    map: VarMap,
    rng: ChaCha8Rng,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            map: VarMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            device: Device::Cpu,
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Creates (or errors on duplicate) a named parameter and returns a
    /// tensor view that shares storage with the registered variable.
    pub fn param(&mut self, name: &str, dims: &[usize], init: Init) -> Result<Tensor> {
        Ok(self.param_var(name, dims, init)?.as_tensor().clone())
    }

    pub fn param_var(&mut self, name: &str, dims: &[usize], init: Init) -> Result<Var> {
        let n: usize = dims.iter().product();
        let data: Vec<f64> = match init {
            Init::Const(v) => vec![v; n],
            Init::Normal(std) => {
                let rng = &mut self.rng;
                (0..n).map(|_| gaussian(rng) * std).collect()
            }
            Init::FanIn => {
                let fan_in: usize = dims[1..].iter().product::<usize>().max(1);
                let bound = (1.0 / fan_in as f64).sqrt();
                let rng = &mut self.rng;
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            }
            Init::Values(v) => {
                if v.len() != n {
                    return Err(Error::Shape(format!(
                        "init values for {name}: expected {n}, got {}",
                        v.len()
                    )));
                }
                v
            }
        };
        let tensor = Tensor::from_vec(data, dims, &self.device)?;
        let var = Var::from_tensor(&tensor)?;
        let mut guard = self.map.data().lock().unwrap();
        if guard.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name: {name}")));
        }
        guard.insert(name.to_string(), var.clone());
        Ok(var)
    }

    pub fn var_map(&self) -> &VarMap {
        &self.map
    }

    pub fn all_vars(&self) -> Vec<Var> {
        self.map.all_vars()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.map.data().lock().unwrap().get(name).cloned()
    }

    /// Sorted parameter names, the stable iteration order for gradient
    /// checking and diagnostics.
    pub fn names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.map.data().lock().unwrap().keys().cloned().collect();
        names.sort();
        names
    }

    pub fn save<P: AsRef<std::path::Path>>(&self, path: P) -> Result<()> {
        self.map.save(path)?;
        Ok(())
    }

    pub fn load<P: AsRef<std::path::Path>>(&mut self, path: P) -> Result<()> {
        self.map.load(path)?;
        Ok(())
    }
}

/// Box-Muller, kept explicit so initialization does not depend on
/// distribution-crate implementation details.
fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Spatial batch normalization over `(N, C, H, W)`.
///
/// Running statistics are `Var`s registered in the parameter store, so they
/// are checkpointed; they receive no gradients and the optimizer skips them.
pub struct BatchNorm2d {
    weight: Tensor,
    bias: Tensor,
    running_mean: Var,
    running_var: Var,
    eps: f64,
    momentum: f64,
}

impl BatchNorm2d {
    pub fn new(ps: &mut ParamStore, prefix: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: ps.param(&format!("{prefix}.weight"), &[channels], Init::Const(1.0))?,
            bias: ps.param(&format!("{prefix}.bias"), &[channels], Init::Const(0.0))?,
            running_mean: ps.param_var(
                &format!("{prefix}.running_mean"),
                &[channels],
                Init::Const(0.0),
            )?,
            running_var: ps.param_var(
                &format!("{prefix}.running_var"),
                &[channels],
                Init::Const(1.0),
            )?,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: &Mode) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4()?;
        let shape = (1, c, 1, 1);
        let out = if mode.is_train() {
            // Normalize with batch statistics (biased variance) and fold the
            // batch estimates into the running averages.
            let mean = x.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;
            let centered = x.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;

            let n = (x.elem_count() / c) as f64;
            let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            let new_mean = ((self.running_mean.as_tensor() * (1.0 - self.momentum))?
                + (mean.flatten_all()?.detach() * self.momentum)?)?;
            let new_var = ((self.running_var.as_tensor() * (1.0 - self.momentum))?
                + (var.flatten_all()?.detach() * (self.momentum * unbiased))?)?;
            self.running_mean.set(&new_mean)?;
            self.running_var.set(&new_var)?;

            centered.broadcast_div(&(var + self.eps)?.sqrt()?)?
        } else {
            let mean = self.running_mean.as_detached_tensor().reshape(shape)?;
            let var = self.running_var.as_detached_tensor().reshape(shape)?;
            x.broadcast_sub(&mean)?
                .broadcast_div(&(var + self.eps)?.sqrt()?)?
        };
        out.broadcast_mul(&self.weight.reshape(shape)?)?
            .broadcast_add(&self.bias.reshape(shape)?)
            .map_err(Into::into)
    }
}

/// Layer normalization over the last dimension, composed from primitive ops
/// so it runs and differentiates in f64 (candle's fused kernel is f32-only).
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, prefix: &str, dim: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            weight: ps.param(&format!("{prefix}.weight"), &[dim], Init::Const(1.0))?,
            bias: ps.param(&format!("{prefix}.bias"), &[dim], Init::Const(0.0))?,
            eps,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let last = x.rank() - 1;
        let mean = x.mean_keepdim(last)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(last)?;
        let norm = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(norm.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

/// Inverted dropout with an explicit RNG; identity in eval mode or when the
/// rate is zero.
pub fn dropout(x: &Tensor, rate: f64, mode: &mut Mode) -> Result<Tensor> {
    if rate == 0.0 {
        return Ok(x.clone());
    }
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidParameter(format!(
            "dropout rate must be in [0, 1), got {rate}"
        )));
    }
    match mode {
        Mode::Eval => Ok(x.clone()),
        Mode::Train(rng) => {
            let keep = 1.0 - rate;
            let scale = 1.0 / keep;
            let mask: Vec<f64> = (0..x.elem_count())
                .map(|_| if rng.gen::<f64>() < keep { scale } else { 0.0 })
                .collect();
            let mask = Tensor::from_vec(mask, x.shape(), x.device())?;
            Ok(x.mul(&mask)?)
        }
    }
}

struct AcosOp;

impl CustomOp1 for AcosOp {
    fn name(&self) -> &'static str {
        "acos"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (start, end) = layout
            .contiguous_offsets()
            .ok_or_else(|| candle_core::Error::RequiresContiguous { op: "acos" }.bt())?;
        let out = match storage {
            CpuStorage::F64(vs) => {
                CpuStorage::F64(vs[start..end].iter().map(|v| v.acos()).collect())
            }
            CpuStorage::F32(vs) => {
                CpuStorage::F32(vs[start..end].iter().map(|v| v.acos()).collect())
            }
            _ => candle_core::bail!("acos: unsupported dtype"),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(
        &self,
        arg: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        // d/dx acos(x) = -1 / sqrt(1 - x^2)
        let one_minus_sq = (arg.ones_like()? - arg.sqr()?)?;
        let grad = grad_res.div(&one_minus_sq.sqrt()?)?.neg()?;
        Ok(Some(grad))
    }
}

/// Element-wise arc-cosine with gradient support. Callers must keep inputs
/// strictly inside `(-1, 1)` (e.g. via `clamp`) or the gradient blows up at
/// the boundary.
pub fn acos(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(AcosOp)?)
}

/// Scalar constant on the same device/dtype as a reference tensor.
pub fn scalar_like(v: f64, reference: &Tensor) -> Result<Tensor> {
    Ok(Tensor::new(v, reference.device())?.to_dtype(reference.dtype())?)
}

pub const DTYPE: DType = DType::F64;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_store_is_seed_deterministic() {
        let mut a = ParamStore::new(7);
        let mut b = ParamStore::new(7);
        let ta = a.param("w", &[4, 3], Init::FanIn).unwrap();
        let tb = b.param("w", &[4, 3], Init::FanIn).unwrap();
        assert_eq!(
            ta.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            tb.flatten_all().unwrap().to_vec1::<f64>().unwrap()
        );

        let mut c = ParamStore::new(8);
        let tc = c.param("w", &[4, 3], Init::FanIn).unwrap();
        assert_ne!(
            ta.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            tc.flatten_all().unwrap().to_vec1::<f64>().unwrap()
        );
    }

    #[test]
    fn param_store_rejects_duplicates() {
        let mut ps = ParamStore::new(0);
        ps.param("x", &[2], Init::Const(0.0)).unwrap();
        assert!(ps.param("x", &[2], Init::Const(0.0)).is_err());
    }

    #[test]
    fn acos_matches_std_and_gradient() {
        let x = Tensor::from_vec(vec![-0.9f64, -0.3, 0.0, 0.5, 0.99], 5, &Device::Cpu).unwrap();
        let y = acos(&x).unwrap().to_vec1::<f64>().unwrap();
        for (xi, yi) in [-0.9f64, -0.3, 0.0, 0.5, 0.99].iter().zip(&y) {
            assert!((xi.acos() - yi).abs() < 1e-15);
        }

        // Finite-difference check of the custom backward.
        let v = Var::from_tensor(
            &Tensor::from_vec(vec![0.3f64, -0.6], 2, &Device::Cpu).unwrap(),
        )
        .unwrap();
        let loss = acos(v.as_tensor()).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let g = grads.get(v.as_tensor()).unwrap().to_vec1::<f64>().unwrap();
        let eps = 1e-6;
        for (i, &xi) in [0.3f64, -0.6].iter().enumerate() {
            let fd = ((xi + eps).acos() - (xi - eps).acos()) / (2.0 * eps);
            assert!((g[i] - fd).abs() < 1e-8, "i={i}: {} vs {fd}", g[i]);
        }
    }

    #[test]
    fn dropout_eval_is_identity_and_train_is_seeded() {
        let x = Tensor::from_vec(vec![1.0f64; 32], (4, 8), &Device::Cpu).unwrap();
        let y = dropout(&x, 0.5, &mut Mode::Eval).unwrap();
        assert_eq!(
            y.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            vec![1.0; 32]
        );

        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        let y1 = dropout(&x, 0.5, &mut Mode::Train(&mut r1)).unwrap();
        let y2 = dropout(&x, 0.5, &mut Mode::Train(&mut r2)).unwrap();
        assert_eq!(
            y1.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            y2.flatten_all().unwrap().to_vec1::<f64>().unwrap()
        );
    }

    #[test]
    fn batch_norm_eval_at_init_is_identity() {
        let mut ps = ParamStore::new(0);
        let bn = BatchNorm2d::new(&mut ps, "bn", 3).unwrap();
        let x = Tensor::from_vec(
            (0..2 * 3 * 4).map(|i| i as f64).collect::<Vec<_>>(),
            (2, 3, 2, 2),
            &Device::Cpu,
        )
        .unwrap();
        let y = bn.forward(&x, &Mode::Eval).unwrap();
        let xs = x.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let ys = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (a, b) in xs.iter().zip(&ys) {
            // eps rescales by 1/sqrt(1 + 1e-5), about 5e-6 relative.
            assert!((a - b).abs() < 1e-5 * a.abs() + 1e-9);
        }
    }

    #[test]
    fn batch_norm_train_normalizes_and_updates_running_stats() {
        let mut ps = ParamStore::new(0);
        let bn = BatchNorm2d::new(&mut ps, "bn", 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f64> = (0..2 * 2 * 9).map(|_| rng.gen_range(-3.0..5.0)).collect();
        let x = Tensor::from_vec(data, (2, 2, 3, 3), &Device::Cpu).unwrap();
        let mode = Mode::Train(&mut rng);
        let y = bn.forward(&x, &mode).unwrap();
        // Per-channel mean ~ 0, variance ~ 1.
        for c in 0..2 {
            let ch = y.narrow(1, c, 1).unwrap().flatten_all().unwrap();
            let vals = ch.to_vec1::<f64>().unwrap();
            let n = vals.len() as f64;
            let mean: f64 = vals.iter().sum::<f64>() / n;
            let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-3);
        }
        let rm = ps.get("bn.running_mean").unwrap();
        let rm = rm.as_tensor().to_vec1::<f64>().unwrap();
        assert!(rm.iter().any(|v| *v != 0.0));
    }
}
