//! Small building blocks missing from, or not differentiable in, candle-nn.

use candle_core::{CpuStorage, CustomOp1, DType, Layout, Module, Shape, Tensor, D};
use candle_nn::{Init, VarBuilder};

/// Layer normalization over the last dimension, written with primitive ops
/// so that it is differentiable.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(dim: usize, eps: f64, vb: VarBuilder) -> candle_core::Result<Self> {
        let weight = vb.get_with_hints(dim, "weight", Init::Const(1.0))?;
        let bias = vb.get_with_hints(dim, "bias", Init::Const(0.0))?;
        Ok(Self { weight, bias, eps })
    }
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        centered
            .broadcast_div(&(var + self.eps)?.sqrt()?)?
            .broadcast_mul(&self.weight)?
            .broadcast_add(&self.bias)
    }
}

struct Atan;

impl CustomOp1 for Atan {
    fn name(&self) -> &'static str {
        "atan"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let Some((start, end)) = layout.contiguous_offsets() else {
            candle_core::bail!("atan: input must be contiguous");
        };
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(v[start..end].iter().map(|x| x.atan()).collect()),
            CpuStorage::F64(v) => CpuStorage::F64(v[start..end].iter().map(|x| x.atan()).collect()),
            _ => candle_core::bail!("atan: only f32 and f64 are supported"),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        // d/dx atan(x) = 1 / (1 + x²)
        let denom = (arg.sqr()? + 1.0)?;
        Ok(Some(grad_res.div(&denom)?))
    }
}

/// Element-wise arctangent with a gradient.
pub fn atan(x: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(Atan)
}

struct SoftmaxLastDim;

macro_rules! softmax_rows {
    ($name:ident, $t:ty) => {
        fn $name(src: &[$t], dim: usize) -> Vec<$t> {
            let mut out = Vec::with_capacity(src.len());
            for row in src.chunks_exact(dim) {
                let max = row.iter().copied().fold(<$t>::NEG_INFINITY, <$t>::max);
                let start = out.len();
                let mut sum = 0.0;
                for &v in row {
                    let e = (v - max).exp();
                    sum += e;
                    out.push(e);
                }
                for e in &mut out[start..] {
                    *e /= sum;
                }
            }
            out
        }
    };
}

softmax_rows!(softmax_rows_f32, f32);
softmax_rows!(softmax_rows_f64, f64);

impl CustomOp1 for SoftmaxLastDim {
    fn name(&self) -> &'static str {
        "softmax-last-dim"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let Some((start, end)) = layout.contiguous_offsets() else {
            candle_core::bail!("softmax: input must be contiguous");
        };
        let dim = layout.dims().last().copied().unwrap_or(1).max(1);
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(softmax_rows_f32(&v[start..end], dim)),
            CpuStorage::F64(v) => CpuStorage::F64(softmax_rows_f64(&v[start..end], dim)),
            _ => candle_core::bail!("softmax: only f32 and f64 are supported"),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        // dx = y * (g - sum(g * y))
        let gy = grad_res.mul(res)?;
        let dot = gy.sum_keepdim(D::Minus1)?;
        Ok(Some(gy.sub(&res.broadcast_mul(&dot)?)?))
    }
}

/// Softmax over the last dimension in one pass, with a gradient.
pub fn softmax_last_dim(x: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(SoftmaxLastDim)
}

struct Gelu;

/// `erf` to within 1.5e-7 (Abramowitz and Stegun 7.1.26), enough for f32.
fn erf_f32(x: f32) -> f32 {
    const P: f32 = 0.327_591_1;
    const A: [f32; 5] = [0.254_829_6, -0.284_496_74, 1.421_413_7, -1.453_152_1, 1.061_405_4];
    let t = 1.0 / (1.0 + P * x.abs());
    let poly = t * (A[0] + t * (A[1] + t * (A[2] + t * (A[3] + t * A[4]))));
    let y = 1.0 - poly * (-x * x).exp();
    y.copysign(x)
}

impl CustomOp1 for Gelu {
    fn name(&self) -> &'static str {
        "gelu"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let Some((start, end)) = layout.contiguous_offsets() else {
            candle_core::bail!("gelu: input must be contiguous");
        };
        let CpuStorage::F32(v) = storage else {
            candle_core::bail!("gelu: only f32 is supported");
        };
        let out = v[start..end]
            .iter()
            .map(|&x| 0.5 * x * (1.0 + erf_f32(x * std::f32::consts::FRAC_1_SQRT_2)))
            .collect();
        Ok((CpuStorage::F32(out), layout.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        // d/dx x Φ(x) = Φ(x) + x φ(x)
        let cdf = ((arg * std::f64::consts::FRAC_1_SQRT_2)?.erf()? + 1.0)? * 0.5;
        let pdf = (arg.sqr()? * -0.5)?.exp()? * (0.5 * std::f64::consts::FRAC_2_SQRT_PI * std::f64::consts::FRAC_1_SQRT_2);
        let d = (cdf? + arg.mul(&pdf?)?)?;
        Ok(Some(grad_res.mul(&d)?))
    }
}

/// Exact (erf) GELU. The f32 path uses a fused kernel; other dtypes use
/// candle's element-wise op.
pub fn gelu(x: &Tensor) -> candle_core::Result<Tensor> {
    match x.dtype() {
        DType::F32 => x.contiguous()?.apply_op1(Gelu),
        _ => x.gelu_erf(),
    }
}

/// Binary cross entropy on probabilities, clamped away from 0 and 1.
pub fn bce(prob: &Tensor, target: &Tensor) -> candle_core::Result<Tensor> {
    let eps = match prob.dtype() {
        DType::F64 => 1e-12,
        _ => 1e-7,
    };
    let p = prob.clamp(eps, 1.0 - eps)?;
    let pos = target.mul(&p.log()?)?;
    let neg = target.affine(-1.0, 1.0)?.mul(&p.affine(-1.0, 1.0)?.log()?)?;
    (pos + neg)?.neg()
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    #[test]
    fn atan_values_and_gradient() {
        let x = Var::new(&[-2.0f64, 0.0, 0.5, 3.0], &Device::Cpu).unwrap();
        let y = atan(x.as_tensor()).unwrap();
        let got = y.to_vec1::<f64>().unwrap();
        for (g, v) in got.iter().zip([-2.0f64, 0.0, 0.5, 3.0]) {
            assert!((g - v.atan()).abs() < 1e-15);
        }
        let grads = y.sum_all().unwrap().backward().unwrap();
        let g = grads.get(x.as_tensor()).unwrap().to_vec1::<f64>().unwrap();
        for (g, v) in g.iter().zip([-2.0f64, 0.0, 0.5, 3.0]) {
            assert!((g - 1.0 / (1.0 + v * v)).abs() < 1e-15);
        }
    }

    fn grad_of(f: impl Fn(&Tensor) -> candle_core::Result<Tensor>, x: &Var, w: &Tensor) -> Vec<f32> {
        let y = f(x.as_tensor()).unwrap();
        let grads = y.mul(w).unwrap().sum_all().unwrap().backward().unwrap();
        grads.get(x.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap()
    }

    #[test]
    fn softmax_and_gelu_match_candle() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::randn(0f32, 2.0, (3, 5, 7), &dev).unwrap()).unwrap();
        let w = Tensor::randn(0f32, 1.0, (3, 5, 7), &dev).unwrap();
        let close = |a: Vec<f32>, b: Vec<f32>, tol: f32| {
            for (p, q) in a.iter().zip(&b) {
                assert!((p - q).abs() <= tol, "{p} vs {q}");
            }
        };
        let flat = |t: Tensor| t.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let reference = |t: &Tensor| candle_nn::ops::softmax(t, D::Minus1);
        close(flat(softmax_last_dim(&x).unwrap()), flat(reference(&x).unwrap()), 1e-6);
        close(grad_of(softmax_last_dim, &x, &w), grad_of(reference, &x, &w), 1e-5);
        close(flat(gelu(&x).unwrap()), flat(x.gelu_erf().unwrap()), 1e-6);
        close(grad_of(gelu, &x, &w), grad_of(|t| t.gelu_erf(), &x, &w), 1e-5);
    }

    #[test]
    fn layer_norm_normalizes() {
        let vm = candle_nn::VarMap::new();
        let ln = LayerNorm::new(4, 1e-5, VarBuilder::from_varmap(&vm, DType::F64, &Device::Cpu)).unwrap();
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 4.0]], &Device::Cpu).unwrap();
        let y = ln.forward(&x).unwrap().to_vec2::<f64>().unwrap();
        let mean: f64 = y[0].iter().sum::<f64>() / 4.0;
        let var: f64 = y[0].iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn bce_at_half_is_ln2() {
        let p = Tensor::new(&[0.5f64, 0.5], &Device::Cpu).unwrap();
        let t = Tensor::new(&[1.0f64, 0.0], &Device::Cpu).unwrap();
        let l = bce(&p, &t).unwrap().to_vec1::<f64>().unwrap();
        for v in l {
            assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
        }
    }
}
