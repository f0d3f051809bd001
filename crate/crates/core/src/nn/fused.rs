//! Single-pass kernels (softmax, normalisation, group norm, SiLU) with
//! matching single-pass backward kernels.

use candle_core::{bail, CpuStorage, CustomOp1, CustomOp2, CustomOp3, Layout, Result, Shape, Tensor, WithDType};
use num_traits::Float;

fn slice<'a, T: WithDType>(src: &'a [T], l: &Layout) -> Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&src[a..b]),
        None => bail!("fused kernel expects a contiguous input"),
    }
}

fn last_dim(l: &Layout) -> Result<usize> {
    match l.dims().last() {
        Some(&n) if n > 0 => Ok(n),
        _ => bail!("fused kernel needs a non-empty last axis"),
    }
}

/// A row kernel instantiated for both float widths.
trait RowKernel {
    fn run<F: Float + WithDType>(&self, x: &[F], y: &mut [F]);
}

trait RowKernel2 {
    fn run<F: Float + WithDType>(&self, a: &[F], b: &[F], y: &mut [F]);
}

fn map_rows<F: Float + WithDType, K: RowKernel>(k: &K, x: &[F], n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); x.len()];
    for (xr, yr) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        k.run(xr, yr);
    }
    out
}

fn map_rows2<F: Float + WithDType, K: RowKernel2>(k: &K, a: &[F], b: &[F], n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); a.len()];
    for ((ar, br), yr) in a.chunks_exact(n).zip(b.chunks_exact(n)).zip(out.chunks_exact_mut(n)) {
        k.run(ar, br, yr);
    }
    out
}

fn apply1<K: RowKernel>(k: &K, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
    let n = last_dim(l)?;
    let out = match s {
        CpuStorage::F32(v) => CpuStorage::F32(map_rows(k, slice(v, l)?, n)),
        CpuStorage::F64(v) => CpuStorage::F64(map_rows(k, slice(v, l)?, n)),
        _ => bail!("fused kernels support f32 and f64 only"),
    };
    Ok((out, l.shape().clone()))
}

fn apply2<K: RowKernel2>(
    k: &K,
    s1: &CpuStorage,
    l1: &Layout,
    s2: &CpuStorage,
    l2: &Layout,
) -> Result<(CpuStorage, Shape)> {
    let n = last_dim(l1)?;
    let out = match (s1, s2) {
        (CpuStorage::F32(a), CpuStorage::F32(b)) => CpuStorage::F32(map_rows2(k, slice(a, l1)?, slice(b, l2)?, n)),
        (CpuStorage::F64(a), CpuStorage::F64(b)) => CpuStorage::F64(map_rows2(k, slice(a, l1)?, slice(b, l2)?, n)),
        _ => bail!("fused kernels support matching f32 or f64 inputs only"),
    };
    Ok((out, l1.shape().clone()))
}

struct Softmax;
struct SoftmaxBwd;

impl RowKernel for Softmax {
    fn run<F: Float + WithDType>(&self, x: &[F], y: &mut [F]) {
        let m = x.iter().copied().fold(F::neg_infinity(), Float::max);
        let mut s = F::zero();
        for (o, &v) in y.iter_mut().zip(x) {
            *o = (v - m).exp();
            s = s + *o;
        }
        let inv = F::one() / s;
        for o in y.iter_mut() {
            *o = *o * inv;
        }
    }
}

impl RowKernel2 for SoftmaxBwd {
    fn run<F: Float + WithDType>(&self, y: &[F], g: &[F], dx: &mut [F]) {
        let dot = y.iter().zip(g).fold(F::zero(), |acc, (&a, &b)| acc + a * b);
        for i in 0..y.len() {
            dx[i] = y[i] * (g[i] - dot);
        }
    }
}

impl CustomOp1 for Softmax {
    fn name(&self) -> &'static str {
        "ccad-softmax"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        apply1(self, s, l)
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(res.apply_op2_no_bwd(&grad.contiguous()?, &SoftmaxBwd)?))
    }
}

impl CustomOp2 for SoftmaxBwd {
    fn name(&self) -> &'static str {
        "ccad-softmax-bwd"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        apply2(self, s1, l1, s2, l2)
    }
}

/// Softmax over the last axis.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    x.contiguous()?.apply_op1(Softmax)
}

/// Mean and inverse standard deviation (biased variance), accumulated in f64.
fn moments<F: Float + WithDType>(x: &[F], eps: f64) -> (F, F) {
    let n = x.len() as f64;
    let mean = x.iter().map(|v| WithDType::to_f64(*v)).sum::<f64>() / n;
    let var = x.iter().map(|v| (WithDType::to_f64(*v) - mean).powi(2)).sum::<f64>() / n;
    (
        <F as WithDType>::from_f64(mean),
        <F as WithDType>::from_f64(1.0 / (var + eps).sqrt()),
    )
}

/// `dx` of `y = (x − μ)·inv` given upstream `g`.
fn normalize_grad<F: Float + WithDType>(x: &[F], g: impl Fn(usize) -> F, eps: f64, dx: &mut [F]) {
    let (mean, inv) = moments(x, eps);
    let len = <F as WithDType>::from_f64(x.len() as f64);
    let mut gm = F::zero();
    let mut gy = F::zero();
    for (i, &v) in x.iter().enumerate() {
        gm = gm + g(i);
        gy = gy + g(i) * (v - mean) * inv;
    }
    gm = gm / len;
    gy = gy / len;
    for (i, &v) in x.iter().enumerate() {
        dx[i] = inv * (g(i) - gm - (v - mean) * inv * gy);
    }
}

struct Normalize {
    eps: f64,
}

struct NormalizeBwd {
    eps: f64,
}

impl RowKernel for Normalize {
    fn run<F: Float + WithDType>(&self, x: &[F], y: &mut [F]) {
        let (mean, inv) = moments(x, self.eps);
        for (o, &v) in y.iter_mut().zip(x) {
            *o = (v - mean) * inv;
        }
    }
}

impl RowKernel2 for NormalizeBwd {
    fn run<F: Float + WithDType>(&self, x: &[F], g: &[F], dx: &mut [F]) {
        normalize_grad(x, |i| g[i], self.eps, dx);
    }
}

impl CustomOp1 for Normalize {
    fn name(&self) -> &'static str {
        "ccad-normalize"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        apply1(self, s, l)
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(arg.contiguous()?.apply_op2_no_bwd(
            &grad.contiguous()?,
            &NormalizeBwd { eps: self.eps },
        )?))
    }
}

impl CustomOp2 for NormalizeBwd {
    fn name(&self) -> &'static str {
        "ccad-normalize-bwd"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        apply2(self, s1, l1, s2, l2)
    }
}

/// `(x − mean) / √(var + eps)` over the last axis (biased variance).
pub fn normalize_last(x: &Tensor, eps: f64) -> Result<Tensor> {
    x.contiguous()?.apply_op1(Normalize { eps })
}

/// Group normalisation with per-channel affine, over (B, C, H, W).
#[derive(Debug, Clone, Copy)]
struct GroupNormOp {
    groups: usize,
    eps: f64,
}

impl GroupNormOp {
    fn dims(&self, l: &Layout) -> Result<(usize, usize, usize)> {
        let (b, c, h, w) = l.shape().dims4()?;
        if c % self.groups != 0 {
            bail!("group norm: {c} channels not divisible into {} groups", self.groups);
        }
        Ok((b, c, h * w))
    }

    fn forward<F: Float + WithDType>(
        &self,
        x: &[F],
        gamma: &[F],
        beta: &[F],
        (b, c, hw): (usize, usize, usize),
    ) -> Vec<F> {
        let cg = c / self.groups;
        let glen = cg * hw;
        let mut out = vec![F::zero(); x.len()];
        for (gi, (xs, ys)) in x.chunks_exact(glen).zip(out.chunks_exact_mut(glen)).enumerate() {
            let (mean, inv) = moments(xs, self.eps);
            let g0 = (gi % self.groups) * cg;
            for ci in 0..cg {
                let (ga, be) = (gamma[g0 + ci], beta[g0 + ci]);
                for k in ci * hw..(ci + 1) * hw {
                    ys[k] = (xs[k] - mean) * inv * ga + be;
                }
            }
        }
        let _ = b;
        out
    }

    fn grad_input<F: Float + WithDType>(&self, x: &[F], gamma: &[F], g: &[F], c: usize, hw: usize) -> Vec<F> {
        let cg = c / self.groups;
        let glen = cg * hw;
        let mut dx = vec![F::zero(); x.len()];
        let mut gh = vec![F::zero(); glen];
        for (gi, ((xs, gs), ds)) in x
            .chunks_exact(glen)
            .zip(g.chunks_exact(glen))
            .zip(dx.chunks_exact_mut(glen))
            .enumerate()
        {
            let g0 = (gi % self.groups) * cg;
            for (ci, (dst, src)) in gh.chunks_exact_mut(hw).zip(gs.chunks_exact(hw)).enumerate() {
                let ga = gamma[g0 + ci];
                for (d, v) in dst.iter_mut().zip(src) {
                    *d = *v * ga;
                }
            }
            normalize_grad(xs, |k| gh[k], self.eps, ds);
        }
        dx
    }

    /// `[dγ; dβ]` as a (2, C) row-major buffer.
    fn grad_affine<F: Float + WithDType>(&self, x: &[F], g: &[F], c: usize, hw: usize) -> Vec<F> {
        let cg = c / self.groups;
        let glen = cg * hw;
        let mut acc = vec![0f64; 2 * c];
        for (gi, (xs, gs)) in x.chunks_exact(glen).zip(g.chunks_exact(glen)).enumerate() {
            let (mean, inv) = moments(xs, self.eps);
            let g0 = (gi % self.groups) * cg;
            for ci in 0..cg {
                let (mut dg, mut db) = (0f64, 0f64);
                for k in ci * hw..(ci + 1) * hw {
                    let gv = WithDType::to_f64(gs[k]);
                    dg += gv * WithDType::to_f64((xs[k] - mean) * inv);
                    db += gv;
                }
                acc[g0 + ci] += dg;
                acc[c + g0 + ci] += db;
            }
        }
        acc.into_iter().map(<F as WithDType>::from_f64).collect()
    }
}

impl CustomOp3 for GroupNormOp {
    fn name(&self) -> &'static str {
        "ccad-group-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let d = self.dims(l1)?;
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(g), CpuStorage::F32(b)) => {
                CpuStorage::F32(self.forward(slice(x, l1)?, slice(g, l2)?, slice(b, l3)?, d))
            }
            (CpuStorage::F64(x), CpuStorage::F64(g), CpuStorage::F64(b)) => {
                CpuStorage::F64(self.forward(slice(x, l1)?, slice(g, l2)?, slice(b, l3)?, d))
            }
            _ => bail!("group norm supports matching f32 or f64 operands only"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let dx = x.apply_op3_no_bwd(gamma, &grad, &GroupNormGradInput(*self))?;
        let aff = x.apply_op2_no_bwd(&grad, &GroupNormGradAffine(*self))?;
        Ok((Some(dx), Some(aff.get(0)?), Some(aff.get(1)?)))
    }
}

struct GroupNormGradInput(GroupNormOp);

impl CustomOp3 for GroupNormGradInput {
    fn name(&self) -> &'static str {
        "ccad-group-norm-grad-input"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let (_, c, hw) = self.0.dims(l1)?;
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(ga), CpuStorage::F32(g)) => {
                CpuStorage::F32(self.0.grad_input(slice(x, l1)?, slice(ga, l2)?, slice(g, l3)?, c, hw))
            }
            (CpuStorage::F64(x), CpuStorage::F64(ga), CpuStorage::F64(g)) => {
                CpuStorage::F64(self.0.grad_input(slice(x, l1)?, slice(ga, l2)?, slice(g, l3)?, c, hw))
            }
            _ => bail!("group norm supports matching f32 or f64 operands only"),
        };
        Ok((out, l1.shape().clone()))
    }
}

struct GroupNormGradAffine(GroupNormOp);

impl CustomOp2 for GroupNormGradAffine {
    fn name(&self) -> &'static str {
        "ccad-group-norm-grad-affine"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let (_, c, hw) = self.0.dims(l1)?;
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(g)) => {
                CpuStorage::F32(self.0.grad_affine(slice(x, l1)?, slice(g, l2)?, c, hw))
            }
            (CpuStorage::F64(x), CpuStorage::F64(g)) => {
                CpuStorage::F64(self.0.grad_affine(slice(x, l1)?, slice(g, l2)?, c, hw))
            }
            _ => bail!("group norm supports matching f32 or f64 operands only"),
        };
        Ok((out, Shape::from((2, c))))
    }
}

/// Group normalisation of `x` (B, C, H, W) followed by `γ·x̂ + β`.
pub fn group_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, groups: usize, eps: f64) -> Result<Tensor> {
    x.contiguous()?
        .apply_op3(&gamma.contiguous()?, &beta.contiguous()?, GroupNormOp { groups, eps })
}

struct Silu;
struct SiluBwd;

fn sigmoid<F: Float>(v: F) -> F {
    F::one() / (F::one() + (-v).exp())
}

impl RowKernel for Silu {
    fn run<F: Float + WithDType>(&self, x: &[F], y: &mut [F]) {
        for (o, &v) in y.iter_mut().zip(x) {
            *o = v * sigmoid(v);
        }
    }
}

impl RowKernel2 for SiluBwd {
    fn run<F: Float + WithDType>(&self, x: &[F], g: &[F], dx: &mut [F]) {
        for i in 0..x.len() {
            let s = sigmoid(x[i]);
            dx[i] = g[i] * s * (F::one() + x[i] * (F::one() - s));
        }
    }
}

impl CustomOp1 for Silu {
    fn name(&self) -> &'static str {
        "ccad-silu"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        apply1(self, s, l)
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(arg.contiguous()?.apply_op2_no_bwd(&grad.contiguous()?, &SiluBwd)?))
    }
}

impl CustomOp2 for SiluBwd {
    fn name(&self) -> &'static str {
        "ccad-silu-bwd"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        apply2(self, s1, l1, s2, l2)
    }
}

/// `x · sigmoid(x)`.
pub fn silu(x: &Tensor) -> Result<Tensor> {
    x.contiguous()?.apply_op1(Silu)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var, D};

    /// Compares a fused op with a composed reference in value and gradient
    /// (finite differences of the reference) on a (2, 4, 3) input.
    fn fd_check(f: impl Fn(&Tensor) -> Result<Tensor>, reference: impl Fn(&Tensor) -> Result<Tensor>) {
        let dev = Device::Cpu;
        let shape = (2, 4, 3);
        let base: Vec<f64> = (0..24).map(|i| ((i as f64) * 0.77).sin() * 2.0).collect();
        let x = Var::from_tensor(&Tensor::from_vec(base.clone(), shape, &dev).unwrap()).unwrap();
        let weights = Tensor::from_vec(
            (0..24).map(|i| ((i as f64) * 1.3).cos()).collect::<Vec<_>>(),
            shape,
            &dev,
        )
        .unwrap();
        let y = f(x.as_tensor()).unwrap();
        let r = reference(x.as_tensor()).unwrap();
        let diff = (&y - &r)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!(diff < 1e-12, "forward differs by {diff}");
        let g = (y * &weights).unwrap().sum_all().unwrap().backward().unwrap();
        let g: Vec<f64> = g.get(x.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let h = 1e-6;
        for i in 0..24 {
            let eval = |d: f64| {
                let mut v = base.clone();
                v[i] += d;
                let t = Tensor::from_vec(v, shape, &dev).unwrap();
                (reference(&t).unwrap() * &weights)
                    .unwrap()
                    .sum_all()
                    .unwrap()
                    .to_scalar::<f64>()
                    .unwrap()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            assert!(
                (fd - g[i]).abs() < 1e-6 * (1.0 + fd.abs()),
                "entry {i}: {fd} vs {}",
                g[i]
            );
        }
    }

    fn normalize_ref(x: &Tensor) -> Result<Tensor> {
        let c = x.broadcast_sub(&x.mean_keepdim(D::Minus1)?)?;
        let v = c.sqr()?.mean_keepdim(D::Minus1)?;
        c.broadcast_div(&(v + 1e-5)?.sqrt()?)
    }

    #[test]
    fn softmax_matches_composed_ops() {
        fd_check(softmax_last, |x| {
            let e = x.broadcast_sub(&x.max_keepdim(D::Minus1)?)?.exp()?;
            e.broadcast_div(&e.sum_keepdim(D::Minus1)?)
        });
    }

    #[test]
    fn normalize_matches_composed_ops() {
        fd_check(|x| normalize_last(x, 1e-5), normalize_ref);
    }

    #[test]
    fn silu_matches_composed_ops() {
        fd_check(silu, |x| x * (x.neg()?.exp()? + 1.0)?.recip()?);
    }

    #[test]
    fn group_norm_matches_composed_ops() {
        let dev = Device::Cpu;
        let gamma = Tensor::new(&[0.5f64, -1.0, 2.0, 1.5], &dev).unwrap();
        let beta = Tensor::new(&[0.1f64, 0.2, -0.3, 0.0], &dev).unwrap();
        let reference = |x: &Tensor| -> Result<Tensor> {
            let x4 = x.reshape((2, 4, 1, 3))?;
            let n = normalize_ref(&x4.reshape((2, 2, 6))?)?.reshape((2, 4, 1, 3))?;
            n.broadcast_mul(&gamma.reshape((1, 4, 1, 1))?)?
                .broadcast_add(&beta.reshape((1, 4, 1, 1))?)?
                .reshape((2, 4, 3))
        };
        fd_check(
            |x| group_norm(&x.reshape((2, 4, 1, 3))?, &gamma, &beta, 2, 1e-5)?.reshape((2, 4, 3)),
            reference,
        );
        // affine gradients against the composed graph
        let x = Tensor::from_vec(
            (0..24).map(|i| ((i as f64) * 0.4).cos()).collect::<Vec<_>>(),
            (2, 4, 1, 3),
            &dev,
        )
        .unwrap();
        let w = Tensor::from_vec(
            (0..24).map(|i| (i as f64) * 0.1 - 1.0).collect::<Vec<_>>(),
            (2, 4, 1, 3),
            &dev,
        )
        .unwrap();
        let gv = Var::from_tensor(&gamma).unwrap();
        let bv = Var::from_tensor(&beta).unwrap();
        let fused = group_norm(&x, gv.as_tensor(), bv.as_tensor(), 2, 1e-5).unwrap();
        let gf = (fused * &w).unwrap().sum_all().unwrap().backward().unwrap();
        let n = normalize_ref(&x.reshape((2, 2, 6)).unwrap())
            .unwrap()
            .reshape((2, 4, 1, 3))
            .unwrap();
        let composed = n
            .broadcast_mul(&gv.as_tensor().reshape((1, 4, 1, 1)).unwrap())
            .unwrap()
            .broadcast_add(&bv.as_tensor().reshape((1, 4, 1, 1)).unwrap())
            .unwrap();
        let gc = (composed * &w).unwrap().sum_all().unwrap().backward().unwrap();
        for v in [&gv, &bv] {
            let a: Vec<f64> = gf.get(v.as_tensor()).unwrap().to_vec1().unwrap();
            let b: Vec<f64> = gc.get(v.as_tensor()).unwrap().to_vec1().unwrap();
            for (p, q) in a.iter().zip(&b) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }
}
