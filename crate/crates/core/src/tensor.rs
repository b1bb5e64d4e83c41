//! Dense row-major `f64` tensors and the handful of kernels the layers need.
//!
//! There is no broadcasting: binary ops require equal shapes and the only
//! mixed-rank operation is scaling by a scalar. Reductions keep reduced axes
//! as extent-1 dimensions so that callers can map every element back to its
//! reduction group with [`group_index`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "new",
                format!("shape {shape:?} needs {n} elements, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Same data, new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "add_assign",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|x| s * x)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// View as a matrix: first axis are rows, remaining axes are flattened
    /// into columns. Rank-1 tensors become a single column.
    pub fn matrix_dims(&self) -> (usize, usize) {
        match self.shape.split_first() {
            None => (1, 1),
            Some((&rows, rest)) => (rows, rest.iter().product()),
        }
    }
}

/// Elementwise sum of two equally shaped tensors.
pub fn elementwise_add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.add(b)
}

pub fn scale(a: &Tensor, s: f64) -> Tensor {
    a.scale(s)
}

/// Matrix product of `a[m×k]` and `b[k×n]`; both must be rank 2.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.ndim() != 2 || b.ndim() != 2 {
        return Err(Error::shape(
            "matmul",
            format!("expected rank-2 operands, got {:?} and {:?}", a.shape, b.shape),
        ));
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("inner extents differ: {:?} x {:?}", a.shape, b.shape),
        ));
    }
    let mut out = vec![0.0; m * n];
    matmul_into(&a.data, &b.data, &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

/// `out[m×n] += a[m×k] · b[k×n]`, i-k-j loop order.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// Rank-2 transpose.
pub fn transpose(a: &Tensor) -> Result<Tensor> {
    if a.ndim() != 2 {
        return Err(Error::shape("transpose", format!("expected rank 2, got {:?}", a.shape)));
    }
    let (r, c) = (a.shape[0], a.shape[1]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a.data[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out)
}

/// Output extent of a strided, zero-padded sliding window.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || kernel == 0 || padded < kernel || !(padded - kernel).is_multiple_of(stride) {
        return Err(Error::shape(
            "conv2d",
            format!(
                "window does not tile: input {input}, kernel {kernel}, stride {stride}, padding {padding}"
            ),
        ));
    }
    Ok((padded - kernel) / stride + 1)
}

/// 2-D cross-correlation of `x[C_in×H×W]` with `w[C_out×C_in×kH×kW]` plus
/// per-output-channel bias. Pass `None` for a bias-free convolution.
pub fn conv2d(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    if x.ndim() != 3 || w.ndim() != 4 {
        return Err(Error::shape(
            "conv2d",
            format!("expected x[C,H,W] and w[O,C,kH,kW], got {:?} and {:?}", x.shape, w.shape),
        ));
    }
    let (cin, h, wd) = (x.shape[0], x.shape[1], x.shape[2]);
    let (cout, wcin, kh, kw) = (w.shape[0], w.shape[1], w.shape[2], w.shape[3]);
    if cin != wcin {
        return Err(Error::shape(
            "conv2d",
            format!("input has {cin} channels, kernel expects {wcin}"),
        ));
    }
    if let Some(b) = bias {
        if b.shape != [cout] {
            return Err(Error::shape(
                "conv2d",
                format!("bias shape {:?}, expected [{cout}]", b.shape),
            ));
        }
    }
    let oh = conv_out_extent(h, kh, stride, padding)?;
    let ow = conv_out_extent(wd, kw, stride, padding)?;
    let mut out = vec![0.0; cout * oh * ow];
    for o in 0..cout {
        let plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
        if let Some(b) = bias {
            plane.iter_mut().for_each(|v| *v = b.data[o]);
        }
        for c in 0..cin {
            let xin = &x.data[c * h * wd..(c + 1) * h * wd];
            for dy in 0..kh {
                for dx in 0..kw {
                    let wv = w.data[((o * cin + c) * kh + dy) * kw + dx];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * stride + dy) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = &xin[iy as usize * wd..(iy as usize + 1) * wd];
                        let orow = &mut plane[oy * ow..(oy + 1) * ow];
                        for (ox, ov) in orow.iter_mut().enumerate() {
                            let ix = (ox * stride + dx) as isize - padding as isize;
                            if ix >= 0 && ix < wd as isize {
                                *ov += wv * xrow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![cout, oh, ow], out)
}

/// Concatenate along `axis`. Empty tensors (zero elements) are skipped.
pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let parts: Vec<&Tensor> = parts.iter().copied().filter(|t| !t.is_empty()).collect();
    let first = match parts.first() {
        Some(t) => *t,
        None => return Ok(Tensor::zeros(&[0])),
    };
    if axis >= first.ndim() {
        return Err(Error::shape("concat", format!("axis {axis} out of range for {:?}", first.shape)));
    }
    for p in &parts[1..] {
        let compatible = p.ndim() == first.ndim()
            && p.shape
                .iter()
                .zip(&first.shape)
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(Error::shape(
                "concat",
                format!("{:?} incompatible with {:?} along axis {axis}", p.shape, first.shape),
            ));
        }
    }
    let outer: usize = first.shape[..axis].iter().product();
    let inner: usize = first.shape[axis + 1..].iter().product();
    let mut shape = first.shape.clone();
    shape[axis] = parts.iter().map(|p| p.shape[axis]).sum();
    let mut data = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for p in &parts {
            let chunk = p.shape[axis] * inner;
            data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
        }
    }
    Tensor::new(shape, data)
}

/// Shape of a reduction over `axes` with reduced axes kept as extent 1.
pub fn reduced_shape(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    shape
        .iter()
        .enumerate()
        .map(|(i, &e)| if axes.contains(&i) { 1 } else { e })
        .collect()
}

/// For every flat element of `shape`, the flat index of its group in the
/// reduced shape.
pub fn group_index(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let reduced = reduced_shape(shape, axes);
    let n: usize = shape.iter().product();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..n {
        let mut g = 0;
        for (d, &i) in idx.iter().enumerate() {
            g = g * reduced[d] + if reduced[d] == 1 { 0 } else { i };
        }
        out.push(g);
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

fn validate_axes(shape: &[usize], axes: &[usize]) -> Result<()> {
    for (i, &a) in axes.iter().enumerate() {
        if a >= shape.len() || axes[..i].contains(&a) {
            return Err(Error::shape("moments", format!("bad axes {axes:?} for shape {shape:?}")));
        }
    }
    Ok(())
}

/// Mean over `axes`, reduced axes kept with extent 1.
pub fn mean(a: &Tensor, axes: &[usize]) -> Result<Tensor> {
    validate_axes(&a.shape, axes)?;
    let shape = reduced_shape(&a.shape, axes);
    let groups: usize = shape.iter().product();
    if a.is_empty() || groups == 0 {
        return Err(Error::shape("moments", "empty reduction"));
    }
    let count = (a.len() / groups) as f64;
    let gi = group_index(&a.shape, axes);
    let mut sum = vec![0.0; groups];
    for (&g, &x) in gi.iter().zip(&a.data) {
        sum[g] += x;
    }
    Tensor::new(shape, sum.into_iter().map(|s| s / count).collect())
}

/// Population mean and variance (divide by count) over `axes`; the variance
/// is accumulated from centered values.
pub fn moments(a: &Tensor, axes: &[usize]) -> Result<(Tensor, Tensor)> {
    let mu = mean(a, axes)?;
    let groups = mu.len();
    let count = (a.len() / groups) as f64;
    let gi = group_index(&a.shape, axes);
    let mut ss = vec![0.0; groups];
    for (&g, &x) in gi.iter().zip(&a.data) {
        let d = x - mu.data[g];
        ss[g] += d * d;
    }
    let var = Tensor::new(mu.shape.clone(), ss.into_iter().map(|s| s / count).collect())?;
    Ok((mu, var))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn add_examples() {
        let a = Tensor::from_vec(vec![1.0, 2.0]);
        let b = Tensor::from_vec(vec![3.0, 4.0]);
        assert_eq!(elementwise_add(&a, &b).unwrap().data(), &[4.0, 6.0]);
        assert_eq!(a.add(&Tensor::zeros(&[2])).unwrap(), a);
        let z = Tensor::scalar(0.5).add(&Tensor::scalar(-0.5)).unwrap();
        assert_eq!(z.data(), &[0.0]);
        assert!(a.add(&Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn scale_examples() {
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        assert_eq!(scale(&x, 2.0).data(), &[2.0, 4.0]);
        assert_eq!(scale(&x, 0.0), Tensor::zeros(&[2]));
        assert_eq!(scale(&x, 1.0), x);
    }

    #[test]
    fn matmul_examples() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(matmul(&eye, &a).unwrap(), a);
        let r = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let c = Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(matmul(&r, &c).unwrap().data(), &[11.0]);
        assert!(matmul(&r, &r).is_err());
    }

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.data()[i * k + p] * b.data()[p * n + j];
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = rand_tensor(&mut rng, &[4, 4]);
        let b = rand_tensor(&mut rng, &[4, 4]);
        let got = matmul(&a, &b).unwrap();
        for (g, e) in got.data().iter().zip(naive_matmul(&a, &b)) {
            assert!((g - e).abs() < 1e-14);
        }
    }

    #[test]
    fn matmul_associative() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let a = rand_tensor(&mut rng, &[3, 5]);
            let b = rand_tensor(&mut rng, &[5, 4]);
            let c = rand_tensor(&mut rng, &[4, 6]);
            let l = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let r = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            for (x, y) in l.data().iter().zip(r.data()) {
                assert!((x - y).abs() <= 1e-9 * x.abs().max(y.abs()).max(1e-300) + 1e-15);
            }
        }
    }

    fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (cout, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; cout * oh * ow];
        for o in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = b.data()[o];
                    for c in 0..cin {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let iy = (oy * stride + dy) as isize - pad as isize;
                                let ix = (ox * stride + dx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    s += w.data()[((o * cin + c) * kh + dy) * kw + dx]
                                        * x.data()[(c * h + iy as usize) * wd + ix as usize];
                                }
                            }
                        }
                    }
                    out[(o * oh + oy) * ow + ox] = s;
                }
            }
        }
        Tensor::new(vec![cout, oh, ow], out).unwrap()
    }

    #[test]
    fn conv_identity_kernel_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[1, 5, 4]);
        let w = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let b = Tensor::zeros(&[1]);
        assert_eq!(conv2d(&x, &w, Some(&b), 1, 0).unwrap(), x);
    }

    #[test]
    fn conv_zero_input_gives_bias() {
        let x = Tensor::zeros(&[2, 3, 3]);
        let w = Tensor::full(&[2, 2, 3, 3], 0.7);
        let b = Tensor::from_vec(vec![1.5, -2.0]);
        let y = conv2d(&x, &w, Some(&b), 1, 1).unwrap();
        assert_eq!(y.shape(), &[2, 3, 3]);
        assert!(y.data()[..9].iter().all(|&v| v == 1.5));
        assert!(y.data()[9..].iter().all(|&v| v == -2.0));
    }

    #[test]
    fn conv_matches_sliding_window_oracle() {
        let x = Tensor::new(vec![1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let w = Tensor::new(vec![1, 1, 2, 2], vec![1.0, -1.0, 0.5, 2.0]).unwrap();
        let b = Tensor::from_vec(vec![0.25]);
        let got = conv2d(&x, &w, Some(&b), 1, 0).unwrap();
        assert_eq!(got.shape(), &[1, 2, 2]);
        // 1-2+0.5*4+2*5+0.25 = 11.25, etc.
        assert_eq!(got.data(), &[11.25, 13.75, 18.75, 21.25]);
        assert_eq!(got, naive_conv(&x, &w, &b, 1, 0));

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (stride, pad) in [(1, 1), (2, 1), (1, 0), (3, 2)] {
            let x = rand_tensor(&mut rng, &[3, 7, 7]);
            let w = rand_tensor(&mut rng, &[4, 3, 3, 3]);
            let b = rand_tensor(&mut rng, &[4]);
            if conv_out_extent(7, 3, stride, pad).is_err() {
                continue;
            }
            let got = conv2d(&x, &w, Some(&b), stride, pad).unwrap();
            let want = naive_conv(&x, &w, &b, stride, pad);
            assert_eq!(got.shape(), want.shape());
            for (g, e) in got.data().iter().zip(want.data()) {
                assert!((g - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_non_integral_extent_errors() {
        let x = Tensor::zeros(&[1, 4, 4]);
        let w = Tensor::zeros(&[1, 1, 3, 3]);
        assert!(conv2d(&x, &w, None, 2, 0).is_err());
    }

    #[test]
    fn concat_examples() {
        let a = Tensor::scalar(1.0);
        let b = Tensor::scalar(2.0);
        assert_eq!(concat(&[&a, &b], 0).unwrap().data(), &[1.0, 2.0]);
        let x = Tensor::from_vec(vec![3.0, 4.0]);
        assert_eq!(concat(&[&x, &Tensor::zeros(&[0])], 0).unwrap(), x);
        let p = Tensor::full(&[2, 2], 1.0);
        let q = Tensor::full(&[3, 2], 2.0);
        assert_eq!(concat(&[&p, &q], 0).unwrap().shape(), &[5, 2]);
        let r = Tensor::new(vec![2, 1], vec![7.0, 8.0]).unwrap();
        let c1 = concat(&[&p, &r], 1).unwrap();
        assert_eq!(c1.data(), &[1.0, 1.0, 7.0, 1.0, 1.0, 8.0]);
        assert!(concat(&[&p, &Tensor::zeros(&[2, 3])], 0).is_err());
    }

    #[test]
    fn moments_examples() {
        let c = Tensor::full(&[2, 3], 4.5);
        let (m, v) = moments(&c, &[0, 1]).unwrap();
        assert_eq!(m.data(), &[4.5]);
        assert_eq!(v.data(), &[0.0]);
        let (m, v) = moments(&Tensor::from_vec(vec![1.0, 3.0]), &[0]).unwrap();
        assert_eq!((m.data()[0], v.data()[0]), (2.0, 1.0));
        assert!(moments(&Tensor::zeros(&[0]), &[0]).is_err());
        assert!(moments(&c, &[2]).is_err());
    }

    #[test]
    fn moments_match_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_tensor(&mut rng, &[8]);
        let n = 8.0;
        let mu: f64 = x.data().iter().sum::<f64>() / n;
        let var: f64 = x.data().iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
        let (m, v) = moments(&x, &[0]).unwrap();
        assert!((m.data()[0] - mu).abs() < 1e-15);
        assert!((v.data()[0] - var).abs() < 1e-15);
    }

    #[test]
    fn moments_per_group() {
        let x = Tensor::new(vec![2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 10.0, 10.0, 20.0, 20.0]).unwrap();
        let (m, v) = moments(&x, &[1, 2]).unwrap();
        assert_eq!(m.shape(), &[2, 1, 1]);
        assert_eq!(m.data(), &[2.5, 15.0]);
        assert_eq!(v.data(), &[1.25, 25.0]);
        let (m0, _) = moments(&x, &[0]).unwrap();
        assert_eq!(m0.data(), &[5.5, 6.0, 11.5, 12.0]);
    }

    proptest! {
        #[test]
        fn centered_mean_is_zero(v in proptest::collection::vec(-10.0f64..10.0, 1..64)) {
            let x = Tensor::from_vec(v);
            let mu = mean(&x, &[0]).unwrap().data()[0];
            let centered = x.map(|a| a - mu);
            let (m, _) = moments(&centered, &[0]).unwrap();
            prop_assert!(m.data()[0].abs() <= 1e-12);
        }
    }
}
