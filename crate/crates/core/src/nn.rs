//! Shared network primitives: 2-D convolution with reflective padding,
//! fully connected layers, activations, 2x2 average pooling and block
//! replication. Images are band-major `channels x (height*width)` matrices
//! with row-major pixel flattening, matching [`crate::cube::Cube`].

use crate::error::{Error, Result};
use crate::{sc, Scalar};
use ndarray::{Array1, Array2, Array4};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

/// Reflect an out-of-range index into `[0, n)` without repeating the edge
/// sample (OpenCV's BORDER_REFLECT_101).
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    debug_assert!(n > 0);
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

/// Square 2-D convolution layer, kernel laid out `(c_out, c_in, ky, kx)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<F: Scalar = f64> {
    pub weight: Array4<F>,
    pub bias: Array1<F>,
}

impl<F: Scalar> Conv2d<F> {
    pub fn zeros(c_out: usize, c_in: usize, k: usize) -> Self {
        Self {
            weight: Array4::zeros((c_out, c_in, k, k)),
            bias: Array1::zeros(c_out),
        }
    }

    /// Xavier-normal initialization scaled by `gain`; biases start at zero.
    pub fn xavier<R: Rng>(c_out: usize, c_in: usize, k: usize, gain: f64, rng: &mut R) -> Self {
        let fan_in = (c_in * k * k) as f64;
        let fan_out = (c_out * k * k) as f64;
        let std = gain * (2.0 / (fan_in + fan_out)).sqrt();
        let weight = Array4::from_shape_fn((c_out, c_in, k, k), |_| {
            let g: f64 = StandardNormal.sample(rng);
            sc::<F>(g * std)
        });
        Self {
            weight,
            bias: Array1::zeros(c_out),
        }
    }

    pub fn c_out(&self) -> usize {
        self.weight.dim().0
    }

    pub fn c_in(&self) -> usize {
        self.weight.dim().1
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim().2
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// Forward pass over a `c_in x (h*w)` image with reflective padding.
    pub fn forward(&self, x: &Array2<F>, h: usize, w: usize) -> Result<Array2<F>> {
        let (c_out, c_in, k, _) = self.weight.dim();
        if x.nrows() != c_in || x.ncols() != h * w {
            return Err(Error::ShapeMismatch(format!(
                "conv input {}x{} vs expected {}x{}",
                x.nrows(),
                x.ncols(),
                c_in,
                h * w
            )));
        }
        let rad = (k / 2) as isize;
        let mut out = Array2::<F>::zeros((c_out, h * w));
        let xs = x.as_slice().expect("contiguous input");
        let parallel = c_out * h * w >= 1 << 15;
        let weight = &self.weight;
        let bias = &self.bias;
        let run_one = |co: usize, orow: &mut [F]| {
            orow.fill(bias[co]);
            for ci in 0..c_in {
                let xrow = &xs[ci * h * w..(ci + 1) * h * w];
                for ky in 0..k {
                    let oy = ky as isize - rad;
                    for kx in 0..k {
                        let ox = kx as isize - rad;
                        let kw = weight[[co, ci, ky, kx]];
                        if kw == F::zero() {
                            continue;
                        }
                        accumulate_shifted(orow, xrow, h, w, oy, ox, kw);
                    }
                }
            }
        };
        let out_slice = out.as_slice_mut().expect("contiguous output");
        if parallel {
            out_slice
                .par_chunks_mut(h * w)
                .enumerate()
                .for_each(|(co, row)| run_one(co, row));
        } else {
            for (co, row) in out_slice.chunks_mut(h * w).enumerate() {
                run_one(co, row);
            }
        }
        Ok(out)
    }
}

/// `dst[y, x] += kw * src[reflect(y+oy), reflect(x+ox)]` with a contiguous
/// fast path over interior columns.
fn accumulate_shifted<F: Scalar>(
    dst: &mut [F],
    src: &[F],
    h: usize,
    w: usize,
    oy: isize,
    ox: isize,
    kw: F,
) {
    let lo = (-ox).max(0) as usize;
    let hi = ((w as isize - ox).max(0) as usize).min(w);
    for y in 0..h {
        let sy = reflect_index(y as isize + oy, h);
        let srow = &src[sy * w..sy * w + w];
        let drow = &mut dst[y * w..y * w + w];
        if lo < hi {
            let s = &srow[(lo as isize + ox) as usize..(hi as isize + ox) as usize];
            let d = &mut drow[lo..hi];
            for (dv, sv) in d.iter_mut().zip(s.iter()) {
                *dv += kw * *sv;
            }
        }
        for x in 0..lo {
            drow[x] += kw * srow[reflect_index(x as isize + ox, w)];
        }
        for x in hi..w {
            drow[x] += kw * srow[reflect_index(x as isize + ox, w)];
        }
    }
}

/// Adjoint of [`accumulate_shifted`]:
/// `dst[reflect(y+oy), reflect(x+ox)] += kw * src[y, x]`, with the same
/// contiguous interior fast path.
fn scatter_shifted<F: Scalar>(
    dst: &mut [F],
    src: &[F],
    h: usize,
    w: usize,
    oy: isize,
    ox: isize,
    kw: F,
) {
    let lo = (-ox).max(0) as usize;
    let hi = ((w as isize - ox).max(0) as usize).min(w);
    for y in 0..h {
        let sy = reflect_index(y as isize + oy, h);
        let (dst_lo, dst_hi) = (sy * w, sy * w + w);
        let srow = &src[y * w..y * w + w];
        if lo < hi {
            let d = &mut dst[dst_lo + (lo as isize + ox) as usize
                ..dst_lo + (hi as isize + ox) as usize];
            let s = &srow[lo..hi];
            for (dv, sv) in d.iter_mut().zip(s.iter()) {
                *dv += kw * *sv;
            }
        }
        let drow = &mut dst[dst_lo..dst_hi];
        for x in 0..lo {
            drow[reflect_index(x as isize + ox, w)] += kw * srow[x];
        }
        for x in hi..w {
            drow[reflect_index(x as isize + ox, w)] += kw * srow[x];
        }
    }
}

/// Gradients of [`Conv2d::forward`]: returns `(d/d input, d/d weight, d/d bias)`.
pub fn conv2d_backward<F: Scalar>(
    conv: &Conv2d<F>,
    x: &Array2<F>,
    h: usize,
    w: usize,
    grad_out: &Array2<F>,
) -> (Array2<F>, Array4<F>, Array1<F>) {
    let (c_out, c_in, k, _) = conv.weight.dim();
    let rad = (k / 2) as isize;
    let xs = x.as_slice().expect("contiguous input");
    let gs = grad_out.as_slice().expect("contiguous grad");
    let mut gx = Array2::<F>::zeros((c_in, h * w));
    let mut gw = Array4::<F>::zeros((c_out, c_in, k, k));
    let mut gb = Array1::<F>::zeros(c_out);

    for co in 0..c_out {
        let grow = &gs[co * h * w..(co + 1) * h * w];
        gb[co] = grow.iter().copied().sum();
    }
    // d/d weight: correlation of grad_out with the (reflected) input.
    for co in 0..c_out {
        let grow = &gs[co * h * w..(co + 1) * h * w];
        for ci in 0..c_in {
            let xrow = &xs[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                let oy = ky as isize - rad;
                for kx in 0..k {
                    let ox = kx as isize - rad;
                    let mut acc = F::zero();
                    for y in 0..h {
                        let sy = reflect_index(y as isize + oy, h);
                        let srow = &xrow[sy * w..sy * w + w];
                        let drow = &grow[y * w..y * w + w];
                        let lo = (-ox).max(0) as usize;
                        let hi = ((w as isize - ox).max(0) as usize).min(w);
                        if lo < hi {
                            let s = &srow[(lo as isize + ox) as usize..(hi as isize + ox) as usize];
                            let d = &drow[lo..hi];
                            for (dv, sv) in d.iter().zip(s.iter()) {
                                acc += *dv * *sv;
                            }
                        }
                        for xcol in 0..lo {
                            acc += drow[xcol] * srow[reflect_index(xcol as isize + ox, w)];
                        }
                        for xcol in hi..w {
                            acc += drow[xcol] * srow[reflect_index(xcol as isize + ox, w)];
                        }
                    }
                    gw[[co, ci, ky, kx]] = acc;
                }
            }
        }
    }
    // d/d input: scatter grad_out through the same index map.
    {
        let gxs = gx.as_slice_mut().expect("contiguous gx");
        for co in 0..c_out {
            let grow = &gs[co * h * w..(co + 1) * h * w];
            for ci in 0..c_in {
                let gxrow = &mut gxs[ci * h * w..(ci + 1) * h * w];
                for ky in 0..k {
                    let oy = ky as isize - rad;
                    for kx in 0..k {
                        let ox = kx as isize - rad;
                        let kw = conv.weight[[co, ci, ky, kx]];
                        if kw == F::zero() {
                            continue;
                        }
                        scatter_shifted(gxrow, grow, h, w, oy, ox, kw);
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

#[inline]
pub fn sigmoid_scalar<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

pub fn sigmoid<F: Scalar>(x: &Array1<F>) -> Array1<F> {
    x.mapv(sigmoid_scalar)
}

pub fn relu<F: Scalar>(x: &Array2<F>) -> Array2<F> {
    x.mapv(|v| v.max(F::zero()))
}

/// Fully connected layer `y = W x + b`.
pub fn fc_forward<F: Scalar>(w: &Array2<F>, b: &Array1<F>, x: &Array1<F>) -> Result<Array1<F>> {
    if w.ncols() != x.len() || w.nrows() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "fc: W {}x{}, b {}, x {}",
            w.nrows(),
            w.ncols(),
            b.len(),
            x.len()
        )));
    }
    Ok(w.dot(x) + b)
}

/// 2x2 average pooling; halves both spatial dimensions.
pub fn avg_pool2<F: Scalar>(x: &Array2<F>, h: usize, w: usize) -> Result<Array2<F>> {
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::OddDimensions(format!("{w}x{h}")));
    }
    let (c, l) = x.dim();
    if l != h * w {
        return Err(Error::ShapeMismatch(format!("pool input {l} != {h}*{w}")));
    }
    let (h2, w2) = (h / 2, w / 2);
    let quarter = sc::<F>(0.25);
    let mut out = Array2::<F>::zeros((c, h2 * w2));
    for ci in 0..c {
        for y in 0..h2 {
            for xcol in 0..w2 {
                let base = 2 * y * w + 2 * xcol;
                let s = x[[ci, base]] + x[[ci, base + 1]] + x[[ci, base + w]] + x[[ci, base + w + 1]];
                out[[ci, y * w2 + xcol]] = s * quarter;
            }
        }
    }
    Ok(out)
}

/// Replicate each coarse pixel into its aligned 2x2 block; doubles both
/// spatial dimensions (the flattened Kronecker upsampling).
pub fn kron_up2<F: Scalar>(x: &Array2<F>, h2: usize, w2: usize) -> Result<Array2<F>> {
    let (c, l) = x.dim();
    if l != h2 * w2 {
        return Err(Error::ShapeMismatch(format!("kron input {l} != {h2}*{w2}")));
    }
    let (h, w) = (2 * h2, 2 * w2);
    let mut out = Array2::<F>::zeros((c, h * w));
    for ci in 0..c {
        for y in 0..h2 {
            for xcol in 0..w2 {
                let v = x[[ci, y * w2 + xcol]];
                let base = 2 * y * w + 2 * xcol;
                out[[ci, base]] = v;
                out[[ci, base + 1]] = v;
                out[[ci, base + w]] = v;
                out[[ci, base + w + 1]] = v;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reflect101_examples() {
        assert_eq!(reflect_index(-1, 5), 1);
        assert_eq!(reflect_index(-2, 5), 2);
        assert_eq!(reflect_index(5, 5), 3);
        assert_eq!(reflect_index(6, 5), 2);
        assert_eq!(reflect_index(2, 5), 2);
        assert_eq!(reflect_index(-1, 1), 0);
        assert_eq!(reflect_index(3, 2), 1);
    }

    /// Naive straight-line convolution used as the oracle.
    fn conv_naive(conv: &Conv2d<f64>, x: &Array2<f64>, h: usize, w: usize) -> Array2<f64> {
        let (c_out, c_in, k, _) = conv.weight.dim();
        let rad = (k / 2) as isize;
        let mut out = Array2::<f64>::zeros((c_out, h * w));
        for co in 0..c_out {
            for y in 0..h {
                for xc in 0..w {
                    let mut acc = conv.bias[co];
                    for ci in 0..c_in {
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = reflect_index(y as isize + ky as isize - rad, h);
                                let sx = reflect_index(xc as isize + kx as isize - rad, w);
                                acc += conv.weight[[co, ci, ky, kx]] * x[[ci, sy * w + sx]];
                            }
                        }
                    }
                    out[[co, y * w + xc]] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for &(c_in, c_out, k, h, w) in
            &[(1usize, 1usize, 3usize, 4usize, 5usize), (2, 3, 3, 3, 3), (3, 2, 5, 6, 7)]
        {
            let mut conv = Conv2d::<f64>::xavier(c_out, c_in, k, 1.0, &mut rng);
            for b in conv.bias.iter_mut() {
                *b = rng.random::<f64>() - 0.5;
            }
            let x = Array2::from_shape_fn((c_in, h * w), |_| rng.random::<f64>() - 0.5);
            let got = conv.forward(&x, h, w).unwrap();
            let want = conv_naive(&conv, &x, h, w);
            for (g, n) in got.iter().zip(want.iter()) {
                assert!((g - n).abs() < 1e-12, "conv mismatch: {g} vs {n}");
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (c_in, c_out, k, h, w) = (2usize, 2usize, 3usize, 4usize, 4usize);
        let conv = Conv2d::<f64>::xavier(c_out, c_in, k, 1.0, &mut rng);
        let x = Array2::from_shape_fn((c_in, h * w), |_| rng.random::<f64>() - 0.5);
        // scalar loss: weighted sum of outputs
        let wsum = Array2::from_shape_fn((c_out, h * w), |_| rng.random::<f64>() - 0.5);
        let loss = |conv: &Conv2d<f64>, x: &Array2<f64>| -> f64 {
            (conv.forward(x, h, w).unwrap() * &wsum).sum()
        };
        let (gx, gw, gb) = conv2d_backward(&conv, &x, h, w, &wsum);
        let eps = 1e-6;
        // input gradient
        for idx in [0usize, 5, 13, 31] {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += eps;
            xm.as_slice_mut().unwrap()[idx] -= eps;
            let fd = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * eps);
            assert!((gx.as_slice().unwrap()[idx] - fd).abs() < 1e-7);
        }
        // weight gradient
        for idx in [0usize, 7, 17, 35] {
            let mut cp = conv.clone();
            let mut cm = conv.clone();
            cp.weight.as_slice_mut().unwrap()[idx] += eps;
            cm.weight.as_slice_mut().unwrap()[idx] -= eps;
            let fd = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * eps);
            assert!((gw.as_slice().unwrap()[idx] - fd).abs() < 1e-7);
        }
        // bias gradient
        for idx in 0..c_out {
            let mut cp = conv.clone();
            let mut cm = conv.clone();
            cp.bias[idx] += eps;
            cm.bias[idx] -= eps;
            let fd = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * eps);
            assert!((gb[idx] - fd).abs() < 1e-7);
        }
    }

    #[test]
    fn pooling_and_replication_examples() {
        // 1-band 2x2 {0,1,2,5} -> single pixel 2.0
        let x = array![[0.0, 1.0, 2.0, 5.0]];
        let p = avg_pool2(&x, 2, 2).unwrap();
        assert_eq!(p[[0, 0]], 2.0);

        // 1-band 1x2 low-res [[1,2]] -> 2x4 with left block 1, right block 2
        let up = kron_up2(&array![[1.0, 2.0]], 1, 2).unwrap();
        assert_eq!(
            up.as_slice().unwrap(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]
        );

        // pool(kron(x)) == x
        let x = array![[0.25, 0.5, 0.75, 1.0, 0.1, 0.2]];
        let round = avg_pool2(&kron_up2(&x, 2, 3).unwrap(), 4, 6).unwrap();
        assert_eq!(round, x);

        assert!(avg_pool2(&array![[1.0, 2.0, 3.0]], 1, 3).is_err());
    }

    #[test]
    fn kron_matches_explicit_kronecker_product() {
        // flattened 1x8 case: out = x_down (I_{L/4} kron 1_4^T) under
        // block-contiguous ordering, which for a 1-row image (h2=1) is the
        // plain row-major flattening of 2x2 replication... checked on 2x4.
        let x = array![[3.0, -1.0]]; // 1 band, 1x2 coarse grid
        let up = kron_up2(&x, 1, 2).unwrap();
        // explicit I_2 kron [1,1,1,1] with block-contiguous pixel order
        let mut kron = Array2::<f64>::zeros((2, 8));
        for i in 0..2 {
            for j in 0..4 {
                kron[[i, 4 * i + j]] = 1.0;
            }
        }
        let flat = x.dot(&kron); // 1x8, blocks contiguous
        // map block-contiguous order to row-major 2x4 coordinates
        let w = 4;
        for (blk, chunk) in flat.as_slice().unwrap().chunks(4).enumerate() {
            let (by, bx) = (0usize, blk);
            let coords = [
                (2 * by, 2 * bx),
                (2 * by, 2 * bx + 1),
                (2 * by + 1, 2 * bx),
                (2 * by + 1, 2 * bx + 1),
            ];
            for (v, (y, xc)) in chunk.iter().zip(coords.iter()) {
                assert_eq!(up[[0, y * w + xc]], *v);
            }
        }
    }

    #[test]
    fn sigmoid_is_stable_and_bounded() {
        assert!((sigmoid_scalar(0.0f64) - 0.5).abs() < 1e-15);
        assert!(sigmoid_scalar(30.0f64) < 1.0);
        assert!(sigmoid_scalar(30.0f64) > 0.999999);
        assert!(sigmoid_scalar(800.0f64) <= 1.0);
        assert!(sigmoid_scalar(-30.0f64) > 0.0);
        assert!(sigmoid_scalar(-30.0f64) < 1e-12);
        assert!(sigmoid_scalar(-800.0f64) >= 0.0);
        assert!(sigmoid_scalar(-800.0f64) < 1e-100);
    }

    #[test]
    fn conv_f32_instantiation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let conv = Conv2d::<f32>::xavier(2, 2, 3, 1.0, &mut rng);
        let x = Array2::<f32>::from_elem((2, 16), 0.5);
        let y = conv.forward(&x, 4, 4).unwrap();
        assert_eq!(y.dim(), (2, 16));
    }
}
