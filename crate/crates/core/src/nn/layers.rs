use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, Axis, Dimension};
use rand::Rng;

use super::{Grads, ParamId, ParamStore};

/// Square-kernel convolution, stride 1, zero "same" padding.
///
/// The weight is stored as `(out_channels, in_channels * k * k)`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        frozen: bool,
        rng: &mut R,
    ) -> Self {
        assert!(kernel % 2 == 1, "kernel must be odd");
        let fan_in = in_channels * kernel * kernel;
        let weight = store.add_he(
            format!("{name}.weight"),
            &[out_channels, fan_in],
            fan_in,
            frozen,
            rng,
        );
        let bias = store.add_zeros(format!("{name}.bias"), &[out_channels], frozen);
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
        }
    }

    /// Returns the output and the unfolded input needed by [`Conv2d::backward`].
    pub fn forward(&self, store: &ParamStore, x: &Array3<f32>) -> (Array3<f32>, Array2<f32>) {
        let (c, h, w) = x.dim();
        debug_assert_eq!(c, self.in_channels);
        let col = im2col(x, self.kernel);
        let mut y = store.view2(self.weight).dot(&col);
        let bias = store.view1(self.bias);
        for (mut row, &b) in y.axis_iter_mut(Axis(0)).zip(bias.iter()) {
            row += b;
        }
        let y = y
            .into_shape_with_order((self.out_channels, h, w))
            .expect("conv output shape");
        (y, col)
    }

    /// Accumulates weight/bias gradients; returns the input gradient when asked.
    pub fn backward(
        &self,
        store: &ParamStore,
        col: &Array2<f32>,
        dy: &Array3<f32>,
        grads: &mut Grads,
        input_grad: bool,
    ) -> Option<Array3<f32>> {
        let (oc, h, w) = dy.dim();
        let dy2 = dy
            .view()
            .into_shape_with_order((oc, h * w))
            .expect("contiguous gradient");
        grads.accumulate(self.weight, dy2.dot(&col.t()));
        grads.accumulate(self.bias, dy2.sum_axis(Axis(1)));
        input_grad.then(|| {
            let dcol = store.view2(self.weight).t().dot(&dy2);
            col2im(&dcol, self.in_channels, h, w, self.kernel)
        })
    }
}

fn im2col(x: &Array3<f32>, k: usize) -> Array2<f32> {
    let (c, h, w) = x.dim();
    if k == 1 {
        return x
            .view()
            .into_shape_with_order((c, h * w))
            .map(|v| v.to_owned())
            .unwrap_or_else(|_| {
                x.as_standard_layout()
                    .into_owned()
                    .into_shape_with_order((c, h * w))
                    .expect("reshape")
            });
    }
    let pad = k / 2;
    let mut col = Array2::<f32>::zeros((c * k * k, h * w));
    for ch in 0..c {
        let plane = x.index_axis(Axis(0), ch);
        for ky in 0..k {
            for kx in 0..k {
                let mut row = col.row_mut((ch * k + ky) * k + kx);
                let row = row.as_slice_mut().expect("contiguous row");
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = plane.row(sy as usize);
                    let dst = &mut row[y * w..(y + 1) * w];
                    // dst[x] = src[x + kx - pad]
                    let lo = pad.saturating_sub(kx);
                    let hi = (w + pad).saturating_sub(kx).min(w);
                    for xo in lo..hi {
                        dst[xo] = src[xo + kx - pad];
                    }
                }
            }
        }
    }
    col
}

fn col2im(dcol: &Array2<f32>, c: usize, h: usize, w: usize, k: usize) -> Array3<f32> {
    if k == 1 {
        return dcol
            .to_owned()
            .into_shape_with_order((c, h, w))
            .expect("reshape");
    }
    let pad = k / 2;
    let mut dx = Array3::<f32>::zeros((c, h, w));
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = dcol.row((ch * k + ky) * k + kx);
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let lo = pad.saturating_sub(kx);
                    let hi = (w + pad).saturating_sub(kx).min(w);
                    let mut dst = dx.slice_mut(s![ch, sy as usize, ..]);
                    for xo in lo..hi {
                        dst[xo + kx - pad] += row[y * w + xo];
                    }
                }
            }
        }
    }
    dx
}

/// Fully connected layer, weight `(out, in)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        frozen: bool,
        rng: &mut R,
    ) -> Self {
        let std = (1.0 / inputs as f64).sqrt();
        let weight = store.add_normal(
            format!("{name}.weight"),
            &[outputs, inputs],
            std,
            frozen,
            rng,
        );
        let bias = store.add_zeros(format!("{name}.bias"), &[outputs], frozen);
        Self { weight, bias }
    }

    pub fn forward(&self, store: &ParamStore, x: ArrayView1<f32>) -> Array1<f32> {
        store.view2(self.weight).dot(&x) + store.view1(self.bias)
    }

    /// Applies the layer to every column of `x`.
    pub fn forward_cols(&self, store: &ParamStore, x: ArrayView2<f32>) -> Array2<f32> {
        let mut y = store.view2(self.weight).dot(&x);
        for (mut row, &b) in y.axis_iter_mut(Axis(0)).zip(store.view1(self.bias).iter()) {
            row += b;
        }
        y
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        x: ArrayView1<f32>,
        dy: ArrayView1<f32>,
        grads: &mut Grads,
    ) -> Array1<f32> {
        let dw = dy.insert_axis(Axis(1)).dot(&x.insert_axis(Axis(0)));
        grads.accumulate(self.weight, dw);
        grads.accumulate(self.bias, dy.to_owned());
        store.view2(self.weight).t().dot(&dy)
    }

    pub fn backward_cols(
        &self,
        store: &ParamStore,
        x: ArrayView2<f32>,
        dy: ArrayView2<f32>,
        grads: &mut Grads,
        input_grad: bool,
    ) -> Option<Array2<f32>> {
        grads.accumulate(self.weight, dy.dot(&x.t()));
        grads.accumulate(self.bias, dy.sum_axis(Axis(1)));
        input_grad.then(|| store.view2(self.weight).t().dot(&dy))
    }
}

pub fn relu<D: Dimension>(mut x: ndarray::Array<f32, D>) -> ndarray::Array<f32, D> {
    x.mapv_inplace(|v| v.max(0.0));
    x
}

/// Gradient through a ReLU given its output.
pub fn relu_backward<D: Dimension>(
    output: &ndarray::Array<f32, D>,
    mut dy: ndarray::Array<f32, D>,
) -> ndarray::Array<f32, D> {
    ndarray::Zip::from(&mut dy).and(output).for_each(|d, &y| {
        if y <= 0.0 {
            *d = 0.0;
        }
    });
    dy
}

/// Winner position (0..4) inside each 2x2 pooling window.
#[derive(Debug, Clone)]
pub struct PoolIndices {
    winners: Vec<u8>,
    input_dim: (usize, usize, usize),
}

/// 2x2 max pooling with stride 2; input dimensions must be even.
pub fn maxpool2(x: &Array3<f32>) -> (Array3<f32>, PoolIndices) {
    let (c, h, w) = x.dim();
    debug_assert!(h % 2 == 0 && w % 2 == 0);
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Array3::<f32>::zeros((c, oh, ow));
    let mut winners = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let mut best = x[[ch, 2 * i, 2 * j]];
                let mut arg = 0u8;
                for (k, (di, dj)) in [(0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                    let v = x[[ch, 2 * i + di, 2 * j + dj]];
                    if v > best {
                        best = v;
                        arg = k as u8 + 1;
                    }
                }
                y[[ch, i, j]] = best;
                winners.push(arg);
            }
        }
    }
    (
        y,
        PoolIndices {
            winners,
            input_dim: (c, h, w),
        },
    )
}

pub fn maxpool2_backward(idx: &PoolIndices, dy: &Array3<f32>) -> Array3<f32> {
    let mut dx = Array3::<f32>::zeros(idx.input_dim);
    let (c, oh, ow) = dy.dim();
    let mut k = 0;
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let (di, dj) = match idx.winners[k] {
                    0 => (0, 0),
                    1 => (0, 1),
                    2 => (1, 0),
                    _ => (1, 1),
                };
                dx[[ch, 2 * i + di, 2 * j + dj]] = dy[[ch, i, j]];
                k += 1;
            }
        }
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(x: &Array3<f32>) -> Array3<f32> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, 2 * h, 2 * w), |(ch, i, j)| x[[ch, i / 2, j / 2]])
}

pub fn upsample2_backward(dy: &Array3<f32>) -> Array3<f32> {
    let (c, h, w) = dy.dim();
    let mut dx = Array3::<f32>::zeros((c, h / 2, w / 2));
    for ((ch, i, j), &g) in dy.indexed_iter() {
        dx[[ch, i / 2, j / 2]] += g;
    }
    dx
}

pub fn concat_channels(a: &Array3<f32>, b: &Array3<f32>) -> Array3<f32> {
    ndarray::concatenate(Axis(0), &[a.view(), b.view()]).expect("matching spatial dims")
}

/// Inverse of [`concat_channels`] for gradients.
pub fn split_channels(d: &Array3<f32>, first: usize) -> (Array3<f32>, Array3<f32>) {
    (
        d.slice(s![..first, .., ..]).to_owned(),
        d.slice(s![first.., .., ..]).to_owned(),
    )
}

pub fn softmax(x: ArrayView1<f32>) -> Array1<f32> {
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let e = x.mapv(|v| (v - max).exp());
    let sum = e.sum();
    e / sum
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct convolution used as an independent reference.
    fn conv_direct(
        x: &Array3<f32>,
        w: ArrayView2<f32>,
        b: ArrayView1<f32>,
        k: usize,
    ) -> Array3<f32> {
        let (c, h, wd) = x.dim();
        let oc = w.nrows();
        let pad = k as isize / 2;
        Array3::from_shape_fn((oc, h, wd), |(o, y, xo)| {
            let mut acc = b[o];
            for ch in 0..c {
                for ky in 0..k {
                    for kx in 0..k {
                        let sy = y as isize + ky as isize - pad;
                        let sx = xo as isize + kx as isize - pad;
                        if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < wd {
                            acc +=
                                w[[o, (ch * k + ky) * k + kx]] * x[[ch, sy as usize, sx as usize]];
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_matches_direct_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for k in [1, 3, 5] {
            let mut store = ParamStore::new();
            let conv = Conv2d::new(&mut store, "c", 2, 3, k, false, &mut rng);
            *store.value_mut(conv.bias) = ndarray::arr1(&[0.1f32, -0.2, 0.3]).into_dyn();
            let x = Array3::from_shape_fn((2, 5, 7), |(c, i, j)| {
                ((c * 31 + i * 7 + j * 3) % 11) as f32 / 11.0 - 0.5
            });
            let (y, _) = conv.forward(&store, &x);
            let want = conv_direct(&x, store.view2(conv.weight), store.view1(conv.bias), k);
            for (a, b) in y.iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn conv_input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let conv = Conv2d::new(&mut store, "c", 2, 2, 3, false, &mut rng);
        let x = Array3::from_shape_fn((2, 4, 5), |(c, i, j)| {
            ((c + 2 * i + 3 * j) % 7) as f32 / 7.0
        });
        let probe = Array3::from_shape_fn((2, 4, 5), |(c, i, j)| {
            ((c * 5 + i * 3 + j) % 5) as f32 - 2.0
        });
        let loss = |x: &Array3<f32>| -> f64 {
            let (y, _) = conv.forward(&store, x);
            y.iter()
                .zip(probe.iter())
                .map(|(a, b)| (*a as f64) * (*b as f64))
                .sum()
        };
        let (_, col) = conv.forward(&store, &x);
        let mut grads = Grads::new(&store);
        let dx = conv
            .backward(&store, &col, &probe, &mut grads, true)
            .unwrap();
        let h = 1e-2f32;
        for idx in [(0, 0, 0), (1, 2, 3), (0, 3, 4), (1, 1, 0)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h as f64);
            assert!((fd - dx[idx] as f64).abs() < 1e-2, "{fd} vs {}", dx[idx]);
        }
        // weight gradient: loss is linear in w, so FD is exact up to rounding
        let gw = grads.get(conv.weight).unwrap().clone();
        let mut s2 = store.clone();
        s2.value_mut(conv.weight)[[1, 4]] += h;
        let (y2, _) = conv.forward(&s2, &x);
        let (y1, _) = conv.forward(&store, &x);
        let fd: f64 = y2
            .iter()
            .zip(y1.iter())
            .zip(probe.iter())
            .map(|((a, b), p)| ((a - b) * p) as f64)
            .sum::<f64>()
            / h as f64;
        assert!((fd - gw[[1, 4]] as f64).abs() < 1e-2);
    }

    #[test]
    fn pool_and_upsample_adjoint() {
        let x = Array3::from_shape_fn((1, 4, 4), |(_, i, j)| (i * 4 + j) as f32);
        let (y, idx) = maxpool2(&x);
        assert_eq!(
            y,
            Array3::from_shape_vec((1, 2, 2), vec![5.0, 7.0, 13.0, 15.0]).unwrap()
        );
        let dx = maxpool2_backward(&idx, &Array3::ones((1, 2, 2)));
        assert_eq!(dx.sum(), 4.0);
        assert_eq!(dx[[0, 1, 1]], 1.0);
        let u = upsample2(&y);
        assert_eq!(u.dim(), (1, 4, 4));
        assert_eq!(
            upsample2_backward(&Array3::ones((1, 4, 4))),
            Array3::from_elem((1, 2, 2), 4.0)
        );
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(ndarray::arr1(&[1.0f32, 2.0, 1000.0]).view());
        assert!((p.sum() - 1.0).abs() < 1e-6);
        assert!(p[2] > 0.99);
    }
}
