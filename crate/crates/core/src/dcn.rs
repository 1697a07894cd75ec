//! Modulated deformable convolution.
//!
//! Every kernel tap `i` of an output location `p` reads the input at `p + p_i + Δp_i(p)` through
//! zero-padded bilinear interpolation and is scaled by a modulation factor `m_i(p) ∈ [0, 1]`
//! before the weighted sum of an ordinary convolution. Offsets and modulation come from a
//! same-resolution branch convolution over the layer input; one deformation field is shared by
//! all input and output channels. With `m ≡ 1` this is the unmodulated deformable convolution,
//! and with zero offsets as well it is plain convolution.
//!
//! Offset channel layout: channel `2i` holds the row displacement of tap `i`, `2i + 1` the column
//! displacement (taps in row-major kernel order).

use rand::Rng;

use crate::error::{Error, Result};
use crate::layer::{join, missing_cache, Conv, Layer, Mode, ParamMut, ParamRef};
use crate::par;
use crate::real::Real;
use crate::tensor::conv::{gemm_rows, gemm_rows_ex};
use crate::tensor::{activation::sigmoid, BilinearTap, ConvWeights, Tensor};

/// Deformable layer: main k×k weights plus the offset/modulation branch (3·k² outputs).
#[derive(Clone, Debug)]
pub struct DcnLayer<T = f32> {
    pub main: Conv<T>,
    pub branch: Conv<T>,
    cache: Option<DcnCache<T>>,
}

#[derive(Clone, Debug)]
struct DcnCache<T> {
    input: Tensor<T>,
    offsets: Tensor<T>,
    modulation: Tensor<T>,
}

/// Gradients of [`dcn_forward`].
#[derive(Clone, Debug)]
pub struct DcnGrads<T> {
    pub input: Tensor<T>,
    pub kernel: Tensor<T>,
    pub bias: Option<Vec<T>>,
    pub offsets: Tensor<T>,
    pub modulation: Tensor<T>,
}

impl<T: Real> DcnLayer<T> {
    /// Stride-1, same-padding layer with a biased main convolution and a zeroed branch, so a fresh
    /// layer samples the regular grid with modulation 0.5.
    pub fn new(in_ch: usize, out_ch: usize, kernel_size: usize) -> Result<Self> {
        if kernel_size % 2 == 0 {
            return Err(Error::InvalidArgument(format!("deformable kernel size must be odd, got {kernel_size}")));
        }
        let pad = kernel_size / 2;
        let taps = kernel_size * kernel_size;
        Ok(DcnLayer {
            main: Conv::new(ConvWeights::new(in_ch, out_ch, kernel_size, 1, pad, 1, true)?),
            branch: Conv::new(ConvWeights::new(in_ch, 3 * taps, kernel_size, 1, pad, 1, true)?),
            cache: None,
        })
    }

    /// Number of sampling taps K = k².
    pub fn taps(&self) -> usize {
        let k = self.main.weights.kernel_size();
        k * k
    }

    pub fn in_channels(&self) -> usize {
        self.main.weights.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.main.weights.out_channels()
    }

    pub fn he_init<R: Rng>(&mut self, rng: &mut R) {
        self.main.he_init(rng);
    }

    pub fn cast<U: Real>(&self) -> DcnLayer<U> {
        DcnLayer {
            main: self.main.cast(),
            branch: self.branch.cast(),
            cache: None,
        }
    }
}

/// Runs the branch convolution: raw offsets (first 2K channels) and sigmoid modulation (last K).
pub fn dcn_branch<T: Real>(layer: &DcnLayer<T>, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let raw = crate::tensor::conv2d(x, &layer.branch.weights)?;
    split_branch(&raw, layer.taps())
}

fn split_branch<T: Real>(raw: &Tensor<T>, taps: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let offsets = raw.slice_channels(0, 2 * taps)?;
    let modulation = raw.slice_channels(2 * taps, 3 * taps)?.map(sigmoid);
    Ok((offsets, modulation))
}

/// Sampling taps for every (kernel tap, output location) of item `b`, kernel-tap major.
fn sampling_taps<T: Real>(offsets: &Tensor<T>, b: usize, k: usize, h: usize, w: usize) -> Vec<BilinearTap<T>> {
    let pad = (k / 2) as isize;
    let p = h * w;
    let mut taps = Vec::with_capacity(k * k * p);
    for i in 0..k * k {
        let (ki, kj) = ((i / k) as isize, (i % k) as isize);
        let dy = offsets.channel(b, 2 * i);
        let dx = offsets.channel(b, 2 * i + 1);
        for oy in 0..h {
            for ox in 0..w {
                let q = oy * w + ox;
                let row = T::of((oy as isize - pad + ki) as f64) + dy[q];
                let col = T::of((ox as isize - pad + kj) as f64) + dx[q];
                taps.push(BilinearTap::new(row, col, h, w));
            }
        }
    }
    taps
}

/// Bilinear samples `S[(c·K + i) × P]` of item `b`.
fn gather_samples<T: Real>(x: &Tensor<T>, b: usize, taps: &[BilinearTap<T>], kk: usize, samples: &mut [T]) {
    let (w, p) = (x.width(), x.plane());
    par::chunks_mut(samples, p, |row, dst| {
        let (c, i) = (row / kk, row % kk);
        let plane = x.channel(b, c);
        for (d, tap) in dst.iter_mut().zip(&taps[i * p..(i + 1) * p]) {
            *d = tap.interpolate(plane, w);
        }
    });
}

fn check_fields<T: Real>(main: &ConvWeights<T>, x: &Tensor<T>, offsets: &Tensor<T>, modulation: &Tensor<T>) -> Result<()> {
    let [n, c, h, w] = x.shape();
    let k = main.kernel_size();
    let kk = k * k;
    if c != main.in_channels() || main.groups != 1 || main.stride != 1 || main.padding != k / 2 || k % 2 == 0 {
        return Err(Error::shape("dcn_forward", x.shape(), main.kernel.shape()));
    }
    if offsets.shape() != [n, 2 * kk, h, w] {
        return Err(Error::shape("dcn_forward (offsets)", offsets.shape(), [n, 2 * kk, h, w]));
    }
    if modulation.shape() != [n, kk, h, w] {
        return Err(Error::shape("dcn_forward (modulation)", modulation.shape(), [n, kk, h, w]));
    }
    Ok(())
}

/// The modulated deformable convolution of `x` with the layer's main weights.
pub fn dcn_forward<T: Real>(main: &ConvWeights<T>, x: &Tensor<T>, offsets: &Tensor<T>, modulation: &Tensor<T>) -> Result<Tensor<T>> {
    check_fields(main, x, offsets, modulation)?;
    let [n, c, h, w] = x.shape();
    let k = main.kernel_size();
    let kk = k * k;
    let p = h * w;
    let oc = main.out_channels();
    let mut out = Tensor::zeros([n, oc, h, w]);
    let mut cols = vec![T::zero(); c * kk * p];
    for b in 0..n {
        let taps = sampling_taps(offsets, b, k, h, w);
        gather_samples(x, b, &taps, kk, &mut cols);
        modulate(&mut cols, modulation.item(b), kk * p);
        gemm_rows(oc, c * kk, p, main.kernel.data(), &cols, out.item_mut(b));
    }
    if let Some(bias) = &main.bias {
        for (i, plane) in out.data_mut().chunks_mut(p).enumerate() {
            let bv = bias[i % oc];
            plane.iter_mut().for_each(|v| *v += bv);
        }
    }
    Ok(out)
}

/// Scales every channel block of `cols` by the (K × P) modulation field.
fn modulate<T: Real>(cols: &mut [T], modulation: &[T], block: usize) {
    par::chunks_mut(cols, block, |_, chunk| {
        chunk.iter_mut().zip(modulation).for_each(|(v, &m)| *v *= m);
    });
}

/// Gradients of [`dcn_forward`] for input, weights, bias, offsets and modulation.
pub fn dcn_backward<T: Real>(
    main: &ConvWeights<T>,
    x: &Tensor<T>,
    offsets: &Tensor<T>,
    modulation: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<DcnGrads<T>> {
    check_fields(main, x, offsets, modulation)?;
    let [n, c, h, w] = x.shape();
    let k = main.kernel_size();
    let kk = k * k;
    let p = h * w;
    let oc = main.out_channels();
    if grad_out.shape() != [n, oc, h, w] {
        return Err(Error::shape("dcn_backward", grad_out.shape(), [n, oc, h, w]));
    }
    let ck = c * kk;
    let mut grads = DcnGrads {
        input: Tensor::zeros(x.shape()),
        kernel: Tensor::zeros(main.kernel.shape()),
        bias: main.bias.as_ref().map(|_| vec![T::zero(); oc]),
        offsets: Tensor::zeros(offsets.shape()),
        modulation: Tensor::zeros(modulation.shape()),
    };
    let mut samples = vec![T::zero(); ck * p];
    let mut cols = vec![T::zero(); ck * p];
    let mut grad_cols = vec![T::zero(); ck * p];

    for b in 0..n {
        let taps = sampling_taps(offsets, b, k, h, w);
        gather_samples(x, b, &taps, kk, &mut samples);
        cols.copy_from_slice(&samples);
        let m = modulation.item(b);
        modulate(&mut cols, m, kk * p);
        let g = grad_out.item(b);

        // dW[oc × ck] += G[oc × p] · colsᵀ
        gemm_rows_ex(oc, p, ck, g, (p as isize, 1), &cols, (1, p as isize), T::one(), grads.kernel.data_mut());
        // dcols[ck × p] = Wᵀ · G
        gemm_rows_ex(ck, oc, p, main.kernel.data(), (1, ck as isize), g, (p as isize, 1), T::zero(), &mut grad_cols);

        // Offset and modulation gradients: per (tap, location), reduced over channels in order.
        let field: Vec<(T, T, T)> = par::map(kk * p, |q| {
            let (i, s) = (q / p, q % p);
            let tap = &taps[q];
            let mq = m[q];
            let (mut gm, mut gy, mut gx) = (T::zero(), T::zero(), T::zero());
            for ch in 0..c {
                let r = (ch * kk + i) * p + s;
                let gc = grad_cols[r];
                gm += gc * samples[r];
                if tap.any_valid() {
                    let (d_row, d_col) = tap.coord_grad(x.channel(b, ch), w);
                    gy += gc * mq * d_row;
                    gx += gc * mq * d_col;
                }
            }
            (gm, gy, gx)
        });
        let gmod = grads.modulation.item_mut(b);
        for (q, &(gm, _, _)) in field.iter().enumerate() {
            gmod[q] = gm;
        }
        let goff = grads.offsets.item_mut(b);
        for (q, &(_, gy, gx)) in field.iter().enumerate() {
            let (i, s) = (q / p, q % p);
            goff[2 * i * p + s] = gy;
            goff[(2 * i + 1) * p + s] = gx;
        }

        // Input gradient: scatter through the bilinear weights, one channel plane per task.
        par::chunks_mut(grads.input.item_mut(b), p, |ch, plane| {
            for i in 0..kk {
                let base = (ch * kk + i) * p;
                for s in 0..p {
                    let q = i * p + s;
                    let gs = grad_cols[base + s] * m[q];
                    if gs != T::zero() {
                        taps[q].scatter(gs, plane, w);
                    }
                }
            }
        });
    }

    if let Some(gb) = grads.bias.as_mut() {
        for (i, plane) in grad_out.data().chunks(p).enumerate() {
            gb[i % oc] += plane.iter().copied().sum::<T>();
        }
    }
    Ok(grads)
}

impl<T: Real> Layer<T> for DcnLayer<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let raw = self.branch.forward(x, mode)?;
        let (offsets, modulation) = split_branch(&raw, self.taps())?;
        let y = dcn_forward(&self.main.weights, x, &offsets, &modulation)?;
        self.cache = Some(DcnCache {
            input: x.clone(),
            offsets,
            modulation,
        });
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.as_ref().ok_or_else(|| missing_cache("dcn"))?;
        let g = dcn_backward(&self.main.weights, &cache.input, &cache.offsets, &cache.modulation, grad)?;
        self.main.grad_kernel.add_assign(&g.kernel)?;
        if let (Some(acc), Some(gb)) = (self.main.grad_bias.as_mut(), g.bias) {
            acc.iter_mut().zip(gb).for_each(|(a, b)| *a += b);
        }
        let kk = self.taps();
        let mut g_raw = Tensor::zeros([grad.batch(), 3 * kk, grad.height(), grad.width()]);
        g_raw.write_channels(0, &g.offsets)?;
        let mut g_logit = g.modulation;
        g_logit
            .data_mut()
            .iter_mut()
            .zip(cache.modulation.data())
            .for_each(|(gv, &m)| *gv *= m * (T::one() - m));
        g_raw.write_channels(2 * kk, &g_logit)?;
        let mut gx = self.branch.backward(&g_raw)?;
        gx.add_assign(&g.input)?;
        Ok(gx)
    }

    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        self.main.params(&join(prefix, "main"), out);
        self.branch.params(&join(prefix, "branch"), out);
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        self.main.params_mut(&join(prefix, "main"), out);
        self.branch.params_mut(&join(prefix, "branch"), out);
    }

    fn clear_cache(&mut self) {
        self.main.clear_cache();
        self.branch.clear_cache();
        self.cache = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::conv2d;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_layer(seed: u64, c_in: usize, c_out: usize) -> (DcnLayer<f32>, Tensor<f32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = DcnLayer::new(c_in, c_out, 3).unwrap();
        layer.main.weights.kernel.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        layer.main.weights.bias.as_mut().unwrap().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        let x = Tensor::from_fn([2, c_in, 6, 7], |_, _, _, _| rng.random_range(-1.0..1.0));
        (layer, x)
    }

    #[test]
    fn zero_branch_gives_regular_grid_and_half_modulation() {
        let (layer, x) = random_layer(1, 2, 3);
        let (off, m) = dcn_branch(&layer, &x).unwrap();
        assert_eq!(off.shape(), [2, 18, 6, 7]);
        assert_eq!(m.shape(), [2, 9, 6, 7]);
        assert!(off.data().iter().all(|&v| v == 0.0));
        assert!(m.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn saturated_modulation_bias() {
        let (mut layer, x) = random_layer(2, 2, 3);
        let bias = layer.branch.weights.bias.as_mut().unwrap();
        bias[18..].iter_mut().for_each(|v| *v = 20.0);
        let (_, m) = dcn_branch(&layer, &x).unwrap();
        assert!(m.data().iter().all(|&v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn collapses_to_convolution() {
        let (layer, x) = random_layer(3, 3, 4);
        let off = Tensor::zeros([2, 18, 6, 7]);
        let m = Tensor::full([2, 9, 6, 7], 1.0);
        let y = dcn_forward(&layer.main.weights, &x, &off, &m).unwrap();
        let r = conv2d(&x, &layer.main.weights).unwrap();
        for (a, b) in y.data().iter().zip(r.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn zero_modulation_leaves_bias() {
        let (layer, x) = random_layer(4, 2, 3);
        let off = Tensor::full([2, 18, 6, 7], 0.3);
        let m = Tensor::zeros([2, 9, 6, 7]);
        let y = dcn_forward(&layer.main.weights, &x, &off, &m).unwrap();
        let bias = layer.main.weights.bias.as_ref().unwrap();
        for b in 0..2 {
            for o in 0..3 {
                assert!(y.channel(b, o).iter().all(|&v| v == bias[o]));
            }
        }
        let g = dcn_backward(&layer.main.weights, &x, &off, &m, &Tensor::full(y.shape(), 1.0)).unwrap();
        assert!(g.kernel.data().iter().all(|&v| v == 0.0));
        assert!(g.input.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_column_offset_is_a_left_shift() {
        let (layer, x) = random_layer(5, 2, 2);
        let mut off = Tensor::zeros([2, 18, 6, 7]);
        for b in 0..2 {
            for i in 0..9 {
                for q in 0..42 {
                    let idx = off.index(b, 2 * i + 1, q / 7, q % 7);
                    off.data_mut()[idx] = 1.0;
                }
            }
        }
        let m = Tensor::full([2, 9, 6, 7], 1.0);
        let y = dcn_forward(&layer.main.weights, &x, &off, &m).unwrap();
        // Translate by one column: convolve the input extended by a zero column on the right and
        // read the result one column further along.
        let extended = Tensor::from_fn([2, 2, 6, 8], |b, c, yy, xx| if xx < 7 { x.at(b, c, yy, xx) } else { 0.0 });
        let r = conv2d(&extended, &layer.main.weights).unwrap();
        let shifted = Tensor::from_fn(y.shape(), |b, o, yy, xx| r.at(b, o, yy, xx + 1));
        for (a, b) in y.data().iter().zip(shifted.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn rejects_mismatched_fields() {
        let (layer, x) = random_layer(6, 2, 2);
        let off = Tensor::zeros([2, 18, 5, 7]);
        let m = Tensor::full([2, 9, 6, 7], 1.0);
        assert!(dcn_forward(&layer.main.weights, &x, &off, &m).is_err());
    }

    #[test]
    fn layer_backward_without_forward_errors() {
        let (mut layer, _) = random_layer(7, 2, 2);
        assert!(layer.backward(&Tensor::zeros([1, 2, 4, 4])).is_err());
    }
}
