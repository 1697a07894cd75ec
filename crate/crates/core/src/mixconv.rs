//! Mixed depthwise convolution, squeeze-excitation, and the inverted-bottleneck block built on them.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layer::{join, missing_cache, Conv, ConvBnAct, Layer, Mode, ParamMut, ParamRef};
use crate::real::Real;
use crate::tensor::{activate, activate_backward, Activation, BatchNorm, ConvWeights, Tensor};

/// Near-equal channel partition: `⌊c/g⌋` per group, remainder one each to the leading groups.
pub fn split_channels(c: usize, kernel_sizes: &[usize]) -> Result<Vec<usize>> {
    let g = kernel_sizes.len();
    if g == 0 || c < g {
        return Err(Error::InvalidArgument(format!(
            "cannot split {c} channels into {g} kernel groups"
        )));
    }
    let (base, rem) = (c / g, c % g);
    Ok((0..g).map(|i| base + usize::from(i < rem)).collect())
}

/// Depthwise convolution whose channel groups use different (odd) kernel sizes.
#[derive(Clone, Debug)]
pub struct MixConv<T = f32> {
    pub kernel_sizes: Vec<usize>,
    pub stride: usize,
    pub groups: Vec<Conv<T>>,
}

impl<T: Real> MixConv<T> {
    pub fn new(channels: usize, kernel_sizes: &[usize], stride: usize) -> Result<Self> {
        let sizes = split_channels(channels, kernel_sizes)?;
        let groups = sizes
            .iter()
            .zip(kernel_sizes)
            .map(|(&gc, &k)| {
                if k % 2 == 0 {
                    return Err(Error::InvalidArgument(format!("mixconv kernel sizes must be odd, got {k}")));
                }
                Ok(Conv::new(ConvWeights::new(gc, gc, k, stride, k / 2, gc, false)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MixConv {
            kernel_sizes: kernel_sizes.to_vec(),
            stride,
            groups,
        })
    }

    pub fn channels(&self) -> usize {
        self.group_sizes().iter().sum()
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        self.groups.iter().map(|g| g.weights.out_channels()).collect()
    }

    pub fn he_init<R: Rng>(&mut self, rng: &mut R) {
        self.groups.iter_mut().for_each(|g| g.he_init(rng));
    }

    pub fn cast<U: Real>(&self) -> MixConv<U> {
        MixConv {
            kernel_sizes: self.kernel_sizes.clone(),
            stride: self.stride,
            groups: self.groups.iter().map(Conv::cast).collect(),
        }
    }
}

impl<T: Real> Layer<T> for MixConv<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        if x.channels() != self.channels() {
            return Err(Error::shape("mixconv", x.shape(), self.group_sizes()));
        }
        let mut out: Option<Tensor<T>> = None;
        let mut start = 0;
        for g in &mut self.groups {
            let gc = g.weights.out_channels();
            let y = g.forward(&x.slice_channels(start, start + gc)?, mode)?;
            let o = out.get_or_insert_with(|| Tensor::zeros([x.batch(), x.channels(), y.height(), y.width()]));
            o.write_channels(start, &y)?;
            start += gc;
        }
        out.ok_or_else(|| Error::InvalidArgument("mixconv without groups".into()))
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let mut gx: Option<Tensor<T>> = None;
        let mut start = 0;
        for g in &mut self.groups {
            let gc = g.weights.out_channels();
            let gi = g.backward(&grad.slice_channels(start, start + gc)?)?;
            let o = gx.get_or_insert_with(|| Tensor::zeros([grad.batch(), grad.channels(), gi.height(), gi.width()]));
            o.write_channels(start, &gi)?;
            start += gc;
        }
        gx.ok_or_else(|| missing_cache("mixconv"))
    }

    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        for (i, g) in self.groups.iter().enumerate() {
            g.params(&join(prefix, &format!("k{}", self.kernel_sizes[i])), out);
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        for (g, k) in self.groups.iter_mut().zip(&self.kernel_sizes) {
            g.params_mut(&join(prefix, &format!("k{k}")), out);
        }
    }

    fn clear_cache(&mut self) {
        self.groups.iter_mut().for_each(Layer::clear_cache);
    }
}

/// Channel attention: average pool → linear (squeeze) → relu → linear → h_sigmoid gate → scale.
#[derive(Clone, Debug)]
pub struct SqueezeExcite<T = f32> {
    pub reduce: Conv<T>,
    pub expand: Conv<T>,
    cache: Option<SeCache<T>>,
}

#[derive(Clone, Debug)]
struct SeCache<T> {
    input: Tensor<T>,
    hidden_pre: Tensor<T>,
    gate_pre: Tensor<T>,
    gate: Tensor<T>,
}

impl<T: Real> SqueezeExcite<T> {
    pub fn new(channels: usize, squeeze: usize) -> Result<Self> {
        Ok(SqueezeExcite {
            reduce: Conv::new(ConvWeights::new(channels, squeeze, 1, 1, 0, 1, true)?),
            expand: Conv::new(ConvWeights::new(squeeze, channels, 1, 1, 0, 1, true)?),
            cache: None,
        })
    }

    /// `⌈channels · ratio⌉` squeeze width.
    pub fn with_ratio(channels: usize, ratio: f64) -> Result<Self> {
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(Error::InvalidArgument(format!("se ratio must lie in (0, 1], got {ratio}")));
        }
        Self::new(channels, squeeze_width(channels, ratio))
    }

    pub fn channels(&self) -> usize {
        self.reduce.weights.in_channels()
    }

    pub fn squeeze(&self) -> usize {
        self.reduce.weights.out_channels()
    }

    pub fn he_init<R: Rng>(&mut self, rng: &mut R) {
        self.reduce.he_init(rng);
        self.expand.he_init(rng);
    }

    pub fn cast<U: Real>(&self) -> SqueezeExcite<U> {
        SqueezeExcite {
            reduce: self.reduce.cast(),
            expand: self.expand.cast(),
            cache: None,
        }
    }

    /// The per-(item, channel) gate of the last forward pass, shape (N, C, 1, 1).
    pub fn last_gate(&self) -> Option<&Tensor<T>> {
        self.cache.as_ref().map(|c| &c.gate)
    }
}

pub fn squeeze_width(channels: usize, ratio: f64) -> usize {
    ((channels as f64 * ratio).ceil() as usize).max(1)
}

fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, _, _] = x.shape();
    let inv = T::one() / T::of(x.plane() as f64);
    Tensor::from_fn([n, c, 1, 1], |b, ch, _, _| x.channel(b, ch).iter().copied().sum::<T>() * inv)
}

impl<T: Real> Layer<T> for SqueezeExcite<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        if x.channels() != self.channels() {
            return Err(Error::shape("se_block", x.shape(), [self.channels()]));
        }
        let pooled = global_avg_pool(x);
        let hidden_pre = self.reduce.forward(&pooled, mode)?;
        let hidden = activate(&hidden_pre, Activation::Relu);
        let gate_pre = self.expand.forward(&hidden, mode)?;
        let gate = activate(&gate_pre, Activation::HSigmoid);
        let p = x.plane();
        let mut out = x.clone();
        for (i, plane) in out.data_mut().chunks_mut(p).enumerate() {
            let gv = gate.data()[i];
            plane.iter_mut().for_each(|v| *v *= gv);
        }
        self.cache = Some(SeCache {
            input: x.clone(),
            hidden_pre,
            gate_pre,
            gate,
        });
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.take().ok_or_else(|| missing_cache("se_block"))?;
        let p = grad.plane();
        let mut gx = grad.clone();
        let mut g_gate = Tensor::zeros(cache.gate.shape());
        for (i, plane) in gx.data_mut().chunks_mut(p).enumerate() {
            let xs = &cache.input.data()[i * p..(i + 1) * p];
            g_gate.data_mut()[i] = plane.iter().zip(xs).map(|(&g, &v)| g * v).sum::<T>();
            let gv = cache.gate.data()[i];
            plane.iter_mut().for_each(|v| *v *= gv);
        }
        let g_gate_pre = activate_backward(&cache.gate_pre, &g_gate, Activation::HSigmoid);
        let g_hidden = self.expand.backward(&g_gate_pre)?;
        let g_hidden_pre = activate_backward(&cache.hidden_pre, &g_hidden, Activation::Relu);
        let g_pooled = self.reduce.backward(&g_hidden_pre)?;
        let inv = T::one() / T::of(p as f64);
        for (i, plane) in gx.data_mut().chunks_mut(p).enumerate() {
            let add = g_pooled.data()[i] * inv;
            plane.iter_mut().for_each(|v| *v += add);
        }
        self.cache = Some(cache);
        Ok(gx)
    }

    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        self.reduce.params(&join(prefix, "reduce"), out);
        self.expand.params(&join(prefix, "expand"), out);
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        self.reduce.params_mut(&join(prefix, "reduce"), out);
        self.expand.params_mut(&join(prefix, "expand"), out);
    }

    fn clear_cache(&mut self) {
        self.reduce.clear_cache();
        self.expand.clear_cache();
        self.cache = None;
    }
}

/// Shape of one inverted-bottleneck block.
#[derive(Clone, Debug, PartialEq)]
pub struct MnBlockSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
    pub expansion: f64,
    pub kernel_sizes: Vec<usize>,
    pub se_ratio: Option<f64>,
}

impl MnBlockSpec {
    /// `round(in_ch · t)`.
    pub fn expanded(&self) -> usize {
        (self.in_ch as f64 * self.expansion).round() as usize
    }

    pub fn has_residual(&self) -> bool {
        self.stride == 1 && self.in_ch == self.out_ch
    }

    /// Width of the squeeze-excitation bottleneck, gating the `out_ch` projected channels.
    pub fn squeeze(&self) -> Option<usize> {
        self.se_ratio.map(|r| squeeze_width(self.out_ch, r))
    }
}

/// 1×1 expand (BN, h_swish) → mixed depthwise (BN, h_swish) → 1×1 project (BN) → optional
/// squeeze-excitation on the projected branch → identity shortcut when shapes allow.
#[derive(Clone, Debug)]
pub struct MnBlock<T = f32> {
    pub spec: MnBlockSpec,
    pub expand: ConvBnAct<T>,
    pub mix: MixConv<T>,
    pub mix_bn: BatchNorm<T>,
    pub project: ConvBnAct<T>,
    pub se: Option<SqueezeExcite<T>>,
    mix_pre: Option<Tensor<T>>,
}

impl<T: Real> MnBlock<T> {
    pub fn new(spec: MnBlockSpec) -> Result<Self> {
        let e = spec.expanded();
        if e == 0 || spec.in_ch == 0 || spec.out_ch == 0 {
            return Err(Error::InvalidArgument(format!("degenerate block widths {spec:?}")));
        }
        let se = match spec.se_ratio {
            Some(r) => Some(SqueezeExcite::with_ratio(spec.out_ch, r)?),
            None => None,
        };
        Ok(MnBlock {
            expand: ConvBnAct::new(ConvWeights::new(spec.in_ch, e, 1, 1, 0, 1, false)?, Some(Activation::HSwish)),
            mix: MixConv::new(e, &spec.kernel_sizes, spec.stride)?,
            mix_bn: BatchNorm::new(e),
            project: ConvBnAct::new(ConvWeights::new(e, spec.out_ch, 1, 1, 0, 1, false)?, None),
            se,
            spec,
            mix_pre: None,
        })
    }

    pub fn he_init<R: Rng>(&mut self, rng: &mut R) {
        self.expand.conv.he_init(rng);
        self.mix.he_init(rng);
        self.project.conv.he_init(rng);
        if let Some(se) = &mut self.se {
            se.he_init(rng);
        }
    }

    pub fn cast<U: Real>(&self) -> MnBlock<U> {
        MnBlock {
            spec: self.spec.clone(),
            expand: self.expand.cast(),
            mix: self.mix.cast(),
            mix_bn: self.mix_bn.cast(),
            project: self.project.cast(),
            se: self.se.as_ref().map(SqueezeExcite::cast),
            mix_pre: None,
        }
    }

    /// The residual branch alone (no shortcut).
    pub fn inner_forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        if x.channels() != self.spec.in_ch {
            return Err(Error::shape("mnblock", x.shape(), [self.spec.in_ch]));
        }
        let y = self.expand.forward(x, mode)?;
        let y = self.mix.forward(&y, mode)?;
        let pre = self.mix_bn.forward(&y, mode)?;
        let y = activate(&pre, Activation::HSwish);
        self.mix_pre = Some(pre);
        let y = self.project.forward(&y, mode)?;
        match &mut self.se {
            Some(se) => se.forward(&y, mode),
            None => Ok(y),
        }
    }
}

impl<T: Real> Layer<T> for MnBlock<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut y = self.inner_forward(x, mode)?;
        if self.spec.has_residual() {
            y.add_assign(x)?;
        }
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let g = match &mut self.se {
            Some(se) => se.backward(grad)?,
            None => grad.clone(),
        };
        let g = self.project.backward(&g)?;
        let pre = self.mix_pre.as_ref().ok_or_else(|| missing_cache("mnblock"))?;
        let g = activate_backward(pre, &g, Activation::HSwish);
        let g = self.mix_bn.backward(&g)?;
        let g = self.mix.backward(&g)?;
        let mut g = self.expand.backward(&g)?;
        if self.spec.has_residual() {
            g.add_assign(grad)?;
        }
        Ok(g)
    }

    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        self.expand.params(&join(prefix, "expand"), out);
        self.mix.params(&join(prefix, "mix"), out);
        self.mix_bn.params(&join(prefix, "mix_bn"), out);
        self.project.params(&join(prefix, "project"), out);
        if let Some(se) = &self.se {
            se.params(&join(prefix, "se"), out);
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        self.expand.params_mut(&join(prefix, "expand"), out);
        self.mix.params_mut(&join(prefix, "mix"), out);
        Layer::params_mut(&mut self.mix_bn, &join(prefix, "mix_bn"), out);
        self.project.params_mut(&join(prefix, "project"), out);
        if let Some(se) = &mut self.se {
            se.params_mut(&join(prefix, "se"), out);
        }
    }

    fn clear_cache(&mut self) {
        self.expand.clear_cache();
        self.mix.clear_cache();
        self.mix_bn.clear_cache();
        self.project.clear_cache();
        if let Some(se) = &mut self.se {
            se.clear_cache();
        }
        self.mix_pre = None;
    }

    fn visit_norms(&mut self, f: &mut dyn FnMut(&mut BatchNorm<T>)) {
        self.expand.visit_norms(f);
        f(&mut self.mix_bn);
        self.project.visit_norms(f);
    }
}
