use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dcn::DcnLayer;
use crate::error::{Error, Result};
use crate::layer::{join, Conv, ConvBnAct, Layer, Mode, ParamMut, ParamRef};
use crate::mixconv::{MnBlock, MnBlockSpec};
use crate::real::Real;
use crate::tensor::{
    activation::sigmoid, bilinear_upsample, bilinear_upsample_backward, concat_channels, concat_channels_backward,
    Activation, BatchNorm, ConvWeights, Tensor,
};

use super::spec::{EncoderSpec, RowOp};

#[derive(Clone, Debug)]
pub enum EncoderLayer<T = f32> {
    Conv(ConvBnAct<T>),
    Dcn(DcnLayer<T>),
    MnBlock(MnBlock<T>),
}

impl<T: Real> EncoderLayer<T> {
    fn as_layer(&mut self) -> &mut dyn Layer<T> {
        match self {
            EncoderLayer::Conv(l) => l,
            EncoderLayer::Dcn(l) => l,
            EncoderLayer::MnBlock(l) => l,
        }
    }

    fn as_layer_ref(&self) -> &dyn Layer<T> {
        match self {
            EncoderLayer::Conv(l) => l,
            EncoderLayer::Dcn(l) => l,
            EncoderLayer::MnBlock(l) => l,
        }
    }

    fn cast<U: Real>(&self) -> EncoderLayer<U> {
        match self {
            EncoderLayer::Conv(l) => EncoderLayer::Conv(l.cast()),
            EncoderLayer::Dcn(l) => EncoderLayer::Dcn(l.cast()),
            EncoderLayer::MnBlock(l) => EncoderLayer::MnBlock(l.cast()),
        }
    }
}

/// Contracting inverted bottleneck used by every decoder stage.
#[derive(Clone, Debug)]
pub struct DecoderBlock<T = f32> {
    pub contract: ConvBnAct<T>,
    pub depthwise: ConvBnAct<T>,
    pub project: ConvBnAct<T>,
}

impl<T: Real> DecoderBlock<T> {
    fn new(in_ch: usize, mid: usize, out: usize) -> Result<Self> {
        Ok(DecoderBlock {
            contract: ConvBnAct::new(ConvWeights::new(in_ch, mid, 1, 1, 0, 1, false)?, Some(Activation::HSwish)),
            depthwise: ConvBnAct::new(ConvWeights::new(mid, mid, 3, 1, 1, mid, false)?, Some(Activation::HSwish)),
            project: ConvBnAct::new(ConvWeights::new(mid, out, 1, 1, 0, 1, false)?, None),
        })
    }

    fn cast<U: Real>(&self) -> DecoderBlock<U> {
        DecoderBlock {
            contract: self.contract.cast(),
            depthwise: self.depthwise.cast(),
            project: self.project.cast(),
        }
    }
}

impl<T: Real> Layer<T> for DecoderBlock<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = self.contract.forward(x, mode)?;
        let y = self.depthwise.forward(&y, mode)?;
        self.project.forward(&y, mode)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.project.backward(grad)?;
        let g = self.depthwise.backward(&g)?;
        self.contract.backward(&g)
    }

    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        self.contract.params(&join(prefix, "contract"), out);
        self.depthwise.params(&join(prefix, "depthwise"), out);
        self.project.params(&join(prefix, "project"), out);
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        self.contract.params_mut(&join(prefix, "contract"), out);
        self.depthwise.params_mut(&join(prefix, "depthwise"), out);
        self.project.params_mut(&join(prefix, "project"), out);
    }

    fn clear_cache(&mut self) {
        self.contract.clear_cache();
        self.depthwise.clear_cache();
        self.project.clear_cache();
    }

    fn visit_norms(&mut self, f: &mut dyn FnMut(&mut BatchNorm<T>)) {
        self.contract.visit_norms(f);
        self.depthwise.visit_norms(f);
        self.project.visit_norms(f);
    }
}

/// Outputs of [`Model::forward`].
#[derive(Clone, Debug)]
pub struct ModelOutput<T = f32> {
    /// One full-resolution logit map per decoder stage, shallow (coarse) first.
    pub stage_logits: Vec<Tensor<T>>,
    /// Sigmoid of the last stage.
    pub prob: Tensor<T>,
}

#[derive(Clone, Debug)]
struct ForwardState {
    input_hw: (usize, usize),
    /// Spatial size of each decoder stage input before upsampling.
    pre_upsample_hw: Vec<(usize, usize)>,
    /// Channel count of the upsampled part of each stage's concatenation.
    upsampled_ch: Vec<usize>,
    /// Spatial size of each head's logits.
    head_hw: Vec<(usize, usize)>,
}

/// The encoder–decoder network with per-stage heads.
#[derive(Clone, Debug)]
pub struct Model<T = f32> {
    pub spec: EncoderSpec,
    pub encoder: Vec<EncoderLayer<T>>,
    pub decoder: Vec<DecoderBlock<T>>,
    pub heads: Vec<Conv<T>>,
    state: Option<ForwardState>,
}

impl<T: Real> Model<T> {
    /// Builds the graph with zero weights; see [`build_model`] for initialization.
    pub fn new(spec: &EncoderSpec) -> Result<Self> {
        spec.validate()?;
        let inputs = spec.row_inputs();
        let mut encoder = Vec::with_capacity(spec.rows.len());
        for (i, row) in spec.rows.iter().enumerate() {
            let cin = inputs[i];
            let wrap = |e: Error| Error::InvalidSpec { row: i, reason: e.to_string() };
            let layer = match row.op {
                RowOp::Conv2d => {
                    let k = row.kernel_sizes[0];
                    EncoderLayer::Conv(ConvBnAct::new(
                        ConvWeights::new(cin, row.out_ch, k, row.stride, k / 2, 1, false).map_err(wrap)?,
                        Some(Activation::HSwish),
                    ))
                }
                RowOp::Dcn => EncoderLayer::Dcn(DcnLayer::new(cin, row.out_ch, row.kernel_sizes[0]).map_err(wrap)?),
                RowOp::MnBlock => EncoderLayer::MnBlock(
                    MnBlock::new(MnBlockSpec {
                        in_ch: cin,
                        out_ch: row.out_ch,
                        stride: row.stride,
                        expansion: row.expansion.unwrap_or(1.0),
                        kernel_sizes: row.kernel_sizes.clone(),
                        se_ratio: row.se_ratio,
                    })
                    .map_err(wrap)?,
                ),
            };
            encoder.push(layer);
        }
        let mut cin = spec.rows.last().map_or(spec.in_ch, |r| r.out_ch);
        let mut decoder = Vec::new();
        let mut heads = Vec::new();
        for st in &spec.decoder {
            let skip = st.skip_row.map_or(0, |r| spec.rows[r].out_ch);
            decoder.push(DecoderBlock::new(cin + skip, st.contract, st.out)?);
            heads.push(Conv::new(ConvWeights::new(st.out, 1, 1, 1, 0, 1, true)?));
            cin = st.out;
        }
        Ok(Model {
            spec: spec.clone(),
            encoder,
            decoder,
            heads,
            state: None,
        })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            encoder: self.encoder.iter().map(EncoderLayer::cast).collect(),
            decoder: self.decoder.iter().map(DecoderBlock::cast).collect(),
            heads: self.heads.iter().map(Conv::cast).collect(),
            state: None,
        }
        .with_values_from(self)
    }

    /// Copies every named tensor value (including running statistics) from `other`.
    fn with_values_from<S: Real>(mut self, other: &Model<S>) -> Self {
        let mut src = Vec::new();
        other.params("", &mut src);
        let mut dst = Vec::new();
        self.params_mut("", &mut dst);
        for (d, s) in dst.into_iter().zip(src) {
            d.value.iter_mut().zip(s.value).for_each(|(a, b)| *a = T::of(b.f64()));
        }
        self
    }

    pub fn stage_count(&self) -> usize {
        self.decoder.len()
    }

    pub fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let m = self.spec.downsampling();
        if x.channels() != self.spec.in_ch {
            return Err(Error::shape("model input", x.shape(), [self.spec.in_ch]));
        }
        if x.height() % m != 0 || x.width() % m != 0 || x.height() == 0 || x.width() == 0 {
            return Err(Error::Indivisible {
                height: x.height(),
                width: x.width(),
                multiple: m,
            });
        }
        Ok(())
    }

    /// Encoder features: the deepest map plus the skip taps, in row order.
    pub fn encode(&mut self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Vec<(usize, Tensor<T>)>)> {
        self.check_input(x)?;
        let taps: Vec<usize> = self.spec.decoder.iter().filter_map(|s| s.skip_row).collect();
        let mut h = x.clone();
        let mut saved = Vec::new();
        for (i, layer) in self.encoder.iter_mut().enumerate() {
            h = layer.as_layer().forward(&h, mode)?;
            if taps.contains(&i) {
                saved.push((i, h.clone()));
            }
        }
        Ok((h, saved))
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<ModelOutput<T>> {
        let (mut h, taps) = self.encode(x, mode)?;
        let (height, width) = (x.height(), x.width());
        let mut state = ForwardState {
            input_hw: (height, width),
            pre_upsample_hw: Vec::new(),
            upsampled_ch: Vec::new(),
            head_hw: Vec::new(),
        };
        let mut stage_logits = Vec::with_capacity(self.decoder.len());
        for (j, (block, head)) in self.decoder.iter_mut().zip(&mut self.heads).enumerate() {
            state.pre_upsample_hw.push((h.height(), h.width()));
            let up = bilinear_upsample(&h, h.height() * 2, h.width() * 2)?;
            state.upsampled_ch.push(up.channels());
            let input = match self.spec.decoder[j].skip_row {
                Some(r) => {
                    let tap = &taps.iter().find(|(i, _)| *i == r).expect("tap recorded").1;
                    concat_channels(&up, tap)?
                }
                None => up,
            };
            h = block.forward(&input, mode)?;
            let logits = head.forward(&h, mode)?;
            state.head_hw.push((logits.height(), logits.width()));
            stage_logits.push(bilinear_upsample(&logits, height, width)?);
        }
        let prob = stage_logits
            .last()
            .ok_or_else(|| Error::InvalidArgument("model has no decoder stages".into()))?
            .map(sigmoid);
        self.state = Some(state);
        Ok(ModelOutput { stage_logits, prob })
    }

    /// Back-propagates gradients w.r.t. every stage's full-resolution logits (`None` for a stage
    /// that receives no supervision). Returns the gradient w.r.t. the network input.
    pub fn backward(&mut self, stage_grads: &[Option<Tensor<T>>]) -> Result<Tensor<T>> {
        let state = self
            .state
            .clone()
            .ok_or_else(|| Error::InvalidArgument("model backward without forward".into()))?;
        if stage_grads.len() != self.decoder.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} stage gradients, got {}",
                self.decoder.len(),
                stage_grads.len()
            )));
        }
        let mut tap_grads: Vec<(usize, Tensor<T>)> = Vec::new();
        let mut carry: Option<Tensor<T>> = None;
        for j in (0..self.decoder.len()).rev() {
            let mut g_out: Option<Tensor<T>> = carry.take();
            if let Some(g) = &stage_grads[j] {
                let (hh, hw) = state.head_hw[j];
                let g_head = bilinear_upsample_backward(g, hh, hw)?;
                let g_block = self.heads[j].backward(&g_head)?;
                match &mut g_out {
                    Some(acc) => acc.add_assign(&g_block)?,
                    None => g_out = Some(g_block),
                }
            }
            let Some(g_out) = g_out else { continue };
            let g_in = self.decoder[j].backward(&g_out)?;
            let g_up = match self.spec.decoder[j].skip_row {
                Some(r) => {
                    let (gu, gs) = concat_channels_backward(&g_in, state.upsampled_ch[j])?;
                    tap_grads.push((r, gs));
                    gu
                }
                None => g_in,
            };
            let (ph, pw) = state.pre_upsample_hw[j];
            carry = Some(bilinear_upsample_backward(&g_up, ph, pw)?);
        }

        let mut g = carry;
        for i in (0..self.encoder.len()).rev() {
            for (_, tg) in tap_grads.iter().filter(|(r, _)| *r == i) {
                match &mut g {
                    Some(acc) => acc.add_assign(tg)?,
                    None => g = Some(tg.clone()),
                }
            }
            if let Some(gi) = g.take() {
                g = Some(self.encoder[i].as_layer().backward(&gi)?);
            }
        }
        let (h, w) = state.input_hw;
        let n = stage_grads.iter().flatten().next().map_or(1, Tensor::batch);
        Ok(g.unwrap_or_else(|| Tensor::zeros([n, self.spec.in_ch, h, w])))
    }

    pub fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        for (i, l) in self.encoder.iter().enumerate() {
            l.as_layer_ref().params(&join(prefix, &self.spec.row_name(i)), out);
        }
        for (j, d) in self.decoder.iter().enumerate() {
            d.params(&join(prefix, &format!("decoder.{j}")), out);
        }
        for (j, h) in self.heads.iter().enumerate() {
            h.params(&join(prefix, &format!("head.{j}")), out);
        }
    }

    pub fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        let names: Vec<String> = (0..self.encoder.len()).map(|i| self.spec.row_name(i)).collect();
        for (l, name) in self.encoder.iter_mut().zip(&names) {
            l.as_layer().params_mut(&join(prefix, name), out);
        }
        for (j, d) in self.decoder.iter_mut().enumerate() {
            d.params_mut(&join(prefix, &format!("decoder.{j}")), out);
        }
        for (j, h) in self.heads.iter_mut().enumerate() {
            h.params_mut(&join(prefix, &format!("head.{j}")), out);
        }
    }

    pub fn zero_grad(&mut self) {
        let mut ps = Vec::new();
        self.params_mut("", &mut ps);
        for p in ps {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Train mode keeps normalizing with batch statistics but stops updating running statistics.
    pub fn set_freeze_stats(&mut self, frozen: bool) {
        let f = &mut |bn: &mut BatchNorm<T>| bn.freeze_stats = frozen;
        for l in &mut self.encoder {
            l.as_layer().visit_norms(f);
        }
        self.decoder.iter_mut().for_each(|d| d.visit_norms(f));
    }

    /// Drops every cached activation.
    pub fn clear_cache(&mut self) {
        for l in &mut self.encoder {
            l.as_layer().clear_cache();
        }
        self.decoder.iter_mut().for_each(Layer::clear_cache);
        self.heads.iter_mut().for_each(Layer::clear_cache);
        self.state = None;
    }

    /// Scalar parameter count (weights, biases, norm affine; running statistics excluded).
    pub fn param_count(&self) -> usize {
        let mut ps = Vec::new();
        self.params("", &mut ps);
        ps.iter().filter(|p| p.kind.is_trainable()).map(|p| p.value.len()).sum()
    }

    /// Parameter count of the encoder rows only.
    pub fn encoder_param_count(&self) -> usize {
        self.encoder.iter().map(|l| l.as_layer_ref().param_count()).sum()
    }
}

/// Builds the network with He-normal convolution weights drawn from `seed`, zero biases, unit
/// norm scales and zeroed deformable branches.
pub fn build_model(spec: &EncoderSpec, seed: u64) -> Result<Model<f32>> {
    let mut model = Model::new(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for layer in &mut model.encoder {
        match layer {
            EncoderLayer::Conv(l) => l.conv.he_init(&mut rng),
            EncoderLayer::Dcn(l) => l.he_init(&mut rng),
            EncoderLayer::MnBlock(l) => l.he_init(&mut rng),
        }
    }
    for d in &mut model.decoder {
        d.contract.conv.he_init(&mut rng);
        d.depthwise.conv.he_init(&mut rng);
        d.project.conv.he_init(&mut rng);
    }
    for h in &mut model.heads {
        h.he_init(&mut rng);
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{count_macs, count_params};

    #[test]
    fn budget_figures() {
        let m = build_model(&EncoderSpec::hybridnetseg(), 0).unwrap();
        assert_eq!(m.encoder_param_count(), 751_705);
        let p = count_params(&m);
        let macs = count_macs(&m, [3, 512, 512]).unwrap();
        println!("params {p} macs {macs:?} total {}", macs.total());
        assert!((p as f64 - 0.71e6).abs() <= 0.15 * 0.71e6);
        assert!((macs.total() as f64 - 3.52e9).abs() <= 0.15 * 3.52e9);
    }

    #[test]
    fn forward_shapes_and_range() {
        let spec = EncoderSpec::hybridnetseg().scaled(8);
        let mut m = build_model(&spec, 3).unwrap();
        let x = Tensor::from_fn([2, 3, 32, 48], |n, c, y, x| ((n + c * 7 + y * 3 + x) % 11) as f32 / 11.0);
        let out = m.forward(&x, Mode::Train).unwrap();
        assert_eq!(out.stage_logits.len(), 4);
        for s in &out.stage_logits {
            assert_eq!(s.shape(), [2, 1, 32, 48]);
        }
        assert!(out.prob.data().iter().all(|p| (0.0..=1.0).contains(p)));
        let grads: Vec<_> = out.stage_logits.iter().map(|s| Some(Tensor::full(s.shape(), 0.1))).collect();
        let gx = m.backward(&grads).unwrap();
        assert_eq!(gx.shape(), x.shape());
        assert!(gx.is_finite());
    }

    #[test]
    fn rejects_indivisible_input() {
        let mut m = build_model(&EncoderSpec::hybridnetseg().scaled(8), 0).unwrap();
        let err = m.forward(&Tensor::zeros([1, 3, 40, 40]), Mode::Infer).unwrap_err();
        assert!(matches!(err, Error::Indivisible { multiple: 16, .. }));
    }

    #[test]
    fn deterministic_replay() {
        let mut m = build_model(&EncoderSpec::hybridnetseg().scaled(8), 5).unwrap();
        let x = Tensor::from_fn([1, 3, 32, 32], |_, c, y, x| ((c + y * x) % 5) as f32 * 0.2);
        let a = m.forward(&x, Mode::Infer).unwrap();
        let b = m.forward(&x, Mode::Infer).unwrap();
        assert_eq!(a.prob.data(), b.prob.data());
    }

    #[test]
    fn cast_preserves_values() {
        let m = build_model(&EncoderSpec::hybridnetseg().scaled(8), 1).unwrap();
        let d: Model<f64> = m.cast();
        let back: Model<f32> = d.cast();
        let (mut a, mut b) = (Vec::new(), Vec::new());
        m.params("", &mut a);
        back.params("", &mut b);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.value, y.value);
        }
    }
}
