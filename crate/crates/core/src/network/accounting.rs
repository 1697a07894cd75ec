use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::ConvWeights;

use super::model::{EncoderLayer, Model};

/// Multiply-accumulate totals split by kind.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MacReport {
    /// Every convolution, including deformable main and branch convolutions.
    pub conv: u64,
    /// Bilinear sampling inside deformable layers (4 per sample per tap per input channel).
    pub sampling: u64,
    /// Squeeze-excitation fully connected layers.
    pub se: u64,
}

impl MacReport {
    pub fn total(&self) -> u64 {
        self.conv + self.sampling + self.se
    }

    fn add(&mut self, other: MacReport) {
        self.conv += other.conv;
        self.sampling += other.sampling;
        self.se += other.se;
    }
}

/// Trainable scalar parameters (weights, biases, norm affine; running statistics excluded).
pub fn count_params<T: Real>(model: &Model<T>) -> usize {
    model.param_count()
}

/// MACs of one convolution on an `h×w` input, with the output size.
pub fn conv_macs<T: Real>(w: &ConvWeights<T>, h: usize, wd: usize) -> Result<(u64, usize, usize)> {
    let (oh, ow) = w
        .output_hw(h, wd)
        .ok_or_else(|| Error::InvalidArgument(format!("convolution does not fit a {h}×{wd} input")))?;
    let k = w.kernel_size() as u64;
    let per = (w.out_channels() * (w.in_channels() / w.groups)) as u64 * k * k;
    Ok(((oh * ow) as u64 * per, oh, ow))
}

/// MACs of one forward pass for a single `(channels, height, width)` input.
pub fn count_macs<T: Real>(model: &Model<T>, input: [usize; 3]) -> Result<MacReport> {
    let [c, h, w] = input;
    let m = model.spec.downsampling();
    if c != model.spec.in_ch {
        return Err(Error::shape("count_macs", [c, h, w], [model.spec.in_ch]));
    }
    if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
        return Err(Error::Indivisible {
            height: h,
            width: w,
            multiple: m,
        });
    }
    let mut report = MacReport::default();
    let (mut h, mut w) = (h, w);
    for layer in &model.encoder {
        let mut r = MacReport::default();
        match layer {
            EncoderLayer::Conv(l) => {
                let (macs, oh, ow) = conv_macs(&l.conv.weights, h, w)?;
                r.conv = macs;
                (h, w) = (oh, ow);
            }
            EncoderLayer::Dcn(l) => {
                let (main, _, _) = conv_macs(&l.main.weights, h, w)?;
                let (branch, _, _) = conv_macs(&l.branch.weights, h, w)?;
                r.conv = main + branch;
                r.sampling = 4 * (h * w * l.taps() * l.in_channels()) as u64;
            }
            EncoderLayer::MnBlock(l) => {
                let (e, _, _) = conv_macs(&l.expand.conv.weights, h, w)?;
                let mut mix = 0;
                let (mut oh, mut ow) = (h, w);
                for g in &l.mix.groups {
                    let (macs, gh, gw) = conv_macs(&g.weights, h, w)?;
                    mix += macs;
                    (oh, ow) = (gh, gw);
                }
                let (p, _, _) = conv_macs(&l.project.conv.weights, oh, ow)?;
                r.conv = e + mix + p;
                if let Some(se) = &l.se {
                    r.se = 2 * (se.channels() * se.squeeze()) as u64;
                }
                (h, w) = (oh, ow);
            }
        }
        report.add(r);
    }
    for (block, head) in model.decoder.iter().zip(&model.heads) {
        h *= 2;
        w *= 2;
        for conv in [&block.contract.conv, &block.depthwise.conv, &block.project.conv] {
            report.conv += conv_macs(&conv.weights, h, w)?.0;
        }
        report.conv += conv_macs(&head.weights, h, w)?.0;
    }
    Ok(report)
}
