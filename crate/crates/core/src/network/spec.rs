use crate::error::{Error, Result};

/// Operator of one encoder row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowOp {
    /// Convolution + batch norm + h_swish.
    Conv2d,
    /// Modulated deformable convolution (no norm or activation after it).
    Dcn,
    MnBlock,
}

/// One encoder row: operator, output width, stride, kernel sizes, expansion and squeeze ratio.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub op: RowOp,
    pub out_ch: usize,
    pub stride: usize,
    pub kernel_sizes: Vec<usize>,
    pub expansion: Option<f64>,
    pub se_ratio: Option<f64>,
}

impl LayerSpec {
    pub fn conv(out_ch: usize, stride: usize, k: usize) -> Self {
        LayerSpec {
            op: RowOp::Conv2d,
            out_ch,
            stride,
            kernel_sizes: vec![k],
            expansion: None,
            se_ratio: None,
        }
    }

    pub fn dcn(out_ch: usize) -> Self {
        LayerSpec {
            op: RowOp::Dcn,
            out_ch,
            stride: 1,
            kernel_sizes: vec![3],
            expansion: None,
            se_ratio: None,
        }
    }

    pub fn mn(out_ch: usize, stride: usize, kernel_sizes: &[usize], t: f64, se: Option<f64>) -> Self {
        LayerSpec {
            op: RowOp::MnBlock,
            out_ch,
            stride,
            kernel_sizes: kernel_sizes.to_vec(),
            expansion: Some(t),
            se_ratio: se,
        }
    }
}

/// One decoder stage: ×2 bilinear upsample, optional skip concatenation, contracting bottleneck
/// (1×1 to `contract`, depthwise 3×3, 1×1 to `out`) and a 1×1 single-channel head.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderStageSpec {
    /// Encoder row whose output is concatenated after upsampling.
    pub skip_row: Option<usize>,
    pub contract: usize,
    pub out: usize,
}

/// The full graph: encoder rows, hybrid-block grouping and decoder stages.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderSpec {
    pub in_ch: usize,
    pub rows: Vec<LayerSpec>,
    /// First row of each hybrid convolution block; rows before the first form the stem.
    pub block_starts: Vec<usize>,
    pub decoder: Vec<DecoderStageSpec>,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self::hybridnetseg()
    }
}

impl EncoderSpec {
    /// The published encoder (stem plus three hybrid blocks) with the contracting decoder.
    pub fn hybridnetseg() -> Self {
        let rows = vec![
            LayerSpec::conv(16, 2, 3),
            // hybrid block 1
            LayerSpec::dcn(16),
            LayerSpec::mn(24, 2, &[3], 6.0, None),
            LayerSpec::mn(24, 1, &[3], 3.0, None),
            LayerSpec::mn(40, 1, &[3, 5, 7], 6.0, Some(0.5)),
            LayerSpec::mn(40, 1, &[3, 5], 6.0, Some(0.5)),
            // hybrid block 2
            LayerSpec::dcn(40),
            LayerSpec::mn(80, 2, &[3, 5, 7], 6.0, Some(0.25)),
            LayerSpec::mn(80, 1, &[3, 5], 6.0, Some(0.25)),
            LayerSpec::mn(80, 1, &[3, 5], 6.0, Some(0.25)),
            LayerSpec::mn(80, 1, &[3, 5], 6.0, Some(0.25)),
            // hybrid block 3
            LayerSpec::dcn(80),
            LayerSpec::mn(80, 2, &[3, 5, 7, 9], 6.0, Some(0.5)),
            LayerSpec::mn(120, 1, &[3, 5], 3.0, Some(0.5)),
            LayerSpec::mn(120, 1, &[3, 5], 3.0, Some(0.5)),
        ];
        EncoderSpec {
            in_ch: 3,
            rows,
            block_starts: vec![1, 6, 11],
            decoder: vec![
                DecoderStageSpec { skip_row: Some(10), contract: 40, out: 40 },
                DecoderStageSpec { skip_row: Some(5), contract: 24, out: 24 },
                DecoderStageSpec { skip_row: Some(0), contract: 16, out: 16 },
                DecoderStageSpec { skip_row: None, contract: 8, out: 8 },
            ],
        }
    }

    /// Every width divided by `divisor` (rounded up, at least the number of kernel groups).
    pub fn scaled(&self, divisor: usize) -> Self {
        let d = divisor.max(1);
        let shrink = |c: usize, min: usize| c.div_ceil(d).max(min).max(1);
        let mut out = self.clone();
        for row in &mut out.rows {
            row.out_ch = shrink(row.out_ch, row.kernel_sizes.len());
        }
        for stage in &mut out.decoder {
            stage.contract = shrink(stage.contract, 1);
            stage.out = shrink(stage.out, 1);
        }
        out
    }

    /// Product of all row strides.
    pub fn downsampling(&self) -> usize {
        self.rows.iter().map(|r| r.stride).product()
    }

    /// Input channel count of every row.
    pub fn row_inputs(&self) -> Vec<usize> {
        let mut c = self.in_ch;
        self.rows
            .iter()
            .map(|r| {
                let cin = c;
                c = r.out_ch;
                cin
            })
            .collect()
    }

    /// Cumulative stride after each row.
    pub fn row_strides(&self) -> Vec<usize> {
        let mut s = 1;
        self.rows
            .iter()
            .map(|r| {
                s *= r.stride;
                s
            })
            .collect()
    }

    /// Hierarchical name of row `i`: `stem.{j}` or `hcb{b}.{j}`.
    pub fn row_name(&self, i: usize) -> String {
        match self.block_starts.iter().rposition(|&s| s <= i) {
            Some(b) => format!("hcb{}.{}", b + 1, i - self.block_starts[b]),
            None => format!("stem.{i}"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |row: usize, reason: String| Err(Error::InvalidSpec { row, reason });
        if self.rows.is_empty() {
            return bad(0, "encoder has no rows".into());
        }
        for (i, r) in self.rows.iter().enumerate() {
            if r.out_ch == 0 {
                return bad(i, "zero output channels".into());
            }
            if r.stride != 1 && r.stride != 2 {
                return bad(i, format!("stride must be 1 or 2, got {}", r.stride));
            }
            if r.kernel_sizes.is_empty() || r.kernel_sizes.iter().any(|k| k % 2 == 0) {
                return bad(i, format!("kernel sizes must be odd and non-empty, got {:?}", r.kernel_sizes));
            }
            match r.op {
                RowOp::Conv2d | RowOp::Dcn if r.kernel_sizes.len() != 1 => {
                    return bad(i, "single-kernel operator given several kernel sizes".into());
                }
                RowOp::Dcn if r.stride != 1 => return bad(i, "deformable rows must have stride 1".into()),
                RowOp::MnBlock => {
                    match r.expansion {
                        Some(t) if t > 0.0 => {}
                        _ => return bad(i, "bottleneck rows need a positive expansion".into()),
                    }
                    if let Some(se) = r.se_ratio {
                        if !(se > 0.0 && se <= 1.0) {
                            return bad(i, format!("squeeze ratio {se} outside (0, 1]"));
                        }
                    }
                    if r.out_ch < r.kernel_sizes.len() {
                        return bad(i, "fewer channels than kernel groups".into());
                    }
                }
                _ => {}
            }
        }
        if self.block_starts.windows(2).any(|w| w[0] >= w[1]) || self.block_starts.iter().any(|&s| s >= self.rows.len()) {
            return bad(self.rows.len(), format!("invalid block starts {:?}", self.block_starts));
        }
        let stages = self.decoder.len();
        if (1usize << stages) != self.downsampling() {
            return bad(
                self.rows.len(),
                format!("{stages} decoder stages cannot undo a downsampling factor of {}", self.downsampling()),
            );
        }
        let strides = self.row_strides();
        let factor = self.downsampling();
        for (j, st) in self.decoder.iter().enumerate() {
            if st.contract == 0 || st.out == 0 {
                return bad(self.rows.len() + j, "zero decoder width".into());
            }
            if let Some(r) = st.skip_row {
                let want = factor >> (j + 1);
                if r >= self.rows.len() || strides[r] != want {
                    return bad(r, format!("skip tap for decoder stage {j} must sit at stride {want}"));
                }
            }
        }
        Ok(())
    }
}
