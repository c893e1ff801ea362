//! Network architecture description, validation and receptive-field
//! analysis.
//!
//! A network is an ordered layer list. Layers may capture their output under
//! a skip label; a concat layer later fuses captured maps by channel
//! concatenation, resampling each source to the current resolution (max-pool
//! to go down, fixed bilinear upsampling to go up).

use crate::error::{Error, Result};
use crate::ops::conv::ConvSpec;
use crate::ops::deconv::deconv_kernel_side;

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Conv(ConvSpec),
    BatchNorm,
    Relu,
    MaxPool { window: usize, stride: usize },
    /// A run of residual blocks. The first block carries the stride and any
    /// channel change (with a projection shortcut); the rest are identity
    /// blocks at the stage's dilation.
    ResidualStage {
        out_channels: usize,
        blocks: usize,
        stride: usize,
        dilation: usize,
    },
    /// Replaces the current map with the channel concatenation of the named
    /// captures, each resampled to the current resolution.
    ConcatSkip { sources: Vec<String> },
    /// Learnable transposed convolution, `factor`x upsampling, channels
    /// preserved, bilinear-initialized.
    Deconv { factor: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerConfig {
    pub kind: LayerKind,
    /// Skip label recorded after this layer runs.
    pub capture: Option<String>,
}

impl LayerConfig {
    pub fn plain(kind: LayerKind) -> Self {
        LayerConfig { kind, capture: None }
    }

    pub fn captured(kind: LayerKind, label: &str) -> Self {
        LayerConfig { kind, capture: Some(label.to_string()) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub input_channels: usize,
    pub layers: Vec<LayerConfig>,
    /// Bin count m; the layer list must end with m channels.
    pub bins: usize,
    /// Width/depth scale factor, recorded for provenance.
    pub sigma: f64,
}

/// Composition facts derived by validation.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositionInfo {
    pub out_channels: usize,
    /// Cumulative stride from input to the pre-deconv feature map.
    pub feature_stride: usize,
    /// Upsampling applied after the feature map (1 when no deconv).
    pub upsample: usize,
}

impl NetworkConfig {
    /// The default desk-scale profile: 7x7/2 stem, 2x2/2 pool, four residual
    /// stages with widths {16,32,64,64}*(sigma*16) repeated 2*(sigma*16)
    /// times, stage dilations {1,1,2,4}, six skip captures fused before a
    /// 1x1 scoring convolution and a stride-4 learnable deconv.
    ///
    /// `dilation = false` restores stride 2 in the two dilated stages (all
    /// dilations 1); `skips = false` drops the captures and the concat.
    pub fn toy(sigma: f64, bins: usize, dilation: bool, skips: bool) -> Result<Self> {
        if !(sigma > 0.0 && sigma <= 1.0) {
            return Err(Error::Config(format!("sigma must be in (0, 1], got {sigma}")));
        }
        let scale = sigma * 16.0;
        let width = |base: usize| ((base as f64 * scale).round() as usize).max(1);
        let widths = [width(16), width(32), width(64), width(64)];
        let repeats = ((2.0 * scale).round() as usize).max(1);

        let stage = |out: usize, dil_on: usize| -> LayerKind {
            if dilation || dil_on == 1 {
                LayerKind::ResidualStage { out_channels: out, blocks: repeats, stride: 1, dilation: if dilation { dil_on } else { 1 } }
            } else {
                // ablation: dilation off, stride-2 stage restored
                LayerKind::ResidualStage { out_channels: out, blocks: repeats, stride: 2, dilation: 1 }
            }
        };

        let cap = |kind: LayerKind, label: &str| -> LayerConfig {
            if skips {
                LayerConfig::captured(kind, label)
            } else {
                LayerConfig::plain(kind)
            }
        };

        let mut layers = vec![
            LayerConfig::plain(LayerKind::Conv(ConvSpec::new(3, 1, 2, 3, 3, widths[0])?)),
            LayerConfig::plain(LayerKind::BatchNorm),
            cap(LayerKind::Relu, "L1"),
            cap(LayerKind::MaxPool { window: 2, stride: 2 }, "L2"),
            cap(stage(widths[0], 1), "L3"),
            cap(stage(widths[1], 1), "L4"),
            cap(stage(widths[2], 2), "L5"),
            cap(stage(widths[3], 4), "L6"),
        ];
        if skips {
            layers.push(LayerConfig::plain(LayerKind::ConcatSkip {
                sources: (1..=6).map(|i| format!("L{i}")).collect(),
            }));
        }
        let concat_channels = if skips {
            widths[0] * 3 + widths[1] + widths[2] + widths[3]
        } else {
            widths[3]
        };
        layers.push(LayerConfig::plain(LayerKind::Conv(ConvSpec::new(0, 1, 1, 0, concat_channels, bins)?)));
        layers.push(LayerConfig::plain(LayerKind::Deconv { factor: 4 }));

        let config = NetworkConfig { input_channels: 3, layers, bins, sigma };
        config.validate()?;
        Ok(config)
    }

    /// Checks channel composition and skip-label wiring. Every declared
    /// capture must be consumed by exactly one concat layer.
    pub fn validate(&self) -> Result<CompositionInfo> {
        if self.input_channels == 0 {
            return Err(Error::Config("input channel count must be >= 1".into()));
        }
        let mut channels = self.input_channels;
        let mut stride = 1usize;
        let mut upsample = 1usize;
        // label -> (channels, cumulative stride at capture)
        let mut captures: std::collections::HashMap<String, (usize, usize)> = std::collections::HashMap::new();
        let mut consumed: std::collections::HashSet<String> = std::collections::HashSet::new();

        for (i, layer) in self.layers.iter().enumerate() {
            let name = format!("layer {i} ({:?})", kind_name(&layer.kind));
            match &layer.kind {
                LayerKind::Conv(spec) => {
                    if spec.in_channels != channels {
                        return Err(Error::Config(format!(
                            "{name}: expects {} input channels, gets {channels}",
                            spec.in_channels
                        )));
                    }
                    channels = spec.out_channels;
                    stride *= spec.stride;
                }
                LayerKind::BatchNorm | LayerKind::Relu => {}
                LayerKind::MaxPool { window, stride: s } => {
                    if *window < 1 || *s < 1 {
                        return Err(Error::Config(format!("{name}: window and stride must be >= 1")));
                    }
                    stride *= s;
                }
                LayerKind::ResidualStage { out_channels, blocks, stride: s, dilation } => {
                    if *blocks < 1 || *out_channels < 1 || *s < 1 || *dilation < 1 {
                        return Err(Error::Config(format!("{name}: stage parameters must be >= 1")));
                    }
                    channels = *out_channels;
                    stride *= s;
                }
                LayerKind::ConcatSkip { sources } => {
                    if sources.is_empty() {
                        return Err(Error::Config(format!("{name}: concat needs at least one source")));
                    }
                    let mut total = 0usize;
                    for label in sources {
                        let (c, cap_stride) = *captures.get(label).ok_or_else(|| {
                            Error::Config(format!("{name}: references undeclared skip label {label}"))
                        })?;
                        if !consumed.insert(label.clone()) {
                            return Err(Error::Config(format!(
                                "{name}: skip label {label} consumed more than once"
                            )));
                        }
                        // source must be resampleable to the current stride
                        if stride >= cap_stride {
                            if stride % cap_stride != 0 {
                                return Err(Error::Config(format!(
                                    "{name}: stride {stride} not divisible by capture stride {cap_stride} of {label}"
                                )));
                            }
                        } else if cap_stride % stride != 0 {
                            return Err(Error::Config(format!(
                                "{name}: capture stride {cap_stride} of {label} not divisible by stride {stride}"
                            )));
                        }
                        total += c;
                    }
                    channels = total;
                }
                LayerKind::Deconv { factor } => {
                    if *factor < 2 {
                        return Err(Error::Config(format!("{name}: deconv factor must be >= 2")));
                    }
                    upsample *= factor;
                }
            }
            if let Some(label) = &layer.capture {
                if upsample != 1 {
                    return Err(Error::Config(format!("{name}: captures after a deconv are unsupported")));
                }
                if captures.insert(label.clone(), (channels, stride)).is_some() {
                    return Err(Error::Config(format!("{name}: duplicate skip label {label}")));
                }
            }
        }

        for label in captures.keys() {
            if !consumed.contains(label) {
                return Err(Error::Config(format!("skip label {label} is captured but never concatenated")));
            }
        }
        if channels != self.bins {
            return Err(Error::Config(format!(
                "network emits {channels} channels, bin count is {}",
                self.bins
            )));
        }
        Ok(CompositionInfo { out_channels: channels, feature_stride: stride, upsample })
    }

    /// Canonical text form, digested into checkpoints.
    pub fn digest_text(&self) -> String {
        let mut s = format!("input_channels={}\nbins={}\nsigma={}\n", self.input_channels, self.bins, self.sigma);
        for (i, layer) in self.layers.iter().enumerate() {
            s.push_str(&format!("layer{i}={:?} capture={:?}\n", layer.kind, layer.capture));
        }
        s
    }
}

fn kind_name(kind: &LayerKind) -> &'static str {
    match kind {
        LayerKind::Conv(_) => "conv",
        LayerKind::BatchNorm => "batchnorm",
        LayerKind::Relu => "relu",
        LayerKind::MaxPool { .. } => "maxpool",
        LayerKind::ResidualStage { .. } => "residual_stage",
        LayerKind::ConcatSkip { .. } => "concat_skip",
        LayerKind::Deconv { .. } => "deconv",
    }
}

/// One row of the receptive-field table.
#[derive(Debug, Clone, PartialEq)]
pub struct RfEntry {
    pub name: String,
    /// Receptive field side in input pixels.
    pub rf: usize,
    /// Cumulative stride (input pixels per feature pixel).
    pub stride: usize,
    pub dilation: usize,
    pub params: usize,
}

/// Accumulates `rf += (kernel - 1) * dilation * jump` layer by layer, where
/// `jump` is the product of the preceding strides; a concat takes the
/// maximum over its sources after resampling.
pub fn receptive_field(config: &NetworkConfig) -> Result<Vec<RfEntry>> {
    config.validate()?;
    let mut entries = Vec::new();
    let mut rf = 1usize;
    let mut jump = 1usize;
    let mut channels = config.input_channels;
    let mut captures: std::collections::HashMap<String, (usize, usize, usize)> = std::collections::HashMap::new();

    for (i, layer) in config.layers.iter().enumerate() {
        match &layer.kind {
            LayerKind::Conv(spec) => {
                rf += (spec.kernel_side() - 1) * spec.dilation * jump;
                jump *= spec.stride;
                channels = spec.out_channels;
                entries.push(RfEntry {
                    name: format!("conv{i}"),
                    rf,
                    stride: jump,
                    dilation: spec.dilation,
                    params: spec.param_count(),
                });
            }
            LayerKind::BatchNorm => {
                entries.push(RfEntry { name: format!("batchnorm{i}"), rf, stride: jump, dilation: 1, params: 2 * channels });
            }
            LayerKind::Relu => {}
            LayerKind::MaxPool { window, stride } => {
                rf += (window - 1) * jump;
                jump *= stride;
                entries.push(RfEntry { name: format!("maxpool{i}"), rf, stride: jump, dilation: 1, params: 0 });
            }
            LayerKind::ResidualStage { out_channels, blocks, stride, dilation } => {
                let mut params = 0usize;
                for b in 0..*blocks {
                    let (s, cin) = if b == 0 { (*stride, channels) } else { (1, *out_channels) };
                    let conv1 = ConvSpec::new(1, *dilation, s, *dilation, cin, *out_channels)?;
                    let conv2 = ConvSpec::new(1, *dilation, 1, *dilation, *out_channels, *out_channels)?;
                    rf += 2 * *dilation * jump; // conv1
                    jump *= s;
                    rf += 2 * *dilation * jump; // conv2
                    params += conv1.param_count() + conv2.param_count() + 4 * *out_channels;
                    // projection conv only on channel change; a pure stride
                    // change uses a parameter-free subsampling shortcut
                    if cin != *out_channels {
                        let proj = ConvSpec::new(0, 1, s, 0, cin, *out_channels)?;
                        params += proj.param_count() + 2 * *out_channels;
                    }
                }
                channels = *out_channels;
                entries.push(RfEntry {
                    name: format!("stage{i}"),
                    rf,
                    stride: jump,
                    dilation: *dilation,
                    params,
                });
            }
            LayerKind::ConcatSkip { sources } => {
                let mut best = rf;
                let mut total = 0usize;
                for label in sources {
                    let (src_rf, src_jump, src_channels) = captures[label];
                    let resampled = if jump >= src_jump {
                        let ratio = jump / src_jump;
                        if ratio > 1 {
                            src_rf + (ratio - 1) * src_jump
                        } else {
                            src_rf
                        }
                    } else {
                        let factor = src_jump / jump;
                        let side = deconv_kernel_side(factor);
                        src_rf + (side.div_ceil(factor) - 1) * src_jump
                    };
                    best = best.max(resampled);
                    total += src_channels;
                }
                rf = best;
                channels = total;
                entries.push(RfEntry { name: format!("concat{i}"), rf, stride: jump, dilation: 1, params: 0 });
            }
            LayerKind::Deconv { factor } => {
                let side = deconv_kernel_side(*factor);
                rf += (side.div_ceil(*factor) - 1) * jump;
                entries.push(RfEntry {
                    name: format!("deconv{i}"),
                    rf,
                    stride: jump, // stride relative to the input stays the feature stride over factor
                    dilation: 1,
                    params: channels * channels * side * side + channels,
                });
            }
        }
        if let Some(label) = &layer.capture {
            captures.insert(label.clone(), (rf, jump, channels));
        }
    }
    Ok(entries)
}
