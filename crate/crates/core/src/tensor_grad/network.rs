use std::fmt;
use std::ops::Range;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;

use crate::error::{BnnError, Result};

/// One layer of a feed-forward classifier.
///
/// Convolutions have stride 1 and zero padding on every side; pooling windows are
/// non-overlapping and drop any ragged edge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Layer {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        padding: usize,
    },
    MaxPool2d {
        window: usize,
    },
    Relu,
    Flatten,
    Linear {
        in_features: usize,
        out_features: usize,
    },
    Dropout {
        rate: f64,
    },
}

impl Layer {
    pub fn param_count(&self) -> usize {
        match *self {
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => out_channels * (in_channels * kernel * kernel + 1),
            Layer::Linear {
                in_features,
                out_features,
            } => out_features * (in_features + 1),
            _ => 0,
        }
    }
}

/// Activation shape flowing between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActShape {
    Image { channels: usize, height: usize, width: usize },
    Flat(usize),
}

impl ActShape {
    pub fn len(&self) -> usize {
        match *self {
            ActShape::Image {
                channels,
                height,
                width,
            } => channels * height * width,
            ActShape::Flat(n) => n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Layered single-channel image classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub input_shape: (usize, usize),
    pub layers: Vec<Layer>,
}

impl NetworkSpec {
    pub fn new(input_shape: (usize, usize), layers: Vec<Layer>) -> Result<Self> {
        let spec = Self {
            input_shape,
            layers,
        };
        spec.shapes()?;
        Ok(spec)
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.0 * self.input_shape.1
    }

    /// Output shape of every layer, checking that adjacent layers compose.
    pub fn shapes(&self) -> Result<Vec<ActShape>> {
        let (h, w) = self.input_shape;
        if h == 0 || w == 0 {
            return Err(BnnError::Shape {
                layer: 0,
                message: "input shape must be positive".into(),
            });
        }
        let mut current = ActShape::Image {
            channels: 1,
            height: h,
            width: w,
        };
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let err = |message: String| BnnError::Shape { layer: i, message };
            current = match (*layer, current) {
                (
                    Layer::Conv2d {
                        in_channels,
                        out_channels,
                        kernel,
                        padding,
                    },
                    ActShape::Image {
                        channels,
                        height,
                        width,
                    },
                ) => {
                    if in_channels != channels {
                        return Err(err(format!(
                            "conv expects {in_channels} input channels, got {channels}"
                        )));
                    }
                    if kernel == 0 || out_channels == 0 {
                        return Err(err("conv kernel and channels must be positive".into()));
                    }
                    let (ph, pw) = (height + 2 * padding, width + 2 * padding);
                    if ph < kernel || pw < kernel {
                        return Err(err(format!(
                            "kernel {kernel} larger than padded input {ph}x{pw}"
                        )));
                    }
                    ActShape::Image {
                        channels: out_channels,
                        height: ph - kernel + 1,
                        width: pw - kernel + 1,
                    }
                }
                (
                    Layer::MaxPool2d { window },
                    ActShape::Image {
                        channels,
                        height,
                        width,
                    },
                ) => {
                    if window == 0 || height < window || width < window {
                        return Err(err(format!(
                            "pool window {window} does not fit {height}x{width}"
                        )));
                    }
                    ActShape::Image {
                        channels,
                        height: height / window,
                        width: width / window,
                    }
                }
                (Layer::Relu, s) => s,
                (Layer::Dropout { rate }, s) => {
                    if !(0.0..1.0).contains(&rate) {
                        return Err(err(format!("dropout rate {rate} outside [0, 1)")));
                    }
                    s
                }
                (Layer::Flatten, s) => ActShape::Flat(s.len()),
                (
                    Layer::Linear {
                        in_features,
                        out_features,
                    },
                    ActShape::Flat(n),
                ) => {
                    if in_features != n {
                        return Err(err(format!(
                            "linear expects {in_features} inputs, got {n}"
                        )));
                    }
                    if out_features == 0 {
                        return Err(err("linear needs at least one output".into()));
                    }
                    ActShape::Flat(out_features)
                }
                (layer, shape) => {
                    return Err(err(format!("{layer:?} cannot consume activation {shape:?}")))
                }
            };
            out.push(current);
        }
        match self.layers.last() {
            Some(Layer::Linear { .. }) => Ok(out),
            _ => Err(BnnError::Shape {
                layer: self.layers.len().saturating_sub(1),
                message: "network must end in a linear layer".into(),
            }),
        }
    }

    pub fn param_count(&self) -> Result<usize> {
        self.shapes()?;
        Ok(self.layers.iter().map(Layer::param_count).sum())
    }

    pub fn num_classes(&self) -> usize {
        match self.layers.last() {
            Some(Layer::Linear { out_features, .. }) => *out_features,
            _ => 0,
        }
    }

    pub fn has_dropout(&self) -> bool {
        self.layers
            .iter()
            .any(|l| matches!(l, Layer::Dropout { rate } if *rate > 0.0))
    }

    /// Same network with every dropout layer set to `rate`.
    pub fn with_dropout_rate(&self, rate: f64) -> Result<Self> {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Dropout { .. } => Layer::Dropout { rate },
                other => *other,
            })
            .collect();
        Self::new(self.input_shape, layers)
    }

    pub fn layout(&self) -> Result<Arc<ParamLayout>> {
        self.shapes()?;
        let mut offset = 0;
        let mut slots = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let (weight_shape, fan_in, bias_len) = match *layer {
                Layer::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => (
                    vec![out_channels, in_channels, kernel, kernel],
                    in_channels * kernel * kernel,
                    out_channels,
                ),
                Layer::Linear {
                    in_features,
                    out_features,
                } => (vec![out_features, in_features], in_features, out_features),
                _ => continue,
            };
            let weight_len: usize = weight_shape.iter().product();
            slots.push(ParamSlot {
                layer: i,
                weight_offset: offset,
                weight_shape,
                bias_offset: offset + weight_len,
                bias_len,
                fan_in,
            });
            offset += weight_len + bias_len;
        }
        Ok(Arc::new(ParamLayout {
            slots,
            total: offset,
        }))
    }

    /// Stable 64-bit fingerprint of the canonical text form.
    pub fn fingerprint(&self) -> u64 {
        use sha2::{Digest, Sha256};
        let digest = Sha256::digest(self.to_string().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
    }
}

impl fmt::Display for NetworkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "input={}x{}", self.input_shape.0, self.input_shape.1)?;
        for layer in &self.layers {
            match layer {
                Layer::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    padding,
                } => write!(f, ";conv({in_channels},{out_channels},{kernel},{padding})")?,
                Layer::MaxPool2d { window } => write!(f, ";maxpool({window})")?,
                Layer::Relu => write!(f, ";relu")?,
                Layer::Flatten => write!(f, ";flatten")?,
                Layer::Linear {
                    in_features,
                    out_features,
                } => write!(f, ";linear({in_features},{out_features})")?,
                Layer::Dropout { rate } => write!(f, ";dropout({rate})")?,
            }
        }
        Ok(())
    }
}

impl FromStr for NetworkSpec {
    type Err = BnnError;

    /// Parses the canonical form, e.g. `input=28x28;conv(1,4,3,1);relu;maxpool(2);flatten;linear(784,2)`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = |m: String| BnnError::Config(format!("network spec: {m}"));
        let mut parts = s.split(';').map(str::trim).filter(|p| !p.is_empty());
        let input = parts
            .next()
            .and_then(|p| p.strip_prefix("input="))
            .ok_or_else(|| bad("must start with input=HxW".into()))?;
        let (h, w) = input
            .split_once('x')
            .ok_or_else(|| bad(format!("bad input shape {input:?}")))?;
        let parse_usize = |v: &str| v.trim().parse::<usize>().map_err(|e| bad(format!("{v:?}: {e}")));
        let input_shape = (parse_usize(h)?, parse_usize(w)?);
        let mut layers = Vec::new();
        for part in parts {
            let (name, args) = match part.split_once('(') {
                Some((name, rest)) => {
                    let args = rest
                        .strip_suffix(')')
                        .ok_or_else(|| bad(format!("unclosed parenthesis in {part:?}")))?;
                    (name, args.split(',').map(str::trim).collect::<Vec<_>>())
                }
                None => (part, Vec::new()),
            };
            let arity = |n: usize| {
                if args.len() == n {
                    Ok(())
                } else {
                    Err(bad(format!("{name} takes {n} arguments, got {part:?}")))
                }
            };
            let layer = match name {
                "conv" => {
                    arity(4)?;
                    Layer::Conv2d {
                        in_channels: parse_usize(args[0])?,
                        out_channels: parse_usize(args[1])?,
                        kernel: parse_usize(args[2])?,
                        padding: parse_usize(args[3])?,
                    }
                }
                "maxpool" => {
                    arity(1)?;
                    Layer::MaxPool2d {
                        window: parse_usize(args[0])?,
                    }
                }
                "relu" => Layer::Relu,
                "flatten" => Layer::Flatten,
                "linear" => {
                    arity(2)?;
                    Layer::Linear {
                        in_features: parse_usize(args[0])?,
                        out_features: parse_usize(args[1])?,
                    }
                }
                "dropout" => {
                    arity(1)?;
                    Layer::Dropout {
                        rate: args[0]
                            .parse()
                            .map_err(|e| bad(format!("dropout rate {:?}: {e}", args[0])))?,
                    }
                }
                other => return Err(bad(format!("unknown layer {other:?}"))),
            };
            layers.push(layer);
        }
        NetworkSpec::new(input_shape, layers)
    }
}

/// Location of one parametric layer's weights and bias in the flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSlot {
    pub layer: usize,
    pub weight_offset: usize,
    pub weight_shape: Vec<usize>,
    pub bias_offset: usize,
    pub bias_len: usize,
    pub fan_in: usize,
}

impl ParamSlot {
    pub fn weight_range(&self) -> Range<usize> {
        self.weight_offset..self.bias_offset
    }

    pub fn bias_range(&self) -> Range<usize> {
        self.bias_offset..self.bias_offset + self.bias_len
    }

    /// Weights followed by bias.
    pub fn range(&self) -> Range<usize> {
        self.weight_offset..self.bias_offset + self.bias_len
    }
}

/// Contiguous, non-overlapping per-layer blocks of the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    pub slots: Vec<ParamSlot>,
    pub total: usize,
}

impl ParamLayout {
    pub fn slot_for_layer(&self, layer: usize) -> Option<&ParamSlot> {
        self.slots.iter().find(|s| s.layer == layer)
    }

    /// Weights and bias of the terminal linear layer.
    pub fn last_layer(&self) -> &ParamSlot {
        self.slots.last().expect("a validated network has a terminal linear layer")
    }
}

/// Flattened network parameters together with their layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub layout: Arc<ParamLayout>,
}

impl ParamVector {
    pub fn zeros(spec: &NetworkSpec) -> Result<Self> {
        let layout = spec.layout()?;
        Ok(Self {
            values: vec![0.0; layout.total],
            layout,
        })
    }

    pub fn from_values(spec: &NetworkSpec, values: Vec<f64>) -> Result<Self> {
        let layout = spec.layout()?;
        if values.len() != layout.total {
            return Err(BnnError::InvalidArgument(format!(
                "network has {} parameters, got {}",
                layout.total,
                values.len()
            )));
        }
        Ok(Self { values, layout })
    }

    /// Fan-in uniform initialisation, U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
    pub fn init_fan_in<R: Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> Result<Self> {
        let mut params = Self::zeros(spec)?;
        for slot in params.layout.clone().slots.iter() {
            let bound = 1.0 / (slot.fan_in as f64).sqrt();
            for v in &mut params.values[slot.range()] {
                *v = rng.random_range(-bound..bound);
            }
        }
        Ok(params)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn last_layer(&self) -> &[f64] {
        &self.values[self.layout.last_layer().range()]
    }
}

/// Expanded LeNet-5 for 150x150 single-channel images.
///
/// Four 5x5 convolutions (padding 1) with 6, 16, 26 and 32 channels, each followed by
/// ReLU and 2x2 max pooling (150 -> 74 -> 36 -> 17 -> 7), then fully connected layers
/// 1568 -> 120 -> 84 -> 2 with dropout before the last two. 232,444 parameters.
pub fn build_lenet_expanded() -> NetworkSpec {
    build_lenet_expanded_with_dropout(0.5)
}

pub fn build_lenet_expanded_with_dropout(rate: f64) -> NetworkSpec {
    let mut layers = Vec::new();
    for (cin, cout) in [(1, 6), (6, 16), (16, 26), (26, 32)] {
        layers.push(Layer::Conv2d {
            in_channels: cin,
            out_channels: cout,
            kernel: 5,
            padding: 1,
        });
        layers.push(Layer::Relu);
        layers.push(Layer::MaxPool2d { window: 2 });
    }
    layers.extend([
        Layer::Flatten,
        Layer::Linear {
            in_features: 32 * 7 * 7,
            out_features: 120,
        },
        Layer::Relu,
        Layer::Dropout { rate },
        Layer::Linear {
            in_features: 120,
            out_features: 84,
        },
        Layer::Relu,
        Layer::Dropout { rate },
        Layer::Linear {
            in_features: 84,
            out_features: 2,
        },
    ]);
    NetworkSpec::new((150, 150), layers).expect("expanded LeNet layout is consistent")
}

/// Small LeNet-style network for desk-scale runs on `size`x`size` images.
///
/// Same shape family as the expanded LeNet (conv/pool stack, three fully connected
/// layers with dropout before the last two) at a fraction of the cost.
pub fn build_desk_cnn(size: usize, dropout: f64) -> Result<NetworkSpec> {
    let after = size / 2 / 2;
    NetworkSpec::new(
        (size, size),
        vec![
            Layer::Conv2d {
                in_channels: 1,
                out_channels: 4,
                kernel: 3,
                padding: 1,
            },
            Layer::Relu,
            Layer::MaxPool2d { window: 2 },
            Layer::Conv2d {
                in_channels: 4,
                out_channels: 8,
                kernel: 3,
                padding: 1,
            },
            Layer::Relu,
            Layer::MaxPool2d { window: 2 },
            Layer::Flatten,
            Layer::Linear {
                in_features: 8 * after * after,
                out_features: 32,
            },
            Layer::Relu,
            Layer::Dropout { rate: dropout },
            Layer::Linear {
                in_features: 32,
                out_features: 16,
            },
            Layer::Relu,
            Layer::Dropout { rate: dropout },
            Layer::Linear {
                in_features: 16,
                out_features: 2,
            },
        ],
    )
}

/// Fully connected ReLU network on flat `inputs`-dimensional data.
pub fn build_mlp(inputs: usize, hidden: &[usize], classes: usize) -> Result<NetworkSpec> {
    let mut layers = vec![Layer::Flatten];
    let mut width = inputs;
    for &h in hidden {
        layers.push(Layer::Linear {
            in_features: width,
            out_features: h,
        });
        layers.push(Layer::Relu);
        width = h;
    }
    layers.push(Layer::Linear {
        in_features: width,
        out_features: classes,
    });
    NetworkSpec::new((1, inputs), layers)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lenet_expanded_parameter_count() {
        let spec = build_lenet_expanded();
        assert_eq!(spec.param_count().unwrap(), 232_444);
        let channels: Vec<usize> = spec
            .layers
            .iter()
            .filter_map(|l| match l {
                Layer::Conv2d { out_channels, .. } => Some(*out_channels),
                _ => None,
            })
            .collect();
        assert_eq!(channels, vec![6, 16, 26, 32]);
        // dropout sits directly before each of the last two linear layers
        let n = spec.layers.len();
        assert!(matches!(spec.layers[n - 2], Layer::Dropout { rate } if rate == 0.5));
        assert!(matches!(spec.layers[n - 5], Layer::Dropout { .. }));
    }

    #[test]
    fn single_layer_counts() {
        let linear = Layer::Linear {
            in_features: 2,
            out_features: 2,
        };
        assert_eq!(linear.param_count(), 6);
        // enumerate every weight and bias of a 1->6, 5x5 conv
        let mut enumerated = 0;
        for _out in 0..6 {
            for _in in 0..1 {
                for _ky in 0..5 {
                    for _kx in 0..5 {
                        enumerated += 1;
                    }
                }
            }
            enumerated += 1;
        }
        let conv = Layer::Conv2d {
            in_channels: 1,
            out_channels: 6,
            kernel: 5,
            padding: 0,
        };
        assert_eq!(conv.param_count(), enumerated);
        assert_eq!(enumerated, 156);
    }

    #[test]
    fn composition_errors_are_descriptive() {
        let err = NetworkSpec::new(
            (8, 8),
            vec![
                Layer::Conv2d {
                    in_channels: 3,
                    out_channels: 2,
                    kernel: 3,
                    padding: 0,
                },
                Layer::Flatten,
                Layer::Linear {
                    in_features: 72,
                    out_features: 2,
                },
            ],
        )
        .unwrap_err();
        assert!(err.to_string().contains("3 input channels"), "{err}");
        let err = NetworkSpec::new(
            (8, 8),
            vec![Layer::Linear {
                in_features: 64,
                out_features: 2,
            }],
        )
        .unwrap_err();
        assert!(err.to_string().contains("cannot consume"), "{err}");
        assert!(NetworkSpec::new((4, 4), vec![Layer::Flatten, Layer::Relu]).is_err());
    }

    #[test]
    fn layout_is_contiguous() {
        let spec = build_lenet_expanded();
        let layout = spec.layout().unwrap();
        let mut expected = 0;
        for slot in &layout.slots {
            assert_eq!(slot.weight_offset, expected);
            expected = slot.range().end;
        }
        assert_eq!(expected, layout.total);
        assert_eq!(layout.last_layer().range().len(), 84 * 2 + 2);
    }

    #[test]
    fn text_form_round_trips() {
        for spec in [
            build_lenet_expanded(),
            build_desk_cnn(16, 0.25).unwrap(),
            build_mlp(2, &[16, 8], 2).unwrap(),
        ] {
            let parsed: NetworkSpec = spec.to_string().parse().unwrap();
            assert_eq!(parsed, spec);
            assert_eq!(parsed.fingerprint(), spec.fingerprint());
        }
        assert!("input=4x4;bogus".parse::<NetworkSpec>().is_err());
    }
}
