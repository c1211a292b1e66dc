use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{NptnError, Result};
use crate::layers::{Aggregate, NptnLayerSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    Nptn,
}

/// The feature layer of one block. Every block is
/// `conv|nptn → batchnorm → prelu → 2×2 maxpool`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    #[serde(default = "one")]
    pub group_size: usize,
    #[serde(default = "five")]
    pub kernel: usize,
    #[serde(default = "two")]
    pub pad: usize,
}

fn one() -> usize {
    1
}
fn two() -> usize {
    2
}
fn five() -> usize {
    5
}

impl LayerSpec {
    pub fn filter_count(&self) -> usize {
        self.in_channels * self.out_channels * self.group_size
    }

    pub fn nptn(&self, aggregate: Aggregate) -> NptnLayerSpec {
        NptnLayerSpec {
            aggregate,
            ..NptnLayerSpec::new(
                self.in_channels,
                self.out_channels,
                self.group_size,
                self.kernel,
                self.pad,
            )
        }
    }

    /// Shape of the layer's filter tensor: `[O,C,k,k]` for conv,
    /// `[M,N,G,k,k]` for nptn.
    pub fn weight_shape(&self) -> Vec<usize> {
        let k = self.kernel;
        match self.kind {
            LayerKind::Conv => vec![self.out_channels, self.in_channels, k, k],
            LayerKind::Nptn => vec![self.in_channels, self.out_channels, self.group_size, k, k],
        }
    }
}

pub const POOL: usize = 2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    /// `[C, H, W]` of one input image.
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
    pub num_classes: usize,
    #[serde(default)]
    pub aggregate: Aggregate,
}

impl ArchSpec {
    /// Two blocks with channels `[C, c1, c2]` and the same kind and group
    /// size in both, 5×5 kernels with pad 2.
    pub fn two_layer(
        input: [usize; 3],
        kind: LayerKind,
        c1: usize,
        group: usize,
        c2: usize,
    ) -> Self {
        let layer = |i, o| LayerSpec {
            kind,
            in_channels: i,
            out_channels: o,
            group_size: group,
            kernel: 5,
            pad: 2,
        };
        ArchSpec {
            input,
            layers: vec![layer(input[0], c1), layer(c1, c2)],
            num_classes: 10,
            aggregate: Aggregate::Sum,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(NptnError::Spec(format!(
                "input {:?} has a zero dimension",
                self.input
            )));
        }
        if self.layers.is_empty() {
            return Err(NptnError::Spec("architecture has no layers".into()));
        }
        if self.num_classes < 2 {
            return Err(NptnError::Spec("need at least 2 classes".into()));
        }
        let mut channels = c;
        for (i, l) in self.layers.iter().enumerate() {
            if l.in_channels != channels {
                return Err(NptnError::Spec(format!(
                    "layer {i} expects {} input channels but receives {channels}",
                    l.in_channels
                )));
            }
            if l.out_channels == 0 || l.group_size == 0 || l.kernel == 0 {
                return Err(NptnError::Spec(format!("layer {i} has a zero size")));
            }
            if l.kind == LayerKind::Conv && l.group_size != 1 {
                return Err(NptnError::Spec(format!(
                    "layer {i} is a convolution with group size {}",
                    l.group_size
                )));
            }
            channels = l.out_channels;
        }
        self.feature_shapes().map(|_| ())
    }

    /// `[C, H, W]` after each block.
    pub fn feature_shapes(&self) -> Result<Vec<[usize; 3]>> {
        let [_, mut h, mut w] = self.input;
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let fit = |s: usize| (s + 2 * l.pad).checked_sub(l.kernel).map(|v| v + 1);
            let (Some(ch), Some(cw)) = (fit(h), fit(w)) else {
                return Err(NptnError::Spec(format!(
                    "layer {i}: kernel {} exceeds a {h}x{w} input",
                    l.kernel
                )));
            };
            if ch < POOL || cw < POOL {
                return Err(NptnError::Spec(format!(
                    "layer {i}: {ch}x{cw} map is too small to pool"
                )));
            }
            (h, w) = (ch / POOL, cw / POOL);
            out.push([l.out_channels, h, w]);
        }
        Ok(out)
    }

    /// Width of the flattened features entering the classifier.
    pub fn flat_dim(&self) -> Result<usize> {
        let last = *self.feature_shapes()?.last().expect("validated non-empty");
        Ok(last.iter().product())
    }

    /// `Σ M·N·G` over the feature layers.
    pub fn count_filters(&self) -> usize {
        self.layers.iter().map(LayerSpec::filter_count).sum()
    }
}

/// Free function form of [`ArchSpec::count_filters`].
pub fn count_filters(arch: &ArchSpec) -> usize {
    arch.count_filters()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

impl DatasetKind {
    pub fn input(self) -> [usize; 3] {
        match self {
            DatasetKind::Mnist => [1, 28, 28],
            DatasetKind::Cifar10 => [3, 32, 32],
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
        })
    }
}

impl FromStr for DatasetKind {
    type Err = NptnError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetKind::Mnist),
            "cifar" | "cifar10" => Ok(DatasetKind::Cifar10),
            _ => Err(NptnError::Config {
                key: "dataset".into(),
                msg: format!("unknown dataset `{s}` (mnist | cifar10)"),
            }),
        }
    }
}

pub const SECOND_LAYER_CHANNELS: usize = 16;

/// A model named the way the experiments table names it:
/// `convnet-36` is ConvNet (36), `nptn-12-3` is NPTN (12, 3). An optional
/// dataset prefix selects the input: `mnist-nptn-12-3`, `cifar-convnet-48`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelLabel {
    pub dataset: Option<DatasetKind>,
    pub kind: LayerKind,
    pub channels: usize,
    pub group_size: usize,
}

impl ModelLabel {
    pub fn arch(&self, dataset: DatasetKind) -> ArchSpec {
        ArchSpec::two_layer(
            dataset.input(),
            self.kind,
            self.channels,
            self.group_size,
            SECOND_LAYER_CHANNELS,
        )
    }

    /// The label without its dataset prefix.
    pub fn bare(&self) -> ModelLabel {
        ModelLabel {
            dataset: None,
            ..*self
        }
    }
}

impl fmt::Display for ModelLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(d) = self.dataset {
            write!(
                f,
                "{}-",
                if d == DatasetKind::Cifar10 {
                    "cifar"
                } else {
                    "mnist"
                }
            )?;
        }
        match self.kind {
            LayerKind::Conv => write!(f, "convnet-{}", self.channels),
            LayerKind::Nptn => write!(f, "nptn-{}-{}", self.channels, self.group_size),
        }
    }
}

impl FromStr for ModelLabel {
    type Err = NptnError;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            NptnError::Config {
            key: "model".into(),
            msg: format!("`{s}` is not a model label (convnet-C or nptn-C-G, optionally prefixed by mnist- or cifar-)"),
        }
        };
        let mut parts: Vec<&str> = s.split('-').collect();
        let dataset = match parts.first() {
            Some(&"mnist") => Some(DatasetKind::Mnist),
            Some(&"cifar") | Some(&"cifar10") => Some(DatasetKind::Cifar10),
            _ => None,
        };
        if dataset.is_some() {
            parts.remove(0);
        }
        let num = |p: &str| p.parse::<usize>().ok().filter(|&v| v > 0).ok_or_else(bad);
        let (kind, channels, group_size) = match parts.as_slice() {
            ["convnet", c] => (LayerKind::Conv, num(c)?, 1),
            ["nptn", c, g] => (LayerKind::Nptn, num(c)?, num(g)?),
            _ => return Err(bad()),
        };
        Ok(ModelLabel {
            dataset,
            kind,
            channels,
            group_size,
        })
    }
}
