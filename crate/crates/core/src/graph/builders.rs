//! Architecture families: ResNet18, a toy residual network, a VGG-style
//! chain with batch norm, concat blocks in both orderings, and MLPs.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{GraphError, Head, LayerKind, LayerNode, NetworkGraph};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConcatVariant {
    /// concat -> conv -> batch norm (GoogLeNet ordering).
    ConvFirst,
    /// concat -> batch norm -> conv (DenseNet ordering).
    NormFirst,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    ToyResnet,
    SmallVggBn,
    Resnet18,
    ConcatBlock(ConcatVariant),
    Mlp,
}

impl FromStr for Family {
    type Err = GraphError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "toy-resnet" => Family::ToyResnet,
            "small-vgg-bn" => Family::SmallVggBn,
            "resnet18" => Family::Resnet18,
            "concat-block" | "concat-block-conv" => Family::ConcatBlock(ConcatVariant::ConvFirst),
            "concat-block-bn" => Family::ConcatBlock(ConcatVariant::NormFirst),
            "mlp" => Family::Mlp,
            other => return Err(GraphError::UnknownFamily(other.to_string())),
        })
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::ToyResnet => "toy-resnet",
            Family::SmallVggBn => "small-vgg-bn",
            Family::Resnet18 => "resnet18",
            Family::ConcatBlock(ConcatVariant::ConvFirst) => "concat-block",
            Family::ConcatBlock(ConcatVariant::NormFirst) => "concat-block-bn",
            Family::Mlp => "mlp",
        })
    }
}

/// Knobs that only some families read.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchOptions {
    /// Base channel width (toy-resnet, small-vgg-bn, concat-block).
    pub width: Option<usize>,
    /// Hidden layer sizes for `mlp`.
    pub hidden: Vec<usize>,
    pub head: Head,
}

impl Default for ArchOptions {
    fn default() -> Self {
        Self {
            width: None,
            hidden: Vec::new(),
            head: Head::Classifier,
        }
    }
}

pub fn build_architecture(family: Family, classes: usize, input: [usize; 3]) -> Result<NetworkGraph, GraphError> {
    build_architecture_with(family, classes, input, &ArchOptions::default())
}

pub fn build_architecture_with(
    family: Family,
    classes: usize,
    input: [usize; 3],
    opts: &ArchOptions,
) -> Result<NetworkGraph, GraphError> {
    if classes < 2 {
        return Err(GraphError::Config(format!(
            "class count must be at least 2, got {classes}"
        )));
    }
    let mut b = Builder::new(input);
    match family {
        Family::Resnet18 => resnet18(&mut b, classes),
        Family::ToyResnet => toy_resnet(&mut b, classes, opts.width.unwrap_or(8)),
        Family::SmallVggBn => small_vgg(&mut b, classes, opts.width.unwrap_or(8), input),
        Family::ConcatBlock(v) => concat_block(&mut b, classes, opts.width.unwrap_or(2), v),
        Family::Mlp => mlp(&mut b, classes, &opts.hidden, input),
    }
    let out = b.last.clone();
    NetworkGraph::new(b.nodes, &out, opts.head)
}

struct Builder {
    nodes: Vec<LayerNode>,
    channels: usize,
    last: String,
}

impl Builder {
    fn new([c, h, w]: [usize; 3]) -> Self {
        Self {
            nodes: vec![LayerNode::new(
                "input",
                LayerKind::Input {
                    channels: c,
                    height: h,
                    width: w,
                },
                &[],
            )],
            channels: c,
            last: "input".into(),
        }
    }

    fn push(&mut self, name: &str, kind: LayerKind, inputs: &[&str]) -> String {
        self.nodes.push(LayerNode::new(name, kind, inputs));
        self.last = name.to_string();
        self.last.clone()
    }

    fn conv_from(
        &mut self,
        name: &str,
        from: &str,
        ci: usize,
        co: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> String {
        self.channels = co;
        self.push(
            name,
            LayerKind::Conv {
                out_channels: co,
                in_channels: ci,
                kernel,
                stride,
                padding,
                bias: false,
            },
            &[from],
        )
    }

    fn conv(&mut self, name: &str, co: usize, kernel: usize, stride: usize, padding: usize) -> String {
        let (from, ci) = (self.last.clone(), self.channels);
        self.conv_from(name, &from, ci, co, kernel, stride, padding)
    }

    fn bn(&mut self, name: &str) -> String {
        let from = self.last.clone();
        self.push(
            name,
            LayerKind::BatchNorm {
                channels: self.channels,
            },
            &[&from],
        )
    }

    fn relu(&mut self, name: &str) -> String {
        let from = self.last.clone();
        self.push(name, LayerKind::Relu, &[&from])
    }

    fn gap(&mut self, name: &str) -> String {
        let from = self.last.clone();
        self.push(name, LayerKind::Gap, &[&from])
    }

    fn maxpool(&mut self, name: &str, kernel: usize, stride: usize, padding: usize) -> String {
        let from = self.last.clone();
        self.push(
            name,
            LayerKind::MaxPool {
                kernel,
                stride,
                padding,
            },
            &[&from],
        )
    }

    fn linear(&mut self, name: &str, out: usize, bias: bool) -> String {
        let from = self.last.clone();
        let ci = self.channels;
        self.channels = out;
        self.push(
            name,
            LayerKind::Linear {
                out_features: out,
                in_features: ci,
                bias,
            },
            &[&from],
        )
    }
}

/// Standard basic block: two 3x3 convs, projection shortcut when the shape changes.
fn basic_block(b: &mut Builder, prefix: &str, out: usize, stride: usize) {
    let block_in = b.last.clone();
    let ci = b.channels;
    b.conv(&format!("{prefix}.conv1"), out, 3, stride, 1);
    b.bn(&format!("{prefix}.bn1"));
    b.relu(&format!("{prefix}.relu1"));
    b.conv(&format!("{prefix}.conv2"), out, 3, 1, 1);
    let main = b.bn(&format!("{prefix}.bn2"));
    let shortcut = if stride != 1 || ci != out {
        b.conv_from(&format!("{prefix}.downsample.0"), &block_in, ci, out, 1, stride, 0);
        b.bn(&format!("{prefix}.downsample.1"))
    } else {
        block_in
    };
    b.push(&format!("{prefix}.add"), LayerKind::Add, &[&main, &shortcut]);
    b.relu(&format!("{prefix}.relu2"));
}

fn resnet18(b: &mut Builder, classes: usize) {
    b.conv("conv1", 64, 7, 2, 3);
    b.bn("bn1");
    b.relu("relu");
    b.maxpool("maxpool", 3, 2, 1);
    for (layer, (width, stride)) in [(64, 1), (128, 2), (256, 2), (512, 2)].into_iter().enumerate() {
        basic_block(b, &format!("layer{}.0", layer + 1), width, stride);
        basic_block(b, &format!("layer{}.1", layer + 1), width, 1);
    }
    b.gap("avgpool");
    b.linear("fc", classes, true);
}

fn toy_resnet(b: &mut Builder, classes: usize, width: usize) {
    b.conv("conv1", width, 3, 1, 1);
    b.bn("bn1");
    b.relu("relu");
    basic_block(b, "block", 2 * width, 2);
    b.gap("gap");
    b.linear("fc", classes, true);
}

/// VGG11-bn conv stack (widths 1,2,4,4,8,8,8,8 x base) with pooling after
/// convs 1, 2, 4, 6, 8 while the feature map is still larger than 1x1.
fn small_vgg(b: &mut Builder, classes: usize, width: usize, [_, h, w]: [usize; 3]) {
    let widths = [1, 2, 4, 4, 8, 8, 8, 8];
    let pool_after = [1, 2, 4, 6, 8];
    let mut side = h.min(w);
    for (i, m) in widths.iter().enumerate() {
        let l = i + 1;
        b.conv(&format!("conv{l}"), m * width, 3, 1, 1);
        b.bn(&format!("bn{l}"));
        b.relu(&format!("relu{l}"));
        if pool_after.contains(&l) && side >= 2 {
            b.maxpool(&format!("pool{l}"), 2, 2, 0);
            side /= 2;
        }
    }
    b.gap("gap");
    b.linear("fc", classes, true);
}

/// Two parallel branches (widths `2w` and `3w`) concatenated, then either
/// conv -> bn or bn -> conv.
fn concat_block(b: &mut Builder, classes: usize, width: usize, variant: ConcatVariant) {
    let ci = b.channels;
    let (wa, wb) = (2 * width, 3 * width);
    b.conv_from("branch1.conv", "input", ci, wa, 3, 1, 1);
    b.bn("branch1.bn");
    let a = b.relu("branch1.relu");
    b.conv_from("branch2.conv", "input", ci, wb, 1, 1, 0);
    b.bn("branch2.bn");
    let bb = b.relu("branch2.relu");
    b.push("concat", LayerKind::Concat, &[&a, &bb]);
    b.channels = wa + wb;
    match variant {
        ConcatVariant::ConvFirst => {
            b.conv("conv3", 4 * width, 3, 1, 1);
            b.bn("bn3");
        }
        ConcatVariant::NormFirst => {
            b.bn("bn3");
            b.relu("relu_pre");
            b.conv("conv3", 4 * width, 3, 1, 1);
            b.bn("bn4");
        }
    }
    b.relu("relu3");
    b.gap("gap");
    b.linear("fc", classes, true);
}

fn mlp(b: &mut Builder, classes: usize, hidden: &[usize], [c, h, w]: [usize; 3]) {
    b.channels = c * h * w;
    for (i, &width) in hidden.iter().enumerate() {
        b.linear(&format!("fc{}", i + 1), width, true);
        b.relu(&format!("relu{}", i + 1));
    }
    b.linear("fc", classes, true);
}
