use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{contract, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ArchKind {
    Mlp,
    SmallConvNet,
    TinyTransformer,
}

impl ArchKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ArchKind::Mlp => "mlp",
            ArchKind::SmallConvNet => "small_convnet",
            ArchKind::TinyTransformer => "tiny_transformer",
        }
    }
}

impl FromStr for ArchKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(ArchKind::Mlp),
            "small_convnet" | "convnet" => Ok(ArchKind::SmallConvNet),
            "tiny_transformer" | "transformer" => Ok(ArchKind::TinyTransformer),
            other => Err(Error::Parse(format!("unknown architecture kind {other:?}"))),
        }
    }
}

/// Network shape. Prunable layers are numbered `0..L-1` in forward order;
/// the classifier that follows them is never prunable.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum ModelArch {
    Mlp {
        input_dim: usize,
        hidden: Vec<usize>,
        num_classes: usize,
    },
    ConvNet {
        in_channels: usize,
        side: usize,
        kernel: usize,
        filters: Vec<usize>,
        num_classes: usize,
    },
    /// Patch-embedding encoder. Block `b` contributes two prunable layers:
    /// its attention heads (`2b`) and its MLP nodes (`2b + 1`).
    Transformer {
        side: usize,
        patch: usize,
        d_model: usize,
        head_dim: usize,
        heads: Vec<usize>,
        mlp: Vec<usize>,
        num_classes: usize,
    },
}

/// Which role an axis plays for the prunable unit that owns it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    /// Produces the unit's output (fan-in rows, kernel, bias).
    Producer,
    /// Reads the unit's output (fan-out slice of the next layer).
    Consumer,
}

/// Axis ownership: indices `u*block .. (u+1)*block` belong to unit `u` of `layer`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AxisOwner {
    pub layer: usize,
    pub block: usize,
    pub role: Role,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Uniform(f64),
    Zeros,
}

/// Static description of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub axes: Vec<Option<AxisOwner>>,
    pub init: Init,
    pub classifier: bool,
    /// Persistence group: the prunable layer the tensor belongs to, or `L`
    /// for the classifier and unit-free shared tensors.
    pub group: usize,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

fn producer(layer: usize, block: usize) -> Option<AxisOwner> {
    Some(AxisOwner { layer, block, role: Role::Producer })
}

fn consumer(layer: usize, block: usize) -> Option<AxisOwner> {
    Some(AxisOwner { layer, block, role: Role::Consumer })
}

fn relu_bound(fan_in: usize) -> Init {
    Init::Uniform((6.0 / fan_in as f64).sqrt())
}

fn linear_bound(fan_in: usize) -> Init {
    Init::Uniform((3.0 / fan_in as f64).sqrt())
}

impl ModelArch {
    /// Two hidden layers of 64 nodes over flattened 16×16 images.
    pub fn mlp_default(num_classes: usize) -> Self {
        ModelArch::Mlp { input_dim: 256, hidden: vec![64, 64], num_classes }
    }

    /// Three 3×3 conv layers with 16, 32 and 32 filters.
    pub fn convnet_default(num_classes: usize) -> Self {
        ModelArch::ConvNet { in_channels: 1, side: 16, kernel: 3, filters: vec![16, 32, 32], num_classes }
    }

    /// Two blocks, 4 heads of width 4, MLP width 32, 4×4 patches of a 16×16 image.
    pub fn transformer_default(num_classes: usize) -> Self {
        ModelArch::Transformer {
            side: 16,
            patch: 4,
            d_model: 16,
            head_dim: 4,
            heads: vec![4, 4],
            mlp: vec![32, 32],
            num_classes,
        }
    }

    pub fn default_for(kind: ArchKind, num_classes: usize) -> Self {
        match kind {
            ArchKind::Mlp => Self::mlp_default(num_classes),
            ArchKind::SmallConvNet => Self::convnet_default(num_classes),
            ArchKind::TinyTransformer => Self::transformer_default(num_classes),
        }
    }

    pub fn kind(&self) -> ArchKind {
        match self {
            ModelArch::Mlp { .. } => ArchKind::Mlp,
            ModelArch::ConvNet { .. } => ArchKind::SmallConvNet,
            ModelArch::Transformer { .. } => ArchKind::TinyTransformer,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            ModelArch::Mlp { num_classes, .. }
            | ModelArch::ConvNet { num_classes, .. }
            | ModelArch::Transformer { num_classes, .. } => *num_classes,
        }
    }

    pub fn with_num_classes(&self, m: usize) -> Self {
        let mut a = self.clone();
        match &mut a {
            ModelArch::Mlp { num_classes, .. }
            | ModelArch::ConvNet { num_classes, .. }
            | ModelArch::Transformer { num_classes, .. } => *num_classes = m,
        }
        a
    }

    /// Unit counts `n_ℓ` of the prunable layers.
    pub fn widths(&self) -> Vec<usize> {
        match self {
            ModelArch::Mlp { hidden, .. } => hidden.clone(),
            ModelArch::ConvNet { filters, .. } => filters.clone(),
            ModelArch::Transformer { heads, mlp, .. } => {
                heads.iter().zip(mlp).flat_map(|(&h, &m)| [h, m]).collect()
            }
        }
    }

    pub fn num_prunable(&self) -> usize {
        self.widths().len()
    }

    pub fn with_widths(&self, widths: &[usize]) -> Result<Self> {
        if widths.len() != self.num_prunable() {
            return Err(contract(format!(
                "{} widths for an architecture with {} prunable layers",
                widths.len(),
                self.num_prunable()
            )));
        }
        if widths.contains(&0) {
            return Err(contract("every prunable layer needs at least one unit"));
        }
        let mut a = self.clone();
        match &mut a {
            ModelArch::Mlp { hidden, .. } => hidden.copy_from_slice(widths),
            ModelArch::ConvNet { filters, .. } => filters.copy_from_slice(widths),
            ModelArch::Transformer { heads, mlp, .. } => {
                for (b, pair) in widths.chunks(2).enumerate() {
                    heads[b] = pair[0];
                    mlp[b] = pair[1];
                }
            }
        }
        Ok(a)
    }

    pub fn unit_name(&self, layer: usize) -> &'static str {
        match self {
            ModelArch::Mlp { .. } => "node",
            ModelArch::ConvNet { .. } => "filter",
            ModelArch::Transformer { .. } if layer.is_multiple_of(2) => "head",
            ModelArch::Transformer { .. } => "node",
        }
    }

    /// Checks the invariants of a full (unpruned) architecture.
    pub fn validate(&self) -> Result<()> {
        let widths = self.widths();
        if widths.is_empty() {
            return Err(contract("architecture has no prunable layer"));
        }
        if let Some(w) = widths.iter().find(|&&w| w < 2) {
            return Err(contract(format!("prunable layer with {w} units; need at least 2")));
        }
        if self.num_classes() < 1 {
            return Err(contract("classifier needs at least one class"));
        }
        match self {
            ModelArch::Mlp { input_dim, .. } if *input_dim == 0 => Err(contract("mlp input_dim is 0")),
            ModelArch::ConvNet { kernel, side, in_channels, .. }
                if kernel % 2 == 0 || *side == 0 || *in_channels == 0 =>
            {
                Err(contract("convnet needs an odd kernel and non-empty input"))
            }
            ModelArch::Transformer { side, patch, heads, mlp, head_dim, d_model, .. }
                if *patch == 0 || side % patch != 0 || heads.len() != mlp.len() || *head_dim == 0 || *d_model == 0 =>
            {
                Err(contract("transformer needs side divisible by patch and one head/mlp width per block"))
            }
            _ => Ok(()),
        }
    }

    /// Number of input features per sample.
    pub fn input_numel(&self) -> usize {
        match self {
            ModelArch::Mlp { input_dim, .. } => *input_dim,
            ModelArch::ConvNet { in_channels, side, .. } => in_channels * side * side,
            ModelArch::Transformer { side, .. } => side * side,
        }
    }

    /// Parameter tensors in canonical order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let l = self.num_prunable();
        let mut specs = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, axes: Vec<Option<AxisOwner>>, init: Init, classifier: bool| {
            let group = if classifier {
                l
            } else {
                axes.iter()
                    .flatten()
                    .find(|o| o.role == Role::Producer)
                    .or_else(|| axes.iter().flatten().next())
                    .map_or(l, |o| o.layer)
            };
            specs.push(ParamSpec { name, shape, axes, init, classifier, group });
        };
        match self {
            ModelArch::Mlp { input_dim, hidden, num_classes } => {
                let mut fan_in = *input_dim;
                for (i, &h) in hidden.iter().enumerate() {
                    let in_axis = if i == 0 { None } else { consumer(i - 1, 1) };
                    push(format!("fc{i}.weight"), vec![fan_in, h], vec![in_axis, producer(i, 1)], relu_bound(fan_in), false);
                    push(format!("fc{i}.bias"), vec![h], vec![producer(i, 1)], Init::Zeros, false);
                    fan_in = h;
                }
                push("head.weight".into(), vec![fan_in, *num_classes], vec![consumer(l - 1, 1), None], linear_bound(fan_in), true);
                push("head.bias".into(), vec![*num_classes], vec![None], Init::Zeros, true);
            }
            ModelArch::ConvNet { in_channels, kernel, filters, num_classes, .. } => {
                let mut cin = *in_channels;
                for (i, &f) in filters.iter().enumerate() {
                    let in_axis = if i == 0 { None } else { consumer(i - 1, 1) };
                    let fan_in = cin * kernel * kernel;
                    push(
                        format!("conv{i}.weight"),
                        vec![f, cin, *kernel, *kernel],
                        vec![producer(i, 1), in_axis, None, None],
                        relu_bound(fan_in),
                        false,
                    );
                    push(format!("conv{i}.bias"), vec![f], vec![producer(i, 1)], Init::Zeros, false);
                    cin = f;
                }
                push("head.weight".into(), vec![cin, *num_classes], vec![consumer(l - 1, 1), None], linear_bound(cin), true);
                push("head.bias".into(), vec![*num_classes], vec![None], Init::Zeros, true);
            }
            ModelArch::Transformer { side, patch, d_model, head_dim, heads, mlp, num_classes } => {
                let pd = patch * patch;
                let tokens = (side / patch) * (side / patch);
                let d = *d_model;
                push("embed.weight".into(), vec![pd, d], vec![None, None], linear_bound(pd), false);
                push("embed.bias".into(), vec![d], vec![None], Init::Zeros, false);
                push("pos".into(), vec![tokens, d], vec![None, None], Init::Uniform(0.1), false);
                for (b, (&h, &m)) in heads.iter().zip(mlp).enumerate() {
                    let (hl, ml) = (2 * b, 2 * b + 1);
                    let w = h * head_dim;
                    for p in ["q", "k", "v"] {
                        push(format!("block{b}.{p}.weight"), vec![d, w], vec![None, producer(hl, *head_dim)], linear_bound(d), false);
                        push(format!("block{b}.{p}.bias"), vec![w], vec![producer(hl, *head_dim)], Init::Zeros, false);
                    }
                    push(format!("block{b}.o.weight"), vec![w, d], vec![consumer(hl, *head_dim), None], linear_bound(d), false);
                    push(format!("block{b}.o.bias"), vec![d], vec![None], Init::Zeros, false);
                    push(format!("block{b}.up.weight"), vec![d, m], vec![None, producer(ml, 1)], relu_bound(d), false);
                    push(format!("block{b}.up.bias"), vec![m], vec![producer(ml, 1)], Init::Zeros, false);
                    push(format!("block{b}.down.weight"), vec![m, d], vec![consumer(ml, 1), None], linear_bound(m), false);
                    push(format!("block{b}.down.bias"), vec![d], vec![None], Init::Zeros, false);
                }
                push("head.weight".into(), vec![d, *num_classes], vec![None, None], linear_bound(d), true);
                push("head.bias".into(), vec![*num_classes], vec![None], Init::Zeros, true);
            }
        }
        specs
    }

    pub fn param_count(&self) -> usize {
        self.param_specs().iter().map(ParamSpec::numel).sum()
    }

    /// Short stable hash of the descriptor string.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_string().as_bytes());
        hex::encode(&digest[..8])
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl fmt::Display for ModelArch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelArch::Mlp { input_dim, hidden, num_classes } => {
                write!(f, "mlp input={input_dim} hidden={} classes={num_classes}", join(hidden))
            }
            ModelArch::ConvNet { in_channels, side, kernel, filters, num_classes } => write!(
                f,
                "small_convnet channels={in_channels} side={side} kernel={kernel} filters={} classes={num_classes}",
                join(filters)
            ),
            ModelArch::Transformer { side, patch, d_model, head_dim, heads, mlp, num_classes } => write!(
                f,
                "tiny_transformer side={side} patch={patch} d_model={d_model} head_dim={head_dim} heads={} mlp={} classes={num_classes}",
                join(heads),
                join(mlp)
            ),
        }
    }
}

impl FromStr for ModelArch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split_whitespace();
        let kind: ArchKind = parts.next().ok_or_else(|| Error::Parse("empty architecture".into()))?.parse()?;
        let mut kv = std::collections::HashMap::new();
        for p in parts {
            let (k, v) = p.split_once('=').ok_or_else(|| Error::Parse(format!("bad architecture field {p:?}")))?;
            kv.insert(k, v);
        }
        let num = |k: &str| -> Result<usize> {
            kv.get(k)
                .ok_or_else(|| Error::Parse(format!("architecture missing {k}")))?
                .parse()
                .map_err(|_| Error::Parse(format!("architecture field {k} is not an integer")))
        };
        let list = |k: &str| -> Result<Vec<usize>> {
            kv.get(k)
                .ok_or_else(|| Error::Parse(format!("architecture missing {k}")))?
                .split(',')
                .map(|x| x.parse().map_err(|_| Error::Parse(format!("bad list entry in {k}"))))
                .collect()
        };
        Ok(match kind {
            ArchKind::Mlp => ModelArch::Mlp { input_dim: num("input")?, hidden: list("hidden")?, num_classes: num("classes")? },
            ArchKind::SmallConvNet => ModelArch::ConvNet {
                in_channels: num("channels")?,
                side: num("side")?,
                kernel: num("kernel")?,
                filters: list("filters")?,
                num_classes: num("classes")?,
            },
            ArchKind::TinyTransformer => ModelArch::Transformer {
                side: num("side")?,
                patch: num("patch")?,
                d_model: num("d_model")?,
                head_dim: num("head_dim")?,
                heads: list("heads")?,
                mlp: list("mlp")?,
                num_classes: num("classes")?,
            },
        })
    }
}
