//! MLP layout, initialization, and the prior / posterior bookkeeping that the
//! drift model works on.
//!
//! Parameters live in one flat vector. For every layer the weight matrix
//! (row-major, `fan_in x fan_out`) comes first, then the bias vector; the
//! [`Group`] table records those slices and is a pure function of the
//! [`MlpSpec`].

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::rng::{lane, Lane};
use crate::streams::{Batch, Targets};

/// Hard lower bound on every posterior standard deviation.
pub const SIGMA_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Regression,
}

/// Fully connected ReLU network. The last layer is linear.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    pub task_kind: TaskKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKind {
    Weight,
    Bias,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Group {
    pub layer: usize,
    pub kind: GroupKind,
    pub offset: usize,
    pub len: usize,
    pub fan_in: usize,
}

impl Group {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }

    /// Short column-friendly name, e.g. `w0`, `b2`.
    pub fn label(&self) -> String {
        match self.kind {
            GroupKind::Weight => format!("w{}", self.layer),
            GroupKind::Bias => format!("b{}", self.layer),
        }
    }
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>, task_kind: TaskKind) -> Result<Self> {
        let spec = MlpSpec {
            layer_sizes,
            task_kind,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::invalid(
                "an MLP needs at least input and output widths",
            ));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::invalid("layer widths must be positive"));
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn input_width(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_sizes.last().expect("validated")
    }

    pub fn num_params(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    pub fn groups(&self) -> Vec<Group> {
        let mut groups = Vec::with_capacity(2 * self.num_layers());
        let mut offset = 0;
        for (layer, w) in self.layer_sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            groups.push(Group {
                layer,
                kind: GroupKind::Weight,
                offset,
                len: fan_in * fan_out,
                fan_in,
            });
            offset += fan_in * fan_out;
            groups.push(Group {
                layer,
                kind: GroupKind::Bias,
                offset,
                len: fan_out,
                fan_in,
            });
            offset += fan_out;
        }
        groups
    }
}

/// Flat parameter vector plus its group table.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub values: Vec<f64>,
    pub groups: Vec<Group>,
}

impl ParamSet {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorMean {
    /// Prior centred on the drawn initialization.
    #[default]
    SpecificInit,
    /// Prior centred on the initializer's mean (zero).
    Zero,
}

/// Per-parameter Gaussian prior `N(mu0, sigma0^2)` with `sigma0 = p * sigma_base`.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorSpec {
    pub mu0: Vec<f64>,
    pub sigma0: Vec<f64>,
    /// Initializer standard deviation `1/sqrt(fan_in)`, before rescaling by `p`.
    pub sigma_base: Vec<f64>,
    pub p: f64,
}

/// Mean-field Gaussian posterior with `sigma` stored as `ln sigma`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorState {
    pub mu: Vec<f64>,
    pub log_sigma: Vec<f64>,
}

impl PosteriorState {
    pub fn sigma(&self) -> Vec<f64> {
        self.log_sigma.iter().map(|l| l.exp()).collect()
    }

    /// Clamps every `sigma` to at least [`SIGMA_FLOOR`].
    pub fn enforce_floor(&mut self) {
        let floor = SIGMA_FLOOR.ln();
        for l in &mut self.log_sigma {
            if *l < floor {
                *l = floor;
            }
        }
    }
}

fn base_std(groups: &[Group], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for g in groups {
        let s = 1.0 / (g.fan_in as f64).sqrt();
        out[g.range()].fill(s);
    }
    out
}

/// Draws a parameter vector from the initializing distribution: weights
/// `N(0, 1/fan_in)`, biases zero. Each weight group has its own lane.
pub fn draw_init(spec: &MlpSpec, seed: u64, stream: &[u64]) -> Vec<f64> {
    let groups = spec.groups();
    let mut values = vec![0.0; spec.num_params()];
    for (gi, g) in groups.iter().enumerate() {
        if g.kind == GroupKind::Bias {
            continue;
        }
        let mut path = stream.to_vec();
        path.push(gi as u64);
        let mut rng = Lane::new(seed, &path);
        let s = 1.0 / (g.fan_in as f64).sqrt();
        for v in &mut values[g.range()] {
            *v = s * rng.normal();
        }
    }
    values
}

/// Initializes the network and its drift prior.
pub fn init_mlp(
    spec: &MlpSpec,
    p: f64,
    prior_mean: PriorMean,
    seed: u64,
) -> Result<(ParamSet, PriorSpec)> {
    spec.validate()?;
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::invalid(format!(
            "prior rescaling p must be in (0, 1], got {p}"
        )));
    }
    let groups = spec.groups();
    let values = draw_init(spec, seed, &[lane::INIT]);
    let sigma_base = base_std(&groups, values.len());
    let sigma0 = sigma_base.iter().map(|s| p * s).collect();
    let mu0 = match prior_mean {
        PriorMean::SpecificInit => values.clone(),
        PriorMean::Zero => vec![0.0; values.len()],
    };
    Ok((
        ParamSet { values, groups },
        PriorSpec {
            mu0,
            sigma0,
            sigma_base,
            p,
        },
    ))
}

/// Posterior at time zero: mean at the current parameters, std `f * sigma0`.
pub fn posterior_init(params: &ParamSet, prior: &PriorSpec, f: f64) -> Result<PosteriorState> {
    if !(f > 0.0 && f <= 1.0) {
        return Err(Error::invalid(format!(
            "posterior rescaling f must be in (0, 1], got {f}"
        )));
    }
    let mut post = PosteriorState {
        mu: params.values.clone(),
        log_sigma: prior.sigma0.iter().map(|s| (f * s).ln()).collect(),
    };
    post.enforce_floor();
    Ok(post)
}

fn layer_leaves(
    g: &mut Graph,
    spec: &MlpSpec,
    values: &[f64],
    leaf: impl Fn(&mut Graph, Tensor) -> NodeId,
) -> Result<Vec<NodeId>> {
    if values.len() != spec.num_params() {
        return Err(Error::ShapeMismatch {
            op: "mlp_params",
            lhs: vec![values.len()],
            rhs: vec![spec.num_params()],
        });
    }
    let mut ids = Vec::new();
    for grp in spec.groups() {
        let slice = values[grp.range()].to_vec();
        let t = match grp.kind {
            GroupKind::Weight => Tensor::matrix(grp.fan_in, grp.len / grp.fan_in, slice)?,
            GroupKind::Bias => Tensor::vector(slice),
        };
        ids.push(leaf(g, t));
    }
    Ok(ids)
}

fn forward(g: &mut Graph, spec: &MlpSpec, leaves: &[NodeId], inputs: &Tensor) -> Result<NodeId> {
    let width = match inputs.shape() {
        &[_, w] => w,
        other => {
            return Err(Error::ShapeMismatch {
                op: "mlp_input",
                lhs: other.to_vec(),
                rhs: vec![spec.input_width()],
            })
        }
    };
    if width != spec.input_width() {
        return Err(Error::ShapeMismatch {
            op: "mlp_input",
            lhs: inputs.shape().to_vec(),
            rhs: vec![spec.input_width()],
        });
    }
    let mut h = g.input(inputs.clone());
    let last = spec.num_layers() - 1;
    for layer in 0..spec.num_layers() {
        h = g.matmul(h, leaves[2 * layer])?;
        h = g.add_bias(h, leaves[2 * layer + 1])?;
        if layer < last {
            h = g.relu(h)?;
        }
    }
    Ok(h)
}

/// Builds the batch loss into `g`. Returns the scalar root and the parameter
/// leaves in group order.
pub fn forward_loss(
    g: &mut Graph,
    spec: &MlpSpec,
    values: &[f64],
    batch: &Batch,
) -> Result<(NodeId, Vec<NodeId>)> {
    let leaves = layer_leaves(g, spec, values, |g, t| g.param(t))?;
    let out = forward(g, spec, &leaves, &batch.inputs)?;
    let root = loss_node(g, spec, out, batch)?;
    Ok((root, leaves))
}

fn loss_node(g: &mut Graph, spec: &MlpSpec, out: NodeId, batch: &Batch) -> Result<NodeId> {
    match (&batch.targets, spec.task_kind) {
        (Targets::Classes(y), TaskKind::Classification) => g.softmax_cross_entropy(out, y),
        (Targets::Values(y), TaskKind::Regression) => g.gaussian_nll(out, y),
        _ => Err(Error::invalid("batch targets do not match the task kind")),
    }
}

/// Network outputs (logits or regression values) for a batch of inputs.
pub fn predict(spec: &MlpSpec, values: &[f64], inputs: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let leaves = layer_leaves(&mut g, spec, values, |g, t| g.input(t))?;
    let out = forward(&mut g, spec, &leaves, inputs)?;
    Ok(g.value(out).clone())
}

/// Network output, loss and (optionally) flat gradient from a single pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub output: Tensor,
    pub loss: f64,
    pub grad: Option<Vec<f64>>,
}

pub fn evaluate(
    spec: &MlpSpec,
    values: &[f64],
    batch: &Batch,
    with_grad: bool,
) -> Result<Evaluation> {
    let mut g = Graph::new();
    let leaves = if with_grad {
        layer_leaves(&mut g, spec, values, |g, t| g.param(t))?
    } else {
        layer_leaves(&mut g, spec, values, |g, t| g.input(t))?
    };
    let out = forward(&mut g, spec, &leaves, &batch.inputs)?;
    let root = loss_node(&mut g, spec, out, batch)?;
    let grad = if with_grad {
        let grads = g.backward(root)?;
        let mut flat = Vec::with_capacity(values.len());
        for id in leaves {
            flat.extend_from_slice(grads.get(id).expect("parameter leaf").data());
        }
        Some(flat)
    } else {
        None
    };
    Ok(Evaluation {
        output: g.value(out).clone(),
        loss: g.value(root).item(),
        grad,
    })
}

/// Loss and flat gradient at `values`.
pub fn loss_and_grad(spec: &MlpSpec, values: &[f64], batch: &Batch) -> Result<(f64, Vec<f64>)> {
    let mut g = Graph::new();
    let (root, leaves) = forward_loss(&mut g, spec, values, batch)?;
    let grads = g.backward(root)?;
    let mut flat = Vec::with_capacity(values.len());
    for id in leaves {
        flat.extend_from_slice(grads.get(id).expect("parameter leaf").data());
    }
    Ok((g.value(root).item(), flat))
}

/// A differentiable negative log-likelihood over a flat parameter vector.
pub trait Objective {
    /// Per-example mean loss and its gradient.
    fn loss_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)>;

    /// Number of examples the mean runs over; the batch log-likelihood is
    /// `-num_examples * loss`.
    fn num_examples(&self) -> usize {
        1
    }

    fn loss(&self, theta: &[f64]) -> Result<f64> {
        Ok(self.loss_grad(theta)?.0)
    }
}

/// The batch loss of an MLP as an [`Objective`].
pub struct MlpObjective<'a> {
    pub spec: &'a MlpSpec,
    pub batch: &'a Batch,
}

impl Objective for MlpObjective<'_> {
    fn loss_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        loss_and_grad(self.spec, theta, self.batch)
    }

    fn num_examples(&self) -> usize {
        self.batch.len()
    }

    fn loss(&self, theta: &[f64]) -> Result<f64> {
        let mut g = Graph::new();
        let (root, _) = forward_loss(&mut g, self.spec, theta, self.batch)?;
        Ok(g.value(root).item())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    spec: MlpSpec,
    seed: u64,
    groups: Vec<Group>,
}

/// Writes `<stem>.bin` (little-endian f64) and `<stem>.json` (spec, seed, group table).
pub fn save_checkpoint(stem: &Path, spec: &MlpSpec, seed: u64, params: &ParamSet) -> Result<()> {
    let bin = stem.with_extension("bin");
    let bytes: Vec<u8> = params.values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
    let meta = CheckpointMeta {
        spec: spec.clone(),
        seed,
        groups: params.groups.clone(),
    };
    let json = stem.with_extension("json");
    fs::write(&json, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&json, e))?;
    Ok(())
}

pub fn load_checkpoint(stem: &Path) -> Result<(MlpSpec, u64, ParamSet)> {
    let json = stem.with_extension("json");
    let meta: CheckpointMeta =
        serde_json::from_slice(&fs::read(&json).map_err(|e| Error::io(&json, e))?)?;
    let bin = stem.with_extension("bin");
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let needed = meta.spec.num_params() * 8;
    if bytes.len() != needed {
        return Err(Error::Truncated {
            path: bin,
            needed,
            actual: bytes.len(),
        });
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((
        meta.spec,
        meta.seed,
        ParamSet {
            values,
            groups: meta.groups,
        },
    ))
}
