//! Self-checks shared by the test suites and the command line: finite
//! difference gradient checks of every differentiable op and of whole
//! residual blocks, schedule conformance, and a single-batch overfit run.

use ndarray::Array2;
use rand::Rng;
use serde::Serialize;

use liverseg_tensor::{
    grad_check, BnStats, ConvParams, GradCheckConfig, GradCheckReport, Graph, NodeId, RunningStats, Sgd, Tensor,
};

use crate::arch::{analyze_shapes, ArchSpec, ShapeTable};
use crate::error::Result;
use crate::network::{batch_tensor, Block, Network};
use crate::phantom::{generate_phantom, stream_rng, PhantomConfig};
use crate::preprocess::{extract_slices, WindowSpec};
use crate::train::{label_tensor, train_step};

/// Maximum relative error accepted by the gradient suite.
pub const GRAD_TOLERANCE: f64 = 1e-4;

/// Seeds the gradient suite runs over.
pub const GRAD_SEEDS: [u64; 3] = [0, 1, 2];

const OVERFIT_LR: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCase {
    pub name: String,
    pub seed: u64,
    pub max_rel_error: f64,
    pub probes: usize,
    pub skipped: usize,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.probes > 0 && self.max_rel_error < GRAD_TOLERANCE
    }
}

/// `sum(projection * y)`: a scalar whose gradient reaches every element of
/// `y` with a generic weight.
fn project(g: &mut Graph, y: NodeId, projection: &Tensor) -> liverseg_tensor::Result<NodeId> {
    let p = g.constant(projection.clone());
    let m = g.mul(y, p)?;
    g.sum(m)
}

fn record(name: &str, seed: u64, r: GradCheckReport) -> GradCase {
    GradCase { name: name.to_string(), seed, max_rel_error: r.max_rel_error, probes: r.probes, skipped: r.skipped }
}

fn cfg(seed: u64) -> GradCheckConfig {
    GradCheckConfig { seed, ..GradCheckConfig::default() }
}

fn conv_case(name: &str, p: ConvParams, x_shape: [usize; 4], seed: u64) -> Result<GradCase> {
    let mut rng = stream_rng(seed, 100);
    let x = Tensor::randn(&x_shape, 1.0, &mut rng);
    let w = Tensor::randn(&p.weight_shape(), 0.5, &mut rng);
    let b = Tensor::randn(&[p.out_channels], 0.5, &mut rng);
    let (oh, ow) = p.output_extent(x_shape[2], x_shape[3])?;
    let proj = Tensor::randn(&[x_shape[0], p.out_channels, oh, ow], 1.0, &mut rng);
    let r = grad_check(
        &[x, w, b],
        |g, ids| {
            let y = g.conv2d(ids[0], ids[1], Some(ids[2]), &p)?;
            project(g, y, &proj)
        },
        &cfg(seed),
    )?;
    Ok(record(name, seed, r))
}

fn op_cases(seed: u64) -> Result<Vec<GradCase>> {
    let mut out = vec![
        conv_case("conv2d 3x3", ConvParams::new(2, 3, 3), [2, 2, 6, 6], seed)?,
        conv_case("conv2d 3x3 stride 2", ConvParams::new(2, 3, 3).with_stride(2), [2, 2, 7, 6], seed)?,
        conv_case("conv2d 3x3 dilation 2", ConvParams::new(2, 3, 3).with_dilation(2), [1, 2, 7, 7], seed)?,
        conv_case("conv2d 3x3 dilation 4", ConvParams::new(2, 2, 3).with_dilation(4), [1, 2, 9, 9], seed)?,
        conv_case("conv2d 3x3 dilation 12", ConvParams::new(2, 2, 3).with_dilation(12), [1, 2, 14, 14], seed)?,
        conv_case("conv2d 1x1", ConvParams::new(3, 2, 1), [2, 3, 4, 5], seed)?,
        conv_case("conv2d 1x1 stride 2", ConvParams::new(3, 2, 1).with_stride(2), [1, 3, 5, 5], seed)?,
    ];
    let mut rng = stream_rng(seed, 200);

    for train in [true, false] {
        let x = Tensor::randn(&[2, 3, 4, 4], 2.0, &mut rng);
        let gamma = Tensor::uniform(&[3], 0.5, 1.5, &mut rng);
        let beta = Tensor::randn(&[3], 1.0, &mut rng);
        let proj = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut rng);
        let mut stats = RunningStats::new(3);
        stats.mean = vec![0.3, -0.2, 0.1];
        stats.var = vec![1.5, 0.7, 2.0];
        let r = grad_check(
            &[x, gamma, beta],
            |g, ids| {
                let mode = if train { BnStats::Train(&mut stats) } else { BnStats::Eval(&stats) };
                let y = g.batch_norm(ids[0], ids[1], ids[2], mode)?;
                project(g, y, &proj)
            },
            &cfg(seed),
        )?;
        out.push(record(if train { "batch_norm train" } else { "batch_norm eval" }, seed, r));
    }

    let data: Vec<f64> = (0..96)
        .map(|_| {
            let m: f64 = rng.random_range(0.1..2.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    let x = Tensor::new(&[2, 3, 4, 4], data)?;
    let proj = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut rng);
    let r = grad_check(
        &[x],
        |g, ids| {
            let y = g.relu(ids[0])?;
            project(g, y, &proj)
        },
        &GradCheckConfig { samples_per_input: 96, ..cfg(seed) },
    )?;
    out.push(record("relu", seed, r));

    let a = Tensor::randn(&[1, 2, 3, 3], 1.0, &mut rng);
    let b = Tensor::randn(&[1, 2, 3, 3], 1.0, &mut rng);
    let proj = Tensor::randn(&[1, 2, 3, 3], 1.0, &mut rng);
    let r = grad_check(
        &[a.clone(), b.clone()],
        |g, ids| {
            let y = g.add(ids[0], ids[1])?;
            project(g, y, &proj)
        },
        &cfg(seed),
    )?;
    out.push(record("add", seed, r));
    let r = grad_check(
        &[a, b],
        |g, ids| {
            let y = g.mul(ids[0], ids[1])?;
            project(g, y, &proj)
        },
        &cfg(seed),
    )?;
    out.push(record("mul", seed, r));

    let x = Tensor::randn(&[1, 2, 5, 4], 1.0, &mut rng);
    let proj = Tensor::randn(&[1, 2, 9, 7], 1.0, &mut rng);
    let r = grad_check(
        &[x],
        |g, ids| {
            let y = g.bilinear_resize(ids[0], 9, 7)?;
            project(g, y, &proj)
        },
        &GradCheckConfig { samples_per_input: 40, ..cfg(seed) },
    )?;
    out.push(record("bilinear_resize", seed, r));

    let logits = Tensor::randn(&[2, 2, 3, 3], 1.5, &mut rng);
    let proj = Tensor::randn(&[2, 2, 3, 3], 1.0, &mut rng);
    let r = grad_check(
        &[logits.clone()],
        |g, ids| {
            let y = g.softmax_channels(ids[0])?;
            project(g, y, &proj)
        },
        &GradCheckConfig { samples_per_input: 36, ..cfg(seed) },
    )?;
    out.push(record("softmax_channels", seed, r));
    let labels = Tensor::new(&[2, 3, 3], (0..18).map(|_| f64::from(rng.random_range(0..2u8))).collect())?;
    let r = grad_check(&[logits], |g, ids| g.cross_entropy(ids[0], &labels), &GradCheckConfig { samples_per_input: 36, ..cfg(seed) })?;
    out.push(record("cross_entropy", seed, r));
    Ok(out)
}

/// Checks one block of a desk-width network in train mode against finite
/// differences of `sum(projection * block(x))`, over the block input and
/// every parameter it owns.
pub fn block_case(net: &mut Network, row: usize, block: usize, extent: usize, seed: u64) -> Result<GradCase> {
    let b: &Block = &net.rows()[row - 1][block];
    let cin = b.in_channels();
    let indices = b.param_indices();
    let mut rng = stream_rng(seed, 300);
    let x = Tensor::randn(&[2, cin, extent, extent], 1.0, &mut rng);
    let mut inputs = vec![x];
    inputs.extend(indices.iter().map(|&i| net.params().params()[i].value.clone()));
    // Perturb gamma and beta away from their 1 / 0 initialization.
    for t in inputs.iter_mut().skip(1) {
        if t.shape().len() == 1 {
            let noise = Tensor::randn(t.shape(), 0.2, &mut rng);
            t.data_mut().iter_mut().zip(noise.data()).for_each(|(v, n)| *v += n);
        }
    }
    let mut out_shape = None;
    {
        let mut g = Graph::inference();
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let y = net.block_forward(&mut g, row, block, &ids[1..], ids[0], true)?;
        out_shape = Some(g.value(y).shape().to_vec()).or(out_shape);
    }
    let proj = Tensor::randn(&out_shape.expect("block output"), 1.0, &mut rng);
    let r = grad_check(
        &inputs,
        |g, ids| {
            let y = net.block_forward(g, row, block, &ids[1..], ids[0], true).map_err(to_tensor_error)?;
            project(g, y, &proj)
        },
        &GradCheckConfig { skip_kink_crossings: true, ..cfg(seed) },
    )?;
    let kind = if net.rows()[row - 1][block].has_projection() { "projection" } else { "identity" };
    Ok(record(&format!("residual block row {row} ({kind} shortcut)"), seed, r))
}

fn to_tensor_error(e: crate::Error) -> liverseg_tensor::TensorError {
    match e {
        crate::Error::Tensor(t) => t,
        other => liverseg_tensor::TensorError::InvalidParams(other.to_string()),
    }
}

/// Every op check plus desk residual blocks with identity, projection and
/// bottleneck structure, over [`GRAD_SEEDS`].
pub fn gradient_suite() -> Result<Vec<GradCase>> {
    let mut out = Vec::new();
    for seed in GRAD_SEEDS {
        out.extend(op_cases(seed)?);
        let mut net = Network::build(&ArchSpec::desk(), seed)?;
        out.push(block_case(&mut net, 3, 0, 8, seed)?);
        out.push(block_case(&mut net, 8, 0, 6, seed)?);
        out.push(block_case(&mut net, 10, 0, 6, seed)?);
    }
    Ok(out)
}

/// The per-row output extents of the full-width schedule at 504x504.
pub fn table1_shapes() -> Result<ShapeTable> {
    analyze_shapes(&ArchSpec::full(), (504, 504))
}

/// The output column of the architecture table: one extent per row.
pub const TABLE1_OUTPUT_COLUMN: [usize; 13] = [504, 252, 252, 126, 126, 63, 63, 63, 63, 63, 63, 63, 63];

/// Measured forward logit extents of a desk network against
/// [`analyze_shapes`], for each input size.
pub fn forward_shapes_agree(spec: &ArchSpec, sizes: &[(usize, usize)], seed: u64) -> Result<Vec<((usize, usize), bool)>> {
    let net = Network::build(spec, seed)?;
    let mut rng = stream_rng(seed, 400);
    sizes
        .iter()
        .map(|&(h, w)| {
            let table = analyze_shapes(spec, (h, w))?;
            let x = Tensor::randn(&[1, spec.input_channels, h, w], 1.0, &mut rng);
            let logits = net.forward(&x)?;
            let last = table.rows.last().expect("rows");
            Ok(((h, w), logits.shape() == [1, last.channels, last.height, last.width]))
        })
        .collect()
}

/// Zeroes the final batch-norm scale and shift of every residual branch
/// and checks that each identity-shortcut block passes its input through
/// bit for bit. Returns the number of blocks checked.
pub fn zeroed_branch_identity(spec: &ArchSpec, extent: usize, seed: u64) -> Result<usize> {
    let mut net = Network::build(spec, seed)?;
    let names: Vec<String> = net
        .rows()
        .iter()
        .enumerate()
        .flat_map(|(r, blocks)| {
            blocks.iter().enumerate().filter_map(move |(k, b)| match b {
                Block::Residual { branch, .. } => Some(format!("row{}.block{}.conv{}.bn", r + 1, k, branch.len() - 1)),
                _ => None,
            })
        })
        .collect();
    for p in net.params_mut().params_mut() {
        if names.iter().any(|n| p.name == format!("{n}.gamma") || p.name == format!("{n}.beta")) {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let mut rng = stream_rng(seed, 500);
    let x = Tensor::randn(&[2, spec.input_channels, extent, extent], 1.0, &mut rng);
    let mut g = Graph::inference();
    let xi = g.constant(x);
    let fwd = net.forward_graph(&mut g, xi, false)?;
    let mut checked = 0;
    for t in &fwd.residuals {
        if net.rows()[t.row - 1][t.block].has_projection() {
            continue;
        }
        if g.value(t.output).data() != g.value(t.input).data() {
            return Err(crate::Error::ShapeMismatch(format!("row {} block {} output differs from its input", t.row, t.block)));
        }
        checked += 1;
    }
    Ok(checked)
}

/// Gradient coverage after one backward pass on random data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GradientFlow {
    pub parameters: usize,
    pub parameters_with_gradient: usize,
    pub elements: usize,
    pub nonzero_elements: usize,
}

impl GradientFlow {
    pub fn nonzero_fraction(&self) -> f64 {
        self.nonzero_elements as f64 / self.elements.max(1) as f64
    }

    /// Every parameter touched and at least 99% of scalars nonzero.
    pub fn healthy(&self) -> bool {
        self.parameters_with_gradient == self.parameters && self.nonzero_fraction() >= 0.99
    }
}

/// One train-mode forward and backward pass with random inputs and labels.
/// `extent` should leave the 1/8 map wider than the largest dilation, or
/// the outer taps of the dilated kernels never touch the input.
pub fn gradient_flow(spec: &ArchSpec, extent: usize, seed: u64) -> Result<GradientFlow> {
    let mut net = Network::build(spec, seed)?;
    let mut rng = stream_rng(seed, 600);
    let x = Tensor::randn(&[2, spec.input_channels, extent, extent], 1.0, &mut rng);
    let s = extent / crate::arch::OUTPUT_STRIDE;
    let labels = Tensor::new(&[2, s, s], (0..2 * s * s).map(|_| f64::from(rng.random_range(0..2u8))).collect())?;
    let mut g = Graph::new();
    let xi = g.constant(x);
    let fwd = net.forward_graph(&mut g, xi, true)?;
    let loss = g.cross_entropy(fwd.logits, &labels)?;
    g.backward(loss)?;
    let store = net.params_mut();
    store.zero_grad();
    store.accumulate(&g)?;
    let mut flow = GradientFlow { parameters: 0, parameters_with_gradient: 0, elements: 0, nonzero_elements: 0 };
    for p in store.params().iter().filter(|p| p.trainable) {
        let nonzero = p.grad.data().iter().filter(|v| **v != 0.0).count();
        flow.parameters += 1;
        flow.parameters_with_gradient += usize::from(nonzero > 0);
        flow.elements += p.grad.numel();
        flow.nonzero_elements += nonzero;
    }
    Ok(flow)
}

/// Loss on one fixed batch while a fresh desk liver net memorizes it.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OverfitRun {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps: usize,
}

impl OverfitRun {
    pub fn reached(&self, target: f64) -> bool {
        self.final_loss < target
    }
}

/// Trains on the four central slices of one phantom, without augmentation,
/// until the batch loss falls below `target` or `max_steps` updates ran.
pub fn overfit_single_batch(seed: u64, max_steps: usize, target: f64) -> Result<OverfitRun> {
    let cfg = PhantomConfig::with_seed(seed);
    let (volume, labels) = generate_phantom(&cfg)?;
    let slices = extract_slices(0, &volume, &labels, &WindowSpec::default())?;
    let mid = slices.len() / 2;
    let batch = &slices[mid - 2..mid + 2];
    let images: Vec<[Array2<f64>; 1]> = batch.iter().map(|s| [s.image.clone()]).collect();
    let x = batch_tensor(&images)?;
    let y = label_tensor(&batch.iter().map(|s| &s.liver).collect::<Vec<_>>())?;

    let mut net = Network::build(&ArchSpec::desk(), seed)?;
    let mut opt = Sgd::new(OVERFIT_LR, 0.9)?;
    let mut run = OverfitRun { initial_loss: f64::NAN, final_loss: f64::NAN, steps: 0 };
    while run.steps < max_steps {
        let loss = train_step(&mut net, &mut opt, &x, &y, OVERFIT_LR)?;
        if run.steps == 0 {
            run.initial_loss = loss;
        }
        run.final_loss = loss;
        if loss < target {
            break;
        }
        run.steps += 1;
    }
    Ok(run)
}
