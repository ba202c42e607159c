//! The dilated residual segmentation network.

use ndarray::Array2;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use liverseg_tensor::{BnStats, ConvParams, Graph, NodeId, ParamStore, RunningStats, Tensor};

use crate::arch::{ArchSpec, BlockKind, OUTPUT_STRIDE};
use crate::error::{Error, Result};
use crate::phantom::stream_rng;

/// Standard deviation of the classifier weights at initialization, small
/// enough that the initial class scores are nearly uniform.
pub const CLASSIFIER_INIT_STD: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Class {
    Liver,
    Lesion,
}

impl Class {
    pub const ALL: [Class; 2] = [Class::Liver, Class::Lesion];

    pub fn name(self) -> &'static str {
        match self {
            Class::Liver => "liver",
            Class::Lesion => "lesion",
        }
    }
}

/// Foreground probability per pixel at input resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap {
    pub values: Array2<f64>,
    pub class: Class,
}

impl ProbabilityMap {
    pub fn new(values: Array2<f64>, class: Class) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::ShapeMismatch(format!("probability {v} outside [0, 1]")));
        }
        Ok(Self { values, class })
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct BnLayer {
    gamma: usize,
    beta: usize,
    stats: usize,
}

/// A convolution with its parameter indices.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub params: ConvParams,
    weight: usize,
    bias: Option<usize>,
    bn: Option<BnLayer>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Block {
    Plain(ConvLayer),
    Residual { branch: Vec<ConvLayer>, projection: Option<ConvLayer> },
    Classifier(ConvLayer),
}

impl ConvLayer {
    fn param_indices(&self) -> impl Iterator<Item = usize> + '_ {
        std::iter::once(self.weight).chain(self.bias).chain(self.bn.iter().flat_map(|b| [b.gamma, b.beta]))
    }
}

impl Block {
    fn layers(&self) -> Vec<&ConvLayer> {
        match self {
            Block::Plain(l) | Block::Classifier(l) => vec![l],
            Block::Residual { branch, projection } => branch.iter().chain(projection).collect(),
        }
    }

    /// Indices into the network's [`ParamStore`] of every parameter the
    /// block reads, in ascending order.
    pub fn param_indices(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.layers().into_iter().flat_map(|l| l.param_indices().collect::<Vec<_>>()).collect();
        v.sort_unstable();
        v
    }

    pub fn in_channels(&self) -> usize {
        self.layers()[0].params.in_channels
    }

    pub fn has_projection(&self) -> bool {
        matches!(self, Block::Residual { projection: Some(_), .. })
    }
}

/// Node ids of one residual block recorded during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockTrace {
    /// 1-based schedule row.
    pub row: usize,
    pub block: usize,
    pub input: NodeId,
    pub shortcut: NodeId,
    pub branch: NodeId,
    pub output: NodeId,
}

pub struct Forward {
    pub logits: NodeId,
    pub residuals: Vec<BlockTrace>,
}

enum StatsAccess<'a> {
    Train(&'a mut [RunningStats]),
    Eval(&'a [RunningStats]),
}

impl StatsAccess<'_> {
    fn get(&mut self, index: usize) -> BnStats<'_> {
        match self {
            StatsAccess::Train(s) => BnStats::Train(&mut s[index]),
            StatsAccess::Eval(s) => BnStats::Eval(&s[index]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    spec: ArchSpec,
    params: ParamStore,
    stats: Vec<RunningStats>,
    stat_names: Vec<String>,
    rows: Vec<Vec<Block>>,
}

struct Builder<R> {
    params: ParamStore,
    stats: Vec<RunningStats>,
    stat_names: Vec<String>,
    rng: R,
}

impl<R: rand::Rng> Builder<R> {
    fn weight(&mut self, name: String, p: &ConvParams, std: f64) -> usize {
        let normal = Normal::new(0.0, std).expect("positive std");
        let shape = p.weight_shape();
        let data = (0..shape.iter().product()).map(|_| normal.sample(&mut self.rng)).collect();
        self.params.push(name, Tensor::new(&shape, data).expect("weight shape"))
    }

    /// He-initialized bias-free conv followed by batch norm.
    fn conv_bn(&mut self, prefix: &str, p: ConvParams) -> ConvLayer {
        let [_, cin, kh, kw] = p.weight_shape();
        let std = (2.0 / (cin * kh * kw) as f64).sqrt();
        let weight = self.weight(format!("{prefix}.weight"), &p, std);
        let c = p.out_channels;
        let gamma = self.params.push(format!("{prefix}.bn.gamma"), Tensor::ones(&[c]));
        let beta = self.params.push(format!("{prefix}.bn.beta"), Tensor::zeros(&[c]));
        self.stats.push(RunningStats::new(c));
        self.stat_names.push(format!("{prefix}.bn"));
        ConvLayer { params: p, weight, bias: None, bn: Some(BnLayer { gamma, beta, stats: self.stats.len() - 1 }) }
    }

    fn classifier(&mut self, prefix: &str, p: ConvParams) -> ConvLayer {
        let weight = self.weight(format!("{prefix}.weight"), &p, CLASSIFIER_INIT_STD);
        let bias = self.params.push(format!("{prefix}.bias"), Tensor::zeros(&[p.out_channels]));
        ConvLayer { params: p, weight, bias: Some(bias), bn: None }
    }
}

impl Network {
    /// Instantiates `spec` with weights drawn deterministically from `seed`.
    pub fn build(spec: &ArchSpec, seed: u64) -> Result<Self> {
        let plan = spec.plan()?;
        let mut b = Builder { params: ParamStore::new(), stats: Vec::new(), stat_names: Vec::new(), rng: stream_rng(seed, 0) };
        let mut rows = Vec::with_capacity(plan.len());
        for (r, row) in plan.iter().enumerate() {
            let mut blocks = Vec::with_capacity(row.blocks.len());
            for (k, block) in row.blocks.iter().enumerate() {
                let prefix = format!("row{}.block{}", r + 1, k);
                blocks.push(match &block.kind {
                    BlockKind::Plain => Block::Plain(b.conv_bn(&format!("{prefix}.conv0"), block.convs[0])),
                    BlockKind::Classifier => Block::Classifier(b.classifier(&format!("{prefix}.conv0"), block.convs[0])),
                    BlockKind::Residual { projection } => {
                        let branch =
                            block.convs.iter().enumerate().map(|(i, p)| b.conv_bn(&format!("{prefix}.conv{i}"), *p)).collect();
                        let projection = projection.map(|p| b.conv_bn(&format!("{prefix}.shortcut"), p));
                        Block::Residual { branch, projection }
                    }
                });
            }
            rows.push(blocks);
        }
        Ok(Self { spec: spec.clone(), params: b.params, stats: b.stats, stat_names: b.stat_names, rows })
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn stats(&self) -> &[RunningStats] {
        &self.stats
    }

    pub fn stats_mut(&mut self) -> &mut [RunningStats] {
        &mut self.stats
    }

    /// Names of the batch-norm layers owning each entry of [`Network::stats`].
    pub fn stat_names(&self) -> &[String] {
        &self.stat_names
    }

    pub fn rows(&self) -> &[Vec<Block>] {
        &self.rows
    }

    pub fn input_channels(&self) -> usize {
        self.spec.input_channels
    }

    pub fn param_count(&self) -> usize {
        self.params.trainable_count()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let &[_, c, h, w] = shape else {
            return Err(Error::ShapeMismatch(format!("network input {shape:?} is not 4-d")));
        };
        if c != self.spec.input_channels {
            return Err(Error::ShapeMismatch(format!("input has {c} channels, network expects {}", self.spec.input_channels)));
        }
        if h % OUTPUT_STRIDE != 0 || w % OUTPUT_STRIDE != 0 || h == 0 || w == 0 {
            return Err(Error::NotDivisible(h, w));
        }
        Ok(())
    }

    /// Records the forward pass on `g`. Train mode normalizes with batch
    /// statistics and updates the running averages.
    pub fn forward_graph(&mut self, g: &mut Graph, x: NodeId, train: bool) -> Result<Forward> {
        self.check_input(g.value(x).shape())?;
        let Network { params, stats, rows, .. } = self;
        let access = if train { StatsAccess::Train(stats) } else { StatsAccess::Eval(stats) };
        run(rows, params, access, g, x)
    }

    /// Records block `block` of 1-based schedule row `row` alone, reading
    /// parameter `block.param_indices()[i]` from node `params[i]`.
    pub fn block_forward(
        &mut self,
        g: &mut Graph,
        row: usize,
        block: usize,
        params: &[NodeId],
        x: NodeId,
        train: bool,
    ) -> Result<NodeId> {
        let b = self
            .rows
            .get(row.wrapping_sub(1))
            .and_then(|r| r.get(block))
            .ok_or_else(|| Error::InvalidSpec(format!("no block {block} in row {row}")))?;
        let indices = b.param_indices();
        if indices.len() != params.len() {
            return Err(Error::ShapeMismatch(format!("block reads {} parameters, {} given", indices.len(), params.len())));
        }
        let ids = |i: usize| params[indices.binary_search(&i).expect("parameter of this block")];
        let mut access = if train { StatsAccess::Train(&mut self.stats) } else { StatsAccess::Eval(&self.stats) };
        Ok(apply_block(b, &ids, &mut access, g, x)?.0)
    }

    /// Eval-mode logits `[N, 2, H/8, W/8]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x.shape())?;
        let mut g = Graph::inference();
        let xi = g.constant(x.clone());
        let out = run(&self.rows, &self.params, StatsAccess::Eval(&self.stats), &mut g, xi)?;
        Ok(g.into_value(out.logits))
    }

    /// Eval-mode foreground probabilities at input resolution, one plane
    /// per batch entry.
    pub fn predict_probs(&self, x: &Tensor) -> Result<Vec<Array2<f64>>> {
        let [n, _, h, w] = x.dims4()?;
        let logits = self.forward(x)?;
        let up = liverseg_tensor::bilinear_resize(&logits, h, w)?;
        let probs = liverseg_tensor::softmax_channels(&up)?;
        (0..n)
            .map(|i| Ok(Array2::from_shape_vec((h, w), probs.plane(i, 1).to_vec()).expect("plane extent")))
            .collect()
    }

    pub fn predict_prob(&self, image: &Tensor, class: Class) -> Result<ProbabilityMap> {
        if image.shape().first() != Some(&1) {
            return Err(Error::ShapeMismatch(format!("expected a single image, got {:?}", image.shape())));
        }
        let values = self.predict_probs(image)?.pop().expect("one plane");
        ProbabilityMap::new(values.mapv(|v| v.clamp(0.0, 1.0)), class)
    }
}

fn conv_layer(
    layer: &ConvLayer,
    ids: &impl Fn(usize) -> NodeId,
    stats: &mut StatsAccess<'_>,
    g: &mut Graph,
    x: NodeId,
) -> Result<NodeId> {
    let h = g.conv2d(x, ids(layer.weight), layer.bias.map(ids), &layer.params)?;
    Ok(match layer.bn {
        Some(bn) => g.batch_norm(h, ids(bn.gamma), ids(bn.beta), stats.get(bn.stats))?,
        None => h,
    })
}

/// Records one block; returns its output and, for residual blocks, the
/// `(shortcut, branch)` nodes.
fn apply_block(
    block: &Block,
    ids: &impl Fn(usize) -> NodeId,
    stats: &mut StatsAccess<'_>,
    g: &mut Graph,
    x: NodeId,
) -> Result<(NodeId, Option<(NodeId, NodeId)>)> {
    Ok(match block {
        Block::Plain(layer) => {
            let y = conv_layer(layer, ids, stats, g, x)?;
            (g.relu(y)?, None)
        }
        Block::Classifier(layer) => (conv_layer(layer, ids, stats, g, x)?, None),
        Block::Residual { branch, projection } => {
            let mut f = x;
            for (i, layer) in branch.iter().enumerate() {
                f = conv_layer(layer, ids, stats, g, f)?;
                if i + 1 < branch.len() {
                    f = g.relu(f)?;
                }
            }
            let shortcut = match projection {
                Some(p) => conv_layer(p, ids, stats, g, x)?,
                None => x,
            };
            (g.add(shortcut, f)?, Some((shortcut, f)))
        }
    })
}

fn run(rows: &[Vec<Block>], params: &ParamStore, mut stats: StatsAccess<'_>, g: &mut Graph, x: NodeId) -> Result<Forward> {
    let nodes: Vec<NodeId> = (0..params.len()).map(|i| g.param(params, i)).collect();
    let ids = |i: usize| nodes[i];
    let mut h = x;
    let mut residuals = Vec::new();
    for (r, blocks) in rows.iter().enumerate() {
        for (k, block) in blocks.iter().enumerate() {
            let input = h;
            let (output, parts) = apply_block(block, &ids, &mut stats, g, input)?;
            if let Some((shortcut, branch)) = parts {
                residuals.push(BlockTrace { row: r + 1, block: k, input, shortcut, branch, output });
            }
            h = output;
        }
    }
    Ok(Forward { logits: h, residuals })
}

/// Packs per-sample channel planes into a `[N, C, H, W]` tensor.
pub fn batch_tensor<P: AsRef<[Array2<f64>]>>(samples: &[P]) -> Result<Tensor> {
    let first = samples.first().ok_or_else(|| Error::ShapeMismatch("empty batch".into()))?.as_ref();
    let c = first.len();
    let (h, w) = first.first().ok_or_else(|| Error::ShapeMismatch("sample without channels".into()))?.dim();
    let mut data = Vec::with_capacity(samples.len() * c * h * w);
    for s in samples {
        let s = s.as_ref();
        if s.len() != c {
            return Err(Error::ShapeMismatch(format!("sample with {} channels in a {c}-channel batch", s.len())));
        }
        for plane in s {
            if plane.dim() != (h, w) {
                return Err(Error::ShapeMismatch(format!("plane {:?} in a {h}x{w} batch", plane.dim())));
            }
            data.extend(plane.iter());
        }
    }
    Ok(Tensor::new(&[samples.len(), c, h, w], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::analyze_shapes;

    #[test]
    fn desk_first_conv_has_four_channels_and_classifier_two() {
        let net = Network::build(&ArchSpec::desk(), 0).unwrap();
        let Block::Plain(first) = &net.rows()[0][0] else { panic!("first row is plain") };
        assert_eq!(first.params.out_channels, 4);
        let Block::Classifier(last) = &net.rows()[12][0] else { panic!("last row is the classifier") };
        assert_eq!(last.params.out_channels, 2);
    }

    #[test]
    fn parameter_count_matches_analysis() {
        let spec = ArchSpec::desk();
        let net = Network::build(&spec, 1).unwrap();
        assert_eq!(net.param_count(), analyze_shapes(&spec, (64, 64)).unwrap().total_params);
    }

    #[test]
    fn build_is_deterministic() {
        let spec = ArchSpec::desk();
        assert_eq!(Network::build(&spec, 9).unwrap(), Network::build(&spec, 9).unwrap());
        assert_ne!(Network::build(&spec, 9).unwrap().params(), Network::build(&spec, 10).unwrap().params());
    }

    #[test]
    fn wrong_channel_count_rejected() {
        let net = Network::build(&ArchSpec::desk(), 0).unwrap();
        assert!(matches!(net.forward(&Tensor::zeros(&[1, 3, 16, 16])), Err(Error::ShapeMismatch(_))));
        assert!(matches!(net.forward(&Tensor::zeros(&[1, 1, 12, 16])), Err(Error::NotDivisible(12, 16))));
    }

    #[test]
    fn batch_tensor_layout() {
        let a = Array2::from_elem((2, 2), 1.0);
        let b = Array2::from_elem((2, 2), 2.0);
        let t = batch_tensor(&[vec![a.clone(), b.clone()], vec![b, a]]).unwrap();
        assert_eq!(t.shape(), &[2, 2, 2, 2]);
        assert_eq!(t.plane(0, 1), &[2.0; 4]);
        assert_eq!(t.plane(1, 1), &[1.0; 4]);
    }
}
