//! Declarative assembly of the detection network and its comparison and
//! ablation variants, plus parameter accounting, whole-model forward and
//! backward passes, and the checkpoint file format.
//!
//! The base network is two TCN blocks (dilated causal convolution + ReLU,
//! each followed by batch normalization and dropout), one BiLSTM block whose
//! concatenated final states feed a ReLU dense layer, and a single sigmoid
//! output unit. The variants rewire those same blocks; see [`build_model`].

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::activation::relu_fwd;
use crate::layers::dense::DenseGrads;
use crate::layers::{
    batchnorm, conv, dense, dropout, lstm, Activation, BatchNormState, ConvParams, DenseParams,
    LstmParams, Mode,
};
use crate::numcore::{Precision, Rng, Tensor};

/// Closed set of buildable network variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VariantName {
    /// Base model: two TCN blocks, one BiLSTM block, dense head.
    Etlnet,
    /// Three stacked BiLSTM blocks, dense head.
    Bilstm3,
    /// Three stacked TCN blocks, pooled, dense head.
    Tcn3,
    SingleTcn,
    DualTcn,
    /// Base model with the gyroscope channels dropped from the input.
    ReducedFeature,
    /// Three TCN blocks feeding a unidirectional LSTM block.
    LstmReplacement,
    /// Base model with a third TCN block.
    TripleTcnBilstm,
}

impl VariantName {
    pub const ALL: [VariantName; 8] = [
        VariantName::Etlnet,
        VariantName::Bilstm3,
        VariantName::Tcn3,
        VariantName::SingleTcn,
        VariantName::DualTcn,
        VariantName::ReducedFeature,
        VariantName::LstmReplacement,
        VariantName::TripleTcnBilstm,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            VariantName::Etlnet => "etlnet",
            VariantName::Bilstm3 => "bilstm3",
            VariantName::Tcn3 => "tcn3",
            VariantName::SingleTcn => "single_tcn",
            VariantName::DualTcn => "dual_tcn",
            VariantName::ReducedFeature => "reduced_feature",
            VariantName::LstmReplacement => "lstm_replacement",
            VariantName::TripleTcnBilstm => "triple_tcn_bilstm",
        }
    }
}

impl fmt::Display for VariantName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for VariantName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        VariantName::ALL
            .iter()
            .copied()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                Error::Arg(format!(
                    "unknown variant {s:?}; expected one of {}",
                    VariantName::ALL.map(|v| v.as_str()).join(", ")
                ))
            })
    }
}

/// Declarative description of one buildable network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub variant: VariantName,
    /// Input channels per time step. 7 for the full feature set
    /// (accelerometer XYZ, gyroscope XYZ, speed); 4 for the reduced set
    /// without the gyroscope.
    pub in_features: usize,
    /// Window length in samples.
    pub window: usize,
    pub tcn_filters: usize,
    pub kernel: usize,
    /// Dilation of each convolution inside one TCN layer.
    pub dilations: Vec<usize>,
    pub lstm_hidden: usize,
    pub dense_hidden: usize,
    pub dropout_rate: f64,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
}

impl ModelConfig {
    /// Defaults for a variant: 64 filters, kernel 3, hidden 128, dense 64,
    /// dropout 0.3. The reduced-feature variant drops the three gyroscope
    /// channels, all others use the full seven features.
    pub fn for_variant(variant: VariantName) -> ModelConfig {
        ModelConfig {
            variant,
            in_features: if variant == VariantName::ReducedFeature {
                4
            } else {
                7
            },
            window: 300,
            tcn_filters: 64,
            kernel: 3,
            dilations: vec![1],
            lstm_hidden: 128,
            dense_hidden: 64,
            dropout_rate: 0.3,
            bn_momentum: 0.1,
            bn_epsilon: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_features == 0 {
            return Err(Error::Arg("in_features must be >= 1".into()));
        }
        if self.dilations.is_empty() {
            return Err(Error::Arg("dilations must be non-empty".into()));
        }
        let max_dilation = *self.dilations.iter().max().unwrap();
        if self.window < self.kernel * max_dilation {
            return Err(Error::Arg(format!(
                "window {} is shorter than kernel {} x max dilation {}",
                self.window, self.kernel, max_dilation
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Arg(format!(
                "dropout rate {} must lie in [0, 1)",
                self.dropout_rate
            )));
        }
        if self.tcn_filters == 0 || self.kernel == 0 || self.lstm_hidden == 0 || self.dense_hidden == 0
        {
            return Err(Error::Arg("layer extents must be >= 1".into()));
        }
        Ok(())
    }

    /// Flat key=value rendering, one key per line (checkpoint header and
    /// manifest fragment).
    pub fn to_kv(&self) -> String {
        let dils: Vec<String> = self.dilations.iter().map(|d| d.to_string()).collect();
        format!(
            "variant={}\nin_features={}\nwindow={}\ntcn_filters={}\nkernel={}\ndilations={}\nlstm_hidden={}\ndense_hidden={}\ndropout_rate={}\nbn_momentum={}\nbn_epsilon={}\n",
            self.variant,
            self.in_features,
            self.window,
            self.tcn_filters,
            self.kernel,
            dils.join(","),
            self.lstm_hidden,
            self.dense_hidden,
            self.dropout_rate,
            self.bn_momentum,
            self.bn_epsilon
        )
    }

    pub fn from_kv(text: &str) -> Result<ModelConfig> {
        let mut cfg: Option<ModelConfig> = None;
        let mut pairs = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("expected key=value, got {line:?}")))?;
            if k == "variant" {
                cfg = Some(ModelConfig::for_variant(v.parse()?));
            } else {
                pairs.push((k.to_string(), v.to_string()));
            }
        }
        let mut cfg = cfg.ok_or_else(|| Error::Format("missing variant key".into()))?;
        for (k, v) in pairs {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    /// Sets one field by key name; used by the config file / flag machinery.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Format(format!("invalid value {v:?} for {key}")))
        }
        match key {
            "variant" => {
                let v: VariantName = value.parse()?;
                let window = self.window;
                *self = ModelConfig::for_variant(v);
                self.window = window;
            }
            "in_features" => self.in_features = num(key, value)?,
            "window" => self.window = num(key, value)?,
            "tcn_filters" => self.tcn_filters = num(key, value)?,
            "kernel" => self.kernel = num(key, value)?,
            "dilations" => {
                self.dilations = value
                    .split(',')
                    .map(|s| num::<usize>(key, s.trim()))
                    .collect::<Result<_>>()?;
            }
            "lstm_hidden" => self.lstm_hidden = num(key, value)?,
            "dense_hidden" => self.dense_hidden = num(key, value)?,
            "dropout_rate" => self.dropout_rate = num(key, value)?,
            "bn_momentum" => self.bn_momentum = num(key, value)?,
            "bn_epsilon" => self.bn_epsilon = num(key, value)?,
            other => return Err(Error::Format(format!("unknown model key {other:?}"))),
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Layer stack
// ---------------------------------------------------------------------------

// A recurrent node carries eight weight matrices; dropout carries one f64.
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone)]
enum LayerNode {
    /// One TCN layer: a dilated causal convolution (+ReLU) per dilation
    /// entry, with an identity residual around each convolution whose input
    /// and output channel counts match.
    Tcn { convs: Vec<ConvParams> },
    BatchNorm(BatchNormState),
    Dropout { rate: f64 },
    /// LSTM (bwd = None) or BiLSTM block. `return_sequences` keeps the
    /// per-step hidden states for stacking; otherwise the block emits final
    /// states only.
    Recurrent {
        fwd: LstmParams,
        bwd: Option<LstmParams>,
        return_sequences: bool,
    },
    /// Mean over the time axis, `[B, T, C] -> [B, C]`.
    GlobalAvgPool,
    Dense { params: DenseParams, act: Activation },
}

#[derive(Debug)]
struct TcnConvCache {
    conv: conv::ConvCache,
    relu: crate::layers::activation::ReluCache,
    residual: bool,
}

#[derive(Debug)]
enum NodeCache {
    Tcn(Vec<TcnConvCache>),
    BatchNorm(batchnorm::BnCache),
    Dropout(dropout::DropoutCache),
    RecurrentFinal(lstm::BilstmCache),
    RecurrentSeq(lstm::BilstmCache),
    LstmFinal(lstm::LstmCache),
    LstmSeq(lstm::LstmCache),
    GlobalAvgPool { time: usize },
    Dense(dense::DenseCache),
}

/// Whole-model forward intermediates, valid for one `(input, mode)` call.
#[derive(Debug)]
pub struct ModelCache {
    nodes: Vec<NodeCache>,
    mode: Mode,
}

/// An assembled network: an ordered layer stack plus its configuration.
#[derive(Debug, Clone)]
pub struct Model {
    nodes: Vec<LayerNode>,
    config: ModelConfig,
    precision: Precision,
}

/// Builds the layer stack for a configuration. Initialization draws from
/// `rng`, so the same seed reproduces bit-identical parameters.
pub fn build_model(cfg: &ModelConfig, rng: &mut Rng, precision: Precision) -> Result<Model> {
    cfg.validate()?;
    let mut nodes = Vec::new();

    let tcn_block = |nodes: &mut Vec<LayerNode>, in_ch: usize, rng: &mut Rng| -> Result<usize> {
        let mut convs = Vec::new();
        let mut ch = in_ch;
        for &d in &cfg.dilations {
            convs.push(ConvParams::init(ch, cfg.tcn_filters, cfg.kernel, d, rng, precision)?);
            ch = cfg.tcn_filters;
        }
        nodes.push(LayerNode::Tcn { convs });
        nodes.push(LayerNode::BatchNorm(BatchNormState::init(
            cfg.tcn_filters,
            cfg.bn_momentum,
            cfg.bn_epsilon,
            precision,
        )?));
        nodes.push(LayerNode::Dropout {
            rate: cfg.dropout_rate,
        });
        Ok(cfg.tcn_filters)
    };

    let recurrent_block = |nodes: &mut Vec<LayerNode>,
                           in_ch: usize,
                           bidirectional: bool,
                           return_sequences: bool,
                           rng: &mut Rng|
     -> Result<usize> {
        let fwd = LstmParams::init(in_ch, cfg.lstm_hidden, rng, precision)?;
        let bwd = if bidirectional {
            Some(LstmParams::init(in_ch, cfg.lstm_hidden, rng, precision)?)
        } else {
            None
        };
        let out_ch = if bidirectional {
            2 * cfg.lstm_hidden
        } else {
            cfg.lstm_hidden
        };
        nodes.push(LayerNode::Recurrent {
            fwd,
            bwd,
            return_sequences,
        });
        nodes.push(LayerNode::BatchNorm(BatchNormState::init(
            out_ch,
            cfg.bn_momentum,
            cfg.bn_epsilon,
            precision,
        )?));
        nodes.push(LayerNode::Dropout {
            rate: cfg.dropout_rate,
        });
        Ok(out_ch)
    };

    let head = |nodes: &mut Vec<LayerNode>, in_ch: usize, rng: &mut Rng| -> Result<()> {
        nodes.push(LayerNode::Dense {
            params: DenseParams::init(in_ch, cfg.dense_hidden, rng, precision)?,
            act: Activation::Relu,
        });
        nodes.push(LayerNode::Dense {
            params: DenseParams::init(cfg.dense_hidden, 1, rng, precision)?,
            act: Activation::Sigmoid,
        });
        Ok(())
    };

    let in_ch = cfg.in_features;
    match cfg.variant {
        VariantName::Etlnet | VariantName::ReducedFeature => {
            let ch = tcn_block(&mut nodes, in_ch, rng)?;
            let ch = tcn_block(&mut nodes, ch, rng)?;
            let ch = recurrent_block(&mut nodes, ch, true, false, rng)?;
            head(&mut nodes, ch, rng)?;
        }
        VariantName::Bilstm3 => {
            let ch = recurrent_block(&mut nodes, in_ch, true, true, rng)?;
            let ch = recurrent_block(&mut nodes, ch, true, true, rng)?;
            let ch = recurrent_block(&mut nodes, ch, true, false, rng)?;
            head(&mut nodes, ch, rng)?;
        }
        VariantName::Tcn3 => {
            let ch = tcn_block(&mut nodes, in_ch, rng)?;
            let ch = tcn_block(&mut nodes, ch, rng)?;
            let ch = tcn_block(&mut nodes, ch, rng)?;
            nodes.push(LayerNode::GlobalAvgPool);
            head(&mut nodes, ch, rng)?;
        }
        VariantName::SingleTcn => {
            let ch = tcn_block(&mut nodes, in_ch, rng)?;
            nodes.push(LayerNode::GlobalAvgPool);
            head(&mut nodes, ch, rng)?;
        }
        VariantName::DualTcn => {
            let ch = tcn_block(&mut nodes, in_ch, rng)?;
            let ch = tcn_block(&mut nodes, ch, rng)?;
            nodes.push(LayerNode::GlobalAvgPool);
            head(&mut nodes, ch, rng)?;
        }
        VariantName::LstmReplacement => {
            let ch = tcn_block(&mut nodes, in_ch, rng)?;
            let ch = tcn_block(&mut nodes, ch, rng)?;
            let ch = tcn_block(&mut nodes, ch, rng)?;
            let ch = recurrent_block(&mut nodes, ch, false, false, rng)?;
            head(&mut nodes, ch, rng)?;
        }
        VariantName::TripleTcnBilstm => {
            let ch = tcn_block(&mut nodes, in_ch, rng)?;
            let ch = tcn_block(&mut nodes, ch, rng)?;
            let ch = tcn_block(&mut nodes, ch, rng)?;
            let ch = recurrent_block(&mut nodes, ch, true, false, rng)?;
            head(&mut nodes, ch, rng)?;
        }
    }

    Ok(Model {
        nodes,
        config: cfg.clone(),
        precision,
    })
}

/// All eight variants with a one-line description and default configuration.
pub fn variant_catalog() -> Vec<(VariantName, &'static str, ModelConfig)> {
    VariantName::ALL
        .iter()
        .map(|&v| {
            let desc = match v {
                VariantName::Etlnet => "two TCN blocks, BiLSTM block, dense head",
                VariantName::Bilstm3 => "three stacked BiLSTM blocks, dense head",
                VariantName::Tcn3 => "three TCN blocks, time-pooled dense head",
                VariantName::SingleTcn => "one TCN block, time-pooled dense head",
                VariantName::DualTcn => "two TCN blocks, time-pooled dense head",
                VariantName::ReducedFeature => "base wiring on 4 input features (no gyroscope)",
                VariantName::LstmReplacement => "three TCN blocks, unidirectional LSTM block",
                VariantName::TripleTcnBilstm => "three TCN blocks, BiLSTM block",
            };
            (v, desc, ModelConfig::for_variant(v))
        })
        .collect()
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    /// Number of layer instances in the stack.
    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, time, ch) = x.dim3()?;
        if ch != self.config.in_features {
            return Err(Error::Dim(format!(
                "model expects {} input features, got {ch}",
                self.config.in_features
            )));
        }
        if time != self.config.window {
            return Err(Error::Dim(format!(
                "model expects window {}, got {time}",
                self.config.window
            )));
        }
        Ok(())
    }

    /// Forward pass over `[batch, window, in_features]`, producing sigmoid
    /// probabilities `[batch, 1]` and the caches for [`Model::backward`].
    ///
    /// Train mode draws dropout masks from `rng` and updates batch-norm
    /// running statistics; eval mode is deterministic and leaves the model
    /// untouched.
    pub fn forward(&mut self, x: &Tensor, mode: Mode, rng: &mut Rng) -> Result<(Tensor, ModelCache)> {
        self.check_input(x)?;
        let mut cur = x.clone();
        let mut caches = Vec::with_capacity(self.nodes.len());
        for node in &mut self.nodes {
            match node {
                LayerNode::Tcn { convs } => {
                    let mut conv_caches = Vec::with_capacity(convs.len());
                    for p in convs.iter() {
                        let residual = p.in_ch() == p.out_ch();
                        let (z, conv_cache) = conv::forward(&cur, p)?;
                        let (mut y, relu_cache) = relu_fwd(&z)?;
                        if residual {
                            y = y.add(&cur)?;
                        }
                        conv_caches.push(TcnConvCache {
                            conv: conv_cache,
                            relu: relu_cache,
                            residual,
                        });
                        cur = y;
                    }
                    caches.push(NodeCache::Tcn(conv_caches));
                }
                LayerNode::BatchNorm(state) => {
                    let (y, cache) = batchnorm::forward(&cur, state, mode)?;
                    caches.push(NodeCache::BatchNorm(cache));
                    cur = y;
                }
                LayerNode::Dropout { rate } => {
                    let (y, cache) = dropout::forward(&cur, *rate, rng, mode)?;
                    caches.push(NodeCache::Dropout(cache));
                    cur = y;
                }
                LayerNode::Recurrent {
                    fwd,
                    bwd,
                    return_sequences,
                } => match (bwd.as_ref(), *return_sequences) {
                    (Some(bwd), false) => {
                        let (y, cache) = lstm::bilstm_fwd(&cur, fwd, bwd)?;
                        caches.push(NodeCache::RecurrentFinal(cache));
                        cur = y;
                    }
                    (Some(bwd), true) => {
                        let (y, cache) = lstm::bilstm_seq_fwd(&cur, fwd, bwd)?;
                        caches.push(NodeCache::RecurrentSeq(cache));
                        cur = y;
                    }
                    (None, false) => {
                        let (_, last, cache) = lstm::forward(&cur, fwd, false)?;
                        caches.push(NodeCache::LstmFinal(cache));
                        cur = last;
                    }
                    (None, true) => {
                        let (seq, _, cache) = lstm::forward(&cur, fwd, false)?;
                        caches.push(NodeCache::LstmSeq(cache));
                        cur = seq;
                    }
                },
                LayerNode::GlobalAvgPool => {
                    let (y, t) = global_avg_pool(&cur)?;
                    cur = y;
                    caches.push(NodeCache::GlobalAvgPool { time: t });
                }
                LayerNode::Dense { params, act } => {
                    let (y, cache) = dense::forward(&cur, params, *act)?;
                    caches.push(NodeCache::Dense(cache));
                    cur = y;
                }
            }
        }
        Ok((cur, ModelCache { nodes: caches, mode }))
    }

    /// Inference without mutation: eval-mode batch norm, dropout identity.
    /// Safe to call concurrently on a shared model.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut cur = x.clone();
        for node in &self.nodes {
            match node {
                LayerNode::Tcn { convs } => {
                    for p in convs.iter() {
                        let residual = p.in_ch() == p.out_ch();
                        let (z, _) = conv::forward(&cur, p)?;
                        let (mut y, _) = relu_fwd(&z)?;
                        if residual {
                            y = y.add(&cur)?;
                        }
                        cur = y;
                    }
                }
                LayerNode::BatchNorm(state) => {
                    cur = batchnorm_eval(&cur, state)?;
                }
                LayerNode::Dropout { .. } => {}
                LayerNode::Recurrent {
                    fwd,
                    bwd,
                    return_sequences,
                } => match (bwd.as_ref(), *return_sequences) {
                    (Some(bwd), false) => cur = lstm::bilstm_fwd(&cur, fwd, bwd)?.0,
                    (Some(bwd), true) => cur = lstm::bilstm_seq_fwd(&cur, fwd, bwd)?.0,
                    (None, false) => cur = lstm::forward(&cur, fwd, false)?.1,
                    (None, true) => cur = lstm::forward(&cur, fwd, false)?.0,
                },
                LayerNode::GlobalAvgPool => {
                    cur = global_avg_pool(&cur)?.0;
                }
                LayerNode::Dense { params, act } => {
                    cur = dense::forward(&cur, params, *act)?.0;
                }
            }
        }
        Ok(cur)
    }

    /// Backward pass through the whole stack. Returns the loss gradient of
    /// every trainable tensor, aligned with [`Model::trainable`] order.
    pub fn backward(&self, d_output: &Tensor, cache: &ModelCache) -> Result<Vec<Tensor>> {
        if cache.mode != Mode::Train {
            return Err(Error::Contract(
                "model backward requires a train-mode cache".into(),
            ));
        }
        if cache.nodes.len() != self.nodes.len() {
            return Err(Error::Contract(
                "model backward: cache does not match this model".into(),
            ));
        }
        let mut grads_by_node: Vec<Vec<Tensor>> = Vec::new();
        grads_by_node.resize_with(self.nodes.len(), Vec::new);
        let mut dy = d_output.clone();
        for (i, (node, node_cache)) in self.nodes.iter().zip(&cache.nodes).enumerate().rev() {
            match (node, node_cache) {
                (LayerNode::Tcn { convs }, NodeCache::Tcn(conv_caches)) => {
                    let mut local: Vec<Tensor> = Vec::new();
                    for (p, cc) in convs.iter().zip(conv_caches).rev() {
                        let d_relu = crate::layers::activation::relu_bwd(&dy, &cc.relu)?;
                        let g = conv::backward(&d_relu, &cc.conv, p)?;
                        let mut d_in = g.input;
                        if cc.residual {
                            d_in = d_in.add(&dy)?;
                        }
                        local.push(g.bias);
                        local.push(g.weight);
                        dy = d_in;
                    }
                    local.reverse();
                    grads_by_node[i] = local;
                }
                (LayerNode::BatchNorm(state), NodeCache::BatchNorm(bn_cache)) => {
                    let g = batchnorm::backward(&dy, bn_cache, state)?;
                    grads_by_node[i] = vec![g.gamma, g.beta];
                    dy = g.input;
                }
                (LayerNode::Dropout { .. }, NodeCache::Dropout(dc)) => {
                    dy = dropout::backward(&dy, dc)?;
                }
                (
                    LayerNode::Recurrent { fwd, bwd: Some(bwd), .. },
                    NodeCache::RecurrentFinal(bc),
                ) => {
                    let g = lstm::bilstm_bwd(&dy, bc, fwd, bwd)?;
                    grads_by_node[i] = flatten_lstm_grads(&g.fwd)
                        .into_iter()
                        .chain(flatten_lstm_grads(&g.bwd))
                        .collect();
                    dy = g.input;
                }
                (
                    LayerNode::Recurrent { fwd, bwd: Some(bwd), .. },
                    NodeCache::RecurrentSeq(bc),
                ) => {
                    let g = lstm::bilstm_seq_bwd(&dy, bc, fwd, bwd)?;
                    grads_by_node[i] = flatten_lstm_grads(&g.fwd)
                        .into_iter()
                        .chain(flatten_lstm_grads(&g.bwd))
                        .collect();
                    dy = g.input;
                }
                (LayerNode::Recurrent { fwd, bwd: None, .. }, NodeCache::LstmFinal(lc)) => {
                    let g = lstm::backward(None, Some(&dy), lc, fwd)?;
                    grads_by_node[i] = flatten_lstm_grads(&g.params);
                    dy = g.input;
                }
                (LayerNode::Recurrent { fwd, bwd: None, .. }, NodeCache::LstmSeq(lc)) => {
                    let g = lstm::backward(Some(&dy), None, lc, fwd)?;
                    grads_by_node[i] = flatten_lstm_grads(&g.params);
                    dy = g.input;
                }
                (LayerNode::GlobalAvgPool, NodeCache::GlobalAvgPool { time }) => {
                    let (b, c) = dy.dim2()?;
                    let t = *time;
                    let mut out = vec![0.0f64; b * t * c];
                    for bi in 0..b {
                        for ti in 0..t {
                            for ci in 0..c {
                                out[(bi * t + ti) * c + ci] = dy.data()[bi * c + ci] / t as f64;
                            }
                        }
                    }
                    dy = Tensor::from_data(&[b, t, c], out, dy.precision())?;
                }
                (LayerNode::Dense { params, .. }, NodeCache::Dense(dc)) => {
                    let DenseGrads { input, weight, bias } = dense::backward(&dy, dc, params)?;
                    grads_by_node[i] = vec![weight, bias];
                    dy = input;
                }
                _ => {
                    return Err(Error::Contract(
                        "model backward: cache kind does not match layer kind".into(),
                    ))
                }
            }
        }
        Ok(grads_by_node.into_iter().flatten().collect())
    }

    /// Named trainable tensors in a stable order (the order `backward`
    /// returns gradients in).
    pub fn trainable(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match node {
                LayerNode::Tcn { convs } => {
                    for (j, p) in convs.iter().enumerate() {
                        out.push((format!("n{i}.conv{j}.weight"), &p.weight));
                        out.push((format!("n{i}.conv{j}.bias"), &p.bias));
                    }
                }
                LayerNode::BatchNorm(s) => {
                    out.push((format!("n{i}.bn.gamma"), &s.gamma));
                    out.push((format!("n{i}.bn.beta"), &s.beta));
                }
                LayerNode::Dropout { .. } | LayerNode::GlobalAvgPool => {}
                LayerNode::Recurrent { fwd, bwd, .. } => {
                    push_lstm_tensors(&mut out, i, "fwd", fwd);
                    if let Some(bwd) = bwd {
                        push_lstm_tensors(&mut out, i, "bwd", bwd);
                    }
                }
                LayerNode::Dense { params, .. } => {
                    out.push((format!("n{i}.dense.weight"), &params.weight));
                    out.push((format!("n{i}.dense.bias"), &params.bias));
                }
            }
        }
        out
    }

    /// Mutable views of the trainable tensors, same order as `trainable`.
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for node in &mut self.nodes {
            match node {
                LayerNode::Tcn { convs } => {
                    for p in convs {
                        out.push(&mut p.weight);
                        out.push(&mut p.bias);
                    }
                }
                LayerNode::BatchNorm(s) => {
                    out.push(&mut s.gamma);
                    out.push(&mut s.beta);
                }
                LayerNode::Dropout { .. } | LayerNode::GlobalAvgPool => {}
                LayerNode::Recurrent { fwd, bwd, .. } => {
                    push_lstm_tensors_mut(&mut out, fwd);
                    if let Some(bwd) = bwd {
                        push_lstm_tensors_mut(&mut out, bwd);
                    }
                }
                LayerNode::Dense { params, .. } => {
                    out.push(&mut params.weight);
                    out.push(&mut params.bias);
                }
            }
        }
        out
    }

    /// Every tensor in the model (trainable plus batch-norm running
    /// statistics), for checkpointing and total-parameter accounting.
    pub fn all_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.trainable();
        for (i, node) in self.nodes.iter().enumerate() {
            if let LayerNode::BatchNorm(s) = node {
                out.push((format!("n{i}.bn.running_mean"), &s.running_mean));
                out.push((format!("n{i}.bn.running_var"), &s.running_var));
            }
        }
        out
    }

    fn all_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        // Mirrors all_tensors(): trainable first, then running stats.
        let names: Vec<String> = self.all_tensors().iter().map(|(n, _)| n.clone()).collect();
        let mut tensors: Vec<&mut Tensor> = Vec::new();
        let mut running: Vec<&mut Tensor> = Vec::new();
        for node in &mut self.nodes {
            match node {
                LayerNode::Tcn { convs } => {
                    for p in convs {
                        tensors.push(&mut p.weight);
                        tensors.push(&mut p.bias);
                    }
                }
                LayerNode::BatchNorm(s) => {
                    tensors.push(&mut s.gamma);
                    tensors.push(&mut s.beta);
                    running.push(&mut s.running_mean);
                    running.push(&mut s.running_var);
                }
                LayerNode::Dropout { .. } | LayerNode::GlobalAvgPool => {}
                LayerNode::Recurrent { fwd, bwd, .. } => {
                    push_lstm_tensors_mut(&mut tensors, fwd);
                    if let Some(bwd) = bwd {
                        push_lstm_tensors_mut(&mut tensors, bwd);
                    }
                }
                LayerNode::Dense { params, .. } => {
                    tensors.push(&mut params.weight);
                    tensors.push(&mut params.bias);
                }
            }
        }
        tensors.extend(running);
        names.into_iter().zip(tensors).collect()
    }

    /// Closed-form parameter counts `(trainable, total)`: dense is
    /// `in*out + out`, conv `in*out*k + out`, batch norm `2c` trainable and
    /// `4c` total (running statistics included), LSTM
    /// `4*(in*h + h^2 + h)` per direction.
    pub fn count_params(&self) -> (usize, usize) {
        let mut trainable = 0usize;
        let mut total = 0usize;
        for node in &self.nodes {
            match node {
                LayerNode::Tcn { convs } => {
                    for p in convs {
                        let n = p.in_ch() * p.out_ch() * p.kernel + p.out_ch();
                        trainable += n;
                        total += n;
                    }
                }
                LayerNode::BatchNorm(s) => {
                    let c = s.channels();
                    trainable += 2 * c;
                    total += 4 * c;
                }
                LayerNode::Dropout { .. } | LayerNode::GlobalAvgPool => {}
                LayerNode::Recurrent { fwd, bwd, .. } => {
                    let one = |p: &LstmParams| {
                        4 * (p.in_dim() * p.hidden() + p.hidden() * p.hidden() + p.hidden())
                    };
                    let mut n = one(fwd);
                    if let Some(bwd) = bwd {
                        n += one(bwd);
                    }
                    trainable += n;
                    total += n;
                }
                LayerNode::Dense { params, .. } => {
                    let n = params.in_dim() * params.out_dim() + params.out_dim();
                    trainable += n;
                    total += n;
                }
            }
        }
        (trainable, total)
    }

    // -- checkpoint format --------------------------------------------------
    //
    // magic "ETLN", u32 version, u32 config length, config key=value text,
    // u32 tensor count, then per tensor: u32 name length, name bytes,
    // u32 rank, u32 dims..., f32 little-endian data.

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(b"ETLN")?;
        f.write_all(&1u32.to_le_bytes())?;
        let cfg = self.config.to_kv();
        f.write_all(&(cfg.len() as u32).to_le_bytes())?;
        f.write_all(cfg.as_bytes())?;
        let tensors = self.all_tensors();
        f.write_all(&(tensors.len() as u32).to_le_bytes())?;
        for (name, t) in tensors {
            f.write_all(&(name.len() as u32).to_le_bytes())?;
            f.write_all(name.as_bytes())?;
            f.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                f.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in t.data() {
                f.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Model> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic)?;
        if &magic != b"ETLN" {
            return Err(Error::Format(format!(
                "{} is not a model checkpoint (bad magic)",
                path.display()
            )));
        }
        let version = read_u32(&mut f)?;
        if version != 1 {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let cfg_len = read_u32(&mut f)? as usize;
        let mut cfg_bytes = vec![0u8; cfg_len];
        f.read_exact(&mut cfg_bytes)?;
        let cfg_text = String::from_utf8(cfg_bytes)
            .map_err(|_| Error::Format("checkpoint config block is not UTF-8".into()))?;
        let cfg = ModelConfig::from_kv(&cfg_text)?;

        // Checkpoints store 32-bit values, so the reloaded model is
        // standard precision regardless of how it was trained.
        let mut model = build_model(&cfg, &mut Rng::new(0), Precision::Standard)?;
        let count = read_u32(&mut f)? as usize;
        let mut loaded: std::collections::BTreeMap<String, Tensor> =
            std::collections::BTreeMap::new();
        for _ in 0..count {
            let name_len = read_u32(&mut f)? as usize;
            let mut name = vec![0u8; name_len];
            f.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let rank = read_u32(&mut f)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(&mut f)? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            let mut buf = [0u8; 4];
            for _ in 0..n {
                f.read_exact(&mut buf)?;
                data.push(f32::from_le_bytes(buf) as f64);
            }
            loaded.insert(name, Tensor::from_data(&shape, data, Precision::Standard)?);
        }
        for (name, slot) in model.all_tensors_mut() {
            let t = loaded
                .remove(&name)
                .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor {name:?}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Format(format!(
                    "checkpoint tensor {name:?} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        if let Some((name, _)) = loaded.into_iter().next() {
            return Err(Error::Format(format!(
                "checkpoint contains unexpected tensor {name:?}"
            )));
        }
        Ok(model)
    }
}

fn global_avg_pool(x: &Tensor) -> Result<(Tensor, usize)> {
    let (b, t, c) = x.dim3()?;
    let mut out = vec![0.0f64; b * c];
    for bi in 0..b {
        for ti in 0..t {
            for ci in 0..c {
                out[bi * c + ci] += x.data()[(bi * t + ti) * c + ci];
            }
        }
    }
    for v in &mut out {
        *v /= t as f64;
    }
    Ok((Tensor::from_data(&[b, c], out, x.precision())?, t))
}

fn batchnorm_eval(x: &Tensor, state: &BatchNormState) -> Result<Tensor> {
    // Same arithmetic as the layer's eval path without mutable access.
    let mut scratch = state.clone();
    Ok(batchnorm::forward(x, &mut scratch, Mode::Eval)?.0)
}

fn read_u32(f: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    f.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn push_lstm_tensors<'a>(
    out: &mut Vec<(String, &'a Tensor)>,
    node: usize,
    dir: &str,
    p: &'a LstmParams,
) {
    for (gate, gp) in [
        ("i", &p.input_gate),
        ("f", &p.forget_gate),
        ("o", &p.output_gate),
        ("g", &p.cell_gate),
    ] {
        out.push((format!("n{node}.lstm_{dir}.{gate}.w"), &gp.w));
        out.push((format!("n{node}.lstm_{dir}.{gate}.u"), &gp.u));
        out.push((format!("n{node}.lstm_{dir}.{gate}.b"), &gp.b));
    }
}

fn push_lstm_tensors_mut<'a>(out: &mut Vec<&'a mut Tensor>, p: &'a mut LstmParams) {
    for gp in [
        &mut p.input_gate,
        &mut p.forget_gate,
        &mut p.output_gate,
        &mut p.cell_gate,
    ] {
        out.push(&mut gp.w);
        out.push(&mut gp.u);
        out.push(&mut gp.b);
    }
}

fn flatten_lstm_grads(g: &lstm::LstmParamGrads) -> Vec<Tensor> {
    let mut out = Vec::with_capacity(12);
    for gg in [&g.input_gate, &g.forget_gate, &g.output_gate, &g.cell_gate] {
        out.push(gg.w.clone());
        out.push(gg.u.clone());
        out.push(gg.b.clone());
    }
    out
}
