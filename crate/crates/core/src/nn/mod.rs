//! Minimal dense feed-forward engine hosting every network in this project:
//! affine / ReLU / sigmoid / batch-norm / dropout / linear bottlenecks,
//! TDNN-style context splicing, an online cross-utterance averaging layer,
//! block skip connections, softmax heads and an optional per-speaker LHUC
//! scaling site. f64 math with parameters kept on the f32 lattice so
//! checkpoints round-trip bit-exactly.

mod checkpoint;
pub mod gradcheck;
mod train;

pub use checkpoint::{
    load_network, load_sections, save_network, save_sections, CheckpointError, Section,
    SectionData,
};
pub use train::{train, Dataset, LossSpec, TrainingConfig};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.99;

/// Snap to the nearest f32; parameters live on this lattice so that f32
/// checkpoint payloads reload to bit-identical forward passes.
#[inline]
pub(crate) fn q32(x: f64) -> f64 {
    x as f32 as f64
}

#[derive(Debug, Error)]
pub enum NnError {
    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimMismatch {
        expected: usize,
        got: usize,
        context: String,
    },
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("training loss became non-finite at epoch {epoch}, batch {batch}")]
    NanLoss { epoch: usize, batch: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("label {label} out of range for head with {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerDesc {
    Affine { out: usize },
    Relu,
    Sigmoid,
    BatchNorm,
    Dropout { p: f64 },
    /// Bias-free linear projection.
    LinearBottleneck { out: usize },
    /// TDNN frame splicing; rows are time-ordered frames of one sequence,
    /// out-of-range offsets clamp to the sequence edges.
    ContextSplice { offsets: Vec<i64> },
    /// Cross-utterance running mean; history (G, N, alpha) is supplied per
    /// forward call and the output broadcasts one vector to every frame.
    OnlineAverage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadSpec {
    pub name: String,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub blocks: Vec<Vec<LayerDesc>>,
    /// (from_block, to_block), 0-based: from's output is added to to's.
    pub skips: Vec<(usize, usize)>,
    pub heads: Vec<HeadSpec>,
    pub seed: u64,
}

impl NetworkSpec {
    /// Width after each block, checking adjacent-layer compatibility.
    pub fn block_widths(&self) -> Result<Vec<usize>, NnError> {
        let mut w = self.input_dim;
        let mut out = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            for layer in block {
                w = match layer {
                    LayerDesc::Affine { out } | LayerDesc::LinearBottleneck { out } => *out,
                    LayerDesc::ContextSplice { offsets } => {
                        if offsets.is_empty() {
                            return Err(NnError::InvalidSpec("empty splice offsets".into()));
                        }
                        w * offsets.len()
                    }
                    LayerDesc::Dropout { p } => {
                        if !(0.0..1.0).contains(p) {
                            return Err(NnError::InvalidSpec(format!("dropout p {p}")));
                        }
                        w
                    }
                    _ => w,
                };
            }
            out.push(w);
        }
        for &(a, b) in &self.skips {
            if a >= b || b >= out.len() {
                return Err(NnError::InvalidSpec(format!("skip {a}->{b} out of order")));
            }
            if out[a] != out[b] {
                return Err(NnError::InvalidSpec(format!(
                    "skip {a}->{b} joins widths {} and {}",
                    out[a], out[b]
                )));
            }
        }
        Ok(out)
    }

    pub fn trunk_width(&self) -> Result<usize, NnError> {
        Ok(*self.block_widths()?.last().unwrap_or(&self.input_dim))
    }
}

#[derive(Debug, Clone)]
pub(crate) enum LayerParams {
    Affine {
        w: Array2<f64>,
        b: Array1<f64>,
    },
    Linear {
        w: Array2<f64>,
    },
    BatchNorm {
        gamma: Array1<f64>,
        beta: Array1<f64>,
        run_mean: Array1<f64>,
        run_var: Array1<f64>,
    },
    None,
}

#[derive(Debug, Clone)]
pub(crate) struct Layer {
    pub(crate) desc: LayerDesc,
    pub(crate) params: LayerParams,
    block: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Head {
    pub(crate) w: Array2<f64>,
    pub(crate) b: Array1<f64>,
}

/// A network instance: immutable during inference, exclusive during training.
#[derive(Debug, Clone)]
pub struct Network {
    pub spec: NetworkSpec,
    layers: Vec<Layer>,
    heads: Vec<Head>,
    dropout_rng: ChaCha8Rng,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// History constants for the online averaging layer during one forward call.
#[derive(Debug, Clone)]
pub struct OnlineAvgCtx {
    pub history: Array1<f64>,
    pub count: f64,
    pub alpha: f64,
}

/// Per-call forward options.
#[derive(Debug, Clone, Default)]
pub struct ForwardOpts<'a> {
    /// Dropout participates only when true (and mode is Train).
    pub dropout_active: bool,
    /// Element-wise 2*sigmoid(v) scaling applied to this block's output.
    pub lhuc: Option<(usize, &'a Array1<f64>)>,
    pub online_avg: Option<&'a OnlineAvgCtx>,
}

pub struct ForwardResult {
    /// Output of the final block.
    pub trunk: Array2<f64>,
    /// Output of every block, in order (hidden taps).
    pub block_outputs: Vec<Array2<f64>>,
    /// Per-head log-probabilities (rows sum to 1 after exp).
    pub head_log_probs: Vec<Array2<f64>>,
    /// Column sum and row count of the online-average layer's input, for
    /// advancing per-speaker history outside the engine.
    pub online_avg_input: Option<(Array1<f64>, usize)>,
}

enum TapeRec {
    Affine { input: Array2<f64> },
    Linear { input: Array2<f64> },
    Relu { mask: Array2<f64> },
    Sigmoid { output: Array2<f64> },
    BnTrain { xhat: Array2<f64>, inv_std: Array1<f64> },
    BnInfer { scale: Array1<f64> },
    Dropout { mask: Option<Array2<f64>> },
    Splice { t_rows: usize, offsets: Vec<i64>, in_width: usize },
    OnlineAverage { denom: f64, t_rows: usize },
}

pub struct Tape {
    recs: Vec<TapeRec>,
    lhuc: Option<(usize, Array2<f64>, Array1<f64>)>, // block, pre-scale acts, v
    head_input: Array2<f64>,
    head_probs: Vec<Array2<f64>>,
}

#[derive(Debug, Clone)]
pub enum LayerGrads {
    Affine { dw: Array2<f64>, db: Array1<f64> },
    Linear { dw: Array2<f64> },
    BatchNorm { dgamma: Array1<f64>, dbeta: Array1<f64> },
    None,
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<LayerGrads>,
    pub heads: Vec<(Array2<f64>, Array1<f64>)>,
    /// Gradient w.r.t. the LHUC parameter vector, when one was attached.
    pub lhuc_v: Option<Array1<f64>>,
}

impl Gradients {
    /// Scale every gradient tensor (loss-weight linearity).
    pub fn scaled(mut self, factor: f64) -> Gradients {
        for lg in &mut self.layers {
            match lg {
                LayerGrads::Affine { dw, db } => {
                    dw.mapv_inplace(|x| x * factor);
                    db.mapv_inplace(|x| x * factor);
                }
                LayerGrads::Linear { dw } => dw.mapv_inplace(|x| x * factor),
                LayerGrads::BatchNorm { dgamma, dbeta } => {
                    dgamma.mapv_inplace(|x| x * factor);
                    dbeta.mapv_inplace(|x| x * factor);
                }
                LayerGrads::None => {}
            }
        }
        for (dw, db) in &mut self.heads {
            dw.mapv_inplace(|x| x * factor);
            db.mapv_inplace(|x| x * factor);
        }
        if let Some(dv) = &mut self.lhuc_v {
            dv.mapv_inplace(|x| x * factor);
        }
        self
    }
}

/// One term of a (possibly multitask) loss.
pub enum LossTerm<'a> {
    /// Cross entropy on a softmax head against integer labels.
    HeadCe {
        head: usize,
        labels: &'a [usize],
        weight: f64,
    },
    /// Mean over rows of the squared L2 distance between the trunk output and
    /// per-row targets.
    TrunkMse {
        target: ArrayView2<'a, f64>,
        weight: f64,
    },
}

#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub total: f64,
    /// Unweighted per-term values, in the order the terms were given.
    pub terms: Vec<f64>,
}

fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

impl Network {
    pub fn new(spec: NetworkSpec) -> Result<Network, NnError> {
        let widths = spec.block_widths()?;
        let trunk_w = *widths.last().unwrap_or(&spec.input_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let draw = |rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng| {
            Array2::from_shape_fn((rows, cols), |_| {
                // Box-Muller on two uniform draws
                let u1: f64 = rng.gen::<f64>().max(1e-12);
                let u2: f64 = rng.gen();
                q32((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * std)
            })
        };

        let mut layers = Vec::new();
        let mut w = spec.input_dim;
        for (bi, block) in spec.blocks.iter().enumerate() {
            for desc in block {
                let params = match desc {
                    LayerDesc::Affine { out } => {
                        let p = LayerParams::Affine {
                            w: draw(w, *out, he_std(w), &mut rng),
                            b: Array1::zeros(*out),
                        };
                        w = *out;
                        p
                    }
                    LayerDesc::LinearBottleneck { out } => {
                        let p = LayerParams::Linear {
                            w: draw(w, *out, (1.0 / w as f64).sqrt(), &mut rng),
                        };
                        w = *out;
                        p
                    }
                    LayerDesc::BatchNorm => LayerParams::BatchNorm {
                        gamma: Array1::ones(w),
                        beta: Array1::zeros(w),
                        run_mean: Array1::zeros(w),
                        run_var: Array1::ones(w),
                    },
                    LayerDesc::ContextSplice { offsets } => {
                        w *= offsets.len();
                        LayerParams::None
                    }
                    _ => LayerParams::None,
                };
                layers.push(Layer { desc: desc.clone(), params, block: bi });
            }
        }
        let heads = spec
            .heads
            .iter()
            .map(|h| Head {
                w: draw(trunk_w, h.classes, (1.0 / trunk_w as f64).sqrt(), &mut rng),
                b: Array1::zeros(h.classes),
            })
            .collect();
        Ok(Network {
            dropout_rng: ChaCha8Rng::seed_from_u64(spec.seed ^ 0xD120_0D12),
            spec,
            layers,
            heads,
        })
    }

    pub fn n_blocks(&self) -> usize {
        self.spec.blocks.len()
    }

    /// Inference forward: running batch-norm stats, no dropout, no tape.
    pub fn forward_infer(
        &self,
        batch: ArrayView2<f64>,
        opts: &ForwardOpts,
    ) -> Result<ForwardResult, NnError> {
        let (res, _) = self.forward_impl(batch, Mode::Infer, opts, None, false, None)?;
        Ok(res)
    }

    /// Inference forward that also records a tape, for adaptation gradients
    /// against a frozen model.
    pub fn forward_infer_taped(
        &self,
        batch: ArrayView2<f64>,
        opts: &ForwardOpts,
    ) -> Result<(ForwardResult, Tape), NnError> {
        let (res, tape) = self.forward_impl(batch, Mode::Infer, opts, None, true, None)?;
        Ok((res, tape.expect("tape requested")))
    }

    /// Training forward: batch statistics, dropout, running stats updated.
    pub fn forward_train(
        &mut self,
        batch: ArrayView2<f64>,
        opts: &ForwardOpts,
    ) -> Result<(ForwardResult, Tape), NnError> {
        let mut rng = self.dropout_rng.clone();
        let mut bn_updates: Vec<(usize, Array1<f64>, Array1<f64>)> = Vec::new();
        let (res, tape) = self.forward_impl(
            batch,
            Mode::Train,
            opts,
            Some(&mut rng),
            true,
            Some(&mut bn_updates),
        )?;
        self.dropout_rng = rng;
        for (idx, mean, var) in bn_updates {
            if let LayerParams::BatchNorm { run_mean, run_var, .. } = &mut self.layers[idx].params
            {
                for i in 0..mean.len() {
                    run_mean[i] = q32(BN_MOMENTUM * run_mean[i] + (1.0 - BN_MOMENTUM) * mean[i]);
                    run_var[i] = q32(BN_MOMENTUM * run_var[i] + (1.0 - BN_MOMENTUM) * var[i]);
                }
            }
        }
        Ok((res, tape.expect("tape requested")))
    }

    fn forward_impl(
        &self,
        batch: ArrayView2<f64>,
        mode: Mode,
        opts: &ForwardOpts,
        mut rng: Option<&mut ChaCha8Rng>,
        want_tape: bool,
        mut bn_updates: Option<&mut Vec<(usize, Array1<f64>, Array1<f64>)>>,
    ) -> Result<(ForwardResult, Option<Tape>), NnError> {
        if batch.ncols() != self.spec.input_dim {
            return Err(NnError::DimMismatch {
                expected: self.spec.input_dim,
                got: batch.ncols(),
                context: "network input".into(),
            });
        }
        if let Some((block, v)) = opts.lhuc {
            let widths = self.spec.block_widths()?;
            if block >= widths.len() || v.len() != widths[block] {
                return Err(NnError::DimMismatch {
                    expected: *widths.get(block).unwrap_or(&0),
                    got: v.len(),
                    context: format!("lhuc vector at block {block}"),
                });
            }
        }

        let mut recs: Vec<TapeRec> = Vec::new();
        let mut lhuc_tape = None;
        let mut online_input = None;
        let mut acts = batch.to_owned();
        let mut block_outputs: Vec<Array2<f64>> = Vec::with_capacity(self.n_blocks());
        let mut layer_idx = 0usize;

        for bi in 0..self.n_blocks() {
            while layer_idx < self.layers.len() && self.layers[layer_idx].block == bi {
                acts = self.layer_forward(
                    layer_idx,
                    acts,
                    mode,
                    opts,
                    &mut rng,
                    want_tape.then_some(&mut recs),
                    &mut online_input,
                    &mut bn_updates,
                )?;
                layer_idx += 1;
            }
            for &(src, dst) in &self.spec.skips {
                if dst == bi {
                    acts = &acts + &block_outputs[src];
                }
            }
            if let Some((block, v)) = opts.lhuc {
                if block == bi {
                    let pre = acts.clone();
                    let scale = v.mapv(lhuc_scale);
                    for mut row in acts.rows_mut() {
                        for (x, s) in row.iter_mut().zip(scale.iter()) {
                            *x *= s;
                        }
                    }
                    if want_tape {
                        lhuc_tape = Some((bi, pre, v.clone()));
                    }
                }
            }
            block_outputs.push(acts.clone());
        }

        let trunk = acts;
        let mut head_log_probs = Vec::with_capacity(self.heads.len());
        let mut head_probs = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let logits = trunk.dot(&head.w) + &head.b;
            let (logp, p) = log_softmax(&logits);
            head_log_probs.push(logp);
            head_probs.push(p);
        }

        let tape = want_tape.then(|| Tape {
            recs,
            lhuc: lhuc_tape,
            head_input: trunk.clone(),
            head_probs,
        });
        Ok((
            ForwardResult {
                trunk,
                block_outputs,
                head_log_probs,
                online_avg_input: online_input,
            },
            tape,
        ))
    }

    #[allow(clippy::too_many_arguments)]
    fn layer_forward(
        &self,
        layer_idx: usize,
        input: Array2<f64>,
        mode: Mode,
        opts: &ForwardOpts,
        rng: &mut Option<&mut ChaCha8Rng>,
        mut recs: Option<&mut Vec<TapeRec>>,
        online_input: &mut Option<(Array1<f64>, usize)>,
        bn_updates: &mut Option<&mut Vec<(usize, Array1<f64>, Array1<f64>)>>,
    ) -> Result<Array2<f64>, NnError> {
        let layer = &self.layers[layer_idx];
        let out = match (&layer.desc, &layer.params) {
            (LayerDesc::Affine { .. }, LayerParams::Affine { w, b }) => {
                let y = input.dot(w) + b;
                if let Some(r) = recs.as_deref_mut() {
                    r.push(TapeRec::Affine { input });
                }
                y
            }
            (LayerDesc::LinearBottleneck { .. }, LayerParams::Linear { w }) => {
                let y = input.dot(w);
                if let Some(r) = recs.as_deref_mut() {
                    r.push(TapeRec::Linear { input });
                }
                y
            }
            (LayerDesc::Relu, _) => {
                let y = input.mapv(|x| x.max(0.0));
                if let Some(r) = recs.as_deref_mut() {
                    r.push(TapeRec::Relu {
                        mask: y.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 }),
                    });
                }
                y
            }
            (LayerDesc::Sigmoid, _) => {
                let y = input.mapv(sigmoid);
                if let Some(r) = recs.as_deref_mut() {
                    r.push(TapeRec::Sigmoid { output: y.clone() });
                }
                y
            }
            (LayerDesc::BatchNorm, LayerParams::BatchNorm { gamma, beta, run_mean, run_var }) => {
                match mode {
                    Mode::Train => {
                        let n = input.nrows() as f64;
                        let mean = input.sum_axis(Axis(0)) / n;
                        let centered = &input - &mean;
                        let var = centered.mapv(|x| x * x).sum_axis(Axis(0)) / n;
                        let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
                        let xhat = &centered * &inv_std;
                        let y = &xhat * gamma + beta;
                        if let Some(upd) = bn_updates.as_deref_mut() {
                            upd.push((layer_idx, mean, var));
                        }
                        if let Some(r) = recs.as_deref_mut() {
                            r.push(TapeRec::BnTrain { xhat, inv_std });
                        }
                        y
                    }
                    Mode::Infer => {
                        let scale = Array1::from_shape_fn(gamma.len(), |i| {
                            gamma[i] / (run_var[i] + BN_EPS).sqrt()
                        });
                        let shift = Array1::from_shape_fn(gamma.len(), |i| {
                            beta[i] - run_mean[i] * scale[i]
                        });
                        let y = &input * &scale + &shift;
                        if let Some(r) = recs.as_deref_mut() {
                            r.push(TapeRec::BnInfer { scale });
                        }
                        y
                    }
                }
            }
            (LayerDesc::Dropout { p }, _) => {
                let active = mode == Mode::Train && opts.dropout_active && *p > 0.0;
                if active {
                    let rng = rng
                        .as_deref_mut()
                        .expect("train forward supplies a dropout rng");
                    let keep = 1.0 - p;
                    let mask = Array2::from_shape_fn(input.dim(), |_| {
                        if rng.gen::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    });
                    let y = &input * &mask;
                    if let Some(r) = recs.as_deref_mut() {
                        r.push(TapeRec::Dropout { mask: Some(mask) });
                    }
                    y
                } else {
                    if let Some(r) = recs.as_deref_mut() {
                        r.push(TapeRec::Dropout { mask: None });
                    }
                    input
                }
            }
            (LayerDesc::ContextSplice { offsets }, _) => {
                let t_rows = input.nrows();
                let in_width = input.ncols();
                let mut y = Array2::zeros((t_rows, in_width * offsets.len()));
                for t in 0..t_rows {
                    for (k, &o) in offsets.iter().enumerate() {
                        let src = (t as i64 + o).clamp(0, t_rows as i64 - 1) as usize;
                        for c in 0..in_width {
                            y[[t, k * in_width + c]] = input[[src, c]];
                        }
                    }
                }
                if let Some(r) = recs.as_deref_mut() {
                    r.push(TapeRec::Splice {
                        t_rows,
                        offsets: offsets.clone(),
                        in_width,
                    });
                }
                y
            }
            (LayerDesc::OnlineAverage, _) => {
                let ctx = opts.online_avg.ok_or_else(|| {
                    NnError::InvalidSpec("online averaging layer requires history context".into())
                })?;
                if ctx.history.len() != input.ncols() {
                    return Err(NnError::DimMismatch {
                        expected: input.ncols(),
                        got: ctx.history.len(),
                        context: "online average history".into(),
                    });
                }
                let t_rows = input.nrows();
                let sum = input.sum_axis(Axis(0));
                let denom = t_rows as f64 + ctx.alpha * ctx.count;
                let m = (&sum + &ctx.history.mapv(|g| g * ctx.alpha)) / denom;
                *online_input = Some((sum, t_rows));
                let mut y = Array2::zeros(input.dim());
                for mut row in y.rows_mut() {
                    row.assign(&m);
                }
                if let Some(r) = recs.as_deref_mut() {
                    r.push(TapeRec::OnlineAverage { denom, t_rows });
                }
                y
            }
            (desc, _) => {
                return Err(NnError::InvalidSpec(format!(
                    "layer/params mismatch at {desc:?}"
                )))
            }
        };
        Ok(out)
    }

    /// Backward pass over a tape. `d_trunk` is the gradient w.r.t. the trunk
    /// output, `head_dz` the per-head gradients w.r.t. logits (None = no loss
    /// reached that head).
    pub fn backward(
        &self,
        tape: &Tape,
        mut d_trunk: Array2<f64>,
        head_dz: Vec<Option<Array2<f64>>>,
    ) -> Gradients {
        let mut head_grads = Vec::with_capacity(self.heads.len());
        for (h, dz) in self.heads.iter().zip(head_dz.into_iter()) {
            match dz {
                Some(dz) => {
                    let dw = tape.head_input.t().dot(&dz);
                    let db = dz.sum_axis(Axis(0));
                    d_trunk = d_trunk + dz.dot(&h.w.t());
                    head_grads.push((dw, db));
                }
                None => {
                    head_grads.push((Array2::zeros(h.w.dim()), Array1::zeros(h.b.len())))
                }
            }
        }

        let mut layer_grads: Vec<LayerGrads> = self
            .layers
            .iter()
            .map(|l| match &l.params {
                LayerParams::Affine { w, b } => LayerGrads::Affine {
                    dw: Array2::zeros(w.dim()),
                    db: Array1::zeros(b.len()),
                },
                LayerParams::Linear { w } => LayerGrads::Linear { dw: Array2::zeros(w.dim()) },
                LayerParams::BatchNorm { gamma, .. } => LayerGrads::BatchNorm {
                    dgamma: Array1::zeros(gamma.len()),
                    dbeta: Array1::zeros(gamma.len()),
                },
                LayerParams::None => LayerGrads::None,
            })
            .collect();

        let n_blocks = self.n_blocks();
        let mut skip_grad: Vec<Option<Array2<f64>>> = vec![None; n_blocks];
        let mut lhuc_dv: Option<Array1<f64>> = None;
        let mut g = d_trunk;
        let mut rec_idx = tape.recs.len();

        for bi in (0..n_blocks).rev() {
            if let Some(extra) = skip_grad[bi].take() {
                g = g + extra;
            }
            // LHUC sits after this block's skip additions
            if let Some((lb, pre, v)) = &tape.lhuc {
                if *lb == bi {
                    let scale = v.mapv(lhuc_scale);
                    let mut dv = Array1::zeros(v.len());
                    for (grow, prow) in g.rows().into_iter().zip(pre.rows()) {
                        for j in 0..v.len() {
                            dv[j] += grow[j] * prow[j];
                        }
                    }
                    for j in 0..v.len() {
                        let s = sigmoid(v[j]);
                        dv[j] *= 2.0 * s * (1.0 - s);
                    }
                    lhuc_dv = Some(dv);
                    g = &g * &scale;
                }
            }
            for &(src, dst) in &self.spec.skips {
                if dst == bi {
                    let acc = skip_grad[src].get_or_insert_with(|| Array2::zeros(g.dim()));
                    *acc = &*acc + &g;
                }
            }
            let first = match self.layers.iter().position(|l| l.block == bi) {
                Some(f) => f,
                None => continue,
            };
            let last = first
                + self.layers[first..]
                    .iter()
                    .take_while(|l| l.block == bi)
                    .count();
            for li in (first..last).rev() {
                rec_idx -= 1;
                g = self.layer_backward(li, &tape.recs[rec_idx], g, &mut layer_grads);
            }
        }

        Gradients {
            layers: layer_grads,
            heads: head_grads,
            lhuc_v: lhuc_dv,
        }
    }

    fn layer_backward(
        &self,
        li: usize,
        rec: &TapeRec,
        g: Array2<f64>,
        grads: &mut [LayerGrads],
    ) -> Array2<f64> {
        match (rec, &self.layers[li].params) {
            (TapeRec::Affine { input }, LayerParams::Affine { w, .. }) => {
                if let LayerGrads::Affine { dw, db } = &mut grads[li] {
                    *dw = &*dw + &input.t().dot(&g);
                    *db = &*db + &g.sum_axis(Axis(0));
                }
                g.dot(&w.t())
            }
            (TapeRec::Linear { input }, LayerParams::Linear { w }) => {
                if let LayerGrads::Linear { dw } = &mut grads[li] {
                    *dw = &*dw + &input.t().dot(&g);
                }
                g.dot(&w.t())
            }
            (TapeRec::Relu { mask }, _) => g * mask,
            (TapeRec::Sigmoid { output }, _) => {
                let d = output.mapv(|y| y * (1.0 - y));
                g * &d
            }
            (TapeRec::BnTrain { xhat, inv_std }, LayerParams::BatchNorm { gamma, .. }) => {
                let n = g.nrows() as f64;
                if let LayerGrads::BatchNorm { dgamma, dbeta } = &mut grads[li] {
                    *dgamma = &*dgamma + &(&g * xhat).sum_axis(Axis(0));
                    *dbeta = &*dbeta + &g.sum_axis(Axis(0));
                }
                let dxhat = &g * gamma;
                let mean_dxhat = dxhat.sum_axis(Axis(0)) / n;
                let mean_dxhat_xhat = (&dxhat * xhat).sum_axis(Axis(0)) / n;
                let mut dx = dxhat;
                for (mut row, xrow) in dx.rows_mut().into_iter().zip(xhat.rows()) {
                    for j in 0..row.len() {
                        row[j] =
                            (row[j] - mean_dxhat[j] - xrow[j] * mean_dxhat_xhat[j]) * inv_std[j];
                    }
                }
                dx
            }
            (TapeRec::BnInfer { scale }, _) => g * scale,
            (TapeRec::Dropout { mask }, _) => match mask {
                Some(m) => g * m,
                None => g,
            },
            (TapeRec::Splice { t_rows, offsets, in_width }, _) => {
                let mut dx = Array2::zeros((*t_rows, *in_width));
                for t in 0..*t_rows {
                    for (k, &o) in offsets.iter().enumerate() {
                        let src = (t as i64 + o).clamp(0, *t_rows as i64 - 1) as usize;
                        for c in 0..*in_width {
                            dx[[src, c]] += g[[t, k * in_width + c]];
                        }
                    }
                }
                dx
            }
            (TapeRec::OnlineAverage { denom, t_rows }, _) => {
                let col = g.sum_axis(Axis(0)) / *denom;
                let mut dx = Array2::zeros((*t_rows, col.len()));
                for mut row in dx.rows_mut() {
                    row.assign(&col);
                }
                dx
            }
            _ => unreachable!("tape/params desync"),
        }
    }

    /// Evaluate loss terms against a forward result; returns the breakdown
    /// plus the gradients needed to start backward.
    pub fn losses(
        &self,
        result: &ForwardResult,
        tape: &Tape,
        terms: &[LossTerm],
    ) -> Result<(LossBreakdown, Array2<f64>, Vec<Option<Array2<f64>>>), NnError> {
        let n = result.trunk.nrows() as f64;
        let mut d_trunk = Array2::zeros(result.trunk.dim());
        let mut head_dz: Vec<Option<Array2<f64>>> = vec![None; self.heads.len()];
        let mut breakdown = Vec::with_capacity(terms.len());
        let mut total = 0.0;
        for term in terms {
            match term {
                LossTerm::HeadCe { head, labels, weight } => {
                    let logp = &result.head_log_probs[*head];
                    let classes = logp.ncols();
                    if labels.len() != logp.nrows() {
                        return Err(NnError::DimMismatch {
                            expected: logp.nrows(),
                            got: labels.len(),
                            context: format!("labels for head {head}"),
                        });
                    }
                    let mut ce = 0.0;
                    for (i, &y) in labels.iter().enumerate() {
                        if y >= classes {
                            return Err(NnError::LabelOutOfRange { label: y, classes });
                        }
                        ce -= logp[[i, y]];
                    }
                    ce /= n;
                    let probs = &tape.head_probs[*head];
                    let mut dz = probs.clone();
                    for (i, &y) in labels.iter().enumerate() {
                        dz[[i, y]] -= 1.0;
                    }
                    dz.mapv_inplace(|x| x * weight / n);
                    let slot = head_dz[*head].get_or_insert_with(|| Array2::zeros(dz.dim()));
                    *slot = &*slot + &dz;
                    total += weight * ce;
                    breakdown.push(ce);
                }
                LossTerm::TrunkMse { target, weight } => {
                    if target.dim() != result.trunk.dim() {
                        return Err(NnError::DimMismatch {
                            expected: result.trunk.ncols(),
                            got: target.ncols(),
                            context: "trunk mse target".into(),
                        });
                    }
                    let diff = &result.trunk - target;
                    let mse = diff.mapv(|x| x * x).sum() / n;
                    d_trunk = d_trunk + diff.mapv(|x| 2.0 * x * weight / n);
                    total += weight * mse;
                    breakdown.push(mse);
                }
            }
        }
        Ok((LossBreakdown { total, terms: breakdown }, d_trunk, head_dz))
    }

    /// SGD step with momentum; parameters land back on the f32 lattice.
    pub fn apply_gradients(
        &mut self,
        grads: &Gradients,
        velocity: &mut Velocity,
        lr: f64,
        momentum: f64,
    ) {
        for (li, lg) in grads.layers.iter().enumerate() {
            match (lg, &mut self.layers[li].params, &mut velocity.layers[li]) {
                (
                    LayerGrads::Affine { dw, db },
                    LayerParams::Affine { w, b },
                    VelocitySlot::Affine { vw, vb },
                ) => {
                    update2(w, vw, dw, lr, momentum);
                    update1(b, vb, db, lr, momentum);
                }
                (
                    LayerGrads::Linear { dw },
                    LayerParams::Linear { w },
                    VelocitySlot::Linear { vw },
                ) => update2(w, vw, dw, lr, momentum),
                (
                    LayerGrads::BatchNorm { dgamma, dbeta },
                    LayerParams::BatchNorm { gamma, beta, .. },
                    VelocitySlot::BatchNorm { vgamma, vbeta },
                ) => {
                    update1(gamma, vgamma, dgamma, lr, momentum);
                    update1(beta, vbeta, dbeta, lr, momentum);
                }
                (LayerGrads::None, _, _) => {}
                _ => unreachable!("gradient/param desync"),
            }
        }
        for (hi, (dw, db)) in grads.heads.iter().enumerate() {
            let h = &mut self.heads[hi];
            let (vw, vb) = &mut velocity.heads[hi];
            update2(&mut h.w, vw, dw, lr, momentum);
            update1(&mut h.b, vb, db, lr, momentum);
        }
    }

    pub fn velocity(&self) -> Velocity {
        Velocity {
            layers: self
                .layers
                .iter()
                .map(|l| match &l.params {
                    LayerParams::Affine { w, b } => VelocitySlot::Affine {
                        vw: Array2::zeros(w.dim()),
                        vb: Array1::zeros(b.len()),
                    },
                    LayerParams::Linear { w } => {
                        VelocitySlot::Linear { vw: Array2::zeros(w.dim()) }
                    }
                    LayerParams::BatchNorm { gamma, .. } => VelocitySlot::BatchNorm {
                        vgamma: Array1::zeros(gamma.len()),
                        vbeta: Array1::zeros(gamma.len()),
                    },
                    LayerParams::None => VelocitySlot::None,
                })
                .collect(),
            heads: self
                .heads
                .iter()
                .map(|h| (Array2::zeros(h.w.dim()), Array1::zeros(h.b.len())))
                .collect(),
        }
    }

    /// Stable digest of all parameter tensors (frozen-model checks).
    pub fn param_checksum(&self) -> u64 {
        let mut acc: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |x: f64| {
            acc ^= x.to_bits();
            acc = acc.wrapping_mul(0x100_0000_01b3);
        };
        for l in &self.layers {
            match &l.params {
                LayerParams::Affine { w, b } => {
                    w.iter().for_each(|&x| mix(x));
                    b.iter().for_each(|&x| mix(x));
                }
                LayerParams::Linear { w } => w.iter().for_each(|&x| mix(x)),
                LayerParams::BatchNorm { gamma, beta, run_mean, run_var } => {
                    gamma.iter().for_each(|&x| mix(x));
                    beta.iter().for_each(|&x| mix(x));
                    run_mean.iter().for_each(|&x| mix(x));
                    run_var.iter().for_each(|&x| mix(x));
                }
                LayerParams::None => {}
            }
        }
        for h in &self.heads {
            h.w.iter().for_each(|&x| mix(x));
            h.b.iter().for_each(|&x| mix(x));
        }
        acc
    }

    pub(crate) fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub(crate) fn heads_raw(&self) -> &[Head] {
        &self.heads
    }

    pub(crate) fn heads_raw_mut(&mut self) -> &mut [Head] {
        &mut self.heads
    }

    pub(crate) fn set_dropout_rng(&mut self, rng: ChaCha8Rng) {
        self.dropout_rng = rng;
    }

    /// All trainable parameters flattened in a fixed order (batch-norm
    /// running statistics excluded). Pairs with [`Network::set_params_flat`]
    /// and [`Network::grads_flat`] for finite-difference validation.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            match &l.params {
                LayerParams::Affine { w, b } => {
                    out.extend(w.iter());
                    out.extend(b.iter());
                }
                LayerParams::Linear { w } => out.extend(w.iter()),
                LayerParams::BatchNorm { gamma, beta, .. } => {
                    out.extend(gamma.iter());
                    out.extend(beta.iter());
                }
                LayerParams::None => {}
            }
        }
        for h in &self.heads {
            out.extend(h.w.iter());
            out.extend(h.b.iter());
        }
        out
    }

    pub fn set_params_flat(&mut self, vals: &[f64]) {
        let mut it = vals.iter();
        let fill2 = |a: &mut Array2<f64>, it: &mut std::slice::Iter<f64>| {
            for x in a.iter_mut() {
                *x = *it.next().expect("params_flat length");
            }
        };
        let fill1 = |a: &mut Array1<f64>, it: &mut std::slice::Iter<f64>| {
            for x in a.iter_mut() {
                *x = *it.next().expect("params_flat length");
            }
        };
        for l in &mut self.layers {
            match &mut l.params {
                LayerParams::Affine { w, b } => {
                    fill2(w, &mut it);
                    fill1(b, &mut it);
                }
                LayerParams::Linear { w } => fill2(w, &mut it),
                LayerParams::BatchNorm { gamma, beta, .. } => {
                    fill1(gamma, &mut it);
                    fill1(beta, &mut it);
                }
                LayerParams::None => {}
            }
        }
        for h in &mut self.heads {
            fill2(&mut h.w, &mut it);
            fill1(&mut h.b, &mut it);
        }
        assert!(it.next().is_none(), "params_flat length");
    }

    /// Gradients flattened in [`Network::params_flat`] order.
    pub fn grads_flat(&self, grads: &Gradients) -> Vec<f64> {
        let mut out = Vec::new();
        for lg in &grads.layers {
            match lg {
                LayerGrads::Affine { dw, db } => {
                    out.extend(dw.iter());
                    out.extend(db.iter());
                }
                LayerGrads::Linear { dw } => out.extend(dw.iter()),
                LayerGrads::BatchNorm { dgamma, dbeta } => {
                    out.extend(dgamma.iter());
                    out.extend(dbeta.iter());
                }
                LayerGrads::None => {}
            }
        }
        for (dw, db) in &grads.heads {
            out.extend(dw.iter());
            out.extend(db.iter());
        }
        out
    }
}

#[derive(Debug, Clone)]
pub enum VelocitySlot {
    Affine { vw: Array2<f64>, vb: Array1<f64> },
    Linear { vw: Array2<f64> },
    BatchNorm { vgamma: Array1<f64>, vbeta: Array1<f64> },
    None,
}

#[derive(Debug, Clone)]
pub struct Velocity {
    layers: Vec<VelocitySlot>,
    heads: Vec<(Array2<f64>, Array1<f64>)>,
}

fn update2(w: &mut Array2<f64>, v: &mut Array2<f64>, g: &Array2<f64>, lr: f64, momentum: f64) {
    for ((w, v), g) in w.iter_mut().zip(v.iter_mut()).zip(g.iter()) {
        *v = momentum * *v - lr * g;
        *w = q32(*w + *v);
    }
}

fn update1(w: &mut Array1<f64>, v: &mut Array1<f64>, g: &Array1<f64>, lr: f64, momentum: f64) {
    for ((w, v), g) in w.iter_mut().zip(v.iter_mut()).zip(g.iter()) {
        *v = momentum * *v - lr * g;
        *w = q32(*w + *v);
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// LHUC amplitude: 2 * sigmoid(v), in (0, 2), exactly 1 at v = 0.
#[inline]
pub fn lhuc_scale(v: f64) -> f64 {
    if v == 0.0 {
        1.0
    } else {
        2.0 * sigmoid(v)
    }
}

/// Row-wise log-softmax plus probabilities, stable for large logits.
fn log_softmax(logits: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let mut logp = logits.clone();
    for mut row in logp.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
        row.mapv_inplace(|x| x - lse);
    }
    let p = logp.mapv(f64::exp);
    (logp, p)
}
