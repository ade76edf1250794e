//! Dual-sigmoid alignment objective on toy linear encoders.
//!
//! For query embeddings `Q` and target embeddings `X` (text or image) of a
//! batch of `b` triplets, with `z_ij = <q_i, x_j>`:
//!
//! ```text
//! L = (1/b) * sum_ij softplus(gamma_ij * (-tau * z_ij + eta))
//! ```
//!
//! where `gamma_ij` is +1 on the diagonal and -1 elsewhere. The combined
//! objective is `lambda * L_text + (1 - lambda) * L_image`. Only the text
//! encoder, `tau` and `eta` are trained; query and image encoders stay
//! frozen.

use std::io::{self, BufRead, Write};

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::rank_top_k;

pub const DEFAULT_LAMBDA: f64 = 0.5;
pub const INIT_TAU: f64 = 10.0;
pub const INIT_ETA: f64 = -10.0;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("embedding dimensions differ ({0} vs {1})")]
    DimMismatch(usize, usize),
    #[error("batch sizes differ ({0} vs {1})")]
    BatchMismatch(usize, usize),
    #[error("empty batch")]
    EmptyBatch,
    #[error("need at least 2 triplets, got {0}")]
    TooFewTriplets(usize),
    #[error("triplet line {0}: malformed")]
    MalformedLine(usize),
    #[error("triplet line {line}: field `{field}` has dimension {got}, expected {expected}")]
    FieldDimMismatch {
        line: usize,
        field: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("lambda = {0} is outside [0, 1]")]
    LambdaOutOfRange(f64),
    #[error("{0} must be positive and finite")]
    NotPositive(&'static str),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// +1 for the matched (diagonal) pair, -1 for every in-batch negative.
#[inline]
pub fn pair_indicator(i: usize, j: usize) -> f64 {
    if i == j {
        1.0
    } else {
        -1.0
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn logistic(x: f64) -> f64 {
    crate::fusion::sigmoid(x)
}

fn check_pair(queries: ArrayView2<f64>, targets: ArrayView2<f64>) -> Result<(), TrainError> {
    if queries.ncols() != targets.ncols() {
        return Err(TrainError::DimMismatch(queries.ncols(), targets.ncols()));
    }
    if queries.nrows() != targets.nrows() {
        return Err(TrainError::BatchMismatch(queries.nrows(), targets.nrows()));
    }
    if queries.nrows() == 0 {
        return Err(TrainError::EmptyBatch);
    }
    Ok(())
}

/// Pairwise sigmoid loss between row-aligned query and target embeddings.
/// Serves as both the query-text and the query-image term.
pub fn dsa_loss(
    queries: ArrayView2<f64>,
    targets: ArrayView2<f64>,
    tau: f64,
    eta: f64,
) -> Result<f64, TrainError> {
    Ok(dsa_loss_with_grad(queries, targets, tau, eta)?.loss)
}

pub fn dsa_loss_text(
    queries: ArrayView2<f64>,
    texts: ArrayView2<f64>,
    tau: f64,
    eta: f64,
) -> Result<f64, TrainError> {
    dsa_loss(queries, texts, tau, eta)
}

pub fn dsa_loss_image(
    queries: ArrayView2<f64>,
    images: ArrayView2<f64>,
    tau: f64,
    eta: f64,
) -> Result<f64, TrainError> {
    dsa_loss(queries, images, tau, eta)
}

struct PairLoss {
    loss: f64,
    /// dL/dz, b x b.
    grad_z: Array2<f64>,
    grad_tau: f64,
    grad_eta: f64,
}

fn dsa_loss_with_grad(
    queries: ArrayView2<f64>,
    targets: ArrayView2<f64>,
    tau: f64,
    eta: f64,
) -> Result<PairLoss, TrainError> {
    check_pair(queries, targets)?;
    let b = queries.nrows();
    let inv_b = 1.0 / b as f64;
    let z = queries.dot(&targets.t());
    let mut grad_z = Array2::zeros((b, b));
    let (mut loss, mut grad_tau, mut grad_eta) = (0.0, 0.0, 0.0);
    for ((i, j), &zij) in z.indexed_iter() {
        let gamma = pair_indicator(i, j);
        let x = gamma * (-tau * zij + eta);
        loss += softplus(x);
        // d softplus(x)/dx = logistic(x)
        let s = logistic(x) * inv_b;
        grad_z[[i, j]] = -s * gamma * tau;
        grad_tau -= s * gamma * zij;
        grad_eta += s * gamma;
    }
    Ok(PairLoss {
        loss: loss * inv_b,
        grad_z,
        grad_tau,
        grad_eta,
    })
}

/// Feature vectors of `b` (query, image, text) triplets, one row each.
#[derive(Debug, Clone, PartialEq)]
pub struct DsaBatch {
    pub query: Array2<f64>,
    pub image: Array2<f64>,
    pub text: Array2<f64>,
}

impl DsaBatch {
    pub fn new(
        query: Array2<f64>,
        image: Array2<f64>,
        text: Array2<f64>,
    ) -> Result<Self, TrainError> {
        let b = query.nrows();
        for other in [image.nrows(), text.nrows()] {
            if other != b {
                return Err(TrainError::BatchMismatch(b, other));
            }
        }
        if b == 0 {
            return Err(TrainError::EmptyBatch);
        }
        Ok(Self { query, image, text })
    }

    pub fn len(&self) -> usize {
        self.query.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            query: self.query.select(Axis(0), rows),
            image: self.image.select(Axis(0), rows),
            text: self.text.select(Axis(0), rows),
        }
    }

    /// Reads `{"q": [...], "i": [...], "t": [...]}` lines.
    pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Self, TrainError> {
        #[derive(Deserialize)]
        struct Line {
            q: Vec<f64>,
            i: Vec<f64>,
            t: Vec<f64>,
        }
        let mut rows: Vec<Line> = Vec::new();
        let mut dims: Option<[usize; 3]> = None;
        for (idx, line) in reader.lines().enumerate() {
            let line_no = idx + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Line =
                serde_json::from_str(&line).map_err(|_| TrainError::MalformedLine(line_no))?;
            let got = [rec.q.len(), rec.i.len(), rec.t.len()];
            if got.contains(&0)
                || rec
                    .q
                    .iter()
                    .chain(&rec.i)
                    .chain(&rec.t)
                    .any(|v| !v.is_finite())
            {
                return Err(TrainError::MalformedLine(line_no));
            }
            let expected = *dims.get_or_insert(got);
            for (k, field) in ["q", "i", "t"].into_iter().enumerate() {
                if got[k] != expected[k] {
                    return Err(TrainError::FieldDimMismatch {
                        line: line_no,
                        field,
                        expected: expected[k],
                        got: got[k],
                    });
                }
            }
            rows.push(rec);
        }
        let Some([dq, di, dt]) = dims else {
            return Err(TrainError::EmptyBatch);
        };
        let n = rows.len();
        let stack = |f: &dyn Fn(&Line) -> &Vec<f64>, d: usize| {
            Array2::from_shape_vec((n, d), rows.iter().flat_map(|r| f(r).clone()).collect())
                .expect("rows share a width")
        };
        Self::new(
            stack(&|r| &r.q, dq),
            stack(&|r| &r.i, di),
            stack(&|r| &r.t, dt),
        )
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> io::Result<()> {
        for r in 0..self.len() {
            let line = serde_json::json!({
                "q": self.query.row(r).to_vec(),
                "i": self.image.row(r).to_vec(),
                "t": self.text.row(r).to_vec(),
            });
            writeln!(w, "{line}")?;
        }
        w.flush()
    }
}

/// Query, image and text embeddings of a batch, one row per triplet.
pub type Embedded = (Array2<f64>, Array2<f64>, Array2<f64>);

/// Linear encoders mapping features to a shared `d`-dimensional space.
/// Each matrix is `d x feature_dim`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToyEncoders {
    pub w_query: Array2<f64>,
    pub w_image: Array2<f64>,
    pub w_text: Array2<f64>,
}

impl ToyEncoders {
    pub fn new(
        w_query: Array2<f64>,
        w_image: Array2<f64>,
        w_text: Array2<f64>,
    ) -> Result<Self, TrainError> {
        let d = w_query.nrows();
        for other in [w_image.nrows(), w_text.nrows()] {
            if other != d {
                return Err(TrainError::DimMismatch(d, other));
            }
        }
        Ok(Self {
            w_query,
            w_image,
            w_text,
        })
    }

    /// Seeded Gaussian query encoder scaled by `1/sqrt(feature_dim)`. The
    /// image encoder reuses it when feature widths agree, and the text
    /// encoder starts as a copy of it likewise.
    pub fn init(
        embed_dim: usize,
        query_dim: usize,
        image_dim: usize,
        text_dim: usize,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gaussian = |cols: usize| {
            let scale = 1.0 / (cols as f64).sqrt();
            Array2::from_shape_simple_fn((embed_dim, cols), || {
                scale * {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z
                }
            })
        };
        let w_query = gaussian(query_dim);
        let w_image = if image_dim == query_dim {
            w_query.clone()
        } else {
            gaussian(image_dim)
        };
        let w_text = if text_dim == query_dim {
            w_query.clone()
        } else {
            gaussian(text_dim)
        };
        Self {
            w_query,
            w_image,
            w_text,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.w_query.nrows()
    }

    fn check_batch(&self, batch: &DsaBatch) -> Result<(), TrainError> {
        for (w, x) in [
            (&self.w_query, &batch.query),
            (&self.w_image, &batch.image),
            (&self.w_text, &batch.text),
        ] {
            if w.ncols() != x.ncols() {
                return Err(TrainError::DimMismatch(w.ncols(), x.ncols()));
            }
        }
        Ok(())
    }

    /// Row embeddings `(Q, I, T)` of a batch.
    pub fn embed(&self, batch: &DsaBatch) -> Result<Embedded, TrainError> {
        self.check_batch(batch)?;
        Ok((
            batch.query.dot(&self.w_query.t()),
            batch.image.dot(&self.w_image.t()),
            batch.text.dot(&self.w_text.t()),
        ))
    }
}

/// Learnable temperature and bias of the sigmoid loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossParams {
    pub tau: f64,
    pub eta: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        Self {
            tau: INIT_TAU,
            eta: INIT_ETA,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CombinedLoss {
    pub total: f64,
    pub text: f64,
    pub image: f64,
}

fn check_lambda(lambda: f64) -> Result<(), TrainError> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(TrainError::LambdaOutOfRange(lambda))
    }
}

/// `lambda * L_text + (1 - lambda) * L_image` through the three encoders.
pub fn combined_loss(
    batch: &DsaBatch,
    encoders: &ToyEncoders,
    params: LossParams,
    lambda: f64,
) -> Result<CombinedLoss, TrainError> {
    check_lambda(lambda)?;
    let (q, i, t) = encoders.embed(batch)?;
    let text = dsa_loss(q.view(), t.view(), params.tau, params.eta)?;
    let image = dsa_loss(q.view(), i.view(), params.tau, params.eta)?;
    Ok(CombinedLoss {
        total: lambda * text + (1.0 - lambda) * image,
        text,
        image,
    })
}

/// Gradients of the combined loss with respect to the trainable
/// parameters. The frozen query and image encoders get none.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub loss: CombinedLoss,
    /// d x text_feature_dim.
    pub w_text: Array2<f64>,
    pub tau: f64,
    pub eta: f64,
}

pub fn loss_gradients(
    batch: &DsaBatch,
    encoders: &ToyEncoders,
    params: LossParams,
    lambda: f64,
) -> Result<Gradients, TrainError> {
    check_lambda(lambda)?;
    let (q, i, t) = encoders.embed(batch)?;
    let text = dsa_loss_with_grad(q.view(), t.view(), params.tau, params.eta)?;
    let image = dsa_loss_with_grad(q.view(), i.view(), params.tau, params.eta)?;
    // z_ij = q_i . (W_T x_j)  =>  dL/dW_T = Q^T G X_text
    let w_text = q.t().dot(&text.grad_z).dot(&batch.text) * lambda;
    Ok(Gradients {
        loss: CombinedLoss {
            total: lambda * text.loss + (1.0 - lambda) * image.loss,
            text: text.loss,
            image: image.loss,
        },
        w_text,
        tau: lambda * text.grad_tau + (1.0 - lambda) * image.grad_tau,
        eta: lambda * text.grad_eta + (1.0 - lambda) * image.grad_eta,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda: f64,
    pub tau_init: f64,
    pub eta_init: f64,
    pub learning_rate: f64,
    pub steps: usize,
    /// `None` trains full-batch.
    pub batch_size: Option<usize>,
    /// Heavy-ball momentum coefficient; 0 is plain gradient descent.
    pub momentum: f64,
    pub seed: u64,
    /// Defaults to the query feature width.
    pub embed_dim: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            tau_init: INIT_TAU,
            eta_init: INIT_ETA,
            learning_rate: 0.01,
            steps: 200,
            batch_size: None,
            momentum: 0.9,
            seed: 0,
            embed_dim: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        check_lambda(self.lambda)?;
        if !(self.tau_init > 0.0 && self.tau_init.is_finite()) {
            return Err(TrainError::NotPositive("tau"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::NotPositive("learning rate"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::NotPositive("1 - momentum"));
        }
        if self.batch_size == Some(0) || self.embed_dim == Some(0) {
            return Err(TrainError::NotPositive("batch size and embedding dim"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub loss_text: f64,
    pub loss_image: f64,
    pub tau: f64,
    pub eta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub loss_ratio: f64,
    /// Each query ranked against every text embedding; fraction whose own
    /// text ranks first.
    pub self_retrieval_mrr_at_1: f64,
    pub tau: f64,
    pub eta: f64,
    pub non_decreasing_loss: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<LogRow>,
    pub encoders: ToyEncoders,
    pub params: LossParams,
    pub report: TrainReport,
}

pub fn write_log_csv<W: Write>(mut w: W, log: &[LogRow]) -> io::Result<()> {
    writeln!(w, "step,loss,loss_text,loss_image,tau,eta")?;
    for r in log {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.step, r.loss, r.loss_text, r.loss_image, r.tau, r.eta
        )?;
    }
    w.flush()
}

/// Fraction of queries whose own text is the top-scoring text under the
/// current encoders (ties go to the lower index).
pub fn self_retrieval_mrr_at_1(data: &DsaBatch, encoders: &ToyEncoders) -> Result<f64, TrainError> {
    let (q, _, t) = encoders.embed(data)?;
    let z = q.dot(&t.t());
    let hits = z
        .outer_iter()
        .enumerate()
        .filter(|(i, row)| rank_top_k(&row.to_vec(), 1)[0] == *i)
        .count();
    Ok(hits as f64 / data.len() as f64)
}

/// Gradient descent on the text encoder, `log(tau)` and `eta`.
///
/// Mini-batches (when `batch_size < n`) walk a seeded shuffle of the
/// triplets, reshuffling each epoch. Every logged loss is over all triplets.
pub fn train_toy(
    data: &DsaBatch,
    encoders: ToyEncoders,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if data.len() < 2 {
        return Err(TrainError::TooFewTriplets(data.len()));
    }
    encoders.check_batch(data)?;
    let mut enc = encoders;
    let mut log_tau = cfg.tau_init.ln();
    let mut params = LossParams {
        tau: cfg.tau_init,
        eta: cfg.eta_init,
    };
    let log_row = |step: usize, enc: &ToyEncoders, params: LossParams| {
        combined_loss(data, enc, params, cfg.lambda).map(|l| LogRow {
            step,
            loss: l.total,
            loss_text: l.text,
            loss_image: l.image,
            tau: params.tau,
            eta: params.eta,
        })
    };
    let mut log = vec![log_row(0, &enc, params)?];

    let n = data.len();
    let batch_size = cfg.batch_size.unwrap_or(n).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut vel_w = Array2::<f64>::zeros(enc.w_text.raw_dim());
    let (mut vel_log_tau, mut vel_eta) = (0.0, 0.0);

    for step in 1..=cfg.steps {
        let grads = if batch_size == n {
            loss_gradients(data, &enc, params, cfg.lambda)?
        } else {
            if cursor + batch_size > n {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let batch = data.select(&order[cursor..cursor + batch_size]);
            cursor += batch_size;
            loss_gradients(&batch, &enc, params, cfg.lambda)?
        };
        vel_w = vel_w * cfg.momentum + &grads.w_text;
        // tau = exp(log_tau)  =>  dL/dlog_tau = tau * dL/dtau
        vel_log_tau = cfg.momentum * vel_log_tau + grads.tau * params.tau;
        vel_eta = cfg.momentum * vel_eta + grads.eta;
        enc.w_text.scaled_add(-cfg.learning_rate, &vel_w);
        log_tau -= cfg.learning_rate * vel_log_tau;
        params.tau = log_tau.exp();
        params.eta -= cfg.learning_rate * vel_eta;
        log.push(log_row(step, &enc, params)?);
    }

    let initial_loss = log[0].loss;
    let final_loss = log.last().expect("initial row").loss;
    let report = TrainReport {
        steps: cfg.steps,
        initial_loss,
        final_loss,
        loss_ratio: if initial_loss > 0.0 {
            final_loss / initial_loss
        } else {
            1.0
        },
        self_retrieval_mrr_at_1: self_retrieval_mrr_at_1(data, &enc)?,
        tau: params.tau,
        eta: params.eta,
        non_decreasing_loss: cfg.steps > 0 && final_loss >= initial_loss,
    };
    Ok(TrainOutcome {
        log,
        encoders: enc,
        params,
        report,
    })
}
