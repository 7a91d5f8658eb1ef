//! Training losses recorded on a [`Tape`].
//!
//! * cross-entropy over the bias-free prototype classifier;
//! * prototype contrastive alignment: for sample `i` with label `y`,
//!   `−log[(e^{p_yᵀf} + e^{p′_yᵀf}) / Δ]` where `Δ` sums `e^{p_cᵀf}` and
//!   `e^{p′_cᵀf}` over all classes plus `e^{f_iᵀf_j}` over batch samples `j`
//!   with a different label (`p′` are the previous stage's prototypes);
//! * the source-stage variant without any previous-prototype terms;
//! * KL distillation from the previous model's softmax outputs.
//!
//! Every term is averaged over the batch. The contrastive ratio is evaluated
//! as a difference of masked log-sum-exps so large feature dot products do
//! not overflow.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor, Var, LOG_CLAMP};
use crate::error::{Error, Result};
use crate::StageKind;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub pca: f64,
    pub dis: f64,
    pub total: f64,
}

/// Frozen outputs of the previous-stage model for the current batch.
#[derive(Clone, Debug)]
pub struct PreviousOutputs {
    /// Previous classifier rows `[K × d]`.
    pub prototypes: Tensor,
    /// Previous softmax outputs for the distillation target.
    pub probs: Tensor,
}

/// Recorded forward pass of one mixed batch.
#[derive(Clone, Debug)]
pub struct BatchContext<'a> {
    pub features: Var,
    pub logits: Var,
    /// What the distillation term compares (logits or representation).
    pub distill_input: Var,
    pub labels: &'a [usize],
    pub previous: Option<&'a PreviousOutputs>,
}

/// Which contrastive term to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PcaForm {
    Off,
    /// Current prototypes only.
    SourceForm,
    /// Current and previous prototypes.
    Full,
}

/// Which terms enter the objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossTerms {
    pub pca: PcaForm,
    pub distill: bool,
}

impl LossTerms {
    /// Source stage: `L′ = CE + source-form PCA`; target stage: `CE + PCA + DIS`.
    pub fn for_stage(kind: StageKind) -> Self {
        match kind {
            StageKind::Source => Self { pca: PcaForm::SourceForm, distill: false },
            StageKind::Target => Self { pca: PcaForm::Full, distill: true },
        }
    }
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::shape("loss", format!("{} labels for {rows} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::shape("loss", format!("label {bad} outside [0,{classes})")));
    }
    Ok(())
}

fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut t = Tensor::zeros(vec![labels.len(), classes]);
    for (i, &l) in labels.iter().enumerate() {
        t.data_mut()[i * classes + l] = 1.0;
    }
    t
}

/// Mean of `−log softmax_y(logits)`.
pub fn ce_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (n, k) = (tape.value(logits).rows(), tape.value(logits).cols());
    check_labels(labels, n, k)?;
    let ls = tape.row_log_softmax(logits)?;
    let mask = tape.leaf(one_hot(labels, k));
    let picked = tape.mul(ls, mask)?;
    let s = tape.sum(picked)?;
    tape.scale(s, -1.0 / n as f64)
}

fn contrastive(tape: &mut Tape, features: Var, logits: Var, labels: &[usize], previous: Option<&Tensor>) -> Result<Var> {
    let (n, k) = (tape.value(logits).rows(), tape.value(logits).cols());
    check_labels(labels, n, k)?;
    let mut blocks = vec![logits];
    if let Some(p) = previous {
        if p.rows() != k || p.cols() != tape.value(features).cols() {
            return Err(Error::shape(
                "pca_loss",
                format!("previous prototypes {:?} for {k} classes", p.shape()),
            ));
        }
        let pv = tape.leaf(p.clone());
        blocks.push(tape.matmul_t(features, pv)?);
    }
    let gram = tape.matmul_t(features, features)?;
    blocks.push(gram);
    let scores = tape.concat_cols(&blocks)?;
    let proto_cols = k * (blocks.len() - 1);
    let width = proto_cols + n;
    let mut num = vec![false; n * width];
    let mut den = vec![false; n * width];
    for i in 0..n {
        let row = i * width;
        for b in 0..blocks.len() - 1 {
            num[row + b * k + labels[i]] = true;
        }
        den[row..row + proto_cols].iter_mut().for_each(|m| *m = true);
        for j in 0..n {
            if j != i && labels[j] != labels[i] {
                den[row + proto_cols + j] = true;
            }
        }
    }
    let log_den = tape.masked_row_logsumexp(scores, den)?;
    let log_num = tape.masked_row_logsumexp(scores, num)?;
    let per_sample = tape.sub(log_den, log_num)?;
    tape.mean(per_sample)
}

/// Prototype contrastive alignment against current and previous prototypes.
pub fn pca_loss(tape: &mut Tape, features: Var, logits: Var, labels: &[usize], previous_prototypes: &Tensor) -> Result<Var> {
    contrastive(tape, features, logits, labels, Some(previous_prototypes))
}

/// Contrastive alignment with the current prototypes only.
pub fn source_pca_loss(tape: &mut Tape, features: Var, logits: Var, labels: &[usize]) -> Result<Var> {
    contrastive(tape, features, logits, labels, None)
}

/// Mean over rows of `KL(previous ‖ softmax(current))`.
pub fn distill_loss(tape: &mut Tape, current: Var, previous_probs: &Tensor) -> Result<Var> {
    let cur = tape.value(current);
    if cur.shape() != previous_probs.shape() {
        return Err(Error::shape(
            "distill_loss",
            format!("current {:?} vs previous {:?}", cur.shape(), previous_probs.shape()),
        ));
    }
    let n = cur.rows();
    let q = tape.row_softmax(current)?;
    let log_q = tape.ln(q)?;
    let p = tape.leaf(previous_probs.clone());
    let log_p = tape.leaf(previous_probs.map(|v| v.max(LOG_CLAMP).ln()));
    let diff = tape.sub(log_p, log_q)?;
    let weighted = tape.mul(p, diff)?;
    let s = tape.sum(weighted)?;
    tape.scale(s, 1.0 / n as f64)
}

/// Records the selected terms and returns the total with its breakdown.
pub fn total_loss(tape: &mut Tape, ctx: &BatchContext<'_>, terms: LossTerms) -> Result<(Var, LossBreakdown)> {
    let ce = ce_loss(tape, ctx.logits, ctx.labels)?;
    let mut total = ce;
    let mut breakdown = LossBreakdown { ce: tape.value(ce).item(), ..Default::default() };
    let pca = match terms.pca {
        PcaForm::Off => None,
        PcaForm::SourceForm => Some(source_pca_loss(tape, ctx.features, ctx.logits, ctx.labels)?),
        PcaForm::Full => {
            let prev = ctx.previous.ok_or_else(|| Error::Config("full PCA needs a previous model".into()))?;
            Some(pca_loss(tape, ctx.features, ctx.logits, ctx.labels, &prev.prototypes)?)
        }
    };
    if let Some(p) = pca {
        breakdown.pca = tape.value(p).item();
        total = tape.add(total, p)?;
    }
    if terms.distill {
        let prev = ctx.previous.ok_or_else(|| Error::Config("distillation needs a previous model".into()))?;
        let d = distill_loss(tape, ctx.distill_input, &prev.probs)?;
        breakdown.dis = tape.value(d).item();
        total = tape.add(total, d)?;
    }
    breakdown.total = tape.value(total).item();
    Ok((total, breakdown))
}
