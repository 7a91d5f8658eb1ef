use rand::seq::index;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{AblationVariant, RunConfig};
use super::metrics::{compute_metrics, AccuracyMatrix, MetricsReport};
use crate::diffcore::{sgd_step, Tape, Tensor, Velocity};
use crate::error::{Error, Result};
use crate::labeler::{self, LabelMethod, PseudoLabelSet};
use crate::memory::ExemplarMemory;
use crate::nets::{softmax, DistillOn, Model, ModelPair};
use crate::objective::{total_loss, BatchContext, LossBreakdown, LossTerms, PcaForm, PreviousOutputs};
use crate::randmix::{augment_batch, InputGeometry};
use crate::rng::{self, Stream};
use crate::synthdata::{generate, split_source, Dataset, DomainSequence, DomainSpec};
use crate::StageKind;

/// One optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub stage: usize,
    pub epoch: usize,
    pub step: usize,
    pub ce: f64,
    pub pca: f64,
    pub dis: f64,
    pub total: f64,
}

/// Accuracy of one labeler against the hidden truth at the start of an epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelDiagnostic {
    pub stage: usize,
    pub epoch: usize,
    pub method: LabelMethod,
    pub accuracy: f64,
}

/// Memory occupancy right after a stage's admission.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryStat {
    pub stage: usize,
    pub total: usize,
    /// Bucket sizes indexed by domain position.
    pub buckets: Vec<usize>,
}

/// Words drawn from each random stream during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngUsage {
    pub batch: u128,
    pub randmix: u128,
    pub replay: u128,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub matrix: AccuracyMatrix,
    pub metrics: MetricsReport,
    pub log: Vec<StepLog>,
    pub untrained: Option<Vec<f64>>,
    pub label_diagnostics: Vec<LabelDiagnostic>,
    pub memory_trace: Vec<MemoryStat>,
    pub memory: Option<ExemplarMemory>,
    /// Labels used for memory admission after each target stage.
    pub pseudo_labels: Vec<PseudoLabelSet>,
    /// Number of times the previous-model snapshot was refreshed.
    pub snapshots: usize,
    pub rng_usage: RngUsage,
    pub model: Model,
}

/// Train and test data of one domain. Targets use the full set for both.
#[derive(Clone, Debug)]
pub struct PreparedDomain {
    pub name: String,
    pub train: Dataset,
    pub test: Dataset,
}

pub fn prepare_domains(cfg: &RunConfig, seq: &DomainSequence) -> Result<Vec<PreparedDomain>> {
    seq.domains
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let full = generate(spec, cfg.seed)?;
            let (train, test) = if i == 0 {
                split_source(&full, cfg.source_fraction, cfg.seed)?
            } else {
                (full.clone(), full)
            };
            Ok(PreparedDomain { name: spec.name.clone(), train, test })
        })
        .collect()
}

/// Fraction of rows whose arg-max logit (lowest index on ties) is the label.
pub fn accuracy(model: &Model, data: &Dataset) -> Result<f64> {
    let logits = model.logits(&data.inputs)?;
    let hits = logits
        .row_iter()
        .zip(&data.labels)
        .filter(|(row, &y)| {
            let best = row.iter().enumerate().fold(0, |b, (j, &v)| if v > row[b] { j } else { b });
            best == y
        })
        .count();
    Ok(hits as f64 / data.len() as f64)
}

pub fn evaluate_row(model: &Model, domains: &[PreparedDomain]) -> Result<Vec<f64>> {
    domains.par_iter().map(|d| accuracy(model, &d.test)).collect()
}

fn source_terms(cfg: &RunConfig) -> LossTerms {
    LossTerms { pca: if cfg.disable_pca { PcaForm::Off } else { PcaForm::SourceForm }, distill: false }
}

fn target_terms(cfg: &RunConfig) -> LossTerms {
    let pca = if cfg.disable_pca {
        PcaForm::Off
    } else if cfg.disable_previous_prototypes {
        PcaForm::SourceForm
    } else {
        PcaForm::Full
    };
    LossTerms { pca, distill: !cfg.disable_distill }
}

fn draw_rows(rng: &mut ChaCha8Rng, n: usize, want: usize) -> Vec<usize> {
    index::sample(rng, n, want.min(n)).into_vec()
}

fn stack(parts: Vec<(Tensor, Vec<usize>)>) -> Result<(Tensor, Vec<usize>)> {
    let tensors: Vec<&Tensor> = parts.iter().map(|p| &p.0).collect();
    let x = Tensor::vstack(&tensors)?;
    Ok((x, parts.iter().flat_map(|p| p.1.iter().copied()).collect()))
}

/// Training state shared by the continual and the stationary runner.
struct Trainer<'c> {
    cfg: &'c RunConfig,
    geometry: InputGeometry,
    pair: ModelPair,
    batch_rng: ChaCha8Rng,
    mix_rng: ChaCha8Rng,
    replay_rng: ChaCha8Rng,
    log: Vec<StepLog>,
    diagnostics: Vec<LabelDiagnostic>,
    snapshots: usize,
}

impl<'c> Trainer<'c> {
    fn new(cfg: &'c RunConfig, seq: &DomainSequence) -> Result<Self> {
        let geometry = seq.geometry().ok_or_else(|| Error::Config("empty domain sequence".into()))?;
        let spec = cfg.model_spec(geometry.dim(), seq.classes());
        let model = Model::init(spec, &mut rng::stream(cfg.seed, Stream::Init))?;
        Ok(Self {
            cfg,
            geometry,
            pair: ModelPair::new(model),
            batch_rng: rng::stream(cfg.seed, Stream::Batch),
            mix_rng: rng::stream(cfg.seed, Stream::RandMix),
            replay_rng: rng::stream(cfg.seed, Stream::Replay),
            log: Vec::new(),
            diagnostics: Vec::new(),
            snapshots: 0,
        })
    }

    fn model(&self) -> &Model {
        &self.pair.current
    }

    fn rng_usage(&self) -> RngUsage {
        RngUsage {
            batch: self.batch_rng.get_word_pos(),
            randmix: self.mix_rng.get_word_pos(),
            replay: self.replay_rng.get_word_pos(),
        }
    }

    /// Stage boundary: the trained model becomes the frozen previous model.
    fn boundary(&mut self) {
        self.pair.refresh_previous();
        self.snapshots += 1;
    }

    fn step(&mut self, at: (usize, usize, usize), x: &Tensor, labels: &[usize], terms: LossTerms, velocity: &mut Velocity) -> Result<()> {
        let previous = match self.pair.previous() {
            Some(prev) if terms.distill || terms.pca == PcaForm::Full => {
                let (f, z) = prev.features_and_logits(x)?;
                let probs = match self.cfg.distill_on {
                    DistillOn::Logits => softmax(&z),
                    DistillOn::Representation => softmax(&f),
                };
                Some(PreviousOutputs { prototypes: prev.prototypes().clone(), probs })
            }
            _ => None,
        };
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let fwd = self.pair.current.forward(&mut tape, xv)?;
        let ctx = BatchContext {
            features: fwd.features,
            logits: fwd.logits,
            distill_input: match self.cfg.distill_on {
                DistillOn::Logits => fwd.logits,
                DistillOn::Representation => fwd.features,
            },
            labels,
            previous: previous.as_ref(),
        };
        let (loss, b): (_, LossBreakdown) = total_loss(&mut tape, &ctx, terms)?;
        let mut grads = tape.backward(loss)?;
        self.pair.current.store_grads(&mut grads, &fwd.params);
        sgd_step(&mut self.pair.current.param_tensors_mut(), &self.cfg.sgd, velocity)?;
        let (stage, epoch, step) = at;
        self.log.push(StepLog { stage, epoch, step, ce: b.ce, pca: b.pca, dis: b.dis, total: b.total });
        Ok(())
    }

    /// Labeled source training on every row plus its augmented copy.
    fn train_source(&mut self, data: &Dataset) -> Result<()> {
        let terms = source_terms(self.cfg);
        let mut velocity = Velocity::default();
        for epoch in 0..self.cfg.epochs {
            for step in 0..self.cfg.steps_per_epoch {
                let at = format!("stage 0, epoch {epoch}, step {step}");
                let rows = draw_rows(&mut self.batch_rng, data.len(), self.cfg.batch_size);
                let batch = data.select(&rows).map_err(|e| e.context(at.clone()))?;
                let mut parts = vec![(batch.inputs.clone(), batch.labels.clone())];
                if !self.cfg.disable_randmix {
                    let aug = augment_batch(
                        &self.pair.current,
                        &batch.inputs,
                        &batch.labels,
                        &self.cfg.randmix,
                        StageKind::Source,
                        self.geometry,
                        &mut self.mix_rng,
                    )
                    .map_err(|e| e.context(at.clone()))?;
                    if let Some(x) = aug.inputs {
                        parts.push((x, aug.labels));
                    }
                }
                let (x, labels) = stack(parts)?;
                self.step((0, epoch, step), &x, &labels, terms, &mut velocity).map_err(|e| e.context(at))?;
            }
        }
        Ok(())
    }

    fn diagnose(&mut self, stage: usize, epoch: usize, data: &Dataset) -> Result<()> {
        let x = &data.inputs;
        let sets = [
            labeler::t2pl(self.model(), x, &self.cfg.labeler, stage)?,
            labeler::softmax_labels(self.model(), x, stage)?,
            labeler::shot_style_labels(self.model(), x, stage)?,
        ];
        for set in sets {
            let accuracy = set.accuracy(&data.labels);
            self.diagnostics.push(LabelDiagnostic { stage, epoch, method: set.method, accuracy });
        }
        Ok(())
    }

    /// Unlabeled target training; returns the labels of the trained model for
    /// memory admission. `data.labels` is read only for diagnostics.
    fn train_target(&mut self, stage: usize, data: &Dataset, memory: Option<&ExemplarMemory>, terms: LossTerms) -> Result<PseudoLabelSet> {
        let mut velocity = Velocity::default();
        let n_current = if memory.is_some() { self.cfg.batch_size - self.cfg.replay_n } else { self.cfg.batch_size };
        for epoch in 0..self.cfg.epochs {
            let at_epoch = format!("stage {stage}, epoch {epoch}");
            if self.cfg.diagnose_labels {
                self.diagnose(stage, epoch, data).map_err(|e| e.context(at_epoch.clone()))?;
            }
            let pseudo = labeler::pseudo_label(self.model(), &data.inputs, &self.cfg.labeler, stage)
                .map_err(|e| e.context(at_epoch.clone()))?;
            for step in 0..self.cfg.steps_per_epoch {
                let at = format!("{at_epoch}, step {step}");
                let rows = draw_rows(&mut self.batch_rng, data.len(), n_current);
                let x_cur = data.inputs.select_rows(&rows)?;
                let y_cur: Vec<usize> = rows.iter().map(|&i| pseudo.labels[i]).collect();
                let mut parts = Vec::new();
                let mut extra = Vec::new();
                if let Some(mem) = memory {
                    let replay = mem.replay_batch(self.cfg.replay_n, &mut self.replay_rng);
                    if !replay.is_empty() {
                        let x: Vec<&[f64]> = replay.iter().map(|e| e.input.as_slice()).collect();
                        extra.push((Tensor::from_rows(&x)?, replay.iter().map(|e| e.label).collect()));
                    }
                }
                if !self.cfg.disable_randmix {
                    let aug = augment_batch(
                        &self.pair.current,
                        &x_cur,
                        &y_cur,
                        &self.cfg.randmix,
                        StageKind::Target,
                        self.geometry,
                        &mut self.mix_rng,
                    )
                    .map_err(|e| e.context(at.clone()))?;
                    if let Some(x) = aug.inputs {
                        extra.push((x, aug.labels));
                    }
                }
                parts.push((x_cur, y_cur));
                parts.extend(extra);
                let (x, labels) = stack(parts)?;
                self.step((stage, epoch, step), &x, &labels, terms, &mut velocity).map_err(|e| e.context(at))?;
            }
        }
        labeler::pseudo_label(self.model(), &data.inputs, &self.cfg.labeler, stage)
            .map_err(|e| e.context(format!("stage {stage}, final labels")))
    }
}

fn memory_stat(stage: usize, mem: &ExemplarMemory, domains: usize) -> MemoryStat {
    MemoryStat { stage, total: mem.len(), buckets: (0..domains).map(|d| mem.bucket(d).len()).collect() }
}

/// The continual pipeline: labeled source stage, then one unlabeled stage per
/// target domain, evaluating every domain after each stage.
pub fn run_cdsl(cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let seq = cfg.resolve_sequence()?;
    let domains = prepare_domains(cfg, &seq)?;
    let mut trainer = Trainer::new(cfg, &seq)?;
    let mut matrix = AccuracyMatrix::new(domains.iter().map(|d| d.name.clone()).collect());
    let untrained = if cfg.untrained_row { Some(evaluate_row(trainer.model(), &domains)?) } else { None };
    let mut memory = (!cfg.disable_memory).then(|| ExemplarMemory::new(cfg.memory_capacity));
    let mut memory_trace = Vec::new();
    let mut pseudo_labels = Vec::new();

    trainer.train_source(&domains[0].train)?;
    if let Some(mem) = memory.as_mut() {
        let src = &domains[0].train;
        mem.admit_domain(trainer.model(), &src.inputs, &src.labels, 0).map_err(|e| e.context("stage 0, memory"))?;
        memory_trace.push(memory_stat(0, mem, domains.len()));
    }
    trainer.boundary();
    matrix.push_row(evaluate_row(trainer.model(), &domains)?)?;

    let terms = target_terms(cfg);
    for (t, domain) in domains.iter().enumerate().skip(1) {
        let labels = trainer.train_target(t, &domain.train, memory.as_ref(), terms)?;
        if let Some(mem) = memory.as_mut() {
            mem.admit_domain(trainer.model(), &domain.train.inputs, &labels.labels, t)
                .map_err(|e| e.context(format!("stage {t}, memory")))?;
            memory_trace.push(memory_stat(t, mem, domains.len()));
        }
        pseudo_labels.push(labels);
        trainer.boundary();
        matrix.push_row(evaluate_row(trainer.model(), &domains)?)?;
    }

    let metrics = compute_metrics(&matrix)?;
    Ok(RunOutput {
        matrix,
        metrics,
        untrained,
        memory_trace,
        memory,
        pseudo_labels,
        snapshots: trainer.snapshots,
        rng_usage: trainer.rng_usage(),
        log: std::mem::take(&mut trainer.log),
        label_diagnostics: std::mem::take(&mut trainer.diagnostics),
        model: trainer.pair.current,
    })
}

/// Accuracy on every domain of a model trained on the source stage only.
pub fn source_only_row(cfg: &RunConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let seq = cfg.resolve_sequence()?;
    let domains = prepare_domains(cfg, &seq)?;
    let mut trainer = Trainer::new(cfg, &seq)?;
    trainer.train_source(&domains[0].train)?;
    evaluate_row(trainer.model(), &domains)
}

#[derive(Clone, Debug)]
pub struct StationaryOutput {
    /// Target accuracy after adaptation.
    pub accuracy: f64,
    pub run: RunOutput,
}

/// Single source → single target adaptation with no memory, no distillation
/// and no previous-prototype terms.
pub fn run_stationary(cfg: &RunConfig, source: &DomainSpec, target: &DomainSpec) -> Result<StationaryOutput> {
    let cfg = RunConfig {
        domains: Some(vec![source.clone(), target.clone()]),
        order: None,
        stationary: true,
        ..cfg.clone()
    };
    cfg.validate()?;
    let seq = cfg.resolve_sequence()?;
    let domains = prepare_domains(&cfg, &seq)?;
    let mut trainer = Trainer::new(&cfg, &seq)?;
    let mut matrix = AccuracyMatrix::new(domains.iter().map(|d| d.name.clone()).collect());
    let untrained = if cfg.untrained_row { Some(evaluate_row(trainer.model(), &domains)?) } else { None };

    trainer.train_source(&domains[0].train)?;
    trainer.boundary();
    matrix.push_row(evaluate_row(trainer.model(), &domains)?)?;

    let terms = LossTerms { pca: source_terms(&cfg).pca, distill: false };
    let labels = trainer.train_target(1, &domains[1].train, None, terms)?;
    trainer.boundary();
    let row = evaluate_row(trainer.model(), &domains)?;
    let accuracy = row[1];
    matrix.push_row(row)?;

    let metrics = compute_metrics(&matrix)?;
    Ok(StationaryOutput {
        accuracy,
        run: RunOutput {
            matrix,
            metrics,
            untrained,
            memory_trace: Vec::new(),
            memory: None,
            pseudo_labels: vec![labels],
            snapshots: trainer.snapshots,
            rng_usage: trainer.rng_usage(),
            log: std::mem::take(&mut trainer.log),
            label_diagnostics: std::mem::take(&mut trainer.diagnostics),
            model: trainer.pair.current,
        },
    })
}

/// Runs `cfg` with one ablation applied.
pub fn ablate(cfg: &RunConfig, variant: AblationVariant) -> Result<MetricsReport> {
    Ok(run_cdsl(&variant.apply(cfg))?.metrics)
}
