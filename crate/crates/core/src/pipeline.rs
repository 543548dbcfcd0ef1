//! End-to-end orchestration: sequential training over a task stream,
//! evaluation with the retrieval ablations, incremental accuracy matrices
//! and bound reports on a trained knowledge base.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::kb::{KbMeta, KnowledgeBase, ScoreRule};
use crate::lda::{LdaStats, DEFAULT_GAMMA};
use crate::linalg;
use crate::lora::{compose_update, lora_cosine, train_task, TrainConfig, TrainLog, TrainingSet};
use crate::metrics::{self, AccMatrix};
use crate::signature::{fit_multikey_detailed, Ridge, Strategy};
use crate::taskgen::TaskDataset;
use crate::theory::{self, BoundParams, BoundReport, BoundRow, TaskVerdict, SIGMA2_FLOOR};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SignatureConfig {
    pub max_components: usize,
    pub ridge: Ridge,
    pub strategy: Strategy,
}

impl Default for SignatureConfig {
    fn default() -> Self {
        SignatureConfig {
            max_components: 20,
            ridge: Ridge::default(),
            strategy: Strategy::EmBic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Hidden and output widths; the input width comes from the stream.
    pub widths: Vec<usize>,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            widths: vec![32, 16],
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
    pub signature: SignatureConfig,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.signature.max_components == 0 {
            return Err(Error::Config("signature.max_components must be >= 1".into()));
        }
        if self.backbone.widths.is_empty() || self.backbone.widths.contains(&0) {
            return Err(Error::Config("backbone.widths must be non-empty and positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    #[serde(flatten)]
    pub train: TrainLog,
    pub components: usize,
    pub bic: Vec<(usize, f64)>,
    pub ridge: f64,
    /// Largest `|cos|` between the new unit and any past unit, per layer.
    pub max_ortho_cosine: Vec<f64>,
    pub transfer_l1: f64,
    /// Fraction of transfer coefficients with magnitude below 1e-3.
    pub transfer_near_zero: f64,
}

/// Sequential trainer; each `step` runs one task of the stream end to end.
#[derive(Debug, Clone)]
pub struct Trainer {
    cfg: PipelineConfig,
    kb: KnowledgeBase,
    total_tasks: usize,
    reports: Vec<TaskReport>,
}

impl Trainer {
    pub fn new(cfg: PipelineConfig, input_dim: usize, total_tasks: usize, config_json: serde_json::Value) -> Result<Self> {
        cfg.validate()?;
        if total_tasks == 0 {
            return Err(Error::Config("stream has no tasks".into()));
        }
        let mut dims = vec![input_dim];
        dims.extend(&cfg.backbone.widths);
        let backbone = Backbone::init(&dims, cfg.backbone.seed)?;
        let d = backbone.embedding_dim();
        let meta = KbMeta {
            d,
            seed: cfg.train.seed,
            config: config_json,
        };
        let kb = KnowledgeBase::new(backbone, LdaStats::new(d, 0), meta)?;
        Ok(Trainer {
            cfg,
            kb,
            total_tasks,
            reports: Vec::new(),
        })
    }

    pub fn kb(&self) -> &KnowledgeBase {
        &self.kb
    }

    pub fn into_parts(self) -> (KnowledgeBase, Vec<TaskReport>) {
        (self.kb, self.reports)
    }

    pub fn reports(&self) -> &[TaskReport] {
        &self.reports
    }

    pub fn step(&mut self, task: &TaskDataset) -> Result<&TaskReport> {
        self.step_inner(task).map_err(|e| Error::in_task(task.task, e))?;
        Ok(self.reports.last().unwrap())
    }

    fn step_inner(&mut self, task: &TaskDataset) -> Result<()> {
        if self.kb.len() >= self.total_tasks {
            return Err(Error::Config(format!("trainer was sized for {} tasks", self.total_tasks)));
        }
        let set = training_set(task)?;
        let past = self.kb.units();
        let backbone = self.kb.backbone().clone();
        let outcome = train_task(task.task, &set, &past, &backbone, &self.cfg.train)?;

        let overlay = compose_update(&past, &outcome.transfer, &outcome.unit)?;
        let adapted = backbone.adapted(&overlay)?;
        let embeddings = embed_columns(&adapted, &set.inputs)?;
        let fit = fit_multikey_detailed(
            task.task,
            &embeddings,
            self.cfg.signature.max_components,
            self.cfg.signature.ridge,
            linalg::derive_seed(self.cfg.train.seed, 0x5160_0000 + task.task as u64),
            self.cfg.signature.strategy,
        )?;

        let max_ortho_cosine = (0..outcome.unit.layers.len())
            .map(|l| {
                past.iter()
                    .map(|p| lora_cosine(&outcome.unit, p).map(|c| c[l].abs()))
                    .try_fold(0.0f64, |acc, c| c.map(|c| acc.max(c)))
            })
            .collect::<Result<Vec<_>>>()?;
        let values: Vec<f64> = outcome.transfer.values().collect();
        let transfer_l1 = values.iter().fold(0.0, |a, v| a + v.abs());
        let transfer_near_zero = if values.is_empty() {
            0.0
        } else {
            values.iter().filter(|v| v.abs() < 1e-3).count() as f64 / values.len() as f64
        };

        let report = TaskReport {
            train: outcome.log,
            components: fit.signature.len(),
            bic: fit.candidates.iter().map(|c| (c.fitted, c.bic)).collect(),
            ridge: fit.ridge,
            max_ortho_cosine,
            transfer_l1,
            transfer_near_zero,
        };
        self.kb.commit_task(fit.signature, outcome.unit, outcome.transfer)?;

        let max_label = task.classes.iter().copied().max().unwrap_or(0);
        let lda = self.kb.lda_mut();
        lda.register_classes(max_label + 1);
        for (h, s) in embeddings.iter().zip(&task.train) {
            lda.accumulate(h, s.label, task.train.len(), self.total_tasks)?;
        }
        lda.mark_task_done();
        self.reports.push(report);
        Ok(())
    }
}

/// Trains on every task of `tasks` in order.
pub fn train_stream(cfg: &PipelineConfig, tasks: &[TaskDataset]) -> Result<(KnowledgeBase, Vec<TaskReport>)> {
    let input_dim = stream_input_dim(tasks)?;
    let json = serde_json::to_value(cfg).map_err(|e| Error::Config(e.to_string()))?;
    let mut trainer = Trainer::new(cfg.clone(), input_dim, tasks.len(), json)?;
    for t in tasks {
        trainer.step(t)?;
    }
    Ok(trainer.into_parts())
}

pub fn stream_input_dim(tasks: &[TaskDataset]) -> Result<usize> {
    tasks
        .iter()
        .flat_map(|t| t.train.iter().chain(&t.test))
        .map(|s| s.x.len())
        .next()
        .ok_or_else(|| Error::InsufficientData("stream has no samples".into()))
}

fn training_set(task: &TaskDataset) -> Result<TrainingSet> {
    if task.train.is_empty() {
        return Err(Error::InsufficientData("empty training split".into()));
    }
    let cols: Vec<DVector<f64>> = task.train.iter().map(|s| s.x.clone()).collect();
    let labels = task
        .train
        .iter()
        .map(|s| {
            task.local_label(s.label).ok_or(Error::Label {
                label: s.label,
                classes: task.classes.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    TrainingSet::new(DMatrix::from_columns(&cols), labels, task.classes.len())
}

fn embed_columns(backbone: &Backbone, xs: &DMatrix<f64>) -> Result<Vec<DVector<f64>>> {
    let h = backbone.embed_batch(xs)?;
    Ok(h.column_iter().map(|c| c.into_owned()).collect())
}

fn embed_samples(backbone: &Backbone, xs: &[&DVector<f64>]) -> Result<Vec<DVector<f64>>> {
    if xs.is_empty() {
        return Ok(Vec::new());
    }
    let cols: Vec<DVector<f64>> = xs.iter().map(|x| (*x).clone()).collect();
    embed_columns(backbone, &DMatrix::from_columns(&cols))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RetrievalMode {
    /// Nearest signature over the whole knowledge base.
    #[default]
    Signature,
    /// The true task's entry.
    Oracle,
    /// Always the most recently committed entry.
    LastTask,
    /// The bare backbone, no LoRA update.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub retrieval: RetrievalMode,
    pub score: ScoreRule,
    /// Use top-K likelihood aggregation instead of the argmin rule.
    pub top_k: Option<usize>,
    pub gamma: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            retrieval: RetrievalMode::Signature,
            score: ScoreRule::Mahalanobis,
            top_k: None,
            gamma: DEFAULT_GAMMA,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEval {
    pub task: usize,
    pub samples: usize,
    pub accuracy: f64,
    pub retrieval_accuracy: f64,
    /// `retrieved[i]` = samples routed to entry `i`; the last slot counts
    /// samples routed to the bare backbone.
    pub retrieved: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub options: EvalOptions,
    pub samples: usize,
    pub accuracy: f64,
    pub retrieval_accuracy: f64,
    pub per_task: Vec<TaskEval>,
}

/// Test-split evaluation of every task in `tasks` that the KB knows.
pub fn evaluate(kb: &KnowledgeBase, tasks: &[TaskDataset], opts: &EvalOptions) -> Result<EvalReport> {
    if kb.is_empty() {
        return Err(Error::EmptyKnowledgeBase);
    }
    if let Some(k) = opts.top_k {
        if k == 0 {
            return Err(Error::Config("top_k must be >= 1".into()));
        }
    }
    let predictor = kb.lda().predictor(opts.gamma)?;
    let entries = kb.len();
    let mut per_task = Vec::new();
    let (mut total, mut correct, mut retrieved_ok) = (0usize, 0usize, 0usize);
    for t in tasks {
        let Some(own) = kb.position(t.task) else { continue };
        let mut routed = vec![0usize; entries + 1];
        let (mut c, mut r) = (0usize, 0usize);
        for s in &t.test {
            if s.x.len() != kb.backbone().input_dim() {
                return Err(Error::Shape(format!(
                    "task {}: input dim {} differs from backbone input dim {}",
                    t.task,
                    s.x.len(),
                    kb.backbone().input_dim()
                )));
            }
            let (entry, h) = match opts.retrieval {
                RetrievalMode::Signature => {
                    let hs = kb.embed_all(&s.x)?;
                    let e = match opts.top_k {
                        Some(k) => {
                            let task = kb.retrieve_topk_embedded(&hs, k)?;
                            kb.position(task).expect("retrieved task is in the KB")
                        }
                        None => kb.retrieve_embedded(&hs, opts.score)?.entry,
                    };
                    (Some(e), hs[e].clone())
                }
                RetrievalMode::Oracle => (Some(own), kb.adapted(own).embed(&s.x, None)?),
                RetrievalMode::LastTask => {
                    let e = entries - 1;
                    (Some(e), kb.adapted(e).embed(&s.x, None)?)
                }
                RetrievalMode::None => (None, kb.backbone().embed(&s.x, None)?),
            };
            routed[entry.unwrap_or(entries)] += 1;
            if entry == Some(own) {
                r += 1;
            }
            if predictor.predict(&h)? == s.label {
                c += 1;
            }
        }
        if t.test.is_empty() {
            continue;
        }
        total += t.test.len();
        correct += c;
        retrieved_ok += r;
        per_task.push(TaskEval {
            task: t.task,
            samples: t.test.len(),
            accuracy: c as f64 / t.test.len() as f64,
            retrieval_accuracy: r as f64 / t.test.len() as f64,
            retrieved: routed,
        });
    }
    if total == 0 {
        return Err(Error::InsufficientData("no test samples for the knowledge base's tasks".into()));
    }
    Ok(EvalReport {
        options: *opts,
        samples: total,
        accuracy: correct as f64 / total as f64,
        retrieval_accuracy: retrieved_ok as f64 / total as f64,
        per_task,
    })
}

/// The KB restricted to its first `kappa` entries, with LDA statistics
/// re-accumulated from those tasks' training splits in training order.
pub fn prefix_kb(kb: &KnowledgeBase, tasks: &[TaskDataset], kappa: usize) -> Result<KnowledgeBase> {
    if kappa == 0 || kappa > kb.len() {
        return Err(Error::Config(format!("prefix length {kappa} outside 1..={}", kb.len())));
    }
    let d = kb.backbone().embedding_dim();
    let m = kb.lda().tasks_seen().max(kb.len());
    let mut lda = LdaStats::new(d, 0);
    lda.set_gamma(kb.lda().gamma())?;
    let mut out = KnowledgeBase::new(kb.backbone().clone(), lda, kb.meta().clone())?;
    for e in &kb.entries()[..kappa] {
        out.commit_task(e.multikey.clone(), e.unit.clone(), e.transfer.clone())?;
        let t = tasks
            .iter()
            .find(|t| t.task == e.task)
            .ok_or_else(|| Error::Data(format!("stream lacks task {}", e.task)))?;
        let xs: Vec<&DVector<f64>> = t.train.iter().map(|s| &s.x).collect();
        let hs = embed_samples(out.adapted(out.len() - 1), &xs)?;
        let lda = out.lda_mut();
        lda.register_classes(t.classes.iter().copied().max().unwrap_or(0) + 1);
        for (h, s) in hs.iter().zip(&t.train) {
            lda.accumulate(h, s.label, t.train.len(), m)?;
        }
        lda.mark_task_done();
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncrementalReport {
    pub acc: AccMatrix,
    pub average_accuracy: Vec<f64>,
    /// `forgetting[κ−2]` for κ ≥ 2.
    pub forgetting: Vec<f64>,
}

pub fn evaluate_incremental(
    kb: &KnowledgeBase,
    tasks: &[TaskDataset],
    opts: &EvalOptions,
) -> Result<IncrementalReport> {
    let n = kb.len();
    let mut acc = AccMatrix::new(n);
    for kappa in 1..=n {
        let prefix = prefix_kb(kb, tasks, kappa)?;
        let report = evaluate(&prefix, tasks, opts)?;
        for te in &report.per_task {
            let tau = kb.position(te.task).expect("task in KB") + 1;
            acc.set(tau, kappa, te.accuracy)?;
        }
    }
    let average_accuracy = (1..=n).map(|k| metrics::average_accuracy(&acc, k)).collect::<Result<_>>()?;
    let forgetting = (2..=n).map(|k| metrics::forgetting(&acc, k)).collect::<Result<_>>()?;
    Ok(IncrementalReport {
        acc,
        average_accuracy,
        forgetting,
    })
}

/// Measured separation, log-volume gap and variance factors for every
/// (task, component) of the KB, using each task's test split assigned to
/// its nearest own component.
pub fn bound_report(kb: &KnowledgeBase, tasks: &[TaskDataset], eps: f64) -> Result<BoundReport> {
    if kb.is_empty() {
        return Err(Error::EmptyKnowledgeBase);
    }
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::Config(format!("eps must lie in (0, 1), got {eps}")));
    }
    let d = kb.backbone().embedding_dim();
    let entries = kb.entries();
    let total_components: usize = entries.iter().map(|e| e.multikey.len()).sum();
    let mut rows = Vec::with_capacity(total_components);
    let mut verdicts = Vec::with_capacity(entries.len());
    for (k, entry) in entries.iter().enumerate() {
        let t = tasks
            .iter()
            .find(|t| t.task == entry.task)
            .ok_or_else(|| Error::Data(format!("stream lacks task {}", entry.task)))?;
        let xs: Vec<&DVector<f64>> = t.test.iter().map(|s| &s.x).collect();
        // embeddings of this task's test data under every module
        let under: Vec<Vec<DVector<f64>>> = (0..entries.len())
            .map(|i| embed_samples(kb.adapted(i), &xs))
            .collect::<Result<_>>()?;
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); entry.multikey.len()];
        let mut misretrieved = vec![false; xs.len()];
        for j in 0..xs.len() {
            let (comp, _) = entry.multikey.nearest(&under[k][j])?;
            groups[comp].push(j);
            let hs: Vec<DVector<f64>> = under.iter().map(|u| u[j].clone()).collect();
            misretrieved[j] = kb.retrieve_embedded(&hs, ScoreRule::Mahalanobis)?.entry != k;
        }
        let candidates = total_components - entry.multikey.len() + 1;
        let mut task_min: Option<f64> = None;
        let mut task_required: Option<f64> = None;
        let mut task_ok = true;
        let mut any_row = false;
        for (tcomp, members) in groups.iter().enumerate() {
            let true_comp = &entry.multikey.components()[tcomp];
            let mut row = BoundRow {
                task: entry.task,
                component: tcomp,
                samples: members.len(),
                delta: None,
                kappa: None,
                sigma2: None,
                candidates,
                min_delta: None,
                bound: None,
                empirical_error: None,
                exceeds: None,
                sigma2_vector: None,
                min_delta_vector: None,
            };
            if members.len() >= 2 && entries.len() > 1 {
                let (mut delta, mut sigma2, mut kappa) = (f64::INFINITY, 0.0f64, f64::INFINITY);
                let mut sigma2_vec = 0.0f64;
                for (i, other) in entries.iter().enumerate() {
                    if i == k {
                        continue;
                    }
                    let cloud: Vec<DVector<f64>> = members.iter().map(|&j| under[i][j].clone()).collect();
                    sigma2_vec = sigma2_vec.max(theory::embedding_variance(&cloud)?);
                    for c in other.multikey.components() {
                        delta = delta.min(theory::empirical_separation(&cloud, c)?);
                        sigma2 = sigma2.max(theory::empirical_sigma2(&cloud, c)?);
                        kappa = kappa.min(c.log_volume() - true_comp.log_volume());
                    }
                }
                let sigma2 = sigma2.max(SIGMA2_FLOOR);
                let required = theory::min_delta(eps, d, kappa, sigma2, candidates)?;
                let bound = theory::error_bound(&BoundParams {
                    d,
                    delta,
                    kappa,
                    sigma2,
                    false_components: candidates - 1,
                });
                let err = members.iter().filter(|&&j| misretrieved[j]).count() as f64 / members.len() as f64;
                let exceeds = delta > required;
                row.delta = Some(delta);
                row.kappa = Some(kappa);
                row.sigma2 = Some(sigma2);
                row.min_delta = Some(required);
                row.bound = Some(bound);
                row.empirical_error = Some(err);
                row.exceeds = Some(exceeds);
                let sigma2_vec = sigma2_vec.max(SIGMA2_FLOOR);
                row.sigma2_vector = Some(sigma2_vec);
                row.min_delta_vector = Some(theory::min_delta(eps, d, kappa, sigma2_vec, candidates)?);
                task_ok &= exceeds;
                any_row = true;
                if task_min.is_none_or(|m| delta < m) {
                    task_min = Some(delta);
                    task_required = Some(required);
                }
            }
            rows.push(row);
        }
        verdicts.push(TaskVerdict {
            task: entry.task,
            min_delta_measured: task_min,
            min_delta_required: task_required,
            exceeds: any_row && task_ok,
        });
    }
    let all = verdicts.iter().all(|v| v.exceeds);
    Ok(BoundReport {
        eps,
        rows,
        tasks: verdicts,
        all_tasks_exceed: all,
    })
}
