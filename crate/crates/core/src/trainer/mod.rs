//! Pretraining, meta-training and evaluation.
//!
//! A run pretrains with momentum SGD on the training loss, then takes
//! `meta_iters` meta steps. Each meta step adapts a copy of the parameters
//! on a training batch (`Θ' = Θ − α ∇L_tr(Θ)`) and moves the originals
//! along the validation gradient taken at the adapted copy. At test time
//! the parameters receive one more adaptation on the full training set
//! before scoring.

mod config;
mod eval;
mod sampler;

use std::time::Instant;

use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Var};
use crate::data::DatasetBundle;
use crate::graph::{estimate_lambda_max, normalized_laplacian, GraphError};
use crate::model::{
    class_scores, encode_nodes, linear_scores, mix_seed, Architecture, GilParameters, Mode,
    ModelError, ParamVars, PreparedGraph, Readout, References, ScoreVector,
};
use crate::reachability::{estimate_dp, ReachError, ReachabilityTable};
use crate::tensor::Tensor;

pub use config::{MetaGradMode, PoolingName, RunConfig, Variant};
pub use eval::{step_buckets, ClassTally, Evaluation, StepBucket};
pub use sampler::{sample_with_replacement, EpochSampler};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Reach(#[from] ReachError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(
        "non-finite {phase} loss at iteration {iteration} (lr {lr}, gradient norm {grad_norm})"
    )]
    NonFinite {
        phase: Phase,
        iteration: usize,
        lr: f64,
        grad_norm: f64,
    },
}

impl TrainError {
    /// Divergence as opposed to bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            TrainError::NonFinite { .. }
                | TrainError::Model(ModelError::Autodiff(AutodiffError::NonFinite { .. }))
        )
    }
}

impl From<AutodiffError> for TrainError {
    fn from(e: AutodiffError) -> Self {
        TrainError::Model(e.into())
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Stage of training; also salts the dropout seeds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Inner,
    Meta,
    Adapt,
    TrainOnly,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Inner => "inner",
            Phase::Meta => "meta",
            Phase::Adapt => "adapt",
            Phase::TrainOnly => "train_only",
        }
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One row of `metrics.tsv`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub phase: &'static str,
    pub iteration: usize,
    pub split: &'static str,
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub lr: f64,
    pub elapsed_s: f64,
}

impl MetricRecord {
    pub const TSV_HEADER: &'static str = "phase\titeration\tsplit\tloss\taccuracy\tlr\telapsed_s";

    pub fn to_tsv(&self) -> String {
        let acc = self.accuracy.map_or_else(|| "NA".to_string(), |a| format!("{a:.6}"));
        format!(
            "{}\t{}\t{}\t{:.6}\t{}\t{}\t{:.3}",
            self.phase, self.iteration, self.split, self.loss, acc, self.lr, self.elapsed_s
        )
    }
}

/// Validation performance after `iteration` post-pretraining steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub iteration: usize,
    pub accuracy: f64,
    pub loss: f64,
}

/// Outcome of a single meta step.
#[derive(Clone, Debug)]
pub struct MetaStep {
    pub params: GilParameters,
    pub train_loss: f64,
    pub val_loss: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    /// Trained parameters, before test-time adaptation.
    pub params: GilParameters,
    pub test: Evaluation,
    pub buckets: Vec<StepBucket>,
    pub curve: Vec<CurvePoint>,
    pub records: Vec<MetricRecord>,
    /// Config with every estimated quantity filled in.
    pub config: RunConfig,
}

/// A dataset with every operator a run needs, prepared once.
pub struct Experiment<'a> {
    bundle: &'a DatasetBundle,
    config: RunConfig,
    arch: Architecture,
    prepared: PreparedGraph,
    table: Option<ReachabilityTable>,
    refs: Option<References>,
    supervised: Vec<usize>,
    lambda_max: f64,
}

impl<'a> Experiment<'a> {
    pub fn new(bundle: &'a DatasetBundle, config: RunConfig) -> Result<Self> {
        Self::build(bundle, config, None)
    }

    /// Uses a prebuilt reachability table, e.g. one read from a cache.
    pub fn with_table(
        bundle: &'a DatasetBundle,
        config: RunConfig,
        table: ReachabilityTable,
    ) -> Result<Self> {
        Self::build(bundle, config, Some(table))
    }

    fn build(
        bundle: &'a DatasetBundle,
        mut config: RunConfig,
        table: Option<ReachabilityTable>,
    ) -> Result<Self> {
        config.validate()?;
        let g = &bundle.graph;
        let split = &bundle.split;
        if split.train.is_empty() {
            return Err(TrainError::Config("the training split is empty".into()));
        }
        if config.variant.meta_trained() && config.meta_iters > 0 && split.val.is_empty() {
            return Err(TrainError::Config(format!(
                "variant {} needs validation nodes",
                config.variant
            )));
        }
        if config.meta_grad_mode == MetaGradMode::Full && config.inner_steps > 1 {
            log::warn!(
                "differentiating through {} inner steps; memory grows with every step",
                config.inner_steps
            );
        }

        let dp = match config.d_p_override {
            Some(dp) => dp,
            None => estimate_dp(g, config.dp_sample_size, config.seed),
        };
        config.d_p_override = Some(dp);
        let lambda_max = if config.estimate_lambda_max {
            estimate_lambda_max(&normalized_laplacian(g), 50, 1e-6)
        } else {
            config.lambda_max
        };

        let arch = config.architecture(g.feature_dim(), g.num_classes(), dp);
        let prepared = PreparedGraph::new(g, config.cheb_order, lambda_max)?;
        let refs = match arch.readout {
            Readout::Relation(_) => Some(References::new(g, &split.train)?),
            Readout::Linear => None,
        };
        let table = match (table, arch.uses_reachability()) {
            (Some(t), true) => {
                if t.steps() != dp || split.train.iter().any(|&r| t.reference_index(r).is_none()) {
                    return Err(TrainError::Config(
                        "supplied reachability table does not match the training split".into(),
                    ));
                }
                Some(t)
            }
            (None, true) => Some(ReachabilityTable::build(g, &split.train, dp)?),
            (_, false) => None,
        };
        let mut supervised = split.train.clone();
        if config.variant.trains_on_val() {
            supervised.extend(split.val.iter().copied().filter(|&v| g.label(v).is_some()));
        }
        log::debug!(
            "{}: n={} d={} C={} train={} d_p={} lambda_max={}",
            bundle.name,
            g.num_nodes(),
            g.feature_dim(),
            g.num_classes(),
            split.train.len(),
            dp,
            lambda_max
        );
        Ok(Self {
            bundle,
            config,
            arch,
            prepared,
            table,
            refs,
            supervised,
            lambda_max,
        })
    }

    /// The config with the estimated `d_p` recorded.
    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn bundle(&self) -> &DatasetBundle {
        self.bundle
    }

    pub fn steps(&self) -> usize {
        self.arch.steps
    }

    pub fn lambda_max(&self) -> f64 {
        self.lambda_max
    }

    pub fn table(&self) -> Option<&ReachabilityTable> {
        self.table.as_ref()
    }

    pub fn references(&self) -> Option<&References> {
        self.refs.as_ref()
    }

    /// Nodes whose labels drive the training loss.
    pub fn supervised(&self) -> &[usize] {
        &self.supervised
    }

    pub fn init_params(&self) -> GilParameters {
        GilParameters::init(&self.arch, mix_seed(&[self.config.seed, 1]))
    }

    /// Dropout mode for step `step` of phase `phase` at `iteration`.
    pub fn train_mode(&self, iteration: usize, phase: Phase, step: usize) -> Mode {
        Mode::train(mix_seed(&[
            self.config.seed,
            iteration as u64,
            phase as u64,
            step as u64,
        ]))
    }

    fn targets(&self, queries: &[usize]) -> Vec<usize> {
        queries
            .iter()
            .map(|&q| {
                self.bundle
                    .graph
                    .label(q)
                    .expect("loss queries are labeled")
            })
            .collect()
    }

    /// Mean cross-entropy of `queries` recorded on `tape`.
    pub fn loss(
        &self,
        tape: &mut Tape,
        params: &ParamVars,
        queries: &[usize],
        exclude_self: bool,
        mode: Mode,
    ) -> Result<Var> {
        let embeddings = encode_nodes(tape, &self.arch, &self.prepared, params, mode)?;
        let scores = match &self.refs {
            None => linear_scores(tape, params, embeddings, queries)?,
            Some(refs) => class_scores(
                tape,
                &self.arch,
                params,
                embeddings,
                self.table.as_ref(),
                refs,
                queries,
                exclude_self,
            )?,
        };
        Ok(tape.softmax_cross_entropy(scores, &self.targets(queries))?)
    }

    /// Loss value and its gradient with respect to every block.
    pub fn loss_and_grad(
        &self,
        params: &GilParameters,
        queries: &[usize],
        exclude_self: bool,
        mode: Mode,
    ) -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let vars = params.leaves(&mut tape);
        let loss = self.loss(&mut tape, &vars, queries, exclude_self, mode)?;
        let value = tape.value(loss).item();
        let wrt: Vec<Var> = vars.blocks().into_iter().copied().collect();
        let grads = tape.gradients(loss, &wrt)?;
        Ok((value, grads))
    }

    /// `inner_steps` plain gradient steps of size `α` on the training loss
    /// of `queries`.
    pub fn inner_update(
        &self,
        params: &GilParameters,
        queries: &[usize],
        iteration: usize,
        phase: Phase,
    ) -> Result<(GilParameters, f64)> {
        let mut adapted = params.clone();
        let mut first_loss = f64::NAN;
        for s in 0..self.config.inner_steps {
            let mode = self.train_mode(iteration, phase, s);
            let step = self.loss_and_grad(&adapted, queries, true, mode);
            let (loss, grads) = self.in_context(step, phase, iteration, self.config.alpha)?;
            self.check(phase, iteration, self.config.alpha, loss, &grads)?;
            if s == 0 {
                first_loss = loss;
            }
            adapted = adapted.sgd_step(&grads, self.config.alpha);
        }
        Ok((adapted, first_loss))
    }

    /// The meta-gradient of one step, before it is applied.
    pub fn meta_gradient(
        &self,
        params: &GilParameters,
        train_batch: &[usize],
        val_batch: &[usize],
        iteration: usize,
    ) -> Result<(f64, f64, Vec<Tensor>)> {
        let val_mode = self.train_mode(iteration, Phase::Meta, 0);
        match self.config.meta_grad_mode {
            MetaGradMode::FirstOrder => {
                let (adapted, train_loss) =
                    self.inner_update(params, train_batch, iteration, Phase::Inner)?;
                let (val_loss, grads) = self.loss_and_grad(&adapted, val_batch, true, val_mode)?;
                Ok((train_loss, val_loss, grads))
            }
            MetaGradMode::Full => {
                let mut tape = Tape::new();
                let theta = params.leaves(&mut tape);
                let wrt: Vec<Var> = theta.blocks().into_iter().copied().collect();
                let mut current = theta.clone();
                let mut train_loss = f64::NAN;
                for s in 0..self.config.inner_steps {
                    let mode = self.train_mode(iteration, Phase::Inner, s);
                    let loss = self.loss(&mut tape, &current, train_batch, true, mode)?;
                    if s == 0 {
                        train_loss = tape.value(loss).item();
                    }
                    let blocks: Vec<Var> = current.blocks().into_iter().copied().collect();
                    let grads = tape.grad(loss, &blocks)?;
                    let mut updated = Vec::with_capacity(blocks.len());
                    for (&p, &g) in blocks.iter().zip(&grads) {
                        let step = tape.scale(g, self.config.alpha)?;
                        updated.push(tape.sub(p, step)?);
                    }
                    current = current.with_blocks(updated);
                }
                let val = self.loss(&mut tape, &current, val_batch, true, val_mode)?;
                let val_loss = tape.value(val).item();
                let grads = tape.gradients(val, &wrt)?;
                Ok((train_loss, val_loss, grads))
            }
        }
    }

    /// `Θ ← Θ − β · G` with `G` the meta-gradient.
    pub fn meta_step(
        &self,
        params: &GilParameters,
        train_batch: &[usize],
        val_batch: &[usize],
        iteration: usize,
    ) -> Result<MetaStep> {
        let meta = self.meta_gradient(params, train_batch, val_batch, iteration);
        let (train_loss, val_loss, grads) =
            self.in_context(meta, Phase::Meta, iteration, self.config.beta)?;
        let grad_norm = self.check(Phase::Meta, iteration, self.config.beta, val_loss, &grads)?;
        Ok(MetaStep {
            params: params.sgd_step(&grads, self.config.beta),
            train_loss,
            val_loss,
            grad_norm,
        })
    }

    /// Attaches training context to a non-finite value caught on the tape.
    fn in_context<T>(&self, r: Result<T>, phase: Phase, iteration: usize, lr: f64) -> Result<T> {
        r.map_err(|e| {
            if e.is_numeric() && !matches!(e, TrainError::NonFinite { .. }) {
                log::error!("{e}");
                TrainError::NonFinite {
                    phase,
                    iteration,
                    lr,
                    grad_norm: f64::NAN,
                }
            } else {
                e
            }
        })
    }

    /// Fails on a non-finite loss or gradient; returns the gradient norm.
    fn check(&self, phase: Phase, iteration: usize, lr: f64, loss: f64, grads: &[Tensor]) -> Result<f64> {
        let grad_norm = grads.iter().map(|g| g.norm().powi(2)).sum::<f64>().sqrt();
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(TrainError::NonFinite {
                phase,
                iteration,
                lr,
                grad_norm,
            });
        }
        Ok(grad_norm)
    }

    /// Scores `queries` in eval mode. With `adapt`, the parameters first get
    /// one inner update on the full training set, as at test time.
    pub fn evaluate(&self, params: &GilParameters, queries: &[usize], adapt: bool) -> Result<Evaluation> {
        let adapted;
        let params = if adapt && self.refs.is_some() {
            let iteration = self.config.pretrain_iters + self.config.meta_iters;
            adapted = self
                .inner_update(params, &self.bundle.split.train, iteration, Phase::Adapt)?
                .0;
            &adapted
        } else {
            params
        };
        let g = &self.bundle.graph;
        let queries: Vec<usize> = queries.iter().copied().filter(|&q| g.label(q).is_some()).collect();
        let labels = self.targets(&queries);
        let scores = self.scores(params, &queries)?;
        let predictions = ScoreVector::new(scores.clone()).predictions();
        let mut loss = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = scores.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[y];
        }
        let loss = loss / labels.len().max(1) as f64;
        Ok(Evaluation::new(queries, predictions, labels, loss, g.num_classes()))
    }

    /// Eval-mode scores, `|queries| × C`, computed in chunks.
    pub fn scores(&self, params: &GilParameters, queries: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = params.constants(&mut tape);
        let embeddings = encode_nodes(&mut tape, &self.arch, &self.prepared, &vars, Mode::EVAL)?;
        let c = self.arch.num_classes;
        let mut out = Vec::with_capacity(queries.len() * c);
        for chunk in queries.chunks(self.config.eval_chunk) {
            let mark = tape.len();
            let s = match &self.refs {
                None => linear_scores(&mut tape, &vars, embeddings, chunk)?,
                Some(refs) => class_scores(
                    &mut tape,
                    &self.arch,
                    &vars,
                    embeddings,
                    self.table.as_ref(),
                    refs,
                    chunk,
                    false,
                )?,
            };
            out.extend_from_slice(tape.value(s).data());
            tape.truncate(mark);
        }
        Ok(Tensor::from_vec(queries.len(), c, out))
    }

    /// Adapted test accuracy plus its breakdown by distance to the
    /// training nodes.
    pub fn test(&self, params: &GilParameters) -> Result<(Evaluation, Vec<StepBucket>)> {
        let eval = self.evaluate(params, &self.bundle.split.test, true)?;
        let buckets = step_buckets(
            &self.bundle.graph,
            &self.bundle.split.train,
            &eval.queries,
            &eval.correct(),
        );
        Ok((eval, buckets))
    }

    /// Momentum SGD on the training loss, with step decay.
    pub fn pretrain(
        &self,
        params: GilParameters,
        sampler: &mut EpochSampler,
        records: &mut Vec<MetricRecord>,
        clock: Instant,
    ) -> Result<GilParameters> {
        let cfg = &self.config;
        let mut params = params;
        let mut velocity: Vec<Tensor> = params
            .blocks()
            .iter()
            .map(|t| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        for it in 0..cfg.pretrain_iters {
            let lr = cfg.lr_pretrain * cfg.decay.powi((it / cfg.decay_every) as i32);
            let batch = sampler.next_batch(cfg.batch_size);
            let mode = self.train_mode(it, Phase::Pretrain, 0);
            let step = self.loss_and_grad(&params, &batch, true, mode);
            let (loss, grads) = self.in_context(step, Phase::Pretrain, it, lr)?;
            self.check(Phase::Pretrain, it, lr, loss, &grads)?;
            for (v, g) in velocity.iter_mut().zip(&grads) {
                *v = v.zip_map(g, |a, b| cfg.momentum * a + b);
            }
            params = params.sgd_step(&velocity, lr);
            records.push(MetricRecord {
                phase: Phase::Pretrain.name(),
                iteration: it,
                split: "train",
                loss,
                accuracy: None,
                lr,
                elapsed_s: clock.elapsed().as_secs_f64(),
            });
        }
        Ok(params)
    }

    /// The complete protocol of the configured variant.
    pub fn run(&self) -> Result<RunOutcome> {
        let cfg = &self.config;
        let clock = Instant::now();
        let mut records = Vec::new();
        let mut curve = Vec::new();
        let mut sampler = EpochSampler::new(&self.supervised, mix_seed(&[cfg.seed, 2]));
        let mut val_rng = sampler::rng(mix_seed(&[cfg.seed, 3]));
        let val = &self.bundle.split.val;

        let mut params = self.pretrain(self.init_params(), &mut sampler, &mut records, clock)?;
        let meta = cfg.variant.meta_trained();
        let adapt = self.refs.is_some();
        for it in 0..cfg.meta_iters {
            if it % cfg.eval_every == 0 && !val.is_empty() {
                self.record_val(&params, it, adapt, &mut curve, &mut records, clock)?;
            }
            let global = cfg.pretrain_iters + it;
            let batch = sampler.next_batch(cfg.batch_size);
            if meta {
                let val_batch = sample_with_replacement(val, cfg.batch_size, &mut val_rng);
                let step = self.meta_step(&params, &batch, &val_batch, global)?;
                params = step.params;
                records.push(MetricRecord {
                    phase: Phase::Meta.name(),
                    iteration: it,
                    split: "val_batch",
                    loss: step.val_loss,
                    accuracy: None,
                    lr: cfg.beta,
                    elapsed_s: clock.elapsed().as_secs_f64(),
                });
            } else {
                let mode = self.train_mode(global, Phase::TrainOnly, 0);
                let step = self.loss_and_grad(&params, &batch, true, mode);
                let (loss, grads) = self.in_context(step, Phase::TrainOnly, global, cfg.beta)?;
                self.check(Phase::TrainOnly, global, cfg.beta, loss, &grads)?;
                params = params.sgd_step(&grads, cfg.beta);
                records.push(MetricRecord {
                    phase: Phase::TrainOnly.name(),
                    iteration: it,
                    split: "train",
                    loss,
                    accuracy: None,
                    lr: cfg.beta,
                    elapsed_s: clock.elapsed().as_secs_f64(),
                });
            }
        }
        if !val.is_empty() {
            self.record_val(&params, cfg.meta_iters, adapt, &mut curve, &mut records, clock)?;
        }

        let (test, buckets) = self.test(&params)?;
        records.push(MetricRecord {
            phase: "final",
            iteration: cfg.meta_iters,
            split: "test",
            loss: test.loss,
            accuracy: Some(test.accuracy),
            lr: 0.0,
            elapsed_s: clock.elapsed().as_secs_f64(),
        });
        log::info!(
            "{} {}: test accuracy {:.4} after {:.1}s",
            self.bundle.name,
            cfg.variant,
            test.accuracy,
            clock.elapsed().as_secs_f64()
        );
        Ok(RunOutcome {
            params,
            test,
            buckets,
            curve,
            records,
            config: cfg.clone(),
        })
    }

    fn record_val(
        &self,
        params: &GilParameters,
        iteration: usize,
        adapt: bool,
        curve: &mut Vec<CurvePoint>,
        records: &mut Vec<MetricRecord>,
        clock: Instant,
    ) -> Result<()> {
        let e = self.evaluate(params, &self.bundle.split.val, adapt)?;
        log::debug!("iteration {iteration}: val accuracy {:.4}", e.accuracy);
        curve.push(CurvePoint {
            iteration,
            accuracy: e.accuracy,
            loss: e.loss,
        });
        records.push(MetricRecord {
            phase: "eval",
            iteration,
            split: "val",
            loss: e.loss,
            accuracy: Some(e.accuracy),
            lr: 0.0,
            elapsed_s: clock.elapsed().as_secs_f64(),
        });
        Ok(())
    }
}

#[cfg(test)]
mod tests;
