//! Architecture search: ablation-based discretization of the
//! super-network, a bi-level baseline driven by the architectural
//! parameters, and sub-network retraining with early stopping.

use std::collections::BTreeSet;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{epoch_order, WindowedDataset};
use crate::diffcore::{AdamW, LrSchedule, ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::hypernet::HyperNetwork;
use crate::metrics::MetricsReport;
use crate::nnops::{batch_mse_loss, forecast_window_on_tape, DropoutGen, ForecastModel, ModelConfig};
use crate::rng::Prng;
use crate::searchspace::ArchitectureSpec;

/// In which sequence nodes are discretized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeOrder {
    /// Block 1 → block N; within a block: enc_attn, attn, enc_ffn, act, k.
    Forward,
    Reverse,
}

/// Knobs of the search and retraining procedures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    /// Warm-up epochs for the super-network before any discretization.
    pub k1: usize,
    /// Recovery epochs after each node is discretized.
    pub k2: usize,
    /// Retraining epochs for the final sub-network.
    pub k3: usize,
    /// Early-stop after this many evaluations without improvement.
    pub patience: usize,
    pub eval_every_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Learning rate / decay of the architectural parameters (bi-level
    /// baseline only; the ablation search never moves them).
    pub alpha_lr: f64,
    pub alpha_weight_decay: f64,
    pub seed: u64,
    pub node_order: NodeOrder,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            k1: 5,
            k2: 1,
            k3: 50,
            patience: 10,
            eval_every_steps: 100,
            batch_size: 32,
            lr: 1e-4,
            weight_decay: 0.0,
            alpha_lr: 3e-4,
            alpha_weight_decay: 1e-3,
            seed: 0,
            node_order: NodeOrder::Forward,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("k1", self.k1), ("k2", self.k2), ("k3", self.k3)] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be at least 1")));
            }
        }
        if self.patience == 0 {
            return Err(Error::config("patience must be at least 1"));
        }
        if self.eval_every_steps == 0 {
            return Err(Error::config("eval_every_steps must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        for (name, v) in [
            ("lr", self.lr),
            ("weight_decay", self.weight_decay),
            ("alpha_lr", self.alpha_lr),
            ("alpha_weight_decay", self.alpha_weight_decay),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Audit record of one discretization decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeDecision {
    pub node_id: usize,
    pub node_name: String,
    /// Candidates that were in play (unmasked) when the node was scored.
    pub candidates: Vec<String>,
    pub candidate_indices: Vec<usize>,
    /// Contribution score of each candidate, reported as the validation
    /// loss of the network with that candidate masked: higher means
    /// masking hurts more, so the candidate is more critical.
    pub scores: Vec<f64>,
    /// Candidate index kept: argmax of `scores`, ties to the lowest index.
    pub chosen: usize,
    pub chosen_name: String,
    pub val_loss_after_discretization: f64,
    pub val_loss_after_recovery: f64,
}

/// All decisions of one search run, in discretization order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub records: Vec<NodeDecision>,
}

/// Wall-clock seconds per phase.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub supernet_train_secs: f64,
    pub scoring_secs: f64,
    pub recovery_secs: f64,
    #[serde(default)]
    pub retrain_secs: f64,
}

impl PhaseTimings {
    pub fn search_total_secs(&self) -> f64 {
        self.supernet_train_secs + self.scoring_secs + self.recovery_secs
    }
}

#[derive(Debug, Clone)]
pub struct AbSearchOutcome {
    pub spec: ArchitectureSpec,
    pub timings: PhaseTimings,
    pub model_steps: usize,
    pub final_val_loss: f64,
    /// Node steps where validation loss after recovery exceeded the loss
    /// right after discretization.
    pub recovery_regressions: usize,
}

#[derive(Debug, Clone)]
pub struct DartsOutcome {
    pub spec: ArchitectureSpec,
    pub model_steps: usize,
    pub alpha_steps: usize,
}

/// First index of the maximum; ties resolve to the lowest index.
pub fn argmax_lowest_tie(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Anything trainable by minibatch gradient descent on window pairs.
trait TrainableNet {
    fn param_set_mut(&mut self) -> &mut ParamSet;
    fn dropout_p(&self) -> f64;
    fn batch_loss_on(
        &self,
        tape: &mut Tape,
        batch: &[(&[f64], &[f64])],
        drop: &mut Option<DropoutGen<'_>>,
    ) -> Result<Var>;
}

impl TrainableNet for HyperNetwork {
    fn param_set_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
    fn dropout_p(&self) -> f64 {
        self.cfg.dropout
    }
    fn batch_loss_on(
        &self,
        tape: &mut Tape,
        batch: &[(&[f64], &[f64])],
        drop: &mut Option<DropoutGen<'_>>,
    ) -> Result<Var> {
        self.batch_loss(tape, batch, drop)
    }
}

impl TrainableNet for ForecastModel {
    fn param_set_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
    fn dropout_p(&self) -> f64 {
        self.cfg.dropout
    }
    fn batch_loss_on(
        &self,
        tape: &mut Tape,
        batch: &[(&[f64], &[f64])],
        drop: &mut Option<DropoutGen<'_>>,
    ) -> Result<Var> {
        let choices = self.choices();
        batch_mse_loss(tape, &self.params, &self.ids, &self.cfg, &choices, batch, drop)
    }
}

fn take_batch<'p>(
    pairs: &[(&'p [f64], &'p [f64])],
    order: &[usize],
    from: usize,
    batch_size: usize,
) -> Vec<(&'p [f64], &'p [f64])> {
    order[from..(from + batch_size).min(order.len())]
        .iter()
        .map(|&i| pairs[i])
        .collect()
}

fn gradient_step<N: TrainableNet>(
    net: &mut N,
    batch: &[(&[f64], &[f64])],
    drop_rng: &mut Prng,
    opt: &mut AdamW,
) -> Result<()> {
    let p = net.dropout_p();
    let mut tape = Tape::new();
    let loss = {
        let mut drop = if p > 0.0 {
            Some(DropoutGen { p, rng: drop_rng })
        } else {
            None
        };
        net.batch_loss_on(&mut tape, batch, &mut drop)?
    };
    tape.backward(loss)?;
    let set = net.param_set_mut();
    set.zero_grads();
    tape.accumulate_param_grads(set);
    opt.step(set);
    Ok(())
}

/// One pass over the training pairs in a fresh shuffled order. The hook
/// runs after every optimizer step and may stop the epoch by returning
/// false. Returns (steps taken, ran to completion).
fn run_epoch<N: TrainableNet>(
    net: &mut N,
    pairs: &[(&[f64], &[f64])],
    batch_size: usize,
    shuffle_rng: &mut Prng,
    drop_rng: &mut Prng,
    opt: &mut AdamW,
    mut after_step: impl FnMut(&N) -> Result<bool>,
) -> Result<(usize, bool)> {
    let order = epoch_order(pairs.len(), shuffle_rng);
    let mut steps = 0;
    let mut from = 0;
    while from < order.len() {
        let batch = take_batch(pairs, &order, from, batch_size);
        from += batch.len();
        gradient_step(net, &batch, drop_rng, opt)?;
        steps += 1;
        if !after_step(net)? {
            return Ok((steps, false));
        }
    }
    Ok((steps, true))
}

fn steps_per_epoch(num_pairs: usize, batch_size: usize) -> usize {
    num_pairs.div_ceil(batch_size)
}

/// Mean per-window MSE of the mixed network over a dataset, evaluated in
/// fixed chunks with dropout off. Deterministic: repeated calls are
/// bit-identical.
pub fn hypernet_val_loss(hn: &HyperNetwork, ds: &WindowedDataset, chunk: usize) -> Result<f64> {
    if ds.windows.is_empty() {
        return Err(Error::config("validation set is empty"));
    }
    let pairs = ds.pairs();
    let mut sum = 0.0;
    for part in pairs.chunks(chunk.max(1)) {
        let mut tape = Tape::new();
        let loss = hn.batch_loss(&mut tape, part, &mut None)?;
        sum += tape.value(loss) * part.len() as f64;
    }
    Ok(sum / pairs.len() as f64)
}

/// Mean per-window MSE of a discretized model over a dataset.
pub fn model_val_mse(model: &ForecastModel, ds: &WindowedDataset) -> Result<f64> {
    if ds.windows.is_empty() {
        return Err(Error::config("validation set is empty"));
    }
    let choices = model.choices();
    let mut sum = 0.0;
    let mut count = 0usize;
    for w in &ds.windows {
        let mut tape = Tape::new();
        let y = forecast_window_on_tape(
            &mut tape,
            &model.params,
            &model.ids,
            &model.cfg,
            &choices,
            &w.lookback,
            &mut None,
        )?;
        for (a, b) in tape.data(y).iter().zip(&w.target) {
            sum += (a - b) * (a - b);
            count += 1;
        }
    }
    Ok(sum / count as f64)
}

/// Forecast every window of a dataset; returns targets and predictions
/// concatenated in dataset order.
pub fn forecast_dataset(model: &ForecastModel, ds: &WindowedDataset) -> Result<(Vec<f64>, Vec<f64>)> {
    let choices = model.choices();
    let mut y = Vec::with_capacity(ds.windows.len() * ds.horizon);
    let mut yhat = Vec::with_capacity(ds.windows.len() * ds.horizon);
    for w in &ds.windows {
        let mut tape = Tape::new();
        let out = forecast_window_on_tape(
            &mut tape,
            &model.params,
            &model.ids,
            &model.cfg,
            &choices,
            &w.lookback,
            &mut None,
        )?;
        y.extend_from_slice(&w.target);
        yhat.extend_from_slice(tape.data(out));
    }
    Ok((y, yhat))
}

/// Validation loss of the network with one candidate masked — the
/// contribution score of that candidate, up to the constant full-network
/// score. A fresh full evaluation every time; no caching.
pub fn contribution_score(
    hn: &mut HyperNetwork,
    node: usize,
    op: usize,
    val: &WindowedDataset,
    chunk: usize,
) -> Result<f64> {
    if val.windows.is_empty() {
        return Err(Error::config("validation set is empty"));
    }
    if node >= hn.num_nodes() {
        return Err(Error::usage(format!("node index {node} out of range")));
    }
    if hn.nodes[node].num_unmasked() < 2 {
        return Err(Error::state(format!(
            "node {node} needs at least two unmasked candidates to score"
        )));
    }
    let masked = hn.mask_operation(node, op)?;
    hypernet_val_loss(&masked, val, chunk)
}

fn node_display_name(hn: &HyperNetwork, node: usize) -> String {
    let n = &hn.nodes[node];
    match n.block {
        Some(b) => format!("block{b}.{}", n.slot.name()),
        None => format!("shared.{}", n.slot.name()),
    }
}

/// Ablation-based search: warm up the super-network with frozen uniform
/// architectural parameters, then per node score every candidate by
/// masking it, keep the one whose removal hurts validation loss the most,
/// and run recovery epochs before moving to the next node. Decisions are
/// appended to `trace` as they happen, so a run aborted by a numeric error
/// leaves a usable partial trace behind.
pub fn ab_darts_search(
    hn: &mut HyperNetwork,
    train: &WindowedDataset,
    val: &WindowedDataset,
    cfg: &SearchConfig,
    trace: &mut SearchTrace,
) -> Result<AbSearchOutcome> {
    cfg.validate()?;
    if train.windows.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    if val.windows.is_empty() {
        return Err(Error::config("validation set is empty"));
    }
    let alpha_before = hn.alpha_fingerprint();
    let root = Prng::new(cfg.seed).split("search");
    let mut shuffle_rng = root.split("shuffle");
    let mut drop_rng = root.split("dropout");
    let pairs = train.pairs();
    let mut opt = AdamW::new(
        &hn.params,
        hn.live_model_params(),
        LrSchedule::constant(cfg.lr),
        cfg.weight_decay,
    );
    let mut timings = PhaseTimings::default();
    let mut model_steps = 0usize;

    let t0 = Instant::now();
    for _ in 0..cfg.k1 {
        let (steps, _) = run_epoch(
            hn,
            &pairs,
            cfg.batch_size,
            &mut shuffle_rng,
            &mut drop_rng,
            &mut opt,
            |_| Ok(true),
        )?;
        model_steps += steps;
    }
    timings.supernet_train_secs = t0.elapsed().as_secs_f64();

    let mut order: Vec<usize> = (0..hn.num_nodes())
        .filter(|&i| !hn.nodes[i].is_discretized())
        .collect();
    if cfg.node_order == NodeOrder::Reverse {
        order.reverse();
    }

    let mut recovery_regressions = 0usize;
    for node in order {
        let candidates = hn.nodes[node].unmasked_indices();
        let names = hn.candidate_names(node);
        let t_score = Instant::now();
        let mut scores = Vec::with_capacity(candidates.len());
        for &op in &candidates {
            scores.push(contribution_score(hn, node, op, val, cfg.batch_size)?);
        }
        timings.scoring_secs += t_score.elapsed().as_secs_f64();

        let chosen = candidates[argmax_lowest_tie(&scores)];
        hn.discretize_node(node, chosen)?;
        let keep: BTreeSet<_> = hn.live_model_params().into_iter().collect();
        opt.retain(&keep);
        let val_loss_after_discretization = hypernet_val_loss(hn, val, cfg.batch_size)?;

        let t_rec = Instant::now();
        for _ in 0..cfg.k2 {
            let (steps, _) = run_epoch(
                hn,
                &pairs,
                cfg.batch_size,
                &mut shuffle_rng,
                &mut drop_rng,
                &mut opt,
                |_| Ok(true),
            )?;
            model_steps += steps;
        }
        timings.recovery_secs += t_rec.elapsed().as_secs_f64();
        let val_loss_after_recovery = hypernet_val_loss(hn, val, cfg.batch_size)?;
        if val_loss_after_recovery > val_loss_after_discretization {
            recovery_regressions += 1;
        }

        trace.records.push(NodeDecision {
            node_id: node,
            node_name: node_display_name(hn, node),
            candidates: candidates.iter().map(|&j| names[j].clone()).collect(),
            candidate_indices: candidates,
            scores,
            chosen,
            chosen_name: names[chosen].clone(),
            val_loss_after_discretization,
            val_loss_after_recovery,
        });
    }

    if hn.alpha_fingerprint() != alpha_before {
        return Err(Error::state(
            "architectural parameters moved during ablation search",
        ));
    }
    if !trace.records.is_empty() {
        log::info!(
            "recovery regressed on {recovery_regressions}/{} node steps",
            trace.records.len()
        );
    }
    let final_val_loss = hypernet_val_loss(hn, val, cfg.batch_size)?;
    let spec = hn.extract_spec()?;
    Ok(AbSearchOutcome {
        spec,
        timings,
        model_steps,
        final_val_loss,
        recovery_regressions,
    })
}

/// Keep the argmax of the architectural parameters on every undecided
/// node (ties to the lowest candidate index) and extract the result.
pub fn darts_finalize(hn: &mut HyperNetwork) -> Result<ArchitectureSpec> {
    for node in 0..hn.num_nodes() {
        if hn.nodes[node].is_discretized() {
            continue;
        }
        let weights = hn.effective_weights(node);
        let unmasked = hn.nodes[node].unmasked_indices();
        let picked: Vec<f64> = unmasked.iter().map(|&j| weights[j]).collect();
        let chosen = unmasked[argmax_lowest_tie(&picked)];
        hn.discretize_node(node, chosen)?;
    }
    hn.extract_spec()
}

/// Bi-level baseline: the training pairs are split in half, model
/// parameters take single steps on one half alternating with architectural
/// parameter steps on the other. The model-step budget exactly matches
/// what the ablation search would use on the same config, and the final
/// architecture is the per-node argmax of the architectural parameters.
pub fn darts_search(
    hn: &mut HyperNetwork,
    train: &WindowedDataset,
    val: &WindowedDataset,
    cfg: &SearchConfig,
) -> Result<DartsOutcome> {
    cfg.validate()?;
    if train.windows.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    if val.windows.is_empty() {
        return Err(Error::config("validation set is empty"));
    }
    let pairs = train.pairs();
    if pairs.len() < 2 {
        return Err(Error::config(
            "bi-level search needs at least two training windows to split",
        ));
    }
    let root = Prng::new(cfg.seed).split("darts");
    let mut split_rng = root.split("split");
    let mut indices: Vec<usize> = (0..pairs.len()).collect();
    split_rng.shuffle(&mut indices);
    let (d1_idx, d2_idx) = indices.split_at(pairs.len() / 2);
    let d1: Vec<(&[f64], &[f64])> = d1_idx.iter().map(|&i| pairs[i]).collect();
    let d2: Vec<(&[f64], &[f64])> = d2_idx.iter().map(|&i| pairs[i]).collect();

    let decisions = hn
        .nodes
        .iter()
        .filter(|n| !n.is_discretized())
        .count();
    let budget =
        (cfg.k1 + decisions * cfg.k2) * steps_per_epoch(pairs.len(), cfg.batch_size);

    let mut model_opt = AdamW::new(
        &hn.params,
        hn.live_model_params(),
        LrSchedule::constant(cfg.lr),
        cfg.weight_decay,
    );
    let mut alpha_opt = AdamW::new(
        &hn.params,
        hn.arch_params(),
        LrSchedule::constant(cfg.alpha_lr),
        cfg.alpha_weight_decay,
    );

    struct Cycler {
        order: Vec<usize>,
        pos: usize,
        pass: u64,
        rng: Prng,
    }
    impl Cycler {
        fn new(n: usize, rng: Prng) -> Self {
            let mut c = Cycler {
                order: (0..n).collect(),
                pos: 0,
                pass: 0,
                rng,
            };
            c.reshuffle();
            c
        }
        fn reshuffle(&mut self) {
            let mut r = self.rng.split_index("pass", self.pass);
            r.shuffle(&mut self.order);
            self.pass += 1;
            self.pos = 0;
        }
        fn next_ids(&mut self, batch: usize) -> Vec<usize> {
            if self.pos >= self.order.len() {
                self.reshuffle();
            }
            let end = (self.pos + batch).min(self.order.len());
            let ids = self.order[self.pos..end].to_vec();
            self.pos = end;
            ids
        }
    }

    let mut c1 = Cycler::new(d1.len(), root.split("d1"));
    let mut c2 = Cycler::new(d2.len(), root.split("d2"));
    let mut drop_rng = root.split("dropout");
    let mut model_steps = 0usize;
    let mut alpha_steps = 0usize;
    while model_steps < budget {
        let b1: Vec<(&[f64], &[f64])> = c1.next_ids(cfg.batch_size).into_iter().map(|i| d1[i]).collect();
        gradient_step(hn, &b1, &mut drop_rng, &mut model_opt)?;
        model_steps += 1;
        let b2: Vec<(&[f64], &[f64])> = c2.next_ids(cfg.batch_size).into_iter().map(|i| d2[i]).collect();
        gradient_step(hn, &b2, &mut drop_rng, &mut alpha_opt)?;
        alpha_steps += 1;
    }
    let _ = val; // architecture is read off alpha; val is used by callers for reporting
    let spec = darts_finalize(hn)?;
    Ok(DartsOutcome {
        spec,
        model_steps,
        alpha_steps,
    })
}

/// Result of retraining one architecture from scratch.
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: ForecastModel,
    /// Validation metrics of the best checkpoint.
    pub report: MetricsReport,
    pub best_val_mse: f64,
    pub eval_history: Vec<f64>,
    pub steps: usize,
    pub epochs_completed: usize,
    pub stopped_early: bool,
}

/// Train a freshly initialized sub-network for up to K3 epochs, evaluating
/// every `eval_every_steps` optimizer steps and keeping the best
/// checkpoint. Stops once `patience` consecutive evaluations fail to
/// improve. A final evaluation always runs at training end.
pub fn train_subnet(
    model_cfg: &ModelConfig,
    spec: &ArchitectureSpec,
    train: &WindowedDataset,
    val: &WindowedDataset,
    cfg: &SearchConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.windows.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    if val.windows.is_empty() {
        return Err(Error::config("validation set is empty"));
    }
    let mut model = ForecastModel::new(model_cfg.clone(), spec.clone(), cfg.seed)?;
    let root = Prng::new(cfg.seed).split("retrain");
    let mut shuffle_rng = root.split("shuffle");
    let mut drop_rng = root.split("dropout");
    let pairs = train.pairs();
    let all_ids: Vec<_> = model.params.ids().collect();
    let mut opt = AdamW::new(
        &model.params,
        all_ids.clone(),
        LrSchedule::constant(cfg.lr),
        cfg.weight_decay,
    );

    struct Tracker {
        best: f64,
        best_weights: Vec<f64>,
        history: Vec<f64>,
        since_best: usize,
    }
    let mut tracker = Tracker {
        best: f64::INFINITY,
        best_weights: model.params.flatten(&all_ids),
        history: Vec::new(),
        since_best: 0,
    };
    let ids_for_eval = all_ids.clone();
    let record_eval = |model: &ForecastModel, tracker: &mut Tracker| -> Result<bool> {
        let loss = model_val_mse(model, val)?;
        tracker.history.push(loss);
        if loss < tracker.best {
            tracker.best = loss;
            tracker.best_weights = model.params.flatten(&ids_for_eval);
            tracker.since_best = 0;
        } else {
            tracker.since_best += 1;
        }
        Ok(tracker.since_best < cfg.patience)
    };

    let mut steps = 0usize;
    let mut epochs_completed = 0usize;
    let mut stopped_early = false;
    'training: for _ in 0..cfg.k3 {
        let (epoch_steps, completed) = run_epoch(
            &mut model,
            &pairs,
            cfg.batch_size,
            &mut shuffle_rng,
            &mut drop_rng,
            &mut opt,
            |m| {
                steps += 1;
                if steps % cfg.eval_every_steps == 0 {
                    record_eval(m, &mut tracker)
                } else {
                    Ok(true)
                }
            },
        )?;
        let _ = epoch_steps;
        if !completed {
            stopped_early = true;
            break 'training;
        }
        epochs_completed += 1;
    }
    // Catch improvements since the last periodic evaluation.
    if steps % cfg.eval_every_steps != 0 && !stopped_early {
        let _ = record_eval(&model, &mut tracker)?;
    }
    model.params.unflatten(&all_ids, &tracker.best_weights)?;

    let (y, yhat) = forecast_dataset(&model, val)?;
    let report = MetricsReport::long_term(&y, &yhat)?;
    Ok(TrainOutcome {
        model,
        report,
        best_val_mse: tracker.best,
        eval_history: tracker.history,
        steps,
        epochs_completed,
        stopped_early,
    })
}
