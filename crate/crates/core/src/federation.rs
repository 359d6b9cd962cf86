//! The federated training orchestrator: pretraining, per-round collaborative
//! KL alignment with confidence re-weighting, and soft-label local training.
//!
//! A round has two barriers. First every client computes logits on the
//! public batch from its pre-round parameters; then every client takes its
//! weighted alignment step against those frozen logits. Updates are therefore
//! simultaneous: no client sees another client's in-round change.

use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::data::{
    apply_label_noise, build_transition_matrix, empirical_flip_rate, generate_public,
    generate_synthetic, partition_dirichlet, partition_iid, split_per_class, Dataset, NoiseKind,
    PartitionPlan,
};
use crate::dlr::{dlr_weight, refine_labels, DlrSchedule};
use crate::eccr::{client_confidence, client_weights, label_quality, learning_efficiency, ClientRoundStats};
use crate::error::{Error, Result};
use crate::losses::{
    tape_collab_kl_loss, tape_cross_entropy, tape_sl_loss, tape_temperature_softmax,
    temperature_softmax, CollabWeighting, LossConfig, ProbDist,
};
use crate::model::{build_model, default_roster, forward, parameter_delta_norm, tape_forward, ModelParams};
use crate::optim::{adam_step, AdamState};
use crate::rng;
use crate::tensor::{Tape, Tensor};

/// Component toggles matching the ablation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationFlags {
    pub hfl: bool,
    pub sl: bool,
    pub dlr: bool,
    pub eccr: bool,
}

impl AblationFlags {
    pub const ALL: AblationFlags = AblationFlags {
        hfl: true,
        sl: true,
        dlr: true,
        eccr: true,
    };
    pub const NONE: AblationFlags = AblationFlags {
        hfl: false,
        sl: false,
        dlr: false,
        eccr: false,
    };

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.hfl {
            parts.push("hfl");
        }
        if self.sl {
            parts.push("sl");
        }
        if self.dlr {
            parts.push("dlr");
        }
        if self.eccr {
            parts.push("eccr");
        }
        if parts.is_empty() {
            "none".to_string()
        } else {
            parts.join("+")
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        if s == "none" {
            return Ok(AblationFlags::NONE);
        }
        let mut f = AblationFlags::NONE;
        for part in s.split('+') {
            match part {
                "hfl" => f.hfl = true,
                "sl" => f.sl = true,
                "dlr" => f.dlr = true,
                "eccr" => f.eccr = true,
                other => return Err(Error::Config(format!("unknown ablation flag '{other}'"))),
            }
        }
        Ok(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PartitionScheme {
    Iid,
    Dirichlet { beta: f64 },
}

/// Which span the parameter delta of the efficiency formula covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeltaScope {
    /// End of previous round to end of current local phase.
    FullRound,
    /// End of this round's collaborative phase to end of its local phase.
    LocalPhase,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseConfig {
    pub kind: NoiseKind,
    pub mu: f64,
    /// Per-client override of `mu`; length must equal the client count.
    pub mu_per_client: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub classes: usize,
    pub feature_dim: usize,
    pub train_per_client: usize,
    pub test_per_class: usize,
    pub public_size: usize,
    pub public_classes: usize,
    pub spread: f64,
    pub partition: PartitionScheme,
    pub min_per_client: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Full description of one federated run.
#[derive(Debug, Clone, PartialEq)]
pub struct FederationConfig {
    pub clients: usize,
    pub rounds: u32,
    pub local_epochs: u32,
    pub pretrain_epochs: u32,
    pub batch_size: usize,
    pub collab_steps: u32,
    pub flags: AblationFlags,
    pub loss: LossConfig,
    pub zeta: f64,
    pub dlr_temperature: f64,
    pub eta: f64,
    pub weight_sources: bool,
    pub delta_scope: DeltaScope,
    pub noise: NoiseConfig,
    pub data: DataConfig,
    pub optim: OptimConfig,
    pub seed: u64,
    /// Keep a copy of every client's parameters at each round barrier
    /// (drives per-round checkpoint files; off by default).
    pub capture_round_params: bool,
}

impl FederationConfig {
    /// Desk-scale reference configuration.
    pub fn reference(seed: u64) -> Self {
        FederationConfig {
            clients: 4,
            rounds: 20,
            local_epochs: 2,
            pretrain_epochs: 30,
            batch_size: 32,
            collab_steps: 1,
            flags: AblationFlags::ALL,
            loss: LossConfig::default(),
            zeta: 10.0,
            dlr_temperature: 1.0,
            eta: 1.4,
            weight_sources: false,
            delta_scope: DeltaScope::FullRound,
            noise: NoiseConfig {
                kind: NoiseKind::Symflip,
                mu: 0.2,
                mu_per_client: None,
            },
            data: DataConfig {
                classes: 10,
                feature_dim: 20,
                train_per_client: 2000,
                test_per_class: 200,
                public_size: 1000,
                public_classes: 20,
                spread: 0.30,
                partition: PartitionScheme::Iid,
                min_per_client: 20,
            },
            optim: OptimConfig::default(),
            seed,
            capture_round_params: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.clients < 2 {
            return Err(Error::Config(format!("need at least 2 clients, got {}", self.clients)));
        }
        if self.local_epochs == 0 {
            return Err(Error::Config("local_epochs must be at least 1".into()));
        }
        if self.pretrain_epochs < 2 {
            return Err(Error::Config(
                "pretrain_epochs must be at least 2 (confidence bootstrap needs two loss points)".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.collab_steps == 0 {
            return Err(Error::Config("collab_steps must be at least 1".into()));
        }
        self.loss.validate()?;
        if self.data.classes < 2 || self.data.feature_dim < 2 {
            return Err(Error::Config(format!(
                "need classes >= 2 and feature_dim >= 2, got {}, {}",
                self.data.classes, self.data.feature_dim
            )));
        }
        if self.data.train_per_client == 0 || self.data.test_per_class == 0 {
            return Err(Error::Config("train_per_client and test_per_class must be positive".into()));
        }
        if self.data.spread <= 0.0 {
            return Err(Error::Config(format!(
                "spread must be positive, got {}",
                self.data.spread
            )));
        }
        if self.rounds > 0 {
            DlrSchedule::new(self.zeta, self.rounds)?;
        } else if self.zeta <= 0.0 {
            return Err(Error::Config(format!("zeta must be positive, got {}", self.zeta)));
        }
        if self.dlr_temperature <= 0.0 {
            return Err(Error::Config(format!(
                "dlr_temperature must be positive, got {}",
                self.dlr_temperature
            )));
        }
        if self.eta < 0.0 {
            return Err(Error::Config(format!("eta must be non-negative, got {}", self.eta)));
        }
        if self.optim.learning_rate < 0.0 {
            return Err(Error::Config("learning rate must be non-negative".into()));
        }
        // Noise rates go through the transition-matrix constructor for range checks.
        build_transition_matrix(self.noise.kind, self.noise.mu, self.data.classes)?;
        if let Some(per_client) = &self.noise.mu_per_client {
            if per_client.len() != self.clients {
                return Err(Error::Config(format!(
                    "mu_per_client has {} entries for {} clients",
                    per_client.len(),
                    self.clients
                )));
            }
            for &m in per_client {
                build_transition_matrix(self.noise.kind, m, self.data.classes)?;
            }
        }
        let pool = self.clients * self.data.train_per_client;
        if !pool.is_multiple_of(self.data.classes) {
            return Err(Error::Config(format!(
                "train pool {pool} not divisible by {} classes",
                self.data.classes
            )));
        }
        if self.data.public_size == 0 {
            return Err(Error::Config("public dataset must be non-empty".into()));
        }
        if let PartitionScheme::Dirichlet { beta } = self.data.partition {
            if beta <= 0.0 {
                return Err(Error::Config(format!("dirichlet beta must be positive, got {beta}")));
            }
        }
        Ok(())
    }
}

/// One federated participant.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub arch_name: String,
    pub params: ModelParams,
    pub adam: AdamState,
    /// Private dataset with (possibly) corrupted labels.
    pub private_data: Dataset,
    /// Labels before corruption, kept for the realized-rate audit.
    pub clean_labels: Vec<u32>,
    pub clean_test_ref: Arc<Dataset>,
    pub realized_noise_rate: f64,
    /// Eval-mode mean SL loss after every training epoch (append-only).
    pub loss_history: Vec<f64>,
    /// Checkpoint losses feeding the confidence formulas: one per pretrain
    /// epoch, then one per completed round.
    pub stat_losses: Vec<f64>,
    /// Parameter delta per checkpoint transition.
    pub delta_history: Vec<f64>,
    snapshot: ModelParams,
}

impl ClientState {
    fn stats_for_round(&self) -> Result<ClientRoundStats> {
        let n = self.stat_losses.len();
        if n < 2 || self.delta_history.is_empty() {
            return Err(Error::Usage(
                "confidence statistics need two loss points and one delta".into(),
            ));
        }
        Ok(ClientRoundStats {
            mean_sl_loss: self.stat_losses[n - 1],
            prev_mean_sl_loss: self.stat_losses[n - 2],
            param_delta: self.delta_history[self.delta_history.len() - 1],
            param_count: self.params.param_count(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Collaborative,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Collaborative => "round",
        }
    }
}

/// Per-epoch (pretrain) or per-round (collaborative) audit record.
#[derive(Debug, Clone)]
pub struct RoundRecord {
    pub phase: Phase,
    pub round: u32,
    pub accuracy: Vec<f64>,
    pub mean_sl_loss: Vec<f64>,
    pub confidence: Vec<f64>,
    pub weight: Vec<f64>,
    pub wall_time_ms: f64,
}

/// Everything a run produces.
#[derive(Debug)]
pub struct RunOutput {
    pub records: Vec<RoundRecord>,
    pub clients: Vec<ClientState>,
    pub test_set: Arc<Dataset>,
    pub public_features: Tensor,
    pub partition: PartitionPlan,
    /// Per-round parameter snapshots (round-major, client-minor), captured
    /// only when the config asks for them.
    pub round_params: Vec<Vec<ModelParams>>,
}

impl RunOutput {
    pub fn final_accuracies(&self) -> Vec<f64> {
        self.records
            .last()
            .map(|r| r.accuracy.clone())
            .unwrap_or_default()
    }

    pub fn final_average_accuracy(&self) -> f64 {
        let acc = self.final_accuracies();
        if acc.is_empty() {
            return 0.0;
        }
        acc.iter().sum::<f64>() / acc.len() as f64
    }
}

// ── Setup ───────────────────────────────────────────────────────────────

/// Generate pool/test/public data and deal the pool out to clients.
pub fn init_clients(cfg: &FederationConfig) -> Result<(Vec<ClientState>, Arc<Dataset>, Tensor, PartitionPlan)> {
    cfg.validate()?;
    let d = &cfg.data;
    let pool_size = cfg.clients * d.train_per_client;
    let per_class_train = pool_size / d.classes;
    let full = generate_synthetic(
        d.classes,
        d.feature_dim,
        per_class_train + d.test_per_class,
        d.spread,
        rng::derive_seed(cfg.seed, "dataset", &[]),
    )?;
    let (test_set, train_pool) = split_per_class(&full, d.test_per_class)?;
    let test_set = Arc::new(test_set);

    let public = generate_public(
        d.public_classes,
        d.feature_dim,
        d.public_size,
        d.spread,
        rng::derive_seed(cfg.seed, "public", &[]),
    )?;
    let public_features = public.features().clone();

    let plan = match d.partition {
        PartitionScheme::Iid => partition_iid(
            train_pool.len(),
            cfg.clients,
            rng::derive_seed(cfg.seed, "partition", &[]),
        )?,
        PartitionScheme::Dirichlet { beta } => partition_dirichlet(
            &train_pool,
            cfg.clients,
            beta,
            d.min_per_client,
            rng::derive_seed(cfg.seed, "partition", &[]),
        )?,
    };

    let roster = default_roster(d.feature_dim, d.classes)?;
    let mut clients = Vec::with_capacity(cfg.clients);
    for k in 0..cfg.clients {
        let shard = train_pool.subset(&plan.client_indices[k])?;
        let mu_k = cfg
            .noise
            .mu_per_client
            .as_ref()
            .map_or(cfg.noise.mu, |v| v[k]);
        let matrix = build_transition_matrix(cfg.noise.kind, mu_k, d.classes)?;
        let clean_labels = shard.labels().to_vec();
        let noisy_labels = apply_label_noise(
            &clean_labels,
            &matrix,
            rng::derive_seed(cfg.seed, "noise", &[k as u64]),
        )?;
        let realized = empirical_flip_rate(&clean_labels, &noisy_labels)?;
        let noisy = shard.with_labels(noisy_labels)?;

        let arch = &roster[k % roster.len()];
        let params = build_model(arch, rng::derive_seed(cfg.seed, "model", &[k as u64]))?;
        let adam = AdamState::new(&params.tensor_lens(), cfg.optim.learning_rate).with_betas(
            cfg.optim.beta1,
            cfg.optim.beta2,
            cfg.optim.epsilon,
        );
        let snapshot = params.clone();
        clients.push(ClientState {
            id: k,
            arch_name: arch.name.clone(),
            params,
            adam,
            private_data: noisy,
            clean_labels,
            clean_test_ref: Arc::clone(&test_set),
            realized_noise_rate: realized,
            loss_history: Vec::new(),
            stat_losses: Vec::new(),
            delta_history: Vec::new(),
            snapshot,
        });
    }
    Ok((clients, test_set, public_features, plan))
}

// ── Training primitives ─────────────────────────────────────────────────

fn gather_rows(t: &Tensor, indices: &[usize]) -> Result<Tensor> {
    let (_, c) = t.rows()?;
    let mut data = Vec::with_capacity(indices.len() * c);
    for &i in indices {
        data.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
    }
    Tensor::new(vec![indices.len(), c], data)
}

/// One epoch of minibatch training against fixed full-set targets.
fn train_epoch(
    client: &mut ClientState,
    targets: &ProbDist,
    use_sl: bool,
    loss_cfg: &LossConfig,
    batch_size: usize,
    shuffle_seed: u64,
) -> Result<()> {
    let n = client.private_data.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream_indexed(shuffle_seed, "epoch-shuffle", &[]));

    let tau = if use_sl { loss_cfg.tau } else { 1.0 };
    for batch in order.chunks(batch_size) {
        let xb = client.private_data.gather_features(batch)?;
        let tb = ProbDist::new(gather_rows(targets.tensor(), batch)?)?;

        let mut tape = Tape::new();
        let ids = client.params.insert_into(&mut tape);
        let x = tape.constant(xb);
        let logits = tape_forward(&mut tape, &ids, x)?;
        let probs = tape_temperature_softmax(&mut tape, logits, tau)?;
        let loss = if use_sl {
            tape_sl_loss(&mut tape, &tb, probs, loss_cfg)?
        } else {
            tape_cross_entropy(&mut tape, &tb, probs)?
        };
        let loss_value = tape.scalar_value(loss)?;
        if !loss_value.is_finite() {
            return Err(Error::Numeric(format!(
                "client {}: non-finite training loss, aborting",
                client.id
            )));
        }
        tape.backward(loss)?;
        let grads = tape.gradients_for(&ids)?;
        let mut tensors: Vec<Tensor> = client.params.tensors().into_iter().cloned().collect();
        adam_step(&mut tensors, &grads, &mut client.adam)?;
        write_back(&mut client.params, tensors)?;
    }
    Ok(())
}

fn write_back(params: &mut ModelParams, tensors: Vec<Tensor>) -> Result<()> {
    let mut slots = params.tensors_mut();
    if slots.len() != tensors.len() {
        return Err(Error::Usage("parameter write-back length mismatch".into()));
    }
    for (slot, t) in slots.iter_mut().zip(tensors) {
        **slot = t;
    }
    Ok(())
}

/// Eval-mode mean SL loss of the private set under current parameters,
/// against the given (noisy) hard labels. Used for all confidence statistics
/// regardless of which loss training runs on.
pub fn eval_mean_sl_loss(client: &ClientState, loss_cfg: &LossConfig) -> Result<f64> {
    let logits = forward(&client.params, client.private_data.features())?;
    let probs = temperature_softmax(&logits, loss_cfg.tau)?;
    let labels = ProbDist::one_hot(client.private_data.labels(), client.private_data.class_count())?;
    crate::losses::sl_loss(&labels, &probs, loss_cfg)
}

/// Argmax accuracy on a clean-labeled test set. Ties break toward the lower
/// class index.
pub fn evaluate(params: &ModelParams, test_set: &Dataset) -> Result<f64> {
    let logits = forward(params, test_set.features())?;
    let (n, c) = logits.rows()?;
    let mut correct = 0usize;
    for i in 0..n {
        let row = &logits.data()[i * c..(i + 1) * c];
        let mut best = 0usize;
        for j in 1..c {
            if row[j] > row[best] {
                best = j;
            }
        }
        if best as u32 == test_set.labels()[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / n as f64)
}

/// Record a checkpoint: eval-mode loss plus parameter delta since the last
/// checkpoint. Feeds the confidence formulas.
fn checkpoint(client: &mut ClientState, loss_cfg: &LossConfig) -> Result<()> {
    let loss = eval_mean_sl_loss(client, loss_cfg)?;
    let delta = parameter_delta_norm(&client.snapshot, &client.params)?;
    client.stat_losses.push(loss);
    client.delta_history.push(delta);
    client.snapshot = client.params.clone();
    Ok(())
}

// ── Phases ──────────────────────────────────────────────────────────────

/// Independent local training before any collaboration. DLR is inactive
/// here (its weight is zero before round one); the loss is SL with hard
/// labels when the SL component is on, plain CE otherwise.
pub fn pretrain(
    clients: &mut [ClientState],
    cfg: &FederationConfig,
    records: &mut Vec<RoundRecord>,
) -> Result<()> {
    if cfg.pretrain_epochs < 2 {
        return Err(Error::Config("pretraining needs at least 2 epochs".into()));
    }
    for epoch in 1..=cfg.pretrain_epochs {
        let started = Instant::now();
        for client in clients.iter_mut() {
            let targets = ProbDist::one_hot(
                client.private_data.labels(),
                client.private_data.class_count(),
            )?;
            let shuffle = rng::derive_seed(
                cfg.seed,
                "shuffle-pretrain",
                &[client.id as u64, u64::from(epoch)],
            );
            train_epoch(client, &targets, cfg.flags.sl, &cfg.loss, cfg.batch_size, shuffle)?;
            let loss = eval_mean_sl_loss(client, &cfg.loss)?;
            client.loss_history.push(loss);
            checkpoint(client, &cfg.loss)?;
        }
        push_record(records, Phase::Pretrain, epoch, clients, None, None, started)?;
    }
    Ok(())
}

/// Collaboration factors for one round: the literal re-weighting when the
/// confidence component is on, the uniform `1/(K-1)` factor otherwise.
pub struct RoundWeighting {
    /// Loss factor per client applied to its collaborative loss.
    pub factor: Vec<f64>,
    /// Confidences behind the factors (empty when re-weighting is off).
    pub confidences: Vec<f64>,
    /// Normalized weights (empty when re-weighting is off).
    pub normalized: Vec<f64>,
}

pub fn compute_round_weighting(clients: &[ClientState], cfg: &FederationConfig) -> Result<RoundWeighting> {
    let k = clients.len();
    if !cfg.flags.eccr {
        return Ok(RoundWeighting {
            factor: vec![1.0 / (k as f64 - 1.0); k],
            confidences: Vec::new(),
            normalized: Vec::new(),
        });
    }
    let mut confidences = Vec::with_capacity(k);
    for client in clients {
        let stats = client.stats_for_round()?;
        let (quality, _) = label_quality(stats.mean_sl_loss);
        let (efficiency, _) = learning_efficiency(&stats);
        confidences.push(client_confidence(quality, efficiency));
    }
    let weights = client_weights(&confidences, cfg.eta, k)?;
    Ok(RoundWeighting {
        factor: weights.normalized.clone(),
        confidences,
        normalized: weights.normalized,
    })
}

/// One collaborative exchange. Phase one gathers all logits from pre-round
/// parameters; phase two lets every client descend on its weighted KL sum
/// against those frozen logits.
pub fn collaborative_round(
    clients: &mut [ClientState],
    public_features: &Tensor,
    weighting: &RoundWeighting,
    cfg: &FederationConfig,
    round: u32,
) -> Result<()> {
    let order: Vec<usize> = (0..clients.len()).collect();
    collaborative_round_with_order(clients, public_features, weighting, cfg, round, &order)
}

/// Same as [`collaborative_round`] but with an explicit update order; the
/// result must not depend on it (simultaneous-update semantics).
pub fn collaborative_round_with_order(
    clients: &mut [ClientState],
    public_features: &Tensor,
    weighting: &RoundWeighting,
    cfg: &FederationConfig,
    round: u32,
    order: &[usize],
) -> Result<()> {
    let k = clients.len();
    if k < 2 {
        return Err(Error::Usage("collaboration needs at least 2 clients".into()));
    }
    if weighting.factor.len() != k {
        return Err(Error::Usage(format!(
            "{} weights for {} clients",
            weighting.factor.len(),
            k
        )));
    }
    // Barrier 1: everyone's knowledge distribution from pre-round parameters.
    let mut pre_round_logits = Vec::with_capacity(k);
    for client in clients.iter() {
        let logits = forward(&client.params, public_features).map_err(|e| {
            Error::Numeric(format!(
                "client {} emitted invalid logits in round {round}: {e}",
                client.id
            ))
        })?;
        pre_round_logits.push(logits);
    }
    // Barrier 2: weighted alignment steps against the frozen logits.
    for &idx in order {
        let client = &mut clients[idx];
        let others: Vec<&Tensor> = (0..k).filter(|&j| j != idx).map(|j| &pre_round_logits[j]).collect();
        let source_weights: Vec<f64> = if cfg.weight_sources && !weighting.normalized.is_empty() {
            (0..k).filter(|&j| j != idx).map(|j| weighting.normalized[j]).collect()
        } else {
            Vec::new()
        };
        for _ in 0..cfg.collab_steps {
            let mut tape = Tape::new();
            let ids = client.params.insert_into(&mut tape);
            let x = tape.constant(public_features.clone());
            let own = tape_forward(&mut tape, &ids, x)?;
            let weighting_mode = if !source_weights.is_empty() {
                CollabWeighting::PerSource(&source_weights)
            } else {
                CollabWeighting::Own(weighting.factor[idx])
            };
            let loss = tape_collab_kl_loss(&mut tape, &others, own, cfg.loss.tau, weighting_mode)?;
            let loss_value = tape.scalar_value(loss)?;
            if !loss_value.is_finite() {
                return Err(Error::Numeric(format!(
                    "client {}: non-finite collaborative loss in round {round}",
                    client.id
                )));
            }
            tape.backward(loss)?;
            let grads = tape.gradients_for(&ids)?;
            let mut tensors: Vec<Tensor> = client.params.tensors().into_iter().cloned().collect();
            adam_step(&mut tensors, &grads, &mut client.adam)?;
            write_back(&mut client.params, tensors)?;
        }
    }
    Ok(())
}

/// Local phase of one round: per epoch, refresh the DLR soft labels from the
/// current model, then run minibatch training on them.
pub fn local_round(client: &mut ClientState, round: u32, cfg: &FederationConfig) -> Result<()> {
    if cfg.local_epochs == 0 {
        return Err(Error::Config("local_epochs must be at least 1".into()));
    }
    let schedule = DlrSchedule::new(cfg.zeta, cfg.rounds.max(1))?;
    let given = ProbDist::one_hot(
        client.private_data.labels(),
        client.private_data.class_count(),
    )?;
    for epoch in 1..=cfg.local_epochs {
        let targets = if cfg.flags.dlr {
            let w = dlr_weight(round, &schedule);
            let logits = forward(&client.params, client.private_data.features())?;
            let predictions = temperature_softmax(&logits, cfg.dlr_temperature)?;
            refine_labels(&given, &predictions, w, round)?.distributions
        } else {
            given.clone()
        };
        let shuffle = rng::derive_seed(
            cfg.seed,
            "shuffle-local",
            &[client.id as u64, u64::from(round), u64::from(epoch)],
        );
        train_epoch(client, &targets, cfg.flags.sl, &cfg.loss, cfg.batch_size, shuffle)?;
        let loss = eval_mean_sl_loss(client, &cfg.loss)?;
        client.loss_history.push(loss);
    }
    Ok(())
}

fn push_record(
    records: &mut Vec<RoundRecord>,
    phase: Phase,
    round: u32,
    clients: &[ClientState],
    confidences: Option<&[f64]>,
    weights: Option<&[f64]>,
    started: Instant,
) -> Result<()> {
    let k = clients.len();
    let mut accuracy = Vec::with_capacity(k);
    let mut loss = Vec::with_capacity(k);
    for client in clients {
        accuracy.push(evaluate(&client.params, &client.clean_test_ref)?);
        loss.push(*client.stat_losses.last().ok_or_else(|| {
            Error::Usage("record requested before any checkpoint".into())
        })?);
    }
    records.push(RoundRecord {
        phase,
        round,
        accuracy,
        mean_sl_loss: loss,
        confidence: confidences.map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; k]),
        weight: weights.map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; k]),
        wall_time_ms: started.elapsed().as_secs_f64() * 1000.0,
    });
    Ok(())
}

/// Run the whole protocol: pretraining, then `rounds` iterations of
/// weighting, collaborative alignment, and local refinement.
pub fn run_rhfl_plus(cfg: &FederationConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let (mut clients, test_set, public_features, partition) = init_clients(cfg)?;
    let mut records = Vec::new();
    let mut round_params = Vec::new();

    pretrain(&mut clients, cfg, &mut records)?;

    for round in 1..=cfg.rounds {
        let started = Instant::now();
        let weighting = compute_round_weighting(&clients, cfg)?;

        if cfg.flags.hfl {
            collaborative_round(&mut clients, &public_features, &weighting, cfg, round)?;
            if cfg.delta_scope == DeltaScope::LocalPhase {
                for client in clients.iter_mut() {
                    client.snapshot = client.params.clone();
                }
            }
        }
        for client in clients.iter_mut() {
            local_round(client, round, cfg)?;
        }
        for client in clients.iter_mut() {
            checkpoint(client, &cfg.loss)?;
        }

        let (conf, weights) = if cfg.flags.eccr {
            (Some(weighting.confidences.as_slice()), Some(weighting.normalized.as_slice()))
        } else if cfg.flags.hfl {
            (None, Some(weighting.factor.as_slice()))
        } else {
            (None, None)
        };
        push_record(&mut records, Phase::Collaborative, round, &clients, conf, weights, started)?;
        if cfg.capture_round_params {
            round_params.push(clients.iter().map(|c| c.params.clone()).collect());
        }
    }

    Ok(RunOutput {
        records,
        clients,
        test_set,
        public_features,
        partition,
        round_params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(seed: u64) -> FederationConfig {
        let mut cfg = FederationConfig::reference(seed);
        cfg.clients = 2;
        cfg.rounds = 2;
        cfg.local_epochs = 1;
        cfg.pretrain_epochs = 2;
        cfg.data.classes = 2;
        cfg.data.feature_dim = 4;
        cfg.data.train_per_client = 40;
        cfg.data.test_per_class = 20;
        cfg.data.public_size = 30;
        cfg.data.public_classes = 4;
        cfg.noise.mu = 0.0;
        cfg
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let mut cfg = tiny_config(3);
        cfg.optim.learning_rate = 0.0;
        cfg.rounds = 0;
        let (mut clients, test, _public, _) = init_clients(&cfg).unwrap();
        let before = clients[0].params.clone();
        let acc_before = evaluate(&before, &test).unwrap();
        let mut records = Vec::new();
        pretrain(&mut clients, &cfg, &mut records).unwrap();
        assert_eq!(clients[0].params, before);
        let acc_after = evaluate(&clients[0].params, &test).unwrap();
        assert_eq!(acc_before, acc_after);
    }

    #[test]
    fn clean_two_class_pretraining_fits() {
        let mut cfg = tiny_config(7);
        cfg.pretrain_epochs = 50;
        cfg.rounds = 0;
        cfg.data.train_per_client = 60;
        cfg.flags = AblationFlags::NONE;
        let mut out = run_rhfl_plus(&cfg).unwrap();
        // Train accuracy on the (clean) private shards.
        for client in out.clients.iter_mut() {
            let acc = evaluate(&client.params, &client.private_data).unwrap();
            assert!(acc > 0.95, "train accuracy {acc}");
        }
    }

    #[test]
    fn identical_seeds_identical_histories() {
        let cfg = tiny_config(11);
        let a = run_rhfl_plus(&cfg).unwrap();
        let b = run_rhfl_plus(&cfg).unwrap();
        assert_eq!(a.records.len(), b.records.len());
        for (ra, rb) in a.records.iter().zip(&b.records) {
            assert_eq!(ra.accuracy, rb.accuracy);
            assert_eq!(ra.mean_sl_loss, rb.mean_sl_loss);
            assert_eq!(ra.weight, rb.weight);
        }
        for (ca, cb) in a.clients.iter().zip(&b.clients) {
            assert_eq!(ca.loss_history, cb.loss_history);
        }
    }

    #[test]
    fn zero_rounds_equals_pretrain_only() {
        let mut cfg = tiny_config(13);
        cfg.rounds = 0;
        let out = run_rhfl_plus(&cfg).unwrap();
        assert_eq!(out.records.len(), cfg.pretrain_epochs as usize);
        assert!(out.records.iter().all(|r| r.phase == Phase::Pretrain));
    }

    #[test]
    fn aligned_clients_stay_fixed_in_collaboration() {
        // Same architecture and parameters: KL terms are exactly zero, so the
        // gradient is zero and the optimizer must not move anything.
        let cfg = tiny_config(17);
        let (mut clients, _test, public, _) = init_clients(&cfg).unwrap();
        clients[1].params = clients[0].params.clone();
        clients[1].adam = clients[0].adam.clone();
        let before: Vec<ModelParams> = clients.iter().map(|c| c.params.clone()).collect();
        let weighting = compute_round_weighting(&clients, &{
            let mut c = cfg.clone();
            c.flags.eccr = false;
            c
        })
        .unwrap();
        collaborative_round(&mut clients, &public, &weighting, &cfg, 1).unwrap();
        for (client, b) in clients.iter().zip(&before) {
            assert_eq!(&client.params, b);
        }
    }

    #[test]
    fn frozen_partner_kl_decreases_over_seeds() {
        use crate::losses::kl_divergence;
        for seed in 1..=5 {
            let mut cfg = tiny_config(seed);
            cfg.flags.eccr = false;
            cfg.optim.learning_rate = 1e-4;
            let (mut clients, _test, public, _) = init_clients(&cfg).unwrap();
            // Freeze client 1 by zeroing its learning rate.
            clients[1].adam.learning_rate = 0.0;
            let z_b = forward(&clients[1].params, &public).unwrap();
            let z_a_before = forward(&clients[0].params, &public).unwrap();
            let kl_before = kl_divergence(&z_b, &z_a_before, cfg.loss.tau).unwrap();
            let weighting = compute_round_weighting(&clients, &cfg).unwrap();
            collaborative_round(&mut clients, &public, &weighting, &cfg, 1).unwrap();
            let z_a_after = forward(&clients[0].params, &public).unwrap();
            let kl_after = kl_divergence(&z_b, &z_a_after, cfg.loss.tau).unwrap();
            assert!(
                kl_after < kl_before,
                "seed {seed}: KL {kl_before} -> {kl_after}"
            );
        }
    }

    #[test]
    fn update_order_is_irrelevant() {
        let cfg = {
            let mut c = tiny_config(23);
            c.clients = 3;
            c.data.train_per_client = 40;
            c
        };
        let (clients, _test, public, _) = init_clients(&cfg).unwrap();
        let weighting = RoundWeighting {
            factor: vec![0.5; 3],
            confidences: Vec::new(),
            normalized: Vec::new(),
        };
        let mut a = clients.clone();
        collaborative_round_with_order(&mut a, &public, &weighting, &cfg, 1, &[0, 1, 2]).unwrap();
        let mut b = clients.clone();
        collaborative_round_with_order(&mut b, &public, &weighting, &cfg, 1, &[2, 0, 1]).unwrap();
        for (ca, cb) in a.iter().zip(&b) {
            assert_eq!(ca.params, cb.params, "client {} diverged", ca.id);
        }
    }

    #[test]
    fn eccr_off_factor_is_uniform_over_k_minus_one() {
        let mut cfg = tiny_config(29);
        cfg.clients = 4;
        cfg.flags = AblationFlags {
            hfl: true,
            sl: false,
            dlr: false,
            eccr: false,
        };
        let (clients, _test, _public, _) = init_clients(&cfg).unwrap();
        let weighting = compute_round_weighting(&clients, &cfg).unwrap();
        for f in &weighting.factor {
            assert_eq!(*f, 1.0 / 3.0);
        }
        assert!(weighting.confidences.is_empty());
    }

    #[test]
    fn eta_zero_weights_are_uniform_and_gradients_proportional() {
        // At eta = 0 the normalized weights are exactly 1/K; the collaborative
        // loss then differs from the unweighted-HFL factor 1/(K-1) by the
        // constant K/(K-1), so gradients are proportional with that ratio.
        let mut cfg = tiny_config(31);
        cfg.clients = 4;
        cfg.pretrain_epochs = 2;
        let (mut clients, _test, public, _) = init_clients(&cfg).unwrap();
        let mut records = Vec::new();
        pretrain(&mut clients, &cfg, &mut records).unwrap();

        let mut eccr_cfg = cfg.clone();
        eccr_cfg.eta = 0.0;
        eccr_cfg.flags.eccr = true;
        let w_eccr = compute_round_weighting(&clients, &eccr_cfg).unwrap();
        for w in &w_eccr.factor {
            assert_eq!(*w, 0.25);
        }

        let mut off_cfg = cfg.clone();
        off_cfg.flags.eccr = false;
        let w_off = compute_round_weighting(&clients, &off_cfg).unwrap();

        // Gradient proportionality on client 0.
        let others: Vec<&Tensor> = Vec::new();
        drop(others);
        let grads = |factor: f64| -> Vec<Vec<f64>> {
            let client = &clients[0];
            let other_logits: Vec<Tensor> = clients
                .iter()
                .filter(|c| c.id != 0)
                .map(|c| forward(&c.params, &public).unwrap())
                .collect();
            let refs: Vec<&Tensor> = other_logits.iter().collect();
            let mut tape = Tape::new();
            let ids = client.params.insert_into(&mut tape);
            let x = tape.constant(public.clone());
            let own = tape_forward(&mut tape, &ids, x).unwrap();
            let loss =
                tape_collab_kl_loss(&mut tape, &refs, own, cfg.loss.tau, CollabWeighting::Own(factor))
                    .unwrap();
            tape.backward(loss).unwrap();
            tape.gradients_for(&ids).unwrap()
        };
        let g_eccr = grads(w_eccr.factor[0]);
        let g_off = grads(w_off.factor[0]);
        let ratio = w_off.factor[0] / w_eccr.factor[0];
        assert!((ratio - 4.0 / 3.0).abs() < 1e-12);
        for (a, b) in g_eccr.iter().flatten().zip(g_off.iter().flatten()) {
            if b.abs() > 1e-12 {
                assert!((a * ratio - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn degenerate_sl_collapses_to_plain_ce_trajectory() {
        // lambda=1, gamma=0, tau=1 with refinement off is exactly CE on the
        // given labels; the trajectories must match bit for bit.
        let mut base = tiny_config(47);
        base.noise.mu = 0.2;
        base.flags = AblationFlags {
            hfl: false,
            sl: true,
            dlr: false,
            eccr: false,
        };
        base.loss = LossConfig::new(1.0, 0.0, 1.0, -4.0).unwrap();
        let mut plain = base.clone();
        plain.flags.sl = false;

        let (mut a, _test, _public, _) = init_clients(&base).unwrap();
        let (mut b, _test2, _public2, _) = init_clients(&plain).unwrap();
        let mut records = Vec::new();
        pretrain(&mut a, &base, &mut records).unwrap();
        let mut records_b = Vec::new();
        pretrain(&mut b, &plain, &mut records_b).unwrap();
        for k in 0..a.len() {
            local_round(&mut a[k], 1, &base).unwrap();
            local_round(&mut b[k], 1, &plain).unwrap();
            assert_eq!(a[k].params, b[k].params, "client {k} diverged");
        }
    }

    #[test]
    fn local_round_records_nonzero_delta() {
        let mut cfg = tiny_config(37);
        cfg.noise.mu = 0.2;
        let (mut clients, _test, _public, _) = init_clients(&cfg).unwrap();
        let mut records = Vec::new();
        pretrain(&mut clients, &cfg, &mut records).unwrap();
        let deltas_before = clients[0].delta_history.len();
        local_round(&mut clients[0], 1, &cfg).unwrap();
        checkpoint(&mut clients[0], &cfg.loss).unwrap();
        assert_eq!(clients[0].delta_history.len(), deltas_before + 1);
        assert!(*clients[0].delta_history.last().unwrap() > 0.0);
    }

    #[test]
    fn local_epochs_zero_rejected() {
        let mut cfg = tiny_config(41);
        cfg.local_epochs = 0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn source_weighted_variant_changes_updates() {
        let mut cfg = tiny_config(53);
        cfg.clients = 3;
        cfg.pretrain_epochs = 2;
        cfg.noise.mu_per_client = Some(vec![0.4, 0.0, 0.0]);
        let (mut clients, _t, public, _) = init_clients(&cfg).unwrap();
        let mut records = Vec::new();
        pretrain(&mut clients, &cfg, &mut records).unwrap();

        let weighting = compute_round_weighting(&clients, &cfg).unwrap();
        let mut literal = clients.clone();
        collaborative_round(&mut literal, &public, &weighting, &cfg, 1).unwrap();

        let mut src_cfg = cfg.clone();
        src_cfg.weight_sources = true;
        let mut sourced = clients.clone();
        collaborative_round(&mut sourced, &public, &weighting, &src_cfg, 1).unwrap();

        assert_ne!(literal[0].params, sourced[0].params);
    }

    #[test]
    fn delta_scope_switch_changes_recorded_deltas() {
        let run_with = |scope: DeltaScope| {
            let mut cfg = tiny_config(59);
            cfg.rounds = 1;
            cfg.noise.mu = 0.2;
            cfg.delta_scope = scope;
            let out = run_rhfl_plus(&cfg).unwrap();
            out.clients[0].delta_history.clone()
        };
        let full = run_with(DeltaScope::FullRound);
        let local = run_with(DeltaScope::LocalPhase);
        // Pretrain checkpoints agree; the round checkpoint spans collaborative
        // movement only under FullRound, so it must be at least as large.
        assert_eq!(full.len(), local.len());
        let (f, l) = (full.last().unwrap(), local.last().unwrap());
        assert_ne!(f, l);
        assert!(*l > 0.0);
    }

    #[test]
    fn extra_collaborative_steps_move_parameters_further() {
        let mut cfg = tiny_config(61);
        cfg.pretrain_epochs = 2;
        let (mut clients, _t, public, _) = init_clients(&cfg).unwrap();
        let mut records = Vec::new();
        pretrain(&mut clients, &cfg, &mut records).unwrap();
        let start = clients[0].params.clone();

        let weighting = compute_round_weighting(&clients, &{
            let mut c = cfg.clone();
            c.flags.eccr = false;
            c
        })
        .unwrap();
        let mut one = clients.clone();
        collaborative_round(&mut one, &public, &weighting, &cfg, 1).unwrap();
        let mut two_cfg = cfg.clone();
        two_cfg.collab_steps = 2;
        let mut two = clients.clone();
        collaborative_round(&mut two, &public, &weighting, &two_cfg, 1).unwrap();

        let d1 = parameter_delta_norm(&start, &one[0].params).unwrap();
        let d2 = parameter_delta_norm(&start, &two[0].params).unwrap();
        assert!(d2 > d1, "one step {d1}, two steps {d2}");
    }

    #[test]
    fn evaluate_constant_predictor_hits_chance() {
        // Zero model always predicts class 0 on ties -> exactly 1/C on a
        // balanced test set.
        let cfg = tiny_config(43);
        let (_clients, test, _public, _) = init_clients(&cfg).unwrap();
        let zero = ModelParams::from_layers(vec![crate::model::Layer {
            weight: Tensor::zeros(vec![4, 2]),
            bias: Tensor::zeros(vec![2]),
        }])
        .unwrap();
        let acc = evaluate(&zero, &test).unwrap();
        assert_eq!(acc, 0.5);
    }

    #[test]
    fn evaluate_oracle_logits_hit_one() {
        // A model that reproduces the true labels: test via a fabricated
        // dataset where class is determined by the sign of feature 0 and the
        // model reads exactly that feature.
        let features = Tensor::new(vec![4, 2], vec![1.0, 0.0, -1.0, 0.0, 2.0, 0.0, -2.0, 0.0]).unwrap();
        let labels = vec![1, 0, 1, 0];
        let ds = Dataset::new(features, labels, 2).unwrap();
        let oracle = ModelParams::from_layers(vec![crate::model::Layer {
            weight: Tensor::new(vec![2, 2], vec![-1.0, 1.0, 0.0, 0.0]).unwrap(),
            bias: Tensor::zeros(vec![2]),
        }])
        .unwrap();
        assert_eq!(evaluate(&oracle, &ds).unwrap(), 1.0);
    }

    #[test]
    fn flags_round_trip() {
        for s in ["none", "hfl", "sl", "hfl+sl", "hfl+sl+dlr", "hfl+sl+dlr+eccr"] {
            assert_eq!(AblationFlags::parse(s).unwrap().label(), s);
        }
        assert!(AblationFlags::parse("hfl+bogus").is_err());
    }
}
