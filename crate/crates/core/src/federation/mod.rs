//! Round-based federated training: key broadcast, local expert training, FedAvg
//! aggregation, per-round evaluation and the communication ledger.

mod ledger;

use rayon::prelude::*;

pub use ledger::{CommRecord, Downlink, RoundLedger, Uplink};

use crate::clustering::CapacityConfig;
use crate::config::{DataSource, ExperimentConfig};
use crate::data::{generate, leave_one_out, read_fixture, Dataset, Sample};
use crate::error::{Error, Result};
use crate::model::{
    adamw_step, gradients, image_feature, loss, predict, zero_shot_reference, AdamWConfig, AdamWState,
    ExpertGradients, FrozenTextHead,
};
use crate::report::{CommSummary, DomainMetrics, EvalSplit, LossSummary, RoundRecord, RoutingAudit, RunReport};
use crate::router::{ExpertSet, RoutedPrompt, Router};
use crate::tensor::{init_keys, mix_seed, Mat, Rng, StaticKeySet};

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "TRIP_SIM_THREADS";

const TAG_HEAD: u64 = 0x4ead;
const TAG_KEYS: u64 = 0x6e75;
const TAG_EXPERTS: u64 = 0xe7e7;
const TAG_TRAIN: u64 = 0x7a1;
const TAG_EVAL: u64 = 0xe7a1;

/// One simulated client. Owns its experts and optimizer state.
#[derive(Clone, Debug)]
pub struct ClientState {
    pub id: usize,
    pub domain: usize,
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
    pub experts: ExpertSet,
    pub keys: Option<StaticKeySet>,
    pub optimizer: AdamWState,
}

impl ClientState {
    pub fn new(id: usize, domain: usize, train: Vec<Sample>, eval: Vec<Sample>, experts: ExpertSet) -> Self {
        let optimizer = AdamWState::new(&experts);
        Self {
            id,
            domain,
            train,
            eval,
            experts,
            keys: None,
            optimizer,
        }
    }

    /// `|S_k|`, the FedAvg weight numerator.
    pub fn sample_count(&self) -> usize {
        self.train.len()
    }

    pub fn receive(&mut self, msg: &Downlink) {
        match msg {
            Downlink::Keys(k) => self.keys = Some(k.clone()),
            Downlink::Experts(e) => self.experts = e.clone(),
        }
    }

    pub fn upload(&self) -> Uplink {
        Uplink::Experts {
            client: self.id,
            samples: self.sample_count(),
            experts: self.experts.clone(),
        }
    }
}

/// Everything local training needs besides the client itself.
#[derive(Clone, Debug)]
pub struct TrainSettings {
    pub router: Router,
    pub beta: f64,
    pub tau: f64,
    pub optimizer: AdamWConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainStats {
    pub samples: usize,
    pub steps: usize,
    pub loss: LossSummary,
    pub dropped_rate: f64,
    pub audit: RoutingAudit,
}

/// Checks one routed prompt against the mixture definition.
pub fn audit_route(routed: &RoutedPrompt, experts: &ExpertSet) -> RoutingAudit {
    let pi = routed.weights.as_slice();
    let mut expected = Mat::zeros(experts.prompt_len(), experts.dim());
    for (e, &w) in experts.iter().zip(pi) {
        expected.add_scaled(w, e);
    }
    RoutingAudit {
        routes: 1,
        max_simplex_residual: routed.weights.simplex_residual(),
        max_prompt_residual: routed.prompt.max_abs_diff(&expected),
    }
}

/// Runs `epochs` passes of mini-batch AdamW over the client's training samples.
///
/// Per-sample work inside a batch runs in parallel; gradients are summed in sample
/// order, so the result does not depend on scheduling.
pub fn local_train(
    client: &mut ClientState,
    head: &FrozenTextHead,
    settings: &TrainSettings,
    round: usize,
) -> Result<TrainStats> {
    if client.train.is_empty() {
        return Err(Error::config(
            format!("clients[{}].train", client.id),
            "client has no training samples",
        ));
    }
    let keys = client
        .keys
        .clone()
        .ok_or_else(|| Error::Invariant(format!("client {} trains before receiving keys", client.id)))?;
    let mut stats = TrainStats::default();
    let mut dropped = 0usize;
    let mut tokens = 0usize;
    for epoch in 0..settings.epochs {
        let mut order: Vec<usize> = (0..client.train.len()).collect();
        let tags = [TAG_TRAIN, client.id as u64, round as u64, epoch as u64];
        Rng::derive(settings.seed, &tags).shuffle(&mut order);
        for batch in order.chunks(settings.batch_size) {
            let experts = &client.experts;
            let outcomes: Vec<_> = batch
                .par_iter()
                .map(|&i| -> Result<_> {
                    let sample = &client.train[i];
                    let mut rng = Rng::derive(settings.seed, &[tags[0], tags[1], tags[2], tags[3], i as u64]);
                    let routed = settings.router.route(&sample.tokens, experts, &keys, &mut rng)?;
                    let out = gradients(&sample.tokens, sample.label, experts, &routed, head, settings.beta, settings.tau)?;
                    Ok((out, audit_route(&routed, experts), routed.clusters.dropped, routed.clusters.token_count()))
                })
                .collect::<Result<_>>()?;
            let mut grads = ExpertGradients::zeros_like(experts);
            for (out, audit, d, n) in &outcomes {
                grads.add_scaled(1.0, &out.grads);
                stats.loss.ce += out.loss.ce;
                stats.loss.kl += out.loss.kl;
                stats.loss.total += out.loss.total;
                stats.audit.merge(audit);
                dropped += d;
                tokens += n;
            }
            grads.scale(1.0 / batch.len() as f64);
            if !grads.is_finite() {
                return Err(Error::Invariant("non-finite gradient".into()));
            }
            adamw_step(&mut client.experts, &grads, &mut client.optimizer, &settings.optimizer)?;
            stats.steps += 1;
            stats.samples += batch.len();
        }
    }
    if stats.samples > 0 {
        let n = stats.samples as f64;
        stats.loss.ce /= n;
        stats.loss.kl /= n;
        stats.loss.total /= n;
        stats.dropped_rate = dropped as f64 / tokens as f64;
    }
    Ok(stats)
}

/// FedAvg: `Σ_k (|S_k| / |S|) · experts_k`, accumulated in the given order.
pub fn aggregate(uploads: &[Uplink]) -> Result<ExpertSet> {
    let first = match uploads.first() {
        Some(Uplink::Experts { experts, .. }) => experts,
        None => return Err(Error::config("clients", "aggregation needs at least one client")),
    };
    let total: usize = uploads
        .iter()
        .map(|Uplink::Experts { samples, .. }| *samples)
        .sum();
    if total == 0 {
        return Err(Error::config("clients", "aggregation needs at least one sample"));
    }
    let mut global = ExpertSet::zeros(first.len(), first.prompt_len(), first.dim());
    for Uplink::Experts { samples, experts, client } in uploads {
        if !experts.same_shape(first) {
            return Err(Error::shape(format!("client {client} uploaded experts of a different shape")));
        }
        let w = *samples as f64 / total as f64;
        for (g, e) in global.iter_mut().zip(experts.iter()) {
            g.add_scaled(w, e);
        }
    }
    Ok(global)
}

/// Outcome of evaluating a set of experts on a set of samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub metrics: DomainMetrics,
    pub utilization: Vec<f64>,
    pub audit: RoutingAudit,
}

/// What prompt to score with.
#[derive(Clone, Copy, Debug)]
pub enum Scorer<'a> {
    /// The routed mixture of these experts.
    Routed {
        experts: &'a ExpertSet,
        keys: &'a StaticKeySet,
        router: &'a Router,
    },
    /// The fixed reference prompt.
    ZeroShot,
}

/// Top-1 accuracy plus mean losses on `samples`. Samples are routed independently
/// with seeds derived from `seed` and their position.
pub fn evaluate(
    samples: &[Sample],
    scorer: Scorer<'_>,
    head: &FrozenTextHead,
    tau: f64,
    beta: f64,
    seed: u64,
) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::config("eval", "evaluation set is empty"));
    }
    let per_sample: Vec<_> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| -> Result<_> {
            let f = image_feature(&s.tokens)?;
            let reference = zero_shot_reference(head, &f, tau)?;
            let (probs, extra) = match scorer {
                Scorer::ZeroShot => (reference.clone(), None),
                Scorer::Routed { experts, keys, router } => {
                    let mut rng = Rng::derive(seed, &[TAG_EVAL, i as u64]);
                    let routed = router.route(&s.tokens, experts, keys, &mut rng)?;
                    let probs = predict(&routed.prompt, head, &f, tau)?;
                    let audit = audit_route(&routed, experts);
                    (probs, Some((routed.weights.0, routed.clusters.dropped, routed.clusters.token_count(), audit)))
                }
            };
            let l = loss(&probs, &reference, s.label, beta)?;
            let pred = argmax(&probs);
            Ok((pred, l, extra))
        })
        .collect::<Result<_>>()?;

    let classes = head.classes();
    let mut hits = vec![0usize; classes];
    let mut counts = vec![0usize; classes];
    let (mut ce, mut kl) = (0.0, 0.0);
    let (mut dropped, mut tokens) = (0usize, 0usize);
    let mut utilization: Vec<f64> = Vec::new();
    let mut audit = RoutingAudit::default();
    for (s, (pred, l, extra)) in samples.iter().zip(&per_sample) {
        counts[s.label] += 1;
        hits[s.label] += usize::from(*pred == s.label);
        ce += l.ce;
        kl += l.kl;
        if let Some((pi, d, n, a)) = extra {
            if utilization.is_empty() {
                utilization = vec![0.0; pi.len()];
            }
            utilization.iter_mut().zip(pi).for_each(|(u, p)| *u += p);
            dropped += d;
            tokens += n;
            audit.merge(a);
        }
    }
    let n = samples.len() as f64;
    utilization.iter_mut().for_each(|u| *u /= n);
    let metrics = DomainMetrics {
        domain: samples[0].domain,
        split: EvalSplit::Target,
        samples: samples.len(),
        accuracy: hits.iter().sum::<usize>() as f64 / n,
        ce: ce / n,
        kl: kl / n,
        dropped_rate: if tokens > 0 { dropped as f64 / tokens as f64 } else { 0.0 },
        per_class_accuracy: hits
            .iter()
            .zip(&counts)
            .map(|(&h, &c)| (c > 0).then(|| h as f64 / c as f64))
            .collect(),
    };
    Ok(Evaluation {
        metrics,
        utilization,
        audit,
    })
}

fn argmax(p: &[f64]) -> usize {
    // first maximum wins ties
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Loads or generates the dataset described by the config.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let ds = match &cfg.data {
        DataSource::Generate(gen) => generate(gen)?,
        DataSource::Fixture(path) => read_fixture(path)?,
    };
    if ds.dim != cfg.dim {
        return Err(Error::config("dim", format!("dataset dimension is {}, config says {}", ds.dim, cfg.dim)));
    }
    if ds.tokens < cfg.experts {
        return Err(Error::config("experts", format!("images have only {} tokens", ds.tokens)));
    }
    Ok(ds)
}

/// Thread pool sized by [`THREADS_ENV`] (all cores when unset).
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::config(THREADS_ENV, format!("expected a positive integer, got `{v}`")))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Invariant(format!("thread pool: {e}")))
}

/// Server, clients and frozen model of one experiment, advanced round by round.
pub struct Simulation {
    cfg: ExperimentConfig,
    head: FrozenTextHead,
    keys: StaticKeySet,
    global: ExpertSet,
    clients: Vec<ClientState>,
    target: Vec<Sample>,
    ledger: RoundLedger,
    round: usize,
    zero_shot: Vec<DomainMetrics>,
    records: Vec<RoundRecord>,
    audit: RoutingAudit,
}

impl Simulation {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let ds = load_dataset(cfg)?;
        Self::with_dataset(cfg, &ds)
    }

    pub fn with_dataset(cfg: &ExperimentConfig, ds: &Dataset) -> Result<Self> {
        cfg.validate()?;
        let split = leave_one_out(ds, cfg.target_domain, cfg.eval_fraction, cfg.seeds.data)?;
        let head = FrozenTextHead::new(ds.prototypes.clone(), cfg.prompt_len, mix_seed(cfg.seeds.model, &[TAG_HEAD]))?;
        let keys = init_keys(
            cfg.experts,
            cfg.dim,
            cfg.key_strategy,
            &mut Rng::derive(cfg.seeds.model, &[TAG_KEYS]),
        )?;
        let global = ExpertSet::random(
            cfg.experts,
            cfg.prompt_len,
            cfg.dim,
            cfg.expert_init_std,
            &mut Rng::derive(cfg.seeds.model, &[TAG_EXPERTS]),
        );
        let clients = split
            .clients
            .into_iter()
            .enumerate()
            .map(|(id, c)| ClientState::new(id, c.domain, c.train, c.eval, global.clone()))
            .collect();
        let mut sim = Self {
            cfg: cfg.clone(),
            head,
            keys,
            global,
            clients,
            target: split.target,
            ledger: RoundLedger::default(),
            round: 0,
            zero_shot: Vec::new(),
            records: Vec::new(),
            audit: RoutingAudit::default(),
        };
        sim.zero_shot = sim.evaluate_all(Scorer::ZeroShot)?.0;
        Ok(sim)
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn keys(&self) -> &StaticKeySet {
        &self.keys
    }

    pub fn global_experts(&self) -> &ExpertSet {
        &self.global
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn head(&self) -> &FrozenTextHead {
        &self.head
    }

    pub fn target(&self) -> &[Sample] {
        &self.target
    }

    pub fn ledger(&self) -> &RoundLedger {
        &self.ledger
    }

    pub fn records(&self) -> &[RoundRecord] {
        &self.records
    }

    pub fn zero_shot(&self) -> &[DomainMetrics] {
        &self.zero_shot
    }

    fn train_router(&self) -> Router {
        Router::new(
            self.cfg.routing_mode(),
            CapacityConfig::new(self.cfg.experts, self.cfg.effective_train_alpha()),
        )
    }

    /// Router used for every evaluation (inference capacity factor).
    pub fn inference_router(&self) -> Router {
        self.train_router().with_alpha(self.cfg.effective_inference_alpha())
    }

    /// Target accuracy of the current global experts with evaluation routing seeded by `seed`.
    pub fn target_accuracy(&self, seed: u64) -> Result<f64> {
        let router = self.inference_router();
        let scorer = Scorer::Routed {
            experts: &self.global,
            keys: &self.keys,
            router: &router,
        };
        let eval = evaluate(&self.target, scorer, &self.head, self.cfg.tau, self.cfg.effective_beta(), seed)?;
        Ok(eval.metrics.accuracy)
    }

    fn evaluate_all(&self, scorer: Scorer<'_>) -> Result<(Vec<DomainMetrics>, Vec<f64>, RoutingAudit)> {
        let beta = self.cfg.effective_beta();
        let seed = mix_seed(self.cfg.seeds.clustering, &[self.round as u64]);
        let target = evaluate(&self.target, scorer, &self.head, self.cfg.tau, beta, seed)?;
        let mut metrics = vec![target.metrics];
        let mut audit = target.audit;
        for c in &self.clients {
            if c.eval.is_empty() {
                continue;
            }
            let seed = mix_seed(seed, &[c.domain as u64 + 1]);
            let mut e = evaluate(&c.eval, scorer, &self.head, self.cfg.tau, beta, seed)?;
            e.metrics.split = EvalSplit::SourceEval;
            audit.merge(&e.audit);
            metrics.push(e.metrics);
        }
        Ok((metrics, target.utilization, audit))
    }

    /// Broadcast → local training → upload → aggregate → evaluate.
    pub fn step(&mut self) -> Result<&RoundRecord> {
        self.round += 1;
        let round = self.round;
        self.ledger.begin_round(round);
        let k = self.clients.len();
        if round == 1 {
            let msg = Downlink::Keys(self.keys.clone());
            self.ledger.record_downlink(&msg, k);
            self.clients.iter_mut().for_each(|c| c.receive(&msg));
        }
        let msg = Downlink::Experts(self.global.clone());
        self.ledger.record_downlink(&msg, k);
        self.clients.iter_mut().for_each(|c| c.receive(&msg));

        let settings = TrainSettings {
            router: self.train_router(),
            beta: self.cfg.effective_beta(),
            tau: self.cfg.tau,
            optimizer: self.cfg.optimizer(),
            batch_size: self.cfg.batch_size,
            epochs: self.cfg.local_epochs,
            seed: self.cfg.seeds.clustering,
        };
        let head = &self.head;
        let stats: Vec<TrainStats> = self
            .clients
            .par_iter_mut()
            .map(|c| local_train(c, head, &settings, round))
            .collect::<Result<_>>()?;

        let uploads: Vec<Uplink> = self.clients.iter().map(ClientState::upload).collect();
        uploads.iter().for_each(|u| self.ledger.record_uplink(u));
        self.global = aggregate(&uploads)?;

        let digest = self.keys.digest();
        for c in &self.clients {
            let held = c.keys.as_ref().map(StaticKeySet::digest);
            if held != Some(digest) {
                return Err(Error::Invariant(format!("client {} holds different keys", c.id)));
            }
        }

        let router = self.inference_router();
        let scorer = Scorer::Routed {
            experts: &self.global,
            keys: &self.keys,
            router: &router,
        };
        let (evals, utilization, eval_audit) = self.evaluate_all(scorer)?;
        let mut train = LossSummary::default();
        let (mut steps, mut dropped) = (0usize, 0.0);
        for s in &stats {
            self.audit.merge(&s.audit);
            train.ce += s.loss.ce * s.samples as f64;
            train.kl += s.loss.kl * s.samples as f64;
            train.total += s.loss.total * s.samples as f64;
            dropped += s.dropped_rate * s.samples as f64;
            steps += s.samples;
        }
        self.audit.merge(&eval_audit);
        let n = steps.max(1) as f64;
        self.records.push(RoundRecord {
            round,
            train: LossSummary {
                ce: train.ce / n,
                kl: train.kl / n,
                total: train.total / n,
            },
            train_dropped_rate: dropped / n,
            evals,
            utilization,
            key_digest: digest,
        });
        log::debug!("round {round} done");
        Ok(self.records.last().expect("just pushed"))
    }

    pub fn report(&self) -> RunReport {
        let final_target_accuracy = self
            .records
            .last()
            .and_then(RoundRecord::target)
            .or_else(|| self.zero_shot.iter().find(|m| m.split == EvalSplit::Target))
            .map_or(0.0, |m| m.accuracy);
        RunReport {
            config: self.cfg.clone(),
            seeds: self.cfg.seeds,
            zero_shot: self.zero_shot.clone(),
            rounds: self.records.clone(),
            final_target_accuracy,
            utilization: self.records.last().map(|r| r.utilization.clone()).unwrap_or_default(),
            comm: CommSummary {
                per_client_uplink: self.cfg.uplink_params_per_client(),
                clients: self.clients.len(),
                records: self.ledger.records.clone(),
            },
            audit: self.audit,
        }
    }
}

/// Runs the full experiment on a pool sized by [`THREADS_ENV`].
pub fn run(cfg: &ExperimentConfig) -> Result<RunReport> {
    let ds = {
        cfg.validate()?;
        load_dataset(cfg)?
    };
    run_on(cfg, &ds)
}

/// Runs the full experiment on an already loaded dataset.
pub fn run_on(cfg: &ExperimentConfig, ds: &Dataset) -> Result<RunReport> {
    let pool = thread_pool()?;
    pool.install(|| {
        let mut sim = Simulation::with_dataset(cfg, ds)?;
        for _ in 0..cfg.rounds {
            sim.step()?;
        }
        Ok(sim.report())
    })
}
