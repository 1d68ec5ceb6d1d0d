//! Three-phase schedule: pretrain the recommender, pretrain the filter with
//! the recommender frozen, then train both jointly.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::bcr::{loss_and_grads, Dropout, ModelParams};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{
    build_instances, generate_synthetic_corpus, load_corpus, AccountSequence, Catalog, Domain,
    GroundTruth, Prepared, SeqItem, TrainingInstance,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalResult, EvalSettings};
use crate::numerics::OptimizerSet;
use crate::rldf::{accumulate_policy_gradients, sample_episode, soft_update, FilterInput, FilterMode, FilterParams};
use crate::rng::{self, derive_seed};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    PretrainBcr,
    PretrainFilter,
    Joint,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::PretrainBcr, Phase::PretrainFilter, Phase::Joint];

    pub fn name(&self) -> &'static str {
        match self {
            Phase::PretrainBcr => "pretrain-bcr",
            Phase::PretrainFilter => "pretrain-filter",
            Phase::Joint => "joint",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Phase::ALL.into_iter().find(|p| p.name() == s)
    }

    pub fn epochs(&self, cfg: &RunConfig) -> usize {
        match self {
            Phase::PretrainBcr => cfg.pretrain_epochs,
            Phase::PretrainFilter => cfg.filter_epochs,
            Phase::Joint => cfg.joint_epochs,
        }
    }

    fn tag(&self) -> u64 {
        *self as u64 + 1
    }
}

// stream coordinates
const INIT_MODEL: u64 = 1;
const INIT_FILTER: u64 = 2;
const GENERATE: u64 = 3;
const SHUFFLE: u64 = 10;
const NEGATIVES: u64 = 11;
const DROPOUT: u64 = 12;
const EPISODE: u64 = 13;

/// The synthetic corpus a config describes.
pub fn generate(cfg: &RunConfig) -> Result<(Catalog, Vec<AccountSequence>, GroundTruth)> {
    generate_synthetic_corpus(&mut rng::stream(cfg.seed, &[GENERATE]), &cfg.generator)
}

/// Corpus plus the train/test instances derived from it.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub catalog: Catalog,
    pub seqs: Vec<AccountSequence>,
    pub prepared: Prepared,
    pub truth: Option<GroundTruth>,
}

impl Dataset {
    pub fn new(catalog: Catalog, seqs: Vec<AccountSequence>, truth: Option<GroundTruth>, max_seq_len: usize) -> Self {
        let prepared = build_instances(&seqs, max_seq_len);
        Dataset {
            catalog,
            seqs,
            prepared,
            truth,
        }
    }

    /// Load `cfg.corpus`, or generate a corpus from `cfg.generator` and `cfg.seed`.
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        if cfg.corpus.is_empty() {
            let (catalog, seqs, truth) = generate(cfg)?;
            Ok(Self::new(catalog, seqs, Some(truth), cfg.max_seq_len))
        } else {
            let (catalog, seqs) = load_corpus(&cfg.corpus)?;
            Ok(Self::new(catalog, seqs, None, cfg.max_seq_len))
        }
    }

    /// The first `fraction` of accounts.
    pub fn subset(&self, fraction: f64, max_seq_len: usize) -> Self {
        let n = ((self.seqs.len() as f64 * fraction).round() as usize).min(self.seqs.len());
        let truth = self.truth.clone().map(|mut t| {
            t.events.truncate(n);
            t.users_per_account.truncate(n);
            t
        });
        Self::new(self.catalog, self.seqs[..n].to_vec(), truth, max_seq_len)
    }

    pub fn account_ids(&self) -> Vec<String> {
        self.seqs.iter().map(|s| s.account_id.clone()).collect()
    }
}

/// One epoch's diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    pub phase: Phase,
    /// 1-based within the phase.
    pub epoch: usize,
    /// Mean recommender loss per domain; NaN when the recommender was not trained.
    pub loss: [f64; 2],
    /// Mean episode reward; NaN when no episodes ran.
    pub mean_reward: f64,
    pub revised_fraction: f64,
    pub dropped_fraction: f64,
    pub eval: Option<Vec<EvalResult>>,
    /// Wall-clock; kept out of the CSV so reports are reproducible.
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub rows: Vec<EpochRow>,
}

fn num(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        v.to_string()
    }
}

impl TrainReport {
    pub const HEADER: &'static str =
        "phase,epoch,loss_a,loss_b,mean_reward,revised_fraction,dropped_fraction,hr_a,ndcg_a,hr_b,ndcg_b";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for r in &self.rows {
            let mut metrics = [f64::NAN; 4];
            for e in r.eval.iter().flatten() {
                let n = *e.cutoffs.iter().max().unwrap_or(&0);
                let i = e.domain.index() * 2;
                metrics[i] = e.hr_at(n).unwrap_or(f64::NAN);
                metrics[i + 1] = e.ndcg_at(n).unwrap_or(f64::NAN);
            }
            let _ = write!(
                out,
                "{},{},{},{},{},{},{}",
                r.phase.name(),
                r.epoch,
                num(r.loss[0]),
                num(r.loss[1]),
                num(r.mean_reward),
                num(r.revised_fraction),
                num(r.dropped_fraction)
            );
            for m in metrics {
                let _ = write!(out, ",{}", num(m));
            }
            out.push('\n');
        }
        out
    }
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: RunConfig,
    pub model: ModelParams,
    pub filter: FilterParams,
    /// One optimizer per domain loss.
    pub bcr_opt: [OptimizerSet; 2],
    pub filter_opt: OptimizerSet,
    pub phase: Phase,
    /// Epochs finished in `phase`.
    pub epoch: usize,
}

impl TrainState {
    pub fn new(config: RunConfig, catalog: Catalog) -> Result<Self> {
        config.validate()?;
        let model = ModelParams::init(config.shape(catalog), &mut rng::stream(config.seed, &[INIT_MODEL]))?;
        let filter = FilterParams::init(config.dim, config.policy_hidden, &mut rng::stream(config.seed, &[INIT_FILTER]));
        let tensors = model.tensors();
        let bcr_opt = Domain::BOTH.map(|d| {
            OptimizerSet::new(config.optimizer, config.pretrain_lr, &tensors, &model.domain_mask(d))
        });
        let ft = filter.tensors();
        let filter_opt = OptimizerSet::new(config.optimizer, config.filter_pretrain_lr, &ft, &vec![true; ft.len()]);
        Ok(TrainState {
            config,
            model,
            filter,
            bcr_opt,
            filter_opt,
            phase: Phase::PretrainBcr,
            epoch: 0,
        })
    }

    fn mode(&self) -> Result<FilterMode> {
        self.config.filter()
    }

    /// Switch to `phase` unless it is already in progress.
    pub fn enter_phase(&mut self, phase: Phase) {
        if self.phase != phase {
            self.phase = phase;
            self.epoch = 0;
        }
        let (bcr_lr, filter_lr) = match phase {
            Phase::PretrainBcr => (self.config.pretrain_lr, self.config.filter_pretrain_lr),
            Phase::PretrainFilter => (self.config.pretrain_lr, self.config.filter_pretrain_lr),
            Phase::Joint => (self.config.joint_lr, self.config.filter_joint_lr),
        };
        for o in &mut self.bcr_opt {
            o.set_lr(bcr_lr);
        }
        self.filter_opt.set_lr(filter_lr);
    }

    fn seed(&self, coords: &[u64]) -> u64 {
        let mut c = vec![self.phase.tag(), self.epoch as u64];
        c.extend_from_slice(coords);
        derive_seed(self.config.seed, &c)
    }

    /// One pass of the recommender over `instances`, alternating domains
    /// batch by batch. Returns the mean loss per domain.
    fn recommender_epoch(&mut self, data: &Dataset, instances: &[TrainingInstance]) -> Result<[f64; 2]> {
        let cfg = &self.config;
        let mut batches: [Vec<Vec<TrainingInstance>>; 2] = [Vec::new(), Vec::new()];
        for domain in Domain::BOTH {
            let mut own: Vec<TrainingInstance> = instances.iter().filter(|i| i.domain == domain).cloned().collect();
            own.shuffle(&mut rng::stream(self.seed(&[SHUFFLE, domain.index() as u64]), &[]));
            for inst in &mut own {
                let mut r = rng::stream(self.seed(&[NEGATIVES, inst.account as u64, domain.index() as u64]), &[]);
                inst.resample_negatives(&mut r, &data.catalog, cfg.negatives)?;
            }
            batches[domain.index()] = own.chunks(cfg.batch_size).map(|c| c.to_vec()).collect();
        }
        let mut loss = [0.0; 2];
        let mut count = [0usize; 2];
        let rounds = batches[0].len().max(batches[1].len());
        for b in 0..rounds {
            for domain in Domain::BOTH {
                let di = domain.index();
                let Some(batch) = batches[di].get(b) else { continue };
                let dropout = (self.config.dropout > 0.0).then(|| Dropout {
                    rate: self.config.dropout,
                    seed: self.seed(&[DROPOUT, b as u64, di as u64]),
                });
                let (l, grads) = loss_and_grads(&self.model, batch, domain, dropout)?;
                self.bcr_opt[di].step(self.model.tensors_mut(), grads.tensors())?;
                self.model.clear_padding();
                loss[di] += l * batch.len() as f64;
                count[di] += batch.len();
            }
        }
        Ok([0, 1].map(|d| if count[d] > 0 { loss[d] / count[d] as f64 } else { f64::NAN }))
    }

    /// Sample episodes for every training instance. Returns the summed
    /// ascent gradient, per-epoch statistics, and the instances with their
    /// transferred sequences revised by the first sampled episode.
    fn episodes(&self, instances: &[TrainingInstance], keep_revised: bool) -> Result<EpisodeBatch> {
        let mode = self.mode()?;
        let j = self.config.samples;
        let scale = 1.0 / j as f64;
        // fixed chunks keep the reduction order independent of thread count
        let parts: Vec<Result<EpisodeBatch>> = instances
            .par_chunks(32)
            .enumerate()
            .map(|(c, chunk)| {
                let mut part = EpisodeBatch::new(&self.filter, keep_revised);
                for (k, inst) in chunk.iter().enumerate() {
                    let idx = (c * 32 + k) as u64;
                    let mut r = rng::stream(self.seed(&[EPISODE, idx]), &[]);
                    // the filter sees what it will see at test time: the target stays hidden
                    let input = FilterInput::evaluation(inst);
                    let mut revised: Option<Vec<SeqItem>> = None;
                    for s in 0..j {
                        let Some(trace) = sample_episode(&mut r, &self.filter, &self.model, &input, mode, false)? else {
                            break;
                        };
                        if mode.learns() {
                            accumulate_policy_gradients(&self.filter, &trace, scale, &mut part.grads)?;
                        }
                        part.reward += trace.total_reward() * scale;
                        part.revised += trace.high_action as usize as f64 * scale;
                        part.dropped += trace.dropped() as f64 * scale;
                        if s == 0 {
                            part.episodes += 1;
                            part.items += inst.transferred.len();
                            revised = Some(trace.revised(&inst.transferred));
                        }
                    }
                    if keep_revised {
                        let mut out = inst.clone();
                        if let Some(t) = revised {
                            out.transferred = t;
                        }
                        part.instances.push(out);
                    }
                }
                Ok(part)
            })
            .collect();
        let mut total = EpisodeBatch::new(&self.filter, keep_revised);
        for p in parts {
            total.merge(p?)?;
        }
        Ok(total)
    }

    /// Ascent step on the filter from a summed gradient.
    fn filter_candidate(&mut self, batch: &EpisodeBatch) -> Result<FilterParams> {
        let mut grads = batch.grads.clone();
        let n = batch.episodes.max(1) as f64;
        for t in grads.tensors_mut() {
            t.scale(-1.0 / n);
        }
        let mut cand = self.filter.clone();
        self.filter_opt.step(cand.tensors_mut(), grads.tensors())?;
        Ok(cand)
    }

    /// Run one epoch of the current phase.
    pub fn run_epoch(&mut self, data: &Dataset) -> Result<EpochRow> {
        let start = Instant::now();
        let mode = self.mode()?;
        let train = &data.prepared.train;
        let mut row = EpochRow {
            phase: self.phase,
            epoch: self.epoch + 1,
            loss: [f64::NAN; 2],
            mean_reward: f64::NAN,
            revised_fraction: f64::NAN,
            dropped_fraction: f64::NAN,
            eval: None,
            seconds: 0.0,
        };
        let (phase_name, epoch_no) = (self.phase.name(), self.epoch + 1);
        let context = |e: Error| match e {
            Error::Numerical(m) => Error::Numerical(format!("{phase_name} epoch {epoch_no}: {m}")),
            other => other,
        };
        match self.phase {
            Phase::PretrainBcr => {
                row.loss = self.recommender_epoch(data, train).map_err(context)?;
            }
            Phase::PretrainFilter => {
                let batch = self.episodes(train, false)?;
                batch.fill(&mut row);
                if mode.learns() && batch.episodes > 0 {
                    self.filter = self.filter_candidate(&batch)?;
                }
            }
            Phase::Joint => {
                let batch = self.episodes(train, true)?;
                batch.fill(&mut row);
                if mode.learns() && batch.episodes > 0 {
                    let cand = self.filter_candidate(&batch)?;
                    self.filter = soft_update(&self.filter, &cand, self.config.soft_update)?;
                }
                row.loss = self.recommender_epoch(data, &batch.instances).map_err(context)?;
            }
        }
        if !self.model.all_finite() || !self.filter.all_finite() {
            return Err(Error::Numerical(format!(
                "{} epoch {}: parameters diverged",
                self.phase.name(),
                self.epoch + 1
            )));
        }
        self.epoch += 1;
        let every = self.config.eval_every;
        if every > 0 && self.epoch % every == 0 {
            row.eval = Some(self.evaluate(data)?);
        }
        row.seconds = start.elapsed().as_secs_f64();
        Ok(row)
    }

    pub fn eval_settings(&self) -> Result<EvalSettings> {
        let mode = if self.phase == Phase::PretrainBcr { FilterMode::Off } else { self.mode()? };
        Ok(EvalSettings {
            cutoffs: self.config.eval_cutoffs.clone(),
            candidates: self.config.eval_candidates,
            mode,
            seed: self.config.seed,
        })
    }

    pub fn evaluate(&self, data: &Dataset) -> Result<Vec<EvalResult>> {
        evaluate(&self.model, Some(&self.filter), &data.prepared.test, &self.eval_settings()?)
    }

    /// Enter `phase` and run its remaining epochs, calling `after` after each.
    pub fn run_phase<F>(&mut self, data: &Dataset, phase: Phase, mut after: F) -> Result<Vec<EpochRow>>
    where
        F: FnMut(&TrainState, &EpochRow) -> Result<()>,
    {
        self.enter_phase(phase);
        let total = phase.epochs(&self.config);
        let mut rows = Vec::new();
        while self.epoch < total {
            let row = self.run_epoch(data)?;
            after(self, &row)?;
            rows.push(row);
        }
        Ok(rows)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.config.clone());
        ck.set_meta("phase", self.phase.name());
        ck.set_meta("epoch", self.epoch);
        ck.set_meta("model_checksum", format!("{:016x}", self.model.checksum()));
        ck.set_meta("filter_checksum", format!("{:016x}", self.filter.checksum()));
        ck.put_tensors("model", self.model.named());
        ck.put_tensors("filter", self.filter.named());
        ck.put_optimizer("opt_a", &self.bcr_opt[0]);
        ck.put_optimizer("opt_b", &self.bcr_opt[1]);
        ck.put_optimizer("opt_filter", &self.filter_opt);
        ck
    }

    /// Rebuild the state from a checkpoint, shaping tensors by `config`
    /// (which may differ from the stored one) and `catalog`.
    pub fn from_checkpoint(ck: &Checkpoint, config: RunConfig, catalog: Catalog) -> Result<Self> {
        let mut st = TrainState::new(config, catalog)?;
        st.model.load_named(&ck.tensors_under("model"))?;
        st.filter.load_named(&ck.tensors_under("filter"))?;
        let opts = [ck.optimizer("opt_a")?, ck.optimizer("opt_b")?];
        for (slot, o) in st.bcr_opt.iter_mut().zip(opts) {
            check_optimizer(slot, &o)?;
            *slot = o;
        }
        let fo = ck.optimizer("opt_filter")?;
        check_optimizer(&st.filter_opt, &fo)?;
        st.filter_opt = fo;
        let phase = ck.meta("phase").unwrap_or_default();
        st.phase = Phase::parse(phase).ok_or_else(|| Error::Checkpoint(format!("unknown phase '{phase}'")))?;
        st.epoch = ck.meta_parsed("epoch")?;
        Ok(st)
    }
}

fn check_optimizer(want: &OptimizerSet, got: &OptimizerSet) -> Result<()> {
    if want.states.len() != got.states.len() {
        return Err(Error::Checkpoint("optimizer covers a different tensor list".into()));
    }
    for (a, b) in want.states.iter().zip(&got.states) {
        match (a, b) {
            (None, None) => {}
            (Some(a), Some(b)) if a.second.shape() == b.second.shape() => {}
            _ => return Err(Error::Dimension("optimizer state does not match the model".into())),
        }
    }
    Ok(())
}

struct EpisodeBatch {
    grads: FilterParams,
    episodes: usize,
    items: usize,
    reward: f64,
    revised: f64,
    dropped: f64,
    instances: Vec<TrainingInstance>,
}

impl EpisodeBatch {
    fn new(filter: &FilterParams, keep: bool) -> Self {
        EpisodeBatch {
            grads: filter.zeros_like(),
            episodes: 0,
            items: 0,
            reward: 0.0,
            revised: 0.0,
            dropped: 0.0,
            instances: if keep { Vec::new() } else { Vec::with_capacity(0) },
        }
    }

    fn merge(&mut self, o: EpisodeBatch) -> Result<()> {
        self.grads.axpy(1.0, &o.grads)?;
        self.episodes += o.episodes;
        self.items += o.items;
        self.reward += o.reward;
        self.revised += o.revised;
        self.dropped += o.dropped;
        self.instances.extend(o.instances);
        Ok(())
    }

    fn fill(&self, row: &mut EpochRow) {
        if self.episodes > 0 {
            let n = self.episodes as f64;
            row.mean_reward = self.reward / n;
            row.revised_fraction = self.revised / n;
            row.dropped_fraction = self.dropped / self.items.max(1) as f64;
        }
    }
}

/// Pretrain the recommender from a fresh state.
pub fn pretrain_bcr(config: &RunConfig, data: &Dataset) -> Result<(TrainState, TrainReport)> {
    let mut st = TrainState::new(config.clone(), data.catalog)?;
    let rows = st.run_phase(data, Phase::PretrainBcr, |_, _| Ok(()))?;
    Ok((st, TrainReport { rows }))
}

/// Train the filter against the frozen recommender.
pub fn pretrain_filter(state: &mut TrainState, data: &Dataset) -> Result<TrainReport> {
    let rows = state.run_phase(data, Phase::PretrainFilter, |_, _| Ok(()))?;
    Ok(TrainReport { rows })
}

pub fn joint_train(state: &mut TrainState, data: &Dataset) -> Result<TrainReport> {
    let rows = state.run_phase(data, Phase::Joint, |_, _| Ok(()))?;
    Ok(TrainReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::GeneratorConfig;

    fn small_config() -> RunConfig {
        RunConfig {
            generator: GeneratorConfig {
                accounts: 40,
                items_a: 30,
                items_b: 30,
                topics: 5,
                seq_len_min: 10,
                seq_len_max: 16,
                ..GeneratorConfig::default()
            },
            dim: 8,
            att_dim: 8,
            max_seq_len: 10,
            batch_size: 16,
            pretrain_epochs: 3,
            filter_epochs: 2,
            joint_epochs: 2,
            ..RunConfig::default()
        }
    }

    #[test]
    fn zero_epochs_keep_initialisation() {
        let cfg = RunConfig { pretrain_epochs: 0, ..small_config() };
        let data = Dataset::from_config(&cfg).unwrap();
        let (st, report) = pretrain_bcr(&cfg, &data).unwrap();
        assert!(report.rows.is_empty());
        let fresh = TrainState::new(cfg, data.catalog).unwrap();
        assert_eq!(st.model, fresh.model);
    }

    #[test]
    fn tiny_corpus_overfits() {
        let mut cfg = small_config();
        cfg.generator.accounts = 10;
        cfg.pretrain_epochs = 50;
        cfg.dropout = 0.0;
        let data = Dataset::from_config(&cfg).unwrap();
        let (_, report) = pretrain_bcr(&cfg, &data).unwrap();
        for d in 0..2 {
            let first = report.rows[0].loss[d];
            let last = report.rows[49].loss[d];
            assert!(last <= 0.5 * first, "domain {d}: {first} -> {last}");
        }
    }

    #[test]
    fn pretraining_is_bitwise_reproducible() {
        let cfg = small_config();
        let data = Dataset::from_config(&cfg).unwrap();
        let (a, ra) = pretrain_bcr(&cfg, &data).unwrap();
        let (b, rb) = pretrain_bcr(&cfg, &data).unwrap();
        assert_eq!(a.model.checksum(), b.model.checksum());
        assert_eq!(ra.to_csv(), rb.to_csv());
    }

    #[test]
    fn filter_pretraining_leaves_recommender_untouched() {
        let cfg = small_config();
        let data = Dataset::from_config(&cfg).unwrap();
        let (mut st, _) = pretrain_bcr(&cfg, &data).unwrap();
        let before = st.model.checksum();
        let phi = st.filter.checksum();
        let report = pretrain_filter(&mut st, &data).unwrap();
        assert_eq!(st.model.checksum(), before);
        assert_ne!(st.filter.checksum(), phi);
        assert!(report.rows.iter().all(|r| r.mean_reward.is_finite() && r.loss[0].is_nan()));
    }

    #[test]
    fn sample_count_changes_gradients() {
        let cfg = small_config();
        let data = Dataset::from_config(&cfg).unwrap();
        let (mut st1, _) = pretrain_bcr(&cfg, &data).unwrap();
        let mut st3 = st1.clone();
        st1.config.samples = 1;
        st1.enter_phase(Phase::PretrainFilter);
        st3.enter_phase(Phase::PretrainFilter);
        let g1 = st1.episodes(&data.prepared.train, false).unwrap().grads;
        let g3 = st3.episodes(&data.prepared.train, false).unwrap().grads;
        assert!(g1.all_finite() && g3.all_finite());
        assert_ne!(g1, g3);
    }

    #[test]
    fn joint_with_zero_lambda_freezes_filter() {
        let cfg = RunConfig { soft_update: 0.0, ..small_config() };
        let data = Dataset::from_config(&cfg).unwrap();
        let (mut st, _) = pretrain_bcr(&cfg, &data).unwrap();
        pretrain_filter(&mut st, &data).unwrap();
        let phi = st.filter.clone();
        let theta = st.model.checksum();
        joint_train(&mut st, &data).unwrap();
        assert_eq!(st.filter, phi);
        assert_ne!(st.model.checksum(), theta);
    }

    #[test]
    fn inert_filter_reduces_to_plain_training() {
        let cfg = small_config();
        let data = Dataset::from_config(&cfg).unwrap();
        let (pre, _) = pretrain_bcr(&cfg, &data).unwrap();

        let mut off = pre.clone();
        off.config.filter_mode = "off".into();
        joint_train(&mut off, &data).unwrap();

        // a high-level policy that never revises
        let mut never = pre.clone();
        for p in &mut never.filter.high {
            p.w2.fill(0.0);
            p.b.fill(1.0);
            p.w1.fill(-1e4);
        }
        never.config.soft_update = 0.0;
        joint_train(&mut never, &data).unwrap();
        assert_eq!(off.model, never.model);
    }

    #[test]
    fn optimizers_are_separated_by_domain() {
        let cfg = small_config();
        let data = Dataset::from_config(&cfg).unwrap();
        let mut st = TrainState::new(cfg, data.catalog).unwrap();
        st.enter_phase(Phase::PretrainBcr);
        let b_only: Vec<TrainingInstance> = data.prepared.train_in(Domain::B).cloned().collect();
        let before = st.bcr_opt[0].clone();
        st.recommender_epoch(&data, &b_only).unwrap();
        assert_eq!(st.bcr_opt[0], before);
        assert_ne!(st.bcr_opt[1].states[0].as_ref().unwrap().step, 0);
        // head A is owned only by optimizer A
        let mask_b = st.model.domain_mask(Domain::B);
        let names = ModelParams::names();
        for (i, n) in names.iter().enumerate() {
            assert_eq!(st.bcr_opt[1].states[i].is_some(), mask_b[i], "{n}");
            if n.starts_with("a.") {
                assert!(st.bcr_opt[1].states[i].is_none());
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_and_resume() {
        let cfg = RunConfig { eval_every: 1, ..small_config() };
        let data = Dataset::from_config(&cfg).unwrap();
        let mut full = TrainState::new(cfg.clone(), data.catalog).unwrap();
        let mut all_rows = Vec::new();
        for phase in Phase::ALL {
            all_rows.extend(full.run_phase(&data, phase, |_, _| Ok(())).unwrap());
        }

        // stop after the first joint epoch and resume from disk
        let mut part = TrainState::new(cfg.clone(), data.catalog).unwrap();
        part.run_phase(&data, Phase::PretrainBcr, |_, _| Ok(())).unwrap();
        part.run_phase(&data, Phase::PretrainFilter, |_, _| Ok(())).unwrap();
        part.enter_phase(Phase::Joint);
        part.run_epoch(&data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mid.ckpt");
        part.to_checkpoint().save(&path).unwrap();
        let ck = Checkpoint::load(&path).unwrap();
        let mut resumed = TrainState::from_checkpoint(&ck, ck.config.clone(), data.catalog).unwrap();
        assert_eq!(resumed, part);
        let rest = resumed.run_phase(&data, Phase::Joint, |_, _| Ok(())).unwrap();
        assert_eq!(rest.len(), 1);
        let strip = |r: &EpochRow| EpochRow { seconds: 0.0, ..r.clone() };
        assert_eq!(strip(&rest[0]), strip(all_rows.last().unwrap()));
        assert_eq!(resumed.model, full.model);
        assert_eq!(resumed.filter, full.filter);

        let wrong = RunConfig { dim: 4, att_dim: 4, ..cfg };
        assert!(matches!(
            TrainState::from_checkpoint(&ck, wrong, data.catalog),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn report_csv_layout() {
        let cfg = RunConfig { eval_every: 2, pretrain_epochs: 2, ..small_config() };
        let data = Dataset::from_config(&cfg).unwrap();
        let (_, report) = pretrain_bcr(&cfg, &data).unwrap();
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], TrainReport::HEADER);
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("pretrain-bcr,1,") && lines[1].ends_with(",,,,,,,"));
        assert_eq!(lines[2].split(',').count(), 11);
        for r in &report.rows {
            for e in r.eval.iter().flatten() {
                for (h, n) in e.hr.iter().zip(&e.ndcg) {
                    assert!(n <= h);
                }
            }
        }
    }

    #[test]
    fn divergence_aborts_with_context() {
        let cfg = RunConfig { pretrain_lr: 1e200, pretrain_epochs: 5, optimizer: crate::numerics::OptimizerKind::Adagrad, ..small_config() };
        let data = Dataset::from_config(&cfg).unwrap();
        let err = pretrain_bcr(&cfg, &data).unwrap_err();
        assert!(matches!(err, Error::Numerical(ref m) if m.starts_with("pretrain-bcr epoch")), "{err}");
    }
}
