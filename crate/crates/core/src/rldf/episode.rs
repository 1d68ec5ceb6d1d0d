use rand::Rng;

use crate::bcr::{predict, transferred_representations, ModelParams, PROB_CLAMP};
use crate::data::{Domain, ItemId, SeqItem, TrainingInstance};
use crate::error::{Error, Result};
use crate::numerics::cosine_unchecked;
use crate::rldf::policy::FilterParams;

#[derive(Clone, Debug, PartialEq)]
pub struct HighState {
    pub mean_cosine: f64,
    pub mean_hadamard: Vec<f64>,
    pub rec_prob: f64,
}

impl HighState {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.mean_hadamard.len() + 2);
        v.push(self.mean_cosine);
        v.extend_from_slice(&self.mean_hadamard);
        v.push(self.rec_prob);
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LowState {
    pub item_cosine: f64,
    pub mean_reserved_cosine: f64,
    pub abs_diff: Vec<f64>,
    pub mean_abs_diff: Vec<f64>,
}

impl LowState {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(2 * self.abs_diff.len() + 2);
        v.push(self.item_cosine);
        v.push(self.mean_reserved_cosine);
        v.extend_from_slice(&self.abs_diff);
        v.extend_from_slice(&self.mean_abs_diff);
        v
    }
}

pub fn high_state(transferred: &[&[f64]], target: &[f64], rec_prob: f64) -> Result<HighState> {
    if transferred.is_empty() {
        return Err(Error::Dimension("high-level state of an empty transferred sequence".into()));
    }
    let n = transferred.len() as f64;
    let mut mean_hadamard = vec![0.0; target.len()];
    let mut cos = 0.0;
    for e in transferred {
        if e.len() != target.len() {
            return Err(Error::Dimension("transferred and target embeddings differ in width".into()));
        }
        cos += cosine_unchecked(e, target);
        for (h, (a, b)) in mean_hadamard.iter_mut().zip(e.iter().zip(target)) {
            *h += a * b / n;
        }
    }
    Ok(HighState {
        mean_cosine: cos / n,
        mean_hadamard,
        rec_prob,
    })
}

/// Indices still in play before deciding item `m`: earlier items that were
/// kept plus `m` and everything after it.
pub fn reserved_indices(kept_before: &[bool], m: usize, n: usize) -> Vec<usize> {
    (0..m).filter(|&j| kept_before[j]).chain(m..n).collect()
}

pub fn low_state(transferred: &[&[f64]], kept_before: &[bool], m: usize, target: &[f64]) -> Result<LowState> {
    if m >= transferred.len() || kept_before.len() < m {
        return Err(Error::Index(format!("low-level step {m} of {}", transferred.len())));
    }
    let reserved = reserved_indices(kept_before, m, transferred.len());
    let r = reserved.len() as f64;
    let mut mean_cos = 0.0;
    let mut mean_abs = vec![0.0; target.len()];
    for &j in &reserved {
        mean_cos += cosine_unchecked(transferred[j], target) / r;
        for (acc, (a, b)) in mean_abs.iter_mut().zip(transferred[j].iter().zip(target)) {
            *acc += (a - b).abs() / r;
        }
    }
    Ok(LowState {
        item_cosine: cosine_unchecked(transferred[m], target),
        mean_reserved_cosine: mean_cos,
        abs_diff: transferred[m].iter().zip(target).map(|(a, b)| (a - b).abs()).collect(),
        mean_abs_diff: mean_abs,
    })
}

/// Change in mean cosine from keeping item `m` (or its negation for removal).
pub fn immediate_reward(cosines: &[f64], kept_before: &[bool], m: usize, keep: bool) -> Result<f64> {
    if m >= cosines.len() || kept_before.len() < m {
        return Err(Error::Index(format!("low-level step {m} of {}", cosines.len())));
    }
    let reserved = reserved_indices(kept_before, m, cosines.len());
    let sum: f64 = reserved.iter().map(|&j| cosines[j]).sum();
    Ok(reserve_reward(sum, reserved.len(), cosines[m], keep))
}

fn reserve_reward(sum: f64, count: usize, cos_m: f64, keep: bool) -> f64 {
    if count <= 1 {
        return if keep { 0.0 } else { -cos_m };
    }
    let with = sum / count as f64;
    let without = (sum - cos_m) / (count - 1) as f64;
    if keep {
        with - without
    } else {
        without - with
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FilterMode {
    /// Transferred sequences pass through untouched.
    Off,
    Full,
    /// Whole sequences are kept or dropped.
    HighOnly,
    /// Every sequence enters per-item filtering.
    LowOnly,
    /// Revise when `ln P(target) < mu1`, drop items with cosine below `mu2`.
    Greedy { mu1: f64, mu2: f64 },
}

impl FilterMode {
    pub fn name(&self) -> &'static str {
        match self {
            FilterMode::Off => "off",
            FilterMode::Full => "full",
            FilterMode::HighOnly => "high_only",
            FilterMode::LowOnly => "low_only",
            FilterMode::Greedy { .. } => "greedy",
        }
    }

    /// Parses a mode name; greedy thresholds come from the caller.
    pub fn parse(s: &str, mu1: f64, mu2: f64) -> Option<Self> {
        Some(match s {
            "off" => FilterMode::Off,
            "full" => FilterMode::Full,
            "high_only" => FilterMode::HighOnly,
            "low_only" => FilterMode::LowOnly,
            "greedy" => FilterMode::Greedy { mu1, mu2 },
            _ => return None,
        })
    }

    pub fn learns_high(&self) -> bool {
        matches!(self, FilterMode::Full | FilterMode::HighOnly)
    }

    pub fn learns_low(&self) -> bool {
        matches!(self, FilterMode::Full | FilterMode::LowOnly)
    }

    pub fn learns(&self) -> bool {
        self.learns_high() || self.learns_low()
    }
}

/// What the filter conditions on: the predicted domain's history, the
/// transferred sequence and the item standing in for the target.
#[derive(Clone, Copy, Debug)]
pub struct FilterInput<'a> {
    pub domain: Domain,
    pub history: &'a [SeqItem],
    pub transferred: &'a [SeqItem],
    pub target: ItemId,
}

impl<'a> FilterInput<'a> {
    pub fn training(inst: &'a TrainingInstance) -> Self {
        FilterInput {
            domain: inst.domain,
            history: &inst.history,
            transferred: &inst.transferred,
            target: inst.target,
        }
    }

    /// At test time the target is unknown: the most recent own item plays
    /// its role, predicted from the items before it.
    pub fn evaluation(inst: &'a TrainingInstance) -> Self {
        let n = inst.history.len();
        let (history, target) = match n {
            0 => (&inst.history[..], inst.target),
            1 => (&inst.history[..], inst.history[0].item),
            _ => (&inst.history[..n - 1], inst.history[n - 1].item),
        };
        FilterInput {
            domain: inst.domain,
            history,
            transferred: &inst.transferred,
            target,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeTrace {
    pub domain: Domain,
    pub mode: FilterMode,
    pub high_state: Vec<f64>,
    pub high_action: bool,
    pub low_states: Vec<Vec<f64>>,
    pub low_actions: Vec<bool>,
    /// Removal probability of each low-level decision.
    pub drop_probs: Vec<f64>,
    pub kept_mask: Vec<bool>,
    /// Combined reward per low-level action.
    pub rewards: Vec<f64>,
    pub high_reward: f64,
    /// Delayed reward of the revision.
    pub final_reward: f64,
}

impl EpisodeTrace {
    pub fn revised(&self, transferred: &[SeqItem]) -> Vec<SeqItem> {
        transferred
            .iter()
            .zip(&self.kept_mask)
            .filter(|(_, &k)| k)
            .map(|(s, _)| *s)
            .collect()
    }

    pub fn dropped(&self) -> usize {
        self.kept_mask.iter().filter(|&&k| !k).count()
    }

    /// Sum of low-level rewards, or the high-level reward when no item-level
    /// decisions were made.
    pub fn total_reward(&self) -> f64 {
        if self.rewards.is_empty() {
            self.high_reward
        } else {
            self.rewards.iter().sum()
        }
    }
}

fn log_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP).ln()
}

fn decide<R: Rng + ?Sized>(rng: &mut R, p1: f64, greedy: bool) -> bool {
    let u: f64 = rng.gen();
    if greedy {
        p1 >= 0.5
    } else {
        u < p1
    }
}

/// Run one filtering episode. Returns `None` when there is nothing to filter.
pub fn sample_episode<R: Rng + ?Sized>(
    rng: &mut R,
    filter: &FilterParams,
    model: &ModelParams,
    input: &FilterInput<'_>,
    mode: FilterMode,
    greedy: bool,
) -> Result<Option<EpisodeTrace>> {
    let n = input.transferred.len();
    if n == 0 {
        return Ok(None);
    }
    let domain = input.domain;
    let target = model.emb(domain).row(input.target as usize).to_vec();
    let reps = transferred_representations(model, domain, input.transferred, input.target)?;
    let embs: Vec<&[f64]> = reps.iter().map(|r| r.as_slice()).collect();
    let p_orig = predict(model, domain, input.history, input.transferred, input.target)?;
    let mut trace = EpisodeTrace {
        domain,
        mode,
        high_state: Vec::new(),
        high_action: false,
        low_states: Vec::new(),
        low_actions: Vec::new(),
        drop_probs: Vec::new(),
        kept_mask: vec![true; n],
        rewards: Vec::new(),
        high_reward: 0.0,
        final_reward: 0.0,
    };
    trace.high_action = match mode {
        FilterMode::Off => false,
        FilterMode::LowOnly => true,
        FilterMode::Greedy { mu1, .. } => log_prob(p_orig) < mu1,
        FilterMode::Full | FilterMode::HighOnly => {
            let s = high_state(&embs, &target, p_orig)?.to_vec();
            let p1 = filter.high(domain).act_prob(&s)?;
            trace.high_state = s;
            decide(rng, p1, greedy)
        }
    };
    if !trace.high_action {
        return Ok(Some(trace));
    }
    if mode == FilterMode::HighOnly {
        trace.kept_mask = vec![false; n];
        let p_none = predict(model, domain, input.history, &[], input.target)?;
        trace.high_reward = log_prob(p_none) - log_prob(p_orig);
        trace.final_reward = trace.high_reward;
        return Ok(Some(trace));
    }

    let cosines: Vec<f64> = embs.iter().map(|e| cosine_unchecked(e, &target)).collect();
    let d = target.len();
    // running sums over the reserved set
    let mut sum_cos: f64 = cosines.iter().sum();
    let mut abs_rows: Vec<Vec<f64>> = embs
        .iter()
        .map(|e| e.iter().zip(&target).map(|(a, b)| (a - b).abs()).collect())
        .collect();
    let mut sum_abs = vec![0.0; d];
    for row in &abs_rows {
        crate::numerics::axpy(1.0, row, &mut sum_abs);
    }
    let mut count = n;
    let low = filter.low(domain);
    for m in 0..n {
        let keep = match mode {
            FilterMode::Greedy { mu2, .. } => cosines[m] >= mu2,
            _ => {
                let r = count as f64;
                let state = LowState {
                    item_cosine: cosines[m],
                    mean_reserved_cosine: sum_cos / r,
                    abs_diff: std::mem::take(&mut abs_rows[m]),
                    mean_abs_diff: sum_abs.iter().map(|x| x / r).collect(),
                };
                let s = state.to_vec();
                abs_rows[m] = state.abs_diff;
                let p1 = low.act_prob(&s)?;
                trace.low_states.push(s);
                trace.drop_probs.push(1.0 - p1);
                decide(rng, p1, greedy)
            }
        };
        trace.low_actions.push(keep);
        trace.rewards.push(reserve_reward(sum_cos, count, cosines[m], keep));
        if !keep {
            trace.kept_mask[m] = false;
            sum_cos -= cosines[m];
            crate::numerics::axpy(-1.0, &abs_rows[m], &mut sum_abs);
            count -= 1;
        }
    }
    trace.final_reward = delayed_reward(model, input, &trace.kept_mask, p_orig)?;
    if let Some(last) = trace.rewards.last_mut() {
        *last += trace.final_reward;
    }
    if mode == FilterMode::Full {
        trace.high_reward = trace.final_reward;
    }
    Ok(Some(trace))
}

/// `ln P(target | revised) - ln P(target | original)`; zero when nothing or
/// everything was removed.
pub fn delayed_reward(model: &ModelParams, input: &FilterInput<'_>, kept_mask: &[bool], p_orig: f64) -> Result<f64> {
    if kept_mask.len() != input.transferred.len() {
        return Err(Error::Dimension("kept mask does not match the transferred sequence".into()));
    }
    if kept_mask.iter().all(|&k| k) || kept_mask.iter().all(|&k| !k) {
        return Ok(0.0);
    }
    let revised: Vec<SeqItem> = input
        .transferred
        .iter()
        .zip(kept_mask)
        .filter(|(_, &k)| k)
        .map(|(s, _)| *s)
        .collect();
    let p_new = predict(model, input.domain, input.history, &revised, input.target)?;
    Ok(log_prob(p_new) - log_prob(p_orig))
}

/// Accumulate `scale * sum of reward-weighted grad log pi` for one trace.
pub fn accumulate_policy_gradients(
    filter: &FilterParams,
    trace: &EpisodeTrace,
    scale: f64,
    grads: &mut FilterParams,
) -> Result<()> {
    let i = trace.domain.index();
    if trace.mode.learns_high() && !trace.high_state.is_empty() && trace.high_reward != 0.0 {
        filter.high[i].accumulate_log_grad(
            &trace.high_state,
            trace.high_action,
            scale * trace.high_reward,
            &mut grads.high[i],
        )?;
    }
    if trace.mode.learns_low() {
        for ((s, &a), &r) in trace.low_states.iter().zip(&trace.low_actions).zip(&trace.rewards) {
            if r != 0.0 {
                filter.low[i].accumulate_log_grad(s, a, scale * r, &mut grads.low[i])?;
            }
        }
    }
    Ok(())
}

/// Ascent direction averaged over the sampled traces of one sequence.
pub fn policy_gradients(filter: &FilterParams, traces: &[EpisodeTrace]) -> Result<FilterParams> {
    if traces.is_empty() {
        return Err(Error::Gradient("policy gradient over zero traces".into()));
    }
    let mut grads = filter.zeros_like();
    let scale = 1.0 / traces.len() as f64;
    for t in traces {
        accumulate_policy_gradients(filter, t, scale, &mut grads)?;
    }
    Ok(grads)
}
