//! Leave-one-out ranking evaluation: HR@N and NDCG@N.

use std::fmt;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::bcr::{score_candidates, ModelParams};
use crate::data::{sample_negatives, Domain, ItemId, TrainingInstance};
use crate::error::{Error, Result};
use crate::rldf::{sample_episode, FilterInput, FilterMode, FilterParams};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CandidateMode {
    /// Every item of the target domain.
    Full,
    /// The target plus this many unobserved items.
    Sampled(usize),
}

impl CandidateMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "full" => Some(CandidateMode::Full),
            _ => s
                .strip_prefix("sampled:")
                .and_then(|n| n.parse().ok())
                .map(CandidateMode::Sampled),
        }
    }
}

impl fmt::Display for CandidateMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CandidateMode::Full => write!(f, "full"),
            CandidateMode::Sampled(n) => write!(f, "sampled:{n}"),
        }
    }
}

/// 1-based rank of `scores[target]`; ties count against the target.
pub fn rank_from_scores(scores: &[f64], target: usize) -> usize {
    let t = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| i != target && s >= t)
        .count()
}

pub fn hit_ratio(ranks: &[usize], n: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::Eval("hit ratio of an empty rank list".into()));
    }
    Ok(ranks.iter().filter(|&&r| r <= n).count() as f64 / ranks.len() as f64)
}

pub fn ndcg(ranks: &[usize], n: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::Eval("NDCG of an empty rank list".into()));
    }
    let total: f64 = ranks
        .iter()
        .filter(|&&r| r <= n)
        .map(|&r| 1.0 / ((r + 1) as f64).log2())
        .sum();
    Ok(total / ranks.len() as f64)
}

#[derive(Clone, Debug)]
pub struct EvalSettings {
    pub cutoffs: Vec<usize>,
    pub candidates: CandidateMode,
    pub mode: FilterMode,
    pub seed: u64,
}

/// Candidate list for an instance, with the target at index 0.
pub fn candidate_items(inst: &TrainingInstance, catalog_size: usize, mode: CandidateMode, seed: u64) -> Result<Vec<ItemId>> {
    check_target(inst, catalog_size)?;
    match mode {
        CandidateMode::Full => Ok(std::iter::once(inst.target)
            .chain((1..=catalog_size as ItemId).filter(|&c| c != inst.target))
            .collect()),
        CandidateMode::Sampled(n) => {
            let mut r = rng::stream(seed, &[EVAL_STREAM, inst.account as u64, inst.domain.index() as u64]);
            let mut out = vec![inst.target];
            out.extend(sample_negatives(&mut r, catalog_size, &inst.observed, n)?);
            Ok(out)
        }
    }
}

const EVAL_STREAM: u64 = 0xE7A1;

fn check_target(inst: &TrainingInstance, catalog_size: usize) -> Result<()> {
    if inst.target == 0 || inst.target as usize > catalog_size {
        return Err(Error::Index(format!(
            "target {} outside domain {} catalog of {catalog_size}",
            inst.target, inst.domain
        )));
    }
    Ok(())
}

/// Transferred sequence after greedy filtering under `mode`.
pub fn filtered_transfer(
    model: &ModelParams,
    filter: Option<&FilterParams>,
    mode: FilterMode,
    inst: &TrainingInstance,
) -> Result<Vec<crate::data::SeqItem>> {
    let (Some(filter), false) = (filter, mode == FilterMode::Off) else {
        return Ok(inst.transferred.clone());
    };
    // greedy decisions draw nothing from the stream
    let mut unused = rng::stream(0, &[]);
    match sample_episode(&mut unused, filter, model, &FilterInput::evaluation(inst), mode, true)? {
        Some(trace) => Ok(trace.revised(&inst.transferred)),
        None => Ok(inst.transferred.clone()),
    }
}

/// Rank of the target among the candidates, after greedy filtering.
pub fn rank_target(
    model: &ModelParams,
    filter: Option<&FilterParams>,
    inst: &TrainingInstance,
    settings: &EvalSettings,
) -> Result<usize> {
    let size = model.shape.catalog.size(inst.domain);
    let cands = candidate_items(inst, size, settings.candidates, settings.seed)?;
    let transferred = filtered_transfer(model, filter, settings.mode, inst)?;
    let scores = score_candidates(model, inst.domain, &inst.history, &transferred, &cands)?;
    Ok(rank_from_scores(&scores, 0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub domain: Domain,
    pub cutoffs: Vec<usize>,
    pub hr: Vec<f64>,
    pub ndcg: Vec<f64>,
    pub count: usize,
    /// Per-instance `(account, rank)`.
    pub ranks: Vec<(usize, usize)>,
}

impl EvalResult {
    pub fn from_ranks(domain: Domain, cutoffs: &[usize], ranks: Vec<(usize, usize)>) -> Result<Self> {
        let r: Vec<usize> = ranks.iter().map(|&(_, r)| r).collect();
        let hr = cutoffs.iter().map(|&n| hit_ratio(&r, n)).collect::<Result<Vec<_>>>()?;
        let nd = cutoffs.iter().map(|&n| ndcg(&r, n)).collect::<Result<Vec<_>>>()?;
        if let Some(i) = (0..cutoffs.len()).find(|&i| nd[i] > hr[i]) {
            return Err(Error::Eval(format!("NDCG@{0} {1} exceeds HR@{0} {2}", cutoffs[i], nd[i], hr[i])));
        }
        Ok(EvalResult {
            domain,
            cutoffs: cutoffs.to_vec(),
            hr,
            ndcg: nd,
            count: r.len(),
            ranks,
        })
    }

    pub fn hr_at(&self, n: usize) -> Option<f64> {
        self.cutoffs.iter().position(|&c| c == n).map(|i| self.hr[i])
    }

    pub fn ndcg_at(&self, n: usize) -> Option<f64> {
        self.cutoffs.iter().position(|&c| c == n).map(|i| self.ndcg[i])
    }
}

/// Evaluate every test instance, one result per domain present.
pub fn evaluate(
    model: &ModelParams,
    filter: Option<&FilterParams>,
    test: &[TrainingInstance],
    settings: &EvalSettings,
) -> Result<Vec<EvalResult>> {
    if test.is_empty() {
        return Err(Error::Eval("empty test set".into()));
    }
    let ranks: Vec<usize> = test
        .par_iter()
        .map(|inst| rank_target(model, filter, inst, settings))
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for domain in Domain::BOTH {
        let r: Vec<(usize, usize)> = test
            .iter()
            .zip(&ranks)
            .filter(|(i, _)| i.domain == domain)
            .map(|(i, &r)| (i.account, r))
            .collect();
        if !r.is_empty() {
            out.push(EvalResult::from_ranks(domain, &settings.cutoffs, r)?);
        }
    }
    Ok(out)
}

pub fn results_csv(results: &[EvalResult]) -> String {
    let mut out = String::from("domain,cutoff,hr,ndcg,instances\n");
    for r in results {
        for (i, n) in r.cutoffs.iter().enumerate() {
            let _ = writeln!(out, "{},{n},{},{},{}", r.domain, r.hr[i], r.ndcg[i], r.count);
        }
    }
    out
}

pub fn results_table(results: &[EvalResult]) -> String {
    let mut out = format!("{:<8}{:>8}{:>10}{:>10}{:>11}\n", "domain", "N", "HR@N", "NDCG@N", "instances");
    for r in results {
        for (i, n) in r.cutoffs.iter().enumerate() {
            let _ = writeln!(
                out,
                "{:<8}{:>8}{:>10.4}{:>10.4}{:>11}",
                r.domain.to_string(),
                n,
                r.hr[i],
                r.ndcg[i],
                r.count
            );
        }
    }
    out
}

pub fn ranks_csv(results: &[EvalResult], accounts: &[String]) -> String {
    let mut out = String::from("domain,account,rank\n");
    for r in results {
        for &(a, rank) in &r.ranks {
            let name = accounts.get(a).map_or("?", |s| s.as_str());
            let _ = writeln!(out, "{},{name},{rank}", r.domain);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bcr::tests::{random_instance, tiny_shape};
    use crate::rng::stream;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn rank_examples() {
        assert_eq!(rank_from_scores(&[3.0, 1.0, 2.0], 0), 1);
        assert_eq!(rank_from_scores(&[1.0; 7], 0), 7);
        assert_eq!(rank_from_scores(&[0.5, 0.9, 0.5, 0.1], 0), 3);
    }

    #[test]
    fn metric_examples() {
        assert_eq!(hit_ratio(&[1, 2, 3], 5).unwrap(), 1.0);
        assert_eq!(hit_ratio(&[6], 5).unwrap(), 0.0);
        assert_eq!(hit_ratio(&[1, 7, 4, 11], 10).unwrap(), 0.75);
        assert_eq!(ndcg(&[1], 5).unwrap(), 1.0);
        assert_eq!(ndcg(&[3], 5).unwrap(), 0.5);
        assert_eq!(ndcg(&[6], 5).unwrap(), 0.0);
        assert!(matches!(hit_ratio(&[], 5), Err(Error::Eval(_))));
        assert!(ndcg(&[], 5).is_err());
    }

    #[test]
    fn candidate_modes() {
        assert_eq!(CandidateMode::parse("full"), Some(CandidateMode::Full));
        assert_eq!(CandidateMode::parse("sampled:100"), Some(CandidateMode::Sampled(100)));
        assert_eq!(CandidateMode::parse("sampled:x"), None);
        assert_eq!(CandidateMode::Sampled(7).to_string(), "sampled:7");
    }

    fn brute_rank(scores: &[f64], target: usize) -> usize {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        // descending, target last among equals
        order.sort_by(|&a, &b| {
            scores[b]
                .partial_cmp(&scores[a])
                .unwrap()
                .then_with(|| (a == target).cmp(&(b == target)))
        });
        order.iter().position(|&i| i == target).unwrap() + 1
    }

    #[test]
    fn ranks_match_sort_oracle_on_model_scores() {
        let p = ModelParams::init(tiny_shape(), &mut stream(1, &[])).unwrap();
        let mut rng = stream(2, &[]);
        let settings = EvalSettings {
            cutoffs: vec![5, 10],
            candidates: CandidateMode::Full,
            mode: FilterMode::Off,
            seed: 0,
        };
        for i in 0..50 {
            let inst = random_instance(&mut rng, Domain::BOTH[i % 2], &p.shape, i);
            let size = p.shape.catalog.size(inst.domain);
            let cands = candidate_items(&inst, size, CandidateMode::Full, 0).unwrap();
            let scores = score_candidates(&p, inst.domain, &inst.history, &inst.transferred, &cands).unwrap();
            assert_eq!(rank_target(&p, None, &inst, &settings).unwrap(), brute_rank(&scores, 0));
        }
    }

    #[test]
    fn full_catalog_equals_sampled_on_same_set() {
        // a catalog of exactly target + negatives
        let mut shape = tiny_shape();
        shape.catalog.items_a = 6;
        let p = ModelParams::init(shape, &mut stream(3, &[])).unwrap();
        let mut inst = random_instance(&mut stream(3, &[1]), Domain::A, &p.shape, 0);
        inst.observed = vec![inst.target];
        let full = EvalSettings { cutoffs: vec![5], candidates: CandidateMode::Full, mode: FilterMode::Off, seed: 0 };
        let sampled = EvalSettings { candidates: CandidateMode::Sampled(5), ..full.clone() };
        assert_eq!(
            rank_target(&p, None, &inst, &full).unwrap(),
            rank_target(&p, None, &inst, &sampled).unwrap()
        );
        inst.target = 9;
        assert!(matches!(rank_target(&p, None, &inst, &full), Err(Error::Index(_))));
    }

    #[test]
    fn untrained_model_is_near_uniform() {
        // an untrained model ranks the target roughly uniformly over the catalog
        let mut shape = tiny_shape();
        shape.catalog.items_b = 40;
        let p = ModelParams::init(shape, &mut stream(4, &[])).unwrap();
        let mut rng = stream(5, &[]);
        let test: Vec<_> = (0..2000)
            .map(|i| {
                let mut inst = random_instance(&mut rng, Domain::B, &p.shape, i);
                inst.target = rng.gen_range(1..=40);
                inst
            })
            .collect();
        let settings = EvalSettings { cutoffs: vec![10], candidates: CandidateMode::Full, mode: FilterMode::Off, seed: 0 };
        let res = evaluate(&p, None, &test, &settings).unwrap();
        let hr = res[0].hr[0];
        let expect: f64 = 10.0 / 40.0;
        let sigma = (expect * (1.0 - expect) / 2000.0).sqrt();
        assert!((hr - expect).abs() < 3.0 * sigma + 0.02, "{hr}");
        assert!(evaluate(&p, None, &[], &settings).is_err());
    }

    #[test]
    fn evaluation_is_reproducible_and_formats() {
        let p = ModelParams::init(tiny_shape(), &mut stream(6, &[])).unwrap();
        let mut rng = stream(6, &[1]);
        let test: Vec<_> = (0..20).map(|i| random_instance(&mut rng, Domain::BOTH[i % 2], &p.shape, i)).collect();
        let settings = EvalSettings { cutoffs: vec![1, 3], candidates: CandidateMode::Sampled(3), mode: FilterMode::Off, seed: 9 };
        let a = evaluate(&p, None, &test, &settings).unwrap();
        assert_eq!(a, evaluate(&p, None, &test, &settings).unwrap());
        assert_eq!(a.len(), 2);
        let csv = results_csv(&a);
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.starts_with("domain,cutoff,hr,ndcg,instances\nA,1,"));
        assert_eq!(results_table(&a).lines().count(), 5);
    }

    proptest! {
        #[test]
        fn rank_matches_brute_force(scores in prop::collection::vec(-3i32..3, 1..30), t in 0usize..30) {
            let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
            let t = t % scores.len();
            prop_assert_eq!(rank_from_scores(&scores, t), brute_rank(&scores, t));
        }

        #[test]
        fn monotone_transform_keeps_rank(scores in prop::collection::vec(-5.0f64..5.0, 1..30), t in 0usize..30) {
            let t = t % scores.len();
            let moved: Vec<f64> = scores.iter().map(|s| 3.0 * s.tanh() + 1.0).collect();
            prop_assert_eq!(rank_from_scores(&scores, t), rank_from_scores(&moved, t));
        }

        #[test]
        fn ndcg_bounded_by_hr(ranks in prop::collection::vec(1usize..50, 1..40), n in 1usize..20) {
            let h = hit_ratio(&ranks, n).unwrap();
            let g = ndcg(&ranks, n).unwrap();
            prop_assert!(g <= h && (0.0..=1.0).contains(&g));
            prop_assert!(hit_ratio(&ranks, n + 1).unwrap() >= h);
            prop_assert!(ndcg(&ranks, n + 1).unwrap() >= g);
        }
    }
}
