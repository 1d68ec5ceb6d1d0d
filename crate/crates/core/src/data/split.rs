use crate::data::{AccountSequence, Catalog, Domain, ItemId, PAD};
use crate::data::sample_negatives;
use crate::error::Result;

use rand::Rng;

/// An item placed in an instance's input, with its position in the mixed
/// sequence counted backwards from the target event (0 = immediately before).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeqItem {
    pub item: ItemId,
    pub pos: u32,
    /// Index of the originating event in the account sequence.
    pub event: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DomainSplit {
    pub domain: Domain,
    pub train_history: Vec<SeqItem>,
    pub train_target: SeqItem,
    pub test_history: Vec<SeqItem>,
    pub test_target: SeqItem,
    /// Other-domain events before the training target, minus the other
    /// domain's held-out test event.
    pub train_transferred: Vec<SeqItem>,
    /// Other-domain events before the test target.
    pub test_transferred: Vec<SeqItem>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AccountSplit {
    pub a: Option<DomainSplit>,
    pub b: Option<DomainSplit>,
}

impl AccountSplit {
    pub fn get(&self, domain: Domain) -> Option<&DomainSplit> {
        match domain {
            Domain::A => self.a.as_ref(),
            Domain::B => self.b.as_ref(),
        }
    }
}

fn domain_events(seq: &AccountSequence, domain: Domain) -> Vec<usize> {
    seq.events
        .iter()
        .enumerate()
        .filter(|(_, e)| e.domain == domain)
        .map(|(i, _)| i)
        .collect()
}

fn relative(seq: &AccountSequence, events: impl Iterator<Item = usize>, target_event: usize) -> Vec<SeqItem> {
    events
        .map(|ev| SeqItem {
            item: seq.events[ev].item,
            pos: (target_event - ev - 1) as u32,
            event: ev,
        })
        .collect()
}

/// Leave-last-two-out split for both domains of one account.
///
/// A domain with fewer than three items is skipped (`None`).
pub fn split_targets(seq: &AccountSequence) -> AccountSplit {
    let idx = [domain_events(seq, Domain::A), domain_events(seq, Domain::B)];
    let held_out_test = |d: Domain| -> Option<usize> {
        let ev = &idx[d.index()];
        (ev.len() >= 3).then(|| *ev.last().unwrap())
    };
    let mut out = AccountSplit::default();
    for domain in Domain::BOTH {
        let own = &idx[domain.index()];
        if own.len() < 3 {
            continue;
        }
        let n = own.len();
        let train_ev = own[n - 2];
        let test_ev = own[n - 1];
        let other = &idx[domain.other().index()];
        let other_test = held_out_test(domain.other());
        let split = DomainSplit {
            domain,
            train_history: relative(seq, own[..n - 2].iter().copied(), train_ev),
            train_target: SeqItem {
                item: seq.events[train_ev].item,
                pos: 0,
                event: train_ev,
            },
            test_history: relative(seq, own[..n - 1].iter().copied(), test_ev),
            test_target: SeqItem {
                item: seq.events[test_ev].item,
                pos: 0,
                event: test_ev,
            },
            train_transferred: relative(
                seq,
                other
                    .iter()
                    .copied()
                    .filter(|&e| e < train_ev && Some(e) != other_test),
                train_ev,
            ),
            test_transferred: relative(seq, other.iter().copied().filter(|&e| e < test_ev), test_ev),
        };
        match domain {
            Domain::A => out.a = Some(split),
            Domain::B => out.b = Some(split),
        }
    }
    out
}

/// Left-pad with [`PAD`] to `target_len`; longer inputs keep their most
/// recent `target_len` items.
pub fn pad_left(history: &[ItemId], target_len: usize) -> Vec<ItemId> {
    if history.len() >= target_len {
        return history[history.len() - target_len..].to_vec();
    }
    let mut out = vec![PAD; target_len - history.len()];
    out.extend_from_slice(history);
    out
}

pub fn truncate_recent<T: Clone>(items: &[T], max_len: usize) -> Vec<T> {
    let start = items.len().saturating_sub(max_len);
    items[start..].to_vec()
}

/// One positive (history, transferred, target) with its sampled negatives.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingInstance {
    pub account: usize,
    pub domain: Domain,
    pub history: Vec<SeqItem>,
    pub transferred: Vec<SeqItem>,
    pub target: ItemId,
    pub target_event: usize,
    pub negatives: Vec<ItemId>,
    /// Every item this account touched in `domain`, sorted and deduplicated.
    pub observed: Vec<ItemId>,
}

impl TrainingInstance {
    /// `(item, label)` pairs: the target first, then each negative.
    pub fn candidates(&self) -> impl Iterator<Item = (ItemId, f64)> + '_ {
        std::iter::once((self.target, 1.0)).chain(self.negatives.iter().map(|&n| (n, 0.0)))
    }

    pub fn resample_negatives<R: Rng + ?Sized>(
        &mut self,
        rng: &mut R,
        catalog: &Catalog,
        n: usize,
    ) -> Result<()> {
        self.negatives = sample_negatives(rng, catalog.size(self.domain), &self.observed, n)?;
        Ok(())
    }
}

/// Train/test instances for a corpus.
#[derive(Clone, Debug, Default)]
pub struct Prepared {
    pub train: Vec<TrainingInstance>,
    pub test: Vec<TrainingInstance>,
    /// Accounts skipped per domain for having fewer than three items.
    pub skipped: [usize; 2],
}

impl Prepared {
    pub fn train_in(&self, domain: Domain) -> impl Iterator<Item = &TrainingInstance> {
        self.train.iter().filter(move |i| i.domain == domain)
    }

    pub fn test_in(&self, domain: Domain) -> impl Iterator<Item = &TrainingInstance> {
        self.test.iter().filter(move |i| i.domain == domain)
    }
}

/// Split every account and build instances, truncating own and transferred
/// inputs to the `max_seq_len` most recent items.
pub fn build_instances(seqs: &[AccountSequence], max_seq_len: usize) -> Prepared {
    let mut out = Prepared::default();
    for (account, seq) in seqs.iter().enumerate() {
        let split = split_targets(seq);
        for domain in Domain::BOTH {
            let Some(s) = split.get(domain) else {
                out.skipped[domain.index()] += 1;
                continue;
            };
            let mut observed: Vec<ItemId> = seq.items_in(domain).collect();
            observed.sort_unstable();
            observed.dedup();
            out.train.push(TrainingInstance {
                account,
                domain,
                history: truncate_recent(&s.train_history, max_seq_len),
                transferred: truncate_recent(&s.train_transferred, max_seq_len),
                target: s.train_target.item,
                target_event: s.train_target.event,
                negatives: Vec::new(),
                observed: observed.clone(),
            });
            out.test.push(TrainingInstance {
                account,
                domain,
                history: truncate_recent(&s.test_history, max_seq_len),
                transferred: truncate_recent(&s.test_transferred, max_seq_len),
                target: s.test_target.item,
                target_event: s.test_target.event,
                negatives: Vec::new(),
                observed,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{parse_corpus, Event};
    use proptest::prelude::*;

    fn seq(spec: &str) -> AccountSequence {
        parse_corpus(&format!("acc\t{spec}")).unwrap().1.remove(0)
    }

    fn items(v: &[SeqItem]) -> Vec<ItemId> {
        v.iter().map(|s| s.item).collect()
    }

    #[test]
    fn leave_last_two_out() {
        let s = split_targets(&seq("A:1 A:2 A:3 A:4"));
        let a = s.a.unwrap();
        assert_eq!(items(&a.train_history), vec![1, 2]);
        assert_eq!(a.train_target.item, 3);
        assert_eq!(items(&a.test_history), vec![1, 2, 3]);
        assert_eq!(a.test_target.item, 4);
        assert!(s.b.is_none());
    }

    #[test]
    fn short_domain_is_skipped() {
        let s = split_targets(&seq("A:1 A:2 B:1 B:2 B:3"));
        assert!(s.a.is_none());
        assert!(s.b.is_some());
    }

    #[test]
    fn mixed_sequence_transfers_other_domain() {
        let s = split_targets(&seq("A:1 B:9 A:2 A:3 A:4"));
        let a = s.a.unwrap();
        assert_eq!(items(&a.train_history), vec![1, 2]);
        assert_eq!(a.train_target.item, 3);
        assert_eq!(items(&a.test_history), vec![1, 2, 3]);
        assert_eq!(items(&a.train_transferred), vec![9]);
        assert_eq!(items(&a.test_transferred), vec![9]);
        // B:9 sits two events before A:3 (event 3), one between
        assert_eq!(a.train_transferred[0].pos, 1);
        assert_eq!(a.test_transferred[0].pos, 2);
    }

    #[test]
    fn padding_examples() {
        assert_eq!(pad_left(&[5, 7], 4), vec![0, 0, 5, 7]);
        assert_eq!(pad_left(&[5, 7], 2), vec![5, 7]);
        assert_eq!(pad_left(&[1, 2, 3], 2), vec![2, 3]);
    }

    fn arb_seq() -> impl Strategy<Value = AccountSequence> {
        prop::collection::vec((any::<bool>(), 1u32..30), 1..40).prop_map(|ev| AccountSequence {
            account_id: "x".into(),
            events: ev
                .into_iter()
                .map(|(a, item)| Event::new(if a { Domain::A } else { Domain::B }, item))
                .collect(),
        })
    }

    proptest! {
        #[test]
        fn pad_left_length_and_suffix(h in prop::collection::vec(1u32..100, 0..20), len in 0usize..25) {
            let p = pad_left(&h, len);
            prop_assert_eq!(p.len(), len);
            let keep = h.len().min(len);
            prop_assert_eq!(&p[len - keep..], &h[h.len() - keep..]);
            prop_assert!(p[..len - keep].iter().all(|&x| x == PAD));
        }

        #[test]
        fn test_targets_never_leak_into_training(s in arb_seq()) {
            let split = split_targets(&s);
            let test_events: Vec<usize> = [&split.a, &split.b]
                .iter()
                .filter_map(|d| d.as_ref().map(|d| d.test_target.event))
                .collect();
            for d in [&split.a, &split.b].into_iter().flatten() {
                for it in d.train_history.iter().chain(&d.train_transferred) {
                    prop_assert!(!test_events.contains(&it.event));
                    prop_assert!(it.event < d.train_target.event);
                }
                prop_assert!(!test_events.contains(&d.train_target.event));
            }
            let prepared = build_instances(std::slice::from_ref(&s), 50);
            for (tr, te) in prepared.train.iter().zip(&prepared.test) {
                prop_assert!(tr.observed.contains(&te.target));
            }
        }
    }
}
