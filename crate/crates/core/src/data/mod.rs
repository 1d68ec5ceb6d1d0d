//! Corpus model, sequence preparation and synthetic shared-account data.

mod corpus;
mod sampling;
mod split;
mod synth;

pub use corpus::{format_corpus, load_corpus, parse_corpus, save_corpus};
pub use sampling::sample_negatives;
pub use split::{
    build_instances, pad_left, split_targets, truncate_recent, AccountSplit, DomainSplit, Prepared,
    SeqItem, TrainingInstance,
};
pub use synth::{
    generate_synthetic_corpus, item_topic, save_truth, EventTruth, GeneratorConfig, GroundTruth,
};

use std::fmt;

pub type ItemId = u32;

/// Reserved padding index; it embeds to a frozen zero row.
pub const PAD: ItemId = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Domain {
    A,
    B,
}

impl Domain {
    pub const BOTH: [Domain; 2] = [Domain::A, Domain::B];

    pub fn other(self) -> Domain {
        match self {
            Domain::A => Domain::B,
            Domain::B => Domain::A,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Domain::A => 0,
            Domain::B => 1,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Domain::A => "A",
            Domain::B => "B",
        }
    }

    pub fn parse(s: &str) -> Option<Domain> {
        match s {
            "A" => Some(Domain::A),
            "B" => Some(Domain::B),
            _ => None,
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Event {
    pub domain: Domain,
    pub item: ItemId,
}

impl Event {
    pub fn new(domain: Domain, item: ItemId) -> Self {
        Event { domain, item }
    }
}

/// One account's chronologically mixed two-domain history.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AccountSequence {
    pub account_id: String,
    pub events: Vec<Event>,
}

impl AccountSequence {
    pub fn items_in(&self, domain: Domain) -> impl Iterator<Item = ItemId> + '_ {
        self.events
            .iter()
            .filter(move |e| e.domain == domain)
            .map(|e| e.item)
    }
}

/// Item counts per domain. Real items are `1..=size`; `0` is padding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Catalog {
    pub items_a: usize,
    pub items_b: usize,
}

impl Catalog {
    pub fn size(&self, domain: Domain) -> usize {
        match domain {
            Domain::A => self.items_a,
            Domain::B => self.items_b,
        }
    }

    pub fn from_sequences(seqs: &[AccountSequence]) -> Catalog {
        let mut cat = Catalog::default();
        for e in seqs.iter().flat_map(|s| &s.events) {
            let slot = match e.domain {
                Domain::A => &mut cat.items_a,
                Domain::B => &mut cat.items_b,
            };
            *slot = (*slot).max(e.item as usize);
        }
        cat
    }
}
