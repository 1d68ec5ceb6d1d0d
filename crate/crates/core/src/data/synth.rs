//! Synthetic shared-account corpora.
//!
//! Each account merges several synthetic users. A user prefers a few topics
//! per domain; domain-B topics copy the user's domain-A topics with
//! probability `rho`. Events arrive in sessions of one active user, and a
//! `noise` fraction of events is drawn from items outside the user's topics.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::{AccountSequence, Catalog, Domain, Event, ItemId};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub accounts: usize,
    pub users_min: usize,
    pub users_max: usize,
    pub items_a: usize,
    pub items_b: usize,
    pub topics: usize,
    pub topics_per_user: usize,
    pub seq_len_min: usize,
    pub seq_len_max: usize,
    pub session_min: usize,
    pub session_max: usize,
    /// Probability that an event falls in domain A.
    pub domain_a_prob: f64,
    pub rho: f64,
    pub noise: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            accounts: 1000,
            users_min: 2,
            users_max: 4,
            items_a: 200,
            items_b: 200,
            topics: 10,
            topics_per_user: 1,
            seq_len_min: 20,
            seq_len_max: 40,
            session_min: 4,
            session_max: 10,
            domain_a_prob: 0.5,
            rho: 0.9,
            noise: 0.2,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.users_min == 0 || self.users_min > self.users_max {
            return bad(format!(
                "users per account range [{}, {}] is invalid",
                self.users_min, self.users_max
            ));
        }
        if self.seq_len_min == 0 || self.seq_len_min > self.seq_len_max {
            return bad(format!(
                "sequence length range [{}, {}] is invalid",
                self.seq_len_min, self.seq_len_max
            ));
        }
        if self.session_min == 0 || self.session_min > self.session_max {
            return bad(format!(
                "session length range [{}, {}] is invalid",
                self.session_min, self.session_max
            ));
        }
        if self.topics == 0 || self.topics_per_user == 0 || self.topics_per_user > self.topics {
            return bad(format!(
                "need 1 <= topics_per_user ({}) <= topics ({})",
                self.topics_per_user, self.topics
            ));
        }
        if self.items_a < self.topics || self.items_b < self.topics {
            return bad("each domain needs at least one item per topic".into());
        }
        for (name, v) in [("rho", self.rho), ("noise", self.noise), ("domain_a_prob", self.domain_a_prob)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.noise > 0.0 && self.topics_per_user == self.topics {
            return bad("noise needs at least one topic outside each user's set".into());
        }
        Ok(())
    }

    pub fn items(&self, domain: Domain) -> usize {
        match domain {
            Domain::A => self.items_a,
            Domain::B => self.items_b,
        }
    }
}

/// Topic of a 1-based item id; topics partition the catalog into contiguous blocks.
pub fn item_topic(item: ItemId, n_items: usize, topics: usize) -> usize {
    (item as usize - 1) * topics / n_items
}

fn topic_items(topic: usize, n_items: usize, topics: usize) -> std::ops::Range<ItemId> {
    // inverse of item_topic: smallest i with (i-1)*topics/n >= topic
    let first = (topic * n_items).div_ceil(topics) + 1;
    let end = ((topic + 1) * n_items).div_ceil(topics) + 1;
    first as ItemId..end as ItemId
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EventTruth {
    /// Global id of the synthetic user behind the event.
    pub user: usize,
    /// Drawn outside the user's topics.
    pub noise: bool,
}

/// Diagnostics retained by the generator; never shown to the model.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub events: Vec<Vec<EventTruth>>,
    /// Per user, topic sets for domains A and B.
    pub user_topics: Vec<[Vec<usize>; 2]>,
    pub users_per_account: Vec<usize>,
    pub topics: usize,
    /// Configured catalog sizes (the topic partition is defined over these).
    pub configured: Catalog,
}

impl GroundTruth {
    pub fn topic_of(&self, domain: Domain, item: ItemId) -> usize {
        item_topic(item, self.configured.size(domain), self.topics)
    }

    /// True when the event is generator noise or comes from a different user
    /// than the reference event.
    pub fn irrelevant_to(&self, account: usize, event: usize, reference: usize) -> bool {
        let ev = self.events[account][event];
        ev.noise || ev.user != self.events[account][reference].user
    }
}

pub fn generate_synthetic_corpus<R: Rng + ?Sized>(
    rng: &mut R,
    cfg: &GeneratorConfig,
) -> Result<(Catalog, Vec<AccountSequence>, GroundTruth)> {
    cfg.validate()?;
    let mut seqs = Vec::with_capacity(cfg.accounts);
    let mut truth = GroundTruth {
        events: Vec::with_capacity(cfg.accounts),
        user_topics: Vec::new(),
        users_per_account: Vec::with_capacity(cfg.accounts),
        topics: cfg.topics,
        configured: Catalog {
            items_a: cfg.items_a,
            items_b: cfg.items_b,
        },
    };
    let all_topics: Vec<usize> = (0..cfg.topics).collect();

    for a in 0..cfg.accounts {
        let n_users = rng.gen_range(cfg.users_min..=cfg.users_max);
        let first_user = truth.user_topics.len();
        for _ in 0..n_users {
            let topics_a: Vec<usize> = all_topics
                .choose_multiple(rng, cfg.topics_per_user)
                .copied()
                .collect();
            let mut topics_b = Vec::with_capacity(cfg.topics_per_user);
            for &t in &topics_a {
                let tb = if rng.gen_bool(cfg.rho) {
                    t
                } else {
                    rng.gen_range(0..cfg.topics)
                };
                if !topics_b.contains(&tb) {
                    topics_b.push(tb);
                }
            }
            truth.user_topics.push([topics_a, topics_b]);
        }
        truth.users_per_account.push(n_users);

        let len = rng.gen_range(cfg.seq_len_min..=cfg.seq_len_max);
        let mut events = Vec::with_capacity(len);
        let mut labels = Vec::with_capacity(len);
        while events.len() < len {
            let user = first_user + rng.gen_range(0..n_users);
            let session = rng.gen_range(cfg.session_min..=cfg.session_max);
            for _ in 0..session.min(len - events.len()) {
                let domain = if rng.gen_bool(cfg.domain_a_prob) {
                    Domain::A
                } else {
                    Domain::B
                };
                let n_items = cfg.items(domain);
                let own = &truth.user_topics[user][domain.index()];
                let noise = cfg.noise > 0.0 && rng.gen_bool(cfg.noise);
                let item = if noise {
                    // uniform over items outside the user's topics
                    loop {
                        let c = rng.gen_range(1..=n_items) as ItemId;
                        if !own.contains(&item_topic(c, n_items, cfg.topics)) {
                            break c;
                        }
                    }
                } else {
                    let t = own[rng.gen_range(0..own.len())];
                    let r = topic_items(t, n_items, cfg.topics);
                    rng.gen_range(r)
                };
                events.push(Event { domain, item });
                labels.push(EventTruth { user, noise });
            }
        }
        seqs.push(AccountSequence {
            account_id: format!("acc{a}"),
            events,
        });
        truth.events.push(labels);
    }
    let catalog = Catalog::from_sequences(&seqs);
    Ok((catalog, seqs, truth))
}

/// One line per account, aligned with the corpus: `<account_id>\t<user>:<noise>...`.
pub fn save_truth(path: impl AsRef<Path>, seqs: &[AccountSequence], truth: &GroundTruth) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for (s, labels) in seqs.iter().zip(&truth.events) {
        out.push_str(&s.account_id);
        out.push('\t');
        for (i, l) in labels.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{}:{}", l.user, u8::from(l.noise));
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
