use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::{AccountSequence, Catalog, Domain, Event, ItemId};
use crate::error::{Error, Result};

/// Read a corpus file: one account per line,
/// `<account_id>\t<domain>:<item_id>( <domain>:<item_id>)*`.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<(Catalog, Vec<AccountSequence>)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text)
}

pub fn parse_corpus(text: &str) -> Result<(Catalog, Vec<AccountSequence>)> {
    let mut seqs = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        if raw.is_empty() {
            continue;
        }
        seqs.push(parse_line(raw, line_no)?);
    }
    let catalog = Catalog::from_sequences(&seqs);
    Ok((catalog, seqs))
}

fn parse_line(line: &str, line_no: usize) -> Result<AccountSequence> {
    let err = |msg: String| Error::Parse { line: line_no, msg };
    let (id, rest) = line
        .split_once('\t')
        .ok_or_else(|| err("missing tab after account id".into()))?;
    if id.is_empty() {
        return Err(err("empty account id".into()));
    }
    let mut events = Vec::new();
    for tok in rest.split(' ') {
        let (dom, item) = tok
            .split_once(':')
            .ok_or_else(|| err(format!("malformed event '{tok}'")))?;
        let domain = Domain::parse(dom).ok_or_else(|| err(format!("unknown domain '{dom}'")))?;
        let item: ItemId = item
            .parse()
            .map_err(|_| err(format!("invalid item id '{item}'")))?;
        if item == 0 {
            return Err(err("item ids must be positive".into()));
        }
        events.push(Event { domain, item });
    }
    Ok(AccountSequence {
        account_id: id.to_string(),
        events,
    })
}

pub fn format_corpus(seqs: &[AccountSequence]) -> String {
    let mut out = String::new();
    for s in seqs {
        out.push_str(&s.account_id);
        out.push('\t');
        for (i, e) in s.events.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{}:{}", e.domain, e.item);
        }
        out.push('\n');
    }
    out
}

pub fn save_corpus(path: impl AsRef<Path>, seqs: &[AccountSequence]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_corpus(seqs)).map_err(|e| Error::io(path, e))
}
