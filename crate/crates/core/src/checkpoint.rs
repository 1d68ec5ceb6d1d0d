//! Versioned text checkpoints. Every `f64` is stored as the hex of its bit
//! pattern, so a save/load round trip is bitwise exact.
//!
//! ```text
//! rlisn-checkpoint 1
//! meta <key> <value>
//! config <key> = <value>
//! tensor <name> <rows> <cols>
//! <hex> <hex> ...
//! optim <set> <index> <kind> <lr> <eps> <step>
//! end
//! ```

use std::fmt::Write as _;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, OptimizerKind, OptimizerSet, OptimizerState};

pub const MAGIC: &str = "rlisn-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub config: RunConfig,
    pub tensors: Vec<(String, Matrix)>,
    /// `(set, index, state)`; the state's moments live in `tensors`.
    optim: Vec<(String, usize, OptimizerKind, f64, f64, u64)>,
    optim_sizes: Vec<(String, usize)>,
}

fn hex(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

fn unhex(s: &str, line: usize) -> Result<f64> {
    u64::from_str_radix(s, 16)
        .map(f64::from_bits)
        .map_err(|_| Error::Parse {
            line,
            msg: format!("bad hex value '{s}'"),
        })
}

impl Checkpoint {
    pub fn new(config: RunConfig) -> Self {
        Checkpoint {
            meta: Vec::new(),
            config,
            tensors: Vec::new(),
            optim: Vec::new(),
            optim_sizes: Vec::new(),
        }
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.meta.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.meta.push((key.to_string(), value)),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn meta_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.meta(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Checkpoint(format!("missing or invalid meta '{key}'")))
    }

    pub fn put_tensors(&mut self, prefix: &str, named: Vec<(String, Matrix)>) {
        for (n, m) in named {
            self.tensors.push((format!("{prefix}/{n}"), m));
        }
    }

    /// Tensors under `prefix/`, with the prefix stripped, in file order.
    pub fn tensors_under(&self, prefix: &str) -> Vec<(String, Matrix)> {
        let p = format!("{prefix}/");
        self.tensors
            .iter()
            .filter_map(|(n, m)| n.strip_prefix(&p).map(|s| (s.to_string(), m.clone())))
            .collect()
    }

    pub fn tensor(&self, name: &str) -> Option<&Matrix> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn put_optimizer(&mut self, set: &str, opt: &OptimizerSet) {
        self.optim_sizes.push((set.to_string(), opt.states.len()));
        for (i, s) in opt.states.iter().enumerate() {
            if let Some(s) = s {
                self.optim.push((set.to_string(), i, s.kind, s.lr, s.eps, s.step));
                self.tensors.push((format!("{set}#{i}/first"), s.first.clone()));
                self.tensors.push((format!("{set}#{i}/second"), s.second.clone()));
            }
        }
    }

    pub fn optimizer(&self, set: &str) -> Result<OptimizerSet> {
        let n = self
            .optim_sizes
            .iter()
            .find(|(s, _)| s == set)
            .map(|&(_, n)| n)
            .ok_or_else(|| Error::Checkpoint(format!("no optimizer set '{set}'")))?;
        let mut states = vec![None; n];
        for (s, i, kind, lr, eps, step) in &self.optim {
            if s != set {
                continue;
            }
            let slot = states
                .get_mut(*i)
                .ok_or_else(|| Error::Checkpoint(format!("optimizer {set} index {i} out of range")))?;
            let get = |part: &str| {
                self.tensor(&format!("{set}#{i}/{part}"))
                    .cloned()
                    .ok_or_else(|| Error::Checkpoint(format!("optimizer {set}#{i} lacks {part}")))
            };
            *slot = Some(OptimizerState {
                kind: *kind,
                lr: *lr,
                eps: *eps,
                step: *step,
                first: get("first")?,
                second: get("second")?,
            });
        }
        Ok(OptimizerSet { states })
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{MAGIC} {VERSION}\n");
        for (k, v) in &self.meta {
            let _ = writeln!(out, "meta {k} {v}");
        }
        for line in self.config.to_text().lines() {
            let _ = writeln!(out, "config {line}");
        }
        for (set, n) in &self.optim_sizes {
            let _ = writeln!(out, "optimset {set} {n}");
        }
        for (set, i, kind, lr, eps, step) in &self.optim {
            let _ = writeln!(out, "optim {set} {i} {} {} {} {step}", kind.name(), hex(*lr), hex(*eps));
        }
        for (name, m) in &self.tensors {
            let _ = writeln!(out, "tensor {name} {} {}", m.rows(), m.cols());
            let vals: Vec<String> = m.as_slice().iter().map(|&v| hex(v)).collect();
            out.push_str(&vals.join(" "));
            out.push('\n');
        }
        out.push_str("end\n");
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::Checkpoint("empty checkpoint".into()))?;
        let version = header
            .strip_prefix(MAGIC)
            .map(str::trim)
            .ok_or_else(|| Error::Checkpoint("not a checkpoint file".into()))?;
        if version != VERSION.to_string() {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        let mut meta = Vec::new();
        let mut config_text = String::new();
        let mut tensors = Vec::new();
        let mut optim = Vec::new();
        let mut optim_sizes = Vec::new();
        let mut ended = false;
        while let Some((ln, line)) = lines.next() {
            let bad = |msg: &str| Error::Parse {
                line: ln,
                msg: format!("checkpoint: {msg}"),
            };
            let (kind, rest) = line.split_once(' ').unwrap_or((line, ""));
            match kind {
                "meta" => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    meta.push((k.to_string(), v.to_string()));
                }
                "config" => {
                    config_text.push_str(rest);
                    config_text.push('\n');
                }
                "optimset" => {
                    let mut it = rest.split_whitespace();
                    let (Some(set), Some(n), None) = (it.next(), it.next(), it.next()) else {
                        return Err(bad("malformed optimset line"));
                    };
                    let n = n.parse().map_err(|_| bad("bad optimset size"))?;
                    optim_sizes.push((set.to_string(), n));
                }
                "optim" => {
                    let f: Vec<&str> = rest.split_whitespace().collect();
                    if f.len() != 6 {
                        return Err(bad("malformed optim line"));
                    }
                    let kind = OptimizerKind::parse(f[2]).ok_or_else(|| bad("unknown optimizer"))?;
                    optim.push((
                        f[0].to_string(),
                        f[1].parse().map_err(|_| bad("bad optimizer index"))?,
                        kind,
                        unhex(f[3], ln)?,
                        unhex(f[4], ln)?,
                        f[5].parse().map_err(|_| bad("bad optimizer step"))?,
                    ));
                }
                "tensor" => {
                    let f: Vec<&str> = rest.split_whitespace().collect();
                    if f.len() != 3 {
                        return Err(bad("malformed tensor header"));
                    }
                    let rows: usize = f[1].parse().map_err(|_| bad("bad row count"))?;
                    let cols: usize = f[2].parse().map_err(|_| bad("bad column count"))?;
                    let (vl, values) = lines.next().ok_or_else(|| bad("truncated tensor"))?;
                    let data = values
                        .split_whitespace()
                        .map(|v| unhex(v, vl))
                        .collect::<Result<Vec<f64>>>()?;
                    let m = Matrix::from_vec(rows, cols, data).map_err(|_| Error::Parse {
                        line: vl,
                        msg: format!("checkpoint: tensor {} has the wrong number of values", f[0]),
                    })?;
                    tensors.push((f[0].to_string(), m));
                }
                "end" => {
                    ended = true;
                    break;
                }
                _ => return Err(bad(&format!("unknown record '{kind}'"))),
            }
        }
        if !ended {
            return Err(Error::Checkpoint("truncated checkpoint (no end marker)".into()));
        }
        let config = RunConfig::parse(&config_text)?;
        Ok(Checkpoint {
            meta,
            config,
            tensors,
            optim,
            optim_sizes,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn sample() -> Checkpoint {
        let mut rng = stream(1, &[]);
        let mut ck = Checkpoint::new(RunConfig::default());
        ck.set_meta("phase", "joint");
        ck.set_meta("epoch", 3);
        let a = Matrix::xavier(3, 2, &mut rng);
        let mut b = Matrix::from_vec(1, 3, vec![-0.0, f64::MIN_POSITIVE, 1e300]).unwrap();
        b.as_mut_slice()[0] = -0.0;
        ck.put_tensors("model", vec![("a".into(), a.clone()), ("b".into(), b)]);
        ck.put_tensors("empty", vec![("z".into(), Matrix::zeros(0, 4))]);
        let mut opt = OptimizerSet::new(OptimizerKind::Adam, 0.01, &[&a, &a], &[true, false]);
        opt.step(vec![&mut a.clone(), &mut a.clone()], vec![&a, &a]).unwrap();
        ck.put_optimizer("opt", &opt);
        ck
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ck = sample();
        let back = Checkpoint::parse(&ck.to_text()).unwrap();
        assert_eq!(back.to_text(), ck.to_text());
        for ((n1, m1), (n2, m2)) in ck.tensors.iter().zip(&back.tensors) {
            assert_eq!(n1, n2);
            let b1: Vec<u64> = m1.as_slice().iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u64> = m2.as_slice().iter().map(|v| v.to_bits()).collect();
            assert_eq!(b1, b2);
        }
        assert_eq!(back.optimizer("opt").unwrap(), ck.optimizer("opt").unwrap());
        assert_eq!(back.meta_parsed::<usize>("epoch").unwrap(), 3);
        assert_eq!(back.tensors_under("model").len(), 2);
    }

    #[test]
    fn save_and_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        let ck = sample();
        ck.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), ck);
        assert!(matches!(Checkpoint::load(dir.path().join("nope")), Err(Error::Io { .. })));
    }

    #[test]
    fn rejects_bad_files() {
        let text = sample().to_text();
        let wrong = text.replacen("rlisn-checkpoint 1", "rlisn-checkpoint 2", 1);
        assert!(matches!(Checkpoint::parse(&wrong), Err(Error::Checkpoint(_))));
        assert!(Checkpoint::parse("hello").is_err());
        let cut = &text[..text.len() / 2];
        assert!(Checkpoint::parse(cut).is_err());
        let corrupt = text.replacen("tensor model/a 3 2", "tensor model/a 3 3", 1);
        assert!(matches!(Checkpoint::parse(&corrupt), Err(Error::Parse { .. })));
        assert!(sample().optimizer("missing").is_err());
    }
}
