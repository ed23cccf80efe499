//! Plain-text policy files: a `key value` header followed by one parameter
//! per line. Floats use Rust's shortest round-trip formatting, so a write
//! followed by a read reproduces the parameters bit for bit.
//!
//! ```text
//! valuelab-policy 1
//! kind tabular
//! vocab_size 4
//! eos none
//! pad none
//! seed 0
//! taken_at 0          (reference snapshots only)
//! contexts 2          (tabular)  |  horizon 3 / hidden 8  (tiny_net)
//! c 0
//! c 0 1
//! default 0.0 0.0 0.0 0.0
//! params 8
//! 0.5
//! ...
//! ```

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use super::{LogitPolicy, NetShape, Parameterization, TabularIndex};
use crate::error::{Error, Result};
use crate::mdp::{TokenId, TokenSpace};

const MAGIC: &str = "valuelab-policy 1";

pub fn write_policy_file(path: &Path, policy: &LogitPolicy, taken_at: Option<u64>) -> Result<()> {
    std::fs::write(path, encode(policy, taken_at))?;
    Ok(())
}

pub fn read_policy_file(path: &Path) -> Result<(LogitPolicy, Option<u64>)> {
    decode(&std::fs::read_to_string(path)?)
}

fn opt_token(t: Option<TokenId>) -> String {
    t.map_or_else(|| "none".to_string(), |t| t.to_string())
}

pub fn encode(policy: &LogitPolicy, taken_at: Option<u64>) -> String {
    let mut out = String::new();
    let space = policy.space();
    let kind = match policy.parameterization() {
        Parameterization::Tabular(_) => "tabular",
        Parameterization::TinyNet(_) => "tiny_net",
    };
    writeln!(out, "{MAGIC}").unwrap();
    writeln!(out, "kind {kind}").unwrap();
    writeln!(out, "vocab_size {}", space.vocab_size).unwrap();
    writeln!(out, "eos {}", opt_token(space.eos)).unwrap();
    writeln!(out, "pad {}", opt_token(space.pad)).unwrap();
    writeln!(out, "seed {}", policy.seed()).unwrap();
    if let Some(t) = taken_at {
        writeln!(out, "taken_at {t}").unwrap();
    }
    match policy.parameterization() {
        Parameterization::Tabular(index) => {
            writeln!(out, "contexts {}", index.len()).unwrap();
            for c in index.contexts() {
                let toks: Vec<String> = c.iter().map(|t| t.to_string()).collect();
                writeln!(out, "c {}", toks.join(" ")).unwrap();
            }
            let d: Vec<String> = index.default_logits().iter().map(|v| format!("{v:?}")).collect();
            writeln!(out, "default {}", d.join(" ")).unwrap();
        }
        Parameterization::TinyNet(shape) => {
            writeln!(out, "horizon {}", shape.horizon).unwrap();
            writeln!(out, "hidden {}", shape.hidden).unwrap();
        }
    }
    writeln!(out, "params {}", policy.num_params()).unwrap();
    for p in policy.params() {
        writeln!(out, "{p:?}").unwrap();
    }
    out
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn next_line(&mut self) -> Result<(usize, &'a str)> {
        self.inner
            .next()
            .map(|(i, l)| (i + 1, l.trim()))
            .ok_or_else(|| Error::Format("unexpected end of file".into()))
    }

    fn field(&mut self, key: &str) -> Result<(usize, &'a str)> {
        let (n, line) = self.next_line()?;
        match line.split_once(' ') {
            Some((k, v)) if k == key => Ok((n, v.trim())),
            _ => Err(Error::Format(format!("line {n}: expected `{key} <value>`"))),
        }
    }

    fn parsed<T: FromStr>(&mut self, key: &str) -> Result<T> {
        let (n, v) = self.field(key)?;
        v.parse()
            .map_err(|_| Error::Format(format!("line {n}: bad value for `{key}`")))
    }

    fn token(&mut self, key: &str) -> Result<Option<TokenId>> {
        let (n, v) = self.field(key)?;
        if v == "none" {
            return Ok(None);
        }
        v.parse()
            .map(Some)
            .map_err(|_| Error::Format(format!("line {n}: bad token for `{key}`")))
    }
}

fn parse_list<T: FromStr>(n: usize, s: &str) -> Result<Vec<T>> {
    s.split_whitespace()
        .map(|x| {
            x.parse()
                .map_err(|_| Error::Format(format!("line {n}: bad number `{x}`")))
        })
        .collect()
}

pub fn decode(text: &str) -> Result<(LogitPolicy, Option<u64>)> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
    };
    let (_, magic) = lines.next_line()?;
    if magic != MAGIC {
        return Err(Error::Format(format!("missing `{MAGIC}` header")));
    }
    let (_, kind) = lines.field("kind")?;
    let kind = kind.to_string();
    let vocab_size: usize = lines.parsed("vocab_size")?;
    let space = TokenSpace {
        vocab_size,
        eos: lines.token("eos")?,
        pad: lines.token("pad")?,
    };
    space.validate()?;
    let seed: u64 = lines.parsed("seed")?;

    let (n, line) = lines.next_line()?;
    let (mut key, mut value) = line
        .split_once(' ')
        .ok_or_else(|| Error::Format(format!("line {n}: expected a header field")))?;
    let mut taken_at = None;
    if key == "taken_at" {
        taken_at = Some(
            value
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("line {n}: bad taken_at")))?,
        );
        let (_, next) = lines.next_line()?;
        (key, value) = next
            .split_once(' ')
            .ok_or_else(|| Error::Format(format!("line {}: expected a header field", n + 1)))?;
    }

    let parameterization = match kind.as_str() {
        "tabular" => {
            if key != "contexts" {
                return Err(Error::Format("tabular policy needs a `contexts` field".into()));
            }
            let count: usize = value
                .trim()
                .parse()
                .map_err(|_| Error::Format("bad context count".into()))?;
            let mut contexts = Vec::with_capacity(count);
            for _ in 0..count {
                let (n, v) = lines.field("c")?;
                contexts.push(parse_list(n, v)?);
            }
            let (n, d) = lines.field("default")?;
            let default: Vec<f64> = parse_list(n, d)?;
            if default.len() != vocab_size {
                return Err(Error::Format(format!("line {n}: default must have vocab_size entries")));
            }
            Parameterization::Tabular(std::sync::Arc::new(TabularIndex::new(contexts, default)))
        }
        "tiny_net" => {
            if key != "horizon" {
                return Err(Error::Format("tiny_net policy needs a `horizon` field".into()));
            }
            let horizon: usize = value.trim().parse().map_err(|_| Error::Format("bad horizon".into()))?;
            let hidden: usize = lines.parsed("hidden")?;
            Parameterization::TinyNet(NetShape::new(vocab_size, horizon, hidden)?)
        }
        other => return Err(Error::Format(format!("unknown policy kind `{other}`"))),
    };

    let count: usize = lines.parsed("params")?;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let (n, v) = lines.next_line()?;
        params.push(
            v.parse::<f64>()
                .map_err(|_| Error::Format(format!("line {n}: bad parameter `{v}`")))?,
        );
    }
    let expected = match &parameterization {
        Parameterization::Tabular(index) => index.len() * vocab_size,
        Parameterization::TinyNet(shape) => shape.num_params(),
    };
    if params.len() != expected {
        return Err(Error::Format(format!(
            "expected {expected} parameters, found {}",
            params.len()
        )));
    }
    Ok((
        LogitPolicy {
            space,
            parameterization,
            params,
            seed,
        },
        taken_at,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{Prompt, RewardRule, TokenMdp};
    use crate::policy::NetInit;
    use proptest::prelude::*;

    fn mdp() -> TokenMdp {
        TokenMdp::new(
            TokenSpace::with_eos(4, 2, 3),
            3,
            vec![
                Prompt {
                    tokens: vec![0],
                    weight: 1.0,
                },
                Prompt {
                    tokens: vec![1, 1],
                    weight: 2.0,
                },
            ],
            RewardRule::Constant { value: 0.0 },
        )
        .unwrap()
    }

    proptest! {
        #[test]
        fn tabular_round_trip(values in prop::collection::vec(-1e6f64..1e6, 1..64)) {
            let m = mdp();
            let base = LogitPolicy::tabular(&m).unwrap();
            let params: Vec<f64> = (0..base.num_params()).map(|i| values[i % values.len()] * (i as f64 + 0.1)).collect();
            let p = base.with_params(params).unwrap();
            let (back, taken) = decode(&encode(&p, Some(7))).unwrap();
            prop_assert_eq!(taken, Some(7));
            prop_assert_eq!(back, p);
        }
    }

    #[test]
    fn tiny_net_round_trip() {
        let p = LogitPolicy::tiny_net(&mdp(), 6, NetInit::Random { seed: 9, scale: 0.3 }).unwrap();
        let (back, taken) = decode(&encode(&p, None)).unwrap();
        assert_eq!(taken, None);
        assert_eq!(back, p);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let p = LogitPolicy::tabular(&mdp()).unwrap();
        let text = encode(&p, None);
        let cut: String = text.lines().take(8).collect::<Vec<_>>().join("\n");
        assert!(matches!(decode(&cut), Err(Error::Format(_))));
    }
}
