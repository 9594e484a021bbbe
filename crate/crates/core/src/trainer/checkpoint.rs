//! Versioned text checkpoints.
//!
//! ```text
//! oreo-ckpt v1
//! S 0,1 | logits: 0=0.25 1=-0.25 | V: 0.5
//! S 0,1,3 | V: 0.125
//! ```
//!
//! Records are sorted by token sequence so equal tables give equal bytes.
//! Either part of a record may be absent; floats use shortest round-trip form.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use crate::error::{OreoError, Result};
use crate::mdp::{fmt_tokens, PolicyTable, TokenId, ValueTable};

pub const CHECKPOINT_HEADER: &str = "oreo-ckpt v1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub policy: PolicyTable,
    pub value: ValueTable,
}

type Record<'a> = (Option<(&'a [TokenId], &'a [f64])>, Option<f64>);

pub fn write_checkpoint<W: Write>(policy: &PolicyTable, value: &ValueTable, mut w: W) -> Result<()> {
    let mut records: BTreeMap<&[TokenId], Record> = BTreeMap::new();
    for (k, e) in policy.iter() {
        records.entry(k.as_slice()).or_default().0 = Some((&e.actions, &e.logits));
    }
    for (k, v) in value.iter() {
        records.entry(k.as_slice()).or_default().1 = Some(*v);
    }
    writeln!(w, "{CHECKPOINT_HEADER}")?;
    for (key, (pol, v)) in records {
        write!(w, "S {}", fmt_tokens(key))?;
        if let Some((actions, logits)) = pol {
            write!(w, " | logits:")?;
            for (a, z) in actions.iter().zip(logits) {
                write!(w, " {a}={z}")?;
            }
        }
        if let Some(v) = v {
            write!(w, " | V: {v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

fn parse_tokens(s: &str, line: usize) -> Result<Vec<TokenId>> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| OreoError::Parse(format!("line {line}: bad token `{t}`")))
        })
        .collect()
}

fn parse_f64(s: &str, line: usize) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| OreoError::Parse(format!("line {line}: bad number `{s}`")))
}

pub fn read_checkpoint<R: BufRead>(r: R) -> Result<Checkpoint> {
    let mut lines = r.lines();
    match lines.next() {
        Some(Ok(h)) if h.trim_end() == CHECKPOINT_HEADER => {}
        Some(Ok(h)) => {
            return Err(OreoError::Parse(format!(
                "expected header `{CHECKPOINT_HEADER}`, found `{h}`"
            )))
        }
        Some(Err(e)) => return Err(e.into()),
        None => return Err(OreoError::Parse("empty checkpoint".into())),
    }
    let mut ckpt = Checkpoint::default();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let n = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(" | ");
        let key = parts
            .next()
            .and_then(|p| p.strip_prefix("S "))
            .ok_or_else(|| OreoError::Parse(format!("line {n}: expected `S <tokens>`")))?;
        let key = parse_tokens(key, n)?;
        for part in parts {
            if let Some(rest) = part.strip_prefix("logits:") {
                let mut actions = Vec::new();
                let mut logits = Vec::new();
                for pair in rest.split_whitespace() {
                    let (a, z) = pair
                        .split_once('=')
                        .ok_or_else(|| OreoError::Parse(format!("line {n}: bad logit `{pair}`")))?;
                    actions.push(
                        a.parse()
                            .map_err(|_| OreoError::Parse(format!("line {n}: bad action `{a}`")))?,
                    );
                    logits.push(parse_f64(z, n)?);
                }
                if actions.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(OreoError::Parse(format!("line {n}: actions not ascending")));
                }
                ckpt.policy.insert(key.clone(), actions, logits)?;
            } else if let Some(rest) = part.strip_prefix("V:") {
                ckpt.value.set(key.clone(), parse_f64(rest, n)?);
            } else {
                return Err(OreoError::Parse(format!("line {n}: unknown field `{part}`")));
            }
        }
    }
    Ok(ckpt)
}
