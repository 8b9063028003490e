//! Long ListOps: nested bracketed expressions over single digits.
//!
//! Serialized form is space-separated tokens, for example
//! `[MAX 4 3 [MIN 2 3 ] 1 0 ]`. The parser also accepts closing brackets
//! glued to the preceding token, as in `[MIN 2 3]`.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::TokenSequence;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ListOp {
    Max,
    Min,
    Median,
    SumMod,
    /// Floor of the arithmetic mean, for the reading of the operator list
    /// that names a mean.
    Mean,
}

impl ListOp {
    pub const ALL: [ListOp; 5] = [ListOp::Max, ListOp::Min, ListOp::Median, ListOp::SumMod, ListOp::Mean];

    pub fn name(self) -> &'static str {
        match self {
            ListOp::Max => "MAX",
            ListOp::Min => "MIN",
            ListOp::Median => "MEDIAN",
            ListOp::SumMod => "SUM_MOD",
            ListOp::Mean => "MEAN",
        }
    }

    pub fn from_name(s: &str) -> Option<ListOp> {
        ListOp::ALL.into_iter().find(|o| o.name() == s)
    }

    pub fn apply(self, args: &[u8]) -> u8 {
        debug_assert!(!args.is_empty());
        match self {
            ListOp::Max => *args.iter().max().expect("operands"),
            ListOp::Min => *args.iter().min().expect("operands"),
            ListOp::SumMod => (args.iter().map(|&a| a as u32).sum::<u32>() % 10) as u8,
            ListOp::Mean => (args.iter().map(|&a| a as u32).sum::<u32>() / args.len() as u32) as u8,
            ListOp::Median => {
                let mut s = args.to_vec();
                s.sort_unstable();
                let n = s.len();
                if n % 2 == 1 {
                    s[n / 2]
                } else {
                    ((s[n / 2 - 1] as u16 + s[n / 2] as u16) / 2) as u8
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ListOpsExpr {
    Digit(u8),
    Node(ListOp, Vec<ListOpsExpr>),
}

impl ListOpsExpr {
    pub fn eval(&self) -> u8 {
        match self {
            ListOpsExpr::Digit(d) => *d,
            ListOpsExpr::Node(op, args) => {
                let vals: Vec<u8> = args.iter().map(ListOpsExpr::eval).collect();
                op.apply(&vals)
            }
        }
    }

    /// Number of tokens in the serialized form.
    pub fn token_len(&self) -> usize {
        match self {
            ListOpsExpr::Digit(_) => 1,
            ListOpsExpr::Node(_, args) => 2 + args.iter().map(ListOpsExpr::token_len).sum::<usize>(),
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            ListOpsExpr::Digit(_) => 0,
            ListOpsExpr::Node(_, args) => 1 + args.iter().map(ListOpsExpr::depth).max().unwrap_or(0),
        }
    }

    pub fn tokens(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.token_len());
        self.push_tokens(&mut out);
        out
    }

    fn push_tokens(&self, out: &mut Vec<String>) {
        match self {
            ListOpsExpr::Digit(d) => out.push(d.to_string()),
            ListOpsExpr::Node(op, args) => {
                out.push(format!("[{}", op.name()));
                for a in args {
                    a.push_tokens(out);
                }
                out.push("]".into());
            }
        }
    }
}

impl fmt::Display for ListOpsExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tokens().join(" "))
    }
}

/// Splits text into tokens on whitespace and commas, detaching every `]`.
pub fn lex(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split(|c: char| c.is_whitespace() || c == ',').filter(|w| !w.is_empty()) {
        let trimmed = word.trim_end_matches(']');
        if !trimmed.is_empty() {
            out.push(trimmed.to_string());
        }
        out.extend(std::iter::repeat_n("]".to_string(), word.len() - trimmed.len()));
    }
    out
}

pub fn parse_tokens(tokens: &[String]) -> Result<ListOpsExpr> {
    let mut pos = 0;
    let expr = parse_at(tokens, &mut pos)?;
    if pos != tokens.len() {
        return Err(Error::Parse { position: pos, message: format!("unexpected trailing token {:?}", tokens[pos]) });
    }
    Ok(expr)
}

pub fn parse_listops(text: &str) -> Result<ListOpsExpr> {
    parse_tokens(&lex(text))
}

fn parse_at(tokens: &[String], pos: &mut usize) -> Result<ListOpsExpr> {
    let tok = tokens
        .get(*pos)
        .ok_or_else(|| Error::Parse { position: *pos, message: "unexpected end of input".into() })?;
    if let Some(name) = tok.strip_prefix('[') {
        let op = ListOp::from_name(name)
            .ok_or_else(|| Error::Parse { position: *pos, message: format!("unknown operator {name:?}") })?;
        *pos += 1;
        let mut args = Vec::new();
        loop {
            match tokens.get(*pos).map(String::as_str) {
                Some("]") => {
                    if args.is_empty() {
                        return Err(Error::Parse { position: *pos, message: format!("{} has no operands", op.name()) });
                    }
                    *pos += 1;
                    return Ok(ListOpsExpr::Node(op, args));
                }
                Some(_) => args.push(parse_at(tokens, pos)?),
                None => return Err(Error::Parse { position: *pos, message: "unclosed bracket".into() }),
            }
        }
    }
    match tok.as_str() {
        d if d.len() == 1 && d.as_bytes()[0].is_ascii_digit() => {
            *pos += 1;
            Ok(ListOpsExpr::Digit(d.as_bytes()[0] - b'0'))
        }
        other => Err(Error::Parse { position: *pos, message: format!("unexpected token {other:?}") }),
    }
}

/// Exact evaluator over serialized text.
pub fn eval_listops(text: &str) -> Result<u8> {
    Ok(parse_listops(text)?.eval())
}

/// Token ids: digits are `0..=9`, then one id per operator, the closing
/// bracket and padding.
pub mod vocab {
    pub const CLOSE: u32 = 15;
    pub const PAD: u32 = 16;
    pub const SIZE: usize = 17;

    pub fn op_id(op: super::ListOp) -> u32 {
        10 + super::ListOp::ALL.iter().position(|&o| o == op).expect("listed") as u32
    }
}

pub fn encode_tokens(tokens: &[String]) -> Result<Vec<u32>> {
    tokens
        .iter()
        .enumerate()
        .map(|(i, t)| {
            if t == "]" {
                Ok(vocab::CLOSE)
            } else if let Some(op) = t.strip_prefix('[').and_then(ListOp::from_name) {
                Ok(vocab::op_id(op))
            } else if t.len() == 1 && t.as_bytes()[0].is_ascii_digit() {
                Ok((t.as_bytes()[0] - b'0') as u32)
            } else {
                Err(Error::Parse { position: i, message: format!("unexpected token {t:?}") })
            }
        })
        .collect()
}

/// Encodes and pads to `len`; longer inputs are an error.
pub fn to_sequence(expr: &ListOpsExpr, len: usize) -> Result<TokenSequence> {
    let ids = encode_tokens(&expr.tokens())?;
    if ids.len() > len {
        return Err(Error::Length { len: ids.len(), max: len });
    }
    TokenSequence::unpadded(ids).pad_to(len, vocab::PAD)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ListOpsConfig {
    /// Longest serialized expression, in tokens.
    pub max_len: usize,
    /// Shortest accepted expression; shorter draws are resampled.
    #[serde(default = "default_min_len")]
    pub min_len: usize,
    /// Maximum bracket nesting; 1 means a single flat operator.
    pub max_depth: usize,
    #[serde(default = "default_max_args")]
    pub max_args: usize,
    #[serde(default = "default_nest_prob")]
    pub nest_prob: f64,
    #[serde(default = "default_ops")]
    pub operators: Vec<ListOp>,
}

fn default_min_len() -> usize {
    1
}
fn default_max_args() -> usize {
    5
}
fn default_nest_prob() -> f64 {
    0.25
}
fn default_ops() -> Vec<ListOp> {
    vec![ListOp::Max, ListOp::Min, ListOp::Median, ListOp::SumMod]
}

impl ListOpsConfig {
    pub fn new(max_len: usize, max_depth: usize) -> Self {
        ListOpsConfig {
            max_len,
            min_len: default_min_len(),
            max_depth,
            max_args: default_max_args(),
            nest_prob: default_nest_prob(),
            operators: default_ops(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_len < 5 {
            return Err(Error::Generation(format!("max_len {} is below the minimum of 5", self.max_len)));
        }
        if self.max_depth < 1 {
            return Err(Error::Generation("max_depth must be at least 1".into()));
        }
        if self.max_args < 1 || self.operators.is_empty() {
            return Err(Error::Generation("need at least one operator and one operand".into()));
        }
        if !(0.0..=1.0).contains(&self.nest_prob) {
            return Err(Error::Generation("nest_prob must lie in [0, 1]".into()));
        }
        // the longest tree the depth and arity allow
        let mut longest = 1usize;
        for _ in 0..self.max_depth {
            longest = longest.saturating_mul(self.max_args).saturating_add(2);
        }
        if self.min_len > self.max_len || self.min_len > longest {
            return Err(Error::Generation(format!(
                "min_len {} is unattainable (max_len {}, longest possible {longest})",
                self.min_len, self.max_len
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ListOpsSample {
    pub expr: ListOpsExpr,
    pub label: u8,
}

const MAX_ATTEMPTS: usize = 10_000;

fn sample_tree(cfg: &ListOpsConfig, rng: &mut Rng, depth: usize, budget: usize) -> ListOpsExpr {
    let op = cfg.operators[rng.below(cfg.operators.len())];
    let room = budget - 2;
    let k = rng.range_inclusive(1, cfg.max_args.min(room));
    let mut args = Vec::with_capacity(k);
    let mut used = 0;
    for i in 0..k {
        let left = room - used - (k - i - 1);
        let arg = if depth < cfg.max_depth && left >= 3 && rng.bernoulli(cfg.nest_prob) {
            sample_tree(cfg, rng, depth + 1, left)
        } else {
            ListOpsExpr::Digit(rng.below(10) as u8)
        };
        used += arg.token_len();
        args.push(arg);
    }
    ListOpsExpr::Node(op, args)
}

/// One expression whose length lies in `[min_len, max_len]`.
pub fn gen_expr(cfg: &ListOpsConfig, rng: &mut Rng) -> Result<ListOpsExpr> {
    cfg.validate()?;
    for _ in 0..MAX_ATTEMPTS {
        let e = sample_tree(cfg, rng, 1, cfg.max_len);
        if e.token_len() >= cfg.min_len {
            return Ok(e);
        }
    }
    Err(Error::Generation(format!("no expression of at least {} tokens after {MAX_ATTEMPTS} draws", cfg.min_len)))
}

/// `n` labeled samples; sample `i` depends only on the seed and `i`.
pub fn gen_listops(cfg: &ListOpsConfig, rng: &Rng, n: usize) -> Result<Vec<ListOpsSample>> {
    cfg.validate()?;
    (0..n)
        .map(|i| {
            let expr = gen_expr(cfg, &mut rng.fork(i as u64))?;
            let label = expr.eval();
            Ok(ListOpsSample { expr, label })
        })
        .collect()
}

pub fn label_histogram(samples: &[ListOpsSample]) -> [usize; 10] {
    let mut h = [0; 10];
    for s in samples {
        h[s.label as usize] += 1;
    }
    h
}

/// One line per sample: `tokens<TAB>label`.
pub fn write_tsv(path: &Path, samples: &[ListOpsSample]) -> Result<()> {
    let mut buf = Vec::new();
    for s in samples {
        writeln!(buf, "{}\t{}", s.expr, s.label).expect("write to memory");
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads a TSV file, checking every label against the evaluator.
pub fn read_tsv(path: &Path) -> Result<Vec<ListOpsSample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (line_no, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |m: String| Error::Parse { position: line_no + 1, message: m };
        let (tokens, label) = line.split_once('\t').ok_or_else(|| bad("missing tab-separated label".into()))?;
        let label: u8 = label.trim().parse().map_err(|_| bad(format!("bad label {label:?}")))?;
        let expr = parse_listops(tokens).map_err(|e| bad(format!("{e}")))?;
        if expr.eval() != label {
            return Err(bad(format!("label {label} disagrees with evaluated value {}", expr.eval())));
        }
        out.push(ListOpsSample { expr, label });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_example() {
        assert_eq!(eval_listops("[MAX 4 3 [MIN 2 3] 1 0 [MEDIAN 1 5 8 9 2]]").unwrap(), 5);
        assert_eq!(eval_listops("[MIN 2 3]").unwrap(), 2);
        assert_eq!(eval_listops("[SUM_MOD 5 6 9]").unwrap(), 0);
    }

    #[test]
    fn even_median_floors_the_mean() {
        assert_eq!(ListOp::Median.apply(&[1, 2]), 1);
        assert_eq!(ListOp::Median.apply(&[9, 8, 1, 2]), 5);
        assert_eq!(ListOp::Mean.apply(&[9, 8, 1, 2]), 5);
    }

    #[test]
    fn malformed_input_reports_position() {
        for (text, at) in [("[MAX 1 2", 3), ("[MAX 1 x ]", 2), ("[FOO 1 ]", 0), ("[MAX ]", 1), ("[MIN 1 ] 2", 3)] {
            match eval_listops(text) {
                Err(Error::Parse { position, .. }) => assert_eq!(position, at, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn depth_one_never_nests() {
        let cfg = ListOpsConfig::new(40, 1);
        for s in gen_listops(&cfg, &Rng::new(3), 200).unwrap() {
            assert_eq!(s.expr.depth(), 1);
        }
    }

    #[test]
    fn lengths_respect_budget() {
        let mut cfg = ListOpsConfig::new(60, 6);
        cfg.min_len = 20;
        cfg.nest_prob = 0.6;
        for s in gen_listops(&cfg, &Rng::new(4), 300).unwrap() {
            let n = s.expr.token_len();
            assert!((20..=60).contains(&n), "{n}");
        }
    }

    #[test]
    fn unattainable_budget_is_an_error() {
        assert!(gen_listops(&ListOpsConfig::new(4, 2), &Rng::new(0), 1).is_err());
        let mut cfg = ListOpsConfig::new(100, 1);
        cfg.min_len = 50;
        assert!(matches!(gen_listops(&cfg, &Rng::new(0), 1), Err(Error::Generation(_))));
    }

    #[test]
    fn encoding_uses_compact_ids() {
        let e = parse_listops("[SUM_MOD 1 [MEAN 2 ] ]").unwrap();
        let ids = encode_tokens(&e.tokens()).unwrap();
        assert_eq!(ids, vec![13, 1, 14, 2, vocab::CLOSE, vocab::CLOSE]);
        assert!(ids.iter().all(|&i| (i as usize) < vocab::SIZE));
    }
}
