//! Completion parsing and the five list-recommendation rewards.
//!
//! A completion is well-formed when, after trimming, it is exactly
//! `<think>...</think>` followed (after optional whitespace) by
//! `<answer>...</answer>`, each tag appearing once, and the answer holds at
//! least one SID. Inside the answer an item is a maximal run of adjacent
//! `<X_r_c>` / `<Z#n>` tokens; a run is split before every `<A_..>` token
//! and after every `<Z#n>` token, so back-to-back SIDs still separate.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedCompletion {
    pub syntax_ok: bool,
    pub items: Vec<String>,
    pub think_text: String,
    /// Whitespace-delimited tokens in the whole completion.
    pub output_length: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Token {
    Layer(u8),
    Disambiguator,
}

/// Length of a SID token starting at `s[0] == b'<'`, if there is one.
fn match_token(s: &[u8]) -> Option<(usize, Token)> {
    let digits = |from: usize| s[from..].iter().take_while(|b| b.is_ascii_digit()).count();
    if s.len() < 4 || s[0] != b'<' {
        return None;
    }
    if s[1] == b'Z' && s[2] == b'#' {
        let n = digits(3);
        if n > 0 && s.get(3 + n) == Some(&b'>') {
            return Some((4 + n, Token::Disambiguator));
        }
        return None;
    }
    if !s[1].is_ascii_uppercase() || s[2] != b'_' {
        return None;
    }
    let r = digits(3);
    if r == 0 || s.get(3 + r) != Some(&b'_') {
        return None;
    }
    let c = digits(4 + r);
    if c == 0 || s.get(4 + r + c) != Some(&b'>') {
        return None;
    }
    Some((5 + r + c, Token::Layer(s[1])))
}

/// Splits answer text into SID items.
pub fn extract_items(answer: &str) -> Vec<String> {
    let bytes = answer.as_bytes();
    let mut items = Vec::new();
    let mut current = String::new();
    let mut i = 0;
    while i < bytes.len() {
        if let Some((len, tok)) = match_token(&bytes[i..]) {
            if tok == Token::Layer(b'A') && !current.is_empty() {
                items.push(std::mem::take(&mut current));
            }
            current.push_str(&answer[i..i + len]);
            if tok == Token::Disambiguator {
                items.push(std::mem::take(&mut current));
            }
            i += len;
        } else {
            if !current.is_empty() {
                items.push(std::mem::take(&mut current));
            }
            i += 1;
        }
    }
    if !current.is_empty() {
        items.push(current);
    }
    items
}

/// Never panics; malformed text yields `syntax_ok == false`.
pub fn parse_completion(text: &str) -> ParsedCompletion {
    let output_length = text.split_whitespace().count();
    let fail = ParsedCompletion {
        syntax_ok: false,
        items: Vec::new(),
        think_text: String::new(),
        output_length,
    };
    let t = text.trim();
    for tag in ["<think>", "</think>", "<answer>", "</answer>"] {
        if t.matches(tag).count() != 1 {
            return fail;
        }
    }
    let Some(rest) = t.strip_prefix("<think>") else {
        return fail;
    };
    let Some((think, rest)) = rest.split_once("</think>") else {
        return fail;
    };
    let Some(rest) = rest.trim_start().strip_prefix("<answer>") else {
        return fail;
    };
    let Some(answer) = rest.strip_suffix("</answer>") else {
        return fail;
    };
    let items = extract_items(answer);
    if items.is_empty() {
        return fail;
    }
    ParsedCompletion {
        syntax_ok: true,
        items,
        think_text: think.to_string(),
        output_length,
    }
}

/// Lossy UTF-8 front end for arbitrary bytes.
pub fn parse_completion_bytes(bytes: &[u8]) -> ParsedCompletion {
    parse_completion(&String::from_utf8_lossy(bytes))
}

pub fn format_reward(p: &ParsedCompletion, k: usize) -> f64 {
    if p.syntax_ok && p.items.len() == k {
        1.0
    } else {
        0.0
    }
}

/// 1-based position of the first occurrence of `gt`.
pub fn rank_of(p: &ParsedCompletion, gt: &str) -> Option<usize> {
    p.items.iter().position(|i| i == gt).map(|r| r + 1)
}

pub fn rr_reward(p: &ParsedCompletion, gt: &str, k: usize) -> f64 {
    match rank_of(p, gt) {
        Some(r) if format_reward(p, k) == 1.0 => 1.0 / r as f64,
        _ => 0.0,
    }
}

/// Needs only well-formed syntax, not a list of length `k`.
pub fn soft_acc_reward(p: &ParsedCompletion, gt: &str) -> f64 {
    if p.syntax_ok && rank_of(p, gt).is_some() {
        1.0
    } else {
        0.0
    }
}

pub fn distinct_reward(p: &ParsedCompletion, k: usize) -> f64 {
    if format_reward(p, k) == 1.0 {
        p.items.iter().collect::<BTreeSet<_>>().len() as f64
    } else {
        0.0
    }
}

/// A malformed completion has no usable output and earns 0.
pub fn length_reward(p: &ParsedCompletion, target_length: usize) -> f64 {
    if !p.syntax_ok {
        return 0.0;
    }
    (p.output_length as f64 / target_length.max(1) as f64).min(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub format: f64,
    pub rr: f64,
    pub soft: f64,
    pub distinct: f64,
    pub length: f64,
    pub k: usize,
    pub target_length: usize,
}

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("unknown weight preset `{0}`")]
pub struct WeightParseError(pub String);

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            format: 0.4,
            rr: 0.42,
            soft: 0.12,
            distinct: 0.06,
            length: 0.2,
            k: 10,
            target_length: 512,
        }
    }
}

impl RewardWeights {
    /// Weight 1 on every term, with distinct items counted at 0.1 each.
    pub fn unit() -> Self {
        RewardWeights {
            format: 1.0,
            rr: 1.0,
            soft: 1.0,
            distinct: 0.1,
            length: 1.0,
            ..Default::default()
        }
    }

    fn as_array(&self) -> [f64; 5] {
        [self.format, self.rr, self.soft, self.distinct, self.length]
    }

    fn with_array(&self, w: [f64; 5]) -> Self {
        RewardWeights {
            format: w[0],
            rr: w[1],
            soft: w[2],
            distinct: w[3],
            length: w[4],
            ..self.clone()
        }
    }

    /// Default weights with term `drop` (0 = format .. 4 = length) zeroed and
    /// the rest rescaled to the original weight sum.
    pub fn ablate(&self, drop: usize) -> Self {
        let mut w = self.as_array();
        let total: f64 = w.iter().sum();
        w[drop] = 0.0;
        let rest: f64 = w.iter().sum();
        if rest > 0.0 {
            for x in &mut w {
                *x *= total / rest;
            }
        }
        self.with_array(w)
    }

    /// `default`, `unit`, `no_rr`, `no_soft`, `no_distinct`, `no_len`, or
    /// five comma-separated weights in format, rr, soft, distinct, length
    /// order.
    pub fn parse(spec: &str) -> Result<Self, WeightParseError> {
        let base = RewardWeights::default();
        Ok(match spec {
            "default" => base,
            "unit" => Self::unit(),
            "no_format" => base.ablate(0),
            "no_rr" => base.ablate(1),
            "no_soft" => base.ablate(2),
            "no_distinct" => base.ablate(3),
            "no_len" => base.ablate(4),
            other => {
                let vals: Vec<f64> = other
                    .split(',')
                    .map(|v| v.trim().parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| WeightParseError(other.to_string()))?;
                let arr: [f64; 5] = vals.try_into().map_err(|_| WeightParseError(other.to_string()))?;
                if arr.iter().any(|w| !w.is_finite() || *w < 0.0) {
                    return Err(WeightParseError(other.to_string()));
                }
                base.with_array(arr)
            }
        })
    }

    /// Largest attainable total.
    pub fn max_total(&self) -> f64 {
        self.format + self.rr + self.soft + self.k as f64 * self.distinct + self.length
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub format: f64,
    pub rr: f64,
    pub soft: f64,
    pub distinct: f64,
    pub length: f64,
    pub total: f64,
    pub rank: Option<usize>,
}

pub fn score_parsed(p: &ParsedCompletion, gt: &str, w: &RewardWeights) -> RewardBreakdown {
    let format = format_reward(p, w.k);
    let rr = rr_reward(p, gt, w.k);
    let soft = soft_acc_reward(p, gt);
    let distinct = distinct_reward(p, w.k);
    let length = length_reward(p, w.target_length);
    RewardBreakdown {
        format,
        rr,
        soft,
        distinct,
        length,
        total: w.format * format + w.rr * rr + w.soft * soft + w.distinct * distinct + w.length * length,
        rank: rank_of(p, gt),
    }
}

pub fn total_reward(text: &str, gt: &str, w: &RewardWeights) -> RewardBreakdown {
    score_parsed(&parse_completion(text), gt, w)
}

/// One line of batch scoring input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreInput {
    pub completion: String,
    pub ground_truth_sid: String,
}

/// Renders a well-formed completion around `items`.
pub fn render_completion(think: &str, items: &[String]) -> String {
    format!("<think>{think}</think><answer>{}</answer>", items.join(", "))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sid(i: usize) -> String {
        format!("<A_{}_{}><B_{}_{}><C_0_0><D_1_1>", i / 6, i % 6, i % 4, i % 3)
    }

    fn completion(items: &[String]) -> String {
        // 600 whitespace tokens of reasoning clear the 512-token target.
        render_completion(&"step ".repeat(600), items)
    }

    #[test]
    fn parses_ten_items() {
        let items: Vec<String> = (0..10).map(sid).collect();
        let p = parse_completion(&completion(&items));
        assert!(p.syntax_ok);
        assert_eq!(p.items, items);
    }

    #[test]
    fn structural_failures() {
        let ok_answer = "<answer><A_1_2></answer>";
        for bad in [
            "<think>x</think><answer><A_1_2>".to_string(),
            format!("<think>x</think><think>y</think>{ok_answer}"),
            format!("{ok_answer}<think>x</think>"),
            "<think>x</think><answer>nothing here</answer>".to_string(),
            format!("<think>x</think>junk{ok_answer}"),
            format!("<think>x</think>{ok_answer} trailing"),
        ] {
            let p = parse_completion(&bad);
            assert!(!p.syntax_ok, "{bad}");
            assert!(p.items.is_empty());
        }
        assert!(parse_completion(&format!("  <think></think>\n{ok_answer}\n")).syntax_ok);
    }

    #[test]
    fn item_grouping_rules() {
        assert_eq!(
            extract_items("<A_1_2><B_2_3><A_0_0><B_1_1>"),
            vec!["<A_1_2><B_2_3>", "<A_0_0><B_1_1>"]
        );
        assert_eq!(
            extract_items("<A_1_2><Z#1><A_1_2>,<B_9_9>"),
            vec!["<A_1_2><Z#1>", "<A_1_2>", "<B_9_9>"]
        );
        assert_eq!(extract_items("<A_1><A__2><a_1_1><Z#>"), Vec::<String>::new());
    }

    #[test]
    fn format_reward_cases() {
        let ten: Vec<String> = (0..10).map(sid).collect();
        assert_eq!(format_reward(&parse_completion(&completion(&ten)), 10), 1.0);
        assert_eq!(format_reward(&parse_completion(&completion(&ten[..9])), 10), 0.0);
        let broken = completion(&ten).replace("</answer>", "");
        assert_eq!(format_reward(&parse_completion(&broken), 10), 0.0);
    }

    #[test]
    fn rr_soft_distinct_cases() {
        let ten: Vec<String> = (0..10).map(sid).collect();
        let p = parse_completion(&completion(&ten));
        assert_eq!(rr_reward(&p, &ten[0], 10), 1.0);
        assert_eq!(rr_reward(&p, &ten[4], 10), 0.2);
        assert_eq!(soft_acc_reward(&p, &ten[9]), 1.0);
        assert_eq!(distinct_reward(&p, 10), 10.0);

        let eight = parse_completion(&completion(&ten[..8]));
        assert_eq!(rr_reward(&eight, &ten[0], 10), 0.0);
        assert_eq!(soft_acc_reward(&eight, &ten[0]), 1.0);
        assert_eq!(format_reward(&eight, 10), 0.0);
        assert_eq!(soft_acc_reward(&eight, &sid(30)), 0.0);
        assert_eq!(distinct_reward(&eight, 10), 0.0);

        let mut dup = ten.clone();
        dup[8] = ten[0].clone();
        dup[9] = ten[1].clone();
        assert_eq!(distinct_reward(&parse_completion(&completion(&dup)), 10), 8.0);
    }

    #[test]
    fn length_reward_cases() {
        let p = |n: usize| ParsedCompletion {
            syntax_ok: true,
            items: vec![],
            think_text: String::new(),
            output_length: n,
        };
        assert_eq!(length_reward(&p(700), 512), 1.0);
        assert_eq!(length_reward(&p(50), 200), 0.25);
        assert_eq!(length_reward(&parse_completion(""), 512), 0.0);
        let long_but_broken = format!("<think>{}</think>", "word ".repeat(600));
        assert_eq!(length_reward(&parse_completion(&long_but_broken), 512), 0.0);
    }

    #[test]
    fn worked_examples_under_unit_weights() {
        let w = RewardWeights::unit();
        let ten: Vec<String> = (0..10).map(sid).collect();
        let a = total_reward(&completion(&ten), &ten[0], &w);
        assert!((a.total - 5.0).abs() < 1e-12);
        let b = total_reward(&completion(&ten).replacen("<think>", "<think><think>", 1), &ten[0], &w);
        assert_eq!(b.total, 0.0);
        let mut c_items: Vec<String> = (20..30).map(sid).collect();
        c_items[4] = ten[0].clone();
        c_items[8] = c_items[0].clone();
        c_items[9] = c_items[1].clone();
        let c = total_reward(&completion(&c_items), &ten[0], &w);
        assert!((c.total - 4.0).abs() < 1e-12, "{c:?}");
    }

    #[test]
    fn default_weights_on_perfect_answer() {
        let ten: Vec<String> = (0..10).map(sid).collect();
        let r = total_reward(&completion(&ten), &ten[0], &RewardWeights::default());
        let hand = 0.4 * 1.0 + 0.42 * 1.0 + 0.12 * 1.0 + 0.06 * 10.0 + 0.2 * 1.0;
        assert_eq!(r.total, hand);
        assert!((r.total - 1.74).abs() < 1e-12);
    }

    #[test]
    fn presets_and_ablations() {
        let d = RewardWeights::default();
        for name in ["no_rr", "no_soft", "no_distinct", "no_len"] {
            let w = RewardWeights::parse(name).unwrap();
            let sum = w.format + w.rr + w.soft + w.distinct + w.length;
            assert!((sum - 1.2).abs() < 1e-12, "{name}");
        }
        let no_rr = RewardWeights::parse("no_rr").unwrap();
        assert_eq!(no_rr.rr, 0.0);
        assert!((no_rr.format / no_rr.soft - d.format / d.soft).abs() < 1e-12);
        let custom = RewardWeights::parse("1,0,0.5,0,2").unwrap();
        assert_eq!((custom.format, custom.soft, custom.length), (1.0, 0.5, 2.0));
        assert!(RewardWeights::parse("1,2").is_err());
        assert!(RewardWeights::parse("bogus").is_err());
        assert!(RewardWeights::parse("1,1,1,1,-1").is_err());
    }
}
