//! Terminal reward composition and the open-ended text reward.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use crate::error::{MedvrError, Result};
use crate::types::RewardBreakdown;

/// Penalty applied to malformed or syntactically invalid outputs.
pub const FORMAT_PENALTY: f64 = -0.5;

/// 1 when the decoded label matches the gold label; absent answers score 0.
pub fn accuracy_mc(answer: Option<u32>, gold: u32) -> f64 {
    match answer {
        Some(a) if a == gold => 1.0,
        _ => 0.0,
    }
}

fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

fn counts(tokens: &[String]) -> HashMap<&str, usize> {
    let mut m = HashMap::new();
    for t in tokens {
        *m.entry(t.as_str()).or_insert(0) += 1;
    }
    m
}

fn clipped_matches(candidate: &[String], reference: &[String]) -> usize {
    let cand = counts(candidate);
    let refc = counts(reference);
    cand.iter().map(|(tok, &c)| c.min(*refc.get(tok).unwrap_or(&0))).sum()
}

/// Clipped unigram precision, optionally scaled by the brevity penalty
/// `exp(1 - r/c)` when the candidate is shorter than the reference.
pub fn bleu1_with(candidate: &str, reference: &str, brevity_penalty: bool) -> f64 {
    let cand = tokenize(candidate);
    let refr = tokenize(reference);
    if cand.is_empty() {
        return 0.0;
    }
    let precision = clipped_matches(&cand, &refr) as f64 / cand.len() as f64;
    let (c, r) = (cand.len() as f64, refr.len() as f64);
    let bp = if brevity_penalty && c < r { (1.0 - r / c).exp() } else { 1.0 };
    precision * bp
}

pub fn bleu1(candidate: &str, reference: &str) -> f64 {
    bleu1_with(candidate, reference, true)
}

/// Clipped unigram recall.
pub fn rouge1(candidate: &str, reference: &str) -> f64 {
    let cand = tokenize(candidate);
    let refr = tokenize(reference);
    if refr.is_empty() {
        return 0.0;
    }
    clipped_matches(&cand, &refr) as f64 / refr.len() as f64
}

/// Semantic similarity slot of the open-ended reward, scores in `[0, 1]`.
pub type SemanticScorer = Arc<dyn Fn(&str, &str) -> f64 + Send + Sync>;

#[derive(Clone)]
pub struct OpenRewardConfig {
    pub lambda: f64,
    pub brevity_penalty: bool,
    pub semantic_scorer: SemanticScorer,
}

impl fmt::Debug for OpenRewardConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OpenRewardConfig")
            .field("lambda", &self.lambda)
            .field("brevity_penalty", &self.brevity_penalty)
            .finish_non_exhaustive()
    }
}

impl Default for OpenRewardConfig {
    fn default() -> Self {
        Self {
            lambda: 0.8,
            brevity_penalty: true,
            semantic_scorer: Arc::new(|_, _| 0.0),
        }
    }
}

/// `lambda/2 * (BLEU-1 + ROUGE-1) + (1 - lambda) * semantic`.
pub fn open_reward(candidate: &str, reference: &str, cfg: &OpenRewardConfig) -> Result<f64> {
    if !(0.0..=1.0).contains(&cfg.lambda) {
        return Err(MedvrError::Config("lambda must lie in [0,1]".into()));
    }
    let lexical = bleu1_with(candidate, reference, cfg.brevity_penalty) + rouge1(candidate, reference);
    let mut r = 0.5 * cfg.lambda * lexical;
    if cfg.lambda < 1.0 {
        let sem = (cfg.semantic_scorer)(candidate, reference).clamp(0.0, 1.0);
        r += (1.0 - cfg.lambda) * sem;
    }
    Ok(r)
}

/// Builds the terminal reward. `r_tool` must already be gated by CCA.
pub fn compose(r_acc: f64, format_ok: bool, r_tool: f64) -> Result<RewardBreakdown> {
    if r_tool > 0.0 && r_acc <= 0.0 {
        return Err(MedvrError::InconsistentGate(r_tool));
    }
    let r_format = if format_ok { 0.0 } else { FORMAT_PENALTY };
    let mut out = RewardBreakdown { r_acc, r_format, r_tool, total: 0.0 };
    out.total = out.expected_total();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy_mc(Some(1), 1), 1.0);
        assert_eq!(accuracy_mc(Some(1), 2), 0.0);
        assert_eq!(accuracy_mc(None, 2), 0.0);
    }

    #[test]
    fn bleu_rouge_examples() {
        let (c, r) = ("left lung opacity", "opacity in the left lung");
        let b = bleu1(c, r);
        // 3/3 clipped matches; c=3, r=5
        assert!((b - (1.0f64 - 5.0 / 3.0).exp()).abs() < 1e-15);
        assert!((b - 0.513_417_119_032_592).abs() < 1e-12);
        assert!((bleu1_with(c, r, false) - 1.0).abs() < 1e-15);
        assert!((rouge1(c, r) - 0.6).abs() < 1e-15);
        assert_eq!(bleu1(r, r), 1.0);
        assert_eq!(rouge1(r, r), 1.0);
        assert_eq!(bleu1("a b", "c d"), 0.0);
        assert_eq!(rouge1("a b", "c d"), 0.0);
        assert_eq!(bleu1("", "c d"), 0.0);
        assert_eq!(rouge1("a", ""), 0.0);
    }

    #[test]
    fn clipping_limits_repeated_tokens() {
        assert!((bleu1_with("the the the", "the cat", false) - 1.0 / 3.0).abs() < 1e-15);
        assert!((rouge1("the the the", "the the cat") - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn open_reward_examples() {
        let cfg = OpenRewardConfig {
            semantic_scorer: Arc::new(|_, _| 0.9),
            ..OpenRewardConfig::default()
        };
        // BLEU 1.0 and ROUGE 0.6: candidate "a b c" vs reference "a b c d e" without BP
        let cfg_nobp = OpenRewardConfig { brevity_penalty: false, ..cfg.clone() };
        let r = open_reward("a b c", "a b c d e", &cfg_nobp).unwrap();
        assert!((r - 0.82).abs() < 1e-12, "{r}");

        let ident = OpenRewardConfig { semantic_scorer: Arc::new(|_, _| 1.0), ..OpenRewardConfig::default() };
        assert!((open_reward("x y", "x y", &ident).unwrap() - 1.0).abs() < 1e-12);

        // stub semantic score 0, BLEU = ROUGE = 0.5
        let r = open_reward("a z", "a y", &OpenRewardConfig::default()).unwrap();
        assert!((r - 0.4).abs() < 1e-12);
    }

    #[test]
    fn lambda_one_never_calls_scorer() {
        let cfg = OpenRewardConfig {
            lambda: 1.0,
            semantic_scorer: Arc::new(|_, _| panic!("semantic scorer must not run")),
            ..OpenRewardConfig::default()
        };
        assert!((open_reward("a b", "a b", &cfg).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn compose_examples() {
        assert_eq!(compose(1.0, true, 1.0).unwrap().total, 2.0);
        assert_eq!(compose(0.0, true, 0.0).unwrap().total, 0.0);
        assert_eq!(compose(1.0, false, 0.5).unwrap().total, 1.0);
        assert_eq!(compose(0.0, true, 0.5), Err(MedvrError::InconsistentGate(0.5)));
        assert_eq!(compose(0.0, false, 0.0).unwrap().total, -0.5);
    }

    proptest! {
        #[test]
        fn compose_is_monotone(acc in 0.0f64..1.0, d in 0.0f64..0.5, tool in prop::sample::select(vec![0.0, 0.5, 1.0])) {
            let acc = acc + 1e-3;
            let base = compose(acc, true, tool).unwrap().total;
            prop_assert!(compose(acc + d, true, tool).unwrap().total >= base);
            prop_assert!(compose(acc, false, tool).unwrap().total <= base);
            if tool < 1.0 {
                prop_assert!(compose(acc, true, tool + 0.5).unwrap().total >= base);
            }
            prop_assert!(compose(acc, true, tool).unwrap().is_consistent());
        }

        #[test]
        fn lexical_scores_bounded_and_case_blind(words in prop::collection::vec("[a-cA-C]{1,3}", 0..8), refw in prop::collection::vec("[a-c]{1,3}", 0..8)) {
            let c = words.join(" ");
            let r = refw.join(" ");
            for s in [bleu1(&c, &r), rouge1(&c, &r)] {
                prop_assert!((0.0..=1.0 + 1e-12).contains(&s));
            }
            prop_assert_eq!(bleu1(&c, &r), bleu1(&c.to_uppercase(), &r));
            prop_assert_eq!(rouge1(&c, &r), rouge1(&c.to_lowercase(), &r.to_uppercase()));
        }
    }
}
