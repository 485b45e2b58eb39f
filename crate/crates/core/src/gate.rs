//! Digit gate: a pluggable next-token logit source and the masked softmax
//! that reads off the probabilities of the ten single-digit tokens.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GateError {
    #[error("digit token for {digit} (id {id}) is outside a vocabulary of {size} tokens")]
    DigitOutOfBounds { digit: usize, id: usize, size: usize },
    #[error("digit token ids are not distinct")]
    DuplicateDigit,
    #[error("token {id} ({token:?}) does not render the digit {digit}")]
    NotADigit { id: usize, token: String, digit: usize },
    #[error("vocabulary has no single-character token for digit {0}")]
    MissingDigit(usize),
    #[error("expected {expected} logits, got {got}")]
    LogitLength { expected: usize, got: usize },
    #[error("non-finite logit {value} for digit {digit}")]
    NonFinite { digit: usize, value: f64 },
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("toy model: {0}")]
    ToyModel(String),
    #[error("toy model parse error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Token strings plus the positions of the ten digit tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    digit_ids: [usize; 10],
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>, digit_ids: [usize; 10]) -> Result<Self, GateError> {
        for (d, &id) in digit_ids.iter().enumerate() {
            let tok = tokens.get(id).ok_or(GateError::DigitOutOfBounds {
                digit: d,
                id,
                size: tokens.len(),
            })?;
            let expected = char::from(b'0' + d as u8);
            let mut chars = tok.chars();
            if chars.next() != Some(expected) || chars.next().is_some() {
                return Err(GateError::NotADigit {
                    id,
                    token: tok.clone(),
                    digit: d,
                });
            }
        }
        let mut sorted = digit_ids;
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(GateError::DuplicateDigit);
        }
        Ok(Vocabulary { tokens, digit_ids })
    }

    /// Locates the first exact "0".."9" token for each digit.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, GateError> {
        let mut digit_ids = [usize::MAX; 10];
        for (d, slot) in digit_ids.iter_mut().enumerate() {
            let want = (b'0' + d as u8) as char;
            *slot = tokens
                .iter()
                .position(|t| t.len() == 1 && t.starts_with(want))
                .ok_or(GateError::MissingDigit(d))?;
        }
        Self::new(tokens, digit_ids)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn digit_ids(&self) -> &[usize; 10] {
        &self.digit_ids
    }
}

/// Probabilities of the digit tokens 0..9 after gating.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenDistribution {
    probs: [f64; 10],
}

impl TokenDistribution {
    pub fn new(probs: [f64; 10]) -> Result<Self, GateError> {
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(GateError::InvalidDistribution(format!(
                "entries must be finite and non-negative: {probs:?}"
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(GateError::InvalidDistribution(format!("sums to {sum}")));
        }
        Ok(TokenDistribution { probs })
    }

    pub fn uniform() -> Self {
        TokenDistribution { probs: [0.1; 10] }
    }

    pub fn probs(&self) -> &[f64; 10] {
        &self.probs
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for d in 1..10 {
            if self.probs[d] > self.probs[best] {
                best = d;
            }
        }
        best
    }
}

/// Softmax restricted to the ten digit tokens. Other logits are never read,
/// so they may hold anything, including masked-out infinities.
pub fn constrained_digit_distribution(logits: &[f64], vocab: &Vocabulary) -> Result<TokenDistribution, GateError> {
    if logits.len() != vocab.len() {
        return Err(GateError::LogitLength {
            expected: vocab.len(),
            got: logits.len(),
        });
    }
    let mut selected = [0.0f64; 10];
    for (d, &id) in vocab.digit_ids.iter().enumerate() {
        let v = logits[id];
        if !v.is_finite() {
            return Err(GateError::NonFinite { digit: d, value: v });
        }
        selected[d] = v;
    }
    let max = selected.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut probs = selected.map(|v| (v - max).exp());
    let total: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= total;
    }
    Ok(TokenDistribution { probs })
}

/// Anything that can produce next-token logits for a prompt.
pub trait LogitSource: Send + Sync {
    fn vocabulary(&self) -> &Vocabulary;

    /// One logit per vocabulary entry.
    fn logits_for(&self, prompt: &str) -> Result<Vec<f64>, GateError>;
}

/// Logit assigned to every non-digit token of the toy vocabulary.
pub const TOY_MASKED_LOGIT: f64 = -1.0e4;

const TOY_NGRAM: usize = 3;

/// The toy vocabulary: a few specials, the digits, and some filler tokens.
/// Digits deliberately do not sit at the start so the id mapping is exercised.
pub fn toy_vocabulary() -> Vocabulary {
    let mut tokens: Vec<String> = ["<unk>", "<|im_start|>", "<|im_end|>", ".", " "]
        .iter()
        .map(|s| s.to_string())
        .collect();
    tokens.extend(('a'..='z').map(String::from));
    tokens.extend((0..10).map(|d| d.to_string()));
    tokens.extend(["yes", "no", "00", "10"].iter().map(|s| s.to_string()));
    Vocabulary::from_tokens(tokens).expect("toy vocabulary is well formed")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyRule {
    pub ngram: String,
    pub digit: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ToyModelFile {
    bias: [f64; 10],
    #[serde(default)]
    rules: Vec<ToyRule>,
    #[serde(default)]
    seed: u64,
}

/// Desk-scale logit source: digit logits are a bias plus the weight rows of
/// every character trigram of the prompt that has a rule. Trigrams without a
/// rule contribute nothing.
#[derive(Debug, Clone)]
pub struct ToyLogitSource {
    weights: HashMap<String, [f64; 10]>,
    bias: [f64; 10],
    seed: u64,
    rules: Vec<ToyRule>,
    vocab: Vocabulary,
}

impl ToyLogitSource {
    pub fn new(bias: [f64; 10], rules: Vec<ToyRule>, seed: u64) -> Result<Self, GateError> {
        if bias.iter().any(|b| !b.is_finite()) {
            return Err(GateError::ToyModel("bias must be finite".into()));
        }
        let mut weights: HashMap<String, [f64; 10]> = HashMap::new();
        for r in &rules {
            if r.ngram.chars().count() != TOY_NGRAM {
                return Err(GateError::ToyModel(format!(
                    "rule n-gram {:?} must have exactly {TOY_NGRAM} characters",
                    r.ngram
                )));
            }
            if r.digit > 9 {
                return Err(GateError::ToyModel(format!("rule digit {} out of range", r.digit)));
            }
            if !r.weight.is_finite() {
                return Err(GateError::ToyModel(format!("rule weight for {:?} not finite", r.ngram)));
            }
            weights.entry(r.ngram.clone()).or_insert([0.0; 10])[r.digit] += r.weight;
        }
        Ok(ToyLogitSource {
            weights,
            bias,
            seed,
            rules,
            vocab: toy_vocabulary(),
        })
    }

    /// No rules, zero bias: every prompt gives a uniform digit distribution.
    pub fn zero() -> Self {
        Self::new([0.0; 10], Vec::new(), 0).expect("empty model is valid")
    }

    pub fn from_json(s: &str) -> Result<Self, GateError> {
        let f: ToyModelFile = serde_json::from_str(s)?;
        Self::new(f.bias, f.rules, f.seed)
    }

    pub fn to_json(&self) -> Result<String, GateError> {
        Ok(serde_json::to_string(&ToyModelFile {
            bias: self.bias,
            rules: self.rules.clone(),
            seed: self.seed,
        })?)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Bias plus matched trigram rows, summed in prompt order.
    pub fn digit_logits(&self, prompt: &str) -> [f64; 10] {
        let mut acc = self.bias;
        if self.weights.is_empty() {
            return acc;
        }
        let starts: Vec<usize> = prompt.char_indices().map(|(i, _)| i).collect();
        for w in 0..starts.len().saturating_sub(TOY_NGRAM - 1) {
            let end = starts.get(w + TOY_NGRAM).copied().unwrap_or(prompt.len());
            if let Some(row) = self.weights.get(&prompt[starts[w]..end]) {
                for (a, r) in acc.iter_mut().zip(row) {
                    *a += r;
                }
            }
        }
        acc
    }
}

/// Full-vocabulary logits of the toy model for `prompt`.
pub fn toy_logits(source: &ToyLogitSource, prompt: &str) -> Vec<f64> {
    let digits = source.digit_logits(prompt);
    let mut logits = vec![TOY_MASKED_LOGIT; source.vocab.len()];
    for (d, &id) in source.vocab.digit_ids.iter().enumerate() {
        logits[id] = digits[d];
    }
    logits
}

impl LogitSource for ToyLogitSource {
    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn logits_for(&self, prompt: &str) -> Result<Vec<f64>, GateError> {
        Ok(toy_logits(self, prompt))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn digit_logits_to_full(vocab: &Vocabulary, digits: [f64; 10], fill: f64) -> Vec<f64> {
        let mut v = vec![fill; vocab.len()];
        for (d, &id) in vocab.digit_ids().iter().enumerate() {
            v[id] = digits[d];
        }
        v
    }

    /// Plain softmax over ten values, used as the reference.
    fn softmax10(x: [f64; 10]) -> [f64; 10] {
        let z: f64 = x.iter().map(|v| v.exp()).sum();
        x.map(|v| v.exp() / z)
    }

    #[test]
    fn vocabulary_validation() {
        let toks = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let digits = toks(&["0", "1", "2", "3", "4", "5", "6", "7", "8", "9"]);
        assert!(Vocabulary::new(digits.clone(), [0, 1, 2, 3, 4, 5, 6, 7, 8, 9]).is_ok());
        assert!(matches!(
            Vocabulary::new(digits.clone(), [0, 1, 2, 3, 4, 5, 6, 7, 8, 10]),
            Err(GateError::DigitOutOfBounds { digit: 9, .. })
        ));
        assert!(matches!(
            Vocabulary::new(digits.clone(), [0, 1, 2, 3, 4, 5, 6, 7, 9, 8]),
            Err(GateError::NotADigit { digit: 8, .. })
        ));
        let mut with_multi = digits.clone();
        with_multi[7] = "77".into();
        assert!(matches!(
            Vocabulary::from_tokens(with_multi),
            Err(GateError::MissingDigit(7))
        ));
        let v = toy_vocabulary();
        assert_eq!(v.tokens()[v.digit_ids()[3]], "3");
        assert_ne!(v.digit_ids()[0], 0);
    }

    #[test]
    fn equal_digit_logits_give_uniform() {
        let v = toy_vocabulary();
        let d = constrained_digit_distribution(&digit_logits_to_full(&v, [2.5; 10], 7.0), &v).unwrap();
        for p in d.probs() {
            assert!((p - 0.1).abs() < 1e-15);
        }
    }

    #[test]
    fn saturated_digit_is_one_hot() {
        let v = toy_vocabulary();
        let mut digits = [0.0; 10];
        digits[7] = 1000.0;
        let d = constrained_digit_distribution(&digit_logits_to_full(&v, digits, 0.0), &v).unwrap();
        for (i, p) in d.probs().iter().enumerate() {
            let want = if i == 7 { 1.0 } else { 0.0 };
            assert!((p - want).abs() < 1e-9);
        }
        assert_eq!(d.argmax(), 7);
    }

    #[test]
    fn shift_matches_reference_softmax() {
        let v = toy_vocabulary();
        let base = [1f64.ln(), 2f64.ln(), 3f64.ln(), 4f64.ln(), 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let reference = softmax10(base);
        // weights 1,2,3,4,1,1,1,1,1,1 over a total of 16
        assert!((reference[3] - 4.0 / 16.0).abs() < 1e-15);
        let shifted = base.map(|x| x + 5.0);
        let a = constrained_digit_distribution(&digit_logits_to_full(&v, base, -3.0), &v).unwrap();
        let b = constrained_digit_distribution(&digit_logits_to_full(&v, shifted, 9.0), &v).unwrap();
        for d in 0..10 {
            assert!((a.probs()[d] - reference[d]).abs() < 1e-12);
            assert!((a.probs()[d] - b.probs()[d]).abs() < 1e-12);
        }
    }

    #[test]
    fn gate_errors() {
        let v = toy_vocabulary();
        assert!(matches!(
            constrained_digit_distribution(&[0.0; 3], &v),
            Err(GateError::LogitLength { .. })
        ));
        let mut l = digit_logits_to_full(&v, [0.0; 10], 0.0);
        l[v.digit_ids()[4]] = f64::NAN;
        assert!(matches!(
            constrained_digit_distribution(&l, &v),
            Err(GateError::NonFinite { digit: 4, .. })
        ));
        // a masked non-digit entry does not matter
        let mut l = digit_logits_to_full(&v, [0.0; 10], 0.0);
        l[0] = f64::NEG_INFINITY;
        assert!(constrained_digit_distribution(&l, &v).is_ok());
    }

    #[test]
    fn distribution_constructor() {
        assert!(TokenDistribution::new([0.1; 10]).is_ok());
        assert!(TokenDistribution::new([0.2; 10]).is_err());
        let mut neg = [0.1; 10];
        neg[0] = -0.1;
        neg[1] = 0.3;
        assert!(TokenDistribution::new(neg).is_err());
    }

    #[test]
    fn zero_toy_model_is_uniform() {
        let m = ToyLogitSource::zero();
        let l = m.logits_for("anything at all").unwrap();
        let d = constrained_digit_distribution(&l, m.vocabulary()).unwrap();
        assert_eq!(d, TokenDistribution::uniform());
    }

    #[test]
    fn trigram_rule_fires() {
        let m = ToyLogitSource::new(
            [0.0; 10],
            vec![ToyRule {
                ngram: "kil".into(),
                digit: 9,
                weight: 3.0,
            }],
            7,
        )
        .unwrap();
        let l = m.logits_for("i will kill").unwrap();
        let d = constrained_digit_distribution(&l, m.vocabulary()).unwrap();
        assert_eq!(d.argmax(), 9);
        let again = m.logits_for("i will kill").unwrap();
        assert_eq!(
            l.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            again.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        for (i, x) in l.iter().enumerate() {
            if !m.vocabulary().digit_ids().contains(&i) {
                assert_eq!(*x, TOY_MASKED_LOGIT);
            }
        }
    }

    #[test]
    fn trigrams_are_counted_per_occurrence_on_chars() {
        let m = ToyLogitSource::new(
            [0.5; 10],
            vec![
                ToyRule {
                    ngram: "你好吗".into(),
                    digit: 2,
                    weight: 1.0,
                },
                ToyRule {
                    ngram: "好吗你".into(),
                    digit: 2,
                    weight: 0.25,
                },
            ],
            0,
        )
        .unwrap();
        let d = m.digit_logits("你好吗你好吗");
        // 你好吗 twice, 好吗你 once
        assert_eq!(d[2], 0.5 + 2.0 + 0.25);
        assert_eq!(d[3], 0.5);
        assert_eq!(m.digit_logits("你好"), [0.5; 10]);
    }

    #[test]
    fn toy_model_file_round_trip() {
        let json = r#"{"bias":[0,0,0,0,0,0,0,0,0,1.5],"rules":[{"ngram":"abc","digit":3,"weight":2.0}],"seed":42}"#;
        let m = ToyLogitSource::from_json(json).unwrap();
        assert_eq!(m.seed(), 42);
        let back = ToyLogitSource::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back.digit_logits("xabcx"), m.digit_logits("xabcx"));
        assert!(ToyLogitSource::from_json(
            r#"{"bias":[0,0,0,0,0,0,0,0,0,0],"rules":[{"ngram":"ab","digit":3,"weight":2.0}]}"#
        )
        .is_err());
        assert!(ToyLogitSource::from_json(
            r#"{"bias":[0,0,0,0,0,0,0,0,0,0],"rules":[{"ngram":"abc","digit":10,"weight":2.0}]}"#
        )
        .is_err());
    }

    fn arb_logits() -> impl Strategy<Value = Vec<f64>> {
        let n = toy_vocabulary().len();
        proptest::collection::vec(-50.0f64..50.0, n)
    }

    proptest! {
        #[test]
        fn output_is_a_distribution(logits in arb_logits()) {
            let v = toy_vocabulary();
            let d = constrained_digit_distribution(&logits, &v).unwrap();
            prop_assert!(d.probs().iter().all(|p| *p >= 0.0));
            prop_assert!((d.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn non_digit_logits_have_no_effect(logits in arb_logits(), idx in 0usize..1000, v2 in -1e6f64..1e6) {
            let v = toy_vocabulary();
            let non_digit: Vec<usize> = (0..v.len()).filter(|i| !v.digit_ids().contains(i)).collect();
            let target = non_digit[idx % non_digit.len()];
            let mut perturbed = logits.clone();
            perturbed[target] = v2;
            let a = constrained_digit_distribution(&logits, &v).unwrap();
            let b = constrained_digit_distribution(&perturbed, &v).unwrap();
            for d in 0..10 {
                prop_assert_eq!(a.probs()[d].to_bits(), b.probs()[d].to_bits());
            }
        }

        #[test]
        fn raising_a_digit_logit_moves_mass_to_it(logits in proptest::collection::vec(-8.0f64..8.0, toy_vocabulary().len()), digit in 0usize..10, bump in 0.01f64..5.0) {
            let v = toy_vocabulary();
            let mut up = logits.clone();
            up[v.digit_ids()[digit]] += bump;
            let a = constrained_digit_distribution(&logits, &v).unwrap();
            let b = constrained_digit_distribution(&up, &v).unwrap();
            for d in 0..10 {
                if d == digit {
                    prop_assert!(b.probs()[d] > a.probs()[d]);
                } else if a.probs()[d] > 0.0 {
                    prop_assert!(b.probs()[d] < a.probs()[d]);
                }
            }
        }
    }
}
