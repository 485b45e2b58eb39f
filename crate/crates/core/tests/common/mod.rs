//! Reference oracles and synthetic data shared by the integration tests.
//! Nothing here calls into the code paths it is used to check.

#![allow(dead_code)]

use digitgate::gate::ToyRule;
use digitgate::{Label, Sample};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Box-Muller standard normal.
pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// The harm score written out term by term.
pub fn naive_aggregate(p: &[f64; 10]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, v) in p.iter().enumerate() {
        num += v * i as f64;
        den += v;
    }
    num / (9.0 * den)
}

/// AUROC by counting every positive/negative pair, ties worth one half.
pub fn pairwise_auroc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0u64;
    for (i, si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs as f64
}

/// Smallest weighted squared error reachable by any code assignment, each
/// with its own closed-form weighted least-squares (scale, offset).
pub fn exhaustive_block_error(w: &[f64], m: &[f64], levels: u32) -> f64 {
    let n = w.len() as u32;
    let mut best = f64::INFINITY;
    let mut codes = vec![0u32; w.len()];
    for mut k in 0..levels.pow(n) {
        for c in codes.iter_mut() {
            *c = k % levels;
            k /= levels;
        }
        let (mut a, mut b, mut c, mut d, mut e) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for i in 0..w.len() {
            let q = f64::from(codes[i]);
            a += m[i] * q * q;
            b += m[i] * q;
            c += m[i];
            d += m[i] * q * w[i];
            e += m[i] * w[i];
        }
        let det = a * c - b * b;
        let (s, z) = if det.abs() < 1e-12 {
            (0.0, e / c)
        } else {
            ((d * c - b * e) / det, (a * e - b * d) / det)
        };
        let err: f64 = (0..w.len())
            .map(|i| {
                let r = w[i] - (s * f64::from(codes[i]) + z);
                m[i] * r * r
            })
            .sum();
        best = best.min(err);
    }
    best
}

/// Han and Tamil code point ranges transcribed from the Unicode Scripts.txt
/// data file.
const HAN: &[(u32, u32)] = &[
    (0x2E80, 0x2E99),
    (0x2E9B, 0x2EF3),
    (0x2F00, 0x2FD5),
    (0x3005, 0x3005),
    (0x3007, 0x3007),
    (0x3021, 0x3029),
    (0x3038, 0x303B),
    (0x3400, 0x4DBF),
    (0x4E00, 0x9FFF),
    (0xF900, 0xFA6D),
    (0xFA70, 0xFAD9),
    (0x16FE2, 0x16FE3),
    (0x16FF0, 0x16FF1),
    (0x20000, 0x2A6DF),
    (0x2A700, 0x2B739),
    (0x2B740, 0x2B81D),
    (0x2B820, 0x2CEA1),
    (0x2CEB0, 0x2EBE0),
    (0x2F800, 0x2FA1D),
    (0x30000, 0x3134A),
];

const TAMIL: &[(u32, u32)] = &[
    (0x0B82, 0x0B83),
    (0x0B85, 0x0B8A),
    (0x0B8E, 0x0B90),
    (0x0B92, 0x0B95),
    (0x0B99, 0x0B9A),
    (0x0B9C, 0x0B9C),
    (0x0B9E, 0x0B9F),
    (0x0BA3, 0x0BA4),
    (0x0BA8, 0x0BAA),
    (0x0BAE, 0x0BB9),
    (0x0BBE, 0x0BC2),
    (0x0BC6, 0x0BC8),
    (0x0BCA, 0x0BCD),
    (0x0BD0, 0x0BD0),
    (0x0BD7, 0x0BD7),
    (0x0BE6, 0x0BFA),
    (0x11FC0, 0x11FF1),
    (0x11FFF, 0x11FFF),
];

fn in_table(table: &[(u32, u32)], c: char) -> bool {
    let v = c as u32;
    table.iter().any(|&(lo, hi)| lo <= v && v <= hi)
}

pub fn oracle_is_han_or_tamil(c: char) -> bool {
    in_table(HAN, c) || in_table(TAMIL, c)
}

/// Reference script filter built on the transcribed tables.
pub fn oracle_filter(text: &str) -> String {
    text.split_whitespace()
        .filter(|t| t.chars().any(oracle_is_han_or_tamil))
        .collect::<Vec<_>>()
        .join(" ")
}

const TAMIL_LETTERS: &[char] = &[
    'அ', 'ஆ', 'இ', 'ஈ', 'உ', 'ஊ', 'எ', 'ஏ', 'ஐ', 'ஒ', 'க', 'ங', 'ச', 'ஞ', 'ட', 'ண', 'த', 'ந', 'ப', 'ம', 'ய', 'ர', 'ல',
    'வ', 'ழ', 'ள', 'ற', 'ன', 'ா', 'ி', 'ு', 'ெ', 'ை', '்', '௧', '௨',
];

fn random_char(rng: &mut ChaCha8Rng, kind: u8) -> char {
    match kind {
        0 => {
            let base = if rng.random_bool(0.5) { b'a' } else { b'A' };
            char::from(base + rng.random_range(0..26u8))
        }
        1 => char::from_u32(rng.random_range(0x4E00..=0x9FFFu32)).unwrap(),
        2 => *TAMIL_LETTERS.choose(rng).unwrap(),
        _ => *['!', '?', '7', '0', '。', '，', '-', '@', '#'].choose(rng).unwrap(),
    }
}

/// Strings of whitespace-separated tokens drawn from Latin, Han, Tamil and
/// common punctuation, including tokens that mix scripts.
pub fn mixed_script_corpus(n: usize, seed: u64) -> Vec<String> {
    let mut rng = rng(seed);
    let seps = [" ", "  ", "\t", "\n", "\u{3000}", " \n "];
    (0..n)
        .map(|_| {
            let tokens = rng.random_range(0..9);
            let mut s = String::new();
            if rng.random_bool(0.2) {
                s.push(' ');
            }
            for t in 0..tokens {
                if t > 0 {
                    s.push_str(seps.choose(&mut rng).unwrap());
                }
                let len = rng.random_range(1..7);
                let mixed = rng.random_bool(0.25);
                let kind = rng.random_range(0..4u8);
                for _ in 0..len {
                    let k = if mixed { rng.random_range(0..4u8) } else { kind };
                    s.push(random_char(&mut rng, k));
                }
            }
            s
        })
        .collect()
}

/// Words whose leading trigram the synthetic model maps to high digits.
pub const HARMFUL_WORDS: &[&str] = &["杀死你", "去死吧", "打死他", "滚出去", "垃圾人", "கொல்லுவேன்", "நாசம்"];
/// Words whose leading trigram maps to low digits.
pub const BENIGN_WORDS: &[&str] = &["你好吗", "谢谢你", "吃饭了", "好朋友", "வணக்கம்", "நன்றி"];
/// Han/Tamil words with no rule.
pub const NEUTRAL_WORDS: &[&str] = &["今天", "新加坡", "我们", "天气", "சிங்கப்பூர்", "இன்று"];
/// Latin filler; removed by the script filter.
pub const LATIN_WORDS: &[&str] = &["lah", "wah", "meme", "so", "funny", "kill", "die", "shiok"];

fn leading_trigram(word: &str) -> String {
    word.chars().take(3).collect()
}

/// Toy rules keying harmful trigrams to digits 7-9 and benign ones to 0-2.
pub fn synthetic_rules() -> Vec<ToyRule> {
    let mut rules = Vec::new();
    for (i, w) in HARMFUL_WORDS.iter().enumerate() {
        rules.push(ToyRule {
            ngram: leading_trigram(w),
            digit: 9 - i % 3,
            weight: 3.0,
        });
    }
    for (i, w) in BENIGN_WORDS.iter().enumerate() {
        rules.push(ToyRule {
            ngram: leading_trigram(w),
            digit: i % 3,
            weight: 2.5,
        });
    }
    rules
}

/// Labeled synthetic memes. Harmful ones carry at least one harmful word;
/// a few benign ones carry one too, always alongside benign words.
pub fn synthetic_dataset(n: usize, seed: u64) -> Vec<Sample> {
    let mut rng = rng(seed);
    (0..n)
        .map(|i| {
            let harmful = rng.random_bool(0.5);
            let mut words: Vec<&str> = Vec::new();
            if harmful {
                for _ in 0..rng.random_range(1..=2) {
                    words.push(HARMFUL_WORDS.choose(&mut rng).unwrap());
                }
                if rng.random_bool(0.3) {
                    words.push(BENIGN_WORDS.choose(&mut rng).unwrap());
                }
            } else {
                for _ in 0..rng.random_range(0..=2) {
                    words.push(BENIGN_WORDS.choose(&mut rng).unwrap());
                }
                if rng.random_bool(0.05) {
                    words.push(HARMFUL_WORDS.choose(&mut rng).unwrap());
                    words.push(BENIGN_WORDS.choose(&mut rng).unwrap());
                    words.push(BENIGN_WORDS.choose(&mut rng).unwrap());
                }
            }
            for _ in 0..rng.random_range(0..=2) {
                words.push(NEUTRAL_WORDS.choose(&mut rng).unwrap());
            }
            for _ in 0..rng.random_range(0..=3) {
                words.push(LATIN_WORDS.choose(&mut rng).unwrap());
            }
            // shuffle word order
            for k in (1..words.len()).rev() {
                let j = rng.random_range(0..=k);
                words.swap(k, j);
            }
            let label = if harmful { Label::Harmful } else { Label::Benign };
            Sample::new(format!("meme-{i:04}"), words.join(" "))
                .with_image(format!("img/{i:04}.png"))
                .with_label(label)
        })
        .collect()
}
