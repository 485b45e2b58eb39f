//! OCR text post-filtering by Unicode script, prompt assembly and the
//! translator boundary.

use std::collections::HashMap;
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_script::{Script, UnicodeScript};

pub use unicode_script::Script as ScriptClass;

/// Marks where the image embedding goes in the rendered prompt.
pub const IMAGE_SLOT: &str = "[img-1]";

pub const DEFAULT_PRE_TEXT: &str = "<|im_start|>user\n[img-1]";
pub const DEFAULT_PROB_INSTRUCTION: &str =
    "Rate from 0 to 9 how likely this meme is harmful. Answer with the probability only.";
pub const DEFAULT_POST_TEXT: &str = "<|im_end|>\n<|im_start|>assistant\n0.";

#[derive(Debug, Error)]
pub enum TextError {
    #[error("script filter needs at least one allowed script")]
    NoScripts,
    #[error("unknown script name {0:?}")]
    UnknownScript(String),
    #[error("template post_text must end with \"0.\"")]
    MissingPrimer,
    #[error(
        "template must contain the image slot {IMAGE_SLOT} exactly once in pre_text, found {0} occurrences overall"
    )]
    ImageSlot(usize),
    #[error("lexicon line {line}: {message}")]
    Lexicon { line: usize, message: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("template parse error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptFilterConfig {
    allowed: Vec<Script>,
}

impl Default for ScriptFilterConfig {
    fn default() -> Self {
        ScriptFilterConfig {
            allowed: vec![Script::Han, Script::Tamil],
        }
    }
}

impl ScriptFilterConfig {
    pub fn new(scripts: impl IntoIterator<Item = Script>) -> Result<Self, TextError> {
        let mut allowed: Vec<Script> = Vec::new();
        for s in scripts {
            if !allowed.contains(&s) {
                allowed.push(s);
            }
        }
        if allowed.is_empty() {
            return Err(TextError::NoScripts);
        }
        Ok(ScriptFilterConfig { allowed })
    }

    /// Parses a comma separated list of script names, either full Unicode
    /// names ("Han", "Tamil") or ISO 15924 short codes ("Hani", "Taml").
    pub fn from_names(names: &str) -> Result<Self, TextError> {
        let scripts = names
            .split(',')
            .map(str::trim)
            .filter(|n| !n.is_empty())
            .map(|n| {
                Script::from_full_name(n)
                    .or_else(|| Script::from_short_name(n))
                    .ok_or_else(|| TextError::UnknownScript(n.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(scripts)
    }

    pub fn allowed(&self) -> &[Script] {
        &self.allowed
    }

    pub fn allows(&self, c: char) -> bool {
        self.allowed.contains(&c.script())
    }
}

/// Keeps the whitespace-delimited tokens that contain at least one codepoint
/// of an allowed script, joined by single spaces.
pub fn filter_script_text(text: &str, config: &ScriptFilterConfig) -> String {
    let mut out = String::with_capacity(text.len());
    for token in text.split_whitespace().filter(|t| t.chars().any(|c| config.allows(c))) {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(token);
    }
    out
}

/// Script of the first allowed codepoint in `text`, if any.
pub fn dominant_script(text: &str, config: &ScriptFilterConfig) -> Option<Script> {
    text.chars().find(|&c| config.allows(c)).map(|c| c.script())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pre_text: String,
    prob_instruction: String,
    post_text: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate {
            pre_text: DEFAULT_PRE_TEXT.into(),
            prob_instruction: DEFAULT_PROB_INSTRUCTION.into(),
            post_text: DEFAULT_POST_TEXT.into(),
        }
    }
}

impl PromptTemplate {
    pub fn new(
        pre_text: impl Into<String>,
        prob_instruction: impl Into<String>,
        post_text: impl Into<String>,
    ) -> Result<Self, TextError> {
        let t = PromptTemplate {
            pre_text: pre_text.into(),
            prob_instruction: prob_instruction.into(),
            post_text: post_text.into(),
        };
        t.validate()?;
        Ok(t)
    }

    /// Same scaffold with a different instruction, e.g. a prompt variant
    /// appending an incentive sentence.
    pub fn with_instruction(&self, prob_instruction: impl Into<String>) -> Result<Self, TextError> {
        Self::new(self.pre_text.clone(), prob_instruction, self.post_text.clone())
    }

    pub fn from_json(s: &str) -> Result<Self, TextError> {
        let t: PromptTemplate = serde_json::from_str(s)?;
        t.validate()?;
        Ok(t)
    }

    fn validate(&self) -> Result<(), TextError> {
        if !self.post_text.ends_with("0.") {
            return Err(TextError::MissingPrimer);
        }
        let in_pre = self.pre_text.matches(IMAGE_SLOT).count();
        let total =
            in_pre + self.prob_instruction.matches(IMAGE_SLOT).count() + self.post_text.matches(IMAGE_SLOT).count();
        if in_pre != 1 || total != 1 {
            return Err(TextError::ImageSlot(total));
        }
        Ok(())
    }

    pub fn pre_text(&self) -> &str {
        &self.pre_text
    }

    pub fn prob_instruction(&self) -> &str {
        &self.prob_instruction
    }

    pub fn post_text(&self) -> &str {
        &self.post_text
    }
}

/// Plain concatenation: pre_text, filtered text, optional space-separated
/// translation, instruction, post_text.
pub fn build_prompt(template: &PromptTemplate, filtered_text: &str, translation: Option<&str>) -> String {
    let extra = translation.map_or(0, |t| t.len() + 1);
    let mut out = String::with_capacity(
        template.pre_text.len()
            + filtered_text.len()
            + extra
            + template.prob_instruction.len()
            + template.post_text.len(),
    );
    out.push_str(&template.pre_text);
    out.push_str(filtered_text);
    if let Some(t) = translation {
        out.push(' ');
        out.push_str(t);
    }
    out.push_str(&template.prob_instruction);
    out.push_str(&template.post_text);
    out
}

pub trait Translator: Send + Sync {
    fn translate(&self, text: &str, source_script: Script) -> String;
}

/// Token-wise dictionary replacement; unmapped tokens pass through.
pub fn stub_translate(text: &str, lexicon: &HashMap<String, String>) -> String {
    text.split_whitespace()
        .map(|tok| lexicon.get(tok).map_or(tok, String::as_str))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Lexicon {
    entries: HashMap<String, String>,
}

impl Lexicon {
    pub fn new(entries: HashMap<String, String>) -> Self {
        Lexicon { entries }
    }

    /// Reads `source<TAB>target` lines. Blank lines and lines starting with
    /// `#` are skipped.
    pub fn from_reader<R: BufRead>(reader: R) -> Result<Self, TextError> {
        let mut entries = HashMap::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (src, dst) = line.split_once('\t').ok_or_else(|| TextError::Lexicon {
                line: idx + 1,
                message: "expected source<TAB>target".into(),
            })?;
            if src.is_empty() || src.chars().any(char::is_whitespace) {
                return Err(TextError::Lexicon {
                    line: idx + 1,
                    message: format!("source {src:?} must be a single non-empty token"),
                });
            }
            entries.insert(src.to_string(), dst.to_string());
        }
        Ok(Lexicon { entries })
    }

    pub fn entries(&self) -> &HashMap<String, String> {
        &self.entries
    }
}

impl Translator for Lexicon {
    fn translate(&self, text: &str, _source_script: Script) -> String {
        stub_translate(text, &self.entries)
    }
}
