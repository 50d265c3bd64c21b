use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::assets;
use crate::corpus::{Argument, ValueCategory};
use crate::error::{Error, Result};

/// Token written in place of the `{mask}` slot.
pub const MASK_TOKEN: &str = "<mask>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TemplateMode {
    /// Plain classification input; all labels queried at once.
    #[serde(rename = "CLS")]
    Cls,
    /// Masked binary choice, answered by filling the mask.
    #[serde(rename = "MBC")]
    Mbc,
    /// Binary choice answering by generation.
    #[serde(rename = "BCA")]
    Bca,
    /// Open answering by generation.
    #[serde(rename = "OA")]
    Oa,
    /// Chain-of-thought, inference only.
    #[serde(rename = "CoT")]
    Cot,
}

impl TemplateMode {
    pub const ALL: [TemplateMode; 5] = [
        TemplateMode::Cls,
        TemplateMode::Mbc,
        TemplateMode::Bca,
        TemplateMode::Oa,
        TemplateMode::Cot,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateMode::Cls => "CLS",
            TemplateMode::Mbc => "MBC",
            TemplateMode::Bca => "BCA",
            TemplateMode::Oa => "OA",
            TemplateMode::Cot => "CoT",
        }
    }

    /// Whether the mode asks about one category per prompt.
    pub fn per_category(self) -> bool {
        self != TemplateMode::Cls
    }
}

impl fmt::Display for TemplateMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SoftPromptInit {
    Random,
    /// Copies the input embeddings of the frame's literal tokens.
    #[default]
    FromFrameTokens,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Premise,
    Conclusion,
    Stance,
    ValueName,
    ValueDescription,
    Knowledge,
    Mask,
}

impl Slot {
    fn parse(name: &str) -> Option<Slot> {
        Some(match name {
            "premise" => Slot::Premise,
            "conclusion" => Slot::Conclusion,
            "stance" => Slot::Stance,
            "value_name" => Slot::ValueName,
            "value_description" => Slot::ValueDescription,
            "knowledge" => Slot::Knowledge,
            "mask" => Slot::Mask,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Slot::Premise => "premise",
            Slot::Conclusion => "conclusion",
            Slot::Stance => "stance",
            Slot::ValueName => "value_name",
            Slot::ValueDescription => "value_description",
            Slot::Knowledge => "knowledge",
            Slot::Mask => "mask",
        }
    }

    fn needs_category(self) -> bool {
        matches!(self, Slot::ValueName | Slot::ValueDescription | Slot::Knowledge)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Text(String),
    Slot { slot: Slot, optional: bool },
}

fn parse_frame(frame: &str) -> Result<Vec<Piece>> {
    let mut pieces = Vec::new();
    let mut rest = frame;
    while let Some(open) = rest.find('{') {
        if open > 0 {
            pieces.push(Piece::Text(rest[..open].to_owned()));
        }
        let close = rest[open..]
            .find('}')
            .ok_or_else(|| Error::contract(format!("unclosed slot in frame {frame:?}")))?;
        let inner = &rest[open + 1..open + close];
        let (name, optional) = match inner.strip_suffix('?') {
            Some(n) => (n, true),
            None => (inner, false),
        };
        let slot = Slot::parse(name).ok_or_else(|| Error::contract(format!("unknown slot `{{{inner}}}`")))?;
        pieces.push(Piece::Slot { slot, optional });
        rest = &rest[open + close + 1..];
    }
    if !rest.is_empty() {
        pieces.push(Piece::Text(rest.to_owned()));
    }
    Ok(pieces)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptTemplate {
    pub mode: TemplateMode,
    pub frame: String,
    #[serde(default)]
    pub soft_prompt_length: usize,
    #[serde(default)]
    pub soft_prompt_init: SoftPromptInit,
}

impl PromptTemplate {
    pub fn validate(&self) -> Result<()> {
        let pieces = parse_frame(&self.frame)?;
        let slots: Vec<Slot> = pieces
            .iter()
            .filter_map(|p| match p {
                Piece::Slot { slot, .. } => Some(*slot),
                Piece::Text(_) => None,
            })
            .collect();
        let masks = slots.iter().filter(|&&s| s == Slot::Mask).count();
        let bad = |message: String| Err(Error::contract(format!("{} template: {message}", self.mode)));
        match self.mode {
            TemplateMode::Mbc if masks != 1 => return bad(format!("needs exactly one mask slot, found {masks}")),
            TemplateMode::Cls | TemplateMode::Bca | TemplateMode::Oa | TemplateMode::Cot if masks != 0 => {
                return bad("must not contain a mask slot".into())
            }
            _ => {}
        }
        if self.mode == TemplateMode::Cls {
            if let Some(s) = slots.iter().find(|s| s.needs_category()) {
                return bad(format!("queries all labels and cannot use `{{{}}}`", s.name()));
            }
        }
        Ok(())
    }

    /// The frame with every slot removed.
    pub fn literal_text(&self) -> Result<String> {
        Ok(parse_frame(&self.frame)?
            .into_iter()
            .filter_map(|p| match p {
                Piece::Text(t) => Some(t),
                Piece::Slot { .. } => None,
            })
            .collect())
    }
}

/// One template per mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateSet {
    #[serde(rename = "template")]
    templates: Vec<PromptTemplate>,
}

impl TemplateSet {
    pub fn builtin() -> Result<Self> {
        Self::from_toml_str(assets::TEMPLATES_TOML)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let set: TemplateSet = toml::from_str(text)?;
        for (i, t) in set.templates.iter().enumerate() {
            t.validate()?;
            if set.templates[..i].iter().any(|o| o.mode == t.mode) {
                return Err(Error::contract(format!("mode {} defined twice", t.mode)));
            }
        }
        Ok(set)
    }

    pub fn get(&self, mode: TemplateMode) -> Result<&PromptTemplate> {
        self.templates
            .iter()
            .find(|t| t.mode == mode)
            .ok_or_else(|| Error::contract(format!("no template for mode {mode}")))
    }

    pub fn templates(&self) -> &[PromptTemplate] {
        &self.templates
    }
}

/// A rendered prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptInstance {
    pub mode: TemplateMode,
    pub argument_id: String,
    pub category: Option<String>,
    pub text: String,
    /// Byte offset of [`MASK_TOKEN`] in `text` (MBC only).
    pub mask_position: Option<usize>,
}

/// Fills `template` for one argument and, for per-category modes, one category.
pub fn render(
    template: &PromptTemplate,
    argument: &Argument,
    category: Option<&ValueCategory>,
    knowledge: Option<&str>,
) -> Result<PromptInstance> {
    template.validate()?;
    match (template.mode.per_category(), category) {
        (false, Some(c)) => {
            return Err(Error::contract(format!(
                "{} mode queries all labels; got category `{}`",
                template.mode, c.name
            )))
        }
        (true, None) => {
            return Err(Error::contract(format!(
                "{} mode requires a category for slot `value_name`",
                template.mode
            )))
        }
        _ => {}
    }
    let mut text = String::new();
    let mut mask_position = None;
    for piece in parse_frame(&template.frame)? {
        let (slot, optional) = match piece {
            Piece::Text(t) => {
                text.push_str(&t);
                continue;
            }
            Piece::Slot { slot, optional } => (slot, optional),
        };
        let value = match slot {
            Slot::Premise => Some(argument.premise.as_str()),
            Slot::Conclusion => Some(argument.conclusion.as_str()),
            Slot::Stance => Some(argument.stance.as_word()),
            Slot::ValueName => category.map(|c| c.name.as_str()),
            Slot::ValueDescription => category.map(|c| c.description.as_str()),
            Slot::Knowledge => knowledge,
            Slot::Mask => {
                mask_position = Some(text.len());
                Some(MASK_TOKEN)
            }
        };
        match (value, optional) {
            (Some(v), _) => text.push_str(v),
            (None, true) => {}
            (None, false) => {
                return Err(Error::contract(format!("no value for required slot `{}`", slot.name())));
            }
        }
    }
    Ok(PromptInstance {
        mode: template.mode,
        argument_id: argument.id.clone(),
        category: category.map(|c| c.name.clone()),
        text,
        mask_position,
    })
}
