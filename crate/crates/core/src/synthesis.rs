//! Maps a sampled action combination onto the operator-curated message
//! catalogue: filter to the templates a user is eligible for, then pick the
//! template agreeing with the combination on the most action sets.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{ActionCombo, ActionSet, ActionSpace, PolicyError};

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error("no eligible message")]
    NoEligibleMessage,
    #[error("duplicate message id {0:?}")]
    DuplicateMessageId(String),
    #[error("message {id:?}: {reason}")]
    InvalidTemplate { id: String, reason: String },
    #[error(transparent)]
    Space(#[from] PolicyError),
    #[error("cannot read catalogue: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse catalogue: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageTemplate {
    #[serde(rename = "id")]
    pub message_id: String,
    /// Action set → label this message embodies; sets may be left out.
    #[serde(default)]
    pub attributes: BTreeMap<String, String>,
    /// Segment tags a user must carry to receive this message.
    #[serde(default)]
    pub required_tags: BTreeSet<String>,
    pub channel: String,
    pub body_ref: String,
}

/// Action space plus the templates annotated against it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "CatalogDocument", into = "CatalogDocument")]
pub struct MessageCatalog {
    space: ActionSpace,
    templates: Vec<MessageTemplate>,
}

/// On-disk layout of a catalogue.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CatalogDocument {
    pub action_sets: Vec<ActionSet>,
    #[serde(default)]
    pub templates: Vec<MessageTemplate>,
}

impl TryFrom<CatalogDocument> for MessageCatalog {
    type Error = SynthesisError;
    fn try_from(doc: CatalogDocument) -> Result<Self, Self::Error> {
        MessageCatalog::new(ActionSpace::new(doc.action_sets)?, doc.templates)
    }
}

impl From<MessageCatalog> for CatalogDocument {
    fn from(c: MessageCatalog) -> Self {
        CatalogDocument {
            action_sets: c.space.sets().to_vec(),
            templates: c.templates,
        }
    }
}

impl MessageCatalog {
    pub fn new(space: ActionSpace, templates: Vec<MessageTemplate>) -> Result<Self, SynthesisError> {
        let mut ids = BTreeSet::new();
        for t in &templates {
            if t.message_id.is_empty() {
                return Err(SynthesisError::InvalidTemplate {
                    id: String::new(),
                    reason: "empty id".into(),
                });
            }
            if !ids.insert(t.message_id.as_str()) {
                return Err(SynthesisError::DuplicateMessageId(t.message_id.clone()));
            }
            for (set, label) in &t.attributes {
                if !space.has_action(set, label) {
                    return Err(SynthesisError::InvalidTemplate {
                        id: t.message_id.clone(),
                        reason: format!("attribute {set}={label} is not in the action space"),
                    });
                }
            }
        }
        Ok(Self { space, templates })
    }

    pub fn space(&self) -> &ActionSpace {
        &self.space
    }

    pub fn templates(&self) -> &[MessageTemplate] {
        &self.templates
    }

    pub fn from_toml_str(s: &str) -> Result<Self, SynthesisError> {
        toml::from_str(s).map_err(|e| SynthesisError::Parse(e.to_string()))
    }

    pub fn from_json_str(s: &str) -> Result<Self, SynthesisError> {
        serde_json::from_str(s).map_err(|e| SynthesisError::Parse(e.to_string()))
    }

    /// Loads a `.json` or `.toml` catalogue.
    pub fn load(path: &Path) -> Result<Self, SynthesisError> {
        let text = std::fs::read_to_string(path)?;
        if path.extension().is_some_and(|e| e == "json") {
            Self::from_json_str(&text)
        } else {
            Self::from_toml_str(&text)
        }
    }
}

/// Templates whose required tags are all carried by the user, in catalogue order.
pub fn eligible_templates<'a>(catalog: &'a MessageCatalog, user_tags: &BTreeSet<String>) -> Vec<&'a MessageTemplate> {
    catalog
        .templates
        .iter()
        .filter(|t| t.required_tags.is_subset(user_tags))
        .collect()
}

/// Number of action sets on which `template` agrees with `combo`.
pub fn match_score(combo: &ActionCombo, template: &MessageTemplate) -> usize {
    template
        .attributes
        .iter()
        .filter(|(set, label)| combo.get(set) == Some(label.as_str()))
        .count()
}

/// Highest-scoring template, ties to the lowest message id.
pub fn match_message<'a>(
    combo: &ActionCombo,
    eligible: &[&'a MessageTemplate],
) -> Result<&'a MessageTemplate, SynthesisError> {
    eligible
        .iter()
        .copied()
        .max_by(|a, b| {
            match_score(combo, a)
                .cmp(&match_score(combo, b))
                .then_with(|| b.message_id.cmp(&a.message_id))
        })
        .ok_or(SynthesisError::NoEligibleMessage)
}

/// What the user actually receives: the template's attributes, with the
/// combination's choices for sets the template leaves open.
pub fn delivered_combo(combo: &ActionCombo, template: &MessageTemplate) -> ActionCombo {
    let mut out = combo.clone();
    for (set, label) in &template.attributes {
        out.choices.insert(set.clone(), label.clone());
    }
    out
}
