//! Multi-level fine-grained caption documents.
//!
//! A document describes one image category at three granularities: an
//! image-level summary, a foreground view (component counts plus their
//! logical relations), and per-component captions whose attributes take
//! values from a per-attribute vocabulary carried inside the document.
//! The wire format is JSON with a top-level `"mfsc_version": 1` field and
//! canonical (alphabetically sorted) map keys, so serialized documents are
//! byte-stable and can be content-hashed.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MFSC_VERSION: u32 = 1;

/// How multiple base values of one attribute are joined in text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connector {
    Single,
    And,
    Or,
    With,
}

impl Connector {
    pub fn as_str(self) -> &'static str {
        match self {
            Connector::Single => "single",
            Connector::And => "and",
            Connector::Or => "or",
            Connector::With => "with",
        }
    }

    pub fn from_str(s: &str) -> Option<Connector> {
        match s {
            "single" => Some(Connector::Single),
            "and" => Some(Connector::And),
            "or" => Some(Connector::Or),
            "with" => Some(Connector::With),
            _ => None,
        }
    }
}

/// One attribute's value: one or more base values from the vocabulary,
/// joined by a connector. `single` is used exactly when there is one value.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeValue {
    pub base_values: Vec<String>,
    pub connector: Connector,
}

impl AttributeValue {
    pub fn single(value: impl Into<String>) -> Self {
        AttributeValue {
            base_values: vec![value.into()],
            connector: Connector::Single,
        }
    }

    /// The value as it reads in caption text, e.g. `"red and green"`.
    pub fn rendered(&self) -> String {
        match self.connector {
            Connector::Single => self.base_values.join(" "),
            c => self.base_values.join(&format!(" {} ", c.as_str())),
        }
    }
}

/// Caption for one visual component, with its attribute values.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentCaption {
    pub name: String,
    pub attributes: BTreeMap<String, AttributeValue>,
    pub caption_text: String,
}

/// Foreground view: how many of each component and how they relate.
#[derive(Debug, Clone, PartialEq)]
pub struct ForegroundRelation {
    pub component_counts: BTreeMap<String, u32>,
    pub relation_text: String,
}

/// Three-level structured caption for one category.
#[derive(Debug, Clone, PartialEq)]
pub struct MFSCDocument {
    pub category: String,
    pub summary: String,
    pub background: String,
    pub foreground: ForegroundRelation,
    pub components: Vec<ComponentCaption>,
    pub attribute_vocabulary: BTreeMap<String, Vec<String>>,
}

impl MFSCDocument {
    pub fn component_count(&self) -> usize {
        self.components.len()
    }
}

/// A single validation rule violation, locating the offending field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub path: String,
    pub rule: String,
    pub message: String,
}

/// Outcome of validating a document; empty means valid.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn push(&mut self, path: impl Into<String>, rule: impl Into<String>, message: impl Into<String>) {
        self.violations.push(Violation {
            path: path.into(),
            rule: rule.into(),
            message: message.into(),
        });
    }

    pub fn has_rule(&self, rule: &str) -> bool {
        self.violations.iter().any(|v| v.rule == rule)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "valid");
        }
        for v in &self.violations {
            writeln!(f, "- [{}] {}: {}", v.rule, v.path, v.message)?;
        }
        Ok(())
    }
}

// Wire structs mirror the JSON layout; connectors stay strings here so that
// unknown variants surface as validation violations instead of parse errors.

#[derive(Serialize, Deserialize)]
struct WireDoc {
    mfsc_version: u32,
    category: String,
    summary: String,
    background: String,
    foreground: WireForeground,
    components: Vec<WireComponent>,
    vocabulary: BTreeMap<String, Vec<String>>,
}

#[derive(Serialize, Deserialize)]
struct WireForeground {
    counts: BTreeMap<String, u32>,
    relation_text: String,
}

#[derive(Serialize, Deserialize)]
struct WireComponent {
    name: String,
    attributes: BTreeMap<String, WireAttribute>,
    caption_text: String,
}

#[derive(Serialize, Deserialize)]
struct WireAttribute {
    base_values: Vec<String>,
    connector: String,
}

enum ParseFailure {
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    Invalid(ValidationReport),
}

fn parse_internal(text: &str) -> std::result::Result<MFSCDocument, ParseFailure> {
    let wire: WireDoc = match serde_json::from_str(text) {
        Ok(w) => w,
        Err(e) => {
            if e.is_syntax() || e.is_eof() {
                return Err(ParseFailure::Syntax {
                    line: e.line(),
                    column: e.column(),
                    message: e.to_string(),
                });
            }
            let mut report = ValidationReport::default();
            report.push(
                format!("$ (line {}, column {})", e.line(), e.column()),
                "schema",
                e.to_string(),
            );
            return Err(ParseFailure::Invalid(report));
        }
    };

    let mut report = ValidationReport::default();
    if wire.mfsc_version != MFSC_VERSION {
        report.push(
            "mfsc_version",
            "version/unsupported",
            format!("expected {MFSC_VERSION}, got {}", wire.mfsc_version),
        );
    }

    let mut components = Vec::with_capacity(wire.components.len());
    for (ci, wc) in wire.components.into_iter().enumerate() {
        let mut attributes = BTreeMap::new();
        for (name, wa) in wc.attributes {
            let connector = match Connector::from_str(&wa.connector) {
                Some(c) => c,
                None => {
                    report.push(
                        format!("components[{ci}].attributes.{name}.connector"),
                        "connector/enum",
                        format!("unknown connector `{}`", wa.connector),
                    );
                    Connector::Single
                }
            };
            attributes.insert(
                name,
                AttributeValue {
                    base_values: wa.base_values,
                    connector,
                },
            );
        }
        components.push(ComponentCaption {
            name: wc.name,
            attributes,
            caption_text: wc.caption_text,
        });
    }

    let doc = MFSCDocument {
        category: wire.category,
        summary: wire.summary,
        background: wire.background,
        foreground: ForegroundRelation {
            component_counts: wire.foreground.counts,
            relation_text: wire.foreground.relation_text,
        },
        components,
        attribute_vocabulary: wire.vocabulary,
    };

    report.violations.extend(validate(&doc).violations);
    if report.is_empty() {
        Ok(doc)
    } else {
        Err(ParseFailure::Invalid(report))
    }
}

/// Parse and fully validate a JSON caption document.
pub fn parse_document(text: &str) -> Result<MFSCDocument> {
    match parse_internal(text) {
        Ok(doc) => Ok(doc),
        Err(ParseFailure::Syntax {
            line,
            column,
            message,
        }) => Err(Error::Syntax {
            line,
            column,
            message,
        }),
        Err(ParseFailure::Invalid(report)) => Err(Error::DocumentInvalid(report)),
    }
}

/// Like [`parse_document`] but never fails: any problem, including syntax
/// errors, comes back as violations in the report.
pub fn check_document(text: &str) -> ValidationReport {
    match parse_internal(text) {
        Ok(_) => ValidationReport::default(),
        Err(ParseFailure::Syntax {
            line,
            column,
            message,
        }) => {
            let mut report = ValidationReport::default();
            report.push(format!("$ (line {line}, column {column})"), "syntax", message);
            report
        }
        Err(ParseFailure::Invalid(report)) => report,
    }
}

/// Check every document invariant; an empty report means the document is valid.
pub fn validate(doc: &MFSCDocument) -> ValidationReport {
    let mut report = ValidationReport::default();

    if doc.summary.trim().is_empty() {
        report.push("summary", "summary/empty", "summary must be nonempty");
    }
    if doc.components.is_empty() {
        report.push("components", "components/empty", "at least one component is required");
    }

    for (ci, comp) in doc.components.iter().enumerate() {
        if comp.name.trim().is_empty() {
            report.push(
                format!("components[{ci}].name"),
                "component/name-empty",
                "component name must be nonempty",
            );
        }
        if comp.caption_text.trim().is_empty() {
            report.push(
                format!("components[{ci}].caption_text"),
                "component/caption-empty",
                "caption text must be nonempty",
            );
        }
        for (attr, value) in &comp.attributes {
            let path = format!("components[{ci}].attributes.{attr}");
            if value.base_values.is_empty() {
                report.push(path.clone(), "attribute/base-values-empty", "no base values");
                continue;
            }
            let single = value.base_values.len() == 1;
            if single != (value.connector == Connector::Single) {
                report.push(
                    path.clone(),
                    "connector/arity",
                    format!(
                        "connector `{}` with {} base value(s)",
                        value.connector.as_str(),
                        value.base_values.len()
                    ),
                );
            }
            match doc.attribute_vocabulary.get(attr) {
                None => report.push(
                    path.clone(),
                    "vocabulary/unknown-attribute",
                    format!("attribute `{attr}` has no vocabulary entry"),
                ),
                Some(vocab) => {
                    for v in &value.base_values {
                        if !vocab.contains(v) {
                            report.push(
                                path.clone(),
                                "vocabulary/unknown-value",
                                format!("value `{v}` not in the `{attr}` vocabulary"),
                            );
                        }
                    }
                }
            }
        }
    }

    for (name, count) in &doc.foreground.component_counts {
        let path = format!("foreground.counts.{name}");
        if *count == 0 {
            report.push(path.clone(), "foreground/count-zero", "counts must be >= 1");
        }
        if !doc.components.iter().any(|c| &c.name == name) {
            report.push(
                path,
                "foreground/unknown-component",
                format!("counted component `{name}` has no caption"),
            );
        }
    }

    report
}

/// Serialize a valid document to its canonical JSON wire form.
///
/// Refuses invalid documents, returning the validation report. The output is
/// deterministic: `serialize(parse(serialize(doc))) == serialize(doc)`.
pub fn serialize(doc: &MFSCDocument) -> Result<String> {
    let report = validate(doc);
    if !report.is_empty() {
        return Err(Error::DocumentInvalid(report));
    }
    let wire = WireDoc {
        mfsc_version: MFSC_VERSION,
        category: doc.category.clone(),
        summary: doc.summary.clone(),
        background: doc.background.clone(),
        foreground: WireForeground {
            counts: doc.foreground.component_counts.clone(),
            relation_text: doc.foreground.relation_text.clone(),
        },
        components: doc
            .components
            .iter()
            .map(|c| WireComponent {
                name: c.name.clone(),
                attributes: c
                    .attributes
                    .iter()
                    .map(|(k, v)| {
                        (
                            k.clone(),
                            WireAttribute {
                                base_values: v.base_values.clone(),
                                connector: v.connector.as_str().to_string(),
                            },
                        )
                    })
                    .collect(),
                caption_text: c.caption_text.clone(),
            })
            .collect(),
        vocabulary: doc.attribute_vocabulary.clone(),
    };
    Ok(serde_json::to_string(&wire)?)
}
