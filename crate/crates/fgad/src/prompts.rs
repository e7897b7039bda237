//! Multi-level prompt banks.
//!
//! From one caption document we derive prompt templates at three levels
//! (image, foreground, per-component) plus a background normal prompt.
//! Each level carries three polarities:
//!
//! * NHP — normal handcrafted prompts, taken verbatim from the document
//!   (summary / relation text / component captions / background).
//! * AHP — abnormal handcrafted prompts, built by concatenating anomaly
//!   words onto the NHP and by replacing one attribute value at a time with
//!   a different vocabulary value (or a `without <value>` negation when the
//!   vocabulary has no alternative).
//! * ALP — abnormal learnable prompts, where every attribute-value span of
//!   the NHP becomes a learnable placeholder embedding. Component-level
//!   placeholders additionally carry a learnable gate in (0, 1) applied
//!   multiplicatively before encoding (one gate per placeholder).
//!
//! Construction is deterministic in (document, anomaly words, N_ab, seed).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::core::{l2_normalize, FeatVec};
use crate::encoder::TextEncoder;
use crate::error::{Error, Result};
use crate::mfsc::MFSCDocument;
use crate::seeded;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptLevel {
    Image,
    Foreground,
    Background,
    Component(usize),
}

impl PromptLevel {
    pub fn tag(&self) -> String {
        match self {
            PromptLevel::Image => "img".into(),
            PromptLevel::Foreground => "fg".into(),
            PromptLevel::Background => "bg".into(),
            PromptLevel::Component(i) => format!("c{i}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    NormalHandcrafted,
    AbnormalHandcrafted,
    AbnormalLearnable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateToken {
    FixedWord(String),
    Placeholder(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub tokens: Vec<TemplateToken>,
    pub level: PromptLevel,
    pub polarity: Polarity,
}

impl PromptTemplate {
    pub fn has_placeholders(&self) -> bool {
        self.tokens
            .iter()
            .any(|t| matches!(t, TemplateToken::Placeholder(_)))
    }

    pub fn slot_ids(&self) -> Vec<&str> {
        self.tokens
            .iter()
            .filter_map(|t| match t {
                TemplateToken::Placeholder(s) => Some(s.as_str()),
                _ => None,
            })
            .collect()
    }

    /// Human-readable form, placeholders rendered as `[slot]`.
    pub fn render(&self) -> String {
        self.tokens
            .iter()
            .map(|t| match t {
                TemplateToken::FixedWord(w) => w.clone(),
                TemplateToken::Placeholder(s) => format!("[{s}]"),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Templates for one level (image, foreground or a single component).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelTemplates {
    pub level: PromptLevel,
    pub nhp: Vec<PromptTemplate>,
    pub ahp: Vec<PromptTemplate>,
    pub alp: Vec<PromptTemplate>,
}

/// The complete prompt-template set for one category.
///
/// Level order is fixed: `levels[0]` = image, `levels[1]` = foreground,
/// `levels[2 + i]` = component `i`. The background prompt is separate and
/// has only its normal handcrafted form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSet {
    pub nc: usize,
    pub n_ab: usize,
    pub seed: u64,
    pub levels: Vec<LevelTemplates>,
    pub background: PromptTemplate,
}

impl PromptSet {
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, idx: usize) -> &LevelTemplates {
        &self.levels[idx]
    }
}

/// Index into `PromptSet::levels` for a given level.
pub fn level_index(level: PromptLevel) -> usize {
    match level {
        PromptLevel::Image => 0,
        PromptLevel::Foreground => 1,
        PromptLevel::Component(i) => 2 + i,
        PromptLevel::Background => panic!("background is not an indexed level"),
    }
}

/// Learnable state: placeholder embeddings plus raw gate scalars for
/// component-level placeholders. `BTreeMap` keys give the stable parameter
/// ordering required for deterministic training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptParams {
    pub embeddings: BTreeMap<String, Vec<f64>>,
    pub gates: BTreeMap<String, f64>,
}

impl PromptParams {
    /// Effective gate for a slot: `sigmoid(raw)` for gated (component-level)
    /// slots, 1 otherwise.
    pub fn gate(&self, slot: &str) -> f64 {
        match self.gates.get(slot) {
            Some(raw) => sigmoid(*raw),
            None => 1.0,
        }
    }

    /// Stable enumeration of all learnable parameters.
    pub fn ordered_names(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for (slot, emb) in &self.embeddings {
            for i in 0..emb.len() {
                names.push(format!("emb:{slot}[{i}]"));
            }
        }
        for slot in self.gates.keys() {
            names.push(format!("gate:{slot}"));
        }
        names
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(|s| s.to_string()).collect()
}

fn fixed(tokens: &[String]) -> Vec<TemplateToken> {
    tokens
        .iter()
        .map(|w| TemplateToken::FixedWord(w.clone()))
        .collect()
}

/// One replaceable attribute occurrence: which component/attribute it came
/// from and the value text it renders to.
#[derive(Debug, Clone)]
struct AttrSource {
    component: usize,
    attr: String,
    value_tokens: Vec<String>,
    vocab: Vec<String>,
    current: Vec<String>,
}

fn attr_sources(doc: &MFSCDocument, components: &[usize]) -> Vec<AttrSource> {
    let mut out = Vec::new();
    for &ci in components {
        let comp = &doc.components[ci];
        for (attr, value) in &comp.attributes {
            out.push(AttrSource {
                component: ci,
                attr: attr.clone(),
                value_tokens: tokenize(&value.rendered()),
                vocab: doc
                    .attribute_vocabulary
                    .get(attr)
                    .cloned()
                    .unwrap_or_default(),
                current: value.base_values.clone(),
            });
        }
    }
    out
}

/// First occurrence of `needle` as a contiguous run in `haystack`, at or
/// after `from`, skipping starts contained in `claimed`.
fn find_span(haystack: &[String], needle: &[String], claimed: &[(usize, usize)]) -> Option<usize> {
    if needle.is_empty() || needle.len() > haystack.len() {
        return None;
    }
    'outer: for start in 0..=(haystack.len() - needle.len()) {
        for &(cs, ce) in claimed {
            if start < ce && start + needle.len() > cs {
                continue 'outer;
            }
        }
        if haystack[start..start + needle.len()] == *needle {
            return Some(start);
        }
    }
    None
}

fn replacement_value(source: &AttrSource, seed: u64, level_tag: &str) -> Vec<String> {
    let alternatives: Vec<&String> = source
        .vocab
        .iter()
        .filter(|v| !source.current.contains(v))
        .collect();
    if alternatives.is_empty() {
        // Single-value vocabulary: fall back to the negation form.
        let mut toks = vec!["without".to_string()];
        toks.extend(source.value_tokens.clone());
        return toks;
    }
    let mut rng = seeded::rng_for(
        seed,
        &["replace", level_tag, &format!("c{}", source.component), &source.attr],
    );
    let pick = rand::Rng::random_range(&mut rng, 0..alternatives.len());
    tokenize(alternatives[pick])
}

fn build_level(
    level: PromptLevel,
    base_tokens: Vec<String>,
    sources: &[AttrSource],
    anomaly_words: &[String],
    n_ab: usize,
    seed: u64,
) -> LevelTemplates {
    let tag = level.tag();
    let nhp = PromptTemplate {
        tokens: fixed(&base_tokens),
        level,
        polarity: Polarity::NormalHandcrafted,
    };

    let mut ahp = Vec::new();
    // Concatenation: one abnormal variant per anomaly word.
    for word in anomaly_words {
        let mut tokens = base_tokens.clone();
        tokens.extend(tokenize(word));
        ahp.push(PromptTemplate {
            tokens: fixed(&tokens),
            level,
            polarity: Polarity::AbnormalHandcrafted,
        });
    }
    // Replacement: one variant per attribute whose value occurs in the text.
    for source in sources {
        if let Some(start) = find_span(&base_tokens, &source.value_tokens, &[]) {
            let mut tokens = base_tokens[..start].to_vec();
            tokens.extend(replacement_value(source, seed, &tag));
            tokens.extend(base_tokens[start + source.value_tokens.len()..].to_vec());
            ahp.push(PromptTemplate {
                tokens: fixed(&tokens),
                level,
                polarity: Polarity::AbnormalHandcrafted,
            });
        }
    }

    // Learnable prompts: every attribute-value span becomes a placeholder.
    // Spans are claimed left to right so overlapping values cannot collide.
    let mut claimed: Vec<(usize, usize, usize)> = Vec::new(); // (start, end, source idx)
    {
        let mut taken: Vec<(usize, usize)> = Vec::new();
        for (si, source) in sources.iter().enumerate() {
            if let Some(start) = find_span(&base_tokens, &source.value_tokens, &taken) {
                let end = start + source.value_tokens.len();
                taken.push((start, end));
                claimed.push((start, end, si));
            }
        }
        claimed.sort_by_key(|c| c.0);
    }

    let mut alp = Vec::new();
    for variant in 0..n_ab {
        let mut tokens = Vec::new();
        let mut cursor = 0;
        for &(start, end, si) in &claimed {
            tokens.extend(fixed(&base_tokens[cursor..start]));
            let source = &sources[si];
            tokens.push(TemplateToken::Placeholder(format!(
                "{tag}/a{variant}/c{}.{}",
                source.component, source.attr
            )));
            cursor = end;
        }
        tokens.extend(fixed(&base_tokens[cursor..]));
        if claimed.is_empty() {
            // No replaceable value in this text: learn a trailing state slot
            // so the prompt still has an adjustable abnormal direction.
            tokens.push(TemplateToken::Placeholder(format!("{tag}/a{variant}/state")));
        }
        alp.push(PromptTemplate {
            tokens,
            level,
            polarity: Polarity::AbnormalLearnable,
        });
    }

    LevelTemplates {
        level,
        nhp: vec![nhp],
        ahp,
        alp,
    }
}

/// Build the full multi-level prompt set from a caption document.
pub fn build_prompt_set(
    doc: &MFSCDocument,
    anomaly_words: &[String],
    n_ab: usize,
    seed: u64,
) -> Result<PromptSet> {
    if doc.components.is_empty() {
        return Err(Error::Empty("document components"));
    }
    if anomaly_words.is_empty() {
        return Err(Error::Empty("anomaly words"));
    }
    if n_ab == 0 {
        return Err(Error::Invalid {
            context: "prompt set",
            message: "N_ab must be >= 1".into(),
        });
    }

    let nc = doc.components.len();
    let all_components: Vec<usize> = (0..nc).collect();
    let all_sources = attr_sources(doc, &all_components);

    let mut levels = Vec::with_capacity(2 + nc);
    levels.push(build_level(
        PromptLevel::Image,
        tokenize(&doc.summary),
        &all_sources,
        anomaly_words,
        n_ab,
        seed,
    ));
    levels.push(build_level(
        PromptLevel::Foreground,
        tokenize(&doc.foreground.relation_text),
        &all_sources,
        anomaly_words,
        n_ab,
        seed,
    ));
    for ci in 0..nc {
        let sources = attr_sources(doc, &[ci]);
        levels.push(build_level(
            PromptLevel::Component(ci),
            tokenize(&doc.components[ci].caption_text),
            &sources,
            anomaly_words,
            n_ab,
            seed,
        ));
    }

    let background = PromptTemplate {
        tokens: fixed(&tokenize(&doc.background)),
        level: PromptLevel::Background,
        polarity: Polarity::NormalHandcrafted,
    };

    Ok(PromptSet {
        nc,
        n_ab,
        seed,
        levels,
        background,
    })
}

/// Initialize learnable parameters for every placeholder in the set.
///
/// Embeddings are drawn per slot from a seeded normal with std 0.02 (keyed
/// by slot id, so ordering of templates cannot change the values); raw gates
/// start at 0, i.e. an effective gate of 0.5. Only component-level slots are
/// gated.
pub fn init_params(set: &PromptSet, token_dim: usize, seed: u64) -> PromptParams {
    let mut embeddings = BTreeMap::new();
    let mut gates = BTreeMap::new();
    for level in &set.levels {
        let gated = matches!(level.level, PromptLevel::Component(_));
        for template in level.nhp.iter().chain(&level.ahp).chain(&level.alp) {
            for slot in template.slot_ids() {
                embeddings.entry(slot.to_string()).or_insert_with(|| {
                    let mut rng = seeded::rng_for(seed, &["placeholder", slot]);
                    seeded::gaussian_vec(&mut rng, token_dim, 0.02)
                });
                if gated {
                    gates.entry(slot.to_string()).or_insert(0.0);
                }
            }
        }
    }
    PromptParams { embeddings, gates }
}

/// A template lowered to its token-embedding sequence, remembering which
/// positions are placeholders (for gradient backpropagation).
pub struct MaterializedTemplate {
    pub seq: Vec<Vec<f64>>,
    pub slots: Vec<Option<SlotRef>>,
}

#[derive(Debug, Clone)]
pub struct SlotRef {
    pub slot: String,
    pub gated: bool,
}

/// Lower a template to its embedding sequence under the given parameters.
pub fn materialize(
    template: &PromptTemplate,
    params: &PromptParams,
    enc: &dyn TextEncoder,
) -> Result<MaterializedTemplate> {
    let e = enc.token_dim();
    let mut seq = Vec::with_capacity(template.tokens.len());
    let mut slots = Vec::with_capacity(template.tokens.len());
    for token in &template.tokens {
        match token {
            TemplateToken::FixedWord(w) => {
                seq.push(enc.word_embedding(w));
                slots.push(None);
            }
            TemplateToken::Placeholder(slot) => {
                let emb = params.embeddings.get(slot).ok_or_else(|| Error::Invalid {
                    context: "placeholder table",
                    message: format!("missing slot `{slot}`"),
                })?;
                if emb.len() != e {
                    return Err(Error::DimMismatch {
                        context: "placeholder embedding",
                        expected: e,
                        got: emb.len(),
                    });
                }
                let g = params.gate(slot);
                seq.push(emb.iter().map(|v| v * g).collect());
                slots.push(Some(SlotRef {
                    slot: slot.clone(),
                    gated: params.gates.contains_key(slot),
                }));
            }
        }
    }
    Ok(MaterializedTemplate { seq, slots })
}

/// Encode one template to a unit-norm prompt feature.
pub fn encode_template(
    template: &PromptTemplate,
    params: &PromptParams,
    enc: &dyn TextEncoder,
) -> Result<FeatVec> {
    let mat = materialize(template, params, enc)?;
    enc.encode(&mat.seq)
}

/// Encoded feature banks for one level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelBank {
    pub level: PromptLevel,
    pub nhp: Vec<FeatVec>,
    pub ahp: Vec<FeatVec>,
    pub alp: Vec<FeatVec>,
    /// Normalized mean of the NHP features.
    pub mean_normal: FeatVec,
    /// Normalized mean of the AHP and ALP features together.
    pub mean_abnormal: FeatVec,
    /// Plain (un-normalized) mean of the ALP features.
    pub alp_mean_raw: Vec<f64>,
}

/// All encoded banks: per-level features plus the background prompt feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBanks {
    pub levels: Vec<LevelBank>,
    pub background: FeatVec,
}

impl PromptBanks {
    pub fn image(&self) -> &LevelBank {
        &self.levels[0]
    }

    pub fn foreground(&self) -> &LevelBank {
        &self.levels[1]
    }

    pub fn component(&self, i: usize) -> &LevelBank {
        &self.levels[2 + i]
    }
}

fn normalized_mean(features: &[FeatVec]) -> Result<FeatVec> {
    l2_normalize(&FeatVec::new(raw_mean(features)))
}

fn raw_mean(features: &[FeatVec]) -> Vec<f64> {
    let d = features[0].dim();
    let mut mean = vec![0.0; d];
    for f in features {
        for (m, v) in mean.iter_mut().zip(f.as_slice()) {
            *m += v / features.len() as f64;
        }
    }
    mean
}

/// Encode every template and fill the per-level feature banks.
pub fn encode_banks(
    set: &PromptSet,
    params: &PromptParams,
    enc: &dyn TextEncoder,
) -> Result<PromptBanks> {
    let mut levels = Vec::with_capacity(set.levels.len());
    for lt in &set.levels {
        let encode_all = |ts: &[PromptTemplate]| -> Result<Vec<FeatVec>> {
            ts.iter().map(|t| encode_template(t, params, enc)).collect()
        };
        let nhp = encode_all(&lt.nhp)?;
        let ahp = encode_all(&lt.ahp)?;
        let alp = encode_all(&lt.alp)?;
        if nhp.is_empty() || alp.is_empty() {
            return Err(Error::Empty("prompt level bank"));
        }
        let mean_normal = normalized_mean(&nhp)?;
        let abnormal: Vec<FeatVec> = ahp.iter().chain(&alp).cloned().collect();
        let mean_abnormal = normalized_mean(&abnormal)?;
        let alp_mean_raw = raw_mean(&alp);
        levels.push(LevelBank {
            level: lt.level,
            nhp,
            ahp,
            alp,
            mean_normal,
            mean_abnormal,
            alp_mean_raw,
        });
    }
    let background = encode_template(&set.background, params, enc)?;
    Ok(PromptBanks { levels, background })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderSpec, SyntheticEncoder};
    use crate::mfsc;

    fn test_doc() -> MFSCDocument {
        mfsc::parse_document(
            r#"{
                "mfsc_version": 1,
                "category": "widget",
                "summary": "a small widget with a silver round cap on a dark tray",
                "background": "a dark empty tray",
                "foreground": {
                    "counts": {"cap": 1},
                    "relation_text": "one cap centered on the tray"
                },
                "components": [
                    {
                        "name": "cap",
                        "attributes": {
                            "color": {"base_values": ["silver"], "connector": "single"},
                            "shape": {"base_values": ["round"], "connector": "single"}
                        },
                        "caption_text": "a silver round cap"
                    }
                ],
                "vocabulary": {
                    "color": ["silver", "black", "copper"],
                    "shape": ["round"]
                }
            }"#,
        )
        .unwrap()
    }

    fn words() -> Vec<String> {
        vec!["damaged".into(), "broken".into(), "with defect".into()]
    }

    fn enc() -> SyntheticEncoder {
        SyntheticEncoder::new(EncoderSpec {
            seed: 3,
            feature_dim: 16,
            token_embedding_dim: 12,
            noise_sigma: 0.0,
            text_bias: false,
        })
        .unwrap()
    }

    #[test]
    fn component_level_counts_follow_construction_rule() {
        // 1 component, 2 attributes, 3 anomaly words, N_ab = 4.
        let set = build_prompt_set(&test_doc(), &words(), 4, 9).unwrap();
        let comp = set.level(level_index(PromptLevel::Component(0)));
        assert_eq!(comp.nhp.len(), 1);
        assert_eq!(comp.ahp.len(), 5, "3 concatenation + 2 replacement");
        assert_eq!(comp.alp.len(), 4);
        // Every ALP replaces both attribute values with placeholders.
        for alp in &comp.alp {
            assert_eq!(alp.slot_ids().len(), 2);
        }
    }

    #[test]
    fn construction_is_deterministic() {
        let a = build_prompt_set(&test_doc(), &words(), 4, 9).unwrap();
        let b = build_prompt_set(&test_doc(), &words(), 4, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn replacement_variants_differ_in_exactly_one_value() {
        let doc = test_doc();
        let set = build_prompt_set(&doc, &words(), 2, 9).unwrap();
        let comp = set.level(level_index(PromptLevel::Component(0)));
        let nhp_text = comp.nhp[0].render();
        let replacements: Vec<&PromptTemplate> = comp.ahp[words().len()..].iter().collect();
        assert_eq!(replacements.len(), 2);
        // color has alternatives: the value is swapped. shape has a
        // single-value vocabulary: the negation form appears instead.
        let color = replacements[0].render();
        assert!(color.contains("round cap"));
        assert!(!color.contains("silver"));
        assert!(color.contains("black") || color.contains("copper"));
        let shape = replacements[1].render();
        assert!(shape.contains("silver"));
        assert!(shape.contains("without round"));
        assert_ne!(color, nhp_text);
    }

    #[test]
    fn foreground_without_value_spans_gets_state_placeholder() {
        let set = build_prompt_set(&test_doc(), &words(), 2, 9).unwrap();
        let fg = set.level(level_index(PromptLevel::Foreground));
        // relation text names no attribute values: concatenation only.
        assert_eq!(fg.ahp.len(), words().len());
        for alp in &fg.alp {
            let slots = alp.slot_ids();
            assert_eq!(slots.len(), 1);
            assert!(slots[0].ends_with("state"));
        }
    }

    #[test]
    fn only_component_slots_are_gated() {
        let set = build_prompt_set(&test_doc(), &words(), 2, 9).unwrap();
        let enc = enc();
        let params = init_params(&set, enc.token_dim(), 9);
        for slot in params.gates.keys() {
            assert!(slot.starts_with("c0/"), "unexpected gated slot {slot}");
        }
        assert!(!params.embeddings.is_empty());
        // Stable parameter ordering across two constructions.
        let again = init_params(&set, enc.token_dim(), 9);
        assert_eq!(params.ordered_names(), again.ordered_names());
        assert_eq!(params, again);
    }

    #[test]
    fn encode_without_placeholders_ignores_table_and_gates() {
        let set = build_prompt_set(&test_doc(), &words(), 2, 9).unwrap();
        let enc = enc();
        let params = init_params(&set, enc.token_dim(), 9);
        let mut scrambled = params.clone();
        for emb in scrambled.embeddings.values_mut() {
            for v in emb.iter_mut() {
                *v += 10.0;
            }
        }
        for g in scrambled.gates.values_mut() {
            *g = -4.0;
        }
        let nhp = &set.level(0).nhp[0];
        let a = encode_template(nhp, &params, &enc).unwrap();
        let b = encode_template(nhp, &scrambled, &enc).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gate_at_negative_infinity_reduces_to_fixed_words() {
        let set = build_prompt_set(&test_doc(), &words(), 1, 9).unwrap();
        let enc = enc();
        let mut params = init_params(&set, enc.token_dim(), 9);
        for g in params.gates.values_mut() {
            *g = -1e9; // sigmoid underflows to exactly 0
        }
        let alp = &set.level(level_index(PromptLevel::Component(0))).alp[0];
        let with_gate = encode_template(alp, &params, &enc).unwrap();
        let fixed_only = PromptTemplate {
            tokens: alp
                .tokens
                .iter()
                .filter(|t| matches!(t, TemplateToken::FixedWord(_)))
                .cloned()
                .collect(),
            level: alp.level,
            polarity: alp.polarity,
        };
        let reference = encode_template(&fixed_only, &params, &enc).unwrap();
        for (x, y) in with_gate.as_slice().iter().zip(reference.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn encoding_is_bitwise_deterministic() {
        let set = build_prompt_set(&test_doc(), &words(), 2, 9).unwrap();
        let enc = enc();
        let params = init_params(&set, enc.token_dim(), 9);
        let alp = &set.level(2).alp[0];
        assert_eq!(
            encode_template(alp, &params, &enc).unwrap(),
            encode_template(alp, &params, &enc).unwrap()
        );
    }

    #[test]
    fn bank_sizes_and_norms() {
        let doc = test_doc();
        let set = build_prompt_set(&doc, &words(), 4, 9).unwrap();
        let enc = enc();
        let params = init_params(&set, enc.token_dim(), 9);
        let banks = encode_banks(&set, &params, &enc).unwrap();
        assert_eq!(banks.levels.len(), 3);
        assert_eq!(banks.component(0).alp.len(), 4);
        for bank in &banks.levels {
            for f in bank.nhp.iter().chain(&bank.ahp).chain(&bank.alp) {
                assert!((f.norm() - 1.0).abs() < 1e-6);
            }
            assert!((bank.mean_normal.norm() - 1.0).abs() < 1e-6);
            assert!((bank.mean_abnormal.norm() - 1.0).abs() < 1e-6);
        }
        assert!((banks.background.norm() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn perturbing_one_gate_changes_only_that_components_alps() {
        let set = build_prompt_set(&test_doc(), &words(), 2, 9).unwrap();
        let enc = enc();
        let params = init_params(&set, enc.token_dim(), 9);
        let banks = encode_banks(&set, &params, &enc).unwrap();
        let mut nudged = params.clone();
        let slot = nudged.gates.keys().next().unwrap().clone();
        *nudged.gates.get_mut(&slot).unwrap() = 1.3;
        let banks2 = encode_banks(&set, &nudged, &enc).unwrap();
        assert_eq!(banks.image().alp, banks2.image().alp);
        assert_eq!(banks.foreground().alp, banks2.foreground().alp);
        assert_eq!(banks.image().nhp, banks2.image().nhp);
        assert_eq!(banks.background, banks2.background);
        assert_ne!(banks.component(0).alp, banks2.component(0).alp);
        // Only the ALP variant holding that slot moves.
        let changed: Vec<bool> = banks
            .component(0)
            .alp
            .iter()
            .zip(&banks2.component(0).alp)
            .map(|(a, b)| a != b)
            .collect();
        let holding: Vec<bool> = set
            .level(2)
            .alp
            .iter()
            .map(|t| t.slot_ids().contains(&slot.as_str()))
            .collect();
        assert_eq!(changed, holding);
    }

    #[test]
    fn build_rejects_degenerate_inputs() {
        let doc = test_doc();
        assert!(build_prompt_set(&doc, &[], 2, 0).is_err());
        assert!(build_prompt_set(&doc, &words(), 0, 0).is_err());
        let mut empty = doc.clone();
        empty.components.clear();
        assert!(build_prompt_set(&empty, &words(), 2, 0).is_err());
    }
}
