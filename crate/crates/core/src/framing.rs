//! Design framing: excluding attributes that conflict with the scene and principle.
//!
//! The default backend is a keyword rule table (`data/filter_rules.json`).
//! A rule fires when its keyword occurs in the scene or principle text and its
//! priority is at most the requested strictness, so raising strictness only
//! ever adds exclusions.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::backend::BackendError;
use crate::design_space::{dim, AttributeId, DesignSpace, DIMENSION_COUNT};
use crate::error::{Error, Result};
use crate::prompt::render_filter_prompt;

const DEFAULT_RULES_JSON: &str = include_str!("../data/filter_rules.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterResult {
    pub included: BTreeSet<AttributeId>,
    pub excluded: BTreeSet<AttributeId>,
    pub strictness: f64,
}

impl FilterResult {
    /// Everything included.
    pub fn unfiltered() -> Self {
        Self {
            included: DesignSpace::canonical().all_attributes().collect(),
            excluded: BTreeSet::new(),
            strictness: 0.0,
        }
    }

    pub fn from_excluded(excluded: BTreeSet<AttributeId>, strictness: f64) -> Result<Self> {
        let included = DesignSpace::canonical()
            .all_attributes()
            .filter(|a| !excluded.contains(a))
            .collect();
        let result = Self { included, excluded, strictness };
        result.validate()?;
        Ok(result)
    }

    pub fn validate(&self) -> Result<()> {
        let space = DesignSpace::canonical();
        if !(0.0..=1.0).contains(&self.strictness) {
            return Err(Error::InvalidStrictness(self.strictness));
        }
        for id in self.included.iter().chain(&self.excluded) {
            if !id.is_valid() {
                return Err(Error::UnknownAttribute(id.to_string()));
            }
        }
        if self.included.intersection(&self.excluded).next().is_some() {
            return Err(Error::Schema("filter sets overlap".into()));
        }
        if self.included.len() + self.excluded.len() != space.all_attributes().count() {
            return Err(Error::Schema("filter sets do not cover the design space".into()));
        }
        for d in 0..DIMENSION_COUNT {
            if self.included_in(d).is_empty() {
                return Err(Error::Schema(format!(
                    "dimension `{}` has no included attribute",
                    space.dimension(d).name
                )));
            }
        }
        Ok(())
    }

    /// Included attribute indices of dimension `d`, ascending.
    pub fn included_in(&self, d: usize) -> Vec<usize> {
        self.included
            .iter()
            .filter(|id| id.dimension == d)
            .map(|id| id.attribute)
            .collect()
    }

    /// Designer override: flips one attribute. Refuses to exclude the last
    /// included attribute of a dimension.
    pub fn toggle(&mut self, id: AttributeId) -> Result<()> {
        if !id.is_valid() {
            return Err(Error::UnknownAttribute(id.to_string()));
        }
        if self.excluded.remove(&id) {
            self.included.insert(id);
        } else {
            if self.included_in(id.dimension).len() == 1 {
                return Err(Error::Schema(format!(
                    "cannot exclude the last attribute of `{}`",
                    id.dimension_name()
                )));
            }
            self.included.remove(&id);
            self.excluded.insert(id);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterRequest {
    pub garment_type: String,
    pub scene: String,
    pub principle: String,
    pub strictness: f64,
}

impl FilterRequest {
    fn garment_type_id(&self) -> Result<AttributeId> {
        DesignSpace::canonical()
            .find_attribute(dim::TYPE, &self.garment_type)
            .ok_or_else(|| Error::InvalidGarmentType(self.garment_type.clone()))
    }
}

/// Pluggable attribute filter.
pub trait FramingBackend: Send + Sync {
    fn filter(&self, request: &FilterRequest) -> Result<FilterResult, BackendError>;

    /// Expands a scene into a background description for scene rendering.
    fn describe_scene(&self, scene: &str) -> Result<String, BackendError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterRule {
    /// Word or phrase matched against the scene and principle text.
    pub keyword: String,
    /// `"Dimension:Attribute"` or `"tag:<tag>"`.
    pub target: String,
    /// Rule fires when `priority <= strictness`. Must be in `(0, 1]`.
    pub priority: f64,
}

#[derive(Debug, Deserialize)]
struct RuleFile {
    schema_version: u32,
    rules: Vec<FilterRule>,
}

fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn contains_phrase(tokens: &[String], phrase: &[String]) -> bool {
    !phrase.is_empty() && tokens.windows(phrase.len()).any(|w| w == phrase)
}

/// Keyword-rule filter.
#[derive(Debug, Clone)]
pub struct RuleBasedFramer {
    rules: Vec<(Vec<String>, Vec<AttributeId>, f64)>,
}

impl RuleBasedFramer {
    pub fn from_rules(rules: &[FilterRule]) -> Result<Self> {
        let space = DesignSpace::canonical();
        let mut compiled = Vec::with_capacity(rules.len());
        for rule in rules {
            if !(rule.priority > 0.0 && rule.priority <= 1.0) {
                return Err(Error::Schema(format!(
                    "rule `{}` priority {} outside (0, 1]",
                    rule.keyword, rule.priority
                )));
            }
            let targets: Vec<AttributeId> = match rule.target.strip_prefix("tag:") {
                Some(tag) => space.tagged(tag).collect(),
                None => vec![space.lookup(&rule.target)?],
            };
            if targets.is_empty() {
                return Err(Error::Schema(format!("rule target `{}` matches nothing", rule.target)));
            }
            let keyword = tokenize(&rule.keyword);
            if keyword.is_empty() {
                return Err(Error::Schema("empty rule keyword".into()));
            }
            compiled.push((keyword, targets, rule.priority));
        }
        Ok(Self { rules: compiled })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: RuleFile = serde_json::from_str(text)?;
        if file.schema_version != 1 {
            return Err(Error::Schema(format!(
                "unsupported filter_rules schema_version {}",
                file.schema_version
            )));
        }
        Self::from_rules(&file.rules)
    }

    /// The bundled rule table.
    pub fn default_rules() -> Self {
        Self::from_json(DEFAULT_RULES_JSON).expect("bundled filter_rules.json is valid")
    }

    pub fn apply(&self, request: &FilterRequest) -> Result<FilterResult> {
        if !(0.0..=1.0).contains(&request.strictness) {
            return Err(Error::InvalidStrictness(request.strictness));
        }
        let protected = request.garment_type_id()?;
        let mut tokens = tokenize(&request.scene);
        tokens.extend(tokenize(&request.principle));

        // Lowest priority at which each attribute is excluded.
        let mut fired: BTreeMap<AttributeId, f64> = BTreeMap::new();
        for (keyword, targets, priority) in &self.rules {
            if *priority > request.strictness || !contains_phrase(&tokens, keyword) {
                continue;
            }
            for &id in targets {
                if id == protected {
                    continue;
                }
                let entry = fired.entry(id).or_insert(*priority);
                *entry = entry.min(*priority);
            }
        }

        // Relax exclusions by descending priority until each dimension keeps one attribute.
        let space = DesignSpace::canonical();
        for d in 0..DIMENSION_COUNT {
            let in_dim: Vec<(AttributeId, f64)> = fired
                .iter()
                .filter(|(id, _)| id.dimension == d)
                .map(|(&id, &p)| (id, p))
                .collect();
            if in_dim.len() == space.attribute_count(d) {
                let (relax, _) = in_dim
                    .iter()
                    .copied()
                    .max_by(|a, b| a.1.total_cmp(&b.1).then(a.0.attribute.cmp(&b.0.attribute)))
                    .expect("dimension is nonempty");
                fired.remove(&relax);
            }
        }

        FilterResult::from_excluded(fired.into_keys().collect(), request.strictness)
    }
}

impl Default for RuleBasedFramer {
    fn default() -> Self {
        Self::default_rules()
    }
}

impl FramingBackend for RuleBasedFramer {
    fn filter(&self, request: &FilterRequest) -> Result<FilterResult, BackendError> {
        self.apply(request).map_err(|e| BackendError::Rejected(e.to_string()))
    }

    fn describe_scene(&self, scene: &str) -> Result<String, BackendError> {
        Ok(format!(
            "A {} scene as a softly lit backdrop for a full-body portrait, uncluttered and evenly exposed.",
            scene.trim()
        ))
    }
}

/// Text completion seam for language-model framing.
pub trait LlmClient: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String, BackendError>;
}

/// Framing backend that asks a language model, one dimension at a time, which
/// attributes to keep.
pub struct LlmFramer<C> {
    client: C,
}

impl<C: LlmClient> LlmFramer<C> {
    pub fn new(client: C) -> Self {
        Self { client }
    }

    /// Number of words the model is asked to keep for a dimension.
    pub fn keep_count(attribute_count: usize, strictness: f64) -> usize {
        let keep = ((1.0 - strictness) * attribute_count as f64).round() as usize;
        keep.clamp(1, attribute_count)
    }

    fn prompt_for(&self, d: usize, request: &FilterRequest) -> String {
        let space = DesignSpace::canonical();
        let dimension = space.dimension(d);
        let words: Vec<&str> = dimension.attributes.iter().map(|a| a.name.as_str()).collect();
        let mut prompt = render_filter_prompt(
            &dimension.name,
            Self::keep_count(words.len(), request.strictness),
            &request.scene,
            &request.garment_type,
            &request.principle,
        );
        prompt.push_str("\nWords: ");
        prompt.push_str(&words.join(", "));
        prompt
    }
}

impl<C: LlmClient> FramingBackend for LlmFramer<C> {
    fn filter(&self, request: &FilterRequest) -> Result<FilterResult, BackendError> {
        let space = DesignSpace::canonical();
        let protected = request
            .garment_type_id()
            .map_err(|e| BackendError::Rejected(e.to_string()))?;
        let mut excluded = BTreeSet::new();
        if request.strictness > 0.0 {
            for d in 0..DIMENSION_COUNT {
                let reply = self.client.complete(&self.prompt_for(d, request))?;
                let reply_tokens = tokenize(&reply);
                let kept: BTreeSet<usize> = space
                    .dimension(d)
                    .attributes
                    .iter()
                    .enumerate()
                    .filter(|(_, a)| contains_phrase(&reply_tokens, &tokenize(&a.name)))
                    .map(|(i, _)| i)
                    .collect();
                if kept.is_empty() {
                    return Err(BackendError::Malformed(format!(
                        "reply for `{}` names no attribute",
                        space.dimension(d).name
                    )));
                }
                for a in 0..space.attribute_count(d) {
                    let id = AttributeId::new_unchecked(d, a);
                    if !kept.contains(&a) && id != protected {
                        excluded.insert(id);
                    }
                }
            }
        }
        FilterResult::from_excluded(excluded, request.strictness)
            .map_err(|e| BackendError::Malformed(e.to_string()))
    }

    fn describe_scene(&self, scene: &str) -> Result<String, BackendError> {
        self.client.complete(&crate::prompt::render_scene_prompt(scene))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterOutcome {
    pub result: FilterResult,
    /// True when the requested backend failed and the rule table answered instead.
    pub fallback: bool,
}

/// Filters the design space through `backend`, falling back to the bundled
/// rule table if the backend is unavailable or returns an invalid result.
pub fn filter_attributes(
    garment_type: &str,
    scene: &str,
    principle: &str,
    strictness: f64,
    backend: &dyn FramingBackend,
) -> Result<FilterOutcome> {
    if !(0.0..=1.0).contains(&strictness) {
        return Err(Error::InvalidStrictness(strictness));
    }
    let request = FilterRequest {
        garment_type: garment_type.to_string(),
        scene: scene.to_string(),
        principle: principle.to_string(),
        strictness,
    };
    let protected = request.garment_type_id()?;
    match backend.filter(&request) {
        Ok(result) if result.validate().is_ok() && result.included.contains(&protected) => {
            Ok(FilterOutcome { result, fallback: false })
        }
        _ => Ok(FilterOutcome {
            result: RuleBasedFramer::default_rules().apply(&request)?,
            fallback: true,
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn id(q: &str) -> AttributeId {
        DesignSpace::canonical().lookup(q).unwrap()
    }

    fn run(scene: &str, principle: &str, s: f64) -> FilterResult {
        filter_attributes("Shirt", scene, principle, s, &RuleBasedFramer::default_rules())
            .unwrap()
            .result
    }

    #[test]
    fn zero_strictness_excludes_nothing() {
        let r = run("frozen winter formal business", "minimalist formal", 0.0);
        assert!(r.excluded.is_empty());
        assert_eq!(r.included.len(), 51);
    }

    #[test]
    fn formal_principle_drops_playful_patterns() {
        let r = run("office", "formal attire", 0.8);
        assert!(r.excluded.contains(&id("Pattern Style:Dot")));
        assert!(r.excluded.contains(&id("Pattern Style:Number and Letter")));
    }

    #[test]
    fn frozen_winter_scene() {
        let r = run("frozen winter", "", 0.8);
        assert!(r.excluded.contains(&id("Sleeve Length:Sleeveless")));
        assert!(r.included.contains(&id("Material:Woolen")));
    }

    #[test]
    fn chosen_type_is_protected() {
        // "summer" excludes cold-weather types, but a Coat was asked for.
        let r = filter_attributes("Coat", "summer", "", 1.0, &RuleBasedFramer::default_rules())
            .unwrap()
            .result;
        assert!(r.included.contains(&id("Type:Coat")));
        assert!(r.excluded.contains(&id("Type:Jacket")));
    }

    #[test]
    fn word_boundaries_respected() {
        // "informal" must not trigger the "formal" rules.
        let r = run("", "informal", 1.0);
        assert!(r.excluded.is_empty());
    }

    #[test]
    fn relaxation_keeps_one_attribute() {
        let rules = vec![
            FilterRule { keyword: "x".into(), target: "Sleeve Length:Sleeveless".into(), priority: 0.2 },
            FilterRule { keyword: "x".into(), target: "Sleeve Length:Short".into(), priority: 0.3 },
            FilterRule { keyword: "x".into(), target: "Sleeve Length:Long".into(), priority: 0.9 },
        ];
        let framer = RuleBasedFramer::from_rules(&rules).unwrap();
        let req = |s| FilterRequest {
            garment_type: "Shirt".into(),
            scene: "x".into(),
            principle: String::new(),
            strictness: s,
        };
        let r = framer.apply(&req(1.0)).unwrap();
        assert_eq!(r.included_in(1), vec![2]);
        let r = framer.apply(&req(0.5)).unwrap();
        assert_eq!(r.included_in(1), vec![2]);
    }

    #[test]
    fn invalid_inputs() {
        let b = RuleBasedFramer::default_rules();
        assert!(matches!(
            filter_attributes("Shirt", "", "", 1.5, &b),
            Err(Error::InvalidStrictness(_))
        ));
        assert!(matches!(
            filter_attributes("Kilt", "", "", 0.5, &b),
            Err(Error::InvalidGarmentType(_))
        ));
        let bad = [FilterRule { keyword: "a".into(), target: "tag:none".into(), priority: 0.5 }];
        assert!(RuleBasedFramer::from_rules(&bad).is_err());
        let bad = [FilterRule { keyword: "a".into(), target: "Type:Shirt".into(), priority: 0.0 }];
        assert!(RuleBasedFramer::from_rules(&bad).is_err());
    }

    struct Down;
    impl FramingBackend for Down {
        fn filter(&self, _: &FilterRequest) -> Result<FilterResult, BackendError> {
            Err(BackendError::Unavailable("offline".into()))
        }
        fn describe_scene(&self, _: &str) -> Result<String, BackendError> {
            Err(BackendError::Unavailable("offline".into()))
        }
    }

    #[test]
    fn unavailable_backend_falls_back() {
        let out = filter_attributes("Shirt", "frozen winter", "", 0.8, &Down).unwrap();
        assert!(out.fallback);
        assert!(out.result.excluded.contains(&id("Sleeve Length:Sleeveless")));
    }

    struct Scripted;
    impl LlmClient for Scripted {
        fn complete(&self, prompt: &str) -> Result<String, BackendError> {
            // Keeps the first word of the list for every dimension.
            let words = prompt.rsplit_once("Words: ").unwrap().1;
            let first = words.split(", ").next().unwrap();
            Ok(format!("1. {first}: fits the scene."))
        }
    }

    #[test]
    fn llm_framer_parses_replies() {
        let framer = LlmFramer::new(Scripted);
        let out = filter_attributes("Hoodie", "campus", "casual", 0.9, &framer).unwrap();
        assert!(!out.fallback);
        assert_eq!(out.result.included_in(1), vec![0]);
        // Chosen type survives even though the model kept "Shirt".
        assert_eq!(out.result.included_in(0), vec![0, 5]);
        assert_eq!(LlmFramer::<Scripted>::keep_count(7, 0.8), 1);
        assert_eq!(LlmFramer::<Scripted>::keep_count(9, 0.0), 9);
    }

    #[test]
    fn toggle_respects_last_attribute() {
        let mut r = run("frozen winter", "", 0.8);
        let long = id("Sleeve Length:Long");
        assert!(r.toggle(long).is_err());
        let sleeveless = id("Sleeve Length:Sleeveless");
        r.toggle(sleeveless).unwrap();
        assert!(r.included.contains(&sleeveless));
        r.validate().unwrap();
    }

    const WORDS: &[&str] = &[
        "formal", "winter", "summer", "sport", "minimalist", "office", "beach", "frozen",
        "casual", "travel", "functional", "comfortable", "durable", "outdoor", "resort",
    ];

    proptest! {
        #[test]
        fn monotone_in_strictness(
            picks in proptest::collection::vec(0..WORDS.len(), 0..6),
            s1 in 0.0f64..=1.0,
            s2 in 0.0f64..=1.0,
            ty in 0usize..7,
        ) {
            let (lo, hi) = if s1 <= s2 { (s1, s2) } else { (s2, s1) };
            let text: Vec<&str> = picks.iter().map(|&i| WORDS[i]).collect();
            let scene = text.join(" ");
            let framer = RuleBasedFramer::default_rules();
            let garment = DesignSpace::canonical().dimension(0).attributes[ty].name.clone();
            let req = |s| FilterRequest {
                garment_type: garment.clone(),
                scene: scene.clone(),
                principle: "formal".into(),
                strictness: s,
            };
            let a = framer.apply(&req(lo)).unwrap();
            let b = framer.apply(&req(hi)).unwrap();
            prop_assert!(a.excluded.is_subset(&b.excluded));
            for d in 0..DIMENSION_COUNT {
                prop_assert!(!b.included_in(d).is_empty());
            }
        }
    }
}
