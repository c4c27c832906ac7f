//! Weak labels from transcript text: lexicon entity matching, nearest-match
//! action triplets, VLM image annotation, and vocabulary construction.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{read_to_string, Error, Result};
use crate::transport::{bounded_map, call_with_retry, JsonTransport, RetryPolicy};
use crate::vocab::{normalize_tag, Category, Split, TagEntry};

/// Lowercased alphanumeric runs with their byte spans in `text`.
pub fn tokenize(text: &str) -> Vec<(String, usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, ch) in text.char_indices() {
        match (ch.is_alphanumeric(), start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push((text[s..i].to_lowercase(), s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((text[s..].to_lowercase(), s, text.len()));
    }
    out
}

fn phrase_key(phrase: &str) -> Vec<String> {
    tokenize(phrase).into_iter().map(|t| t.0).collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gazetteer {
    lexicons: BTreeMap<Category, BTreeSet<String>>,
    phrases: HashMap<Vec<String>, (String, Category)>,
    max_words: usize,
    pub source: Option<PathBuf>,
}

impl Gazetteer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `phrase` under `category`; a phrase may belong to one category only.
    pub fn insert(&mut self, category: Category, phrase: &str) -> Result<()> {
        let key = phrase_key(phrase);
        if key.is_empty() {
            return Err(Error::Validation(format!("phrase {phrase:?} has no words")));
        }
        let tag = key.join(" ");
        if let Some((_, prev)) = self.phrases.get(&key) {
            if *prev != category {
                return Err(Error::Validation(format!(
                    "phrase {tag:?} listed as both {prev} and {category}"
                )));
            }
            return Ok(());
        }
        self.max_words = self.max_words.max(key.len());
        self.lexicons
            .entry(category)
            .or_default()
            .insert(tag.clone());
        self.phrases.insert(key, (tag, category));
        Ok(())
    }

    pub fn lexicon(&self, category: Category) -> impl Iterator<Item = &str> {
        self.lexicons
            .get(&category)
            .into_iter()
            .flatten()
            .map(String::as_str)
    }

    pub fn contains(&self, category: Category, phrase: &str) -> bool {
        self.lexicons
            .get(&category)
            .is_some_and(|l| l.contains(&normalize_tag(phrase)))
    }

    pub fn len(&self) -> usize {
        self.phrases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phrases.is_empty()
    }

    fn lookup(&self, words: &[String]) -> Option<&(String, Category)> {
        self.phrases.get(words)
    }
}

/// TSV `category<TAB>phrase`; blank lines and `#` comments ignored.
pub fn parse_gazetteer(text: &str, label: &str) -> Result<Gazetteer> {
    let mut g = Gazetteer::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (cat, phrase) = line
            .split_once('\t')
            .ok_or_else(|| Error::format(label, Some(i + 1), "expected category<TAB>phrase"))?;
        let cat: Category = cat
            .trim()
            .parse()
            .map_err(|e: Error| Error::format(label, Some(i + 1), e.to_string()))?;
        g.insert(cat, phrase)
            .map_err(|e| Error::format(label, Some(i + 1), e.to_string()))?;
    }
    Ok(g)
}

pub fn load_gazetteer(path: &Path) -> Result<Gazetteer> {
    let mut g = parse_gazetteer(&read_to_string(path)?, &path.display().to_string())?;
    g.source = Some(path.to_path_buf());
    Ok(g)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Stoplist(BTreeSet<String>);

impl Stoplist {
    pub fn parse(text: &str) -> Self {
        Self(
            text.lines()
                .filter(|l| !l.starts_with('#'))
                .map(normalize_tag)
                .filter(|l| !l.is_empty())
                .collect(),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::parse(&read_to_string(path)?))
    }

    pub fn contains(&self, tag: &str) -> bool {
        self.0.contains(&normalize_tag(tag))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityMatch {
    pub tag: String,
    pub category: Category,
    /// Byte range in the trimmed sentence.
    pub span: (usize, usize),
}

struct Scan {
    tokens: Vec<(String, usize, usize)>,
    /// (first token, token count, tag, category) in sentence order
    matches: Vec<(usize, usize, String, Category)>,
}

fn scan(sentence: &str, gaz: &Gazetteer) -> Scan {
    let tokens = tokenize(sentence);
    let words: Vec<String> = tokens.iter().map(|t| t.0.clone()).collect();
    let mut matches = Vec::new();
    let mut i = 0;
    while i < words.len() {
        let longest = (1..=gaz.max_words.min(words.len() - i))
            .rev()
            .find_map(|n| gaz.lookup(&words[i..i + n]).map(|m| (n, m)))
            .filter(|(_, (_, c))| *c != Category::Verb);
        match longest {
            Some((n, (tag, cat))) => {
                matches.push((i, n, tag.clone(), *cat));
                i += n;
            }
            None => i += 1,
        }
    }
    Scan { tokens, matches }
}

/// Leftmost-longest, word-aligned, case-insensitive lexicon matches
/// (verbs excluded; they are handled by [`extract_actions`]).
pub fn extract_entities(sentence: &str, gaz: &Gazetteer) -> Vec<EntityMatch> {
    let sentence = sentence.trim();
    let s = scan(sentence, gaz);
    s.matches
        .iter()
        .map(|(i, n, tag, cat)| EntityMatch {
            tag: tag.clone(),
            category: *cat,
            span: (s.tokens[*i].1, s.tokens[i + n - 1].2),
        })
        .collect()
}

const EXCEPTIONS: &[(&str, &str)] = &[
    ("cutting", "cut"),
    ("cuts", "cut"),
    ("putting", "put"),
    ("held", "hold"),
    ("bled", "bleed"),
    ("used", "use"),
    ("using", "use"),
    ("placed", "place"),
    ("placing", "place"),
    ("made", "make"),
    ("making", "make"),
    ("took", "take"),
    ("taken", "take"),
    ("taking", "take"),
    ("freed", "free"),
    ("seen", "see"),
    ("saw", "see"),
];

fn is_vowel(c: u8) -> bool {
    matches!(c, b'a' | b'e' | b'i' | b'o' | b'u')
}

/// Clean up a stem left by stripping `-ed`/`-ing`.
fn restore_stem(stem: &str) -> String {
    let b = stem.as_bytes();
    let n = b.len();
    if n >= 2
        && b[n - 1] == b[n - 2]
        && !is_vowel(b[n - 1])
        && !matches!(b[n - 1], b'l' | b's' | b'z')
    {
        return stem[..n - 1].to_string();
    }
    if ["at", "iz", "bl", "yz"].iter().any(|s| stem.ends_with(s)) {
        return format!("{stem}e");
    }
    stem.to_string()
}

/// Rule-based verb lemma: exceptions table, then `-ies`, sibilant `-es`,
/// `-ed`, `-ing`, and `-s` suffix rules. Unmatched words come back as-is.
pub fn lemmatize_verb(token: &str) -> String {
    let w = token.trim().to_lowercase();
    if let Some((_, l)) = EXCEPTIONS.iter().find(|(f, _)| *f == w) {
        return l.to_string();
    }
    let n = w.len();
    if !w.is_ascii() {
        return w;
    }
    if n > 4 && w.ends_with("ies") {
        return format!("{}y", &w[..n - 3]);
    }
    if n > 4
        && w.ends_with("es")
        && ["ches", "shes", "sses", "xes", "zes"]
            .iter()
            .any(|s| w.ends_with(s))
    {
        return w[..n - 2].to_string();
    }
    if n > 4 && w.ends_with("ed") && !w.ends_with("eed") {
        return restore_stem(&w[..n - 2]);
    }
    if n > 5 && w.ends_with("ing") {
        return restore_stem(&w[..n - 3]);
    }
    if n > 3 && w.ends_with('s') && !["ss", "us", "is"].iter().any(|s| w.ends_with(s)) {
        return w[..n - 1].to_string();
    }
    w
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionTriplet {
    pub instrument: String,
    pub verb: String,
    pub target: String,
    pub sentence_id: usize,
    /// Byte range from the instrument to the end of the target, in the
    /// trimmed sentence.
    pub span: (usize, usize),
}

impl ActionTriplet {
    pub fn composed(&self) -> String {
        format!("{},{},{}", self.instrument, self.verb, self.target)
    }
}

fn verb_lemma(word: &str, gaz: &Gazetteer) -> Option<String> {
    let lemma = lemmatize_verb(word);
    if gaz.contains(Category::Verb, &lemma) {
        return Some(lemma);
    }
    let with_e = format!("{lemma}e");
    gaz.contains(Category::Verb, &with_e).then_some(with_e)
}

/// `<instrument, verb, target>` triplets by nearest match around each verb.
pub fn extract_actions(sentence: &str, gaz: &Gazetteer, sentence_id: usize) -> Vec<ActionTriplet> {
    let sentence = sentence.trim();
    let s = scan(sentence, gaz);
    let mut covered = vec![false; s.tokens.len()];
    for (i, n, _, _) in &s.matches {
        covered[*i..i + n].iter_mut().for_each(|c| *c = true);
    }
    let mut out = Vec::new();
    for (ti, (word, _, _)) in s.tokens.iter().enumerate() {
        if covered[ti] {
            continue;
        }
        let Some(verb) = verb_lemma(word, gaz) else {
            continue;
        };
        let instrument = s
            .matches
            .iter()
            .rev()
            .find(|(i, n, _, c)| i + n <= ti && *c == Category::Instrument);
        let target = s
            .matches
            .iter()
            .find(|(i, _, _, c)| *i > ti && matches!(c, Category::Target | Category::Organ));
        if let (Some(ins), Some(tgt)) = (instrument, target) {
            out.push(ActionTriplet {
                instrument: ins.2.clone(),
                verb,
                target: tgt.2.clone(),
                sentence_id,
                span: (s.tokens[ins.0].1, s.tokens[tgt.0 + tgt.1 - 1].2),
            });
        }
    }
    out
}

/// Every tag a sentence yields: entities, triplet components, and composed
/// triplets, first occurrence order, no duplicates.
pub fn tag_sentence(sentence: &str, gaz: &Gazetteer) -> Vec<(String, Category)> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    let mut push = |tag: String, cat: Category| {
        if seen.insert(tag.clone()) {
            out.push((tag, cat));
        }
    };
    let entities = extract_entities(sentence, gaz);
    for e in &entities {
        push(e.tag.clone(), e.category);
    }
    for t in extract_actions(sentence, gaz, 0) {
        let target_cat = entities
            .iter()
            .find(|e| e.tag == t.target)
            .map_or(Category::Target, |e| e.category);
        push(t.instrument.clone(), Category::Instrument);
        push(t.verb.clone(), Category::Verb);
        push(t.target.clone(), target_cat);
        push(t.composed(), Category::Triplet);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VlmAnnotation {
    pub image_ref: String,
    pub tags: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image_ref: String,
    pub attempts: u32,
    pub annotation: Option<VlmAnnotation>,
    pub error: Option<String>,
}

fn parse_vlm_reply(image_ref: &str, reply: &Value) -> Result<VlmAnnotation> {
    let obj = reply
        .as_object()
        .ok_or_else(|| Error::Client("reply is not a JSON object".into()))?;
    if let Some(msg) = obj.get("error") {
        let msg = msg.as_str().map_or_else(|| msg.to_string(), str::to_string);
        return Err(Error::Client(format!("service error: {msg}")));
    }
    let tags = match obj.get("tags") {
        Some(Value::Array(a)) => a
            .iter()
            .map(|t| {
                t.as_str()
                    .map(normalize_tag)
                    .ok_or_else(|| Error::Client("non-string tag".into()))
            })
            .collect::<Result<Vec<_>>>()?,
        Some(_) => return Err(Error::Client("\"tags\" is not an array".into())),
        None => return Err(Error::Client("reply has no \"tags\"".into())),
    };
    let mut seen = BTreeSet::new();
    let tags: Vec<String> = tags
        .into_iter()
        .filter(|t| !t.is_empty() && seen.insert(t.clone()))
        .collect();
    let caption = match obj.get("caption") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) if s.trim().is_empty() => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => return Err(Error::Client("\"caption\" is not a string".into())),
    };
    if tags.is_empty() && caption.is_none() {
        return Err(Error::Client("reply has neither tags nor caption".into()));
    }
    Ok(VlmAnnotation {
        image_ref: image_ref.to_string(),
        tags,
        caption,
    })
}

/// One request per image; failures are recorded per image.
pub fn annotate_images(
    refs: &[String],
    client: &dyn JsonTransport,
    vocab_hint: Option<&[String]>,
    policy: &RetryPolicy,
) -> Vec<AnnotationRecord> {
    bounded_map(refs, policy.concurrency, |r| {
        let mut req = json!({ "image_ref": r });
        if let Some(h) = vocab_hint {
            req["candidate_tags"] = json!(h);
        }
        let (reply, attempts) = call_with_retry(client, &req, policy);
        let parsed = reply.and_then(|v| parse_vlm_reply(r, &v));
        if let Err(e) = &parsed {
            tracing::warn!(image = %r, attempts, error = %e, "annotation failed");
        }
        let (annotation, error) = match parsed {
            Ok(a) => (Some(a), None),
            Err(e) => (None, Some(e.to_string())),
        };
        AnnotationRecord {
            image_ref: r.clone(),
            attempts,
            annotation,
            error,
        }
    })
}

/// A tag seen in one source (sentence or image).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct TagObservation {
    pub source: String,
    pub tag: String,
    pub category: Category,
}

pub fn entity_observations(source: &str, matches: &[EntityMatch]) -> Vec<TagObservation> {
    matches
        .iter()
        .map(|m| TagObservation {
            source: source.to_string(),
            tag: m.tag.clone(),
            category: m.category,
        })
        .collect()
}

/// Components and composed form of each triplet. `target_category` decides
/// whether a target is an organ or a generic target.
pub fn triplet_observations(
    source: &str,
    triplets: &[ActionTriplet],
    gaz: &Gazetteer,
) -> Vec<TagObservation> {
    let obs = |tag: &str, category| TagObservation {
        source: source.to_string(),
        tag: tag.to_string(),
        category,
    };
    triplets
        .iter()
        .flat_map(|t| {
            let tc = if gaz.contains(Category::Organ, &t.target) {
                Category::Organ
            } else {
                Category::Target
            };
            [
                obs(&t.instrument, Category::Instrument),
                obs(&t.verb, Category::Verb),
                obs(&t.target, tc),
                obs(&t.composed(), Category::Triplet),
            ]
        })
        .collect()
}

pub fn vlm_observations(annotations: &[VlmAnnotation]) -> Vec<TagObservation> {
    annotations
        .iter()
        .flat_map(|a| {
            a.tags.iter().map(|t| TagObservation {
                source: a.image_ref.clone(),
                tag: t.clone(),
                category: Category::Other,
            })
        })
        .collect()
}

/// Vocabulary from tag observations. Frequency counts distinct sources; a
/// tag's category is its most frequent one (ties to the earlier category).
/// Kept tags have frequency >= `min_freq` and are not stoplisted; order is
/// frequency desc, then name.
pub fn build_vocabulary(
    entities: impl IntoIterator<Item = TagObservation>,
    triplets: impl IntoIterator<Item = TagObservation>,
    vlm: impl IntoIterator<Item = TagObservation>,
    min_freq: usize,
    stoplist: &Stoplist,
    split: Split,
) -> Vec<TagEntry> {
    let mut sources: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    let mut cats: BTreeMap<String, BTreeMap<Category, BTreeSet<String>>> = BTreeMap::new();
    for o in entities.into_iter().chain(triplets).chain(vlm) {
        let tag = normalize_tag(&o.tag);
        if tag.is_empty() {
            continue;
        }
        sources
            .entry(tag.clone())
            .or_default()
            .insert(o.source.clone());
        cats.entry(tag)
            .or_default()
            .entry(o.category)
            .or_default()
            .insert(o.source);
    }
    let mut kept: Vec<(usize, String)> = sources
        .into_iter()
        .map(|(t, s)| (s.len(), t))
        .filter(|(f, t)| *f >= min_freq && !stoplist.contains(t))
        .collect();
    kept.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
    kept.into_iter()
        .map(|(_, t)| {
            let category = cats[&t]
                .iter()
                .max_by(|a, b| a.1.len().cmp(&b.1.len()).then_with(|| b.0.cmp(a.0)))
                .map(|(c, _)| *c)
                .expect("observed tag has a category");
            TagEntry::new(&t, category, split)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaz() -> Gazetteer {
        parse_gazetteer(
            "instrument\tgrasper\ninstrument\thook\nverb\tdissect\nverb\tcoagulate\nverb\tdivide\nverb\tgrasp\nverb\tcut\n\
             organ\tgallbladder\ntarget\tcystic artery\ntarget\tbile duct\ntarget\tcommon bile duct\n",
            "mem",
        )
        .unwrap()
    }

    #[test]
    fn lemma_examples() {
        for (w, l) in [
            ("dissects", "dissect"),
            ("grasping", "grasp"),
            ("cutting", "cut"),
            ("clipped", "clip"),
            ("coagulates", "coagulate"),
            ("coagulated", "coagulate"),
            ("cauterizing", "cauterize"),
            ("retracts", "retract"),
            ("clutches", "clutch"),
            ("carries", "carry"),
            ("pulled", "pull"),
            ("is", "is"),
            ("grasp", "grasp"),
        ] {
            assert_eq!(lemmatize_verb(w), l, "{w}");
        }
    }

    #[test]
    fn entity_longest_match() {
        let m = extract_entities("Clip the Common Bile Duct now", &gaz());
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].tag, "common bile duct");
        assert_eq!(m[0].span, (9, 25));
    }

    #[test]
    fn entity_requires_word_boundary() {
        assert!(extract_entities("the gallbladders", &gaz()).is_empty());
        assert!(extract_entities("nothing here", &gaz()).is_empty());
    }

    #[test]
    fn grasper_dissects_gallbladder_triplet() {
        let t = extract_actions("the grasper dissects the gallbladder", &gaz(), 0);
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].composed(), "grasper,dissect,gallbladder");
    }

    #[test]
    fn no_instrument_no_triplet() {
        assert!(extract_actions("the gallbladder is dissected", &gaz(), 0).is_empty());
    }

    #[test]
    fn coordinated_verbs_share_instrument_and_target() {
        let t: Vec<String> = extract_actions(
            "the hook coagulates and divides the cystic artery",
            &gaz(),
            3,
        )
        .iter()
        .map(ActionTriplet::composed)
        .collect();
        assert_eq!(
            t,
            vec!["hook,coagulate,cystic artery", "hook,divide,cystic artery"]
        );
    }

    #[test]
    fn conflicting_categories_rejected() {
        let err = parse_gazetteer("organ\tliver\ntarget\tLiver\n", "g.tsv").unwrap_err();
        assert!(matches!(err, Error::Format { line: Some(2), .. }));
    }

    #[test]
    fn vocabulary_min_freq_is_inclusive() {
        let obs = |s: &str, t: &str| TagObservation {
            source: s.into(),
            tag: t.into(),
            category: Category::Organ,
        };
        let v = build_vocabulary(
            vec![
                obs("a", "liver"),
                obs("b", "liver"),
                obs("c", "liver"),
                obs("a", "liver"),
                obs("a", "fat"),
                obs("b", "fat"),
            ],
            vec![],
            vec![],
            3,
            &Stoplist::default(),
            Split::Both,
        );
        assert_eq!(
            v.iter().map(|e| e.name.as_str()).collect::<Vec<_>>(),
            vec!["liver"]
        );
    }
}
