mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;
use surgtag::data_engine::*;
use surgtag::label_engine::*;
use surgtag::vocab::{normalize_tag, Category};

use common::corpus;
use common::corpus::gazetteer as corpus_gazetteer;

#[test]
fn grasper_dissects_gallbladder() {
    let gaz = corpus_gazetteer();
    let t = extract_actions("the grasper dissects the gallbladder", &gaz, 0);
    assert_eq!(t.len(), 1);
    assert_eq!(
        (
            t[0].instrument.as_str(),
            t[0].verb.as_str(),
            t[0].target.as_str()
        ),
        ("grasper", "dissect", "gallbladder")
    );
    assert_eq!(t[0].composed(), "grasper,dissect,gallbladder");
    let tags: Vec<String> = tag_sentence("the grasper dissects the gallbladder", &gaz)
        .into_iter()
        .map(|(t, _)| t)
        .collect();
    assert!(tags.contains(&"grasper,dissect,gallbladder".to_string()));
    assert!(tags.contains(&"dissect".to_string()));
}

#[test]
fn golden_vocabulary_from_library() {
    assert_eq!(corpus::vocabulary_tsv(), corpus::read("golden/vocab.tsv"));
    let stop = Stoplist::load(&common::corpus_dir().join("stoplist.txt")).unwrap();
    assert!(corpus::vocabulary(1, &stop)
        .iter()
        .all(|e| e.name != "abdominal wall"));
}

#[test]
fn golden_dataset_from_library() {
    let (samples, stats) = corpus::dataset();
    assert_eq!(
        to_jsonl(&samples).unwrap(),
        corpus::read("golden/dataset.jsonl")
    );
    assert_eq!(stats.samples_out, samples.len());
    let vocab = corpus::golden_vocab();
    for s in &samples {
        s.validate().unwrap();
        assert!(s.tags.iter().all(|t| vocab.index_of(t).is_some()));
    }
}

#[test]
fn dataset_roundtrips_through_jsonl() {
    let path = common::corpus_dir().join("golden/dataset.jsonl");
    let samples = read_dataset(&path).unwrap();
    assert!(!samples.is_empty());
    assert_eq!(
        to_jsonl(&samples).unwrap(),
        std::fs::read_to_string(&path).unwrap()
    );
}

#[test]
fn stoplisted_nonvisual_segments_are_dropped() {
    let filter = StopPhraseFilter::load(&common::corpus_dir().join("stop_phrases.txt")).unwrap();
    assert!(!filter.is_visual("This slide shows the anatomy of the cystic artery."));
    assert!(filter.is_visual("The hook dissects the peritoneum over the cystic duct."));
}

#[test]
fn organ_targets_keep_their_category() {
    let gaz = corpus_gazetteer();
    let t = extract_actions("the hook dissects the liver", &gaz, 3);
    let obs = triplet_observations("s", &t, &gaz);
    let liver = obs.iter().find(|o| o.tag == "liver").unwrap();
    assert_eq!(liver.category, Category::Organ);
    let t = extract_actions("the hook dissects the peritoneum", &gaz, 3);
    let obs = triplet_observations("s", &t, &gaz);
    assert_eq!(
        obs.iter().find(|o| o.tag == "peritoneum").unwrap().category,
        Category::Target
    );
}

fn segment(start: f64, end: f64) -> TranscriptSegment {
    TranscriptSegment {
        video_id: "v".into(),
        index: 0,
        start_s: start,
        end_s: end,
        text: String::new(),
    }
}

fn word() -> impl Strategy<Value = String> {
    "[a-z]{1,8}"
}

proptest! {
    #[test]
    fn tokens_are_lowercase_alphanumeric_spans(text in "[A-Za-z0-9 ,.;'-]{0,60}") {
        for (tok, s, e) in tokenize(&text) {
            prop_assert_eq!(&tok, &text[s..e].to_lowercase());
            prop_assert!(tok.chars().all(char::is_alphanumeric));
        }
    }

    #[test]
    fn normalize_is_idempotent(text in "[A-Za-z \t]{0,40}") {
        let once = normalize_tag(&text);
        prop_assert_eq!(normalize_tag(&once), once);
    }

    #[test]
    fn entity_matches_are_ordered_word_aligned_and_known(
        words in prop::collection::vec(prop_oneof![
            Just("grasper".to_string()), Just("Cystic".to_string()), Just("duct".to_string()),
            Just("liver".to_string()), Just("abdominal".to_string()), Just("wall".to_string()), word()
        ], 0..12)
    ) {
        let gaz = corpus_gazetteer();
        let sentence = words.join(" ");
        let m = extract_entities(&sentence, &gaz);
        for w in m.windows(2) {
            prop_assert!(w[0].span.1 <= w[1].span.0);
        }
        for e in &m {
            prop_assert!(gaz.contains(e.category, &e.tag));
            prop_assert_eq!(normalize_tag(&sentence[e.span.0..e.span.1]), e.tag.clone());
        }
    }

    #[test]
    fn triplet_components_come_from_the_lexicons(
        words in prop::collection::vec(prop_oneof![
            Just("hook".to_string()), Just("grasper".to_string()), Just("dissects".to_string()),
            Just("clips".to_string()), Just("gallbladder".to_string()), Just("fluid".to_string()), word()
        ], 0..12)
    ) {
        let gaz = corpus_gazetteer();
        for t in extract_actions(&words.join(" "), &gaz, 0) {
            prop_assert!(gaz.contains(Category::Instrument, &t.instrument));
            prop_assert!(gaz.contains(Category::Verb, &t.verb));
            prop_assert!(gaz.contains(Category::Target, &t.target) || gaz.contains(Category::Organ, &t.target));
        }
    }

    #[test]
    fn sampled_frames_lie_inside_the_segment(
        times in prop::collection::btree_set(0u32..400, 1..40),
        a in 0u32..400, len in 0u32..200, n in 1usize..10
    ) {
        let frames: Vec<(f64, String)> = times.iter().map(|&t| (t as f64 / 4.0, format!("f{t}"))).collect();
        let index = FrameIndex::new(frames).unwrap();
        let seg = segment(a as f64 / 4.0, (a + len) as f64 / 4.0);
        match sample_frames(&seg, &index, n) {
            Ok(picked) => {
                prop_assert_eq!(picked.len(), n);
                prop_assert!(picked.iter().all(|(t, _)| *t >= seg.start_s && *t <= seg.end_s));
                prop_assert!(picked.windows(2).all(|w| w[0].0 <= w[1].0));
            }
            Err(_) => {
                prop_assert!(index.frames().iter().all(|(t, _)| *t < seg.start_s || *t > seg.end_s));
            }
        }
    }

    #[test]
    fn raising_min_freq_only_removes_tags(min_lo in 1usize..3, extra in 0usize..3) {
        let build = |min_freq| {
            corpus::vocabulary(min_freq, &Stoplist::default())
                .into_iter()
                .map(|e| e.name)
                .collect::<BTreeSet<_>>()
        };
        prop_assert!(build(min_lo + extra).is_subset(&build(min_lo)));
    }
}
