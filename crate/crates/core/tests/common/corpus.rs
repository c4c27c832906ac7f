//! The frozen fixture corpus run through the library pipeline.

use surgtag::data_engine::*;
use surgtag::embedding::TagEmbedder;
use surgtag::label_engine::*;
use surgtag::vocab::{entries_to_tsv, load_vocab_entries, Split, TagEntry, TagVocabulary};

use super::corpus_dir;

pub fn gazetteer() -> Gazetteer {
    load_gazetteer(&corpus_dir().join("gazetteer.tsv")).unwrap()
}

pub fn segments() -> Vec<TranscriptSegment> {
    let dir = corpus_dir().join("transcripts");
    ["vid01.json", "vid02.json"]
        .iter()
        .flat_map(|f| ingest_transcript(&dir.join(f)).unwrap())
        .collect()
}

pub fn vocabulary(min_freq: usize, stoplist: &Stoplist) -> Vec<TagEntry> {
    let gaz = gazetteer();
    let mut entities = Vec::new();
    let mut triplets = Vec::new();
    for seg in segments() {
        entities.extend(entity_observations(
            &seg.id(),
            &extract_entities(&seg.text, &gaz),
        ));
        triplets.extend(triplet_observations(
            &seg.id(),
            &extract_actions(&seg.text, &gaz, seg.index),
            &gaz,
        ));
    }
    build_vocabulary(
        entities,
        triplets,
        Vec::new(),
        min_freq,
        stoplist,
        Split::Both,
    )
}

/// What `build-vocab --min-freq 2` with the fixture stoplist writes.
pub fn vocabulary_tsv() -> String {
    let stop = Stoplist::load(&corpus_dir().join("stoplist.txt")).unwrap();
    entries_to_tsv(&vocabulary(2, &stop))
}

pub fn golden_vocab() -> TagVocabulary {
    let entries = load_vocab_entries(&corpus_dir().join("golden/vocab.tsv")).unwrap();
    TagVocabulary::from_entries(entries, &TagEmbedder::hashed(8)).unwrap()
}

/// What `build-dataset --n-frames 3` over the golden vocabulary writes.
pub fn dataset() -> (Vec<TripletSample>, DatasetStats) {
    let dir = corpus_dir();
    let gaz = gazetteer();
    let filter = StopPhraseFilter::load(&dir.join("stop_phrases.txt")).unwrap();
    let segments = segments();
    let mut clips = Vec::new();
    for video in ["vid01", "vid02"] {
        let index = load_frames_manifest(&dir.join(format!("frames/{video}.tsv"))).unwrap();
        let segs: Vec<TranscriptSegment> = segments
            .iter()
            .filter(|s| s.video_id == video)
            .cloned()
            .collect();
        let tagger = |text: &str| {
            tag_sentence(text, &gaz)
                .into_iter()
                .map(|(t, _)| t)
                .collect()
        };
        let (c, failures) = annotate_clips(&segs, Some(&index), &filter, tagger, 3);
        assert_eq!(failures, 0);
        clips.extend(c);
    }
    assemble_dataset(&clips, &golden_vocab(), Split::Pretrain).unwrap()
}

pub fn read(rel: &str) -> String {
    std::fs::read_to_string(corpus_dir().join(rel)).unwrap()
}
