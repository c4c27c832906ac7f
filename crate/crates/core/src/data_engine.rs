//! Time-aligned transcripts plus per-video frame manifests into
//! image-tag-text training samples.

use std::collections::{BTreeSet, HashSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{read_to_string, Error, Result};
use crate::transport::{call_with_retry, JsonTransport, RetryPolicy};
use crate::vocab::{normalize_tag, Split, TagVocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptSegment {
    pub video_id: String,
    pub index: usize,
    pub start_s: f64,
    pub end_s: f64,
    pub text: String,
}

impl TranscriptSegment {
    pub fn id(&self) -> String {
        format!("{}:{}", self.video_id, self.index)
    }
}

#[derive(Deserialize)]
struct RawSegment {
    start_s: f64,
    end_s: f64,
    text: String,
}

#[derive(Deserialize)]
struct RawTranscript {
    video_id: String,
    duration_s: f64,
    segments: Vec<RawSegment>,
}

/// Parse and validate a transcript JSON document.
pub fn parse_transcript(text: &str, label: &str) -> Result<Vec<TranscriptSegment>> {
    let raw: RawTranscript = serde_json::from_str(text)
        .map_err(|e| Error::format(label, Some(e.line()), e.to_string()))?;
    if raw.video_id.trim().is_empty() {
        return Err(Error::format(label, None, "empty video_id"));
    }
    if !(raw.duration_s.is_finite() && raw.duration_s >= 0.0) {
        return Err(Error::format(
            label,
            None,
            format!("invalid duration_s {}", raw.duration_s),
        ));
    }
    let mut out: Vec<TranscriptSegment> = Vec::with_capacity(raw.segments.len());
    for (i, s) in raw.segments.into_iter().enumerate() {
        let bad = |m: String| Error::format(label, None, format!("segment {i}: {m}"));
        if !(s.start_s.is_finite() && s.end_s.is_finite()) {
            return Err(bad("non-finite time".into()));
        }
        if s.start_s < 0.0 {
            return Err(bad(format!("start {} is negative", s.start_s)));
        }
        if s.end_s <= s.start_s {
            return Err(bad(format!(
                "end {} is not after start {}",
                s.end_s, s.start_s
            )));
        }
        if s.end_s > raw.duration_s {
            return Err(bad(format!(
                "end {} exceeds duration {}",
                s.end_s, raw.duration_s
            )));
        }
        if let Some(prev) = out.last() {
            if s.start_s < prev.start_s {
                return Err(bad(format!(
                    "start {} precedes previous start {}",
                    s.start_s, prev.start_s
                )));
            }
            if s.start_s < prev.end_s {
                return Err(bad(format!(
                    "overlaps segment {} ending at {}",
                    i - 1,
                    prev.end_s
                )));
            }
        }
        out.push(TranscriptSegment {
            video_id: raw.video_id.clone(),
            index: i,
            start_s: s.start_s,
            end_s: s.end_s,
            text: s.text,
        });
    }
    Ok(out)
}

pub fn ingest_transcript(path: &Path) -> Result<Vec<TranscriptSegment>> {
    parse_transcript(&read_to_string(path)?, &path.display().to_string())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FilterVerdict {
    Visual,
    NonVisual,
    /// Client failed; the segment is treated as non-visual.
    Failed(String),
}

impl FilterVerdict {
    pub fn is_visual(&self) -> bool {
        matches!(self, FilterVerdict::Visual)
    }
}

pub trait VisualFilter: Sync {
    fn classify(&self, text: &str) -> Result<bool>;
}

pub const DEFAULT_STOP_PHRASES: [&str; 4] = ["slide", "diagram", "agenda", "thank you"];

/// Non-visual iff the normalised text contains any stop phrase.
#[derive(Debug, Clone, PartialEq)]
pub struct StopPhraseFilter {
    pub phrases: Vec<String>,
}

impl Default for StopPhraseFilter {
    fn default() -> Self {
        Self {
            phrases: DEFAULT_STOP_PHRASES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl StopPhraseFilter {
    pub fn parse(text: &str) -> Self {
        Self {
            phrases: text
                .lines()
                .filter(|l| !l.starts_with('#'))
                .map(normalize_tag)
                .filter(|l| !l.is_empty())
                .collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::parse(&read_to_string(path)?))
    }

    pub fn is_visual(&self, text: &str) -> bool {
        let t = normalize_tag(text);
        !self.phrases.iter().any(|p| t.contains(p.as_str()))
    }
}

impl VisualFilter for StopPhraseFilter {
    fn classify(&self, text: &str) -> Result<bool> {
        Ok(self.is_visual(text))
    }
}

/// Filter service speaking `{"text"}` -> `{"visual": bool}`.
pub struct RemoteFilter<'a> {
    pub transport: &'a dyn JsonTransport,
    pub policy: RetryPolicy,
}

impl VisualFilter for RemoteFilter<'_> {
    fn classify(&self, text: &str) -> Result<bool> {
        let (reply, _) = call_with_retry(self.transport, &json!({ "text": text }), &self.policy);
        match reply?.get("visual") {
            Some(Value::Bool(b)) => Ok(*b),
            _ => Err(Error::Client(
                "filter reply lacks boolean \"visual\"".into(),
            )),
        }
    }
}

pub fn filter_nonvisual(segment: &TranscriptSegment, filter: &dyn VisualFilter) -> FilterVerdict {
    match filter.classify(&segment.text) {
        Ok(true) => FilterVerdict::Visual,
        Ok(false) => FilterVerdict::NonVisual,
        Err(e) => {
            tracing::warn!(segment = %segment.id(), error = %e, "filter failed; dropping segment");
            FilterVerdict::Failed(e.to_string())
        }
    }
}

/// Frames of one video sorted by timestamp.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrameIndex {
    frames: Vec<(f64, String)>,
}

impl FrameIndex {
    pub fn new(mut frames: Vec<(f64, String)>) -> Result<Self> {
        if let Some((t, p)) = frames.iter().find(|(t, _)| !t.is_finite()) {
            return Err(Error::Validation(format!(
                "frame {p} has non-finite timestamp {t}"
            )));
        }
        frames.sort_by(|a, b| a.0.total_cmp(&b.0));
        if let Some(w) = frames.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::Validation(format!(
                "two frames at timestamp {}",
                w[0].0
            )));
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &[(f64, String)] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// TSV `timestamp_s<TAB>path`.
pub fn parse_frames_manifest(text: &str, label: &str) -> Result<FrameIndex> {
    let mut frames = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (t, p) = line
            .split_once('\t')
            .ok_or_else(|| Error::format(label, Some(i + 1), "expected timestamp_s<TAB>path"))?;
        let t: f64 = t
            .trim()
            .parse()
            .map_err(|_| Error::format(label, Some(i + 1), format!("bad timestamp {t:?}")))?;
        if !t.is_finite() || t < 0.0 {
            return Err(Error::format(
                label,
                Some(i + 1),
                format!("bad timestamp {t}"),
            ));
        }
        if !seen.insert(t.to_bits()) {
            return Err(Error::format(
                label,
                Some(i + 1),
                format!("duplicate timestamp {t}"),
            ));
        }
        let p = p.trim();
        if p.is_empty() {
            return Err(Error::format(label, Some(i + 1), "empty path"));
        }
        frames.push((t, p.to_string()));
    }
    FrameIndex::new(frames)
}

pub fn load_frames_manifest(path: &Path) -> Result<FrameIndex> {
    parse_frames_manifest(&read_to_string(path)?, &path.display().to_string())
}

/// Sampling targets for `n` frames over `[start, end]`: endpoints included
/// for `n > 1`, the midpoint for `n == 1`.
pub fn sample_targets(start: f64, end: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![start + (end - start) / 2.0];
    }
    (0..n)
        .map(|i| start + i as f64 * (end - start) / (n - 1) as f64)
        .collect()
}

/// `n` frames inside the segment nearest to evenly spaced targets; ties go
/// to the earlier frame and repeats are allowed.
pub fn sample_frames(
    segment: &TranscriptSegment,
    index: &FrameIndex,
    n: usize,
) -> Result<Vec<(f64, String)>> {
    if n == 0 {
        return Err(Error::Validation("frame count must be at least 1".into()));
    }
    let inside: Vec<&(f64, String)> = index
        .frames
        .iter()
        .filter(|(t, _)| *t >= segment.start_s && *t <= segment.end_s)
        .collect();
    if inside.is_empty() {
        return Err(Error::Validation(format!(
            "no frames within [{}, {}] for segment {}",
            segment.start_s,
            segment.end_s,
            segment.id()
        )));
    }
    Ok(sample_targets(segment.start_s, segment.end_s, n)
        .into_iter()
        .map(|target| {
            let after = inside.partition_point(|(t, _)| *t < target);
            let pick = match (after.checked_sub(1), inside.get(after)) {
                (None, _) => after,
                (Some(b), None) => b,
                (Some(b), Some((ta, _))) => {
                    if target - inside[b].0 <= ta - target {
                        b
                    } else {
                        after
                    }
                }
            };
            inside[pick].clone()
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipAnnotation {
    pub segment: TranscriptSegment,
    pub visual: bool,
    pub tags: Vec<String>,
    pub frames: Vec<(f64, String)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletSample {
    pub sample_id: String,
    pub frame_refs: Vec<String>,
    pub text: String,
    pub tags: Vec<String>,
    pub split: Split,
}

impl TripletSample {
    pub fn validate(&self) -> Result<()> {
        if self.frame_refs.is_empty() {
            return Err(Error::Validation(format!(
                "sample {} has no frames",
                self.sample_id
            )));
        }
        let mut seen = HashSet::new();
        if let Some(t) = self.tags.iter().find(|t| !seen.insert(t.as_str())) {
            return Err(Error::Validation(format!(
                "sample {} repeats tag {t:?}",
                self.sample_id
            )));
        }
        if self.split == Split::Both {
            return Err(Error::Validation(format!(
                "sample {} split must be pretrain or finetune",
                self.sample_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub clips_in: usize,
    pub visual_clips: usize,
    pub samples_out: usize,
    pub tags_dropped: usize,
    pub clips_without_tags: usize,
    pub clips_without_frames: usize,
    pub unique_tags: usize,
    pub filter_failures: usize,
}

/// Visual clips with at least one in-vocabulary tag become samples, in
/// (video_id, segment index) order. Tags are listed in vocabulary order.
pub fn assemble_dataset(
    clips: &[ClipAnnotation],
    vocab: &TagVocabulary,
    split: Split,
) -> Result<(Vec<TripletSample>, DatasetStats)> {
    if split == Split::Both {
        return Err(Error::Validation(
            "dataset split must be pretrain or finetune".into(),
        ));
    }
    let mut order: Vec<&ClipAnnotation> = clips.iter().collect();
    order.sort_by(|a, b| {
        a.segment
            .video_id
            .cmp(&b.segment.video_id)
            .then(a.segment.index.cmp(&b.segment.index))
    });
    let mut stats = DatasetStats {
        clips_in: clips.len(),
        ..DatasetStats::default()
    };
    let mut unique = BTreeSet::new();
    let mut samples = Vec::new();
    for clip in order {
        if !clip.visual {
            continue;
        }
        stats.visual_clips += 1;
        if clip.frames.is_empty() {
            stats.clips_without_frames += 1;
            continue;
        }
        let mut idx = BTreeSet::new();
        for t in &clip.tags {
            match vocab.index_of(t) {
                Some(i) => {
                    idx.insert(i);
                }
                None => stats.tags_dropped += 1,
            }
        }
        if idx.is_empty() {
            stats.clips_without_tags += 1;
            continue;
        }
        unique.extend(idx.iter().copied());
        samples.push(TripletSample {
            sample_id: clip.segment.id(),
            frame_refs: clip.frames.iter().map(|(_, p)| p.clone()).collect(),
            text: clip.segment.text.clone(),
            tags: idx.iter().map(|&i| vocab.entry(i).name.clone()).collect(),
            split,
        });
    }
    stats.samples_out = samples.len();
    stats.unique_tags = unique.len();
    Ok((samples, stats))
}

/// Filter, tag, and frame-sample every segment of one video.
pub fn annotate_clips(
    segments: &[TranscriptSegment],
    frames: Option<&FrameIndex>,
    filter: &dyn VisualFilter,
    tagger: impl Fn(&str) -> Vec<String>,
    n_frames: usize,
) -> (Vec<ClipAnnotation>, usize) {
    let mut failures = 0;
    let clips = segments
        .iter()
        .map(|seg| {
            let verdict = filter_nonvisual(seg, filter);
            if matches!(verdict, FilterVerdict::Failed(_)) {
                failures += 1;
            }
            let visual = verdict.is_visual();
            let frames = match (visual, frames) {
                (true, Some(index)) => sample_frames(seg, index, n_frames).unwrap_or_else(|e| {
                    tracing::warn!(error = %e, "skipping clip without frames");
                    Vec::new()
                }),
                _ => Vec::new(),
            };
            ClipAnnotation {
                segment: seg.clone(),
                visual,
                tags: if visual {
                    tagger(&seg.text)
                } else {
                    Vec::new()
                },
                frames,
            }
        })
        .collect();
    (clips, failures)
}

pub fn to_jsonl(samples: &[TripletSample]) -> Result<String> {
    let mut out = String::new();
    for s in samples {
        out.push_str(&serde_json::to_string(s).map_err(|e| Error::json("dataset", e))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_dataset(path: &Path, samples: &[TripletSample]) -> Result<()> {
    let text = to_jsonl(samples)?;
    let mut f = std::fs::File::create(path)
        .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    f.write_all(text.as_bytes())
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn parse_dataset(text: &str, label: &str) -> Result<Vec<TripletSample>> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let s: TripletSample = serde_json::from_str(line)
            .map_err(|e| Error::format(label, Some(i + 1), e.to_string()))?;
        s.validate()
            .map_err(|e| Error::format(label, Some(i + 1), e.to_string()))?;
        if !ids.insert(s.sample_id.clone()) {
            return Err(Error::format(
                label,
                Some(i + 1),
                format!("duplicate sample_id {}", s.sample_id),
            ));
        }
        out.push(s);
    }
    Ok(out)
}

pub fn read_dataset(path: &Path) -> Result<Vec<TripletSample>> {
    parse_dataset(&read_to_string(path)?, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(start: f64, end: f64) -> TranscriptSegment {
        TranscriptSegment {
            video_id: "v".into(),
            index: 0,
            start_s: start,
            end_s: end,
            text: String::new(),
        }
    }

    fn uniform(n: usize) -> FrameIndex {
        FrameIndex::new((0..n).map(|i| (i as f64, format!("f{i}.pgm"))).collect()).unwrap()
    }

    #[test]
    fn transcript_validation() {
        let ok = r#"{"video_id":"v","duration_s":10,"segments":[{"start_s":0,"end_s":2,"text":"a"},{"start_s":2,"end_s":4,"text":"b"}]}"#;
        assert_eq!(parse_transcript(ok, "t").unwrap().len(), 2);
        let overlap = r#"{"video_id":"v","duration_s":10,"segments":[{"start_s":0,"end_s":3,"text":"a"},{"start_s":2,"end_s":4,"text":"b"}]}"#;
        let err = parse_transcript(overlap, "t").unwrap_err().to_string();
        assert!(err.contains("segment 1"), "{err}");
        let empty = r#"{"video_id":"v","duration_s":0,"segments":[]}"#;
        assert!(parse_transcript(empty, "t").unwrap().is_empty());
    }

    #[test]
    fn midpoint_for_single_frame() {
        assert_eq!(sample_targets(2.0, 4.0, 1), vec![3.0]);
    }

    #[test]
    fn four_over_hundred() {
        let picked = sample_frames(&seg(0.0, 99.0), &uniform(100), 4).unwrap();
        let ts: Vec<f64> = picked.iter().map(|p| p.0).collect();
        assert_eq!(ts, vec![0.0, 33.0, 66.0, 99.0]);
    }

    #[test]
    fn sparse_frames_repeat() {
        let picked = sample_frames(&seg(0.0, 3.0), &uniform(2), 8).unwrap();
        assert_eq!(picked.len(), 8);
    }

    #[test]
    fn tie_goes_to_earlier_frame() {
        let idx = FrameIndex::new(vec![(1.0, "a".into()), (3.0, "b".into())]).unwrap();
        assert_eq!(sample_frames(&seg(0.0, 4.0), &idx, 1).unwrap()[0].1, "a");
    }

    #[test]
    fn no_frames_in_range_names_segment() {
        let idx = FrameIndex::new(vec![(9.0, "a".into())]).unwrap();
        let err = sample_frames(&seg(0.0, 4.0), &idx, 1)
            .unwrap_err()
            .to_string();
        assert!(err.contains("v:0"), "{err}");
    }

    #[test]
    fn stop_phrase_filter() {
        let f = StopPhraseFilter::default();
        assert!(!f.is_visual("Next SLIDE please"));
        assert!(f.is_visual("we now dissect the cystic duct"));
    }
}
