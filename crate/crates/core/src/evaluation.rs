//! Multi-label metrics: AP/mAP, F-beta, the F-beta threshold search, and a
//! category-grouped report.

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{Category, TagVocabulary};

pub const DEFAULT_BETA: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub sample_id: String,
    pub scores: Vec<f64>,
    pub truth: Vec<u8>,
}

impl EvalRecord {
    pub fn validate(&self) -> Result<()> {
        if self.scores.len() != self.truth.len() {
            return Err(Error::Validation(format!(
                "record {}: {} scores vs {} truth labels",
                self.sample_id,
                self.scores.len(),
                self.truth.len()
            )));
        }
        if let Some(s) = self.scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::Validation(format!(
                "record {}: score {s} outside [0, 1]",
                self.sample_id
            )));
        }
        if let Some(t) = self.truth.iter().find(|&&t| t > 1) {
            return Err(Error::Validation(format!(
                "record {}: truth label {t} is not 0/1",
                self.sample_id
            )));
        }
        Ok(())
    }
}

/// Precision averaged over the ranks of the positives; ties keep input order.
/// `None` when there are no positives.
pub fn average_precision(scores: &[f64], truth: &[bool]) -> Option<f64> {
    let positives = truth.iter().filter(|&&t| t).count();
    if positives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if truth[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / positives as f64)
}

pub fn f_beta(p: f64, r: f64, beta: f64) -> f64 {
    if p == r {
        return p;
    }
    let b2 = beta * beta;
    let denom = b2 * p + r;
    if denom == 0.0 {
        0.0
    } else {
        (1.0 + b2) * p * r / denom
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f_beta(&self, beta: f64) -> f64 {
        f_beta(self.precision(), self.recall(), beta)
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Confusion counts over every (sample, class) pair with `score >= threshold`.
pub fn confusion_at(records: &[EvalRecord], threshold: f64) -> Confusion {
    let mut c = Confusion::default();
    for r in records {
        for (&s, &t) in r.scores.iter().zip(&r.truth) {
            match (s >= threshold, t == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => {}
            }
        }
    }
    c
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdChoice {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_beta: f64,
    pub confusion: Confusion,
}

/// Candidate thresholds: 0, midpoints between adjacent distinct scores, 1.
pub fn threshold_candidates(records: &[EvalRecord]) -> Vec<f64> {
    let mut s: Vec<f64> = records
        .iter()
        .flat_map(|r| r.scores.iter().copied())
        .collect();
    s.sort_by(f64::total_cmp);
    s.dedup();
    let mut c = vec![0.0];
    c.extend(s.windows(2).map(|w| (w[0] + w[1]) / 2.0));
    c.push(1.0);
    c
}

/// F-beta differences below this count as ties.
pub const TIE_EPS: f64 = 1e-12;

/// Threshold maximising micro F-beta; ties (within [`TIE_EPS`]) go to the
/// lowest threshold.
pub fn search_threshold(records: &[EvalRecord], beta: f64) -> Result<ThresholdChoice> {
    if records.is_empty() {
        return Err(Error::Validation(
            "threshold search needs at least one record".into(),
        ));
    }
    for r in records {
        r.validate()?;
    }
    // pairs sorted by score; a suffix is the predicted-positive set
    let mut pairs: Vec<(f64, bool)> = records
        .iter()
        .flat_map(|r| {
            r.scores
                .iter()
                .copied()
                .zip(r.truth.iter().map(|&t| t == 1))
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total_pos = pairs.iter().filter(|p| p.1).count() as u64;
    let mut pos_suffix = vec![0u64; pairs.len() + 1];
    for i in (0..pairs.len()).rev() {
        pos_suffix[i] = pos_suffix[i + 1] + pairs[i].1 as u64;
    }
    let mut best: Option<ThresholdChoice> = None;
    for t in threshold_candidates(records) {
        let start = pairs.partition_point(|p| p.0 < t);
        let tp = pos_suffix[start];
        let predicted = (pairs.len() - start) as u64;
        let confusion = Confusion {
            tp,
            fp: predicted - tp,
            fn_: total_pos - tp,
        };
        let f = confusion.f_beta(beta);
        if best.as_ref().is_none_or(|b| f > b.f_beta + TIE_EPS) {
            best = Some(ThresholdChoice {
                threshold: t,
                precision: confusion.precision(),
                recall: confusion.recall(),
                f_beta: f,
                confusion,
            });
        }
    }
    Ok(best.expect("candidate list is never empty"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub name: String,
    pub category: Category,
    pub support: u64,
    /// Absent for classes without positives.
    pub ap: Option<f64>,
    pub precision: f64,
    pub recall: f64,
    pub f_beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub name: String,
    pub classes: usize,
    pub map: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f_beta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub precision: f64,
    pub recall: f64,
    pub f_beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub ap_definition: String,
    pub threshold_rule: String,
    pub map_rule: String,
    pub grouping: String,
}

impl Default for ReportMeta {
    fn default() -> Self {
        Self {
            ap_definition: "mean precision at the rank of each positive, no interpolation, ties in input order".into(),
            threshold_rule: "single threshold maximising micro F-beta over {0, score midpoints, 1}; ties to the lowest; selection is score >= threshold".into(),
            map_rule: "mean AP over classes with at least one positive".into(),
            grouping: "component-grouped mAP over tag categories; organ counts as target; not a joint triplet association metric".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub beta: f64,
    pub threshold: f64,
    pub map: Option<f64>,
    pub micro: Summary,
    pub macro_avg: Summary,
    pub classes: Vec<ClassReport>,
    pub groups: Vec<GroupReport>,
    pub meta: ReportMeta,
}

/// Report group a category belongs to, if any.
pub fn group_of(c: Category) -> Option<&'static str> {
    match c {
        Category::Instrument => Some("instrument"),
        Category::Verb => Some("verb"),
        Category::Target | Category::Organ => Some("target"),
        Category::Triplet => Some("triplet"),
        _ => None,
    }
}

pub const GROUPS: [&str; 5] = ["instrument", "verb", "target", "triplet", "all"];

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for x in xs {
        s += x;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

pub fn evaluate(records: &[EvalRecord], vocab: &TagVocabulary, beta: f64) -> Result<EvalReport> {
    let k = vocab.len();
    for r in records {
        r.validate()?;
        if r.scores.len() != k {
            return Err(Error::Validation(format!(
                "record {} has {} scores, vocabulary has {k} tags",
                r.sample_id,
                r.scores.len()
            )));
        }
    }
    let choice = search_threshold(records, beta)?;
    let t = choice.threshold;
    let classes: Vec<ClassReport> = (0..k)
        .map(|j| {
            let scores: Vec<f64> = records.iter().map(|r| r.scores[j]).collect();
            let truth: Vec<bool> = records.iter().map(|r| r.truth[j] == 1).collect();
            let mut c = Confusion::default();
            for (&s, &y) in scores.iter().zip(&truth) {
                match (s >= t, y) {
                    (true, true) => c.tp += 1,
                    (true, false) => c.fp += 1,
                    (false, true) => c.fn_ += 1,
                    _ => {}
                }
            }
            let e = vocab.entry(j);
            ClassReport {
                name: e.name.clone(),
                category: e.category,
                support: truth.iter().filter(|&&y| y).count() as u64,
                ap: average_precision(&scores, &truth),
                precision: c.precision(),
                recall: c.recall(),
                f_beta: c.f_beta(beta),
            }
        })
        .collect();

    let group = |name: &str| -> GroupReport {
        let members: Vec<&ClassReport> = classes
            .iter()
            .filter(|c| c.ap.is_some() && (name == "all" || group_of(c.category) == Some(name)))
            .collect();
        GroupReport {
            name: name.to_string(),
            classes: members.len(),
            map: mean(members.iter().filter_map(|c| c.ap)),
            precision: mean(members.iter().map(|c| c.precision)),
            recall: mean(members.iter().map(|c| c.recall)),
            f_beta: mean(members.iter().map(|c| c.f_beta)),
        }
    };
    let groups: Vec<GroupReport> = GROUPS.iter().map(|g| group(g)).collect();
    let all = groups.last().expect("all group");
    Ok(EvalReport {
        samples: records.len(),
        beta,
        threshold: t,
        map: all.map,
        micro: Summary {
            precision: choice.precision,
            recall: choice.recall,
            f_beta: choice.f_beta,
        },
        macro_avg: Summary {
            precision: all.precision.unwrap_or(0.0),
            recall: all.recall.unwrap_or(0.0),
            f_beta: all.f_beta.unwrap_or(0.0),
        },
        classes,
        groups,
        meta: ReportMeta::default(),
    })
}

pub const CSV_HEADER: &str = "method,instrument,verb,target,all";

/// One CSV row of group mAP in percent; empty cells for empty groups.
pub fn csv_row(method: &str, report: &EvalReport) -> String {
    let cell = |name: &str| {
        report
            .groups
            .iter()
            .find(|g| g.name == name)
            .and_then(|g| g.map)
            .map(|m| format!("{:.2}", m * 100.0))
            .unwrap_or_default()
    };
    format!(
        "{method},{},{},{},{}",
        cell("instrument"),
        cell("verb"),
        cell("target"),
        cell("all")
    )
}

pub fn read_records(path: &Path) -> Result<Vec<EvalRecord>> {
    let label = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|e| Error::io(format!("reading {label}"), e))?;
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {label}"), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: EvalRecord = serde_json::from_str(&line)
            .map_err(|e| Error::format(&label, Some(i + 1), e.to_string()))?;
        if !ids.insert(r.sample_id.clone()) {
            return Err(Error::format(
                &label,
                Some(i + 1),
                format!("duplicate sample_id {}", r.sample_id),
            ));
        }
        out.push(r);
    }
    Ok(out)
}

pub fn write_records(path: &Path, records: &[EvalRecord]) -> Result<()> {
    let label = path.display().to_string();
    let mut f = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| Error::io(format!("creating {label}"), e))?,
    );
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::json(&label, e))?;
        writeln!(f, "{line}").map_err(|e| Error::io(format!("writing {label}"), e))?;
    }
    f.flush()
        .map_err(|e| Error::io(format!("writing {label}"), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, scores: &[f64], truth: &[u8]) -> EvalRecord {
        EvalRecord {
            sample_id: id.into(),
            scores: scores.to_vec(),
            truth: truth.to_vec(),
        }
    }

    #[test]
    fn perfect_ranking_ap_is_one() {
        assert_eq!(
            average_precision(&[0.9, 0.8, 0.1], &[true, true, false]),
            Some(1.0)
        );
    }

    #[test]
    fn positive_ranked_second_gives_half() {
        assert_eq!(average_precision(&[0.9, 0.1], &[false, true]), Some(0.5));
    }

    #[test]
    fn no_positives_is_excluded() {
        assert_eq!(average_precision(&[0.3, 0.2], &[false, false]), None);
    }

    #[test]
    fn f_beta_examples() {
        assert_eq!(f_beta(1.0, 0.0, 0.5), 0.0);
        assert_eq!(f_beta(0.0, 0.0, 0.5), 0.0);
        assert!((f_beta(0.6, 0.3, 0.5) - 0.5).abs() < 1e-15);
        for x in [0.0, 0.1, 0.37, 1.0] {
            assert_eq!(f_beta(x, x, 0.5), x);
        }
    }

    #[test]
    fn all_true_all_high_picks_zero() {
        let rs = vec![rec("a", &[0.9, 0.9], &[1, 1])];
        let c = search_threshold(&rs, 0.5).unwrap();
        assert_eq!(c.threshold, 0.0);
        assert_eq!(c.f_beta, 1.0);
    }

    #[test]
    fn separable_single_record() {
        let c = search_threshold(&[rec("a", &[0.2, 0.8], &[0, 1])], 0.5).unwrap();
        assert!(c.threshold > 0.2 && c.threshold < 0.8);
        assert_eq!(c.f_beta, 1.0);
    }

    #[test]
    fn out_of_range_scores_rejected() {
        assert!(search_threshold(&[rec("a", &[1.5], &[1])], 0.5).is_err());
        assert!(search_threshold(&[], 0.5).is_err());
    }
}
