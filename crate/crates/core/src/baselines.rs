//! Frequency-prior baselines: every ordered pair of plain detections is
//! scored as `s_s * p(predicate | subject label, object label) * s_o`.
//!
//! `Freq` counts every annotated triplet; `FreqOverlap` counts, and scores,
//! only pairs whose boxes overlap (IoU > 0).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{ImageAnnotation, ObjectRef, Vocabulary};
use crate::error::{Error, Result};
use crate::geometry::{iou, Detection, Label};
use crate::inference::{sort_by_score, RelationshipDetection};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorMode {
    Freq,
    FreqOverlap,
}

impl PriorMode {
    pub fn name(self) -> &'static str {
        match self {
            PriorMode::Freq => "freq",
            PriorMode::FreqOverlap => "freq-overlap",
        }
    }

    fn from_name(s: &str) -> Option<Self> {
        match s {
            "freq" => Some(PriorMode::Freq),
            "freq-overlap" => Some(PriorMode::FreqOverlap),
            _ => None,
        }
    }
}

/// Predicate counts per `(subject label, object label)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredicatePrior {
    pub mode: PriorMode,
    pub num_predicates: usize,
    pub counts: BTreeMap<(Label, Label), Vec<u64>>,
    /// Score unseen label pairs with a uniform distribution instead of zero.
    pub uniform_fallback: bool,
}

pub fn fit_prior(annotations: &[ImageAnnotation], num_predicates: usize, mode: PriorMode) -> PredicatePrior {
    let mut counts: BTreeMap<(Label, Label), Vec<u64>> = BTreeMap::new();
    for a in annotations {
        for r in &a.relationships {
            let ObjectRef::Visible { bbox, label } = r.object else {
                continue;
            };
            let s = &a.subjects[r.subject];
            if mode == PriorMode::FreqOverlap && iou(&s.bbox, &bbox) <= 0.0 {
                continue;
            }
            counts
                .entry((s.label, label))
                .or_insert_with(|| vec![0; num_predicates])[r.predicate] += 1;
        }
    }
    PredicatePrior {
        mode,
        num_predicates,
        counts,
        uniform_fallback: false,
    }
}

impl PredicatePrior {
    /// `p(predicate | subject, object)`, zero for unseen pairs unless the
    /// uniform fallback is on.
    pub fn probability(&self, subject: Label, object: Label, predicate: Label) -> f64 {
        match self.counts.get(&(subject, object)) {
            Some(c) => {
                let total: u64 = c.iter().sum();
                if total == 0 {
                    0.0
                } else {
                    c[predicate] as f64 / total as f64
                }
            }
            None if self.uniform_fallback => 1.0 / self.num_predicates as f64,
            None => 0.0,
        }
    }

    pub fn to_tsv(&self, vocab: &Vocabulary) -> Result<String> {
        let name = |names: &[String], l: Label| -> Result<String> {
            names
                .get(l)
                .cloned()
                .ok_or_else(|| Error::Config(format!("label {l} not in vocabulary")))
        };
        let mut s = format!("# mode={}\nsubject\tobject\tpredicate\tcount\n", self.mode.name());
        for (&(sl, ol), c) in &self.counts {
            for (p, &n) in c.iter().enumerate() {
                if n > 0 {
                    writeln!(
                        s,
                        "{}\t{}\t{}\t{n}",
                        name(&vocab.object_classes, sl)?,
                        name(&vocab.object_classes, ol)?,
                        name(&vocab.predicates, p)?
                    )
                    .expect("writing to a String");
                }
            }
        }
        Ok(s)
    }

    pub fn from_tsv(text: &str, vocab: &Vocabulary) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let mode = lines
            .next()
            .and_then(|(_, l)| l.strip_prefix("# mode="))
            .and_then(PriorMode::from_name)
            .ok_or_else(|| Error::parse("line 1", "expected '# mode=freq' or '# mode=freq-overlap'"))?;
        if lines.next().map(|(_, l)| l) != Some("subject\tobject\tpredicate\tcount") {
            return Err(Error::parse("line 2", "missing column header"));
        }
        let np = vocab.predicates.len();
        let mut counts: BTreeMap<(Label, Label), Vec<u64>> = BTreeMap::new();
        for (i, line) in lines {
            let loc = format!("line {}", i + 1);
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(Error::parse(loc, "expected 4 fields"));
            }
            let obj = |k: usize| {
                vocab
                    .object_id(f[k])
                    .ok_or_else(|| Error::parse(loc.clone(), format!("unknown class {:?}", f[k])))
            };
            let (sl, ol) = (obj(0)?, obj(1)?);
            let p = vocab
                .predicate_id(f[2])
                .ok_or_else(|| Error::parse(loc.clone(), format!("unknown predicate {:?}", f[2])))?;
            let n: u64 = f[3].parse().map_err(|_| Error::parse(loc.clone(), "bad count"))?;
            counts.entry((sl, ol)).or_insert_with(|| vec![0; np])[p] += n;
        }
        Ok(PredicatePrior {
            mode,
            num_predicates: np,
            counts,
            uniform_fallback: false,
        })
    }

    pub fn save(&self, path: &Path, vocab: &Vocabulary) -> Result<()> {
        std::fs::write(path, self.to_tsv(vocab)?)?;
        Ok(())
    }

    pub fn load(path: &Path, vocab: &Vocabulary) -> Result<Self> {
        Self::from_tsv(&std::fs::read_to_string(path)?, vocab)
    }
}

/// Scores every ordered pair of distinct detections for every predicate.
/// Zero-score triplets are dropped; the rest are sorted (stable, score
/// descending) and truncated to `top_k`.
pub fn score_pairs(detections: &[Detection], prior: &PredicatePrior, top_k: usize) -> Vec<RelationshipDetection> {
    let mut out = Vec::new();
    for (i, s) in detections.iter().enumerate() {
        for (j, o) in detections.iter().enumerate() {
            if i == j {
                continue;
            }
            if prior.mode == PriorMode::FreqOverlap && iou(&s.bbox, &o.bbox) <= 0.0 {
                continue;
            }
            for p in 0..prior.num_predicates {
                let prob = prior.probability(s.label, o.label, p);
                let score = s.score * prob * o.score;
                if score > 0.0 {
                    out.push(RelationshipDetection {
                        subject: *s,
                        predicate: p,
                        predicate_score: prob,
                        object: *o,
                        invisible: false,
                        score,
                    });
                }
            }
        }
    }
    sort_by_score(&mut out);
    out.truncate(top_k);
    out
}
