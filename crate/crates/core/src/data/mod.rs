//! Dataset schema, JSONL ingestion and validation.
//!
//! Records are stored one per line. Token spans index the whitespace tokens
//! of `text`, boxes are `[x, y, w, h]` in pixels of the original image.

mod fixtures;
mod images;
mod split;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use fixtures::{gen_fixtures, FixtureSet, CLUE_COLORS, SARCASTIC_RATIO};
pub use images::{image_to_tensor, load_image, resize_for_model, scale_box, ModelImage};
pub use split::{split_dataset, Split, SplitConfig};

/// The nine news topics used for tagging.
pub const TOPICS: [&str; 9] = [
    "science",
    "health",
    "sport",
    "technology",
    "entertainment",
    "education",
    "business",
    "environment",
    "politics",
];

/// Annotator id given to the selected (gold) annotation of a record.
pub const GOLD_ANNOTATOR: &str = "gold";

/// Half-open interval `[start, end)` of whitespace token indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "[usize; 2]", into = "[usize; 2]")]
pub struct TokenSpan {
    start: usize,
    end: usize,
}

impl TokenSpan {
    pub fn new(start: usize, end: usize) -> Result<Self> {
        if start >= end {
            return Err(Error::invalid(format!("empty or reversed span [{start}, {end})")));
        }
        Ok(Self { start, end })
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn end(&self) -> usize {
        self.end
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, token: usize) -> bool {
        self.start <= token && token < self.end
    }

    pub fn overlaps(&self, other: &TokenSpan) -> bool {
        self.start < other.end && other.start < self.end
    }
}

impl TryFrom<[usize; 2]> for TokenSpan {
    type Error = Error;

    fn try_from(v: [usize; 2]) -> Result<Self> {
        TokenSpan::new(v[0], v[1])
    }
}

impl From<TokenSpan> for [usize; 2] {
    fn from(s: TokenSpan) -> Self {
        [s.start, s.end]
    }
}

/// Axis-aligned box, top-left corner plus size, in absolute pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if !(x.is_finite() && y.is_finite() && w.is_finite() && h.is_finite()) {
            return Err(Error::invalid("non-finite box coordinate"));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::invalid(format!("box has non-positive size {w}x{h}")));
        }
        Ok(Self { x, y, w, h })
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        Self::new(x0, y0, x1 - x0, y1 - y0)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn x2(&self) -> f64 {
        self.x + self.w
    }

    pub fn y2(&self) -> f64 {
        self.y + self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    /// Coordinates divided by the image size.
    pub fn normalized(&self, width: u32, height: u32) -> [f64; 4] {
        let (iw, ih) = (width as f64, height as f64);
        [self.x / iw, self.y / ih, self.w / iw, self.h / ih]
    }

    pub fn within(&self, width: u32, height: u32) -> bool {
        const EPS: f64 = 1e-6;
        self.x >= -EPS
            && self.y >= -EPS
            && self.x2() <= width as f64 + EPS
            && self.y2() <= height as f64 + EPS
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BoundingBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

/// One annotator's sarcastic clues for a sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub annotator_id: String,
    #[serde(default)]
    pub spans: Vec<TokenSpan>,
    #[serde(default)]
    pub boxes: Vec<BoundingBox>,
}

impl AnnotationSet {
    pub fn new(
        annotator_id: impl Into<String>,
        spans: Vec<TokenSpan>,
        boxes: Vec<BoundingBox>,
    ) -> Self {
        Self {
            annotator_id: annotator_id.into(),
            spans,
            boxes,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty() && self.boxes.is_empty()
    }

    /// Checks the structural invariants: spans pairwise disjoint and at least
    /// one box whenever a span is marked.
    pub fn check(&self) -> std::result::Result<(), String> {
        let mut sorted = self.spans.clone();
        sorted.sort();
        if let Some(w) = sorted.windows(2).find(|w| w[0].overlaps(&w[1])) {
            return Err(format!(
                "overlapping spans [{}, {}) and [{}, {})",
                w[0].start, w[0].end, w[1].start, w[1].end
            ));
        }
        if self.boxes.is_empty() && !self.spans.is_empty() {
            return Err("annotation marks text spans but no image box".into());
        }
        Ok(())
    }

    /// Sorted set of token indices covered by the spans.
    pub fn token_set(&self) -> std::collections::BTreeSet<usize> {
        self.spans.iter().flat_map(|s| s.start..s.end).collect()
    }
}

/// One news item.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub id: String,
    pub topic: String,
    pub text: String,
    pub image_path: PathBuf,
    pub sarcastic: bool,
    pub gold: Option<AnnotationSet>,
}

impl DatasetRecord {
    pub fn tokens(&self) -> Vec<&str> {
        self.text.split_whitespace().collect()
    }

    pub fn token_count(&self) -> usize {
        self.text.split_whitespace().count()
    }

    /// Validates every record-level invariant that does not need the image.
    pub fn validate(&self) -> Result<()> {
        let n = self.token_count();
        if n == 0 {
            return Err(Error::validation(&self.id, "document has no tokens"));
        }
        let has_gold = self.gold.as_ref().is_some_and(|g| !g.is_empty());
        if self.sarcastic != has_gold {
            let msg = if self.sarcastic {
                "sarcastic record without gold annotation"
            } else {
                "non-sarcastic record carries a gold annotation"
            };
            return Err(Error::validation(&self.id, msg));
        }
        if let Some(gold) = &self.gold {
            gold.check().map_err(|m| Error::validation(&self.id, m))?;
            if let Some(s) = gold.spans.iter().find(|s| s.end > n) {
                return Err(Error::validation(
                    &self.id,
                    format!("span [{}, {}) out of range for {n} tokens", s.start, s.end),
                ));
            }
        }
        Ok(())
    }

    /// Keeps the first `max_tokens` whitespace tokens, clipping or dropping
    /// spans that reach past the cut. Returns whether anything was removed.
    pub fn truncate_tokens(&mut self, max_tokens: usize) -> bool {
        let tokens = self.tokens();
        if tokens.len() <= max_tokens {
            return false;
        }
        self.text = tokens[..max_tokens].join(" ");
        if let Some(gold) = &mut self.gold {
            gold.spans = gold
                .spans
                .iter()
                .filter(|s| s.start < max_tokens)
                .map(|s| TokenSpan {
                    start: s.start,
                    end: s.end.min(max_tokens),
                })
                .collect();
        }
        true
    }

    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(&RawRecord::from(self))?)
    }
}

/// On-disk JSONL layout of a record.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    id: String,
    topic: String,
    text: String,
    image: String,
    sarcastic: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    spans: Option<Vec<TokenSpan>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    boxes: Option<Vec<BoundingBox>>,
}

impl From<&DatasetRecord> for RawRecord {
    fn from(r: &DatasetRecord) -> Self {
        let (spans, boxes) = match &r.gold {
            Some(g) => (Some(g.spans.clone()), Some(g.boxes.clone())),
            None => (None, None),
        };
        RawRecord {
            id: r.id.clone(),
            topic: r.topic.clone(),
            text: r.text.clone(),
            image: r.image_path.to_string_lossy().into_owned(),
            sarcastic: r.sarcastic,
            spans,
            boxes,
        }
    }
}

impl From<RawRecord> for DatasetRecord {
    fn from(r: RawRecord) -> Self {
        let spans = r.spans.unwrap_or_default();
        let boxes = r.boxes.unwrap_or_default();
        let gold = if spans.is_empty() && boxes.is_empty() {
            None
        } else {
            Some(AnnotationSet::new(GOLD_ANNOTATOR, spans, boxes))
        };
        DatasetRecord {
            id: r.id,
            topic: r.topic,
            text: r.text,
            image_path: PathBuf::from(r.image),
            sarcastic: r.sarcastic,
            gold,
        }
    }
}

/// Options controlling [`load_dataset`].
#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// Directory that relative image paths are resolved against. Defaults to
    /// the directory holding the JSONL file.
    pub image_root: Option<PathBuf>,
    /// Missing image files are errors instead of warnings.
    pub strict_images: bool,
    /// Documents longer than this are truncated (with a warning).
    pub max_tokens: Option<usize>,
}

/// Parses a single JSONL line into a validated record.
pub fn parse_record(line: &str) -> std::result::Result<DatasetRecord, String> {
    let raw: RawRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
    Ok(raw.into())
}

/// Reads and validates a JSONL dataset, failing on the first bad record.
pub fn load_dataset(path: impl AsRef<Path>, opts: &LoadOptions) -> Result<Vec<DatasetRecord>> {
    let (records, errors) = scan_dataset(path, opts)?;
    match errors.into_iter().next() {
        Some(e) => Err(e),
        None => Ok(records),
    }
}

/// Reads a JSONL dataset, keeping the valid records and collecting one
/// error per invalid line. I/O failures abort the scan.
pub fn scan_dataset(path: impl AsRef<Path>, opts: &LoadOptions) -> Result<(Vec<DatasetRecord>, Vec<Error>)> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingArtifact(format!("dataset {}", path.display())));
    }
    let file = File::open(path)?;
    let image_root = opts
        .image_root
        .clone()
        .unwrap_or_else(|| path.parent().map(Path::to_path_buf).unwrap_or_default());

    let mut records = Vec::new();
    let mut errors = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let mut truncated = 0usize;
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let checked = parse_record(&line)
            .map_err(|message| Error::Malformed {
                path: path.to_path_buf(),
                line: idx + 1,
                message,
            })
            .and_then(|mut record| {
                if !seen.insert(record.id.clone()) {
                    return Err(Error::validation(&record.id, "duplicate record id"));
                }
                record.validate()?;
                if let Some(max) = opts.max_tokens {
                    let n = record.token_count();
                    if record.truncate_tokens(max) {
                        log::debug!("record {}: truncated {n} tokens to {max}", record.id);
                        truncated += 1;
                    }
                }
                check_image(&record, &image_root, opts.strict_images)?;
                Ok(record)
            });
        match checked {
            Ok(r) => records.push(r),
            Err(e @ Error::Io(_)) => return Err(e),
            Err(e) => errors.push(e),
        }
    }
    if truncated > 0 {
        log::warn!("{truncated} documents truncated to {} tokens", opts.max_tokens.unwrap_or(0));
    }
    Ok((records, errors))
}

fn check_image(record: &DatasetRecord, root: &Path, strict: bool) -> Result<()> {
    let full = root.join(&record.image_path);
    match image::image_dimensions(&full) {
        Ok((w, h)) => {
            if let Some(b) = record
                .gold
                .iter()
                .flat_map(|g| g.boxes.iter())
                .find(|b| !b.within(w, h))
            {
                return Err(Error::validation(
                    &record.id,
                    format!("box {:?} outside {w}x{h} image", <[f64; 4]>::from(*b)),
                ));
            }
            Ok(())
        }
        Err(_) if !full.exists() => {
            if strict {
                Err(Error::MissingImage {
                    id: record.id.clone(),
                    path: full,
                })
            } else {
                log::warn!("record {}: image {} not found", record.id, full.display());
                Ok(())
            }
        }
        Err(e) => Err(e.into()),
    }
}

/// Writes records in the canonical JSONL layout.
pub fn write_dataset(path: impl AsRef<Path>, records: &[DatasetRecord]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for r in records {
        writeln!(out, "{}", r.to_json_line()?)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(id: &str, sarcastic: bool, extra: &str) -> String {
        format!(
            r#"{{"id":"{id}","topic":"science","text":"a b c d e","image":"img/{id}.png","sarcastic":{sarcastic}{extra}}}"#
        )
    }

    fn write(lines: &[String]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn loads_three_valid_lines() {
        let f = write(&[
            line("a", false, ""),
            line("b", true, r#","spans":[[0,2]],"boxes":[[0,0,4,4]]"#),
            line("c", false, ""),
        ]);
        let recs = load_dataset(f.path(), &LoadOptions::default()).unwrap();
        assert_eq!(recs.len(), 3);
        for r in &recs {
            r.validate().unwrap();
        }
        assert_eq!(recs[1].gold.as_ref().unwrap().spans[0], TokenSpan::new(0, 2).unwrap());
    }

    #[test]
    fn span_past_end_names_record() {
        let f = write(&[line("bad", true, r#","spans":[[3,9]],"boxes":[[0,0,4,4]]"#)]);
        let err = load_dataset(f.path(), &LoadOptions::default()).unwrap_err();
        match err {
            Error::Validation { id, .. } => assert_eq!(id, "bad"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn non_sarcastic_with_gold_rejected() {
        let record = DatasetRecord {
            id: "x".into(),
            topic: "health".into(),
            text: "one two three".into(),
            image_path: "x.png".into(),
            sarcastic: false,
            gold: Some(AnnotationSet::new(
                GOLD_ANNOTATOR,
                vec![TokenSpan::new(0, 1).unwrap()],
                vec![BoundingBox::new(0.0, 0.0, 2.0, 2.0).unwrap()],
            )),
        };
        assert!(matches!(record.validate(), Err(Error::Validation { .. })));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let f = write(&[line("a", false, ""), "{not json".to_string()]);
        match load_dataset(f.path(), &LoadOptions::default()).unwrap_err() {
            Error::Malformed { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn strict_flag_turns_missing_image_into_error() {
        let f = write(&[line("a", false, "")]);
        let opts = LoadOptions {
            strict_images: true,
            ..Default::default()
        };
        assert!(matches!(
            load_dataset(f.path(), &opts),
            Err(Error::MissingImage { .. })
        ));
    }

    #[test]
    fn overlapping_spans_rejected() {
        let f = write(&[line("o", true, r#","spans":[[0,3],[2,4]],"boxes":[[0,0,4,4]]"#)]);
        assert!(load_dataset(f.path(), &LoadOptions::default()).is_err());
    }

    #[test]
    fn truncation_clips_spans() {
        let mut r = DatasetRecord {
            id: "t".into(),
            topic: "sport".into(),
            text: "a b c d e f".into(),
            image_path: "t.png".into(),
            sarcastic: true,
            gold: Some(AnnotationSet::new(
                GOLD_ANNOTATOR,
                vec![TokenSpan::new(1, 3).unwrap(), TokenSpan::new(4, 6).unwrap()],
                vec![BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap()],
            )),
        };
        assert!(r.truncate_tokens(5));
        assert_eq!(r.text, "a b c d e");
        let spans = &r.gold.as_ref().unwrap().spans;
        assert_eq!(spans, &vec![TokenSpan::new(1, 3).unwrap(), TokenSpan::new(4, 5).unwrap()]);
        r.validate().unwrap();
    }
}
