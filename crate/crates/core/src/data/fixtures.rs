//! Synthetic corpus for desk-scale runs.
//!
//! Every document is the same boilerplate passage with a colored object
//! ("the red kettle") spliced in near its start, and every image contains one
//! large rectangle. A sample is sarcastic when the color named in the text
//! disagrees with the rectangle's color, so neither modality alone carries
//! the label. Gold clues are the color phrase (plus any later repetition of
//! the color word) and the rectangle.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{write_dataset, AnnotationSet, BoundingBox, DatasetRecord, TokenSpan, GOLD_ANNOTATOR, TOPICS};
use crate::error::Result;

/// Share of sarcastic samples in the full corpus (34,130 of 102,588).
pub const SARCASTIC_RATIO: f64 = 34_130.0 / 102_588.0;

pub const CLUE_COLORS: [(&str, [u8; 3]); 3] = [
    ("red", [210, 40, 35]),
    ("green", [40, 175, 60]),
    ("blue", [45, 70, 215]),
];

const NOUNS: [&str; 12] = [
    "kettle", "banner", "truck", "jacket", "umbrella", "door", "balloon", "chair", "bottle",
    "poster", "bicycle", "tent",
];

const FILLER: [&str; 48] = [
    "officials", "said", "on", "monday", "that", "the", "new", "plan", "would", "improve",
    "local", "services", "while", "critics", "argued", "it", "was", "too", "costly", "and",
    "late", "residents", "gathered", "near", "city", "hall", "to", "hear", "about", "changes",
    "reported", "by", "a", "spokesperson", "who", "declined", "further", "comment", "after",
    "meeting", "with", "experts", "from", "several", "groups", "during", "week", "project",
];

/// Rectangle side as a share of the image side.
const RECT_SIDE: std::ops::Range<f64> = 0.35..0.65;

const MIN_TOKENS: usize = 20;
const MAX_TOKENS: usize = 100;

/// Generated records and their images, index-aligned.
#[derive(Debug, Clone)]
pub struct FixtureSet {
    pub records: Vec<DatasetRecord>,
    pub images: Vec<RgbImage>,
}

impl FixtureSet {
    /// Writes `data.jsonl` and the PNG images under `dir`.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir.join("images"))?;
        for (rec, img) in self.records.iter().zip(&self.images) {
            img.save(dir.join(&rec.image_path))?;
        }
        write_dataset(dir.join("data.jsonl"), &self.records)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Deterministic synthetic corpus of `n_samples` records with square images
/// of side `image_size`.
pub fn gen_fixtures(n_samples: usize, seed: u64, image_size: u32) -> FixtureSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_sarcastic = (n_samples as f64 * SARCASTIC_RATIO).round() as usize;
    let mut labels: Vec<bool> = (0..n_samples).map(|i| i < n_sarcastic).collect();
    labels.shuffle(&mut rng);

    let mut records = Vec::with_capacity(n_samples);
    let mut images = Vec::with_capacity(n_samples);
    for (i, &sarcastic) in labels.iter().enumerate() {
        let id = format!("fx{seed}-{i:05}");
        let text_color = rng.random_range(0..CLUE_COLORS.len());
        let image_color = if sarcastic {
            (text_color + rng.random_range(1..CLUE_COLORS.len())) % CLUE_COLORS.len()
        } else {
            text_color
        };

        let (text, spans) = make_text(&mut rng, CLUE_COLORS[text_color].0);
        let (image, rect) = make_image(&mut rng, image_size, CLUE_COLORS[image_color].1);
        let topic = TOPICS[rng.random_range(0..TOPICS.len())];

        let gold = sarcastic.then(|| AnnotationSet::new(GOLD_ANNOTATOR, spans, vec![rect]));
        records.push(DatasetRecord {
            image_path: format!("images/{id}.png").into(),
            id,
            topic: topic.to_string(),
            text,
            sarcastic,
            gold,
        });
        images.push(image);
    }
    FixtureSet { records, images }
}

fn make_text(rng: &mut ChaCha8Rng, color: &str) -> (String, Vec<TokenSpan>) {
    let n = rng.random_range(MIN_TOKENS..=MAX_TOKENS);
    // one boilerplate passage, cut to length, so only the clue varies
    let mut tokens: Vec<&str> = FILLER.iter().copied().cycle().take(n).collect();

    // "the <color> <noun>" within the first dozen tokens
    let p = rng.random_range(0..=8);
    tokens[p] = "the";
    tokens[p + 1] = color;
    tokens[p + 2] = NOUNS[rng.random_range(0..NOUNS.len())];
    let mut spans = vec![TokenSpan::new(p + 1, p + 3).expect("two-token span")];

    // occasionally the color is repeated further on
    if rng.random_bool(0.3) {
        let q = rng.random_range(p + 4..n);
        tokens[q] = color;
        spans.push(TokenSpan::new(q, q + 1).expect("one-token span"));
    }
    (tokens.join(" "), spans)
}

fn make_image(rng: &mut ChaCha8Rng, size: u32, color: [u8; 3]) -> (RgbImage, BoundingBox) {
    let mut img = RgbImage::new(size, size);
    let base: i32 = rng.random_range(90..170);
    for px in img.pixels_mut() {
        let v = (base + rng.random_range(-20..=20)).clamp(0, 255) as u8;
        *px = Rgb([v, v, v]);
    }

    let side = size as f64;
    let w = ((side * rng.random_range(RECT_SIDE)).round() as u32).max(1);
    let h = ((side * rng.random_range(RECT_SIDE)).round() as u32).max(1);
    let x0 = rng.random_range(0..=size - w);
    let y0 = rng.random_range(0..=size - h);
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            let jitter = |c: u8, r: &mut ChaCha8Rng| (c as i32 + r.random_range(-25..=25)).clamp(0, 255) as u8;
            let px = Rgb([jitter(color[0], rng), jitter(color[1], rng), jitter(color[2], rng)]);
            img.put_pixel(x, y, px);
        }
    }
    let rect = BoundingBox::new(x0 as f64, y0 as f64, w as f64, h as f64).expect("positive size");
    (img, rect)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nine_samples_three_sarcastic() {
        let fx = gen_fixtures(9, 7, 32);
        assert_eq!(fx.len(), 9);
        assert_eq!(fx.records.iter().filter(|r| r.sarcastic).count(), 3);
        for r in &fx.records {
            r.validate().unwrap();
        }
    }

    #[test]
    fn single_sample_is_plain() {
        let fx = gen_fixtures(1, 3, 32);
        assert!(!fx.records[0].sarcastic);
        assert!(fx.records[0].gold.is_none());
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let a = gen_fixtures(12, 99, 32);
        let b = gen_fixtures(12, 99, 32);
        let lines = |f: &FixtureSet| f.records.iter().map(|r| r.to_json_line().unwrap()).collect::<Vec<_>>();
        assert_eq!(lines(&a), lines(&b));
        for (x, y) in a.images.iter().zip(&b.images) {
            assert_eq!(x.as_raw(), y.as_raw());
        }
    }

    #[test]
    fn spans_within_documents_and_boxes_within_images() {
        let fx = gen_fixtures(200, 5, 48);
        for r in &fx.records {
            let n = r.token_count();
            assert!((MIN_TOKENS..=MAX_TOKENS).contains(&n));
            if let Some(g) = &r.gold {
                for s in &g.spans {
                    assert!(s.start() < s.end() && s.end() <= n);
                }
                for b in &g.boxes {
                    assert!(b.within(48, 48));
                }
            }
        }
    }

    #[test]
    fn sarcasm_means_color_disagreement() {
        let fx = gen_fixtures(60, 11, 32);
        for (r, img) in fx.records.iter().zip(&fx.images) {
            let text_color = CLUE_COLORS
                .iter()
                .position(|(name, _)| r.tokens().contains(name))
                .unwrap();
            // sample the rectangle center for the planted color
            let rect = match &r.gold {
                Some(g) => g.boxes[0],
                None => continue,
            };
            let (cx, cy) = rect.center();
            let px = img.get_pixel(cx as u32, cy as u32).0;
            let nearest = CLUE_COLORS
                .iter()
                .enumerate()
                .min_by_key(|(_, (_, c))| (0..3).map(|k| (c[k] as i32 - px[k] as i32).pow(2)).sum::<i32>())
                .unwrap()
                .0;
            assert_ne!(nearest, text_color, "record {}", r.id);
        }
    }
}
