//! Lexicon-based sentiment features fused with the `[CLS]` representation.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

/// Number of sentiment features: mean polarity, positive fraction,
/// negative fraction, and one fraction per Ekman emotion.
pub const SENTIMENT_DIM: usize = 9;

/// The six basic emotions, in the fixed feature order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Emotion {
    Anger,
    Fear,
    Sadness,
    Joy,
    Surprise,
    Disgust,
}

impl Emotion {
    pub const ALL: [Emotion; 6] = [
        Emotion::Anger,
        Emotion::Fear,
        Emotion::Sadness,
        Emotion::Joy,
        Emotion::Surprise,
        Emotion::Disgust,
    ];

    pub fn index(self) -> usize {
        match self {
            Emotion::Anger => 0,
            Emotion::Fear => 1,
            Emotion::Sadness => 2,
            Emotion::Joy => 3,
            Emotion::Surprise => 4,
            Emotion::Disgust => 5,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Emotion::Anger => "anger",
            Emotion::Fear => "fear",
            Emotion::Sadness => "sadness",
            Emotion::Joy => "joy",
            Emotion::Surprise => "surprise",
            Emotion::Disgust => "disgust",
        }
    }

    pub fn parse(s: &str) -> Option<Emotion> {
        Emotion::ALL.iter().copied().find(|e| e.as_str() == s)
    }
}

/// Word -> (polarity in [-1, 1], optional emotion tag).
#[derive(Debug, Clone, Default)]
pub struct Lexicon {
    entries: BTreeMap<String, (f64, Option<Emotion>)>,
}

/// The 9-dimensional feature vector: `[mean polarity of matched words,
/// fraction of words with polarity > 0, fraction with polarity < 0,
/// fraction tagged anger, fear, sadness, joy, surprise, disgust]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SentimentFeatures(pub [f64; SENTIMENT_DIM]);

impl SentimentFeatures {
    pub fn zero() -> Self {
        SentimentFeatures([0.0; SENTIMENT_DIM])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl Lexicon {
    pub fn from_entries<I>(entries: I) -> Result<Lexicon>
    where
        I: IntoIterator<Item = (String, f64, Option<Emotion>)>,
    {
        let mut map = BTreeMap::new();
        for (word, polarity, emotion) in entries {
            let word = word.to_lowercase();
            if word.is_empty() {
                return Err(Error::Data("lexicon word is empty".into()));
            }
            if !(-1.0..=1.0).contains(&polarity) {
                return Err(Error::Data(format!(
                    "polarity {polarity} of {word:?} outside [-1, 1]"
                )));
            }
            if map.insert(word.clone(), (polarity, emotion)).is_some() {
                return Err(Error::Data(format!("duplicate lexicon word {word:?}")));
            }
        }
        Ok(Lexicon { entries: map })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, word: &str) -> Option<(f64, Option<Emotion>)> {
        self.entries.get(word).copied()
    }

    /// Compute the feature vector for a text. Words are whitespace tokens,
    /// lower-cased, with non-alphanumeric characters trimmed from both ends;
    /// fractions are over the total word count while mean polarity averages
    /// over matched words only. No lexicon match yields the zero vector.
    pub fn extract_features(&self, text: &str) -> SentimentFeatures {
        let words: Vec<&str> = text.split_whitespace().collect();
        let total = words.len();
        if total == 0 {
            return SentimentFeatures::zero();
        }

        let mut matched = 0usize;
        let mut polarity_sum = 0.0;
        let mut positive = 0usize;
        let mut negative = 0usize;
        let mut emotions = [0usize; 6];
        for word in words {
            let cleaned = word
                .to_lowercase()
                .trim_matches(|c: char| !c.is_alphanumeric())
                .to_string();
            let Some((polarity, emotion)) = self.get(&cleaned) else {
                continue;
            };
            matched += 1;
            polarity_sum += polarity;
            if polarity > 0.0 {
                positive += 1;
            } else if polarity < 0.0 {
                negative += 1;
            }
            if let Some(e) = emotion {
                emotions[e.index()] += 1;
            }
        }

        let mut features = [0.0; SENTIMENT_DIM];
        if matched > 0 {
            features[0] = polarity_sum / matched as f64;
        }
        let n = total as f64;
        features[1] = positive as f64 / n;
        features[2] = negative as f64 / n;
        for (i, &count) in emotions.iter().enumerate() {
            features[3 + i] = count as f64 / n;
        }
        SentimentFeatures(features)
    }

    /// Write as TSV with header `word\tpolarity\temotion`, sorted by word.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::from("word\tpolarity\temotion\n");
        for (word, (polarity, emotion)) in &self.entries {
            out.push_str(word);
            out.push('\t');
            out.push_str(&polarity.to_string());
            out.push('\t');
            if let Some(e) = emotion {
                out.push_str(e.as_str());
            }
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Load a lexicon from a TSV file with columns word, polarity, emotion
/// (the emotion column may be empty).
pub fn load_lexicon(path: &Path) -> Result<Lexicon> {
    let content = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = content.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim_end() == "word\tpolarity\temotion" => {}
        _ => {
            return Err(Error::parse(
                path,
                1,
                "expected header `word\\tpolarity\\temotion`",
            ))
        }
    }

    let mut entries = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let mut cols = line.splitn(3, '\t');
        let word = cols
            .next()
            .ok_or_else(|| Error::parse(path, i + 1, "missing word column"))?;
        let polarity: f64 = cols
            .next()
            .ok_or_else(|| Error::parse(path, i + 1, "missing polarity column"))?
            .parse()
            .map_err(|e| Error::parse(path, i + 1, format!("bad polarity: {e}")))?;
        let emotion = match cols.next().map(str::trim_end) {
            None | Some("") => None,
            Some(tag) => Some(Emotion::parse(tag).ok_or_else(|| {
                Error::parse(path, i + 1, format!("unknown emotion tag {tag:?}"))
            })?),
        };
        entries.push((word.to_string(), polarity, emotion));
    }
    Lexicon::from_entries(entries).map_err(|e| match e {
        Error::Data(msg) => Error::parse(path, 0, msg),
        other => other,
    })
}
