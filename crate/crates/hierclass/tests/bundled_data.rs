//! Sanity checks over the data files shipped in `data/`: the two synthetic
//! datasets, the starter lexicon and the mixed-language tokenizer corpus.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use hierclass::corpus::{class_distribution, load_dataset, DataFormat};
use hierclass::sentiment::{load_lexicon, Emotion};

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

#[test]
fn three_label_dataset_shape() {
    let ds = load_dataset(&data_dir().join("synthetic_600.csv"), DataFormat::Csv).unwrap();
    assert_eq!(ds.len(), 600);
    let counts = class_distribution(&ds);
    assert_eq!(counts["offensive"], 360);
    assert_eq!(counts["hate"], 90);
    assert_eq!(counts["neither"], 150);
}

#[test]
fn three_label_dataset_markers_are_disjoint() {
    let ds = load_dataset(&data_dir().join("synthetic_600.csv"), DataFormat::Csv).unwrap();
    // Words that appear under one label only, per label.
    let mut by_label: std::collections::BTreeMap<&str, BTreeSet<&str>> = Default::default();
    for rec in ds.records() {
        by_label
            .entry(rec.label.as_str())
            .or_default()
            .extend(rec.text.split_whitespace());
    }
    let labels: Vec<&str> = by_label.keys().copied().collect();
    let mut marker_count = 0;
    for &label in &labels {
        let others: BTreeSet<&str> = labels
            .iter()
            .filter(|l| **l != label)
            .flat_map(|l| by_label[l].iter().copied())
            .collect();
        let markers: Vec<&str> = by_label[label].difference(&others).copied().collect();
        assert!(
            !markers.is_empty(),
            "label {label} has no exclusive marker words"
        );
        marker_count += markers.len();
    }
    assert!(marker_count >= 9, "expected several markers per label");
}

#[test]
fn binary_dataset_shape() {
    let ds = load_dataset(&data_dir().join("synthetic_64.csv"), DataFormat::Csv).unwrap();
    assert_eq!(ds.len(), 64);
    let counts = class_distribution(&ds);
    assert_eq!(counts.len(), 2);
    assert_eq!(counts["hate"], 32);
    assert_eq!(counts["neither"], 32);
}

#[test]
fn starter_lexicon_loads_and_covers_all_emotions() {
    let lexicon = load_lexicon(&data_dir().join("lexicon.tsv")).unwrap();
    assert!(
        lexicon.len() >= 100,
        "starter lexicon has {}",
        lexicon.len()
    );
    for emotion in Emotion::ALL {
        let covered = ["abuse", "afraid", "cry", "joy", "shock", "gross", "amazed"]
            .iter()
            .chain(["vilify", "dread", "mourn", "picnic", "stunned", "vile"].iter())
            .any(|w| matches!(lexicon.get(w), Some((_, Some(e))) if e == emotion));
        assert!(covered, "no bundled word tagged {emotion:?}");
    }
    // The synthetic marker words participate in sentiment features.
    for marker in ["vilify", "crude", "picnic", "sunshine", "denigrate"] {
        assert!(
            lexicon.get(marker).is_some(),
            "{marker} missing from lexicon"
        );
    }
}

#[test]
fn mixed_corpus_is_large_and_multilingual() {
    let text = std::fs::read_to_string(data_dir().join("mixed_corpus.txt")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines.len() >= 500);
    let non_ascii = lines.iter().filter(|l| !l.is_ascii()).count();
    assert!(
        non_ascii > lines.len() / 2,
        "corpus should be mostly non-ASCII, got {non_ascii}"
    );
}
