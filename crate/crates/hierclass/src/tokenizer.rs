//! Byte-level byte-pair-encoding tokenizer.
//!
//! Every one of the 256 byte values is a base token, so any UTF-8 text
//! encodes without unknowns and `decode(encode(x)) == x` byte-exact for
//! untruncated inputs. Training merges the most frequent adjacent token
//! pair at each step, breaking frequency ties lexicographically on the
//! (left, right) byte strings.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const CLS_ID: u32 = 1;
pub const SEP_ID: u32 = 2;
pub const UNK_ID: u32 = 3;

/// ids 0-3 are specials, 4-259 the byte tokens, merges start at 260.
const BYTE_BASE: u32 = 4;
const FIRST_MERGE_ID: u32 = 260;
/// 4 specials + 256 byte tokens.
pub const MIN_VOCAB_SIZE: usize = 260;

const SPECIAL_NAMES: [&str; 4] = ["[PAD]", "[CLS]", "[SEP]", "[UNK]"];

/// A `[CLS] ... [SEP]`-framed, right-padded id sequence of fixed length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    /// 1 for real tokens (including CLS/SEP), 0 for padding.
    pub mask: Vec<u8>,
}

impl TokenSequence {
    /// Number of non-padding positions.
    pub fn seq_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }

    pub fn max_len(&self) -> usize {
        self.ids.len()
    }
}

#[derive(Debug, Clone)]
pub struct Tokenizer {
    /// id -> byte content; empty for the four specials.
    token_bytes: Vec<Vec<u8>>,
    token_ids: HashMap<Vec<u8>, u32>,
    /// Merge pairs in rank order; merge k produces token id 260 + k.
    merges: Vec<(u32, u32)>,
    merge_rank: HashMap<(u32, u32), u32>,
}

impl Tokenizer {
    /// Train on a corpus of lines. Pairs are counted within lines, never
    /// across them. Produces at most `vocab_size` tokens; fewer when no
    /// adjacent pairs remain to merge.
    pub fn train<S: AsRef<str>>(lines: &[S], vocab_size: usize) -> Result<Tokenizer> {
        if lines.is_empty() {
            return Err(Error::Data("tokenizer corpus is empty".into()));
        }
        if vocab_size < MIN_VOCAB_SIZE {
            return Err(Error::Config(format!(
                "vocab_size must be at least {MIN_VOCAB_SIZE} (4 specials + 256 bytes), got {vocab_size}"
            )));
        }

        let mut tok = Tokenizer::base();
        let mut seqs: Vec<Vec<u32>> = lines
            .iter()
            .map(|l| l.as_ref().bytes().map(|b| BYTE_BASE + b as u32).collect())
            .collect();

        let budget = vocab_size - MIN_VOCAB_SIZE;
        for step in 0..budget {
            let Some(pair) = tok.most_frequent_pair(&seqs) else {
                break;
            };
            let new_id = FIRST_MERGE_ID + step as u32;
            let mut bytes = tok.token_bytes[pair.0 as usize].clone();
            bytes.extend_from_slice(&tok.token_bytes[pair.1 as usize]);
            tok.token_bytes.push(bytes.clone());
            tok.token_ids.insert(bytes, new_id);
            tok.merges.push(pair);
            tok.merge_rank.insert(pair, step as u32);
            for seq in &mut seqs {
                *seq = merge_pair(seq, pair, new_id);
            }
        }
        Ok(tok)
    }

    /// The merge-free tokenizer: specials plus the 256 byte tokens.
    fn base() -> Tokenizer {
        let mut token_bytes: Vec<Vec<u8>> = vec![Vec::new(); 4];
        let mut token_ids = HashMap::new();
        for b in 0u32..256 {
            token_bytes.push(vec![b as u8]);
            token_ids.insert(vec![b as u8], BYTE_BASE + b);
        }
        Tokenizer {
            token_bytes,
            token_ids,
            merges: Vec::new(),
            merge_rank: HashMap::new(),
        }
    }

    /// Highest-count adjacent pair over all sequences; ties broken by the
    /// lexicographically smallest (left bytes, right bytes).
    fn most_frequent_pair(&self, seqs: &[Vec<u32>]) -> Option<(u32, u32)> {
        let mut counts: HashMap<(u32, u32), usize> = HashMap::new();
        for seq in seqs {
            for w in seq.windows(2) {
                *counts.entry((w[0], w[1])).or_insert(0) += 1;
            }
        }
        counts
            .into_iter()
            .min_by(|(pa, ca), (pb, cb)| {
                cb.cmp(ca).then_with(|| {
                    let ka = (
                        &self.token_bytes[pa.0 as usize],
                        &self.token_bytes[pa.1 as usize],
                    );
                    let kb = (
                        &self.token_bytes[pb.0 as usize],
                        &self.token_bytes[pb.1 as usize],
                    );
                    ka.cmp(&kb)
                })
            })
            .map(|(pair, _)| pair)
    }

    pub fn vocab_size(&self) -> usize {
        self.token_bytes.len()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    /// Byte content of a token id; empty for specials.
    pub fn token_content(&self, id: u32) -> &[u8] {
        &self.token_bytes[id as usize]
    }

    /// BPE pieces of a text, without framing or padding.
    pub fn piece_ids(&self, text: &str) -> Vec<u32> {
        let mut ids: Vec<u32> = text.bytes().map(|b| BYTE_BASE + b as u32).collect();
        loop {
            // Apply the lowest-ranked merge present anywhere in the sequence.
            let best = ids
                .windows(2)
                .filter_map(|w| self.merge_rank.get(&(w[0], w[1])).copied())
                .min();
            let Some(rank) = best else { break };
            let pair = self.merges[rank as usize];
            ids = merge_pair(&ids, pair, FIRST_MERGE_ID + rank);
        }
        ids
    }

    /// Encode as `[CLS] pieces [SEP]` truncated to `max_len` (the frame
    /// always fits) and right-padded. Panics if `max_len < 2`.
    pub fn encode(&self, text: &str, max_len: usize) -> TokenSequence {
        assert!(max_len >= 2, "max_len must be at least 2, got {max_len}");
        let mut pieces = self.piece_ids(text);
        pieces.truncate(max_len - 2);

        let mut ids = Vec::with_capacity(max_len);
        ids.push(CLS_ID);
        ids.extend_from_slice(&pieces);
        ids.push(SEP_ID);
        let used = ids.len();
        ids.resize(max_len, PAD_ID);

        let mut mask = vec![1u8; used];
        mask.resize(max_len, 0);
        TokenSequence { ids, mask }
    }

    /// Concatenate the bytes of all non-special, non-padding tokens and
    /// decode as UTF-8 (lossy on sequences truncated mid-codepoint).
    /// Panics on ids outside the vocabulary.
    pub fn decode(&self, seq: &TokenSequence) -> String {
        let mut bytes = Vec::new();
        for &id in &seq.ids {
            assert!(
                (id as usize) < self.token_bytes.len(),
                "token id {id} out of range for vocab of {}",
                self.token_bytes.len()
            );
            if id > UNK_ID {
                bytes.extend_from_slice(&self.token_bytes[id as usize]);
            }
        }
        String::from_utf8_lossy(&bytes).into_owned()
    }

    /// Serialize as `vocab.json` (token string -> id) and `merges.txt`
    /// (one `left right` pair per line, rank = line order).
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let vocab_path = dir.join("vocab.json");
        let mut vocab: BTreeMap<String, u32> = BTreeMap::new();
        for (name, id) in SPECIAL_NAMES.iter().zip(0u32..) {
            vocab.insert(name.to_string(), id);
        }
        for (id, bytes) in self.token_bytes.iter().enumerate().skip(4) {
            vocab.insert(bytes_to_printable(bytes), id as u32);
        }
        let json = serde_json::to_string_pretty(&vocab).expect("vocab serialization cannot fail");
        std::fs::write(&vocab_path, json).map_err(|e| Error::io(&vocab_path, e))?;

        let merges_path = dir.join("merges.txt");
        let mut out = String::new();
        for &(l, r) in &self.merges {
            out.push_str(&bytes_to_printable(&self.token_bytes[l as usize]));
            out.push(' ');
            out.push_str(&bytes_to_printable(&self.token_bytes[r as usize]));
            out.push('\n');
        }
        std::fs::write(&merges_path, out).map_err(|e| Error::io(&merges_path, e))?;
        Ok(())
    }

    /// Reload a tokenizer saved by [`Tokenizer::save`], bit-exactly.
    pub fn load(dir: &Path) -> Result<Tokenizer> {
        let vocab_path = dir.join("vocab.json");
        let json = std::fs::read_to_string(&vocab_path).map_err(|e| Error::io(&vocab_path, e))?;
        let vocab: BTreeMap<String, u32> = serde_json::from_str(&json)
            .map_err(|e| Error::parse(&vocab_path, 0, format!("invalid vocab.json: {e}")))?;

        let n = vocab.len();
        let mut token_bytes: Vec<Option<Vec<u8>>> = vec![None; n];
        for (token, id) in &vocab {
            let idx = *id as usize;
            if idx >= n {
                return Err(Error::Checkpoint(format!(
                    "vocab.json: id {id} out of range for {n} tokens"
                )));
            }
            if token_bytes[idx].is_some() {
                return Err(Error::Checkpoint(format!("vocab.json: duplicate id {id}")));
            }
            let bytes = if SPECIAL_NAMES.contains(&token.as_str()) {
                Vec::new()
            } else {
                printable_to_bytes(token).ok_or_else(|| {
                    Error::Checkpoint(format!("vocab.json: unmappable token {token:?}"))
                })?
            };
            token_bytes[idx] = Some(bytes);
        }
        let token_bytes: Vec<Vec<u8>> = token_bytes
            .into_iter()
            .map(|t| t.ok_or_else(|| Error::Checkpoint("vocab.json: non-contiguous ids".into())))
            .collect::<Result<_>>()?;
        for (name, id) in SPECIAL_NAMES.iter().zip(0u32..) {
            if vocab.get(*name) != Some(&id) {
                return Err(Error::Checkpoint(format!(
                    "vocab.json: special token {name} must have id {id}"
                )));
            }
        }
        for b in 0u32..256 {
            if token_bytes[(BYTE_BASE + b) as usize] != [b as u8] {
                return Err(Error::Checkpoint(format!(
                    "vocab.json: id {} is not the byte token for 0x{b:02x}",
                    BYTE_BASE + b
                )));
            }
        }

        let mut token_ids = HashMap::new();
        for (id, bytes) in token_bytes.iter().enumerate().skip(4) {
            token_ids.insert(bytes.clone(), id as u32);
        }

        let merges_path = dir.join("merges.txt");
        let text = std::fs::read_to_string(&merges_path).map_err(|e| Error::io(&merges_path, e))?;
        let mut merges = Vec::new();
        let mut merge_rank = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let (left, right) = line
                .split_once(' ')
                .ok_or_else(|| Error::parse(&merges_path, i + 1, "expected `left right`"))?;
            let lb = printable_to_bytes(left)
                .ok_or_else(|| Error::parse(&merges_path, i + 1, "unmappable left token"))?;
            let rb = printable_to_bytes(right)
                .ok_or_else(|| Error::parse(&merges_path, i + 1, "unmappable right token"))?;
            let lid = *token_ids
                .get(&lb)
                .ok_or_else(|| Error::parse(&merges_path, i + 1, "left token not in vocabulary"))?;
            let rid = *token_ids.get(&rb).ok_or_else(|| {
                Error::parse(&merges_path, i + 1, "right token not in vocabulary")
            })?;
            let mut merged = lb;
            merged.extend_from_slice(&rb);
            let expect = FIRST_MERGE_ID + i as u32;
            if token_ids.get(&merged) != Some(&expect) {
                return Err(Error::parse(
                    &merges_path,
                    i + 1,
                    format!("merge does not produce token id {expect}"),
                ));
            }
            merges.push((lid, rid));
            merge_rank.insert((lid, rid), i as u32);
        }
        if token_bytes.len() != MIN_VOCAB_SIZE + merges.len() {
            return Err(Error::Checkpoint(format!(
                "vocab has {} tokens but merges.txt defines {}",
                token_bytes.len(),
                merges.len()
            )));
        }
        Ok(Tokenizer {
            token_bytes,
            token_ids,
            merges,
            merge_rank,
        })
    }
}

/// Replace non-overlapping occurrences of `pair`, left to right.
fn merge_pair(seq: &[u32], pair: (u32, u32), new_id: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(seq.len());
    let mut i = 0;
    while i < seq.len() {
        if i + 1 < seq.len() && seq[i] == pair.0 && seq[i + 1] == pair.1 {
            out.push(new_id);
            i += 2;
        } else {
            out.push(seq[i]);
            i += 1;
        }
    }
    out
}

/// Bijective byte -> printable-char table. Bytes that are printable and not
/// whitespace map to themselves; the rest map to code points from 256 up, so
/// token strings are always valid UTF-8 and contain no spaces or newlines.
fn byte_char_table() -> [char; 256] {
    let mut table = ['\0'; 256];
    let mut next = 256u32;
    for b in 0u32..256 {
        let printable =
            (0x21..=0x7e).contains(&b) || (0xa1..=0xac).contains(&b) || (0xae..=0xff).contains(&b);
        table[b as usize] = if printable {
            char::from_u32(b).unwrap()
        } else {
            let c = char::from_u32(next).unwrap();
            next += 1;
            c
        };
    }
    table
}

fn bytes_to_printable(bytes: &[u8]) -> String {
    let table = byte_char_table();
    bytes.iter().map(|&b| table[b as usize]).collect()
}

fn printable_to_bytes(s: &str) -> Option<Vec<u8>> {
    let table = byte_char_table();
    let mut inverse = HashMap::new();
    for (b, &c) in table.iter().enumerate() {
        inverse.insert(c, b as u8);
    }
    s.chars().map(|c| inverse.get(&c).copied()).collect()
}
