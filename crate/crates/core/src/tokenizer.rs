//! Shared byte-fallback tokenizer.
//!
//! Ids 0..=255 are raw bytes, followed by four special tokens and a fixed
//! table of multi-byte pieces matched greedily (longest first). Any text
//! round-trips through `encode`/`decode`.

use std::collections::HashMap;

use crate::error::{invalid, Result};

pub const PAD: usize = 256;
pub const BOS: usize = 257;
pub const EOS: usize = 258;
pub const SEP: usize = 259;
pub const FIRST_PIECE: usize = 260;
pub const VOCAB_SIZE: usize = 512;

const PIECES: &str = include_str!("../data/vocab.txt");

#[derive(Clone, Debug)]
pub struct Tokenizer {
    pieces: Vec<Vec<u8>>,
    lookup: HashMap<Vec<u8>, usize>,
    max_piece_len: usize,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self::new()
    }
}

impl Tokenizer {
    pub fn new() -> Self {
        let pieces: Vec<Vec<u8>> = PIECES
            .lines()
            .filter(|l| !l.is_empty())
            .map(|l| l.replace('▁', " ").into_bytes())
            .collect();
        assert!(FIRST_PIECE + pieces.len() <= VOCAB_SIZE);
        let lookup = pieces
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), FIRST_PIECE + i))
            .collect();
        let max_piece_len = pieces.iter().map(|p| p.len()).max().unwrap_or(1);
        Self {
            pieces,
            lookup,
            max_piece_len,
        }
    }

    pub fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        let bytes = text.as_bytes();
        let mut out = Vec::with_capacity(bytes.len() / 3 + 1);
        let mut i = 0;
        while i < bytes.len() {
            let longest = self.max_piece_len.min(bytes.len() - i);
            let hit = (2..=longest)
                .rev()
                .find_map(|n| self.lookup.get(&bytes[i..i + n]).map(|&id| (id, n)));
            match hit {
                Some((id, n)) => {
                    out.push(id);
                    i += n;
                }
                None => {
                    out.push(bytes[i] as usize);
                    i += 1;
                }
            }
        }
        out
    }

    /// Decodes ids to text, skipping special tokens. Invalid UTF-8 from
    /// partial byte sequences is replaced, never an error.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut bytes = Vec::new();
        for &id in ids {
            if id < 256 {
                bytes.push(id as u8);
            } else if id >= FIRST_PIECE {
                if let Some(p) = self.pieces.get(id - FIRST_PIECE) {
                    bytes.extend_from_slice(p);
                }
            }
        }
        String::from_utf8_lossy(&bytes).into_owned()
    }

    /// `[BOS] + encode(text)`, truncated to `max_len` tokens.
    pub fn encode_for_text_tower(&self, text: &str, max_len: usize) -> Vec<usize> {
        let mut ids = vec![BOS];
        ids.extend(self.encode(text));
        ids.truncate(max_len);
        ids
    }
}

/// Checks a token sequence for the text tower.
pub fn check_sequence(ids: &[usize], max_len: usize, vocab: usize) -> Result<()> {
    if ids.is_empty() {
        return Err(invalid!("empty token sequence"));
    }
    if ids.len() > max_len {
        return Err(invalid!(
            "token sequence of length {} exceeds maximum {max_len}",
            ids.len()
        ));
    }
    if let Some(bad) = ids.iter().find(|&&id| id >= vocab) {
        return Err(invalid!("token id {bad} outside vocabulary of {vocab}"));
    }
    Ok(())
}
