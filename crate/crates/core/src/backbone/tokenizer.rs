//! Caption tokenization with caption-word to token-span bookkeeping.
//!
//! Captions are first split into words with the CLIP pre-tokenizer pattern;
//! each word then maps to one or more token ids. The span table lets masking
//! remove a whole word and lets a pseudo word take its place.

use std::collections::HashMap;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialTokens {
    pub sos: u32,
    pub eos: u32,
    pub pad: u32,
}

/// Token span occupied by one caption word.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordSpan {
    pub word: String,
    pub start: usize,
    pub count: usize,
}

/// Fixed-context token ids: `sos, w_1 … w_L, eos, pad …`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    /// Effective length including start and end symbols.
    pub length: usize,
    pub word_spans: Vec<WordSpan>,
    pub truncated: bool,
    pub specials: SpecialTokens,
}

impl TokenSequence {
    pub fn context_length(&self) -> usize {
        self.ids.len()
    }

    /// Row holding the end symbol.
    pub fn end_position(&self) -> usize {
        self.length - 1
    }

    pub fn words(&self) -> Vec<&str> {
        self.word_spans.iter().map(|s| s.word.as_str()).collect()
    }

    pub fn text(&self) -> String {
        self.words().join(" ")
    }

    /// Checks the start/end/padding layout.
    pub fn validate(&self) -> Result<()> {
        let ctx = self.ids.len();
        if self.length < 2 || self.length > ctx {
            return Err(Error::InvalidInput(format!(
                "token length {} outside [2, {ctx}]",
                self.length
            )));
        }
        if self.ids[0] != self.specials.sos {
            return Err(Error::InvalidInput("position 0 is not the start symbol".into()));
        }
        let eos_count = self.ids[..self.length]
            .iter()
            .filter(|&&id| id == self.specials.eos)
            .count();
        if self.ids[self.length - 1] != self.specials.eos || eos_count != 1 {
            return Err(Error::InvalidInput("sequence must hold exactly one end symbol".into()));
        }
        if self.ids[self.length..].iter().any(|&id| id != self.specials.pad) {
            return Err(Error::InvalidInput("non-padding token after the end symbol".into()));
        }
        for span in &self.word_spans {
            if span.start == 0 || span.start + span.count > self.length - 1 {
                return Err(Error::InvalidInput(format!(
                    "word span {:?} outside the content region",
                    span
                )));
            }
        }
        Ok(())
    }
}

fn word_pattern() -> &'static Regex {
    static PATTERN: OnceLock<Regex> = OnceLock::new();
    PATTERN.get_or_init(|| {
        Regex::new(r"'s|'t|'re|'ve|'m|'ll|'d|\p{L}+|\p{N}|[^\s\p{L}\p{N}]+")
            .expect("static pattern")
    })
}

/// Splits a caption into words, keeping the original casing.
pub fn split_words(text: &str) -> Vec<String> {
    let cleaned = text.split_whitespace().collect::<Vec<_>>().join(" ");
    word_pattern()
        .find_iter(&cleaned)
        .map(|m| m.as_str().to_string())
        .collect()
}

pub trait Tokenizer: Send + Sync {
    fn context_length(&self) -> usize;

    fn specials(&self) -> SpecialTokens;

    fn vocab_size(&self) -> usize;

    /// Token ids of one pre-split word.
    fn encode_word(&self, word: &str) -> Vec<u32>;

    /// Tokenizes free text. Empty text is rejected.
    fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        let words = split_words(text);
        if words.is_empty() {
            return Err(Error::InvalidInput("cannot tokenize empty text".into()));
        }
        Ok(self.tokenize_words(&words))
    }

    /// Builds a sequence from already split words; an empty list yields `sos, eos`.
    fn tokenize_words(&self, words: &[String]) -> TokenSequence {
        let ctx = self.context_length();
        let specials = self.specials();
        let capacity = ctx - 2;
        let mut ids = vec![specials.sos];
        let mut spans = Vec::with_capacity(words.len());
        let mut truncated = false;
        for word in words {
            let pieces = self.encode_word(word);
            if pieces.is_empty() {
                continue;
            }
            let room = capacity - (ids.len() - 1);
            if room == 0 {
                truncated = true;
                break;
            }
            let take = pieces.len().min(room);
            spans.push(WordSpan {
                word: word.clone(),
                start: ids.len(),
                count: take,
            });
            ids.extend_from_slice(&pieces[..take]);
            if take < pieces.len() {
                truncated = true;
                break;
            }
        }
        ids.push(specials.eos);
        let length = ids.len();
        ids.resize(ctx, specials.pad);
        TokenSequence {
            ids,
            length,
            word_spans: spans,
            truncated,
            specials,
        }
    }
}

/// Hashing word-piece tokenizer for the stub backbone.
///
/// Words are lowercased and cut into chunks of at most six characters, so long
/// words span several tokens. Ids 0, 1, 2 are pad, start and end.
#[derive(Debug, Clone)]
pub struct StubTokenizer {
    context_length: usize,
    vocab_size: usize,
}

impl StubTokenizer {
    pub const CHUNK: usize = 6;

    pub fn new(context_length: usize, vocab_size: usize) -> Self {
        assert!(context_length >= 3 && vocab_size > 3);
        Self {
            context_length,
            vocab_size,
        }
    }
}

fn fnv1a(bytes: &[u8], salt: u8) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in std::iter::once(&salt).chain(bytes) {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl Tokenizer for StubTokenizer {
    fn context_length(&self) -> usize {
        self.context_length
    }

    fn specials(&self) -> SpecialTokens {
        SpecialTokens {
            sos: 1,
            eos: 2,
            pad: 0,
        }
    }

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn encode_word(&self, word: &str) -> Vec<u32> {
        let lower: Vec<char> = word.to_lowercase().chars().collect();
        lower
            .chunks(Self::CHUNK)
            .enumerate()
            .map(|(i, chunk)| {
                let s: String = chunk.iter().collect();
                let salt = if i == 0 { 0 } else { 1 };
                3 + (fnv1a(s.as_bytes(), salt) % (self.vocab_size as u64 - 3)) as u32
            })
            .collect()
    }
}

/// Byte-level BPE tokenizer of the CLIP checkpoints (`vocab.json` + `merges.txt`).
#[derive(Debug, Clone)]
pub struct ClipTokenizer {
    encoder: HashMap<String, u32>,
    ranks: HashMap<(String, String), usize>,
    byte_map: [char; 256],
    specials: SpecialTokens,
    context_length: usize,
}

fn bytes_to_unicode() -> [char; 256] {
    let mut printable: Vec<u32> = (b'!' as u32..=b'~' as u32).collect();
    printable.extend(0xA1..=0xAC);
    printable.extend(0xAE..=0xFF);
    let mut map = ['\0'; 256];
    let mut extra = 0u32;
    for b in 0..256u32 {
        map[b as usize] = if printable.contains(&b) {
            char::from_u32(b).unwrap()
        } else {
            extra += 1;
            char::from_u32(255 + extra).unwrap()
        };
    }
    map
}

impl ClipTokenizer {
    pub const START: &'static str = "<|startoftext|>";
    pub const END: &'static str = "<|endoftext|>";

    pub fn new(
        encoder: HashMap<String, u32>,
        merges: &[(String, String)],
        context_length: usize,
    ) -> Result<Self> {
        let sos = *encoder
            .get(Self::START)
            .ok_or_else(|| Error::Config(format!("vocabulary lacks {}", Self::START)))?;
        let eos = *encoder
            .get(Self::END)
            .ok_or_else(|| Error::Config(format!("vocabulary lacks {}", Self::END)))?;
        let ranks = merges
            .iter()
            .cloned()
            .enumerate()
            .map(|(i, pair)| (pair, i))
            .collect();
        Ok(Self {
            encoder,
            ranks,
            byte_map: bytes_to_unicode(),
            specials: SpecialTokens { sos, eos, pad: 0 },
            context_length,
        })
    }

    /// Loads `vocab.json` and `merges.txt` from a checkpoint directory.
    pub fn from_dir(dir: &Path, context_length: usize) -> Result<Self> {
        let vocab_path = dir.join("vocab.json");
        let text = std::fs::read_to_string(&vocab_path).map_err(|e| Error::io(&vocab_path, e))?;
        let encoder: HashMap<String, u32> =
            serde_json::from_str(&text).map_err(|e| Error::Malformed {
                path: vocab_path.clone(),
                line: e.line(),
                column: e.column(),
                message: e.to_string(),
            })?;
        let merges_path = dir.join("merges.txt");
        let text = std::fs::read_to_string(&merges_path).map_err(|e| Error::io(&merges_path, e))?;
        let merges: Vec<(String, String)> = text
            .lines()
            .filter(|l| !l.starts_with("#version") && !l.trim().is_empty())
            .filter_map(|l| {
                let mut parts = l.split(' ');
                Some((parts.next()?.to_string(), parts.next()?.to_string()))
            })
            .collect();
        Self::new(encoder, &merges, context_length)
    }

    fn bpe(&self, token: &str) -> Vec<String> {
        let chars: Vec<char> = token.chars().collect();
        let mut word: Vec<String> = chars.iter().map(|c| c.to_string()).collect();
        if let Some(last) = word.last_mut() {
            last.push_str("</w>");
        }
        loop {
            if word.len() < 2 {
                break;
            }
            let best = word
                .windows(2)
                .filter_map(|w| {
                    self.ranks
                        .get(&(w[0].clone(), w[1].clone()))
                        .map(|&r| (r, w[0].clone(), w[1].clone()))
                })
                .min_by_key(|(r, _, _)| *r);
            let Some((_, first, second)) = best else { break };
            let mut merged = Vec::with_capacity(word.len());
            let mut i = 0;
            while i < word.len() {
                if i + 1 < word.len() && word[i] == first && word[i + 1] == second {
                    merged.push(format!("{first}{second}"));
                    i += 2;
                } else {
                    merged.push(word[i].clone());
                    i += 1;
                }
            }
            word = merged;
        }
        word
    }
}

impl Tokenizer for ClipTokenizer {
    fn context_length(&self) -> usize {
        self.context_length
    }

    fn specials(&self) -> SpecialTokens {
        self.specials
    }

    fn vocab_size(&self) -> usize {
        self.encoder.len()
    }

    fn encode_word(&self, word: &str) -> Vec<u32> {
        let lower = word.to_lowercase();
        let mapped: String = lower.bytes().map(|b| self.byte_map[b as usize]).collect();
        self.bpe(&mapped)
            .iter()
            .filter_map(|piece| {
                let id = self.encoder.get(piece).copied();
                if id.is_none() {
                    log::warn!("BPE piece {piece:?} missing from vocabulary");
                }
                id
            })
            .collect()
    }
}
