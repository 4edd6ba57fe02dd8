//! Phoneme inventory, word vocabulary and the pronunciation lexicon.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The 39 ARPAbet phonemes, without stress markers.
pub const ARPABET: [&str; 39] = [
    "AA", "AE", "AH", "AO", "AW", "AY", "B", "CH", "D", "DH", "EH", "ER", "EY", "F", "G", "HH",
    "IH", "IY", "JH", "K", "L", "M", "N", "NG", "OW", "OY", "P", "R", "S", "SH", "T", "TH", "UH",
    "UW", "V", "W", "Y", "Z", "ZH",
];

/// Fixed phoneme id space: 39 phonemes, then BOS, EOS, PAD and the CTC blank.
pub struct PhonemeVocab;

impl PhonemeVocab {
    pub const N_PHONEMES: usize = 39;
    pub const BOS: usize = 39;
    pub const EOS: usize = 40;
    pub const PAD: usize = 41;
    /// Always the last id.
    pub const BLANK: usize = 42;
    /// Everything except the blank; the autoregressive decoder's output space.
    pub const DECODER_SIZE: usize = 42;
    pub const SIZE: usize = 43;

    pub fn symbol(id: usize) -> &'static str {
        match id {
            i if i < Self::N_PHONEMES => ARPABET[i],
            Self::BOS => "<bos>",
            Self::EOS => "<eos>",
            Self::PAD => "<pad>",
            Self::BLANK => "<blank>",
            _ => "<unk>",
        }
    }

    pub fn id(symbol: &str) -> Option<usize> {
        ARPABET.iter().position(|&s| s == symbol)
    }

    pub fn symbols() -> Vec<String> {
        (0..Self::SIZE).map(|i| Self::symbol(i).to_string()).collect()
    }

    pub fn is_boundary(id: usize) -> bool {
        matches!(id, Self::BOS | Self::EOS | Self::PAD)
    }
}

/// Built-in word list with ARPAbet pronunciations, shortest-first so small
/// vocabularies stay cheap to decode.
const WORD_LIST: &[(&str, &str)] = &[
    ("the", "DH AH"),
    ("a", "AH"),
    ("i", "AY"),
    ("you", "Y UW"),
    ("we", "W IY"),
    ("it", "IH T"),
    ("is", "IH Z"),
    ("do", "D UW"),
    ("know", "N OW"),
    ("where", "W EH R"),
    ("way", "W EY"),
    ("why", "W AY"),
    ("in", "IH N"),
    ("back", "B AE K"),
    ("so", "S OW"),
    ("not", "N AA T"),
    ("man", "M AE N"),
    ("of", "AH V"),
    ("his", "HH IH Z"),
    ("he", "HH IY"),
    ("for", "F AO R"),
    ("now", "N AW"),
    ("good", "G UH D"),
    ("that", "DH AE T"),
    ("they", "DH EY"),
    ("have", "HH AE V"),
    ("gone", "G AO N"),
    ("read", "R IY D"),
    ("short", "SH AO R T"),
    ("think", "TH IH NG K"),
    ("very", "V EH R IY"),
    ("open", "OW P AH N"),
    ("hard", "HH AA R D"),
    ("mass", "M AE S"),
    ("nine", "N AY N"),
    ("might", "M AY T"),
    ("just", "JH AH S T"),
    ("many", "M EH N IY"),
    ("choice", "CH OY S"),
    ("yes", "Y EH S"),
    ("rules", "R UW L Z"),
    ("fifty", "F IH F T IY"),
    ("below", "B IH L OW"),
    ("gallon", "G AE L AH N"),
    ("cases", "K EY S AH Z"),
    ("taxes", "T AE K S AH Z"),
    ("special", "S P EH SH AH L"),
    ("fifteen", "F IH F T IY N"),
    ("decision", "D IH S IH ZH AH N"),
    ("thing", "TH IH NG"),
];

pub fn builtin_word_count() -> usize {
    WORD_LIST.len()
}

/// Word ids `0..n`, followed by BOS, EOS and PAD for the word decoder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordVocab {
    words: Vec<String>,
}

impl WordVocab {
    pub fn new(words: Vec<String>) -> Self {
        Self { words }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn bos(&self) -> usize {
        self.words.len()
    }

    pub fn eos(&self) -> usize {
        self.words.len() + 1
    }

    pub fn pad(&self) -> usize {
        self.words.len() + 2
    }

    /// Output space of the word decoder (words plus BOS/EOS/PAD).
    pub fn decoder_size(&self) -> usize {
        self.words.len() + 3
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| w == word)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Joins word ids into text, skipping special tokens.
    pub fn text(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter_map(|&i| self.word(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Word to phoneme-id pronunciation map; the grapheme-to-phoneme stage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lexicon {
    entries: BTreeMap<String, Vec<u16>>,
}

impl Lexicon {
    pub fn new(entries: BTreeMap<String, Vec<u16>>) -> Result<Self> {
        for (w, p) in &entries {
            if p.is_empty() {
                return Err(Error::Config(format!("empty pronunciation for {w:?}")));
            }
            if p.iter().any(|&id| id as usize >= PhonemeVocab::N_PHONEMES) {
                return Err(Error::Config(format!(
                    "pronunciation of {w:?} uses a non-phoneme id"
                )));
            }
        }
        Ok(Self { entries })
    }

    /// The first `n` built-in words and their lexicon.
    pub fn builtin(n: usize) -> Result<(WordVocab, Lexicon)> {
        if n == 0 || n > WORD_LIST.len() {
            return Err(Error::Config(format!(
                "vocab_size {n} outside 1..={} supported by the built-in lexicon",
                WORD_LIST.len()
            )));
        }
        let mut entries = BTreeMap::new();
        let mut words = Vec::with_capacity(n);
        for &(w, pron) in &WORD_LIST[..n] {
            let ids = pron
                .split_whitespace()
                .map(|s| {
                    PhonemeVocab::id(s)
                        .map(|i| i as u16)
                        .ok_or_else(|| Error::Config(format!("unknown phoneme {s} in {w}")))
                })
                .collect::<Result<Vec<_>>>()?;
            entries.insert(w.to_string(), ids);
            words.push(w.to_string());
        }
        Ok((WordVocab::new(words), Lexicon::new(entries)?))
    }

    pub fn get(&self, word: &str) -> Option<&[u16]> {
        self.entries.get(word).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Checks that every vocabulary word has a pronunciation.
    pub fn covers(&self, vocab: &WordVocab) -> Result<()> {
        for w in vocab.words() {
            if !self.entries.contains_key(w) {
                return Err(Error::Config(format!("word {w:?} missing from lexicon")));
            }
        }
        Ok(())
    }

    /// Concatenated pronunciation of whitespace-separated `text`; `None` if
    /// any word is out of vocabulary.
    pub fn g2p(&self, text: &str) -> Option<Vec<usize>> {
        let mut out = Vec::new();
        for w in text.split_whitespace() {
            out.extend(self.get(w)?.iter().map(|&p| p as usize));
        }
        Some(out)
    }

    /// Pronunciation of a word-id sequence.
    pub fn g2p_ids(&self, vocab: &WordVocab, ids: &[usize]) -> Option<Vec<usize>> {
        let mut out = Vec::new();
        for &i in ids {
            out.extend(self.get(vocab.word(i)?)?.iter().map(|&p| p as usize));
        }
        Some(out)
    }
}
