//! Letter vocabulary and the index spaces derived from it.
//!
//! Three aligned index spaces are in play:
//! - CTC classes: 0 is the reserved blank, letter `i` maps to `i + 1`.
//! - Attention/LM output classes: letter `i` maps to `i`, the shared
//!   sentence-boundary symbol (sos/eos) sits at index `n_letters`.
//! - Embedding inputs: same as output classes (sos and eos share a row).

use crate::error::{Error, Result};

/// A letter of the recognizer vocabulary (never blank, never sos/eos).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Letter(pub usize);

pub type LabelSeq = Vec<Letter>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    n_letters: usize,
}

/// Index of the CTC blank class.
pub const BLANK: usize = 0;

const MAX_LETTERS: usize = 26;

impl Vocabulary {
    pub fn new(n_letters: usize) -> Result<Self> {
        if n_letters < 1 || n_letters > MAX_LETTERS {
            return Err(Error::Config(format!(
                "vocabulary size must be in 1..={MAX_LETTERS}, got {n_letters}"
            )));
        }
        Ok(Vocabulary { n_letters })
    }

    pub fn n_letters(&self) -> usize {
        self.n_letters
    }

    pub fn letters(&self) -> impl Iterator<Item = Letter> {
        (0..self.n_letters).map(Letter)
    }

    pub fn check(&self, l: Letter) -> Result<()> {
        if l.0 >= self.n_letters {
            return Err(Error::Vocabulary {
                index: l.0,
                size: self.n_letters,
            });
        }
        Ok(())
    }

    pub fn check_all(&self, labels: &[Letter]) -> Result<()> {
        labels.iter().try_for_each(|&l| self.check(l))
    }

    /// Blank + letters.
    pub fn n_ctc_classes(&self) -> usize {
        self.n_letters + 1
    }

    pub fn ctc_class(&self, l: Letter) -> usize {
        l.0 + 1
    }

    pub fn letter_of_ctc_class(&self, class: usize) -> Option<Letter> {
        if class == BLANK || class > self.n_letters {
            None
        } else {
            Some(Letter(class - 1))
        }
    }

    /// Letters + the sentence-boundary symbol.
    pub fn n_output_classes(&self) -> usize {
        self.n_letters + 1
    }

    pub fn output_class(&self, l: Letter) -> usize {
        l.0
    }

    /// Output/embedding index of the shared sos/eos symbol.
    pub fn boundary_class(&self) -> usize {
        self.n_letters
    }

    pub fn letter_char(&self, l: Letter) -> char {
        (b'a' + l.0 as u8) as char
    }

    pub fn parse_letter(&self, ch: char) -> Result<Letter> {
        let idx = (ch as i64) - ('a' as i64);
        if !(0..self.n_letters as i64).contains(&idx) {
            return Err(Error::Data(format!(
                "letter {ch:?} outside vocabulary of {} letters",
                self.n_letters
            )));
        }
        Ok(Letter(idx as usize))
    }

    /// Space-separated textual form, e.g. `a b a c`. Empty sequence → "".
    pub fn format_labels(&self, labels: &[Letter]) -> String {
        labels
            .iter()
            .map(|&l| self.letter_char(l).to_string())
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn parse_labels(&self, text: &str) -> Result<LabelSeq> {
        let mut out = Vec::new();
        for tok in text.split_whitespace() {
            let mut chars = tok.chars();
            let ch = chars.next().ok_or_else(|| Error::Data("empty label token".into()))?;
            if chars.next().is_some() {
                return Err(Error::Data(format!("label token {tok:?} is not a single letter")));
            }
            out.push(self.parse_letter(ch)?);
        }
        Ok(out)
    }
}
