//! Peptide tokens, the 7-slot sequence frame, and the validity rules.
//!
//! Token indices are fixed: the 20 canonical amino acids in alphabetical order
//! of their one-letter codes occupy `0..20`, followed by `START = 20`,
//! `END = 21` and `PAD = 22`. A valid frame is exactly
//! `START r1 r2 r3 r4 r5 END`; anything a decoder emits after `END` must be
//! `PAD`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::SequenceError;

/// One-letter codes, in token order.
pub const AMINO_ACIDS: &[u8; 20] = b"ACDEFGHIKLMNPQRSTVWY";
pub const NUM_RESIDUES: usize = 20;
pub const PEPTIDE_LEN: usize = 5;
/// START + residues + END.
pub const FRAME_LEN: usize = PEPTIDE_LEN + 2;
pub const VOCAB_SIZE: usize = 23;
/// Number of distinct peptides of length 5.
pub const SPACE_SIZE: u32 = 3_200_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Token(u8);

impl Token {
    pub const START: Token = Token(20);
    pub const END: Token = Token(21);
    pub const PAD: Token = Token(22);

    pub fn from_index(index: usize) -> Option<Token> {
        (index < VOCAB_SIZE).then_some(Token(index as u8))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn residue(self) -> Option<Residue> {
        (self.index() < NUM_RESIDUES).then_some(Residue(self.0))
    }

    pub fn is_residue(self) -> bool {
        self.index() < NUM_RESIDUES
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Token::START => f.write_str("<start>"),
            Token::END => f.write_str("<end>"),
            Token::PAD => f.write_str("<pad>"),
            t => write!(f, "{}", AMINO_ACIDS[t.index()] as char),
        }
    }
}

/// A canonical amino acid, stored as its token index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Residue(u8);

impl Residue {
    pub fn from_letter(letter: char) -> Option<Residue> {
        let byte = u8::try_from(letter).ok()?;
        AMINO_ACIDS.iter().position(|&c| c == byte).map(|i| Residue(i as u8))
    }

    pub fn from_index(index: usize) -> Option<Residue> {
        (index < NUM_RESIDUES).then_some(Residue(index as u8))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn letter(self) -> char {
        AMINO_ACIDS[self.index()] as char
    }

    pub fn token(self) -> Token {
        Token(self.0)
    }

    pub fn all() -> impl Iterator<Item = Residue> {
        (0..NUM_RESIDUES as u8).map(Residue)
    }
}

/// A valid 5-residue peptide extension.
///
/// Ordering is lexicographic by letter, which is also the order of
/// [`Peptide::space_index`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Peptide([Residue; PEPTIDE_LEN]);

impl Peptide {
    pub fn new(residues: [Residue; PEPTIDE_LEN]) -> Self {
        Peptide(residues)
    }

    pub fn parse(s: &str) -> Result<Peptide, SequenceError> {
        let len = s.chars().count();
        if len != PEPTIDE_LEN {
            // Unknown letters take precedence so that "IRXYK" reports the X.
            if let Some((position, letter)) = s.chars().enumerate().find(|&(_, c)| Residue::from_letter(c).is_none()) {
                return Err(SequenceError::UnknownLetter { letter, position });
            }
            return Err(SequenceError::WrongLength { len });
        }
        let mut residues = [Residue(0); PEPTIDE_LEN];
        for (position, letter) in s.chars().enumerate() {
            residues[position] =
                Residue::from_letter(letter).ok_or(SequenceError::UnknownLetter { letter, position })?;
        }
        Ok(Peptide(residues))
    }

    pub fn residues(&self) -> &[Residue; PEPTIDE_LEN] {
        &self.0
    }

    /// Position in the enumeration of all 3.2M peptides (base-20, first residue most significant).
    pub fn space_index(&self) -> u32 {
        self.0
            .iter()
            .fold(0u32, |acc, r| acc * NUM_RESIDUES as u32 + r.0 as u32)
    }

    pub fn from_space_index(mut index: u32) -> Option<Peptide> {
        if index >= SPACE_SIZE {
            return None;
        }
        let mut residues = [Residue(0); PEPTIDE_LEN];
        for slot in residues.iter_mut().rev() {
            *slot = Residue((index % NUM_RESIDUES as u32) as u8);
            index /= NUM_RESIDUES as u32;
        }
        Some(Peptide(residues))
    }

    pub fn to_tokens(&self) -> TokenSeq {
        let mut tokens = Vec::with_capacity(FRAME_LEN);
        tokens.push(Token::START);
        tokens.extend(self.0.iter().map(|r| r.token()));
        tokens.push(Token::END);
        TokenSeq(tokens)
    }

    /// Frame token indices, the form the networks consume.
    pub fn frame(&self) -> [usize; FRAME_LEN] {
        let mut frame = [Token::START.index(); FRAME_LEN];
        for (slot, r) in frame[1..=PEPTIDE_LEN].iter_mut().zip(self.0.iter()) {
            *slot = r.index();
        }
        frame[FRAME_LEN - 1] = Token::END.index();
        frame
    }
}

impl fmt::Display for Peptide {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.0 {
            write!(f, "{}", r.letter())?;
        }
        Ok(())
    }
}

impl fmt::Debug for Peptide {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Peptide({self})")
    }
}

impl FromStr for Peptide {
    type Err = SequenceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Peptide::parse(s)
    }
}

impl Serialize for Peptide {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Peptide {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Peptide::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// A raw token sequence, possibly invalid (decoder output).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSeq(Vec<Token>);

impl TokenSeq {
    pub fn new(tokens: Vec<Token>) -> Self {
        TokenSeq(tokens)
    }

    pub fn from_indices(indices: &[usize]) -> Option<Self> {
        indices
            .iter()
            .map(|&i| Token::from_index(i))
            .collect::<Option<Vec<_>>>()
            .map(TokenSeq)
    }

    pub fn tokens(&self) -> &[Token] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for TokenSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in &self.0 {
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ValidityReason {
    Ok,
    WrongLength,
    PadBeforeEnd,
    MalformedControl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ValidityReport {
    pub is_valid: bool,
    pub reason: ValidityReason,
}

impl ValidityReport {
    pub fn from_reason(reason: ValidityReason) -> Self {
        ValidityReport {
            is_valid: reason == ValidityReason::Ok,
            reason,
        }
    }
}

pub fn tokenize(sequence: &str) -> Result<TokenSeq, SequenceError> {
    Peptide::parse(sequence).map(|p| p.to_tokens())
}

/// Reads a frame back into a peptide. Invalid frames are reported, not raised.
pub fn detokenize(seq: &TokenSeq) -> (Option<Peptide>, ValidityReport) {
    match check_frame(seq.tokens()) {
        Ok(peptide) => (Some(peptide), ValidityReport::from_reason(ValidityReason::Ok)),
        Err(reason) => (None, ValidityReport::from_reason(reason)),
    }
}

fn check_frame(tokens: &[Token]) -> Result<Peptide, ValidityReason> {
    if tokens.first() != Some(&Token::START) {
        return Err(ValidityReason::MalformedControl);
    }
    let mut residues = Vec::with_capacity(PEPTIDE_LEN);
    let mut end_at = None;
    for (i, &t) in tokens.iter().enumerate().skip(1) {
        match t {
            Token::END => {
                end_at = Some(i);
                break;
            }
            Token::PAD => return Err(ValidityReason::PadBeforeEnd),
            Token::START => return Err(ValidityReason::MalformedControl),
            t => residues.push(t.residue().expect("non-control token is a residue")),
        }
    }
    if residues.len() != PEPTIDE_LEN {
        return Err(ValidityReason::WrongLength);
    }
    let Some(end_at) = end_at else {
        return Err(ValidityReason::MalformedControl);
    };
    if tokens[end_at + 1..].iter().any(|&t| t != Token::PAD) {
        return Err(ValidityReason::MalformedControl);
    }
    let mut out = [Residue(0); PEPTIDE_LEN];
    out.copy_from_slice(&residues);
    Ok(Peptide(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(letters: &str, with_end: bool) -> TokenSeq {
        let mut t = vec![Token::START];
        t.extend(letters.chars().map(|c| Residue::from_letter(c).unwrap().token()));
        if with_end {
            t.push(Token::END);
        }
        TokenSeq::new(t)
    }

    #[test]
    fn alphabet_layout() {
        assert_eq!(AMINO_ACIDS.len(), 20);
        let mut sorted = *AMINO_ACIDS;
        sorted.sort();
        assert_eq!(&sorted, AMINO_ACIDS);
        assert_eq!(Token::START.index(), 20);
        assert_eq!(Token::END.index(), 21);
        assert_eq!(Token::PAD.index(), 22);
        assert!(Token::from_index(VOCAB_SIZE).is_none());
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("IREYK").unwrap(), seq("IREYK", true));
        assert_eq!(tokenize("AAAAA").unwrap().tokens()[1..6], [Residue(0).token(); 5]);
        assert_eq!(
            tokenize("IRXYK"),
            Err(SequenceError::UnknownLetter {
                letter: 'X',
                position: 2
            })
        );
        assert_eq!(tokenize("IRE"), Err(SequenceError::WrongLength { len: 3 }));
        assert!(matches!(tokenize("IREYKX"), Err(SequenceError::UnknownLetter { .. })));
    }

    #[test]
    fn detokenize_examples() {
        let (p, r) = detokenize(&seq("IREYK", true));
        assert_eq!(p.unwrap().to_string(), "IREYK");
        assert_eq!(r.reason, ValidityReason::Ok);
        assert!(r.is_valid);

        let mut four = seq("IRE", false).tokens().to_vec();
        four.push(Residue::from_letter('Y').unwrap().token());
        four.extend([Token::END, Token::PAD, Token::PAD]);
        let (p, r) = detokenize(&TokenSeq::new(four));
        assert!(p.is_none());
        assert_eq!(r.reason, ValidityReason::WrongLength);
        assert!(!r.is_valid);

        let pad = TokenSeq::new(vec![
            Token::START,
            Residue::from_letter('I').unwrap().token(),
            Residue::from_letter('R').unwrap().token(),
            Token::PAD,
            Residue::from_letter('Y').unwrap().token(),
            Residue::from_letter('K').unwrap().token(),
            Token::END,
        ]);
        assert_eq!(detokenize(&pad).1.reason, ValidityReason::PadBeforeEnd);
    }

    #[test]
    fn control_token_rules() {
        // Missing START.
        let mut t = seq("IREYK", true).tokens().to_vec();
        t[0] = Token::PAD;
        assert_eq!(detokenize(&TokenSeq::new(t)).1.reason, ValidityReason::MalformedControl);
        // Six residues, no END.
        assert_eq!(detokenize(&seq("IREYKK", false)).1.reason, ValidityReason::WrongLength);
        // Five residues and no END at all.
        assert_eq!(
            detokenize(&seq("IREYK", false)).1.reason,
            ValidityReason::MalformedControl
        );
        // Trailing PAD after END is fine, trailing residue is not.
        let mut ok = seq("IREYK", true).tokens().to_vec();
        ok.push(Token::PAD);
        assert!(detokenize(&TokenSeq::new(ok.clone())).1.is_valid);
        ok.push(Residue(3).token());
        assert_eq!(
            detokenize(&TokenSeq::new(ok)).1.reason,
            ValidityReason::MalformedControl
        );
        // START in the middle.
        let mut mid = seq("IREYK", true).tokens().to_vec();
        mid[3] = Token::START;
        assert_eq!(
            detokenize(&TokenSeq::new(mid)).1.reason,
            ValidityReason::MalformedControl
        );
    }

    #[test]
    fn space_index_is_lexicographic() {
        assert_eq!(Peptide::parse("AAAAA").unwrap().space_index(), 0);
        assert_eq!(Peptide::parse("YYYYY").unwrap().space_index(), SPACE_SIZE - 1);
        assert!(Peptide::from_space_index(SPACE_SIZE).is_none());
        let a = Peptide::parse("ACDEF").unwrap();
        let b = Peptide::parse("ACDEG").unwrap();
        assert!(a < b);
        assert!(a.space_index() < b.space_index());
    }

    proptest! {
        #[test]
        fn round_trip(index in 0u32..SPACE_SIZE) {
            let p = Peptide::from_space_index(index).unwrap();
            let s = p.to_string();
            let (back, report) = detokenize(&tokenize(&s).unwrap());
            prop_assert!(report.is_valid);
            prop_assert_eq!(back.unwrap().to_string(), s);
            prop_assert_eq!(p.space_index(), index);
        }

        #[test]
        fn tokenize_is_injective(a in 0u32..SPACE_SIZE, b in 0u32..SPACE_SIZE) {
            let pa = Peptide::from_space_index(a).unwrap().to_string();
            let pb = Peptide::from_space_index(b).unwrap().to_string();
            prop_assert_eq!(a == b, tokenize(&pa).unwrap() == tokenize(&pb).unwrap());
        }
    }
}
