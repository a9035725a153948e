use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 24;

const SHARP_NAMES: [&str; 12] = [
    "C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mode {
    Major,
    Minor,
}

impl Mode {
    pub fn other(self) -> Mode {
        match self {
            Mode::Major => Mode::Minor,
            Mode::Minor => Mode::Major,
        }
    }
}

/// A global key: tonic pitch class (C = 0, ascending semitones) plus mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Key {
    tonic: u8,
    mode: Mode,
}

impl Key {
    pub fn new(tonic: u8, mode: Mode) -> Result<Key> {
        if tonic > 11 {
            return Err(Error::InvalidArgument(format!(
                "tonic pitch class {tonic} outside 0..=11"
            )));
        }
        Ok(Key { tonic, mode })
    }

    pub fn major(tonic: u8) -> Key {
        Key {
            tonic: tonic % 12,
            mode: Mode::Major,
        }
    }

    pub fn minor(tonic: u8) -> Key {
        Key {
            tonic: tonic % 12,
            mode: Mode::Minor,
        }
    }

    pub fn tonic(self) -> u8 {
        self.tonic
    }

    pub fn mode(self) -> Mode {
        self.mode
    }

    /// Class index in `0..24`: tonic for major keys, `12 + tonic` for minor keys.
    pub fn class_index(self) -> usize {
        self.tonic as usize + if self.mode == Mode::Minor { 12 } else { 0 }
    }

    pub fn from_class_index(index: usize) -> Result<Key> {
        if index >= NUM_CLASSES {
            return Err(Error::InvalidArgument(format!(
                "class index {index} outside 0..24"
            )));
        }
        let mode = if index >= 12 {
            Mode::Minor
        } else {
            Mode::Major
        };
        Ok(Key {
            tonic: (index % 12) as u8,
            mode,
        })
    }

    /// All 24 keys in class-index order.
    pub fn all() -> impl Iterator<Item = Key> {
        (0..NUM_CLASSES).map(|i| Key::from_class_index(i).expect("in range"))
    }

    /// Moves the tonic by `semitones` (any integer), keeping the mode.
    pub fn transpose(self, semitones: i32) -> Key {
        Key {
            tonic: (self.tonic as i32 + semitones).rem_euclid(12) as u8,
            mode: self.mode,
        }
    }

    /// Relative major of a minor key (tonic + 3) or relative minor of a major key (tonic + 9).
    pub fn relative(self) -> Key {
        match self.mode {
            Mode::Major => Key::minor((self.tonic + 9) % 12),
            Mode::Minor => Key::major((self.tonic + 3) % 12),
        }
    }

    pub fn parallel(self) -> Key {
        Key {
            tonic: self.tonic,
            mode: self.mode.other(),
        }
    }
}

pub fn transpose_key(key: Key, semitones: i32) -> Key {
    key.transpose(semitones)
}

impl fmt::Display for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mode = match self.mode {
            Mode::Major => "major",
            Mode::Minor => "minor",
        };
        write!(f, "{} {}", SHARP_NAMES[self.tonic as usize], mode)
    }
}

/// Parses strings such as `"d minor"`, `"Eb major"`, `"F# min"` (case-insensitive).
pub fn parse_key(text: &str) -> Result<Key> {
    let err = |token: &str| Error::KeyParse {
        text: text.to_string(),
        token: token.to_string(),
    };
    let mut parts = text.split_whitespace();
    let tonic_tok = parts.next().ok_or_else(|| err(""))?;
    let mode_tok = parts.next().ok_or_else(|| err(""))?;
    if let Some(extra) = parts.next() {
        return Err(err(extra));
    }

    let mut chars = tonic_tok.chars();
    let letter = chars.next().ok_or_else(|| err(tonic_tok))?;
    let base: i32 = match letter.to_ascii_uppercase() {
        'C' => 0,
        'D' => 2,
        'E' => 4,
        'F' => 5,
        'G' => 7,
        'A' => 9,
        'B' => 11,
        _ => return Err(err(tonic_tok)),
    };
    let mut offset = 0i32;
    for c in chars {
        match c {
            '#' | '♯' => offset += 1,
            'b' | 'B' | '♭' => offset -= 1,
            _ => return Err(err(tonic_tok)),
        }
    }
    if offset.abs() > 1 {
        return Err(err(tonic_tok));
    }

    let mode = match mode_tok.to_ascii_lowercase().as_str() {
        "major" | "maj" => Mode::Major,
        "minor" | "min" => Mode::Minor,
        _ => return Err(err(mode_tok)),
    };
    Ok(Key {
        tonic: (base + offset).rem_euclid(12) as u8,
        mode,
    })
}

impl FromStr for Key {
    type Err = Error;

    fn from_str(s: &str) -> Result<Key> {
        parse_key(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_examples() {
        assert_eq!(parse_key("d minor").unwrap(), Key::minor(2));
        assert_eq!(
            parse_key("C# minor").unwrap(),
            parse_key("Db minor").unwrap()
        );
        assert_eq!(parse_key("C# minor").unwrap(), Key::minor(1));
        assert_eq!(parse_key("Eb MAJOR").unwrap(), Key::major(3));
        assert_eq!(parse_key("cb maj").unwrap(), Key::major(11));
    }

    #[test]
    fn rejects_bad_tokens() {
        match parse_key("H major") {
            Err(Error::KeyParse { token, .. }) => assert_eq!(token, "H"),
            other => panic!("unexpected {other:?}"),
        }
        match parse_key("C dorian") {
            Err(Error::KeyParse { token, .. }) => assert_eq!(token, "dorian"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_key("").is_err());
        assert!(parse_key("C").is_err());
        assert!(parse_key("C## major").is_err());
    }

    #[test]
    fn transposition_examples() {
        assert_eq!(Key::major(0).transpose(2), Key::major(2));
        assert_eq!(Key::minor(11).transpose(1), Key::minor(0));
        assert_eq!(Key::major(5).transpose(-6), Key::major(11));
        assert_eq!(Key::minor(4).transpose(0), Key::minor(4));
    }

    #[test]
    fn relative_pairs() {
        assert_eq!(Key::major(0).relative(), Key::minor(9));
        assert_eq!(Key::minor(9).relative(), Key::major(0));
    }

    proptest! {
        #[test]
        fn class_index_bijection(i in 0usize..24) {
            let k = Key::from_class_index(i).unwrap();
            prop_assert_eq!(k.class_index(), i);
            prop_assert_eq!(parse_key(&k.to_string()).unwrap(), k);
        }

        #[test]
        fn transpose_composes(i in 0usize..24, a in -30i32..30, b in -30i32..30) {
            let k = Key::from_class_index(i).unwrap();
            prop_assert_eq!(k.transpose(a).transpose(b), k.transpose(a + b));
            prop_assert_eq!(k.transpose(12), k);
        }
    }
}
