use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Mc3Error;

/// The three input streams. The derived order (Audio < Video < Language)
/// drives pair enumeration and every tie-break.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModalityId {
    Audio,
    Video,
    Language,
}

impl ModalityId {
    pub const ALL: [ModalityId; 3] = [ModalityId::Audio, ModalityId::Video, ModalityId::Language];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        ModalityId::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ModalityId::Audio => "audio",
            ModalityId::Video => "video",
            ModalityId::Language => "language",
        }
    }

    pub fn letter(self) -> char {
        match self {
            ModalityId::Audio => 'A',
            ModalityId::Video => 'V',
            ModalityId::Language => 'L',
        }
    }

    /// All ordered pairs (i, j) with i != j, in lexicographic order.
    pub fn ordered_pairs() -> Vec<(ModalityId, ModalityId)> {
        let mut out = Vec::with_capacity(6);
        for i in ModalityId::ALL {
            for j in ModalityId::ALL {
                if i != j {
                    out.push((i, j));
                }
            }
        }
        out
    }
}

impl fmt::Display for ModalityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModalityId {
    type Err = Mc3Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "a" | "audio" => Ok(ModalityId::Audio),
            "v" | "video" | "vision" => Ok(ModalityId::Video),
            "l" | "language" | "text" => Ok(ModalityId::Language),
            other => Err(Mc3Error::config("modality", format!("unknown modality {other:?}"))),
        }
    }
}

/// A value per modality, indexed by [`ModalityId`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerModality<T>(pub [T; 3]);

impl<T> PerModality<T> {
    pub fn from_fn(mut f: impl FnMut(ModalityId) -> T) -> Self {
        PerModality([
            f(ModalityId::Audio),
            f(ModalityId::Video),
            f(ModalityId::Language),
        ])
    }

    pub fn try_from_fn<E>(mut f: impl FnMut(ModalityId) -> Result<T, E>) -> Result<Self, E> {
        Ok(PerModality([
            f(ModalityId::Audio)?,
            f(ModalityId::Video)?,
            f(ModalityId::Language)?,
        ]))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ModalityId, &T)> {
        ModalityId::ALL.into_iter().zip(self.0.iter())
    }

    pub fn map<U>(&self, mut f: impl FnMut(ModalityId, &T) -> U) -> PerModality<U> {
        PerModality::from_fn(|m| f(m, &self[m]))
    }
}

impl<T> std::ops::Index<ModalityId> for PerModality<T> {
    type Output = T;
    fn index(&self, m: ModalityId) -> &T {
        &self.0[m.index()]
    }
}

impl<T> std::ops::IndexMut<ModalityId> for PerModality<T> {
    fn index_mut(&mut self, m: ModalityId) -> &mut T {
        &mut self.0[m.index()]
    }
}
