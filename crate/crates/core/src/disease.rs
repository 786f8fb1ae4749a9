//! The four target findings of the lungs/pleura and sets of them.

use std::fmt;
use std::str::FromStr;

use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Disease {
    Atelectasis,
    Effusion,
    Emphysema,
    Nodule,
}

impl Disease {
    /// All targets in lexicographic name order.
    pub const ALL: [Disease; 4] = [
        Disease::Atelectasis,
        Disease::Effusion,
        Disease::Emphysema,
        Disease::Nodule,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Disease::Atelectasis => "atelectasis",
            Disease::Effusion => "effusion",
            Disease::Emphysema => "emphysema",
            Disease::Nodule => "nodule",
        }
    }

    fn bit(self) -> u8 {
        1 << (self as u8)
    }
}

impl fmt::Display for Disease {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Disease {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim().to_ascii_lowercase();
        Disease::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or(Error::UnknownClass(s))
    }
}

/// A subset of the four target diseases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct DiseaseSet(u8);

impl DiseaseSet {
    pub const EMPTY: DiseaseSet = DiseaseSet(0);

    pub fn from_bits(bits: u8) -> Self {
        DiseaseSet(bits & 0b1111)
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn contains(self, d: Disease) -> bool {
        self.0 & d.bit() != 0
    }

    pub fn insert(&mut self, d: Disease) {
        self.0 |= d.bit();
    }

    pub fn with(mut self, d: Disease) -> Self {
        self.insert(d);
        self
    }

    pub fn without(self, d: Disease) -> Self {
        DiseaseSet(self.0 & !d.bit())
    }

    pub fn union(self, other: DiseaseSet) -> Self {
        DiseaseSet(self.0 | other.0)
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    /// Members in lexicographic name order.
    pub fn iter(self) -> impl Iterator<Item = Disease> {
        Disease::ALL.into_iter().filter(move |d| self.contains(*d))
    }

    pub fn names(self) -> Vec<&'static str> {
        self.iter().map(Disease::name).collect()
    }

    /// All 16 subsets, ordered by bit pattern.
    pub fn all_subsets() -> impl Iterator<Item = DiseaseSet> {
        (0u8..16).map(DiseaseSet)
    }
}

impl FromIterator<Disease> for DiseaseSet {
    fn from_iter<I: IntoIterator<Item = Disease>>(iter: I) -> Self {
        iter.into_iter().fold(DiseaseSet::EMPTY, DiseaseSet::with)
    }
}

/// `+`-joined sorted names; the empty set renders as an empty string.
impl fmt::Display for DiseaseSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.names().join("+"))
    }
}

/// Parses `+`-joined names in any order. An empty string is the empty set.
impl FromStr for DiseaseSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.split('+')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(Disease::from_str)
            .collect()
    }
}
