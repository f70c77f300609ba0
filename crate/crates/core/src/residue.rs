use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const NUM_RESIDUE_TYPES: usize = 20;

/// One of the twenty amino-acid types, ordered alphabetically by code.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ResidueType(u8);

impl ResidueType {
    pub const CODES: [char; NUM_RESIDUE_TYPES] = [
        'A', 'C', 'D', 'E', 'F', 'G', 'H', 'I', 'K', 'L', 'M', 'N', 'P', 'Q', 'R', 'S', 'T', 'V', 'W', 'Y',
    ];

    pub const GLY: ResidueType = ResidueType(5);
    pub const SER: ResidueType = ResidueType(15);
    pub const TRP: ResidueType = ResidueType(18);

    pub fn from_index(index: usize) -> Self {
        assert!(index < NUM_RESIDUE_TYPES, "residue index {index} out of range");
        ResidueType(index as u8)
    }

    pub fn from_code(code: char) -> Result<Self> {
        Self::CODES
            .iter()
            .position(|&c| c == code.to_ascii_uppercase())
            .map(|i| ResidueType(i as u8))
            .ok_or(Error::InvalidResidue(code))
    }

    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn code(self) -> char {
        Self::CODES[self.index()]
    }

    pub fn all() -> impl Iterator<Item = ResidueType> {
        (0..NUM_RESIDUE_TYPES).map(Self::from_index)
    }
}

impl fmt::Display for ResidueType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.code())
    }
}

/// A non-empty residue string.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Sequence(Vec<ResidueType>);

impl Sequence {
    pub fn new(residues: Vec<ResidueType>) -> Result<Self> {
        if residues.is_empty() {
            return Err(Error::Empty("sequence"));
        }
        Ok(Sequence(residues))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn residues(&self) -> &[ResidueType] {
        &self.0
    }

    pub fn get(&self, i: usize) -> ResidueType {
        self.0[i]
    }

    /// Copy with residues replaced at the given positions.
    pub fn with_mutations(&self, mutations: &[(usize, ResidueType)]) -> Sequence {
        let mut r = self.0.clone();
        for &(pos, res) in mutations {
            r[pos] = res;
        }
        Sequence(r)
    }

    pub fn concat(parts: &[&Sequence]) -> Sequence {
        Sequence(parts.iter().flat_map(|s| s.0.iter().copied()).collect())
    }

    pub fn hamming(&self, other: &Sequence) -> usize {
        assert_eq!(self.len(), other.len(), "hamming distance needs equal lengths");
        self.0.iter().zip(&other.0).filter(|(a, b)| a != b).count()
    }

    /// Positions where the two sequences differ.
    pub fn diff_positions(&self, other: &Sequence) -> Vec<usize> {
        self.0
            .iter()
            .zip(&other.0)
            .enumerate()
            .filter(|(_, (a, b))| a != b)
            .map(|(i, _)| i)
            .collect()
    }

    /// Short stable hash of the residue string, for logs.
    pub fn short_hash(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for r in &self.0 {
            h ^= r.0 as u64 + 1;
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
        format!("{:016x}", h)
    }
}

impl FromStr for Sequence {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let residues = s
            .trim()
            .chars()
            .map(ResidueType::from_code)
            .collect::<Result<Vec<_>>>()?;
        Sequence::new(residues)
    }
}

impl fmt::Display for Sequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.0 {
            write!(f, "{}", r.code())?;
        }
        Ok(())
    }
}
