//! Presentation labels shared by the generator, the score files and the
//! metrics.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Liveness {
    #[serde(rename = "bonafide")]
    BonaFide,
    #[serde(rename = "attack")]
    Attack,
}

impl Liveness {
    pub fn as_str(self) -> &'static str {
        match self {
            Liveness::BonaFide => "bonafide",
            Liveness::Attack => "attack",
        }
    }
}

impl fmt::Display for Liveness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Liveness {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bonafide" => Ok(Liveness::BonaFide),
            "attack" => Ok(Liveness::Attack),
            _ => Err(Error::invalid(format!("unknown liveness {s:?} (expected bonafide|attack)"))),
        }
    }
}

/// Presentation attack instrument species. `None` marks a bona fide
/// presentation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PaiSpecies {
    #[serde(rename = "none")]
    None,
    A,
    B,
    C,
}

impl PaiSpecies {
    pub const ATTACKS: [PaiSpecies; 3] = [PaiSpecies::A, PaiSpecies::B, PaiSpecies::C];

    pub fn as_str(self) -> &'static str {
        match self {
            PaiSpecies::None => "none",
            PaiSpecies::A => "A",
            PaiSpecies::B => "B",
            PaiSpecies::C => "C",
        }
    }

    pub fn liveness(self) -> Liveness {
        if self == PaiSpecies::None { Liveness::BonaFide } else { Liveness::Attack }
    }
}

impl fmt::Display for PaiSpecies {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PaiSpecies {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(PaiSpecies::None),
            "A" => Ok(PaiSpecies::A),
            "B" => Ok(PaiSpecies::B),
            "C" => Ok(PaiSpecies::C),
            _ => Err(Error::invalid(format!("unknown PAI species {s:?} (expected none|A|B|C)"))),
        }
    }
}

/// Liveness and species must agree: bona fide exactly when species is none.
pub fn check_consistent(liveness: Liveness, species: PaiSpecies) -> Result<()> {
    if species.liveness() != liveness {
        return Err(Error::invalid(format!(
            "liveness {liveness} is inconsistent with PAI species {species}"
        )));
    }
    Ok(())
}
