use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Rgb,
    Thermal,
}

impl Modality {
    pub fn channels(self) -> usize {
        match self {
            Modality::Rgb => 3,
            Modality::Thermal => 1,
        }
    }

    pub fn other(self) -> Modality {
        match self {
            Modality::Rgb => Modality::Thermal,
            Modality::Thermal => Modality::Rgb,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Modality::Rgb => f.write_str("rgb"),
            Modality::Thermal => f.write_str("thermal"),
        }
    }
}
