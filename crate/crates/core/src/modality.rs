use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Imaging modality of a sample or embedding stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    /// RGB camera, three channels.
    #[serde(rename = "V")]
    Visible,
    /// Near-infrared camera, one channel.
    #[serde(rename = "I")]
    Infrared,
    /// Channel mix of a visible image; exists only during training.
    #[serde(rename = "Z")]
    Intermediate,
}

impl Modality {
    pub fn channels(self) -> usize {
        match self {
            Modality::Visible => 3,
            Modality::Infrared | Modality::Intermediate => 1,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Modality::Visible => "V",
            Modality::Infrared => "I",
            Modality::Intermediate => "Z",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "V" | "v" => Ok(Modality::Visible),
            "I" | "i" | "T" | "t" => Ok(Modality::Infrared),
            "Z" | "z" => Ok(Modality::Intermediate),
            other => Err(Error::InvalidArgument(format!("unknown modality {other:?}"))),
        }
    }
}
