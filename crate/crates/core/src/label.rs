use core::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Ground-truth class of a package or file. Serialized as `0` / `1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Label {
    Benign,
    Malicious,
}

impl Label {
    pub fn as_u8(self) -> u8 {
        match self {
            Label::Benign => 0,
            Label::Malicious => 1,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Label::Benign),
            1 => Some(Label::Malicious),
            _ => None,
        }
    }

    /// Accepts `0`/`1` as well as `benign`/`malicious` (any case).
    pub fn parse(s: &str) -> Option<Self> {
        let s = s.trim();
        if s == "0" || s.eq_ignore_ascii_case("benign") {
            Some(Label::Benign)
        } else if s == "1" || s.eq_ignore_ascii_case("malicious") {
            Some(Label::Malicious)
        } else {
            None
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_u8())
    }
}

impl Serialize for Label {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_u8(self.as_u8())
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let v = u8::deserialize(deserializer)?;
        Label::from_u8(v).ok_or_else(|| serde::de::Error::custom("label must be 0 or 1"))
    }
}
