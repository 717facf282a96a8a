use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// A `MAJOR.MINOR.PATCH` version label, ordered numerically by component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VersionLabel {
    pub major: u64,
    pub minor: u64,
    pub patch: u64,
}

impl VersionLabel {
    pub const fn new(major: u64, minor: u64, patch: u64) -> Self {
        VersionLabel { major, minor, patch }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid version label `{0}`: expected MAJOR.MINOR.PATCH with non-negative integers")]
pub struct ParseVersionError(pub String);

impl FromStr for VersionLabel {
    type Err = ParseVersionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || ParseVersionError(s.to_string());
        let mut parts = s.split('.');
        let mut next = || -> Result<u64, ParseVersionError> {
            let p = parts.next().ok_or_else(err)?;
            if p.is_empty() || !p.bytes().all(|b| b.is_ascii_digit()) {
                return Err(err());
            }
            p.parse().map_err(|_| err())
        };
        let v = VersionLabel { major: next()?, minor: next()?, patch: next()? };
        if parts.next().is_some() {
            return Err(err());
        }
        Ok(v)
    }
}

impl fmt::Display for VersionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}.{}", self.major, self.minor, self.patch)
    }
}

impl Serialize for VersionLabel {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for VersionLabel {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parse_and_reject() {
        assert_eq!("1.2.3".parse::<VersionLabel>().unwrap(), VersionLabel::new(1, 2, 3));
        for bad in ["", "1", "1.2", "1.2.3.4", "v1.0.0", "1.-2.3", "1..3", "a.b.c", "1.2.3 "] {
            assert!(bad.parse::<VersionLabel>().is_err(), "{bad}");
        }
    }

    #[test]
    fn numeric_not_textual_order() {
        let a: VersionLabel = "1.10.0".parse().unwrap();
        let b: VersionLabel = "1.9.0".parse().unwrap();
        assert!(a > b);
    }

    proptest! {
        #[test]
        fn ordering_matches_component_tuple(a in any::<(u16, u16, u16)>(), b in any::<(u16, u16, u16)>()) {
            let va = VersionLabel::new(a.0 as u64, a.1 as u64, a.2 as u64);
            let vb = VersionLabel::new(b.0 as u64, b.1 as u64, b.2 as u64);
            prop_assert_eq!(va.cmp(&vb), a.cmp(&b));
            prop_assert_eq!(va.to_string().parse::<VersionLabel>().unwrap(), va);
        }
    }
}
