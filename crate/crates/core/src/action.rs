//! The closed set of driving actions offered to the model.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DrivingAction {
    SpeedUp,
    SpeedDown,
    Stop,
    KeepRemain,
    ChangeLane,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown driving action label {0:?}")]
pub struct UnknownAction(pub String);

impl DrivingAction {
    /// Menu order.
    pub const ALL: [DrivingAction; 5] = [
        DrivingAction::SpeedUp,
        DrivingAction::SpeedDown,
        DrivingAction::Stop,
        DrivingAction::KeepRemain,
        DrivingAction::ChangeLane,
    ];

    pub fn label(self) -> &'static str {
        match self {
            DrivingAction::SpeedUp => "speed up",
            DrivingAction::SpeedDown => "speed down",
            DrivingAction::Stop => "stop",
            DrivingAction::KeepRemain => "keep remain",
            DrivingAction::ChangeLane => "change lane",
        }
    }

    /// Exact label lookup. Case, surrounding whitespace, and `_`/`-`
    /// separators are ignored; synonyms are not (see `parse::parse_decision`).
    pub fn from_label(label: &str) -> Result<Self, UnknownAction> {
        let norm: String =
            label.trim().chars().map(|c| if c == '_' || c == '-' { ' ' } else { c.to_ascii_lowercase() }).collect();
        let norm = norm.split_whitespace().collect::<Vec<_>>().join(" ");
        Self::ALL.into_iter().find(|a| a.label() == norm).ok_or_else(|| UnknownAction(label.to_string()))
    }
}

/// The five action labels in fixed menu order.
pub fn action_menu() -> [&'static str; 5] {
    DrivingAction::ALL.map(DrivingAction::label)
}

impl fmt::Display for DrivingAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for DrivingAction {
    type Err = UnknownAction;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::from_label(s)
    }
}

impl Serialize for DrivingAction {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.label())
    }
}

impl<'de> Deserialize<'de> for DrivingAction {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Self::from_label(&s).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn menu_is_five_labels_in_order() {
        let menu = action_menu();
        assert_eq!(menu.len(), 5);
        assert_eq!(menu, ["speed up", "speed down", "stop", "keep remain", "change lane"]);
        assert_eq!(menu[2], "stop");
        assert_eq!(action_menu(), menu);
    }

    #[test]
    fn labels_round_trip() {
        for a in DrivingAction::ALL {
            assert_eq!(DrivingAction::from_label(a.label()), Ok(a));
        }
        assert_eq!(DrivingAction::from_label("KEEP_REMAIN"), Ok(DrivingAction::KeepRemain));
        assert_eq!(DrivingAction::from_label(" Change-Lane "), Ok(DrivingAction::ChangeLane));
        assert!(DrivingAction::from_label("accelerate").is_err());
    }

    #[test]
    fn serde_uses_labels() {
        let json = serde_json::to_string(&DrivingAction::SpeedDown).unwrap();
        assert_eq!(json, "\"speed down\"");
        let back: DrivingAction = serde_json::from_str("\"Stop\"").unwrap();
        assert_eq!(back, DrivingAction::Stop);
    }
}
