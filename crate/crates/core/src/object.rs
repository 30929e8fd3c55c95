//! Detected-object records and the five perception categories.

use std::fmt;

use serde::{Deserialize, Serialize};

/// The five perception targets scored per sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectCategory {
    Car,
    People,
    TrafficLight,
    PedestrianCrossing,
    CurrentScene,
}

impl ObjectCategory {
    pub const ALL: [ObjectCategory; 5] = [
        ObjectCategory::Car,
        ObjectCategory::People,
        ObjectCategory::TrafficLight,
        ObjectCategory::PedestrianCrossing,
        ObjectCategory::CurrentScene,
    ];

    /// Snake-case key used in JSON.
    pub fn key(self) -> &'static str {
        match self {
            ObjectCategory::Car => "car",
            ObjectCategory::People => "people",
            ObjectCategory::TrafficLight => "traffic_light",
            ObjectCategory::PedestrianCrossing => "pedestrian_crossing",
            ObjectCategory::CurrentScene => "current_scene",
        }
    }

    /// Human-readable name used in prompts and report headers.
    pub fn display_name(self) -> &'static str {
        match self {
            ObjectCategory::Car => "Car",
            ObjectCategory::People => "People",
            ObjectCategory::TrafficLight => "Traffic Light",
            ObjectCategory::PedestrianCrossing => "Pedestrian Crossing",
            ObjectCategory::CurrentScene => "Current Scene",
        }
    }

    /// Lenient lookup for model-written category names ("Cars", "traffic-light",
    /// "zebra crossing", "pedestrian").
    pub fn parse_loose(text: &str) -> Option<Self> {
        let norm: String = text
            .trim()
            .trim_matches(|c: char| !c.is_alphanumeric())
            .chars()
            .map(|c| if c == '_' || c == '-' { ' ' } else { c.to_ascii_lowercase() })
            .collect();
        let norm = norm.split_whitespace().collect::<Vec<_>>().join(" ");
        let cat = match norm.as_str() {
            "car" | "cars" | "vehicle" | "vehicles" | "truck" | "bus" | "van" => ObjectCategory::Car,
            "people" | "person" | "persons" | "pedestrian" | "pedestrians" | "crowd" | "crowds" => {
                ObjectCategory::People
            }
            "traffic light" | "traffic lights" | "traffic signal" | "trafficlight" => ObjectCategory::TrafficLight,
            "pedestrian crossing"
            | "pedestrian crossings"
            | "crosswalk"
            | "crosswalks"
            | "zebra crossing"
            | "zebra crosswalk" => ObjectCategory::PedestrianCrossing,
            "current scene" | "scene" | "environment" => ObjectCategory::CurrentScene,
            _ => return None,
        };
        Some(cat)
    }
}

impl fmt::Display for ObjectCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.display_name())
    }
}

/// One detected object: ID, category, position, pixel coordinates, state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub id: u32,
    pub category: ObjectCategory,
    pub position: String,
    pub pixel_coordinates: Option<(u32, u32)>,
    pub state: String,
}

impl ObjectRecord {
    /// Whether the pixel coordinates, if any, fall inside a `width` x `height` raster.
    pub fn within_bounds(&self, width: u32, height: u32) -> bool {
        self.pixel_coordinates.is_none_or(|(x, y)| x < width && y < height)
    }
}
