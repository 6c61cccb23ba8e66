//! Closed label sets shared by every stage.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Temporal phase of a site at one observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PhaseLabel {
    NoActivity,
    SitePreparation,
    ActiveConstruction,
    PostConstruction,
    Unknown,
}

impl PhaseLabel {
    pub const ALL: [PhaseLabel; 5] = [
        PhaseLabel::NoActivity,
        PhaseLabel::SitePreparation,
        PhaseLabel::ActiveConstruction,
        PhaseLabel::PostConstruction,
        PhaseLabel::Unknown,
    ];

    pub const KNOWN: [PhaseLabel; 4] = [
        PhaseLabel::NoActivity,
        PhaseLabel::SitePreparation,
        PhaseLabel::ActiveConstruction,
        PhaseLabel::PostConstruction,
    ];

    pub fn display(self) -> &'static str {
        match self {
            PhaseLabel::NoActivity => "No Activity",
            PhaseLabel::SitePreparation => "Site Preparation",
            PhaseLabel::ActiveConstruction => "Active Construction",
            PhaseLabel::PostConstruction => "Post Construction",
            PhaseLabel::Unknown => "Unknown",
        }
    }

    pub fn is_known(self) -> bool {
        self != PhaseLabel::Unknown
    }

    /// Case, whitespace, `-` and `_` insensitive match against display names.
    pub fn parse(s: &str) -> Option<PhaseLabel> {
        let key = label_key(s);
        PhaseLabel::ALL
            .into_iter()
            .find(|p| label_key(p.display()) == key)
    }
}

impl fmt::Display for PhaseLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.display())
    }
}

/// Functional category of a construction site.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ConstructionType {
    Commercial,
    Industrial,
    MediumResidential,
    HeavyResidential,
    Other,
    Unknown,
    Unlabeled,
}

impl ConstructionType {
    pub const ALL: [ConstructionType; 7] = [
        ConstructionType::Commercial,
        ConstructionType::Industrial,
        ConstructionType::MediumResidential,
        ConstructionType::HeavyResidential,
        ConstructionType::Other,
        ConstructionType::Unknown,
        ConstructionType::Unlabeled,
    ];

    /// Types that carry a usable answer.
    pub const KNOWN: [ConstructionType; 5] = [
        ConstructionType::Commercial,
        ConstructionType::Industrial,
        ConstructionType::MediumResidential,
        ConstructionType::HeavyResidential,
        ConstructionType::Other,
    ];

    pub fn display(self) -> &'static str {
        match self {
            ConstructionType::Commercial => "Commercial",
            ConstructionType::Industrial => "Industrial",
            ConstructionType::MediumResidential => "Medium Residential",
            ConstructionType::HeavyResidential => "Heavy Residential",
            ConstructionType::Other => "Other",
            ConstructionType::Unknown => "Unknown",
            ConstructionType::Unlabeled => "Unlabeled",
        }
    }

    pub fn is_known(self) -> bool {
        !matches!(
            self,
            ConstructionType::Unknown | ConstructionType::Unlabeled
        )
    }

    pub fn parse(s: &str) -> Option<ConstructionType> {
        let key = label_key(s);
        if key == "othertype" {
            return Some(ConstructionType::Other);
        }
        ConstructionType::ALL
            .into_iter()
            .find(|t| label_key(t.display()) == key)
    }
}

impl fmt::Display for ConstructionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.display())
    }
}

pub type TypeSet = BTreeSet<ConstructionType>;

/// Imagery source named by an annotation observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensorFamily {
    Sentinel2,
    Landsat8,
    Worldview,
    None,
}

impl SensorFamily {
    pub const ALL: [SensorFamily; 4] = [
        SensorFamily::Sentinel2,
        SensorFamily::Landsat8,
        SensorFamily::Worldview,
        SensorFamily::None,
    ];

    pub fn display(self) -> &'static str {
        match self {
            SensorFamily::Sentinel2 => "Sentinel-2",
            SensorFamily::Landsat8 => "Landsat-8",
            SensorFamily::Worldview => "WorldView",
            SensorFamily::None => "No Source",
        }
    }

    /// Maps free-form sensor names; `None` for unrecognized non-empty names.
    pub fn parse(s: &str) -> Option<SensorFamily> {
        let key = label_key(s);
        match key.as_str() {
            "" | "none" | "null" | "nosource" => Some(SensorFamily::None),
            "sentinel2" | "s2" | "s2a" | "s2b" | "sentinel2a" | "sentinel2b" => {
                Some(SensorFamily::Sentinel2)
            }
            "landsat8" | "l8" | "ls8" | "landsat" => Some(SensorFamily::Landsat8),
            k if k.starts_with("worldview") || k.starts_with("wv") => Some(SensorFamily::Worldview),
            _ => None,
        }
    }
}

/// Lowercase with spaces, dashes and underscores removed.
pub fn label_key(s: &str) -> String {
    s.chars()
        .filter(|c| !c.is_whitespace() && *c != '-' && *c != '_')
        .flat_map(char::to_lowercase)
        .collect()
}
