//! Chip filenames: `{site_id}__{YYYYMMDDTHHMMSS}__{types}__{phase}.tif`.

use chrono::NaiveDateTime;

use super::ChipError;
use crate::taxonomy::{ConstructionType, PhaseLabel, TypeSet};

const TS_FORMAT: &str = "%Y%m%dT%H%M%S";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChipName {
    pub site_id: String,
    pub acquired: NaiveDateTime,
    pub types: TypeSet,
    pub phase: PhaseLabel,
}

fn label_token(display: &str) -> String {
    display.replace(' ', "-")
}

pub fn valid_site_id(site_id: &str) -> bool {
    !site_id.is_empty()
        && !site_id.contains("__")
        && !site_id.starts_with('_')
        && !site_id.ends_with('_')
        && !site_id
            .chars()
            .any(|c| c == '/' || c == '\\' || c.is_control() || c.is_whitespace())
}

pub fn encode_chip_filename(name: &ChipName) -> Result<String, ChipError> {
    if !valid_site_id(&name.site_id) {
        return Err(ChipError::InvalidRecord(format!(
            "site id {:?} cannot be encoded",
            name.site_id
        )));
    }
    if name.types.is_empty() {
        return Err(ChipError::InvalidRecord("empty type set".into()));
    }
    let types: Vec<String> = name
        .types
        .iter()
        .map(|t| label_token(t.display()))
        .collect();
    Ok(format!(
        "{}__{}__{}__{}.tif",
        name.site_id,
        name.acquired.format(TS_FORMAT),
        types.join("+"),
        label_token(name.phase.display())
    ))
}

/// Inverse of [`encode_chip_filename`]; only canonical encodings decode.
pub fn decode_chip_filename(filename: &str) -> Result<ChipName, ChipError> {
    let bad = || ChipError::MalformedFilename(filename.to_string());
    let stem = filename.strip_suffix(".tif").ok_or_else(bad)?;
    let parts: Vec<&str> = stem.split("__").collect();
    let [site_id, ts, types, phase] = parts[..] else {
        return Err(bad());
    };
    if !valid_site_id(site_id) || ts.len() != 15 {
        return Err(bad());
    }
    let acquired = NaiveDateTime::parse_from_str(ts, TS_FORMAT).map_err(|_| bad())?;
    let phase = PhaseLabel::ALL
        .into_iter()
        .find(|p| label_token(p.display()) == phase)
        .ok_or_else(bad)?;
    let mut parsed = Vec::new();
    for tok in types.split('+') {
        let t = ConstructionType::ALL
            .into_iter()
            .find(|t| label_token(t.display()) == tok)
            .ok_or_else(bad)?;
        parsed.push(t);
    }
    if parsed.windows(2).any(|w| w[0] >= w[1]) {
        return Err(bad());
    }
    let name = ChipName {
        site_id: site_id.to_string(),
        acquired,
        types: parsed.into_iter().collect(),
        phase,
    };
    Ok(name)
}
