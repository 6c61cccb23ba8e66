//! Single-image question/answer examples and the chat/TSV serializers shared
//! with pair examples.

pub mod countries;

use std::collections::BTreeMap;
use std::fmt;

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::chip::ChipRecord;
use crate::taxonomy::{ConstructionType, PhaseLabel, TypeSet};

pub use countries::country_name;

pub const UNKNOWN: &str = "Unknown";

pub const Q_CONSTRUCTION_TYPE: &str = "What type of construction site is shown?";
pub const Q_TEMPORAL_PHASE: &str = "What phase of construction is visible?";
pub const Q_LOCATION: &str = "What country is this construction site located in?";
pub const Q_LOCATION_REGION: &str = "What region is this construction site located in?";
pub const Q_PAIR_CHANGE: &str =
    "Did the construction state of this site change between these two observations?";
pub const Q_PAIR_ORDER: &str = "Which image was captured earlier?";
pub const Q_PAIR_TRANSITION: &str =
    "What construction phase transition occurred between these observations?";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VqaTaskType {
    ConstructionType,
    TemporalPhase,
    Location,
    PairChange,
    PairOrder,
    PairTransition,
}

impl VqaTaskType {
    pub const ALL: [VqaTaskType; 6] = [
        VqaTaskType::ConstructionType,
        VqaTaskType::TemporalPhase,
        VqaTaskType::Location,
        VqaTaskType::PairChange,
        VqaTaskType::PairOrder,
        VqaTaskType::PairTransition,
    ];
    pub const SINGLE: [VqaTaskType; 3] = [
        VqaTaskType::ConstructionType,
        VqaTaskType::TemporalPhase,
        VqaTaskType::Location,
    ];
    pub const PAIR: [VqaTaskType; 3] = [
        VqaTaskType::PairChange,
        VqaTaskType::PairOrder,
        VqaTaskType::PairTransition,
    ];

    pub fn arity(self) -> usize {
        match self {
            VqaTaskType::ConstructionType | VqaTaskType::TemporalPhase | VqaTaskType::Location => 1,
            _ => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            VqaTaskType::ConstructionType => "construction_type",
            VqaTaskType::TemporalPhase => "temporal_phase",
            VqaTaskType::Location => "location",
            VqaTaskType::PairChange => "pair_change",
            VqaTaskType::PairOrder => "pair_order",
            VqaTaskType::PairTransition => "pair_transition",
        }
    }
}

impl fmt::Display for VqaTaskType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub path: String,
    pub acquired: NaiveDate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VqaExample {
    pub example_id: String,
    pub task: VqaTaskType,
    pub site_id: String,
    pub images: Vec<ImageRef>,
    pub question: String,
    pub answer: String,
    /// Annotation keys of the source observations, in image order.
    pub provenance: Vec<String>,
}

/// First 128 bits of sha256 over the site, the image keys and the task.
pub fn example_id<S: AsRef<str>>(site_id: &str, image_keys: &[S], task: VqaTaskType) -> String {
    let mut h = Sha256::new();
    h.update(site_id.as_bytes());
    for k in image_keys {
        h.update([0x1f]);
        h.update(k.as_ref().as_bytes());
    }
    h.update([0x1f]);
    h.update(task.as_str().as_bytes());
    hex::encode(h.finalize())[..32].to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocationGranularity {
    #[default]
    Country,
    Region,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocationConfig {
    pub granularity: LocationGranularity,
    /// Extra or replacement alpha-2 code expansions.
    pub country_names: BTreeMap<String, String>,
}

impl LocationConfig {
    pub fn question(&self) -> &'static str {
        match self.granularity {
            LocationGranularity::Country => Q_LOCATION,
            LocationGranularity::Region => Q_LOCATION_REGION,
        }
    }

    fn expand_code(&self, code: &str) -> Option<String> {
        let code = code.trim().to_ascii_uppercase();
        self.country_names
            .get(&code)
            .cloned()
            .or_else(|| country_name(&code).map(str::to_string))
    }

    /// Location answer for a region id such as `BR_R001`.
    pub fn answer_for(&self, region_id: &str) -> Option<String> {
        match self.granularity {
            LocationGranularity::Region => Some(region_id.trim())
                .filter(|r| !r.is_empty())
                .map(str::to_string),
            LocationGranularity::Country => {
                let code = region_id.split('_').next()?;
                if code.len() != 2 || !code.chars().all(|c| c.is_ascii_alphabetic()) {
                    return None;
                }
                self.expand_code(code)
            }
        }
    }

    fn known_locations(&self) -> impl Iterator<Item = String> + '_ {
        countries::COUNTRIES
            .iter()
            .map(|(_, n)| n.to_string())
            .chain(self.country_names.values().cloned())
    }
}

/// Construction-type answer: known types joined by " and " in taxonomy order.
pub fn type_answer(types: &TypeSet) -> String {
    let known: Vec<&str> = types
        .iter()
        .filter(|t| t.is_known())
        .map(|t| t.display())
        .collect();
    if known.is_empty() {
        UNKNOWN.to_string()
    } else {
        known.join(" and ")
    }
}

fn normalize(raw: &str) -> String {
    raw.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Closed answers of the fixed-set tasks; location and joined types are checked separately.
pub fn answer_set(task: VqaTaskType) -> Vec<String> {
    let v: Vec<String> = match task {
        VqaTaskType::ConstructionType => ConstructionType::KNOWN
            .iter()
            .map(|t| t.display().to_string())
            .collect(),
        VqaTaskType::TemporalPhase => PhaseLabel::ALL
            .iter()
            .map(|p| p.display().to_string())
            .collect(),
        VqaTaskType::Location => Vec::new(),
        VqaTaskType::PairChange => vec!["Yes".into(), "No".into()],
        VqaTaskType::PairOrder => vec!["Image 1".into(), "Image 2".into()],
        VqaTaskType::PairTransition => crate::pairs::all_transition_displays(),
    };
    let mut v = v;
    if !v.iter().any(|a| a == UNKNOWN) {
        v.push(UNKNOWN.into());
    }
    v
}

fn canonical_types(raw: &str) -> Option<String> {
    let norm = normalize(raw);
    let mut set = TypeSet::new();
    for part in norm.split(" and ") {
        let t = ConstructionType::parse(part)?;
        if !t.is_known() {
            return None;
        }
        set.insert(t);
    }
    Some(type_answer(&set))
}

/// Case and whitespace insensitive match into the task's closed set, else "Unknown".
pub fn canonicalize_answer(raw: &str, task: VqaTaskType) -> String {
    canonicalize_answer_with(raw, task, &LocationConfig::default())
}

pub fn canonicalize_answer_with(raw: &str, task: VqaTaskType, loc: &LocationConfig) -> String {
    let norm = normalize(raw);
    let hit = |cands: &mut dyn Iterator<Item = String>| {
        let mut found = None;
        for c in cands {
            if normalize(&c) == norm {
                found = Some(c);
                break;
            }
        }
        found
    };
    let found = match task {
        VqaTaskType::ConstructionType => canonical_types(raw),
        VqaTaskType::Location => match loc.granularity {
            LocationGranularity::Country => hit(&mut loc.known_locations()),
            LocationGranularity::Region => Some(raw.trim().to_string()).filter(|r| !r.is_empty()),
        },
        VqaTaskType::PairTransition if norm == normalize("no apparent change") => {
            Some(crate::pairs::NO_CHANGE.to_string())
        }
        _ => hit(&mut answer_set(task).into_iter()),
    };
    found.unwrap_or_else(|| UNKNOWN.to_string())
}

/// Membership in the task's closed answer set (always including "Unknown").
pub fn is_closed_answer(answer: &str, task: VqaTaskType, loc: &LocationConfig) -> bool {
    answer == UNKNOWN || canonicalize_answer_with(answer, task, loc) == answer
}

fn image_of(chip: &ChipRecord) -> ImageRef {
    ImageRef {
        path: chip.path.clone(),
        acquired: chip.acquired.date(),
    }
}

pub(crate) fn make_example(
    task: VqaTaskType,
    site_id: &str,
    images: Vec<ImageRef>,
    question: &str,
    answer: String,
    provenance: Vec<String>,
) -> VqaExample {
    let keys: Vec<&str> = images.iter().map(|i| i.path.as_str()).collect();
    VqaExample {
        example_id: example_id(site_id, &keys, task),
        task,
        site_id: site_id.to_string(),
        images,
        question: question.to_string(),
        answer,
        provenance,
    }
}

/// Exactly three examples per chip: type, phase and location.
pub fn generate_single_image_triplets(chip: &ChipRecord, loc: &LocationConfig) -> Vec<VqaExample> {
    let prov = vec![chip.annotation_key.key_string()];
    let img = image_of(chip);
    vec![
        make_example(
            VqaTaskType::ConstructionType,
            &chip.site_id,
            vec![img.clone()],
            Q_CONSTRUCTION_TYPE,
            type_answer(&chip.types),
            prov.clone(),
        ),
        make_example(
            VqaTaskType::TemporalPhase,
            &chip.site_id,
            vec![img.clone()],
            Q_TEMPORAL_PHASE,
            chip.phase.display().to_string(),
            prov.clone(),
        ),
        make_example(
            VqaTaskType::Location,
            &chip.site_id,
            vec![img],
            loc.question(),
            loc.answer_for(&chip.region_id)
                .unwrap_or_else(|| UNKNOWN.to_string()),
            prov,
        ),
    ]
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GenerationReport {
    pub chips: u64,
    pub examples: u64,
    pub per_task: BTreeMap<VqaTaskType, u64>,
    pub unknown_answers: BTreeMap<VqaTaskType, u64>,
    /// Chips whose region gave no location answer.
    pub missing_location: u64,
}

impl GenerationReport {
    pub fn tally(&mut self, examples: &[VqaExample]) {
        for ex in examples {
            self.examples += 1;
            *self.per_task.entry(ex.task).or_default() += 1;
            if ex.answer == UNKNOWN || ex.answer == crate::pairs::UNKNOWN_TRANSITION {
                *self.unknown_answers.entry(ex.task).or_default() += 1;
            }
        }
    }

    pub fn unknown_rate(&self, task: VqaTaskType) -> Option<f64> {
        let n = *self.per_task.get(&task)?;
        Some(self.unknown_answers.get(&task).copied().unwrap_or(0) as f64 / n as f64)
    }
}

/// Examples for every chip, stably sorted by example id.
pub fn generate_all(
    chips: &[ChipRecord],
    loc: &LocationConfig,
) -> (Vec<VqaExample>, GenerationReport) {
    let mut out: Vec<VqaExample> = chips
        .par_iter()
        .flat_map_iter(|c| generate_single_image_triplets(c, loc))
        .collect();
    out.sort_by(|a, b| a.example_id.cmp(&b.example_id));
    let mut report = GenerationReport {
        chips: chips.len() as u64,
        missing_location: chips
            .iter()
            .filter(|c| loc.answer_for(&c.region_id).is_none())
            .count() as u64,
        ..Default::default()
    };
    report.tally(&out);
    (out, report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExampleFormat {
    #[default]
    JsonlChat,
    TsvFlat,
}

impl ExampleFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ExampleFormat::JsonlChat => "jsonl",
            ExampleFormat::TsvFlat => "tsv",
        }
    }
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: String,
}

#[derive(Serialize)]
struct ChatRecord<'a> {
    id: &'a str,
    task: VqaTaskType,
    site_id: &'a str,
    images: Vec<&'a str>,
    messages: Vec<ChatMessage<'a>>,
    provenance: &'a [String],
}

/// User-turn text: one dated marker per image, then the question.
pub fn user_prompt(ex: &VqaExample) -> String {
    let mut s = String::new();
    for (i, img) in ex.images.iter().enumerate() {
        s.push_str(&format!(
            "Image {} (acquired {}): <image>\n",
            i + 1,
            img.acquired.format("%Y-%m-%d")
        ));
    }
    s.push_str(&ex.question);
    s
}

fn tsv_field(s: &str) -> String {
    s.chars()
        .map(|c| {
            if matches!(c, '\t' | '\n' | '\r') {
                ' '
            } else {
                c
            }
        })
        .collect()
}

/// One record without trailing newline.
pub fn serialize_example(ex: &VqaExample, format: ExampleFormat) -> String {
    match format {
        ExampleFormat::JsonlChat => {
            let rec = ChatRecord {
                id: &ex.example_id,
                task: ex.task,
                site_id: &ex.site_id,
                images: ex.images.iter().map(|i| i.path.as_str()).collect(),
                messages: vec![
                    ChatMessage {
                        role: "user",
                        content: user_prompt(ex),
                    },
                    ChatMessage {
                        role: "assistant",
                        content: ex.answer.clone(),
                    },
                ],
                provenance: &ex.provenance,
            };
            serde_json::to_string(&rec).expect("chat record serializes")
        }
        ExampleFormat::TsvFlat => {
            let paths: Vec<String> = ex.images.iter().map(|i| tsv_field(&i.path)).collect();
            [
                tsv_field(&ex.example_id),
                paths.join(","),
                tsv_field(&ex.question),
                tsv_field(&ex.answer),
                ex.task.as_str().to_string(),
            ]
            .join("\t")
        }
    }
}

pub const TSV_HEADER: &str = "example_id\tpaths\tquestion\tanswer\ttask";

/// Whole file body, one record per line, header first for TSV.
pub fn serialize_all(examples: &[VqaExample], format: ExampleFormat) -> String {
    let mut s = String::new();
    if format == ExampleFormat::TsvFlat {
        s.push_str(TSV_HEADER);
        s.push('\n');
    }
    for ex in examples {
        s.push_str(&serialize_example(ex, format));
        s.push('\n');
    }
    s
}
