//! Chronological chip pairs per site and the three comparison templates.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::chip::ChipRecord;
use crate::taxonomy::PhaseLabel;
use crate::vqa::{
    make_example, ImageRef, VqaExample, VqaTaskType, Q_PAIR_CHANGE, Q_PAIR_ORDER,
    Q_PAIR_TRANSITION, UNKNOWN,
};

pub const NO_CHANGE: &str = "no apparent phase change";
pub const UNKNOWN_TRANSITION: &str = "Unknown transition";
pub const IMAGE_1: &str = "Image 1";
pub const IMAGE_2: &str = "Image 2";

/// Template order used when fewer than three templates per pair are requested.
pub const TEMPLATE_ORDER: [VqaTaskType; 3] = VqaTaskType::PAIR;

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationPair {
    pub site_id: String,
    pub earlier: ChipRecord,
    pub later: ChipRecord,
    pub delta_days: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionLabel {
    pub display: String,
    pub canonical_progression: bool,
}

const CANONICAL_CHAINS: [(PhaseLabel, PhaseLabel); 3] = [
    (PhaseLabel::NoActivity, PhaseLabel::SitePreparation),
    (PhaseLabel::SitePreparation, PhaseLabel::ActiveConstruction),
    (PhaseLabel::ActiveConstruction, PhaseLabel::PostConstruction),
];

/// Total over all 25 phase pairs; `p1` is the earlier phase.
pub fn phase_transition_label(p1: PhaseLabel, p2: PhaseLabel) -> TransitionLabel {
    let (display, canonical_progression) = if !p1.is_known() || !p2.is_known() {
        (UNKNOWN_TRANSITION.to_string(), false)
    } else if p1 == p2 {
        (NO_CHANGE.to_string(), false)
    } else {
        (
            format!("{} to {}", p1.display(), p2.display()),
            CANONICAL_CHAINS.contains(&(p1, p2)),
        )
    };
    TransitionLabel {
        display,
        canonical_progression,
    }
}

/// Every display string the transition task can emit.
pub fn all_transition_displays() -> Vec<String> {
    let mut v: Vec<String> = Vec::new();
    for p1 in PhaseLabel::ALL {
        for p2 in PhaseLabel::ALL {
            let d = phase_transition_label(p1, p2).display;
            if !v.contains(&d) {
                v.push(d);
            }
        }
    }
    v
}

fn chrono_key(c: &ChipRecord) -> (chrono::NaiveDateTime, &str, &str) {
    (
        c.acquired,
        c.source_ref.as_deref().unwrap_or(""),
        c.path.as_str(),
    )
}

/// Sorts one site's chips into index order: acquisition time, then source ref.
pub fn sort_chronologically(chips: &mut [ChipRecord]) {
    chips.sort_by(|a, b| chrono_key(a).cmp(&chrono_key(b)));
}

/// All C(n,2) pairs `(i, j)`, `i < j`, over chips already in index order.
pub fn enumerate_pairs(chips: &[ChipRecord]) -> Vec<ObservationPair> {
    let mut out = Vec::with_capacity(chips.len() * chips.len().saturating_sub(1) / 2);
    for (i, a) in chips.iter().enumerate() {
        for b in &chips[i + 1..] {
            out.push(ObservationPair {
                site_id: a.site_id.clone(),
                earlier: a.clone(),
                later: b.clone(),
                delta_days: (b.acquired.date() - a.acquired.date()).num_days(),
            });
        }
    }
    out
}

/// Presentation swap bit for the order task.
pub fn order_swapped(seed: u64, example_id: &str) -> bool {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(example_id.as_bytes());
    h.finalize()[0] & 1 == 1
}

fn image(c: &ChipRecord) -> ImageRef {
    ImageRef {
        path: c.path.clone(),
        acquired: c.acquired.date(),
    }
}

fn change_answer(p1: PhaseLabel, p2: PhaseLabel) -> &'static str {
    if !p1.is_known() || !p2.is_known() {
        UNKNOWN
    } else if p1 != p2 {
        "Yes"
    } else {
        "No"
    }
}

/// The first `templates` of change, order and transition examples for one pair.
pub fn generate_pair_examples_with(
    pair: &ObservationPair,
    seed: u64,
    templates: usize,
) -> Vec<VqaExample> {
    let (a, b) = (&pair.earlier, &pair.later);
    let chrono_imgs = vec![image(a), image(b)];
    let prov = vec![a.annotation_key.key_string(), b.annotation_key.key_string()];
    let mut out = Vec::with_capacity(3);
    for task in TEMPLATE_ORDER.into_iter().take(templates) {
        let ex = match task {
            VqaTaskType::PairChange => make_example(
                task,
                &pair.site_id,
                chrono_imgs.clone(),
                Q_PAIR_CHANGE,
                change_answer(a.phase, b.phase).to_string(),
                prov.clone(),
            ),
            VqaTaskType::PairOrder => {
                // The id is fixed by chronological order so the swap cannot feed back into it.
                let mut ex = make_example(
                    task,
                    &pair.site_id,
                    chrono_imgs.clone(),
                    Q_PAIR_ORDER,
                    IMAGE_1.to_string(),
                    prov.clone(),
                );
                if order_swapped(seed, &ex.example_id) {
                    ex.images.reverse();
                    ex.provenance.reverse();
                    ex.answer = IMAGE_2.to_string();
                }
                ex
            }
            _ => make_example(
                task,
                &pair.site_id,
                chrono_imgs.clone(),
                Q_PAIR_TRANSITION,
                phase_transition_label(a.phase, b.phase).display,
                prov.clone(),
            ),
        };
        out.push(ex);
    }
    out
}

pub fn generate_pair_examples(pair: &ObservationPair, seed: u64) -> Vec<VqaExample> {
    generate_pair_examples_with(pair, seed, 3)
}

pub fn choose2(n: u64) -> u64 {
    n * n.saturating_sub(1) / 2
}

/// `templates_per_pair × Σ C(nᵢ, 2)`.
pub fn count_expected(site_chip_counts: &[u64], templates_per_pair: u64) -> u64 {
    templates_per_pair * site_chip_counts.iter().map(|&n| choose2(n)).sum::<u64>()
}

/// Same with each site's pairs capped.
pub fn count_expected_capped(
    site_chip_counts: &[u64],
    templates_per_pair: u64,
    max_pairs_per_site: Option<u64>,
) -> u64 {
    let cap = max_pairs_per_site.unwrap_or(u64::MAX);
    templates_per_pair
        * site_chip_counts
            .iter()
            .map(|&n| choose2(n).min(cap))
            .sum::<u64>()
}

fn pair_rank(seed: u64, p: &ObservationPair) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(p.site_id.as_bytes());
    h.update([0x1f]);
    h.update(p.earlier.path.as_bytes());
    h.update([0x1f]);
    h.update(p.later.path.as_bytes());
    h.finalize().into()
}

/// Keeps `cap` pairs chosen by seeded hash rank; survivors stay in enumeration order.
pub fn subsample_pairs(pairs: Vec<ObservationPair>, cap: usize, seed: u64) -> Vec<ObservationPair> {
    if pairs.len() <= cap {
        return pairs;
    }
    let mut ranked: Vec<(usize, [u8; 32])> = pairs
        .iter()
        .map(|p| pair_rank(seed, p))
        .enumerate()
        .collect();
    ranked.sort_by(|a, b| a.1.cmp(&b.1).then(a.0.cmp(&b.0)));
    let mut keep: Vec<usize> = ranked[..cap].iter().map(|r| r.0).collect();
    keep.sort_unstable();
    let mut it = keep.into_iter().peekable();
    pairs
        .into_iter()
        .enumerate()
        .filter(|(i, _)| {
            if it.peek() == Some(i) {
                it.next();
                true
            } else {
                false
            }
        })
        .map(|(_, p)| p)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairConfig {
    pub seed: u64,
    pub templates_per_pair: usize,
    pub max_pairs_per_site: Option<usize>,
}

impl Default for PairConfig {
    fn default() -> Self {
        PairConfig {
            seed: 0,
            templates_per_pair: 3,
            max_pairs_per_site: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AugmentationReport {
    pub sites: u64,
    pub pairs: u64,
    pub examples: u64,
    /// Number of sites having each pair count.
    pub pairs_per_site_histogram: BTreeMap<u64, u64>,
    pub template_counts: BTreeMap<VqaTaskType, u64>,
    pub capped_sites: u64,
    pub canonical_progressions: u64,
    /// Known-phase transitions that move backwards along the chain.
    pub regressions: u64,
}

/// Groups chips by site and sorts each group into index order.
pub fn group_by_site(chips: &[ChipRecord]) -> BTreeMap<String, Vec<ChipRecord>> {
    let mut sites: BTreeMap<String, Vec<ChipRecord>> = BTreeMap::new();
    for c in chips {
        sites.entry(c.site_id.clone()).or_default().push(c.clone());
    }
    for v in sites.values_mut() {
        sort_chronologically(v);
    }
    sites
}

/// Pair examples over every site, stably sorted by example id.
pub fn generate_all_pairs(
    chips: &[ChipRecord],
    cfg: &PairConfig,
) -> (Vec<VqaExample>, AugmentationReport) {
    let sites = group_by_site(chips);
    let per_site: Vec<(Vec<ObservationPair>, bool)> = sites
        .par_iter()
        .map(|(_, chips)| {
            let pairs = enumerate_pairs(chips);
            match cfg.max_pairs_per_site {
                Some(cap) if pairs.len() > cap => (subsample_pairs(pairs, cap, cfg.seed), true),
                _ => (pairs, false),
            }
        })
        .collect();
    let mut report = AugmentationReport {
        sites: sites.len() as u64,
        ..Default::default()
    };
    for (pairs, capped) in &per_site {
        report.pairs += pairs.len() as u64;
        *report
            .pairs_per_site_histogram
            .entry(pairs.len() as u64)
            .or_default() += 1;
        report.capped_sites += *capped as u64;
        for p in pairs {
            let t = phase_transition_label(p.earlier.phase, p.later.phase);
            if t.canonical_progression {
                report.canonical_progressions += 1;
            } else if p.earlier.phase.is_known()
                && p.later.phase.is_known()
                && p.later.phase < p.earlier.phase
            {
                report.regressions += 1;
            }
        }
    }
    let mut out: Vec<VqaExample> = per_site
        .par_iter()
        .flat_map_iter(|(pairs, _)| {
            pairs
                .iter()
                .flat_map(|p| generate_pair_examples_with(p, cfg.seed, cfg.templates_per_pair))
                .collect::<Vec<_>>()
        })
        .collect();
    out.sort_by(|a, b| a.example_id.cmp(&b.example_id));
    report.examples = out.len() as u64;
    for ex in &out {
        *report.template_counts.entry(ex.task).or_default() += 1;
    }
    (out, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::ConstructionType;
    use crate::vqa::tests::chip;
    use crate::vqa::{is_closed_answer, LocationConfig};
    use proptest::prelude::*;

    fn site_chips(site: &str, phases: &[PhaseLabel]) -> Vec<ChipRecord> {
        phases
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                let ts = format!("2019-{:02}-{:02}T10:00:00", 1 + i / 28 % 12, 1 + i % 28);
                let mut c = chip(site, &ts, &[ConstructionType::Commercial], p);
                c.path = format!("{site}/{i:04}.tif");
                c
            })
            .collect()
    }

    #[test]
    fn transition_labels() {
        let t = phase_transition_label(PhaseLabel::SitePreparation, PhaseLabel::ActiveConstruction);
        assert_eq!(t.display, "Site Preparation to Active Construction");
        assert!(t.canonical_progression);
        let t = phase_transition_label(
            PhaseLabel::ActiveConstruction,
            PhaseLabel::ActiveConstruction,
        );
        assert_eq!(t.display, "no apparent phase change");
        assert!(!t.canonical_progression);
        assert_eq!(
            phase_transition_label(PhaseLabel::Unknown, PhaseLabel::PostConstruction).display,
            "Unknown transition"
        );
        let t = phase_transition_label(PhaseLabel::PostConstruction, PhaseLabel::SitePreparation);
        assert_eq!(t.display, "Post Construction to Site Preparation");
        assert!(!t.canonical_progression);
        // 12 ordered distinct known pairs + no change + unknown.
        assert_eq!(all_transition_displays().len(), 14);
    }

    #[test]
    fn pair_counts() {
        for (n, want) in [(0, 0), (1, 0), (3, 3), (250, 31_125)] {
            let chips = site_chips("BR_R001_0001", &vec![PhaseLabel::ActiveConstruction; n]);
            assert_eq!(enumerate_pairs(&chips).len(), want);
        }
        assert_eq!(count_expected(&[2, 3], 3), 12);
        assert_eq!(count_expected(&[0, 1, 1], 3), 0);
        assert_eq!(count_expected_capped(&[10, 3], 3, Some(5)), 3 * (5 + 3));
    }

    #[test]
    fn example_answers() {
        let chips = site_chips(
            "BR_R001_0001",
            &[PhaseLabel::SitePreparation, PhaseLabel::ActiveConstruction],
        );
        let pair = &enumerate_pairs(&chips)[0];
        let ex = generate_pair_examples(pair, 7);
        assert_eq!(ex.len(), 3);
        assert_eq!(ex[0].answer, "Yes");
        assert!(ex[1].answer == IMAGE_1 || ex[1].answer == IMAGE_2);
        assert_eq!(ex[2].answer, "Site Preparation to Active Construction");
        assert_eq!(ex, generate_pair_examples(pair, 7));
        let earlier_idx = if ex[1].answer == IMAGE_1 { 0 } else { 1 };
        assert_eq!(ex[1].images[earlier_idx].path, pair.earlier.path);
        assert!(ex[2].images[0].acquired <= ex[2].images[1].acquired);

        let chips = site_chips(
            "BR_R001_0001",
            &[PhaseLabel::Unknown, PhaseLabel::ActiveConstruction],
        );
        let ex = generate_pair_examples(&enumerate_pairs(&chips)[0], 7);
        assert_eq!(
            (ex[0].answer.as_str(), ex[2].answer.as_str()),
            ("Unknown", "Unknown transition")
        );
        assert_eq!(ex[1].task, VqaTaskType::PairOrder);
    }

    #[test]
    fn capping_is_deterministic() {
        let chips = site_chips("BR_R001_0001", &[PhaseLabel::ActiveConstruction; 30]);
        let cfg = PairConfig {
            seed: 3,
            templates_per_pair: 2,
            max_pairs_per_site: Some(50),
        };
        let (a, rep) = generate_all_pairs(&chips, &cfg);
        let (b, _) = generate_all_pairs(&chips, &cfg);
        assert_eq!(a, b);
        assert_eq!(a.len(), 100);
        assert_eq!(rep.capped_sites, 1);
        assert_eq!(rep.template_counts.get(&VqaTaskType::PairTransition), None);
    }

    proptest! {
        #[test]
        fn generated_count_matches_formula(
            sizes in proptest::collection::vec(0usize..9, 0..6),
            phase_seed in any::<u64>(),
            seed in any::<u64>(),
        ) {
            let mut chips = Vec::new();
            for (s, &n) in sizes.iter().enumerate() {
                let phases: Vec<PhaseLabel> = (0..n)
                    .map(|i| PhaseLabel::ALL[((phase_seed >> ((i + s) % 60)) % 5) as usize])
                    .collect();
                chips.extend(site_chips(&format!("BR_R001_{s:04}"), &phases));
            }
            let counts: Vec<u64> = sizes.iter().map(|&n| n as u64).collect();
            let (ex, rep) = generate_all_pairs(&chips, &PairConfig { seed, ..Default::default() });
            prop_assert_eq!(ex.len() as u64, count_expected(&counts, 3));
            prop_assert_eq!(rep.examples, ex.len() as u64);
            let loc = LocationConfig::default();
            for e in &ex {
                prop_assert!(is_closed_answer(&e.answer, e.task, &loc), "{:?}", e);
                prop_assert_eq!(e.images.len(), 2);
                if e.task == VqaTaskType::PairTransition {
                    prop_assert!(e.images[0].acquired <= e.images[1].acquired);
                }
            }
            prop_assert!(ex.windows(2).all(|w| w[0].example_id < w[1].example_id));
        }
    }
}
