//! Projected-versus-acquired breakdowns, label distributions and histograms.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::chip::ChipRecord;
use crate::taxonomy::{ConstructionType, PhaseLabel, SensorFamily, TypeSet};

/// Annotation-side view of one observation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservationRow {
    pub site_id: String,
    pub sensor: SensorFamily,
    pub source_ref: Option<String>,
    pub types: TypeSet,
    pub phase: PhaseLabel,
}

/// `100·acquired/projected` in tenths of a percent, rounded half up.
pub fn percent_tenths(acquired: u64, projected: u64) -> Option<u64> {
    if projected == 0 {
        return None;
    }
    let (a, p) = (acquired as u128, projected as u128);
    Some(((2000 * a + p) / (2 * p)) as u64)
}

pub fn format_percent(tenths: Option<u64>) -> String {
    match tenths {
        None => "—".to_string(),
        Some(t) => {
            let star = if t > 1000 { "*" } else { "" };
            format!("{}.{}%{}", t / 10, t % 10, star)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Section {
    Summary,
    ConstructionType,
    TemporalPhase,
}

impl Section {
    pub fn as_str(self) -> &'static str {
        match self {
            Section::Summary => "summary",
            Section::ConstructionType => "construction_type",
            Section::TemporalPhase => "temporal_phase",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BreakdownRow {
    pub section: Section,
    pub label: String,
    pub projected: u64,
    pub acquired: u64,
    pub percent_tenths: Option<u64>,
    /// Acquired exceeds projected.
    pub over_projected: bool,
}

impl BreakdownRow {
    fn new(section: Section, label: &str, projected: u64, acquired: u64) -> Self {
        BreakdownRow {
            section,
            label: label.to_string(),
            projected,
            acquired,
            percent_tenths: percent_tenths(acquired, projected),
            over_projected: acquired > projected,
        }
    }

    pub fn percent(&self) -> Option<f64> {
        self.percent_tenths.map(|t| t as f64 / 10.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BreakdownTable {
    pub rows: Vec<BreakdownRow>,
    pub type_totals: BreakdownRow,
    pub phase_totals: BreakdownRow,
    /// Type labels outnumber observations on either side.
    pub multi_type_observations: bool,
}

fn type_row_label(t: ConstructionType) -> &'static str {
    if t == ConstructionType::Other {
        "Other Type"
    } else {
        t.display()
    }
}

impl BreakdownTable {
    pub fn row(&self, label: &str) -> Option<&BreakdownRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("section,label,projected,acquired,percent\n");
        for r in self
            .rows
            .iter()
            .chain([&self.type_totals, &self.phase_totals])
        {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.section.as_str(),
                r.label,
                r.projected,
                r.acquired,
                format_percent(r.percent_tenths)
            );
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:<24}{:>12}{:>12}{:>10}\n",
            "Sentinel-2 Subset", "Projected", "Acquired", "Percent"
        );
        let mut section = None;
        for r in &self.rows {
            if section != Some(r.section) {
                match r.section {
                    Section::ConstructionType => s.push_str("Construction Type Labels\n"),
                    Section::TemporalPhase => s.push_str("Temporal Phase Labels\n"),
                    Section::Summary => {}
                }
                section = Some(r.section);
            }
            let _ = writeln!(
                s,
                "{:<24}{:>12}{:>12}{:>10}",
                r.label,
                r.projected,
                r.acquired,
                format_percent(r.percent_tenths)
            );
        }
        if self.multi_type_observations {
            s.push_str("*Some observations carry several construction types.\n");
        }
        s
    }
}

/// Sentinel-2 projected (annotation) counts against acquired (chip) counts.
pub fn summarize_counts(observations: &[ObservationRow], chips: &[ChipRecord]) -> BreakdownTable {
    let s2: Vec<&ObservationRow> = observations
        .iter()
        .filter(|o| o.sensor == SensorFamily::Sentinel2)
        .collect();
    let proj_sites: BTreeSet<&str> = s2.iter().map(|o| o.site_id.as_str()).collect();
    let acq_sites: BTreeSet<&str> = chips.iter().map(|c| c.site_id.as_str()).collect();
    let proj_tiles: BTreeSet<&str> = s2
        .iter()
        .filter_map(|o| o.source_ref.as_deref())
        .filter(|r| !r.trim().is_empty())
        .collect();
    let acq_tiles: BTreeSet<&str> = chips.iter().map(|c| c.item_id.as_str()).collect();

    let mut rows = vec![
        BreakdownRow::new(
            Section::Summary,
            "Construction Sites",
            proj_sites.len() as u64,
            acq_sites.len() as u64,
        ),
        BreakdownRow::new(
            Section::Summary,
            "Target Observations",
            s2.len() as u64,
            chips.len() as u64,
        ),
        BreakdownRow::new(
            Section::Summary,
            "Source Image Tiles",
            proj_tiles.len() as u64,
            acq_tiles.len() as u64,
        ),
    ];
    let count_type = |t: ConstructionType| {
        (
            s2.iter().filter(|o| o.types.contains(&t)).count() as u64,
            chips.iter().filter(|c| c.types.contains(&t)).count() as u64,
        )
    };
    let (mut tp, mut ta) = (0, 0);
    for t in ConstructionType::KNOWN {
        let (p, a) = count_type(t);
        tp += p;
        ta += a;
        rows.push(BreakdownRow::new(
            Section::ConstructionType,
            type_row_label(t),
            p,
            a,
        ));
    }
    let (mut pp, mut pa) = (0, 0);
    for ph in PhaseLabel::KNOWN {
        let p = s2.iter().filter(|o| o.phase == ph).count() as u64;
        let a = chips.iter().filter(|c| c.phase == ph).count() as u64;
        pp += p;
        pa += a;
        rows.push(BreakdownRow::new(
            Section::TemporalPhase,
            ph.display(),
            p,
            a,
        ));
    }
    let all_types =
        |it: &mut dyn Iterator<Item = &TypeSet>| it.map(|t| t.len() as u64).sum::<u64>();
    let multi = all_types(&mut s2.iter().map(|o| &o.types)) > s2.len() as u64
        || all_types(&mut chips.iter().map(|c| &c.types)) > chips.len() as u64;
    BreakdownTable {
        rows,
        type_totals: BreakdownRow::new(Section::ConstructionType, "Totals", tp, ta),
        phase_totals: BreakdownRow::new(Section::TemporalPhase, "Totals", pp, pa),
        multi_type_observations: multi,
    }
}

/// Per-label counts split by sensor family.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LabelDistribution {
    pub types: BTreeMap<ConstructionType, BTreeMap<SensorFamily, u64>>,
    pub phases: BTreeMap<PhaseLabel, BTreeMap<SensorFamily, u64>>,
}

impl LabelDistribution {
    pub fn type_count(&self, t: ConstructionType, s: SensorFamily) -> u64 {
        self.types
            .get(&t)
            .and_then(|m| m.get(&s))
            .copied()
            .unwrap_or(0)
    }

    pub fn phase_count(&self, p: PhaseLabel, s: SensorFamily) -> u64 {
        self.phases
            .get(&p)
            .and_then(|m| m.get(&s))
            .copied()
            .unwrap_or(0)
    }

    pub fn phase_total(&self, p: PhaseLabel) -> u64 {
        self.phases.get(&p).map(|m| m.values().sum()).unwrap_or(0)
    }

    fn csv<K: Copy + Ord>(
        rows: &BTreeMap<K, BTreeMap<SensorFamily, u64>>,
        keys: &[K],
        name: impl Fn(K) -> &'static str,
    ) -> String {
        let mut s = String::from("label,Total");
        for f in SensorFamily::ALL {
            s.push(',');
            s.push_str(f.display());
        }
        s.push('\n');
        let mut totals = [0u64; 4];
        let mut body = String::new();
        for &k in keys {
            let m = rows.get(&k);
            let vals: Vec<u64> = SensorFamily::ALL
                .iter()
                .map(|f| m.and_then(|m| m.get(f)).copied().unwrap_or(0))
                .collect();
            for (t, v) in totals.iter_mut().zip(&vals) {
                *t += v;
            }
            let _ = write!(body, "{},{}", name(k), vals.iter().sum::<u64>());
            for v in vals {
                let _ = write!(body, ",{v}");
            }
            body.push('\n');
        }
        let _ = write!(s, "Totals,{}", totals.iter().sum::<u64>());
        for t in totals {
            let _ = write!(s, ",{t}");
        }
        s.push('\n');
        s + &body
    }

    pub fn types_csv(&self) -> String {
        Self::csv(&self.types, &ConstructionType::ALL, type_row_label)
    }

    pub fn phases_csv(&self) -> String {
        Self::csv(&self.phases, &PhaseLabel::ALL, PhaseLabel::display)
    }
}

pub fn label_distributions(observations: &[ObservationRow]) -> LabelDistribution {
    let mut d = LabelDistribution::default();
    for o in observations {
        for &t in &o.types {
            *d.types.entry(t).or_default().entry(o.sensor).or_default() += 1;
        }
        *d.phases
            .entry(o.phase)
            .or_default()
            .entry(o.sensor)
            .or_default() += 1;
    }
    d
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistogramKind {
    ChipPx,
    ObsPerSite,
    SpanDays,
}

impl HistogramKind {
    pub const ALL: [HistogramKind; 3] = [
        HistogramKind::ChipPx,
        HistogramKind::ObsPerSite,
        HistogramKind::SpanDays,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            HistogramKind::ChipPx => "chip_px",
            HistogramKind::ObsPerSite => "obs_per_site",
            HistogramKind::SpanDays => "span_days",
        }
    }

    pub fn unit(self) -> &'static str {
        match self {
            HistogramKind::ChipPx => "px",
            HistogramKind::ObsPerSite => "count",
            HistogramKind::SpanDays => "days",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BinWidths {
    pub chip_px: u64,
    pub obs_per_site: u64,
    pub span_days: u64,
}

impl Default for BinWidths {
    fn default() -> Self {
        BinWidths {
            chip_px: 10,
            obs_per_site: 5,
            span_days: 90,
        }
    }
}

impl BinWidths {
    pub fn get(&self, kind: HistogramKind) -> u64 {
        match kind {
            HistogramKind::ChipPx => self.chip_px,
            HistogramKind::ObsPerSite => self.obs_per_site,
            HistogramKind::SpanDays => self.span_days,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub kind: HistogramKind,
    pub unit: String,
    /// `counts.len() + 1` edges; bin `i` is `[edges[i], edges[i+1])`.
    pub edges: Vec<u64>,
    pub counts: Vec<u64>,
    pub min: Option<u64>,
    pub max: Option<u64>,
    pub median: Option<f64>,
}

impl Histogram {
    pub fn from_values(kind: HistogramKind, values: &[u64], width: u64) -> Histogram {
        let width = width.max(1);
        let mut sorted = values.to_vec();
        sorted.sort_unstable();
        let (min, max) = (sorted.first().copied(), sorted.last().copied());
        let median = match sorted.len() {
            0 => None,
            n if n % 2 == 1 => Some(sorted[n / 2] as f64),
            n => Some((sorted[n / 2 - 1] as f64 + sorted[n / 2] as f64) / 2.0),
        };
        let (edges, counts) = match (min, max) {
            (Some(lo), Some(hi)) => {
                let first = lo / width * width;
                let nbins = (hi / width - lo / width + 1) as usize;
                let edges: Vec<u64> = (0..=nbins as u64).map(|i| first + i * width).collect();
                let mut counts = vec![0u64; nbins];
                for v in &sorted {
                    counts[((v - first) / width) as usize] += 1;
                }
                (edges, counts)
            }
            _ => (Vec::new(), Vec::new()),
        };
        Histogram {
            kind,
            unit: kind.unit().to_string(),
            edges,
            counts,
            min,
            max,
            median,
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Count of the bin containing `v`.
    pub fn count_at(&self, v: u64) -> u64 {
        self.edges
            .windows(2)
            .zip(&self.counts)
            .find(|(e, _)| e[0] <= v && v < e[1])
            .map(|(_, c)| *c)
            .unwrap_or(0)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("bin_start_{u},bin_end_{u},count\n", u = self.unit);
        for (e, c) in self.edges.windows(2).zip(&self.counts) {
            let _ = writeln!(s, "{},{},{}", e[0], e[1], c);
        }
        s
    }

    pub fn to_svg(&self) -> String {
        let (w, h, pad) = (640.0, 360.0, 40.0);
        let n = self.counts.len().max(1) as f64;
        let peak = self.counts.iter().copied().max().unwrap_or(0).max(1) as f64;
        let bw = (w - 2.0 * pad) / n;
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
        );
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\" text-anchor=\"middle\">{} ({})</text>",
            w / 2.0,
            self.kind.as_str(),
            self.unit
        );
        let _ = writeln!(
            s,
            "<line x1=\"{pad}\" y1=\"{y}\" x2=\"{x2}\" y2=\"{y}\" stroke=\"black\"/>",
            y = h - pad,
            x2 = w - pad
        );
        for (i, (e, &c)) in self.edges.windows(2).zip(&self.counts).enumerate() {
            let bh = (h - 2.0 * pad - 20.0) * c as f64 / peak;
            let _ = writeln!(
                s,
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"steelblue\"><title>[{}, {}): {}</title></rect>",
                pad + i as f64 * bw,
                h - pad - bh,
                (bw - 1.0).max(0.5),
                bh,
                e[0],
                e[1],
                c
            );
        }
        if let (Some(first), Some(last)) = (self.edges.first(), self.edges.last()) {
            let _ = writeln!(
                s,
                "<text x=\"{pad}\" y=\"{y}\" font-family=\"sans-serif\" font-size=\"11\">{first}</text>",
                y = h - pad + 14.0
            );
            let _ = writeln!(
                s,
                "<text x=\"{x}\" y=\"{y}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{last}</text>",
                x = w - pad,
                y = h - pad + 14.0
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

/// Per-chip or per-site values behind each histogram.
pub fn histogram_values(chips: &[ChipRecord], kind: HistogramKind) -> Vec<u64> {
    match kind {
        HistogramKind::ChipPx => chips
            .iter()
            .map(|c| c.diagnostics.px_width as u64)
            .collect(),
        HistogramKind::ObsPerSite | HistogramKind::SpanDays => {
            let mut sites: BTreeMap<&str, Vec<chrono::NaiveDate>> = BTreeMap::new();
            for c in chips {
                sites.entry(&c.site_id).or_default().push(c.acquired.date());
            }
            sites
                .values()
                .map(|d| match kind {
                    HistogramKind::ObsPerSite => d.len() as u64,
                    _ => {
                        let (lo, hi) = (d.iter().min().unwrap(), d.iter().max().unwrap());
                        (*hi - *lo).num_days() as u64
                    }
                })
                .collect()
        }
    }
}

pub fn histogram_report(
    chips: &[ChipRecord],
    kind: HistogramKind,
    widths: &BinWidths,
) -> Histogram {
    Histogram::from_values(kind, &histogram_values(chips, kind), widths.get(kind))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vqa::tests::chip;

    fn obs(site: &str, phase: PhaseLabel, types: &[ConstructionType]) -> ObservationRow {
        ObservationRow {
            site_id: site.into(),
            sensor: SensorFamily::Sentinel2,
            source_ref: Some(format!("ref-{site}")),
            types: types.iter().copied().collect(),
            phase,
        }
    }

    #[test]
    fn half_up_rounding() {
        assert_eq!(percent_tenths(730, 837), Some(872));
        assert_eq!(percent_tenths(21_837, 24_775), Some(881));
        assert_eq!(percent_tenths(4_839, 5_818), Some(832));
        assert_eq!(percent_tenths(2_868, 2_736), Some(1048));
        assert_eq!(percent_tenths(1, 8), Some(125));
        assert_eq!(percent_tenths(1, 16), Some(63));
        assert_eq!(percent_tenths(0, 0), None);
        assert_eq!(format_percent(Some(1048)), "104.8%*");
        assert_eq!(format_percent(None), "—");
    }

    #[test]
    fn empty_table() {
        let t = summarize_counts(&[], &[]);
        assert!(t
            .rows
            .iter()
            .all(|r| r.projected == 0 && r.acquired == 0 && r.percent_tenths.is_none()));
        assert!(t.to_csv().contains("—"));
        assert_eq!(label_distributions(&[]), LabelDistribution::default());
    }

    #[test]
    fn multi_type_flag() {
        let o = vec![
            obs(
                "A",
                PhaseLabel::ActiveConstruction,
                &[ConstructionType::Commercial, ConstructionType::Industrial],
            ),
            obs(
                "A",
                PhaseLabel::SitePreparation,
                &[ConstructionType::Commercial],
            ),
        ];
        let t = summarize_counts(&o, &[]);
        assert!(t.multi_type_observations);
        assert_eq!(t.type_totals.projected, 3);
        assert_eq!(t.row("Target Observations").unwrap().projected, 2);
    }

    #[test]
    fn phase_distribution_counts() {
        let mut o = Vec::new();
        for (p, n) in [
            (PhaseLabel::NoActivity, 2),
            (PhaseLabel::SitePreparation, 3),
            (PhaseLabel::ActiveConstruction, 13),
            (PhaseLabel::PostConstruction, 2),
            (PhaseLabel::Unknown, 1),
        ] {
            for _ in 0..n {
                o.push(obs("A", p, &[ConstructionType::Other]));
            }
        }
        let d = label_distributions(&o);
        assert_eq!(
            d.phase_count(PhaseLabel::ActiveConstruction, SensorFamily::Sentinel2),
            13
        );
        assert_eq!(d.phase_total(PhaseLabel::Unknown), 1);
        let csv = d.phases_csv();
        assert!(csv
            .lines()
            .nth(1)
            .unwrap()
            .starts_with("Totals,21,21,0,0,0"));
        assert!(csv.contains("Active Construction,13,13,0,0,0"));
    }

    #[test]
    fn histograms() {
        let h = Histogram::from_values(HistogramKind::ObsPerSite, &[1, 1, 4], 1);
        assert_eq!((h.count_at(1), h.count_at(4), h.total()), (2, 1, 3));
        let mut chips = Vec::new();
        for site in ["A_R1_1", "A_R1_2"] {
            chips.push(chip(
                site,
                "2020-01-01T00:00:00",
                &[ConstructionType::Other],
                PhaseLabel::Unknown,
            ));
        }
        let h = histogram_report(&chips, HistogramKind::SpanDays, &BinWidths::default());
        assert_eq!(h.counts, vec![2]);
        assert_eq!(h.edges, vec![0, 90]);
        for c in &mut chips {
            c.diagnostics.px_width = 50;
        }
        let h = histogram_report(&chips, HistogramKind::ChipPx, &BinWidths::default());
        assert_eq!((h.edges.clone(), h.counts.clone()), (vec![50, 60], vec![2]));
        assert!(h.to_svg().starts_with("<svg"));
        assert_eq!(h.to_csv().lines().count(), 2);
        let e = Histogram::from_values(HistogramKind::ChipPx, &[], 10);
        assert_eq!((e.total(), e.median), (0, None));
    }

    proptest::proptest! {
        #[test]
        fn histogram_conserves_population(values in proptest::collection::vec(0u64..5000, 0..200), w in 1u64..200) {
            let h = Histogram::from_values(HistogramKind::SpanDays, &values, w);
            proptest::prop_assert_eq!(h.total(), values.len() as u64);
            proptest::prop_assert!(h.edges.windows(2).all(|e| e[0] < e[1]));
            for v in &values {
                proptest::prop_assert!(h.count_at(*v) > 0);
            }
        }
    }
}
