use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};

use super::fetch::filename_from_parts;
use super::{
    rank_candidates, select_asset, AssetRequest, Catalog, Downloader, LocalFileRecord,
    ScoreBreakdown,
};
use crate::refs::{Level, NormalizedImageRef, ReferenceFamily, SearchQuery};

/// Identifies one annotation observation.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AnnotationKey {
    pub site_id: String,
    pub obs_date: NaiveDate,
    pub raw_ref: Option<String>,
}

impl AnnotationKey {
    /// Stable string form used for manifest keys.
    pub fn key_string(&self) -> String {
        format!(
            "{}|{}|{}",
            self.site_id,
            self.obs_date,
            self.raw_ref.as_deref().unwrap_or("")
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResolutionStatus {
    /// Searched and chosen, not yet downloaded.
    Pending,
    Resolved,
    Exhausted,
    DownloadFailed,
    /// Every tier that returned nothing did so because the catalog failed.
    SearchFailed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TierTry {
    pub tier: u8,
    pub result_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChosenAsset {
    pub item_id: String,
    pub asset: String,
    pub href: String,
    pub collection: String,
    pub platform: String,
    pub tile_id: String,
    pub datetime: DateTime<Utc>,
    pub level: Level,
    pub cloud_cover_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolutionRecord {
    pub annotation_key: AnnotationKey,
    pub family: ReferenceFamily,
    pub tried_tiers: Vec<TierTry>,
    pub chosen: Option<ChosenAsset>,
    pub score: Option<ScoreBreakdown>,
    pub local_file: Option<LocalFileRecord>,
    pub status: ResolutionStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ChosenAsset {
    pub fn request(&self) -> AssetRequest {
        AssetRequest {
            item_id: self.item_id.clone(),
            asset: self.asset.clone(),
            href: self.href.clone(),
            filename: filename_from_parts(
                &self.platform,
                &self.tile_id,
                self.datetime,
                self.level,
                &self.asset,
            ),
        }
    }
}

/// Search and download in one step.
pub fn resolve_and_fetch<S: AsRef<str>>(
    key: AnnotationKey,
    ladder: &[SearchQuery],
    r: &NormalizedImageRef,
    catalog: &dyn Catalog,
    downloader: &Downloader,
    asset_preference: &[S],
) -> ResolutionRecord {
    let planned = plan_resolution(key, ladder, r, catalog, asset_preference);
    complete_resolution(planned, downloader)
}

/// Downloads the chosen asset of a pending record.
pub fn complete_resolution(mut rec: ResolutionRecord, downloader: &Downloader) -> ResolutionRecord {
    let Some(chosen) = rec
        .chosen
        .as_ref()
        .filter(|_| rec.status == ResolutionStatus::Pending)
    else {
        return rec;
    };
    match downloader.fetch(&chosen.request()) {
        Ok(o) => {
            rec.local_file = Some(o.record);
            rec.status = ResolutionStatus::Resolved;
            rec.error = None;
        }
        Err(e) => {
            rec.status = ResolutionStatus::DownloadFailed;
            rec.error = Some(e.to_string());
        }
    }
    rec
}

/// Walks the ladder until a tier's ranking head has a usable asset.
pub fn plan_resolution<S: AsRef<str>>(
    key: AnnotationKey,
    ladder: &[SearchQuery],
    r: &NormalizedImageRef,
    catalog: &dyn Catalog,
    asset_preference: &[S],
) -> ResolutionRecord {
    let mut rec = ResolutionRecord {
        annotation_key: key,
        family: r.family,
        tried_tiers: Vec::new(),
        chosen: None,
        score: None,
        local_file: None,
        status: ResolutionStatus::Exhausted,
        error: None,
    };
    let mut search_errors = 0;
    let mut any_hits = false;
    for q in ladder {
        let cands = match catalog.search(q) {
            Ok(c) => c,
            Err(e) => {
                search_errors += 1;
                rec.tried_tiers.push(TierTry {
                    tier: q.tier,
                    result_count: 0,
                    note: Some(e.to_string()),
                });
                rec.error = Some(e.to_string());
                continue;
            }
        };
        let n = cands.len();
        if n == 0 {
            rec.tried_tiers.push(TierTry {
                tier: q.tier,
                result_count: 0,
                note: None,
            });
            continue;
        }
        any_hits = true;
        let ranked = rank_candidates(cands, r);
        let (head, score) = &ranked[0];
        let (asset, href) = match select_asset(head, asset_preference) {
            Ok((name, a)) => (name.to_string(), a.href.clone()),
            Err(e) => {
                rec.tried_tiers.push(TierTry {
                    tier: q.tier,
                    result_count: n,
                    note: Some(e.to_string()),
                });
                continue;
            }
        };
        rec.tried_tiers.push(TierTry {
            tier: q.tier,
            result_count: n,
            note: None,
        });
        rec.chosen = Some(ChosenAsset {
            item_id: head.item_id.clone(),
            asset,
            href,
            collection: head.collection.clone(),
            platform: head.platform.clone(),
            tile_id: head.tile_id.clone(),
            datetime: head.datetime,
            level: head.level,
            cloud_cover_pct: head.cloud_cover_pct,
        });
        rec.score = Some(*score);
        rec.status = ResolutionStatus::Pending;
        rec.error = None;
        return rec;
    }
    if search_errors > 0 && !any_hits {
        rec.status = ResolutionStatus::SearchFailed;
    }
    rec
}
