use std::thread;
use std::time::Duration;

use serde_json::Value;
use tracing::{debug, warn};

use super::{search_body, CandidateScene, Catalog, RetryPolicy, StacError};
use crate::refs::SearchQuery;

/// STAC API client speaking `POST {endpoint}/search`.
pub struct HttpCatalog {
    endpoint: String,
    agent: ureq::Agent,
    page_limit: usize,
    max_pages: usize,
    retry: RetryPolicy,
}

enum Request {
    Get(String),
    Post(String, Value),
}

impl HttpCatalog {
    pub fn new(endpoint: &str, page_limit: usize, max_pages: usize, retry: RetryPolicy) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(120)))
            .build()
            .into();
        HttpCatalog {
            endpoint: endpoint.trim_end_matches('/').to_string(),
            agent,
            page_limit: page_limit.max(1),
            max_pages: max_pages.max(1),
            retry,
        }
    }

    fn send_once(&self, req: &Request) -> Result<Value, (bool, StacError)> {
        let result = match req {
            Request::Get(url) => self.agent.get(url).call(),
            Request::Post(url, body) => self.agent.post(url).send_json(body),
        };
        let mut resp = result.map_err(|e| (true, StacError::Transport(e.to_string())))?;
        let status = resp.status().as_u16();
        if status != 200 {
            let transient = status >= 500 || status == 408 || status == 429;
            return Err((transient, StacError::Transport(format!("HTTP {status}"))));
        }
        resp.body_mut()
            .with_config()
            .limit(64 * 1024 * 1024)
            .read_json::<Value>()
            .map_err(|e| (false, StacError::Protocol(e.to_string())))
    }

    fn send(&self, req: &Request) -> Result<Value, StacError> {
        let mut attempt = 0;
        loop {
            attempt += 1;
            match self.send_once(req) {
                Ok(v) => return Ok(v),
                Err((true, e)) if attempt < self.retry.max_attempts() => {
                    warn!(attempt, error = %e, "search request failed, retrying");
                    thread::sleep(self.retry.delay(attempt));
                }
                Err((_, e)) => return Err(e),
            }
        }
    }
}

/// Follow-up request described by a `next` link, if any.
fn next_request(page: &Value, previous_body: &Value) -> Option<Request> {
    let link = page["links"]
        .as_array()?
        .iter()
        .find(|l| l["rel"].as_str() == Some("next"))?;
    let href = link["href"].as_str()?.to_string();
    let method = link["method"].as_str().unwrap_or("GET");
    if !method.eq_ignore_ascii_case("POST") {
        return Some(Request::Get(href));
    }
    let body = match (link.get("body"), link["merge"].as_bool().unwrap_or(false)) {
        (Some(Value::Object(extra)), true) => {
            let mut merged = previous_body.clone();
            if let Some(obj) = merged.as_object_mut() {
                for (k, v) in extra {
                    obj.insert(k.clone(), v.clone());
                }
            }
            merged
        }
        (Some(b), false) => b.clone(),
        _ => previous_body.clone(),
    };
    Some(Request::Post(href, body))
}

pub(crate) fn parse_page(page: &Value) -> Result<Vec<CandidateScene>, StacError> {
    let features = page["features"]
        .as_array()
        .ok_or_else(|| StacError::Protocol("response has no features array".into()))?;
    let mut out = Vec::with_capacity(features.len());
    for f in features {
        match CandidateScene::from_item(f) {
            Ok(c) => out.push(c),
            Err(e) => warn!(error = %e, "skipping malformed item"),
        }
    }
    Ok(out)
}

impl Catalog for HttpCatalog {
    fn search(&self, q: &SearchQuery) -> Result<Vec<CandidateScene>, StacError> {
        let mut req = Request::Post(
            format!("{}/search", self.endpoint),
            search_body(q, self.page_limit),
        );
        let mut out = Vec::new();
        for page_no in 0..self.max_pages {
            let page = self.send(&req)?;
            out.extend(parse_page(&page)?);
            let body = match &req {
                Request::Post(_, b) => b.clone(),
                Request::Get(_) => Value::Null,
            };
            match next_request(&page, &body) {
                Some(next) => req = next,
                None => break,
            }
            debug!(tier = q.tier, page = page_no + 1, "following next link");
        }
        out.sort_by(|a, b| a.item_id.cmp(&b.item_id));
        out.dedup_by(|a, b| a.item_id == b.item_id);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn post_next_link_merges_body() {
        let page = json!({"links": [{"rel": "next", "method": "POST", "href": "http://x/search",
            "body": {"token": "abc"}, "merge": true}]});
        let prev = json!({"limit": 10, "collections": ["c"]});
        match next_request(&page, &prev) {
            Some(Request::Post(url, body)) => {
                assert_eq!(url, "http://x/search");
                assert_eq!(body["token"], "abc");
                assert_eq!(body["limit"], 10);
            }
            _ => panic!("expected POST"),
        }
        let get = json!({"links": [{"rel": "next", "href": "http://x/search?page=2"}]});
        assert!(matches!(next_request(&get, &prev), Some(Request::Get(_))));
        assert!(next_request(&json!({"links": []}), &prev).is_none());
    }

    #[test]
    fn non_stac_body_is_protocol_error() {
        assert!(matches!(
            parse_page(&json!({"hello": 1})),
            Err(StacError::Protocol(_))
        ));
    }
}
