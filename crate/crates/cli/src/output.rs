//! Rendering of API responses for people and for scripts.

use iotmp_core::http::ApiResponse;
use serde_json::Value as Json;

/// Exit code for an HTTP status: 2xx is 0, 4xx is 2, 5xx is 3.
pub fn exit_code(status: u16) -> i32 {
    match status {
        200..=299 => 0,
        400..=499 => 2,
        _ => 3,
    }
}

/// The raw body for `--json`, a readable rendering otherwise.
pub fn render(r: &ApiResponse, json: bool) -> String {
    if json {
        let mut s = String::from_utf8_lossy(&r.body).into_owned();
        if !s.ends_with('\n') {
            s.push('\n');
        }
        return s;
    }
    let Some(body) = r.body_json() else {
        return format!("HTTP {}\n{}\n", r.status, String::from_utf8_lossy(&r.body));
    };
    if !r.is_success() {
        let code = body["error"].as_str().unwrap_or("Error");
        let msg = body["message"].as_str().unwrap_or("");
        let mut s = format!("error {}: {code}", r.status);
        if !msg.is_empty() {
            s.push_str(": ");
            s.push_str(msg);
        }
        if let Some(p) = body["decision_point"].as_str() {
            s.push_str(&format!(" (denied at {p})"));
        }
        s.push('\n');
        return s;
    }
    human(&body)
}

/// Objects become `key: value` lines; arrays of objects become tables.
pub fn human(body: &Json) -> String {
    let mut out = String::new();
    match body {
        Json::Object(map) => {
            let width = map.keys().map(String::len).max().unwrap_or(0);
            for (k, v) in map {
                match v {
                    Json::Array(items) if !items.is_empty() && items.iter().all(Json::is_object) => {
                        out.push_str(&format!("{k}:\n"));
                        out.push_str(&table(items));
                    }
                    _ => out.push_str(&format!("{k:width$}  {}\n", cell(v))),
                }
            }
        }
        Json::Array(items) if items.iter().all(Json::is_object) && !items.is_empty() => out.push_str(&table(items)),
        other => {
            out.push_str(&cell(other));
            out.push('\n');
        }
    }
    out
}

fn cell(v: &Json) -> String {
    match v {
        Json::String(s) => s.clone(),
        Json::Null => "-".into(),
        Json::Array(items) if items.iter().all(Json::is_string) => {
            items.iter().filter_map(Json::as_str).collect::<Vec<_>>().join(", ")
        }
        Json::Object(m) if m.len() == 1 => {
            let (tag, inner) = m.iter().next().expect("one entry");
            match (tag.as_str(), inner) {
                ("location", Json::Object(l)) => location(l),
                (_, Json::Object(_) | Json::Array(_)) => v.to_string(),
                _ => cell(inner),
            }
        }
        other => other.to_string(),
    }
}

fn location(l: &serde_json::Map<String, Json>) -> String {
    let path: Vec<&str> = l
        .get("path")
        .and_then(Json::as_array)
        .map(|p| p.iter().filter_map(Json::as_str).collect())
        .unwrap_or_default();
    let coords = l.get("coords").map(|c| format!(" ({}, {})", c["lat"], c["lon"])).unwrap_or_default();
    format!("{}{coords}", path.join(" > "))
}

fn table(items: &[Json]) -> String {
    let mut cols: Vec<String> = Vec::new();
    for it in items {
        for k in it.as_object().expect("objects only").keys() {
            if !cols.contains(k) {
                cols.push(k.clone());
            }
        }
    }
    let rows: Vec<Vec<String>> = items
        .iter()
        .map(|it| cols.iter().map(|c| it.get(c).map(cell).unwrap_or_else(|| "-".into())).collect())
        .collect();
    let widths: Vec<usize> = cols
        .iter()
        .enumerate()
        .map(|(i, c)| rows.iter().map(|r| r[i].len()).chain([c.len()]).max().unwrap_or(0))
        .collect();
    let line = |cells: &[String]| {
        let parts: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:w$}")).collect();
        format!("  {}\n", parts.join("  ").trim_end())
    };
    let mut out = line(&cols);
    for r in &rows {
        out.push_str(&line(r));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn status_classes_map_to_exit_codes() {
        assert_eq!(exit_code(200), 0);
        assert_eq!(exit_code(201), 0);
        assert_eq!(exit_code(401), 2);
        assert_eq!(exit_code(404), 2);
        assert_eq!(exit_code(503), 3);
        assert_eq!(exit_code(504), 3);
    }

    #[test]
    fn errors_render_code_and_decision_point() {
        let r = ApiResponse::json(403, &json!({"error": "Forbidden", "message": "access denied", "decision_point": "insecure_channel"}));
        assert_eq!(render(&r, false), "error 403: Forbidden: access denied (denied at insecure_channel)\n");
    }

    #[test]
    fn arrays_of_objects_become_tables() {
        let body = json!({"pending": [{"agentid": "a1", "mtid": "mt001"}, {"agentid": "a22", "mtid": "mt002"}]});
        let text = human(&body);
        assert_eq!(text, "pending:\n  agentid  mtid\n  a1       mt001\n  a22      mt002\n");
    }

    #[test]
    fn locations_render_as_breadcrumbs() {
        let v = json!({"location": {"path": ["Terra", "Borealis"], "coords": {"lat": 1.0, "lon": 2.0}}});
        assert_eq!(cell(&v), "Terra > Borealis (1.0, 2.0)");
    }

    #[test]
    fn string_lists_are_joined() {
        assert_eq!(cell(&json!(["mt001", "mt002"])), "mt001, mt002");
        assert_eq!(cell(&json!([])), "");
    }
}
