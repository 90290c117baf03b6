//! Static HTML gallery of explanation panels.

use serde::{Deserialize, Serialize};

use crate::data::Outcome;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GalleryRow {
    pub sample_id: String,
    pub outcome: Outcome,
    pub class_name: String,
    pub targets: Vec<String>,
    pub prediction_set: Vec<String>,
    pub top_posterior: f64,
    /// Path of the panel image relative to the page.
    pub panel: String,
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

pub fn gallery_html(title: &str, rows: &[GalleryRow]) -> String {
    let mut html = format!(
        "<!DOCTYPE html>\n<html lang=\"en\">\n<head>\n<meta charset=\"utf-8\">\n<title>{t}</title>\n\
<style>\nbody {{ font-family: sans-serif; margin: 2em; }}\n\
table {{ border-collapse: collapse; }}\n\
td, th {{ padding: 6px 12px; border-bottom: 1px solid #ddd; text-align: left; vertical-align: middle; }}\n\
img {{ image-rendering: pixelated; height: 128px; }}\n\
.incorrect {{ color: #b00; }} .correct {{ color: #070; }} .mixed {{ color: #a60; }}\n\
</style>\n</head>\n<body>\n<h1>{t}</h1>\n<p>{n} samples. Panels: input | grad-cam | pv.</p>\n<table>\n\
<tr><th>sample</th><th>outcome</th><th>targets</th><th>predicted</th><th>explained class</th><th>panel</th></tr>\n",
        t = escape(title),
        n = rows.len()
    );
    for r in rows {
        html.push_str(&format!(
            "<tr><td>{id}</td><td class=\"{o}\">{o}</td><td>{tg}</td><td>{pr}</td><td>{c} ({p:.3})</td><td><img src=\"{src}\" alt=\"{id}\"></td></tr>\n",
            id = escape(&r.sample_id),
            o = r.outcome.as_str(),
            tg = escape(&r.targets.join(", ")),
            pr = escape(&r.prediction_set.join(", ")),
            c = escape(&r.class_name),
            p = r.top_posterior,
            src = escape(&r.panel),
        ));
    }
    html.push_str("</table>\n</body>\n</html>\n");
    html
}
