use qrw_core::feedback::EvalReport;

/// Top-level keys of the machine-readable report.
pub const REPORT_FIELDS: [&str; 2] = ["rows", "queries"];
/// Keys of each segment row.
pub const ROW_FIELDS: [&str; 7] = [
    "segment",
    "count",
    "rele",
    "incr",
    "incr_count",
    "hitrate",
    "hitrate_count",
];

fn cell(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.4}")).unwrap_or_default()
}

/// Fixed-width text table, one row per segment plus the overall row.
pub fn render_report(report: &EvalReport) -> String {
    let mut out = format!(
        "{:<8} {:>6} {:>8} {:>8} {:>6} {:>8} {:>6}\n",
        "segment", "count", "rele", "incr", "n_incr", "hitrate", "n_hit"
    );
    for r in &report.rows {
        out.push_str(&format!(
            "{:<8} {:>6} {:>8} {:>8} {:>6} {:>8} {:>6}\n",
            r.segment,
            r.count,
            cell(r.rele),
            cell(r.incr),
            r.incr_count,
            cell(r.hitrate),
            r.hitrate_count
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use qrw_core::feedback::SegmentRow;

    #[test]
    fn empty_segment_has_blank_metrics() {
        let row = |s: &str, n: usize, v: Option<f64>| SegmentRow {
            segment: s.into(),
            count: n,
            rele: v,
            incr: None,
            incr_count: 0,
            hitrate: v,
            hitrate_count: n,
        };
        let rep = EvalReport {
            rows: vec![
                row("Top", 2, Some(0.5)),
                row("Torso", 0, None),
                row("Tail", 0, None),
                row("All", 2, Some(0.5)),
            ],
            queries: vec![],
        };
        let text = render_report(&rep);
        let tail = text.lines().find(|l| l.starts_with("Tail")).unwrap();
        assert_eq!(
            tail.split_whitespace().collect::<Vec<_>>(),
            ["Tail", "0", "0", "0"]
        );

        let json = serde_json::to_value(&rep).unwrap();
        let obj = json.as_object().unwrap();
        let mut top: Vec<&str> = obj.keys().map(|s| s.as_str()).collect();
        top.sort();
        let mut want_top = REPORT_FIELDS.to_vec();
        want_top.sort();
        assert_eq!(top, want_top);
        for r in json["rows"].as_array().unwrap() {
            let keys: Vec<&String> = r.as_object().unwrap().keys().collect();
            let mut want: Vec<&str> = ROW_FIELDS.to_vec();
            want.sort();
            let mut got: Vec<&str> = keys.iter().map(|s| s.as_str()).collect();
            got.sort();
            assert_eq!(got, want);
        }
    }
}
