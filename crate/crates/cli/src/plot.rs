//! Top-view scatter of fruit positions as SVG.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use orchard_core::io::{row_color, PointRecord};

const MARGIN: f64 = 40.0;
const LEGEND_WIDTH: f64 = 110.0;

fn hex(rgb: [u8; 3]) -> String {
    format!("#{:02x}{:02x}{:02x}", rgb[0], rgb[1], rgb[2])
}

/// Ground-plane (x, y) scatter with equal axis scales, y pointing up,
/// one color per row label and black for unassigned points.
pub fn scatter_svg(records: &[PointRecord], width: f64, height: f64) -> String {
    let plot_w = (width - 2.0 * MARGIN - LEGEND_WIDTH).max(1.0);
    let plot_h = (height - 2.0 * MARGIN).max(1.0);

    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for r in records {
        x0 = x0.min(r.position.x);
        x1 = x1.max(r.position.x);
        y0 = y0.min(r.position.y);
        y1 = y1.max(r.position.y);
    }
    if records.is_empty() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    let span = (x1 - x0).max(y1 - y0).max(1e-9);
    let scale = (plot_w / span).min(plot_h / span) * 0.95;
    let cx = MARGIN + plot_w / 2.0;
    let cy = MARGIN + plot_h / 2.0;
    let (mx, my) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r##"<rect x="{MARGIN}" y="{MARGIN}" width="{plot_w:.2}" height="{plot_h:.2}" fill="none" stroke="#999"/>"##
    );
    for r in records {
        let px = cx + (r.position.x - mx) * scale;
        let py = cy - (r.position.y - my) * scale;
        let _ = writeln!(
            out,
            r#"<circle cx="{px:.2}" cy="{py:.2}" r="3" fill="{}"/>"#,
            hex(row_color(r.row_label))
        );
    }

    let labels: BTreeSet<Option<usize>> = records.iter().map(|r| r.row_label).collect();
    let lx = width - LEGEND_WIDTH - MARGIN / 2.0;
    for (i, label) in labels.iter().enumerate() {
        let ly = MARGIN + 10.0 + 18.0 * i as f64;
        let name = label.map_or("unassigned".to_owned(), |l| format!("row {l}"));
        let _ = writeln!(
            out,
            r#"<circle cx="{:.2}" cy="{ly:.2}" r="4" fill="{}"/><text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="12">{name}</text>"#,
            lx + 6.0,
            hex(row_color(*label)),
            lx + 16.0,
            ly + 4.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="12" text-anchor="middle">x (m), {:.2} m across</text>"#,
        cx,
        height - MARGIN / 3.0,
        x1 - x0
    );
    out.push_str("</svg>\n");
    out
}
