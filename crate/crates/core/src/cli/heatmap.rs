//! SVG rendering of an importance matrix: one L×M panel per function.

use std::fmt::Write;

use crate::function::FunctionLabel;
use crate::probe::ImportanceMatrix;

const CELL: usize = 28;
const PAD: usize = 40;
const TITLE: usize = 22;
const LEGEND: usize = 34;
const LOW: [f64; 3] = [255.0, 255.0, 255.0];
const HIGH: [f64; 3] = [8.0, 48.0, 107.0];

/// Linear ramp from white at `lo` to dark blue at `hi`; a flat range maps to white.
pub fn ramp(v: f64, lo: f64, hi: f64) -> String {
    let t = if hi > lo { ((v - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.0 };
    let c: Vec<u8> = (0..3).map(|i| (LOW[i] + t * (HIGH[i] - LOW[i])).round() as u8).collect();
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

fn label(c: usize) -> String {
    FunctionLabel::from_index(c).map(|f| f.name().to_string()).unwrap_or_else(|| format!("class{c}"))
}

pub fn render_svg(imp: &ImportanceMatrix) -> String {
    let (l, m) = (imp.layers, imp.heads);
    let pw = PAD + m * CELL + PAD / 2;
    let ph = TITLE + l * CELL + LEGEND + PAD / 2;
    let cols = 2usize.min(imp.classes().max(1));
    let rows = imp.classes().div_ceil(cols);
    let (w, h) = (cols * pw, rows.max(1) * ph);
    let mut s = String::new();
    writeln!(
        s,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="monospace" font-size="10">"##
    )
    .unwrap();
    writeln!(s, r##"<defs><linearGradient id="ramp"><stop offset="0" stop-color="{}"/><stop offset="1" stop-color="{}"/></linearGradient></defs>"##, ramp(0.0, 0.0, 1.0), ramp(1.0, 0.0, 1.0)).unwrap();
    for c in 0..imp.classes() {
        let row = imp.row(c);
        let lo = row.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let x0 = (c % cols) * pw;
        let y0 = (c / cols) * ph;
        writeln!(s, r##"<g transform="translate({x0},{y0})">"##).unwrap();
        writeln!(s, r##"<text x="{PAD}" y="14" font-size="12">{}</text>"##, label(c)).unwrap();
        for layer in 0..l {
            let y = TITLE + layer * CELL;
            writeln!(s, r##"<text x="4" y="{}">L{layer}</text>"##, y + CELL / 2 + 3).unwrap();
            for head in 0..m {
                let v = imp.get(c, layer, head);
                writeln!(
                    s,
                    r##"<rect x="{}" y="{y}" width="{CELL}" height="{CELL}" fill="{}" stroke="#999" stroke-width="0.5"><title>L{layer}H{head} {v:.6e}</title></rect>"##,
                    PAD + head * CELL,
                    ramp(v, lo, hi)
                )
                .unwrap();
            }
        }
        let yh = TITLE + l * CELL + 12;
        for head in 0..m {
            writeln!(s, r##"<text x="{}" y="{yh}" text-anchor="middle">{head}</text>"##, PAD + head * CELL + CELL / 2).unwrap();
        }
        let yl = yh + 6;
        let bar = m * CELL / 2;
        writeln!(s, r##"<rect x="{PAD}" y="{yl}" width="{bar}" height="8" fill="url(#ramp)" stroke="#999" stroke-width="0.5"/>"##).unwrap();
        writeln!(
            s,
            r##"<text x="{}" y="{}">min {} max {}</text>"##,
            PAD + bar + 6,
            yl + 8,
            fmt_num(lo),
            fmt_num(hi)
        )
        .unwrap();
        s.push_str("</g>\n");
    }
    s.push_str("</svg>\n");
    s
}

fn fmt_num(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else {
        format!("{v:.3e}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_endpoints() {
        assert_eq!(ramp(0.0, 0.0, 1.0), "#ffffff");
        assert_eq!(ramp(1.0, 0.0, 1.0), "#08306b");
        assert_eq!(ramp(5.0, 5.0, 5.0), "#ffffff");
    }

    #[test]
    fn zero_matrix_is_uniform() {
        let imp = ImportanceMatrix::new(2, 3, vec![vec![0.0; 6]; 8]).unwrap();
        let svg = render_svg(&imp);
        let fills: std::collections::BTreeSet<&str> =
            svg.match_indices(r##"fill="#"##).map(|(i, _)| &svg[i + 6..i + 13]).filter(|f| f.starts_with('#')).collect();
        assert_eq!(fills.into_iter().collect::<Vec<_>>(), vec!["#ffffff"]);
        assert_eq!(svg.matches("min 0 max 0").count(), 8);
    }
}
