use std::fmt::Write as _;

use super::ablation::CurvePoint;

const W: f64 = 480.0;
const H: f64 = 320.0;
const PAD: f64 = 48.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#7f7f7f"];

/// Mean accuracy against label fraction, one line per variant, +-1 std bars.
pub fn curve_svg(points: &[CurvePoint]) -> String {
    let mut variants = Vec::new();
    for p in points {
        if !variants.contains(&p.variant) {
            variants.push(p.variant);
        }
    }
    let xmax = points.iter().map(|p| p.fraction).fold(1.0f64, f64::max);
    let sx = |f: f64| PAD + f / xmax * (W - 2.0 * PAD);
    let sy = |a: f64| H - PAD - a.clamp(0.0, 1.0) * (H - 2.0 * PAD);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        s,
        r#"<line x1="{PAD}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/><line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{0}" stroke="black"/>"#,
        H - PAD,
        W - PAD
    );
    for t in 0..=4 {
        let a = t as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{a:.2}</text>"#,
            PAD - 4.0,
            sy(a) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">label fraction</text>"#,
        W / 2.0,
        H - 10.0
    );
    for (i, v) in variants.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let mut pts: Vec<&CurvePoint> = points.iter().filter(|p| p.variant == *v).collect();
        pts.sort_by(|a, b| a.fraction.total_cmp(&b.fraction));
        let path: Vec<String> = pts.iter().map(|p| format!("{:.1},{:.1}", sx(p.fraction), sy(p.mean_acc))).collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            path.join(" ")
        );
        for p in &pts {
            let (x, lo, hi) = (sx(p.fraction), sy(p.mean_acc - p.std_acc), sy(p.mean_acc + p.std_acc));
            let _ = writeln!(
                s,
                r#"<line x1="{x:.1}" y1="{lo:.1}" x2="{x:.1}" y2="{hi:.1}" stroke="{color}"/><text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                x,
                H - PAD + 14.0,
                p.fraction
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" fill="{color}">{}</text>"#,
            W - PAD - 90.0,
            PAD + 14.0 * i as f64,
            v.name()
        );
    }
    s.push_str("</svg>\n");
    s
}
