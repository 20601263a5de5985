use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::experiment::{ResultRow, Variant};

/// Seed-averaged mean AP per (variant, K).
pub fn seed_means(rows: &[ResultRow]) -> BTreeMap<(Variant, usize), f64> {
    let mut acc: BTreeMap<(Variant, usize), (f64, usize)> = BTreeMap::new();
    for r in rows {
        let e = acc.entry((r.variant, r.k)).or_default();
        e.0 += r.mean_ap;
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrendCheck {
    pub id: &'static str,
    pub description: String,
    pub pass: bool,
    pub detail: String,
}

fn check(
    out: &mut Vec<TrendCheck>,
    id: &'static str,
    description: String,
    lhs: Option<f64>,
    rhs: Option<f64>,
    slack: f64,
    at_most: bool,
) {
    let (pass, detail) = match (lhs, rhs) {
        (Some(a), Some(b)) => {
            let ok = if at_most { a <= b + slack } else { a >= b - slack };
            (ok, format!("{a:.4} vs {b:.4}"))
        }
        _ => (false, "missing rows".to_string()),
    };
    out.push(TrendCheck {
        id,
        description,
        pass,
        detail,
    });
}

/// The trend assertions on the K-shot grid and the 1-shot ablation.
pub fn trend_checks(rows: &[ResultRow]) -> Vec<TrendCheck> {
    let m = seed_means(rows);
    let get = |v: Variant, k: usize| m.get(&(v, k)).copied();
    let lb = {
        let v: Vec<f64> = m.iter().filter(|((v, _), _)| *v == Variant::Lb).map(|(_, &x)| x).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    let ks: Vec<usize> = m.keys().filter(|(v, _)| *v == Variant::Adapt).map(|&(_, k)| k).collect();
    let mut out = Vec::new();
    check(
        &mut out,
        "5a",
        "ADAPT at K=1 beats LB by at least 0.10".into(),
        get(Variant::Adapt, 1),
        lb.map(|x| x + 0.10),
        0.0,
        false,
    );
    for &k in &ks {
        check(
            &mut out,
            "5b",
            format!("ADAPT at K={k} does not exceed UB"),
            get(Variant::Adapt, k),
            get(Variant::Ub, k),
            0.0,
            true,
        );
    }
    check(
        &mut out,
        "5c",
        "ADAPT at K=5 is no worse than K=1 minus 0.03".into(),
        get(Variant::Adapt, 5),
        get(Variant::Adapt, 1),
        0.03,
        false,
    );
    for k in [1, 3, 5] {
        check(
            &mut out,
            "5d",
            format!("ADAPT at K={k} is within 0.02 of FT or better"),
            get(Variant::Adapt, k),
            get(Variant::Ft, k),
            0.02,
            false,
        );
    }
    for (v, slack) in [(Variant::NoCb, 0.02), (Variant::NoCd, 0.02), (Variant::NoBoth, 0.0)] {
        check(
            &mut out,
            "6",
            format!("1-shot ADAPT vs {v} (slack {slack})"),
            get(Variant::Adapt, 1),
            get(v, 1),
            slack,
            false,
        );
    }
    out
}

pub fn summary_markdown(rows: &[ResultRow], checks: &[TrendCheck]) -> String {
    let m = seed_means(rows);
    let mut ks: Vec<usize> = m.keys().map(|&(_, k)| k).collect();
    ks.sort_unstable();
    ks.dedup();
    let mut s = String::from("# Results\n\nMean AP@0.5 on the target test split, averaged over seeds.\n\n| variant |");
    for k in &ks {
        let _ = write!(s, " K={k} |");
    }
    s += "\n|---|";
    s += &"---:|".repeat(ks.len());
    s += "\n";
    for v in Variant::ALL {
        if !m.keys().any(|(vv, _)| *vv == v) {
            continue;
        }
        let _ = write!(s, "| {v} |");
        for &k in &ks {
            match m.get(&(v, k)) {
                Some(x) => {
                    let _ = write!(s, " {x:.3} |");
                }
                None => s += " |",
            }
        }
        s += "\n";
    }
    s += "\n## Trend checks\n\n";
    for c in checks {
        let _ = writeln!(
            s,
            "- [{}] {} {}: {}",
            if c.pass { "PASS" } else { "FAIL" },
            c.id,
            c.description,
            c.detail
        );
    }
    s
}

fn palette(i: usize) -> String {
    let hue = (i as f64 * 0.618_033_988_75).fract() * 360.0;
    format!("hsl({hue:.0},60%,50%)")
}

/// Grouped bar chart of seed-averaged AP against K, one bar per variant.
pub fn svg_chart(rows: &[ResultRow]) -> String {
    let m = seed_means(rows);
    let mut ks: Vec<usize> = m.keys().map(|&(_, k)| k).collect();
    ks.sort_unstable();
    ks.dedup();
    let variants: Vec<Variant> = Variant::ALL.into_iter().filter(|v| m.keys().any(|(vv, _)| vv == v)).collect();
    let (w, h) = (720.0, 360.0);
    let (left, right, top, bottom) = (50.0, 120.0, 20.0, 40.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let group = pw / ks.len().max(1) as f64;
    let bar = group * 0.8 / variants.len().max(1) as f64;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    let _ = writeln!(s, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
    for t in 0..=5 {
        let v = t as f64 / 5.0;
        let y = top + ph * (1.0 - v);
        let _ = writeln!(
            s,
            "<line x1=\"{left}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"#ddd\"/><text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{v:.1}</text>",
            left + pw,
            left - 6.0,
            y + 4.0
        );
    }
    for (gi, &k) in ks.iter().enumerate() {
        let gx = left + gi as f64 * group + group * 0.1;
        for (vi, &v) in variants.iter().enumerate() {
            if let Some(&ap) = m.get(&(v, k)) {
                let bh = ph * ap.clamp(0.0, 1.0);
                let _ = writeln!(
                    s,
                    "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{bh:.1}\" fill=\"{}\"><title>{v} K={k}: {ap:.3}</title></rect>",
                    gx + vi as f64 * bar,
                    top + ph - bh,
                    bar * 0.95,
                    palette(vi)
                );
            }
        }
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">K={k}</text>",
            left + gi as f64 * group + group / 2.0,
            h - bottom + 18.0
        );
    }
    let _ = writeln!(
        s,
        "<line x1=\"{left}\" y1=\"{top}\" x2=\"{left}\" y2=\"{:.1}\" stroke=\"black\"/><line x1=\"{left}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>",
        top + ph,
        top + ph,
        left + pw,
        top + ph
    );
    let _ = writeln!(
        s,
        "<text x=\"14\" y=\"{:.1}\" transform=\"rotate(-90 14 {:.1})\" text-anchor=\"middle\">mean AP@0.5</text>",
        top + ph / 2.0,
        top + ph / 2.0
    );
    for (vi, v) in variants.iter().enumerate() {
        let y = top + 10.0 + vi as f64 * 20.0;
        let x = w - right + 15.0;
        let _ = writeln!(
            s,
            "<rect x=\"{x}\" y=\"{:.1}\" width=\"12\" height=\"12\" fill=\"{}\"/><text x=\"{:.1}\" y=\"{y:.1}\">{v}</text>",
            y - 10.0,
            palette(vi),
            x + 18.0
        );
    }
    s += "</svg>\n";
    s
}
