use cellshot::datamodel::{Image, InstanceMask};

const GOLDEN: f64 = 0.618_033_988_749_895;

/// Colour of instance `label` (1-based): hues step by the golden ratio.
pub fn instance_color(label: u32) -> [u8; 3] {
    let hue = (label as f64 * GOLDEN).fract();
    hsv_to_rgb(hue, 0.85, 1.0)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h6 = h * 6.0;
    let sector = h6.floor() as u32 % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    let (r, g, b) = match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r, g, b].map(|c| (c * 255.0).round() as u8)
}

/// Binary P6 of the grey image with instances blended at half opacity.
pub fn overlay_ppm(img: &Image, mask: &InstanceMask) -> Vec<u8> {
    let (h, w) = img.shape();
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for (i, &v) in img.data().iter().enumerate() {
        let grey = (v.clamp(0.0, 1.0) * 255.0).round();
        let l = mask.labels()[i];
        if l == 0 {
            out.extend([grey as u8; 3]);
        } else {
            let c = instance_color(l);
            out.extend(c.map(|ch| ((grey + ch as f32) / 2.0).round() as u8));
        }
    }
    out
}
