//! Binary PPM renderings of displacement fields.
//!
//! Flow uses the usual hue wheel: direction picks the hue, magnitude
//! (relative to the largest valid vector) the saturation. Disparity is
//! grayscale scaled to its maximum. Invalid pixels are black.

use eventmatch::{DisplacementField, Task};

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r, g, b].map(|u| ((u + m) * 255.0).round().clamp(0.0, 255.0) as u8)
}

pub fn field_ppm(f: &DisplacementField) -> Vec<u8> {
    let (h, w) = (f.height(), f.width());
    let mut max = 0.0f64;
    for y in 0..h {
        for x in 0..w {
            if f.is_valid(x, y) {
                let [u, v] = f.get(x, y);
                max = max.max(f64::from(u).hypot(f64::from(v)));
            }
        }
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            let px = if !f.is_valid(x, y) {
                [0, 0, 0]
            } else {
                let [u, v] = f.get(x, y);
                let (u, v) = (f64::from(u), f64::from(v));
                match f.task() {
                    Task::Flow => {
                        let s = if max > 0.0 { u.hypot(v) / max } else { 0.0 };
                        hsv_to_rgb(v.atan2(u).to_degrees(), s, 1.0)
                    }
                    Task::Disparity => {
                        let g = if max > 0.0 { (u.max(0.0) / max * 255.0).round() as u8 } else { 0 };
                        [g, g, g]
                    }
                }
            };
            out.extend_from_slice(&px);
        }
    }
    out
}
