//! Shared fixtures for the integration suites: a small procedural face
//! corpus and config plumbing for disposable run directories.

use std::path::Path;

use image::{Rgb, RgbImage};

/// Splitmix-style scramble of (index, salt) to a value in [0, 1). Kept local
/// so the corpus never depends on the crate's RNG plumbing.
fn scramble(i: u64, salt: u64) -> f64 {
    let mut s = i
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(salt.wrapping_mul(0xbf58_476d_1ce4_e5b9))
        .wrapping_add(0x94d0_49bb_1331_11eb);
    s ^= s >> 30;
    s = s.wrapping_mul(0xff51_afd7_ed55_8ccd);
    s ^= s >> 33;
    (s % 100_000) as f64 / 100_000.0
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Renders one synthetic portrait: gradient backdrop, elliptical head with a
/// hairline cap, two eyes with pupils, and a mouth. Every parameter varies
/// with the image index so the corpus has real cross-image diversity.
fn render_face(i: u64, resolution: usize) -> RgbImage {
    let r = |salt: u64| scramble(i, salt);

    let bg_top = [0.15 + 0.5 * r(1), 0.2 + 0.5 * r(2), 0.35 + 0.5 * r(3)];
    let bg_bot = [0.05 + 0.3 * r(4), 0.1 + 0.3 * r(5), 0.15 + 0.3 * r(6)];
    let skin = [
        0.55 + 0.35 * r(7),
        0.40 + 0.30 * r(8),
        0.30 + 0.25 * r(9),
    ];
    let hair = [0.08 + 0.35 * r(10), 0.05 + 0.25 * r(11), 0.04 + 0.2 * r(12)];
    let mouth = [0.5 + 0.4 * r(13), 0.1 + 0.15 * r(14), 0.12 + 0.1 * r(15)];

    let cx = 0.08 * (r(16) - 0.5);
    let cy = 0.10 * (r(17) - 0.5);
    let rx = 0.52 + 0.12 * r(18);
    let ry = 0.66 + 0.12 * r(19);
    let hairline = cy - ry * (0.35 + 0.2 * r(20));
    let eye_dx = 0.18 + 0.08 * r(21);
    let eye_y = cy - 0.12 - 0.08 * r(22);
    let eye_r = 0.05 + 0.03 * r(23);
    let mouth_y = cy + 0.32 + 0.1 * r(24);
    let mouth_rx = 0.12 + 0.1 * r(25);
    let mouth_ry = 0.03 + 0.03 * r(26);

    let n = resolution as u32;
    RgbImage::from_fn(n, n, |px, py| {
        let u = 2.0 * (px as f64 + 0.5) / resolution as f64 - 1.0;
        let v = 2.0 * (py as f64 + 0.5) / resolution as f64 - 1.0;
        let t = (v + 1.0) / 2.0;
        let mut c = [
            lerp(bg_top[0], bg_bot[0], t),
            lerp(bg_top[1], bg_bot[1], t),
            lerp(bg_top[2], bg_bot[2], t),
        ];

        let fu = (u - cx) / rx;
        let fv = (v - cy) / ry;
        if fu * fu + fv * fv <= 1.0 {
            let shade = 1.0 - 0.15 * (v - cy).max(0.0);
            c = [skin[0] * shade, skin[1] * shade, skin[2] * shade];
            if v < hairline {
                c = hair;
            }
            for side in [-1.0, 1.0] {
                let eu = u - cx - side * eye_dx;
                let ev = (v - eye_y) * 1.6;
                let d2 = eu * eu + ev * ev;
                if d2 <= eye_r * eye_r {
                    c = [0.92, 0.92, 0.9];
                    if d2 <= (eye_r * 0.45) * (eye_r * 0.45) {
                        c = [0.05 + 0.2 * r(27), 0.05 + 0.2 * r(28), 0.1 + 0.3 * r(29)];
                    }
                }
            }
            let mu = (u - cx) / mouth_rx;
            let mv = (v - mouth_y) / mouth_ry;
            if mu * mu + mv * mv <= 1.0 {
                c = mouth;
            }
        }
        Rgb([to_byte(c[0]), to_byte(c[1]), to_byte(c[2])])
    })
}

/// Writes `count` portraits into `dir` as zero-padded PNGs.
pub fn write_face_corpus(dir: &Path, count: usize, resolution: usize) {
    std::fs::create_dir_all(dir).unwrap();
    for i in 0..count {
        let img = render_face(i as u64, resolution);
        img.save(dir.join(format!("face_{i:03}.png"))).unwrap();
    }
}

/// The checked-in smoke config with its data_dir pointed at `data_dir`.
pub fn smoke_config_text(data_dir: &Path) -> String {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.cfg");
    let base = std::fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("read {}: {e}", path.display()));
    let mut out = String::new();
    for line in base.lines() {
        if line.trim_start().starts_with("data_dir") {
            out.push_str(&format!("data_dir = {}\n", data_dir.display()));
        } else {
            out.push_str(line);
            out.push('\n');
        }
    }
    out
}
