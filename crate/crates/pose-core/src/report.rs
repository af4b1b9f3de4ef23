//! Metrics logging and report rendering helpers.

use crate::Result;
use std::io::Write;
use std::path::Path;

/// Append one JSON object as a line to a metrics log, creating parents as
/// needed.
pub fn append_jsonl(path: &Path, value: &serde_json::Value) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    writeln!(f, "{value}")?;
    Ok(())
}

/// Read back every record of a JSON-lines log.
pub fn read_jsonl(path: &Path) -> Result<Vec<serde_json::Value>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line)?);
    }
    Ok(out)
}

// ---- rendering ----

/// Hand-rolled SVG line chart: one polyline per series, fixed palette, no
/// timestamps — regeneration from identical inputs is byte-identical.
pub fn render_line_chart_svg(
    path: &Path,
    title: &str,
    series: &[(String, Vec<(f64, f64)>)],
) -> Result<()> {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const M: f64 = 48.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
    let all: Vec<(f64, f64)> = series.iter().flat_map(|(_, pts)| pts.iter().copied()).collect();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in &all {
        if x.is_finite() && y.is_finite() {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
    }
    if !x0.is_finite() || x1 <= x0 {
        x0 = 0.0;
        x1 = 1.0;
    }
    if !y0.is_finite() || y1 <= y0 {
        y0 = 0.0;
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| M + (x - x0) / (x1 - x0) * (W - 2.0 * M);
    let sy = |y: f64| H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M);
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\" text-anchor=\"middle\">{}</text>\n",
        W / 2.0,
        title
    ));
    // axes
    svg.push_str(&format!(
        "<line x1=\"{M}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        H - M,
        W - M,
        H - M
    ));
    svg.push_str(&format!(
        "<line x1=\"{M}\" y1=\"{M}\" x2=\"{M}\" y2=\"{}\" stroke=\"black\"/>\n",
        H - M
    ));
    for (t, v) in [(x0, sx(x0)), (x1, sx(x1))] {
        svg.push_str(&format!(
            "<text x=\"{v}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{t:.3}</text>\n",
            H - M + 16.0
        ));
    }
    for (t, v) in [(y0, sy(y0)), (y1, sy(y1))] {
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{v}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{t:.4}</text>\n",
            M - 6.0
        ));
    }
    for (i, (label, pts)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path_pts: Vec<String> = pts
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            path_pts.join(" ")
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" fill=\"{color}\">{label}</text>\n",
            W - M - 140.0,
            M + 16.0 * i as f64
        ));
    }
    svg.push_str("</svg>\n");
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, svg)?;
    Ok(())
}

fn to_luma(v: f64) -> u8 {
    (((v + 1.0) / 2.0).clamp(0.0, 1.0) * 255.0).round() as u8
}

/// PNG grid of clips: one row per clip, one column per frame, nearest-
/// neighbor upscaled. Input shape (b, f, c, h, w); channel 0 is rendered.
pub fn save_sample_grid_png(path: &Path, videos: &crate::tensor::Tensor, scale: usize) -> Result<()> {
    let s = videos.shape().to_vec();
    if s.len() != 5 {
        return Err(crate::PoseError::ShapeMismatch(format!(
            "expected (b, f, c, h, w), got {s:?}"
        )));
    }
    let (b, f, h, w) = (s[0], s[1], s[3], s[4]);
    let pad = 2usize;
    let out_w = (f * (w * scale + pad) + pad) as u32;
    let out_h = (b * (h * scale + pad) + pad) as u32;
    let mut img = image::GrayImage::from_pixel(out_w, out_h, image::Luma([32u8]));
    let v = videos.data();
    for bi in 0..b {
        for fi in 0..f {
            let ox = pad + fi * (w * scale + pad);
            let oy = pad + bi * (h * scale + pad);
            for yi in 0..h {
                for xi in 0..w {
                    let px = to_luma(v[[bi, fi, 0, yi, xi]]);
                    for dy in 0..scale {
                        for dx in 0..scale {
                            img.put_pixel(
                                (ox + xi * scale + dx) as u32,
                                (oy + yi * scale + dy) as u32,
                                image::Luma([px]),
                            );
                        }
                    }
                }
            }
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    img.save(path)
        .map_err(|e| crate::PoseError::InvalidArgument(format!("png encode: {e}")))?;
    Ok(())
}

/// Animated GIF of the first clip in a batch, nearest-neighbor upscaled.
pub fn save_clip_gif(path: &Path, videos: &crate::tensor::Tensor, scale: usize) -> Result<()> {
    use image::codecs::gif::{GifEncoder, Repeat};
    use image::{Frame, Delay, RgbaImage};
    let s = videos.shape().to_vec();
    if s.len() != 5 {
        return Err(crate::PoseError::ShapeMismatch(format!(
            "expected (b, f, c, h, w), got {s:?}"
        )));
    }
    let (f, h, w) = (s[1], s[3], s[4]);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let file = std::fs::File::create(path)?;
    let mut enc = GifEncoder::new(file);
    enc.set_repeat(Repeat::Infinite)
        .map_err(|e| crate::PoseError::InvalidArgument(format!("gif encode: {e}")))?;
    let v = videos.data();
    for fi in 0..f {
        let mut img = RgbaImage::new((w * scale) as u32, (h * scale) as u32);
        for yi in 0..h {
            for xi in 0..w {
                let px = to_luma(v[[0, fi, 0, yi, xi]]);
                for dy in 0..scale {
                    for dx in 0..scale {
                        img.put_pixel(
                            (xi * scale + dx) as u32,
                            (yi * scale + dy) as u32,
                            image::Rgba([px, px, px, 255]),
                        );
                    }
                }
            }
        }
        let frame = Frame::from_parts(img, 0, 0, Delay::from_numer_denom_ms(200, 1));
        enc.encode_frame(frame)
            .map_err(|e| crate::PoseError::InvalidArgument(format!("gif encode: {e}")))?;
    }
    Ok(())
}

/// Minimal CSV writer; quotes fields containing commas.
pub fn write_csv(path: &Path, headers: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let quote = |s: &str| {
        if s.contains(',') || s.contains('"') {
            format!("\"{}\"", s.replace('"', "\"\""))
        } else {
            s.to_string()
        }
    };
    let mut text = headers.iter().map(|h| quote(h)).collect::<Vec<_>>().join(",");
    text.push('\n');
    for row in rows {
        text.push_str(&row.iter().map(|c| quote(c)).collect::<Vec<_>>().join(","));
        text.push('\n');
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use ndarray::IxDyn;

    #[test]
    fn jsonl_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("logs/metrics.jsonl");
        append_jsonl(&path, &serde_json::json!({"step": 1, "loss": 0.5})).unwrap();
        append_jsonl(&path, &serde_json::json!({"step": 2, "loss": 0.25})).unwrap();
        let back = read_jsonl(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1]["step"], 2);
    }

    fn demo_videos() -> Tensor {
        let mut arr = ndarray::ArrayD::zeros(IxDyn(&[2, 3, 1, 4, 4]));
        for b in 0..2 {
            for f in 0..3 {
                for y in 0..4 {
                    for x in 0..4 {
                        arr[[b, f, 0, y, x]] =
                            ((b + f + y + x) as f64 / 10.0).sin();
                    }
                }
            }
        }
        Tensor::new(arr)
    }

    #[test]
    fn svg_chart_is_deterministic_and_wellformed() {
        let dir = tempfile::tempdir().unwrap();
        let series = vec![
            ("train".to_string(), vec![(0.0, 1.0), (1.0, 0.5), (2.0, 0.3)]),
            ("eval".to_string(), vec![(0.0, 0.9), (2.0, 0.4)]),
        ];
        let p1 = dir.path().join("a.svg");
        let p2 = dir.path().join("b.svg");
        render_line_chart_svg(&p1, "loss", &series).unwrap();
        render_line_chart_svg(&p2, "loss", &series).unwrap();
        let a = std::fs::read(&p1).unwrap();
        let b = std::fs::read(&p2).unwrap();
        assert_eq!(a, b, "regeneration must be byte-identical");
        let text = String::from_utf8(a).unwrap();
        assert!(text.starts_with("<svg"));
        assert!(text.contains("</svg>"));
        assert_eq!(text.matches("<polyline").count(), 2);
    }

    #[test]
    fn png_grid_and_gif_regenerate_byte_identically() {
        let dir = tempfile::tempdir().unwrap();
        let videos = demo_videos();
        let p1 = dir.path().join("grid1.png");
        let p2 = dir.path().join("grid2.png");
        save_sample_grid_png(&p1, &videos, 8).unwrap();
        save_sample_grid_png(&p2, &videos, 8).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        let g1 = dir.path().join("clip1.gif");
        let g2 = dir.path().join("clip2.gif");
        save_clip_gif(&g1, &videos, 8).unwrap();
        save_clip_gif(&g2, &videos, 8).unwrap();
        let gif = std::fs::read(&g1).unwrap();
        assert_eq!(gif, std::fs::read(&g2).unwrap());
        assert_eq!(&gif[..3], b"GIF");
    }

    #[test]
    fn renderers_reject_bad_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let flat = Tensor::new(ndarray::ArrayD::zeros(IxDyn(&[2, 3])));
        assert!(save_sample_grid_png(&dir.path().join("x.png"), &flat, 4).is_err());
        assert!(save_clip_gif(&dir.path().join("x.gif"), &flat, 4).is_err());
    }

    #[test]
    fn csv_quotes_and_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        write_csv(
            &path,
            &["method", "score"],
            &[
                vec!["pose, full".into(), "0.9".into()],
                vec!["lcm".into(), "0.5".into()],
            ],
        )
        .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "method,score\n\"pose, full\",0.9\nlcm,0.5\n"
        );
    }
}
