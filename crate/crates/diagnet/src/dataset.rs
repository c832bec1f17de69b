//! Plain-text dataset files.
//!
//! ```text
//! DIAGNET-SYNTH v1 h_in=64 classes=3
//! 2
//! 0 4 20 40 56
//! 2 30 2 62 34
//! <h_in × h_in intensities, one image row per line>
//! ...
//! ```
//!
//! Intensities are written with 17 significant digits, which round-trips
//! every `f64` exactly.

use std::fmt::Write as _;
use std::path::Path;

use diagnet_core::geom::BBox;
use diagnet_core::synth::{Image, Scene};

use crate::error::{CliError, Result};

pub const MAGIC: &str = "DIAGNET-SYNTH";
pub const VERSION: &str = "v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub h_in: usize,
    pub classes: u32,
    pub scenes: Vec<Scene>,
}

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn to_text(ds: &Dataset) -> String {
    let mut out = format!(
        "{MAGIC} {VERSION} h_in={} classes={}\n",
        ds.h_in, ds.classes
    );
    for scene in &ds.scenes {
        let _ = writeln!(out, "{}", scene.boxes.len());
        for b in &scene.boxes {
            let _ = writeln!(
                out,
                "{} {} {} {} {}",
                b.class_id,
                num(b.x1),
                num(b.y1),
                num(b.x2),
                num(b.y2)
            );
        }
        for row in scene.image.pixels().chunks(ds.h_in) {
            let line: Vec<String> = row.iter().map(|&v| num(v)).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
    }
    out
}

fn header_field(token: Option<&str>, key: &str) -> std::result::Result<usize, String> {
    let token = token.ok_or_else(|| format!("header is missing {key}="))?;
    let value = token
        .strip_prefix(key)
        .and_then(|t| t.strip_prefix('='))
        .ok_or_else(|| format!("expected {key}=<n> in header, got {token:?}"))?;
    value
        .parse()
        .map_err(|_| format!("{key} is not a number: {value:?}"))
}

fn parse(text: &str) -> std::result::Result<Dataset, String> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or("empty file")?;
    let mut tokens = header.split_whitespace();
    if tokens.next() != Some(MAGIC) {
        return Err(format!("not a dataset file: header {header:?}"));
    }
    match tokens.next() {
        Some(VERSION) => {}
        other => return Err(format!("unsupported dataset version {other:?}")),
    }
    let h_in = header_field(tokens.next(), "h_in")?;
    let classes = header_field(tokens.next(), "classes")? as u32;
    if h_in == 0 {
        return Err("h_in must be positive".into());
    }

    let mut scenes = Vec::new();
    while let Some((no, count_line)) = lines.next() {
        let at = |msg: String| format!("line {}: {msg}", no + 1);
        let count: usize = count_line
            .trim()
            .parse()
            .map_err(|_| at(format!("expected a box count, got {count_line:?}")))?;
        let mut boxes = Vec::with_capacity(count);
        for _ in 0..count {
            let (no, line) = lines
                .next()
                .ok_or_else(|| at("file ends inside a box list".into()))?;
            let at = |msg: String| format!("line {}: {msg}", no + 1);
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 5 {
                return Err(at(format!("expected `class x1 y1 x2 y2`, got {line:?}")));
            }
            let class_id: u32 = f[0]
                .parse()
                .map_err(|_| at(format!("bad class {:?}", f[0])))?;
            if class_id >= classes {
                return Err(at(format!(
                    "class {class_id} out of range for {classes} classes"
                )));
            }
            let mut c = [0.0; 4];
            for (slot, tok) in c.iter_mut().zip(&f[1..]) {
                *slot = tok
                    .parse()
                    .map_err(|_| at(format!("bad coordinate {tok:?}")))?;
            }
            let b = BBox::new(c[0], c[1], c[2], c[3], class_id).map_err(|e| at(e.to_string()))?;
            boxes.push(b);
        }
        let mut pixels = Vec::with_capacity(h_in * h_in);
        for _ in 0..h_in {
            let (no, line) = lines
                .next()
                .ok_or_else(|| at("file ends inside an image".into()))?;
            let before = pixels.len();
            for tok in line.split_whitespace() {
                let v: f64 = tok
                    .parse()
                    .map_err(|_| format!("line {}: bad intensity {tok:?}", no + 1))?;
                pixels.push(v);
            }
            if pixels.len() - before != h_in {
                return Err(format!(
                    "line {}: image row has {} values, expected {h_in}",
                    no + 1,
                    pixels.len() - before
                ));
            }
        }
        let image = Image::new(h_in, pixels).map_err(|e| e.to_string())?;
        scenes.push(Scene { image, boxes });
    }
    Ok(Dataset {
        h_in,
        classes,
        scenes,
    })
}

pub fn from_text(text: &str, origin: &Path) -> Result<Dataset> {
    parse(text).map_err(|msg| CliError::format(origin, msg))
}

pub fn read(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    from_text(&text, path)
}

pub fn write(path: &Path, ds: &Dataset) -> Result<()> {
    std::fs::write(path, to_text(ds)).map_err(|e| CliError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use diagnet_core::synth::{gen_dataset, SynthSpec};

    fn sample(count: usize) -> Dataset {
        let spec = SynthSpec::default();
        Dataset {
            h_in: spec.h_in,
            classes: spec.classes,
            scenes: gen_dataset(3, count, &spec).unwrap(),
        }
    }

    #[test]
    fn text_round_trip_is_exact() {
        let ds = sample(4);
        let back = from_text(&to_text(&ds), Path::new("mem")).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn scene_without_boxes_round_trips() {
        let ds = Dataset {
            h_in: 4,
            classes: 1,
            scenes: vec![Scene {
                image: Image::filled(4, 0.25),
                boxes: vec![],
            }],
        };
        assert_eq!(from_text(&to_text(&ds), Path::new("mem")).unwrap(), ds);
    }

    #[test]
    fn malformed_files_are_rejected_with_context() {
        let good = to_text(&sample(1));
        let cases = [
            ("", "empty"),
            ("NOPE v1 h_in=4 classes=1\n", "not a dataset"),
            ("DIAGNET-SYNTH v9 h_in=4 classes=1\n", "version"),
            ("DIAGNET-SYNTH v1 h_in=x classes=1\n", "h_in"),
        ];
        for (text, needle) in cases {
            let err = from_text(text, Path::new("f")).unwrap_err().to_string();
            assert!(err.contains(needle), "{err}");
        }
        let truncated = &good[..good.len() / 2];
        let err = from_text(truncated, Path::new("f"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("line"), "{err}");
        let bad_class = good.replacen("\n0 ", "\n7 ", 1).replacen("\n1 ", "\n7 ", 1);
        let bad_class = bad_class.replacen("\n2 ", "\n7 ", 1);
        assert!(from_text(&bad_class, Path::new("f")).is_err());
    }
}
