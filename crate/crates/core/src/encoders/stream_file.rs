//! JSON-lines stream files: one frame per line, or a single generator line
//! that expands into frames.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::scene::{synth_video, Event, SyntheticFrame};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub seed: u64,
    pub duration_s: f64,
    #[serde(default)]
    pub events: Vec<Event>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GeneratorLine {
    generator: GeneratorSpec,
}

pub fn write_stream(path: &Path, frames: &[SyntheticFrame]) -> Result<()> {
    let mut out = Vec::new();
    for f in frames {
        serde_json::to_writer(&mut out, f)?;
        out.push(b'\n');
    }
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

pub fn write_generator(path: &Path, spec: &GeneratorSpec) -> Result<()> {
    let line = serde_json::json!({ "generator": spec });
    fs::write(path, format!("{line}\n"))?;
    Ok(())
}

pub fn parse_stream(text: &str) -> Result<Vec<SyntheticFrame>> {
    let mut frames = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse { line: i + 1, msg };
        if line.contains("\"generator\"") {
            let g: GeneratorLine = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
            frames.extend(synth_video(g.generator.seed, g.generator.duration_s, &g.generator.events)?);
        } else {
            let f: SyntheticFrame = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
            frames.push(f);
        }
    }
    Ok(frames)
}

pub fn read_stream(path: &Path) -> Result<Vec<SyntheticFrame>> {
    parse_stream(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::scene::{EventKind, Quadrant};

    #[test]
    fn frames_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.jsonl");
        let ev = [Event::new(1.0, EventKind::ObjectEnters { quadrant: Quadrant::BottomLeft })];
        let frames = synth_video(5, 2.0, &ev).unwrap();
        write_stream(&p, &frames).unwrap();
        assert_eq!(read_stream(&p).unwrap(), frames);
        let g = dir.path().join("g.jsonl");
        write_generator(&g, &GeneratorSpec { seed: 5, duration_s: 2.0, events: ev.to_vec() }).unwrap();
        assert_eq!(read_stream(&g).unwrap(), frames);
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let e = parse_stream("\n{\"t\": 0.0}\n").unwrap_err();
        match e {
            Error::Parse { line, msg } => {
                assert_eq!(line, 2);
                assert!(msg.contains("field"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
    }
}
