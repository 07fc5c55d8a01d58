use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embeddings::tokenize;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Frames either inline or as a path (relative to the dataset file) to a
/// JSON array of rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Frames {
    Inline(Vec<Vec<f64>>),
    Path(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    pub video_id: String,
    pub frames: Frames,
    pub caption: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emotion_words: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub triplet: Option<Vec<String>>,
}

impl SampleRecord {
    /// Inline frames as a tensor. Call after [`load_dataset`] has resolved paths.
    pub fn frame_tensor(&self) -> Result<Tensor> {
        match &self.frames {
            Frames::Inline(rows) => Tensor::from_rows(rows),
            Frames::Path(p) => Err(Error::data(format!("sample {} frames at {p} were not resolved", self.id))),
        }
    }

    pub fn tokens(&self) -> Vec<String> {
        tokenize(&self.caption)
    }
}

fn check_frames(rows: &[Vec<f64>], d: Option<usize>, line: usize) -> Result<()> {
    let width = rows
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::data(format!("line {line}: no frames")))?;
    if let Some(r) = rows.iter().position(|r| r.len() != width) {
        return Err(Error::data(format!(
            "line {line}: frame {r} has width {}, frame 0 has width {width}",
            rows[r].len()
        )));
    }
    if let Some(d) = d {
        if width != d {
            return Err(Error::data(format!("line {line}: frames have width {width}, expected d = {d}")));
        }
    }
    if rows.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::data(format!("line {line}: non-finite frame value")));
    }
    Ok(())
}

/// Parses JSONL sample records, resolving frame paths against `base`.
pub fn parse_dataset(reader: impl BufRead, base: &Path, d: Option<usize>) -> Result<Vec<SampleRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut rec: SampleRecord =
            serde_json::from_str(&line).map_err(|e| Error::data(format!("line {line_no}: {e}")))?;
        if rec.caption.trim().is_empty() || rec.tokens().is_empty() {
            return Err(Error::data(format!("line {line_no}: empty caption")));
        }
        if let Frames::Path(p) = &rec.frames {
            let path = base.join(p);
            let text = std::fs::read_to_string(&path)
                .map_err(|e| Error::data(format!("line {line_no}: frames file {}: {e}", path.display())))?;
            let rows: Vec<Vec<f64>> = serde_json::from_str(&text)
                .map_err(|e| Error::data(format!("line {line_no}: frames file {}: {e}", path.display())))?;
            rec.frames = Frames::Inline(rows);
        }
        if let Frames::Inline(rows) = &rec.frames {
            check_frames(rows, d, line_no)?;
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn load_dataset(path: &Path, d: Option<usize>) -> Result<Vec<SampleRecord>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::data(format!("cannot open dataset {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_dataset(std::io::BufReader::new(file), base, d)
}

/// One compact JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_line_file() {
        let text = r#"{"id":"a","video_id":"v1","frames":[[1,2],[3,4]],"caption":"a dog runs"}
{"id":"b","video_id":"v2","frames":[[0,1]],"caption":"a cat sleeps","emotion_words":[]}
"#;
        let recs = parse_dataset(text.as_bytes(), Path::new("."), Some(2)).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].frame_tensor().unwrap().shape(), &[2, 2]);
    }

    #[test]
    fn errors_name_the_line_and_widths() {
        let missing = "{\"id\":\"a\",\"video_id\":\"v\",\"frames\":[[1]],\"caption\":\"x y\"}\n{\"id\":\"b\",\"video_id\":\"v\",\"frames\":[[1]]}\n";
        let e = parse_dataset(missing.as_bytes(), Path::new("."), None).unwrap_err();
        assert!(matches!(&e, Error::Data(m) if m.contains("line 2") && m.contains("caption")), "{e}");
        assert_eq!(e.exit_code(), 2);

        let wide = r#"{"id":"a","video_id":"v","frames":[[1,2,3]],"caption":"x y"}"#;
        let e = parse_dataset(wide.as_bytes(), Path::new("."), Some(2)).unwrap_err();
        assert!(matches!(&e, Error::Data(m) if m.contains("width 3") && m.contains("d = 2")), "{e}");

        let ragged = r#"{"id":"a","video_id":"v","frames":[[1,2],[3]],"caption":"x y"}"#;
        assert!(parse_dataset(ragged.as_bytes(), Path::new("."), None).is_err());
    }

    #[test]
    fn frame_paths_are_resolved() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("f.json"), "[[0.5, 1.5]]").unwrap();
        let ds = dir.path().join("d.jsonl");
        std::fs::write(&ds, r#"{"id":"a","video_id":"v","frames":"f.json","caption":"a dog"}"#).unwrap();
        let recs = load_dataset(&ds, Some(2)).unwrap();
        assert_eq!(recs[0].frames, Frames::Inline(vec![vec![0.5, 1.5]]));
    }
}
