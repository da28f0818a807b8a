//! Dataset file formats: JSON Lines captions, the "PSQF" binary feature
//! format (with a JSON Lines fallback for fixtures), and joined loading.

use super::vocab::Vocabulary;
use super::{encode_records, CaptionRecord, FeatureGrid, RawCaptions};
use crate::error::{Error, Result};
use serde::Deserialize;
use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

const FEATURE_MAGIC: &[u8; 4] = b"PSQF";
const FEATURE_VERSION: u32 = 1;

pub fn save_raw_captions(path: &Path, captions: &[RawCaptions]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for c in captions {
        serde_json::to_writer(&mut w, c)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_raw_captions(path: &Path) -> Result<Vec<RawCaptions>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RawCaptions = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if rec.refs.is_empty() {
            return Err(Error::Malformed {
                line: i + 1,
                msg: format!("item `{}` has no references", rec.id),
            });
        }
        out.push(rec);
    }
    if out.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(out)
}

pub fn save_features(path: &Path, grids: &[FeatureGrid]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let (locations, dim) = grids
        .first()
        .map(|g| (g.locations, g.dim))
        .unwrap_or((0, 0));
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&FEATURE_VERSION.to_le_bytes())?;
    w.write_all(&(grids.len() as u32).to_le_bytes())?;
    w.write_all(&(locations as u32).to_le_bytes())?;
    w.write_all(&(dim as u32).to_le_bytes())?;
    for g in grids {
        if g.locations != locations || g.dim != dim {
            return Err(Error::DimensionMismatch {
                id: g.item_id.clone(),
                expected: locations * dim,
                got: g.locations * g.dim,
            });
        }
        let id = g.item_id.as_bytes();
        w.write_all(&(id.len() as u16).to_le_bytes())?;
        w.write_all(id)?;
        for v in g.data() {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

/// Accepts either the binary format (detected by magic) or the JSON Lines
/// fallback `{"id": ..., "grid": [[...], ...]}`.
pub fn load_features(path: &Path) -> Result<Vec<FeatureGrid>> {
    let mut f = File::open(path)?;
    let mut magic = [0u8; 4];
    let n = f.read(&mut magic)?;
    if n == 4 && &magic == FEATURE_MAGIC {
        load_features_binary(f)
    } else {
        drop(f);
        load_features_jsonl(path)
    }
}

fn load_features_binary(f: File) -> Result<Vec<FeatureGrid>> {
    let mut r = BufReader::new(f);
    let version = read_u32(&mut r)?;
    if version != FEATURE_VERSION {
        return Err(Error::Malformed {
            line: 0,
            msg: format!("unsupported feature file version {version}"),
        });
    }
    let count = read_u32(&mut r)? as usize;
    let locations = read_u32(&mut r)? as usize;
    let dim = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut len = [0u8; 2];
        r.read_exact(&mut len)?;
        let mut id = vec![0u8; u16::from_le_bytes(len) as usize];
        r.read_exact(&mut id)?;
        let id = String::from_utf8(id).map_err(|_| Error::Malformed {
            line: 0,
            msg: "non-utf8 item id".into(),
        })?;
        let mut data = Vec::with_capacity(locations * dim);
        let mut buf = [0u8; 4];
        for _ in 0..locations * dim {
            r.read_exact(&mut buf)?;
            data.push(f32::from_le_bytes(buf) as f64);
        }
        out.push(FeatureGrid::new(id, locations, dim, data)?);
    }
    Ok(out)
}

#[derive(Deserialize)]
struct JsonGrid {
    id: String,
    grid: Vec<Vec<f64>>,
}

fn load_features_jsonl(path: &Path) -> Result<Vec<FeatureGrid>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    let mut dim: Option<usize> = None;
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonGrid = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            line: i + 1,
            msg: e.to_string(),
        })?;
        let d = rec.grid.first().map(|v| v.len()).unwrap_or(0);
        for row in &rec.grid {
            if row.len() != *dim.get_or_insert(d) {
                return Err(Error::DimensionMismatch {
                    id: rec.id.clone(),
                    expected: dim.unwrap(),
                    got: row.len(),
                });
            }
        }
        let locations = rec.grid.len();
        let data: Vec<f64> = rec.grid.into_iter().flatten().collect();
        out.push(FeatureGrid::new(rec.id, locations, d, data)?);
    }
    Ok(out)
}

/// Load captions and features and join them by item id, encoding references
/// against `vocab`.
pub fn load_dataset(
    captions_path: &Path,
    features_path: &Path,
    vocab: &Vocabulary,
) -> Result<(Vec<CaptionRecord>, Vec<FeatureGrid>)> {
    let raw = load_raw_captions(captions_path)?;
    let grids = load_features(features_path)?;
    let have: HashSet<&str> = grids.iter().map(|g| g.item_id.as_str()).collect();
    for r in &raw {
        if !have.contains(r.id.as_str()) {
            return Err(Error::MissingFeature(r.id.clone()));
        }
    }
    let records = encode_records(&raw, vocab)?;
    Ok((records, grids))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{tokenize, Split};

    fn fixture() -> (Vec<RawCaptions>, Vec<FeatureGrid>) {
        let caps = vec![
            RawCaptions {
                id: "a".into(),
                split: Split::Train,
                refs: vec!["a red cat on a mat".into(), "the red cat".into()],
            },
            RawCaptions {
                id: "b".into(),
                split: Split::Val,
                refs: vec!["a blue dog".into()],
            },
            RawCaptions {
                id: "c".into(),
                split: Split::Test,
                refs: vec!["a red dog on a rug".into()],
            },
        ];
        let grids = vec![
            FeatureGrid::new("a".into(), 1, 3, vec![1.0, 0.5, -0.25]).unwrap(),
            FeatureGrid::new("b".into(), 1, 3, vec![0.0, 2.0, 0.125]).unwrap(),
            FeatureGrid::new("c".into(), 1, 3, vec![-1.0, 0.0, 3.5]).unwrap(),
        ];
        (caps, grids)
    }

    #[test]
    fn round_trip_three_records() {
        let (caps, grids) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let cap_path = dir.path().join("caps.jsonl");
        let feat_path = dir.path().join("feats.psqf");
        save_raw_captions(&cap_path, &caps).unwrap();
        save_features(&feat_path, &grids).unwrap();
        let caps2 = load_raw_captions(&cap_path).unwrap();
        let grids2 = load_features(&feat_path).unwrap();
        assert_eq!(caps2.len(), 3);
        assert_eq!(caps2[0].refs, caps[0].refs);
        assert_eq!(grids2[2].data(), grids[2].data());

        let corpus: Vec<Vec<String>> = caps
            .iter()
            .flat_map(|c| c.refs.iter().map(|r| tokenize(r)))
            .collect();
        let vocab = Vocabulary::build(&corpus, 1).unwrap();
        let (records, _) = load_dataset(&cap_path, &feat_path, &vocab).unwrap();
        assert_eq!(records.len(), 3);
    }

    #[test]
    fn missing_feature_names_the_item() {
        let (caps, mut grids) = fixture();
        grids.pop();
        let dir = tempfile::tempdir().unwrap();
        let cap_path = dir.path().join("caps.jsonl");
        let feat_path = dir.path().join("feats.psqf");
        save_raw_captions(&cap_path, &caps).unwrap();
        save_features(&feat_path, &grids).unwrap();
        let vocab = Vocabulary::build(&[tokenize("a cat")], 1).unwrap();
        match load_dataset(&cap_path, &feat_path, &vocab) {
            Err(Error::MissingFeature(id)) => assert_eq!(id, "c"),
            other => panic!("expected MissingFeature, got {other:?}"),
        }
    }

    #[test]
    fn jsonl_fallback_rejects_ragged_grid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("feats.jsonl");
        std::fs::write(
            &path,
            "{\"id\":\"a\",\"grid\":[[1.0,2.0],[3.0]]}\n",
        )
        .unwrap();
        match load_features(&path) {
            Err(Error::DimensionMismatch { id, .. }) => assert_eq!(id, "a"),
            other => panic!("expected DimensionMismatch, got {other:?}"),
        }
    }

    #[test]
    fn jsonl_fallback_loads_grids() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("feats.jsonl");
        std::fs::write(
            &path,
            "{\"id\":\"a\",\"grid\":[[1.0,2.0],[3.0,4.0]]}\n",
        )
        .unwrap();
        let grids = load_features(&path).unwrap();
        assert_eq!(grids[0].locations, 2);
        assert_eq!(grids[0].location(1), &[3.0, 4.0]);
    }

    #[test]
    fn empty_captions_file_is_empty_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("caps.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(matches!(load_raw_captions(&path), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("caps.jsonl");
        std::fs::write(
            &path,
            "{\"id\":\"a\",\"split\":\"train\",\"refs\":[\"x\"]}\nnot json\n",
        )
        .unwrap();
        match load_raw_captions(&path) {
            Err(Error::Malformed { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected Malformed, got {other:?}"),
        }
    }
}
