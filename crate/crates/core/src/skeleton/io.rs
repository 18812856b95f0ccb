//! JSON-lines dataset files.
//!
//! ```text
//! {"format":"cmd-skel","version":1,"joints":J,"actors":2}
//! {"label":int|null,"subject":int|null,"frames":[[[x,y,z] x J] x 2] x T}
//! ...
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{SkeletonSequence, ACTORS};
use crate::error::{Error, Result};

pub const DATASET_FORMAT: &str = "cmd-skel";
const DATASET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    joints: usize,
    actors: usize,
}

#[derive(Serialize, Deserialize)]
struct Record {
    label: Option<usize>,
    subject: Option<i64>,
    frames: Vec<Vec<Vec<[f64; 3]>>>,
}

impl Record {
    fn from_sequence(seq: &SkeletonSequence) -> Self {
        let frames = (0..seq.frames())
            .map(|t| {
                (0..ACTORS)
                    .map(|a| (0..seq.joints()).map(|j| seq.joint(t, a, j)).collect())
                    .collect()
            })
            .collect();
        Record {
            label: seq.label,
            subject: seq.subject,
            frames,
        }
    }

    fn into_sequence(self, joints: usize, line: usize) -> Result<SkeletonSequence> {
        let schema = |msg: String| Error::Schema(format!("line {line}: {msg}"));
        let t = self.frames.len();
        let mut data = Vec::with_capacity(t * ACTORS * joints * 3);
        for (fi, frame) in self.frames.into_iter().enumerate() {
            if frame.len() != ACTORS {
                return Err(schema(format!(
                    "frame {fi} has {} actors, expected {ACTORS}",
                    frame.len()
                )));
            }
            for actor in frame {
                if actor.len() != joints {
                    return Err(schema(format!(
                        "frame {fi} has {} joints, expected {joints}",
                        actor.len()
                    )));
                }
                data.extend(actor.into_iter().flatten());
            }
        }
        let seq = SkeletonSequence::new(t, joints, data).map_err(|e| schema(e.to_string()))?;
        Ok(seq.with_label(self.label).with_subject(self.subject))
    }
}

/// Reads a dataset file. An empty file is an empty dataset.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<SkeletonSequence>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut joints: Option<usize> = None;
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match joints {
            None => {
                let header: Header = serde_json::from_str(&line).map_err(|e| Error::Parse {
                    line: line_no,
                    msg: format!("bad header: {e}"),
                })?;
                if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
                    return Err(Error::Schema(format!(
                        "unsupported dataset format {} v{}",
                        header.format, header.version
                    )));
                }
                if header.actors != ACTORS {
                    return Err(Error::Schema(format!(
                        "dataset declares {} actors, expected {ACTORS}",
                        header.actors
                    )));
                }
                joints = Some(header.joints);
            }
            Some(j) => {
                let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
                    line: line_no,
                    msg: e.to_string(),
                })?;
                out.push(rec.into_sequence(j, line_no)?);
            }
        }
    }
    Ok(out)
}

/// Writes a dataset file; all sequences must share one joint count.
pub fn save_dataset(path: impl AsRef<Path>, seqs: &[SkeletonSequence]) -> Result<()> {
    let path = path.as_ref();
    let joints = seqs.first().map_or(0, |s| s.joints());
    if let Some(s) = seqs.iter().find(|s| s.joints() != joints) {
        return Err(Error::Schema(format!(
            "mixed joint counts in dataset: {joints} and {}",
            s.joints()
        )));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = Header {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        joints,
        actors: ACTORS,
    };
    let write_err = |e: std::io::Error| Error::io(path, e);
    serde_json::to_writer(&mut w, &header).map_err(|e| write_err(e.into()))?;
    w.write_all(b"\n").map_err(write_err)?;
    for seq in seqs {
        serde_json::to_writer(&mut w, &Record::from_sequence(seq)).map_err(|e| write_err(e.into()))?;
        w.write_all(b"\n").map_err(write_err)?;
    }
    w.flush().map_err(write_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_file_is_empty_dataset() {
        let f = tempfile::NamedTempFile::new().unwrap();
        assert!(load_dataset(f.path()).unwrap().is_empty());
    }

    #[test]
    fn single_record_shape() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        let seq = SkeletonSequence::zeros(10, 25).with_label(Some(3));
        save_dataset(&p, &[seq]).unwrap();
        let back = load_dataset(&p).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!((back[0].frames(), back[0].joints()), (10, 25));
        assert_eq!(back[0].data().len(), 10 * 2 * 25 * 3);
        assert_eq!(back[0].label, Some(3));
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let seqs: Vec<_> = (0..5)
            .map(|i| {
                let data = (0..7 * 2 * 4 * 3).map(|_| rng.random_range(-3.0..3.0)).collect();
                SkeletonSequence::new(7, 4, data)
                    .unwrap()
                    .with_label(if i % 2 == 0 { Some(i) } else { None })
                    .with_subject(Some(i as i64 - 2))
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        save_dataset(&p, &seqs).unwrap();
        let back = load_dataset(&p).unwrap();
        assert_eq!(back.len(), seqs.len());
        for (a, b) in back.iter().zip(&seqs) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.subject, b.subject);
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        std::fs::write(
            &p,
            "{\"format\":\"cmd-skel\",\"version\":1,\"joints\":1,\"actors\":2}\n\
             {\"label\":0,\"subject\":null,\"frames\":[[[[0,0,0]],[[0,0,0]]]]}\n\
             {\"label\":0,\"frames\":oops}\n",
        )
        .unwrap();
        match load_dataset(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn inconsistent_joint_count_is_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        std::fs::write(
            &p,
            "{\"format\":\"cmd-skel\",\"version\":1,\"joints\":2,\"actors\":2}\n\
             {\"label\":0,\"subject\":null,\"frames\":[[[[0,0,0],[1,1,1]],[[0,0,0],[0,0,0]]]]}\n\
             {\"label\":0,\"subject\":null,\"frames\":[[[[0,0,0]],[[0,0,0]]]]}\n",
        )
        .unwrap();
        assert!(matches!(load_dataset(&p), Err(Error::Schema(_))));
        assert!(matches!(
            load_dataset(dir.path().join("missing.jsonl")),
            Err(Error::Io { .. })
        ));
    }
}
