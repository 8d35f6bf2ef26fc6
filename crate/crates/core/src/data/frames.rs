use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

use super::LandmarkDictionary;

/// Token written for a missing coordinate triple.
pub const MISSING: &str = "NA";

/// One motion-capture frame: `l` landmarks, each either observed or missing.
/// Missing landmarks carry zero coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub sequence: String,
    pub index: usize,
    pub points: Vec<[f64; 3]>,
    pub valid: Vec<bool>,
}

impl Frame {
    pub fn new(sequence: impl Into<String>, index: usize, points: Vec<[f64; 3]>, valid: Vec<bool>) -> Result<Self> {
        if points.len() != valid.len() {
            return Err(Error::Data(format!(
                "frame has {} landmarks but {} validity flags",
                points.len(),
                valid.len()
            )));
        }
        let mut f = Frame {
            sequence: sequence.into(),
            index,
            points,
            valid,
        };
        f.zero_missing();
        Ok(f)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    fn zero_missing(&mut self) {
        for (p, &v) in self.points.iter_mut().zip(&self.valid) {
            if !v {
                *p = [0.0; 3];
            }
        }
    }
}

/// Landmarks and per-coordinate validity mask, both `[b, l, 3]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameBatch {
    pub landmarks: Tensor,
    pub mask: Tensor,
}

impl FrameBatch {
    pub fn from_frames<'a>(frames: impl IntoIterator<Item = &'a Frame>) -> Result<Self> {
        let (mut pts, mut mask, mut b, mut l) = (Vec::new(), Vec::new(), 0, None);
        for f in frames {
            if *l.get_or_insert(f.len()) != f.len() {
                return Err(Error::Data("frames differ in landmark count".into()));
            }
            for (p, &v) in f.points.iter().zip(&f.valid) {
                pts.extend_from_slice(p);
                mask.extend([if v { 1.0 } else { 0.0 }; 3]);
            }
            b += 1;
        }
        let l = l.ok_or_else(|| Error::Data("empty batch".into()))?;
        Ok(FrameBatch {
            landmarks: Tensor::new(&[b, l, 3], pts)?,
            mask: Tensor::new(&[b, l, 3], mask)?,
        })
    }

    pub fn len(&self) -> usize {
        self.landmarks.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Missing-landmark statistics of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceStats {
    pub sequence: String,
    pub frames: usize,
    pub mean_missing: f64,
}

/// Ordered frames whose landmark axis follows a dictionary's code order.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub codes: Vec<String>,
    pub frames: Vec<Frame>,
}

impl Dataset {
    pub fn new(codes: Vec<String>, frames: Vec<Frame>) -> Result<Self> {
        if let Some(f) = frames.iter().find(|f| f.len() != codes.len()) {
            return Err(Error::Data(format!(
                "frame {}/{} has {} landmarks, expected {}",
                f.sequence,
                f.index,
                f.len(),
                codes.len()
            )));
        }
        Ok(Dataset { codes, frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn landmark_count(&self) -> usize {
        self.codes.len()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<FrameBatch> {
        FrameBatch::from_frames(indices.iter().map(|&i| &self.frames[i]))
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            codes: self.codes.clone(),
            frames: indices.iter().map(|&i| self.frames[i].clone()).collect(),
        }
    }

    /// Per-sequence frame counts and mean number of missing landmarks, in
    /// order of first appearance.
    pub fn missing_stats(&self) -> Vec<SequenceStats> {
        let mut order = Vec::new();
        let mut acc: HashMap<&str, (usize, usize)> = HashMap::new();
        for f in &self.frames {
            let e = acc.entry(f.sequence.as_str()).or_insert_with(|| {
                order.push(f.sequence.as_str());
                (0, 0)
            });
            e.0 += 1;
            e.1 += f.len() - f.valid_count();
        }
        order
            .into_iter()
            .map(|s| {
                let (n, missing) = acc[s];
                SequenceStats {
                    sequence: s.to_string(),
                    frames: n,
                    mean_missing: missing as f64 / n as f64,
                }
            })
            .collect()
    }

    /// Reads a frame table. Columns are `sequence, frame` followed by
    /// `CODE.x, CODE.y, CODE.z` triples in any order; dictionary codes
    /// without columns are missing in every frame. `NA` or NaN in any
    /// coordinate marks the whole landmark missing.
    pub fn read(reader: impl Read, dictionary: &LandmarkDictionary) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header = rdr.headers().map_err(|e| Error::Data(format!("frame table header: {e}")))?.clone();
        if header.len() < 2 || &header[0] != "sequence" || &header[1] != "frame" {
            return Err(Error::Data("frame table must start with 'sequence,frame' columns".into()));
        }
        let mut columns: BTreeMap<&str, [Option<usize>; 3]> = BTreeMap::new();
        let mut unknown = Vec::new();
        for (col, name) in header.iter().enumerate().skip(2) {
            let parsed = name.rsplit_once('.').and_then(|(code, axis)| Some((code, "xyz".find(axis)?)));
            let Some((code, axis)) = parsed.filter(|(_, a)| name.len() > 2 && *a < 3) else {
                return Err(Error::Data(format!("bad column name '{name}', expected CODE.x/y/z")));
            };
            if dictionary.index_of(code).is_none() {
                if !unknown.iter().any(|u| u == code) {
                    unknown.push(code.to_string());
                }
                continue;
            }
            let slot = &mut columns.entry(code).or_default()[axis];
            if slot.replace(col).is_some() {
                return Err(Error::Data(format!("duplicate column '{name}'")));
            }
        }
        if !unknown.is_empty() {
            return Err(Error::UnknownCodes(unknown));
        }
        let mut layout = vec![None; dictionary.len()];
        for (code, cols) in &columns {
            let [Some(x), Some(y), Some(z)] = *cols else {
                return Err(Error::Data(format!("landmark '{code}' lacks one of its x/y/z columns")));
            };
            layout[dictionary.index_of(code).unwrap()] = Some([x, y, z]);
        }

        let mut frames = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::Data(format!("frame table row {}: {e}", row + 1)))?;
            let index = rec[1]
                .parse()
                .map_err(|_| Error::Data(format!("row {}: bad frame index '{}'", row + 1, &rec[1])))?;
            let mut points = vec![[0.0; 3]; dictionary.len()];
            let mut valid = vec![false; dictionary.len()];
            for (i, cols) in layout.iter().enumerate() {
                let Some(cols) = cols else { continue };
                let mut p = [0.0_f64; 3];
                let mut ok = true;
                for (c, &col) in cols.iter().enumerate() {
                    let cell = &rec[col];
                    if cell == MISSING {
                        ok = false;
                        continue;
                    }
                    p[c] = cell.parse().map_err(|_| {
                        Error::Data(format!("row {}: bad coordinate '{cell}' in column '{}'", row + 1, &header[col]))
                    })?;
                    if p[c].is_nan() {
                        log::warn!("row {}: NaN in '{}', landmark marked missing", row + 1, &header[col]);
                        ok = false;
                    } else if !p[c].is_finite() {
                        return Err(Error::Data(format!("row {}: infinite coordinate in '{}'", row + 1, &header[col])));
                    }
                }
                if ok {
                    points[i] = p;
                    valid[i] = true;
                }
            }
            frames.push(Frame::new(&rec[0], index, points, valid)?);
        }
        Dataset::new(dictionary.codes().map(String::from).collect(), frames)
    }

    pub fn write(&self, writer: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
        let mut header = vec!["sequence".to_string(), "frame".to_string()];
        for c in &self.codes {
            header.extend(["x", "y", "z"].map(|a| format!("{c}.{a}")));
        }
        w.write_record(&header).map_err(io)?;
        for f in &self.frames {
            let mut rec = vec![f.sequence.clone(), f.index.to_string()];
            for (p, &v) in f.points.iter().zip(&f.valid) {
                if v {
                    rec.extend(p.iter().map(|x| x.to_string()));
                } else {
                    rec.extend([MISSING; 3].map(String::from));
                }
            }
            w.write_record(&rec).map_err(io)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path, dictionary: &LandmarkDictionary) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::format(path, e.to_string()))?;
        Self::read(std::io::BufReader::new(file), dictionary)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write(std::io::BufWriter::new(File::create(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Patch;

    fn dict() -> LandmarkDictionary {
        LandmarkDictionary::new(vec![Patch::new("AA", 0, []), Patch::new("BB", 1, [2]), Patch::new("CC", 3, [])]).unwrap()
    }

    #[test]
    fn round_trip_is_lossless() {
        let frames = vec![
            Frame::new("s1", 0, vec![[0.1, -2.5e-7, 3.0], [1.0 / 3.0, 2.0, 0.0], [9.0, 9.0, 9.0]], vec![true, true, false]).unwrap(),
            Frame::new("s2", 7, vec![[f64::MIN_POSITIVE, 1e300, -0.0]; 3], vec![true; 3]).unwrap(),
        ];
        let ds = Dataset::new(dict().codes().map(String::from).collect(), frames).unwrap();
        assert_eq!(ds.frames[0].points[2], [0.0; 3]);
        let mut buf = Vec::new();
        ds.write(&mut buf).unwrap();
        let back = Dataset::read(buf.as_slice(), &dict()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn absent_columns_and_nan_become_missing() {
        let text = "sequence,frame,CC.z,CC.x,CC.y,AA.x,AA.y,AA.z\nq,3,3,1,2,NaN,0,0\nq,4,3,1,2,NA,NA,NA\n";
        let ds = Dataset::read(text.as_bytes(), &dict()).unwrap();
        assert_eq!(ds.frames[0].valid, [false, false, true]);
        assert_eq!(ds.frames[0].points[2], [1.0, 2.0, 3.0]);
        assert_eq!(ds.frames[1].valid, [false, false, true]);
        let b = ds.batch(&[0]).unwrap();
        assert_eq!(b.mask.data(), [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let stats = ds.missing_stats();
        assert_eq!(stats.len(), 1);
        assert_eq!(stats[0].mean_missing, 2.0);
    }

    #[test]
    fn unknown_codes_are_listed() {
        let text = "sequence,frame,ZZ.x,ZZ.y,ZZ.z,YY.x,YY.y,YY.z,AA.x,AA.y,AA.z\nq,0,1,1,1,1,1,1,1,1,1\n";
        match Dataset::read(text.as_bytes(), &dict()) {
            Err(Error::UnknownCodes(c)) => assert_eq!(c, ["ZZ", "YY"]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_tables_are_data_errors() {
        for text in [
            "seq,frame\n",
            "sequence,frame,AA.x,AA.y\nq,0,1,1\n",
            "sequence,frame,AA.x,AA.y,AA.z\nq,x,1,1,1\n",
            "sequence,frame,AA.x,AA.y,AA.z\nq,0,1,oops,1\n",
            "sequence,frame,AA.w\n",
        ] {
            assert!(matches!(Dataset::read(text.as_bytes(), &dict()), Err(Error::Data(_))), "{text}");
        }
    }
}
