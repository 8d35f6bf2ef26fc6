use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Mesh vertices a landmark may attach to, with its representative vertex.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Patch {
    pub code: String,
    pub median: usize,
    /// All patch vertices, `median` first.
    pub vertices: Vec<usize>,
}

impl Patch {
    pub fn new(code: impl Into<String>, median: usize, others: impl IntoIterator<Item = usize>) -> Self {
        let mut vertices = vec![median];
        for v in others {
            if !vertices.contains(&v) {
                vertices.push(v);
            }
        }
        Patch {
            code: code.into(),
            median,
            vertices,
        }
    }
}

/// Ordered landmark codes; the order fixes the landmark axis of every frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LandmarkDictionary {
    patches: Vec<Patch>,
}

impl LandmarkDictionary {
    pub fn new(patches: Vec<Patch>) -> Result<Self> {
        let mut seen = HashSet::new();
        for p in &patches {
            if p.code.is_empty() || p.code.contains([':', ';', ',']) || p.code.contains(char::is_whitespace) {
                return Err(Error::Config(format!("invalid landmark code '{}'", p.code)));
            }
            if !seen.insert(p.code.as_str()) {
                return Err(Error::Config(format!("duplicate landmark code '{}'", p.code)));
            }
            if p.vertices.is_empty() {
                return Err(Error::Config(format!("landmark '{}' has an empty patch", p.code)));
            }
            if p.vertices[0] != p.median {
                return Err(Error::Config(format!("landmark '{}': median must lead the patch", p.code)));
            }
        }
        if patches.is_empty() {
            return Err(Error::Config("landmark dictionary is empty".into()));
        }
        Ok(LandmarkDictionary { patches })
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn patches(&self) -> &[Patch] {
        &self.patches
    }

    pub fn codes(&self) -> impl Iterator<Item = &str> {
        self.patches.iter().map(|p| p.code.as_str())
    }

    pub fn index_of(&self, code: &str) -> Option<usize> {
        self.patches.iter().position(|p| p.code == code)
    }

    pub fn medians(&self) -> Vec<usize> {
        self.patches.iter().map(|p| p.median).collect()
    }

    /// Same codes with every patch collapsed to its median vertex.
    pub fn hard_assignment(&self) -> Self {
        LandmarkDictionary {
            patches: self
                .patches
                .iter()
                .map(|p| Patch::new(p.code.clone(), p.median, []))
                .collect(),
        }
    }

    /// Keeps only the listed codes, in the listed order.
    pub fn subset(&self, codes: &[&str]) -> Result<Self> {
        let unknown: Vec<String> = codes
            .iter()
            .filter(|c| self.index_of(c).is_none())
            .map(|c| c.to_string())
            .collect();
        if !unknown.is_empty() {
            return Err(Error::UnknownCodes(unknown));
        }
        Self::new(
            codes
                .iter()
                .map(|c| self.patches[self.index_of(c).unwrap()].clone())
                .collect(),
        )
    }

    pub fn check_vertex_range(&self, vertex_count: usize) -> Result<()> {
        for p in &self.patches {
            if let Some(v) = p.vertices.iter().find(|&&v| v >= vertex_count) {
                return Err(Error::ModelValidation(format!(
                    "landmark '{}' references vertex {v} of {vertex_count}",
                    p.code
                )));
            }
        }
        Ok(())
    }

    /// Dictionary file: one `CODE: median; i1,i2,...` line per landmark.
    pub fn to_dictionary_text(&self) -> String {
        let mut s = String::new();
        for p in &self.patches {
            let rest: Vec<String> = p.vertices[1..].iter().map(usize::to_string).collect();
            let _ = writeln!(s, "{}: {}; {}", p.code, p.median, rest.join(","));
        }
        s
    }

    pub fn parse_dictionary_text(text: &str) -> std::result::Result<Self, String> {
        let mut patches = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |m: &str| format!("line {}: {m}", lineno + 1);
            let (code, rest) = line.split_once(':').ok_or_else(|| err("missing ':'"))?;
            let (median, others) = rest.split_once(';').unwrap_or((rest, ""));
            let median = median.trim().parse::<usize>().map_err(|e| err(&e.to_string()))?;
            let others = parse_indices(others).map_err(|e| err(&e))?;
            patches.push(Patch::new(code.trim(), median, others));
        }
        Self::new(patches).map_err(|e| e.to_string())
    }

    /// Body-model container table: one `CODE: i0,i1,...` line, `i0` being the median.
    pub fn to_patch_table(&self) -> String {
        let mut s = String::new();
        for p in &self.patches {
            let all: Vec<String> = p.vertices.iter().map(usize::to_string).collect();
            let _ = writeln!(s, "{}: {}", p.code, all.join(","));
        }
        s
    }

    pub fn parse_patch_table(text: &str) -> std::result::Result<Self, String> {
        let mut patches = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (code, rest) = line
                .split_once(':')
                .ok_or_else(|| format!("line {}: missing ':'", lineno + 1))?;
            let idx = parse_indices(rest).map_err(|e| format!("line {}: {e}", lineno + 1))?;
            let Some((&median, others)) = idx.split_first() else {
                return Err(format!("line {}: landmark '{}' has no vertices", lineno + 1, code.trim()));
            };
            patches.push(Patch::new(code.trim(), median, others.iter().copied()));
        }
        Self::new(patches).map_err(|e| e.to_string())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse_dictionary_text(&text).map_err(|e| Error::format(path, e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_dictionary_text())?;
        Ok(())
    }
}

fn parse_indices(s: &str) -> std::result::Result<Vec<usize>, String> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<usize>().map_err(|e| format!("bad index '{t}': {e}")))
        .collect()
}
