use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Region {
    Mouth,
    Eye,
    Other,
}

impl Region {
    pub fn as_str(self) -> &'static str {
        match self {
            Region::Mouth => "mouth",
            Region::Eye => "eye",
            Region::Other => "other",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mouth" => Some(Region::Mouth),
            "eye" => Some(Region::Eye),
            "other" => Some(Region::Other),
            _ => None,
        }
    }
}

/// Labelled head-mesh vertices. `lip` holds vertex indices, upper-lip points
/// first and lower-lip points second, in two equal halves.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorMesh {
    pub vertices: Vec<[f64; 3]>,
    pub regions: Vec<Region>,
    pub landmarks: Vec<usize>,
    pub lip: Vec<usize>,
}

impl PriorMesh {
    pub fn validate(&self) -> Result<()> {
        let v = self.vertices.len();
        if self.regions.len() != v {
            return Err(Error::Dimension {
                what: "prior regions",
                expected: v,
                got: self.regions.len(),
            });
        }
        if let Some(&bad) = self.landmarks.iter().chain(&self.lip).find(|&&i| i >= v) {
            return Err(Error::Contract(format!("landmark index {bad} out of range for {v} vertices")));
        }
        if self.lip.len() % 2 != 0 {
            return Err(Error::Contract("lip landmark list must split into equal upper/lower halves".into()));
        }
        if self.vertices.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Contract("prior vertex is not finite".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    /// Mouth and eye vertices in index order: the anchors of the completion branch.
    pub fn selected(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.regions[i] != Region::Other)
            .collect()
    }

    pub fn selected_positions(&self) -> Vec<[f64; 3]> {
        self.selected().into_iter().map(|i| self.vertices[i]).collect()
    }

    pub fn count(&self, r: Region) -> usize {
        self.regions.iter().filter(|&&x| x == r).count()
    }

    pub fn upper_lip(&self) -> &[usize] {
        &self.lip[..self.lip.len() / 2]
    }

    pub fn lower_lip(&self) -> &[usize] {
        &self.lip[self.lip.len() / 2..]
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("priormesh v1 {}\n", self.len());
        for (v, r) in self.vertices.iter().zip(&self.regions) {
            let _ = writeln!(s, "{} {} {} {}", v[0], v[1], v[2], r.as_str());
        }
        let join = |ix: &[usize]| ix.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ");
        let _ = writeln!(s, "landmarks: {}", join(&self.landmarks));
        let _ = writeln!(s, "lip: {}", join(&self.lip));
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let bad = |m: String| Error::format(path, m);
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
        let h: Vec<&str> = header.split_whitespace().collect();
        if h.len() != 3 || h[0] != "priormesh" {
            return Err(bad(format!("bad header {header:?}")));
        }
        if h[1] != "v1" {
            let found = h[1].trim_start_matches('v').parse().unwrap_or(0);
            return Err(Error::Version {
                path: path.to_path_buf(),
                found,
                expected: 1,
            });
        }
        let n: usize = h[2].parse().map_err(|_| bad("bad vertex count".into()))?;
        let mut vertices = Vec::with_capacity(n);
        let mut regions = Vec::with_capacity(n);
        for k in 0..n {
            let line = lines.next().ok_or_else(|| bad(format!("missing vertex {k}")))?;
            let t: Vec<&str> = line.split_whitespace().collect();
            if t.len() != 4 {
                return Err(bad(format!("vertex line {k}: expected `x y z region`")));
            }
            let mut p = [0.0; 3];
            for j in 0..3 {
                p[j] = t[j].parse().map_err(|_| bad(format!("vertex {k}: bad number {:?}", t[j])))?;
            }
            vertices.push(p);
            regions.push(Region::parse(t[3]).ok_or_else(|| bad(format!("vertex {k}: unknown region {:?}", t[3])))?);
        }
        let mut list = |key: &str| -> Result<Vec<usize>> {
            let line = lines.next().ok_or_else(|| bad(format!("missing `{key}:` line")))?;
            let rest = line
                .strip_prefix(key)
                .and_then(|r| r.strip_prefix(':'))
                .ok_or_else(|| bad(format!("expected `{key}:` line")))?;
            rest.split_whitespace()
                .map(|x| x.parse().map_err(|_| bad(format!("bad index {x:?} in {key}"))))
                .collect()
        };
        let landmarks = list("landmarks")?;
        let lip = list("lip")?;
        let mesh = Self {
            vertices,
            regions,
            landmarks,
            lip,
        };
        mesh.validate().map_err(|e| bad(e.to_string()))?;
        Ok(mesh)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}
