//! Electrode coordinates, the spatial Euclidean prior graph, and the
//! anatomical region partition that seed both streams.
//!
//! The prior weights decay with squared physical distance through a Gaussian
//! kernel, `A_ij = exp(-D_ij^2 / tau)`; by default `tau` is the median
//! off-diagonal squared distance, which pins the median prior weight at `1/e`.

use crate::autodiff::HostTensor;
use std::fmt;
use std::path::Path;

const DEFAULT_LAYOUT: &str = include_str!("../data/layout_10_10_62.txt");
const DEFAULT_REGIONS: &str = include_str!("../data/regions_5.txt");

#[derive(Debug)]
pub enum GeometryError {
    TooFewElectrodes { count: usize },
    DuplicateName { name: String },
    DuplicateCoordinates { a: String, b: String },
    NonPositiveTau { tau: f64 },
    UnknownElectrode { name: String },
    UncoveredElectrode { name: String },
    DoubleAssignment { name: String },
    EmptyRegion { name: String },
    Parse { line: usize, message: String },
    Io(std::io::Error),
}

impl fmt::Display for GeometryError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GeometryError::TooFewElectrodes { count } => {
                write!(f, "layout needs at least 2 electrodes, got {count}")
            }
            GeometryError::DuplicateName { name } => {
                write!(f, "duplicate electrode name {name}")
            }
            GeometryError::DuplicateCoordinates { a, b } => {
                write!(f, "electrodes {a} and {b} share identical coordinates")
            }
            GeometryError::NonPositiveTau { tau } => {
                write!(f, "tau must be positive, got {tau}")
            }
            GeometryError::UnknownElectrode { name } => {
                write!(f, "partition references unknown electrode {name}")
            }
            GeometryError::UncoveredElectrode { name } => {
                write!(f, "electrode {name} is not assigned to any region")
            }
            GeometryError::DoubleAssignment { name } => {
                write!(f, "electrode {name} is assigned to more than one region")
            }
            GeometryError::EmptyRegion { name } => write!(f, "region {name} is empty"),
            GeometryError::Parse { line, message } => {
                write!(f, "parse error at line {line}: {message}")
            }
            GeometryError::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl std::error::Error for GeometryError {}

impl From<std::io::Error> for GeometryError {
    fn from(e: std::io::Error) -> Self {
        GeometryError::Io(e)
    }
}

/// Named electrodes with 3-D coordinates in head-model centimeters.
#[derive(Debug, Clone, PartialEq)]
pub struct ElectrodeLayout {
    names: Vec<String>,
    coords: Vec<[f64; 3]>,
}

impl ElectrodeLayout {
    pub fn new(names: Vec<String>, coords: Vec<[f64; 3]>) -> Result<Self, GeometryError> {
        if names.len() < 2 {
            return Err(GeometryError::TooFewElectrodes { count: names.len() });
        }
        assert_eq!(names.len(), coords.len(), "names/coords length mismatch");
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(GeometryError::DuplicateName { name: n.clone() });
            }
        }
        for i in 0..coords.len() {
            for j in 0..i {
                if coords[i] == coords[j] {
                    return Err(GeometryError::DuplicateCoordinates {
                        a: names[j].clone(),
                        b: names[i].clone(),
                    });
                }
            }
        }
        Ok(ElectrodeLayout { names, coords })
    }

    /// The shipped 62-channel spherical 10-10 table.
    pub fn default_62() -> Self {
        Self::parse(DEFAULT_LAYOUT).expect("embedded layout is valid")
    }

    pub fn num_channels(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn coords(&self) -> &[[f64; 3]] {
        &self.coords
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Parse the plain-text format: one `NAME x y z` line per electrode.
    /// `#`-prefixed lines and blank lines are ignored.
    pub fn parse(text: &str) -> Result<Self, GeometryError> {
        let mut names = Vec::new();
        let mut coords = Vec::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut it = line.split_whitespace();
            let name = it.next().unwrap().to_string();
            let mut xyz = [0.0; 3];
            for c in xyz.iter_mut() {
                let tok = it.next().ok_or(GeometryError::Parse {
                    line: ln + 1,
                    message: format!("expected NAME x y z, got {line:?}"),
                })?;
                *c = tok.parse().map_err(|_| GeometryError::Parse {
                    line: ln + 1,
                    message: format!("bad coordinate {tok:?}"),
                })?;
            }
            if it.next().is_some() {
                return Err(GeometryError::Parse {
                    line: ln + 1,
                    message: "trailing tokens after z".into(),
                });
            }
            names.push(name);
            coords.push(xyz);
        }
        Self::new(names, coords)
    }

    pub fn load(path: &Path) -> Result<Self, GeometryError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Serialize in the same format load accepts; round-trips exactly
    /// (coordinates use shortest-roundtrip decimal formatting).
    pub fn save(&self, path: &Path) -> Result<(), GeometryError> {
        let mut out = String::new();
        for (n, c) in self.names.iter().zip(&self.coords) {
            out.push_str(&format!("{n} {} {} {}\n", c[0], c[1], c[2]));
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Disjoint anatomical regions over a layout.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionPartition {
    region_names: Vec<String>,
    /// Electrode index -> region id.
    assignment: Vec<usize>,
}

impl RegionPartition {
    /// Build from explicit member lists, validating the disjoint cover.
    pub fn new(
        layout: &ElectrodeLayout,
        regions: &[(String, Vec<String>)],
    ) -> Result<Self, GeometryError> {
        let n = layout.num_channels();
        let mut assignment = vec![usize::MAX; n];
        let mut region_names = Vec::with_capacity(regions.len());
        for (rid, (rname, members)) in regions.iter().enumerate() {
            if members.is_empty() {
                return Err(GeometryError::EmptyRegion { name: rname.clone() });
            }
            for m in members {
                let idx = layout
                    .index_of(m)
                    .ok_or(GeometryError::UnknownElectrode { name: m.clone() })?;
                if assignment[idx] != usize::MAX {
                    return Err(GeometryError::DoubleAssignment { name: m.clone() });
                }
                assignment[idx] = rid;
            }
            region_names.push(rname.clone());
        }
        if let Some(i) = assignment.iter().position(|&r| r == usize::MAX) {
            return Err(GeometryError::UncoveredElectrode {
                name: layout.names()[i].clone(),
            });
        }
        Ok(RegionPartition {
            region_names,
            assignment,
        })
    }

    /// The shipped 5-region table for the default 62-channel layout.
    pub fn default_5(layout: &ElectrodeLayout) -> Result<Self, GeometryError> {
        Self::parse(layout, DEFAULT_REGIONS)
    }

    pub fn num_regions(&self) -> usize {
        self.region_names.len()
    }

    pub fn region_names(&self) -> &[String] {
        &self.region_names
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn members(&self, region: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, &r)| r == region)
            .map(|(i, _)| i)
            .collect()
    }

    /// Parse `REGION_NAME: NAME,NAME,...` lines.
    pub fn parse(layout: &ElectrodeLayout, text: &str) -> Result<Self, GeometryError> {
        let mut regions = Vec::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (name, rest) = line.split_once(':').ok_or(GeometryError::Parse {
                line: ln + 1,
                message: "expected REGION_NAME: NAME,NAME,...".into(),
            })?;
            let members: Vec<String> = rest
                .split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect();
            regions.push((name.trim().to_string(), members));
        }
        Self::new(layout, &regions)
    }

    pub fn load(layout: &ElectrodeLayout, path: &Path) -> Result<Self, GeometryError> {
        Self::parse(layout, &std::fs::read_to_string(path)?)
    }

    pub fn save(&self, layout: &ElectrodeLayout, path: &Path) -> Result<(), GeometryError> {
        let mut out = String::new();
        for (rid, rname) in self.region_names.iter().enumerate() {
            let members: Vec<&str> = self
                .members(rid)
                .into_iter()
                .map(|i| layout.names()[i].as_str())
                .collect();
            out.push_str(&format!("{rname}: {}\n", members.join(",")));
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Passes iff the partition is a disjoint cover of the layout with non-empty
/// regions. [`RegionPartition`] construction already guarantees this; the
/// check re-validates data coming from elsewhere.
pub fn validate_partition(
    layout: &ElectrodeLayout,
    partition: &RegionPartition,
) -> Result<(), GeometryError> {
    if partition.assignment.len() != layout.num_channels() {
        return Err(GeometryError::UncoveredElectrode {
            name: layout
                .names()
                .get(partition.assignment.len())
                .cloned()
                .unwrap_or_default(),
        });
    }
    let k = partition.num_regions();
    let mut seen = vec![false; k];
    for (i, &r) in partition.assignment.iter().enumerate() {
        if r >= k {
            return Err(GeometryError::DoubleAssignment {
                name: layout.names()[i].clone(),
            });
        }
        seen[r] = true;
    }
    if let Some(rid) = seen.iter().position(|s| !s) {
        return Err(GeometryError::EmptyRegion {
            name: partition.region_names[rid].clone(),
        });
    }
    Ok(())
}

/// Pairwise Euclidean distances: symmetric with a zero diagonal.
pub fn distance_matrix(layout: &ElectrodeLayout) -> HostTensor {
    let n = layout.num_channels();
    let c = layout.coords();
    let mut d = HostTensor::zeros(&[n, n]);
    for i in 0..n {
        for j in (i + 1)..n {
            let dx = c[i][0] - c[j][0];
            let dy = c[i][1] - c[j][1];
            let dz = c[i][2] - c[j][2];
            let dist = (dx * dx + dy * dy + dz * dz).sqrt();
            d.data[i * n + j] = dist;
            d.data[j * n + i] = dist;
        }
    }
    d
}

/// Gaussian-kernel prior `A_ij = exp(-D_ij^2 / tau)`; unit diagonal.
pub fn prior_adjacency(d: &HostTensor, tau: f64) -> Result<HostTensor, GeometryError> {
    if !(tau > 0.0) {
        return Err(GeometryError::NonPositiveTau { tau });
    }
    let mut a = HostTensor::zeros(&d.shape);
    for (av, dv) in a.data.iter_mut().zip(&d.data) {
        *av = (-dv * dv / tau).exp();
    }
    Ok(a)
}

/// Median of the off-diagonal squared distances, so the median prior weight
/// is exactly `1/e`. Overridable through configuration.
pub fn default_tau(d: &HostTensor) -> f64 {
    let n = d.shape[0];
    assert!(n >= 2, "default_tau needs at least 2 electrodes");
    let mut sq: Vec<f64> = Vec::with_capacity(n * (n - 1));
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let v = d.data[i * n + j];
                sq.push(v * v);
            }
        }
    }
    sq.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = sq.len();
    if m % 2 == 1 {
        sq[m / 2]
    } else {
        0.5 * (sq[m / 2 - 1] + sq[m / 2])
    }
}

/// Layout, partition and prior bundled for the model.
#[derive(Debug, Clone)]
pub struct PriorGraph {
    pub distances: HostTensor,
    pub adjacency: HostTensor,
    pub tau: f64,
}

impl PriorGraph {
    /// Build from a layout; `tau` falls back to [`default_tau`].
    pub fn from_layout(layout: &ElectrodeLayout, tau: Option<f64>) -> Result<Self, GeometryError> {
        let distances = distance_matrix(layout);
        let tau = match tau {
            Some(t) if t > 0.0 => t,
            Some(t) => return Err(GeometryError::NonPositiveTau { tau: t }),
            None => default_tau(&distances),
        };
        let adjacency = prior_adjacency(&distances, tau)?;
        Ok(PriorGraph {
            distances,
            adjacency,
            tau,
        })
    }
}
