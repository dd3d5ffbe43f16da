//! Curve panels: CSV ingestion and export, transforms and temporal splits.
//!
//! The curve CSV has the header `region,time,u,value` and one row per cell,
//! in any order. Values are written with 17 significant digits so that a
//! write/load round trip is bit-exact.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::basis::{same_grid, BasisSystem, Curve, Grid};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transform {
    #[default]
    Raw,
    Log10,
}

/// A complete `H x T x M` cube of curves on a shared grid.
#[derive(Clone, Debug, PartialEq)]
pub struct FtsDataset {
    regions: Vec<String>,
    times: Vec<i64>,
    grid: Arc<Grid>,
    values: Vec<f64>,
    transform: Transform,
}

impl FtsDataset {
    /// `values` is laid out region-major, then time, then grid point.
    pub fn new(
        regions: Vec<String>,
        times: Vec<i64>,
        grid: Arc<Grid>,
        values: Vec<f64>,
        transform: Transform,
    ) -> Result<Self> {
        if regions.is_empty() || times.is_empty() {
            return Err(Error::Contract(
                "dataset needs at least one region and time".into(),
            ));
        }
        if let Some(i) = times.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::Contract(format!(
                "time labels must be strictly increasing (at {})",
                times[i + 1]
            )));
        }
        let expected = regions.len() * times.len() * grid.len();
        if values.len() != expected {
            return Err(Error::shape(
                "dataset",
                format!(
                    "{} values for cube ({}, {}, {})",
                    values.len(),
                    regions.len(),
                    times.len(),
                    grid.len()
                ),
            ));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite value at flat index {i}")));
        }
        Ok(FtsDataset {
            regions,
            times,
            grid,
            values,
            transform,
        })
    }

    /// Cube with default labels `r0, r1, ...` and times `1..=T`.
    pub fn from_cube(h: usize, t: usize, grid: Arc<Grid>, values: Vec<f64>) -> Result<Self> {
        FtsDataset::new(
            (0..h).map(|i| format!("r{i}")).collect(),
            (1..=t as i64).collect(),
            grid,
            values,
            Transform::Raw,
        )
    }

    /// `(H, T, M)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.regions.len(), self.times.len(), self.grid.len())
    }

    pub fn regions(&self) -> &[String] {
        &self.regions
    }

    pub fn times(&self) -> &[i64] {
        &self.times
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn transform(&self) -> Transform {
        self.transform
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn offset(&self, h: usize, t: usize) -> usize {
        (h * self.times.len() + t) * self.grid.len()
    }

    pub fn curve_values(&self, h: usize, t: usize) -> &[f64] {
        let o = self.offset(h, t);
        &self.values[o..o + self.grid.len()]
    }

    pub fn curve(&self, h: usize, t: usize) -> Result<Curve> {
        let (hh, tt, _) = self.dims();
        if h >= hh {
            return Err(Error::Index {
                what: "regions",
                index: h,
                size: hh,
            });
        }
        if t >= tt {
            return Err(Error::Index {
                what: "times",
                index: t,
                size: tt,
            });
        }
        Curve::new(self.grid.clone(), self.curve_values(h, t).to_vec())
    }

    /// Time slice `[start, end)` of the cube.
    pub fn slice_times(&self, start: usize, end: usize) -> Result<FtsDataset> {
        if start >= end || end > self.times.len() {
            return Err(Error::Contract(format!(
                "time slice {start}..{end} of {}",
                self.times.len()
            )));
        }
        let mut values = Vec::with_capacity(self.regions.len() * (end - start) * self.grid.len());
        for h in 0..self.regions.len() {
            for t in start..end {
                values.extend_from_slice(self.curve_values(h, t));
            }
        }
        FtsDataset::new(
            self.regions.clone(),
            self.times[start..end].to_vec(),
            self.grid.clone(),
            values,
            self.transform,
        )
    }

    fn with_values(&self, values: Vec<f64>, transform: Transform) -> Result<FtsDataset> {
        FtsDataset::new(
            self.regions.clone(),
            self.times.clone(),
            self.grid.clone(),
            values,
            transform,
        )
    }
}

/// Write `bytes` to a sibling temporary file and rename it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Contract(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

pub fn curves_to_csv(ds: &FtsDataset) -> String {
    let (h, t, m) = ds.dims();
    let mut out = String::with_capacity(h * t * m * 48 + 32);
    out.push_str("region,time,u,value\n");
    for hi in 0..h {
        for ti in 0..t {
            for (u, v) in ds.grid.points().iter().zip(ds.curve_values(hi, ti)) {
                let _ = writeln!(
                    out,
                    "{},{},{:.16e},{:.16e}",
                    ds.regions[hi], ds.times[ti], u, v
                );
            }
        }
    }
    out
}

pub fn write_curves(ds: &FtsDataset, path: &Path) -> Result<()> {
    if let Some(bad) = ds.regions.iter().find(|r| r.contains([',', '\n', '"'])) {
        return Err(Error::Format(format!(
            "region label '{bad}' contains a separator"
        )));
    }
    write_atomic(path, curves_to_csv(ds).as_bytes())
}

pub fn load_curves(path: &Path) -> Result<FtsDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_curves(&text)
}

/// Parse curve CSV text. Regions keep their order of first appearance; times
/// and grid points are sorted.
pub fn parse_curves(text: &str) -> Result<FtsDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| Error::Format(format!("unreadable header: {e}")))?
        .clone();
    if header.iter().collect::<Vec<_>>() != ["region", "time", "u", "value"] {
        return Err(Error::Format(format!(
            "header must be region,time,u,value, got {}",
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }

    let mut region_index: HashMap<String, usize> = HashMap::new();
    let mut regions = Vec::new();
    let mut cells: HashMap<(usize, i64), Vec<(f64, f64)>> = HashMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::Parse {
                line,
                msg: e.to_string(),
            }
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let region = record[0].to_string();
        if region.is_empty() {
            return Err(Error::Parse {
                line,
                msg: "empty region label".into(),
            });
        }
        let time: i64 = record[1].parse().map_err(|_| Error::Parse {
            line,
            msg: format!("time '{}' is not an integer", &record[1]),
        })?;
        let num = |field: &str, name: &str| -> Result<f64> {
            field
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Parse {
                    line,
                    msg: format!("{name} '{field}' is not a finite number"),
                })
        };
        let u = num(&record[2], "u")?;
        let value = num(&record[3], "value")?;
        let hi = *region_index.entry(region.clone()).or_insert_with(|| {
            regions.push(region);
            regions.len() - 1
        });
        cells.entry((hi, time)).or_default().push((u, value));
    }
    if cells.is_empty() {
        return Err(Error::Ingestion("no curve rows".into()));
    }

    let mut times: Vec<i64> = cells.keys().map(|k| k.1).collect();
    times.sort_unstable();
    times.dedup();
    let mut grid_points: Vec<f64> = cells.values().flatten().map(|c| c.0).collect();
    grid_points.sort_by(f64::total_cmp);
    grid_points.dedup();

    let mut largest = 0;
    for ((hi, t), cell) in cells.iter_mut() {
        cell.sort_by(|a, b| a.0.total_cmp(&b.0));
        if let Some(w) = cell.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::Format(format!(
                "duplicate cell ({}, {t}, {})",
                regions[*hi], w[0].0
            )));
        }
        largest = largest.max(cell.len());
    }
    if largest < grid_points.len() {
        return Err(Error::Format(format!(
            "inconsistent grids: {} distinct grid points but no curve has more than {largest}",
            grid_points.len()
        )));
    }

    let mut missing = Vec::new();
    let mut n_missing = 0usize;
    let m = grid_points.len();
    let mut values = vec![0.0; regions.len() * times.len() * m];
    for hi in 0..regions.len() {
        for (ti, &t) in times.iter().enumerate() {
            let cell = cells.get(&(hi, t)).map(Vec::as_slice).unwrap_or(&[]);
            let mut j = 0;
            for (mi, &u) in grid_points.iter().enumerate() {
                if j < cell.len() && cell[j].0 == u {
                    values[(hi * times.len() + ti) * m + mi] = cell[j].1;
                    j += 1;
                } else {
                    n_missing += 1;
                    if missing.len() < 10 {
                        missing.push(format!("({}, {t}, {u})", regions[hi]));
                    }
                }
            }
        }
    }
    if n_missing > 0 {
        return Err(Error::Ingestion(format!(
            "{n_missing} missing cells (region, time, u): {}",
            missing.join(", ")
        )));
    }
    let grid = Arc::new(Grid::new(grid_points)?);
    FtsDataset::new(regions, times, grid, values, Transform::Raw)
}

pub fn transform_log10(ds: &FtsDataset) -> Result<FtsDataset> {
    if ds.transform != Transform::Raw {
        return Err(Error::Contract(
            "dataset is already log10-transformed".into(),
        ));
    }
    let (_, t, m) = ds.dims();
    if let Some(i) = ds.values.iter().position(|&v| v <= 0.0) {
        let cell = i / m;
        return Err(Error::Domain(format!(
            "non-positive value {} at ({}, {}, {})",
            ds.values[i],
            ds.regions[cell / t],
            ds.times[cell % t],
            ds.grid.points()[i % m]
        )));
    }
    ds.with_values(
        ds.values.iter().map(|v| v.log10()).collect(),
        Transform::Log10,
    )
}

/// Replace every curve by its basis projection.
pub fn smooth_dataset(ds: &FtsDataset, basis: &BasisSystem) -> Result<FtsDataset> {
    if !same_grid(basis.grid(), &ds.grid) {
        return Err(Error::Contract(
            "basis grid does not match dataset grid".into(),
        ));
    }
    let m = ds.grid.len();
    let mut values = Vec::with_capacity(ds.values.len());
    for curve in ds.values.chunks(m) {
        let coeffs = basis.project_values(curve)?;
        values.extend(basis.reconstruct_values(&coeffs)?);
    }
    ds.with_values(values, ds.transform)
}

/// Number of leading time points in the training part.
pub fn train_length(t: usize, ratio: f64) -> Result<usize> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!(
            "split ratio {ratio} must lie in (0, 1)"
        )));
    }
    // guard against products like 0.8 * 10 landing a hair above an integer
    let n = ((ratio * t as f64) - 1e-9).ceil().max(1.0) as usize;
    if n >= t {
        return Err(Error::Config(format!(
            "split of {t} time points at ratio {ratio} leaves an empty test set"
        )));
    }
    Ok(n)
}

pub fn split_train_test(ds: &FtsDataset, ratio: f64) -> Result<(FtsDataset, FtsDataset)> {
    let t = ds.times.len();
    let n = train_length(t, ratio)?;
    Ok((ds.slice_times(0, n)?, ds.slice_times(n, t)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{make_basis, BasisKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn small() -> FtsDataset {
        let grid = Arc::new(Grid::new(vec![0.0, 0.25, 0.6, 1.0]).unwrap());
        let values = (0..24)
            .map(|i| (i as f64 * 0.37).sin() / 3.0 + 1.0)
            .collect();
        FtsDataset::new(
            vec!["north".into(), "south".into()],
            vec![2001, 2002, 2003],
            grid,
            values,
            Transform::Raw,
        )
        .unwrap()
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let ds = small();
        let back = parse_curves(&curves_to_csv(&ds)).unwrap();
        assert_eq!(back.dims(), (2, 3, 4));
        assert_eq!(back, ds);
    }

    #[test]
    fn rows_in_any_order() {
        let ds = small();
        let text = curves_to_csv(&ds);
        let mut lines: Vec<&str> = text.lines().collect();
        let header = lines.remove(0);
        // keep the first row first so region order is preserved
        lines[1..].reverse();
        let shuffled = format!("{header}\n{}\n", lines.join("\n"));
        assert_eq!(parse_curves(&shuffled).unwrap(), ds);
    }

    #[test]
    fn missing_row_is_named() {
        let text = curves_to_csv(&small());
        let mut lines: Vec<&str> = text.lines().collect();
        lines.remove(6); // north, 2002, second grid point
        let err = parse_curves(&lines.join("\n")).unwrap_err();
        match err {
            Error::Ingestion(msg) => assert!(msg.contains("(north, 2002, 0.25)"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_cells_listing_is_capped() {
        let text = curves_to_csv(&small());
        let lines: Vec<&str> = text.lines().collect();
        // drop every row of the south region except one curve
        let kept: Vec<&str> = lines.iter().take(1 + 12 + 4).copied().collect();
        match parse_curves(&kept.join("\n")).unwrap_err() {
            Error::Ingestion(msg) => {
                assert!(msg.starts_with("8 missing"), "{msg}");
                assert_eq!(msg.matches("(south").count(), 8);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn non_numeric_value_reports_line() {
        let text = "region,time,u,value\na,1,0,1.0\na,1,1,abc\n";
        match parse_curves(text).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn inconsistent_grids_rejected() {
        let text = "region,time,u,value\na,1,0,1\na,1,1,1\na,2,0,1\na,2,0.5,1\n";
        assert!(matches!(parse_curves(text), Err(Error::Format(_))));
    }

    #[test]
    fn bad_header_rejected() {
        assert!(matches!(
            parse_curves("r,t,u,v\na,1,0,1\n"),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn log10_examples() {
        let grid = Arc::new(Grid::uniform(0.0, 1.0, 2).unwrap());
        let ds = FtsDataset::from_cube(1, 1, grid.clone(), vec![0.001, 1.0]).unwrap();
        let lg = transform_log10(&ds).unwrap();
        assert!((lg.values()[0] + 3.0).abs() < 1e-15);
        assert_eq!(lg.values()[1], 0.0);
        assert_eq!(lg.transform(), Transform::Log10);
        assert!(matches!(transform_log10(&lg), Err(Error::Contract(_))));

        let bad = FtsDataset::from_cube(1, 1, grid, vec![0.5, 0.0]).unwrap();
        match transform_log10(&bad).unwrap_err() {
            Error::Domain(msg) => assert!(msg.contains("(r0, 1, 1)"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn split_examples() {
        assert_eq!(train_length(50, 0.8).unwrap(), 40);
        assert_eq!(train_length(10, 0.8).unwrap(), 8);
        assert!(matches!(train_length(2, 0.9), Err(Error::Config(_))));
        assert!(matches!(train_length(10, 1.0), Err(Error::Config(_))));

        let ds = small();
        let (train, test) = split_train_test(&ds, 0.5).unwrap();
        assert_eq!(train.times(), &[2001, 2002]);
        assert_eq!(test.times(), &[2003]);
        assert_eq!(
            train.values().len() + test.values().len(),
            ds.values().len()
        );
        assert_eq!(test.curve_values(1, 0), ds.curve_values(1, 2));
    }

    #[test]
    fn smoothing_contracts() {
        let grid = Arc::new(Grid::uniform(0.0, 1.0, 101).unwrap());
        let basis = make_basis(BasisKind::Bspline, 8, grid.clone()).unwrap();
        let coeffs = [0.3, -1.0, 0.2, 0.8, 1.5, -0.4, 0.0, 0.6];
        let in_span = basis.reconstruct(&coeffs).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noise: Vec<f64> = (0..101).map(|_| rng.sample(StandardNormal)).collect();
        let mut values = in_span.values().to_vec();
        values.extend(&noise);
        let ds = FtsDataset::from_cube(1, 2, grid, values).unwrap();

        let once = smooth_dataset(&ds, &basis).unwrap();
        for (a, b) in once.curve_values(0, 0).iter().zip(in_span.values()) {
            assert!((a - b).abs() < 1e-9);
        }
        let var = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
        };
        assert!(var(once.curve_values(0, 1)) < var(&noise));

        let twice = smooth_dataset(&once, &basis).unwrap();
        for (a, b) in twice.values().iter().zip(once.values()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
