//! Domain types shared by every stage and their CSV encodings.
//!
//! All files are UTF-8, comma separated, LF terminated. Writers prefix a
//! `#` comment line naming the tool version and config hash; readers skip
//! comment lines.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::GeoPoint;

pub const N_FEATURES: usize = 10;

/// Canonical feature order. Model weights depend on it.
pub const FEATURE_NAMES: [&str; N_FEATURES] = [
    "check_in_ratio",
    "daily_total_rate",
    "end_of_day_ratio",
    "end_of_inactive_day_ratio",
    "distance_from_most_checkin_m",
    "midnight_ratio",
    "checkins_here",
    "total_checkins",
    "pagerank",
    "reverse_pagerank",
];

/// Indices of the features that are ratios in `[0, 1]` before normalization.
pub const RATIO_FEATURES: [usize; 6] = [0, 2, 3, 5, 8, 9];

pub mod feature {
    pub const CHECK_IN_RATIO: usize = 0;
    pub const DAILY_TOTAL_RATE: usize = 1;
    pub const END_OF_DAY_RATIO: usize = 2;
    pub const END_OF_INACTIVE_DAY_RATIO: usize = 3;
    pub const DISTANCE_FROM_MOST_CHECKIN_M: usize = 4;
    pub const MIDNIGHT_RATIO: usize = 5;
    pub const CHECKINS_HERE: usize = 6;
    pub const TOTAL_CHECKINS: usize = 7;
    pub const PAGERANK: usize = 8;
    pub const REVERSE_PAGERANK: usize = 9;
}

pub type FeatureVector = [f64; N_FEATURES];

/// `predicted_cluster_id` value written for users reported as unknown.
pub const UNKNOWN_CLUSTER: i64 = -1;

const TIMESTAMP_FORMATS: [&str; 2] = ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%dT%H:%M"];

pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    TIMESTAMP_FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
}

pub fn format_timestamp(t: &NaiveDateTime) -> String {
    t.format(TIMESTAMP_FORMATS[0]).to_string()
}

/// Names the producer of an output file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool_version: String,
    pub config_hash: String,
}

impl Provenance {
    pub fn new(config_hash: impl Into<String>) -> Self {
        Provenance {
            tool_version: crate::VERSION.to_string(),
            config_hash: config_hash.into(),
        }
    }

    pub fn header_line(&self) -> String {
        format!(
            "# homecast {} config={}",
            self.tool_version, self.config_hash
        )
    }
}

/// One geotagged post. Timestamps are local civil time without offset.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckIn {
    pub user_id: String,
    pub timestamp: NaiveDateTime,
    pub lat: f64,
    pub lon: f64,
}

impl CheckIn {
    pub fn new(
        user_id: impl Into<String>,
        timestamp: NaiveDateTime,
        lat: f64,
        lon: f64,
    ) -> Result<Self> {
        GeoPoint::new(lat, lon)?;
        Ok(CheckIn {
            user_id: user_id.into(),
            timestamp,
            lat,
            lon,
        })
    }

    pub fn point(&self) -> GeoPoint {
        GeoPoint {
            lat: self.lat,
            lon: self.lon,
        }
    }
}

/// One (user, location cluster) row with its feature vector and label.
#[derive(Debug, Clone, PartialEq)]
pub struct LocationRecord {
    pub user_id: String,
    pub cluster_id: u32,
    pub lat: f64,
    pub lon: f64,
    pub features: FeatureVector,
    pub is_home: bool,
}

/// Location records plus a per-user index. Users keep first-appearance order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    records: Vec<LocationRecord>,
    users: Vec<String>,
    index: HashMap<String, Vec<usize>>,
}

impl Dataset {
    /// Builds a dataset, rejecting duplicate `(user_id, cluster_id)` pairs and
    /// users with more than one home record.
    pub fn new(records: Vec<LocationRecord>) -> Result<Self> {
        let ds = Self::from_valid(records);
        for user in &ds.users {
            let idx = &ds.index[user];
            let mut clusters: Vec<u32> = idx.iter().map(|&i| ds.records[i].cluster_id).collect();
            clusters.sort_unstable();
            if let Some(w) = clusters.windows(2).find(|w| w[0] == w[1]) {
                return Err(Error::Validation(format!(
                    "duplicate record for user {user} cluster {}",
                    w[0]
                )));
            }
            let homes = idx.iter().filter(|&&i| ds.records[i].is_home).count();
            if homes > 1 {
                return Err(Error::Validation(format!(
                    "user {user} has {homes} home records"
                )));
            }
        }
        Ok(ds)
    }

    fn from_valid(records: Vec<LocationRecord>) -> Self {
        let mut users = Vec::new();
        let mut index: HashMap<String, Vec<usize>> = HashMap::new();
        for (i, r) in records.iter().enumerate() {
            match index.get_mut(&r.user_id) {
                Some(v) => v.push(i),
                None => {
                    users.push(r.user_id.clone());
                    index.insert(r.user_id.clone(), vec![i]);
                }
            }
        }
        Dataset {
            records,
            users,
            index,
        }
    }

    pub fn empty() -> Self {
        Self::from_valid(Vec::new())
    }

    /// Checks that every user has exactly one home record.
    pub fn validate_labeled(&self) -> Result<()> {
        for user in &self.users {
            let homes = self.user_records(user).filter(|r| r.is_home).count();
            if homes != 1 {
                return Err(Error::Validation(format!(
                    "user {user} has {homes} home records, expected exactly 1"
                )));
            }
        }
        Ok(())
    }

    pub fn records(&self) -> &[LocationRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<LocationRecord> {
        self.records
    }

    pub fn users(&self) -> &[String] {
        &self.users
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_homes(&self) -> usize {
        self.records.iter().filter(|r| r.is_home).count()
    }

    /// Record indices of one user, in record order. Empty for unknown users.
    pub fn user_indices(&self, user: &str) -> &[usize] {
        self.index.get(user).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn user_records<'a>(&'a self, user: &str) -> impl Iterator<Item = &'a LocationRecord> + 'a {
        self.user_indices(user)
            .iter()
            .map(move |&i| &self.records[i])
    }

    /// Home cluster per user, for users that have a labeled home.
    pub fn home_clusters(&self) -> HashMap<String, u32> {
        self.records
            .iter()
            .filter(|r| r.is_home)
            .map(|r| (r.user_id.clone(), r.cluster_id))
            .collect()
    }

    /// Keeps the records whose predicate holds; record order is preserved.
    pub fn filter_records(&self, mut keep: impl FnMut(usize, &LocationRecord) -> bool) -> Dataset {
        let kept = self
            .records
            .iter()
            .enumerate()
            .filter(|(i, r)| keep(*i, r))
            .map(|(_, r)| r.clone())
            .collect();
        Self::from_valid(kept)
    }

    pub fn subset_users(&self, mut keep: impl FnMut(&str) -> bool) -> Dataset {
        self.filter_records(|_, r| keep(&r.user_id))
    }

    pub fn map_features(&self, mut f: impl FnMut(&FeatureVector) -> FeatureVector) -> Dataset {
        let records = self
            .records
            .iter()
            .map(|r| LocationRecord {
                features: f(&r.features),
                ..r.clone()
            })
            .collect();
        Self::from_valid(records)
    }

    pub fn feature_rows(&self) -> Vec<FeatureVector> {
        self.records.iter().map(|r| r.features).collect()
    }

    pub fn labels(&self) -> Vec<bool> {
        self.records.iter().map(|r| r.is_home).collect()
    }
}

/// Per-user outcome of the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct HomePrediction {
    pub user_id: String,
    /// `None` means UNKNOWN.
    pub predicted_cluster: Option<u32>,
    pub dnnr_score: f64,
    pub dnnc_score: Option<f64>,
    pub reported: bool,
}

impl HomePrediction {
    pub fn unknown(user_id: impl Into<String>) -> Self {
        HomePrediction {
            user_id: user_id.into(),
            predicted_cluster: None,
            dnnr_score: 0.0,
            dnnc_score: None,
            reported: false,
        }
    }
}

// ---------------------------------------------------------------------------
// CSV plumbing
// ---------------------------------------------------------------------------

const CHECKIN_HEADER: [&str; 4] = ["user_id", "timestamp", "lat", "lon"];
const CLUSTERED_HEADER: [&str; 5] = ["user_id", "timestamp", "lat", "lon", "cluster_id"];
const TRUTH_HEADER: [&str; 3] = ["user_id", "lat", "lon"];
const PREDICTION_HEADER: [&str; 5] = [
    "user_id",
    "predicted_cluster_id",
    "dnnr_score",
    "dnnc_score",
    "reported",
];

fn records_header() -> Vec<&'static str> {
    let mut h = vec!["user_id", "cluster_id", "lat", "lon"];
    h.extend_from_slice(&FEATURE_NAMES);
    h.push("is_home");
    h
}

struct CsvInput<'p> {
    path: &'p Path,
    reader: csv::Reader<BufReader<File>>,
}

impl<'p> CsvInput<'p> {
    fn open(path: &'p Path, expected: &[&str]) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .has_headers(true)
            .from_reader(BufReader::new(file));
        let headers = reader.headers()?.clone();
        let line = headers.position().map_or(1, |p| p.line());
        if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
            return Err(Error::parse(path, line, "missing header row"));
        }
        if headers.iter().ne(expected.iter().copied()) {
            return Err(Error::parse(
                path,
                line,
                format!(
                    "unexpected header `{}`, expected `{}`",
                    headers.iter().collect::<Vec<_>>().join(","),
                    expected.join(",")
                ),
            ));
        }
        Ok(CsvInput { path, reader })
    }

    /// Visits every data row with its 1-based line number.
    fn for_each_row(
        mut self,
        expected_len: usize,
        mut f: impl FnMut(&csv::StringRecord, &RowCtx) -> Result<()>,
    ) -> Result<()> {
        let mut row = csv::StringRecord::new();
        loop {
            match self.reader.read_record(&mut row) {
                Ok(false) => return Ok(()),
                Ok(true) => {}
                Err(e) => {
                    let line = e.position().map_or(0, |p| p.line());
                    return Err(Error::parse(self.path, line, e.to_string()));
                }
            }
            let ctx = RowCtx {
                path: self.path,
                line: row.position().map_or(0, |p| p.line()),
            };
            if row.len() != expected_len {
                return Err(ctx.err(format!(
                    "expected {expected_len} fields, found {}",
                    row.len()
                )));
            }
            f(&row, &ctx)?;
        }
    }
}

struct RowCtx<'p> {
    path: &'p Path,
    line: u64,
}

impl RowCtx<'_> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::parse(self.path, self.line, msg)
    }

    fn f64(&self, field: &str, name: &str) -> Result<f64> {
        let v: f64 = field
            .trim()
            .parse()
            .map_err(|_| self.err(format!("{name}: not a number: `{field}`")))?;
        if !v.is_finite() {
            return Err(self.err(format!("{name}: non-finite value `{field}`")));
        }
        Ok(v)
    }

    fn u32(&self, field: &str, name: &str) -> Result<u32> {
        field
            .trim()
            .parse()
            .map_err(|_| self.err(format!("{name}: not a non-negative integer: `{field}`")))
    }

    fn bool01(&self, field: &str, name: &str) -> Result<bool> {
        match field.trim() {
            "1" | "true" => Ok(true),
            "0" | "false" => Ok(false),
            other => Err(self.err(format!("{name}: expected 0 or 1, found `{other}`"))),
        }
    }

    fn user(&self, field: &str) -> Result<String> {
        if field.is_empty() {
            return Err(self.err("empty user_id"));
        }
        Ok(field.to_string())
    }

    fn point(&self, lat: &str, lon: &str) -> Result<GeoPoint> {
        let lat = self.f64(lat, "lat")?;
        let lon = self.f64(lon, "lon")?;
        GeoPoint::new(lat, lon).map_err(|e| self.err(e.to_string()))
    }

    fn checkin(&self, row: &csv::StringRecord) -> Result<CheckIn> {
        let user_id = self.user(&row[0])?;
        let timestamp = parse_timestamp(row[1].trim())
            .ok_or_else(|| self.err(format!("timestamp: cannot parse `{}`", &row[1])))?;
        let p = self.point(&row[2], &row[3])?;
        Ok(CheckIn {
            user_id,
            timestamp,
            lat: p.lat,
            lon: p.lon,
        })
    }
}

fn create_output(
    path: &Path,
    provenance: Option<&Provenance>,
) -> Result<csv::Writer<BufWriter<File>>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    if let Some(p) = provenance {
        writeln!(out, "{}", p.header_line()).map_err(|e| Error::io(path, e))?;
    }
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out))
}

fn finish(mut w: csv::Writer<BufWriter<File>>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes an arbitrary table of pre-formatted cells.
pub fn write_table(
    path: impl AsRef<Path>,
    provenance: Option<&Provenance>,
    header: &[&str],
    rows: &[Vec<String>],
) -> Result<()> {
    let path = path.as_ref();
    let mut w = create_output(path, provenance)?;
    w.write_record(header)?;
    for r in rows {
        if r.len() != header.len() {
            return Err(Error::Validation(format!(
                "row has {} cells, header has {}",
                r.len(),
                header.len()
            )));
        }
        w.write_record(r)?;
    }
    finish(w, path)
}

/// Writes `value` as pretty JSON wrapped with the tool version and config hash.
pub fn write_json_with_provenance<T: Serialize>(
    path: impl AsRef<Path>,
    provenance: &Provenance,
    key: &str,
    value: &T,
) -> Result<()> {
    let path = path.as_ref();
    let mut doc = serde_json::Map::new();
    doc.insert(
        "tool_version".into(),
        provenance.tool_version.clone().into(),
    );
    doc.insert("config_hash".into(), provenance.config_hash.clone().into());
    doc.insert(key.into(), serde_json::to_value(value)?);
    let text = serde_json::to_string_pretty(&serde_json::Value::Object(doc))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Reads `user_id,timestamp,lat,lon`, preserving row order.
pub fn read_checkins(path: impl AsRef<Path>) -> Result<Vec<CheckIn>> {
    let path = path.as_ref();
    let mut out = Vec::new();
    CsvInput::open(path, &CHECKIN_HEADER)?.for_each_row(4, |row, ctx| {
        out.push(ctx.checkin(row)?);
        Ok(())
    })?;
    Ok(out)
}

pub fn write_checkins(
    checkins: &[CheckIn],
    path: impl AsRef<Path>,
    provenance: Option<&Provenance>,
) -> Result<()> {
    let path = path.as_ref();
    let mut w = create_output(path, provenance)?;
    w.write_record(CHECKIN_HEADER)?;
    for c in checkins {
        w.write_record([
            c.user_id.clone(),
            format_timestamp(&c.timestamp),
            c.lat.to_string(),
            c.lon.to_string(),
        ])?;
    }
    finish(w, path)
}

/// Reads check-ins carrying a per-user `cluster_id` column.
pub fn read_clustered_checkins(path: impl AsRef<Path>) -> Result<Vec<(CheckIn, u32)>> {
    let path = path.as_ref();
    let mut out = Vec::new();
    CsvInput::open(path, &CLUSTERED_HEADER)?.for_each_row(5, |row, ctx| {
        let c = ctx.checkin(row)?;
        let cluster = ctx.u32(&row[4], "cluster_id")?;
        out.push((c, cluster));
        Ok(())
    })?;
    Ok(out)
}

pub fn write_clustered_checkins(
    checkins: &[CheckIn],
    labels: &[u32],
    path: impl AsRef<Path>,
    provenance: Option<&Provenance>,
) -> Result<()> {
    let path = path.as_ref();
    if checkins.len() != labels.len() {
        return Err(Error::Validation(format!(
            "{} check-ins but {} cluster labels",
            checkins.len(),
            labels.len()
        )));
    }
    let mut w = create_output(path, provenance)?;
    w.write_record(CLUSTERED_HEADER)?;
    for (c, l) in checkins.iter().zip(labels) {
        w.write_record([
            c.user_id.clone(),
            format_timestamp(&c.timestamp),
            c.lat.to_string(),
            c.lon.to_string(),
            l.to_string(),
        ])?;
    }
    finish(w, path)
}

/// Reads ground-truth home points `user_id,lat,lon`.
pub fn read_truth(path: impl AsRef<Path>) -> Result<Vec<(String, GeoPoint)>> {
    let path = path.as_ref();
    let mut out: Vec<(String, GeoPoint)> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    CsvInput::open(path, &TRUTH_HEADER)?.for_each_row(3, |row, ctx| {
        let user = ctx.user(&row[0])?;
        if !seen.insert(user.clone()) {
            return Err(ctx.err(format!("duplicate truth row for user {user}")));
        }
        out.push((user, ctx.point(&row[1], &row[2])?));
        Ok(())
    })?;
    Ok(out)
}

pub fn write_truth(
    truth: &[(String, GeoPoint)],
    path: impl AsRef<Path>,
    provenance: Option<&Provenance>,
) -> Result<()> {
    let path = path.as_ref();
    let mut w = create_output(path, provenance)?;
    w.write_record(TRUTH_HEADER)?;
    for (u, p) in truth {
        w.write_record([u.clone(), p.lat.to_string(), p.lon.to_string()])?;
    }
    finish(w, path)
}

/// Reads a location-record file and validates it into a [`Dataset`].
pub fn read_records(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let header = records_header();
    let mut records = Vec::new();
    CsvInput::open(path, &header)?.for_each_row(header.len(), |row, ctx| {
        let user_id = ctx.user(&row[0])?;
        let cluster_id = ctx.u32(&row[1], "cluster_id")?;
        let p = ctx.point(&row[2], &row[3])?;
        let mut features = [0.0; N_FEATURES];
        for (j, f) in features.iter_mut().enumerate() {
            *f = ctx.f64(&row[4 + j], FEATURE_NAMES[j])?;
        }
        let is_home = ctx.bool01(&row[4 + N_FEATURES], "is_home")?;
        records.push(LocationRecord {
            user_id,
            cluster_id,
            lat: p.lat,
            lon: p.lon,
            features,
            is_home,
        });
        Ok(())
    })?;
    Dataset::new(records)
}

pub fn write_records(
    dataset: &Dataset,
    path: impl AsRef<Path>,
    provenance: Option<&Provenance>,
) -> Result<()> {
    let path = path.as_ref();
    let mut w = create_output(path, provenance)?;
    w.write_record(records_header())?;
    for r in dataset.records() {
        let mut row = Vec::with_capacity(5 + N_FEATURES);
        row.push(r.user_id.clone());
        row.push(r.cluster_id.to_string());
        row.push(r.lat.to_string());
        row.push(r.lon.to_string());
        row.extend(r.features.iter().map(f64::to_string));
        row.push(if r.is_home { "1" } else { "0" }.to_string());
        w.write_record(&row)?;
    }
    finish(w, path)
}

pub fn write_predictions(
    predictions: &[HomePrediction],
    path: impl AsRef<Path>,
    provenance: Option<&Provenance>,
) -> Result<()> {
    let path = path.as_ref();
    let mut w = create_output(path, provenance)?;
    w.write_record(PREDICTION_HEADER)?;
    for p in predictions {
        let cluster = p.predicted_cluster.map_or(UNKNOWN_CLUSTER, i64::from);
        w.write_record([
            p.user_id.clone(),
            cluster.to_string(),
            p.dnnr_score.to_string(),
            p.dnnc_score.map(|s| s.to_string()).unwrap_or_default(),
            if p.reported { "1" } else { "0" }.to_string(),
        ])?;
    }
    finish(w, path)
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<HomePrediction>> {
    let path = path.as_ref();
    let mut out = Vec::new();
    CsvInput::open(path, &PREDICTION_HEADER)?.for_each_row(5, |row, ctx| {
        let user_id = ctx.user(&row[0])?;
        let cluster: i64 = row[1]
            .trim()
            .parse()
            .map_err(|_| ctx.err(format!("predicted_cluster_id: bad integer `{}`", &row[1])))?;
        let predicted_cluster = match cluster {
            UNKNOWN_CLUSTER => None,
            c => Some(
                u32::try_from(c)
                    .map_err(|_| ctx.err(format!("predicted_cluster_id out of range: {c}")))?,
            ),
        };
        let dnnr_score = ctx.f64(&row[2], "dnnr_score")?;
        let dnnc_score = match row[3].trim() {
            "" => None,
            s => Some(ctx.f64(s, "dnnc_score")?),
        };
        let reported = ctx.bool01(&row[4], "reported")?;
        if reported && predicted_cluster.is_none() {
            return Err(ctx.err("reported prediction without a cluster"));
        }
        out.push(HomePrediction {
            user_id,
            predicted_cluster,
            dnnr_score,
            dnnc_score,
            reported,
        });
        Ok(())
    })?;
    Ok(out)
}
