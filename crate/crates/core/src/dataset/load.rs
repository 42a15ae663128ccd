use std::path::Path;

use chrono::{DateTime, NaiveDateTime};

use super::{CheckinRecord, DatasetError, Result};

/// Header names of the six required columns, plus the field delimiter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnMapping {
    pub user: String,
    pub poi: String,
    pub category: String,
    pub timestamp: String,
    pub lat: String,
    pub lon: String,
    pub delimiter: u8,
}

impl Default for ColumnMapping {
    fn default() -> Self {
        ColumnMapping {
            user: "user".into(),
            poi: "poi".into(),
            category: "category".into(),
            timestamp: "timestamp".into(),
            lat: "lat".into(),
            lon: "lon".into(),
            delimiter: b',',
        }
    }
}

impl ColumnMapping {
    /// Tab-separated variant of the default mapping.
    pub fn tsv() -> Self {
        ColumnMapping {
            delimiter: b'\t',
            ..Default::default()
        }
    }
}

/// A rejected input row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowError {
    /// 1-based line number in the file (the header is line 1).
    pub line: u64,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct LoadReport {
    pub records: Vec<CheckinRecord>,
    pub rejects: Vec<RowError>,
}

/// Parses a check-in timestamp into UTC seconds.
///
/// Accepts integer epoch seconds, RFC 3339, `YYYY-MM-DD HH:MM:SS` (taken as
/// UTC) and the Foursquare dump format `Tue Apr 03 18:00:09 +0000 2012`.
pub fn parse_timestamp(raw: &str) -> Option<i64> {
    let raw = raw.trim();
    if let Ok(secs) = raw.parse::<i64>() {
        return Some(secs);
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(raw) {
        return Some(dt.timestamp());
    }
    if let Ok(dt) = DateTime::parse_from_str(raw, "%a %b %d %H:%M:%S %z %Y") {
        return Some(dt.timestamp());
    }
    for fmt in ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(raw, fmt) {
            return Some(dt.and_utc().timestamp());
        }
    }
    None
}

/// Loads check-ins from a delimited text file with a header row.
///
/// Malformed rows are collected in [`LoadReport::rejects`] with their line
/// number; only a missing file or a missing column aborts the load.
pub fn load_checkins(path: &Path, mapping: &ColumnMapping) -> Result<LoadReport> {
    let file = std::fs::File::open(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(mapping.delimiter)
        .flexible(true)
        .from_reader(file);
    let headers = reader.headers()?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| DatasetError::MissingColumn(name.to_string()))
    };
    let idx = [
        column(&mapping.user)?,
        column(&mapping.poi)?,
        column(&mapping.category)?,
        column(&mapping.timestamp)?,
        column(&mapping.lat)?,
        column(&mapping.lon)?,
    ];

    let mut report = LoadReport::default();
    for (row, result) in reader.records().enumerate() {
        let line = row as u64 + 2;
        let fields = match result {
            Ok(f) => f,
            Err(e) => {
                report.rejects.push(RowError {
                    line,
                    message: e.to_string(),
                });
                continue;
            }
        };
        match parse_row(&fields, &idx) {
            Ok(r) => report.records.push(r),
            Err(message) => report.rejects.push(RowError { line, message }),
        }
    }
    Ok(report)
}

fn parse_row(fields: &csv::StringRecord, idx: &[usize; 6]) -> std::result::Result<CheckinRecord, String> {
    let get = |i: usize| fields.get(idx[i]).map(str::trim).ok_or("short row".to_string());
    let user = get(0)?;
    let poi = get(1)?;
    if user.is_empty() || poi.is_empty() {
        return Err("empty user or poi".into());
    }
    let ts_raw = get(3)?;
    let timestamp = parse_timestamp(ts_raw).ok_or_else(|| format!("unparseable timestamp `{ts_raw}`"))?;
    let lat_raw = get(4)?;
    let lat: f64 = lat_raw
        .parse()
        .map_err(|_| format!("unparseable latitude `{lat_raw}`"))?;
    let lon_raw = get(5)?;
    let lon: f64 = lon_raw
        .parse()
        .map_err(|_| format!("unparseable longitude `{lon_raw}`"))?;
    let record = CheckinRecord {
        user: user.to_string(),
        poi: poi.to_string(),
        category: get(2)?.to_string(),
        timestamp,
        lat,
        lon,
    };
    record.validate().map_err(|e| e.to_string())?;
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn three_good_rows() {
        let f = write_tmp(
            "user,poi,category,timestamp,lat,lon\n\
             u1,p1,Cafe,1333476009,40.71,-74.0\n\
             u1,p2,Bar,2012-04-03 19:00:00,40.72,-74.01\n\
             u2,p1,Cafe,Tue Apr 03 18:00:09 +0000 2012,40.71,-74.0\n",
        );
        let report = load_checkins(f.path(), &ColumnMapping::default()).unwrap();
        assert_eq!(report.records.len(), 3);
        assert!(report.rejects.is_empty());
        assert_eq!(report.records[2].timestamp, 1333476009);
    }

    #[test]
    fn out_of_range_latitude_rejected_with_line() {
        let f = write_tmp(
            "user,poi,category,timestamp,lat,lon\n\
             u1,p1,Cafe,100,40.0,-74.0\n\
             u1,p2,Cafe,200,91,-74.0\n",
        );
        let report = load_checkins(f.path(), &ColumnMapping::default()).unwrap();
        assert_eq!(report.records.len(), 1);
        assert_eq!(report.rejects.len(), 1);
        assert_eq!(report.rejects[0].line, 3);
        assert!(report.rejects[0].message.contains("latitude"));
    }

    #[test]
    fn bad_timestamp_rejected() {
        let f = write_tmp("user,poi,category,timestamp,lat,lon\nu1,p1,Cafe,yesterday,1,1\n");
        let report = load_checkins(f.path(), &ColumnMapping::default()).unwrap();
        assert_eq!(report.rejects.len(), 1);
        assert!(report.rejects[0].message.contains("timestamp"));
    }

    #[test]
    fn custom_columns_and_tabs() {
        let f = write_tmp("uid\tvenue\tcat\tutc\tlatitude\tlongitude\nu\tv\tc\t5\t1.5\t2.5\n");
        let mapping = ColumnMapping {
            user: "uid".into(),
            poi: "venue".into(),
            category: "cat".into(),
            timestamp: "utc".into(),
            lat: "latitude".into(),
            lon: "longitude".into(),
            delimiter: b'\t',
        };
        let report = load_checkins(f.path(), &mapping).unwrap();
        assert_eq!(report.records[0].poi, "v");
        assert_eq!(report.records[0].lon, 2.5);
    }

    #[test]
    fn missing_file_and_column() {
        assert!(matches!(
            load_checkins(Path::new("/nonexistent/x.csv"), &ColumnMapping::default()),
            Err(DatasetError::Io { .. })
        ));
        let f = write_tmp("user,poi,timestamp,lat,lon\n");
        assert!(matches!(
            load_checkins(f.path(), &ColumnMapping::default()),
            Err(DatasetError::MissingColumn(c)) if c == "category"
        ));
    }
}
