use std::io::Read;

use chrono::{DateTime, NaiveDate, NaiveDateTime};

use super::{DatasetManifest, Series};
use crate::error::Error;
use crate::topology::{Coord, StGraph};

/// Node series plus graph, before windowing.
#[derive(Debug, Clone)]
pub struct RawDataset {
    pub name: String,
    /// Seconds since the epoch, or the raw number for numeric timestamps.
    pub timestamps: Vec<f64>,
    pub series: Series,
    pub graph: StGraph,
    pub labels: Option<Vec<usize>>,
}

fn read(path: &std::path::Path) -> Result<String, Error> {
    let mut s = String::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_string(&mut s))
        .map_err(|e| Error::io(path, e))?;
    Ok(s)
}

pub fn load_dataset(m: &DatasetManifest) -> Result<RawDataset, Error> {
    let edges = parse_edge_list(&read(&m.resolve(&m.edges))?)?;
    let (timestamps, series) = parse_signal_csv(&read(&m.resolve(&m.signal))?, m.features)?;
    let max_node = edges.iter().map(|&(s, d)| s.max(d) + 1).max().unwrap_or(0);
    if max_node > series.nodes {
        return Err(Error::Ingest(format!(
            "edge list references node {} but the signal file has {} node columns",
            max_node - 1,
            series.nodes
        )));
    }
    if edges.is_empty() {
        return Err(Error::Ingest("edge list is empty".into()));
    }
    let mut graph = StGraph::new(series.nodes, edges)?;
    if let Some(p) = &m.coords {
        let coords = parse_coords(&read(&m.resolve(p))?)?;
        if coords.len() != series.nodes {
            return Err(Error::Ingest(format!(
                "coordinate file has {} nodes but the signal file has {}",
                coords.len(),
                series.nodes
            )));
        }
        graph = graph.with_coords(coords)?;
    }
    let labels = match &m.labels {
        Some(p) => Some(parse_labels(&read(&m.resolve(p))?, series.len)?),
        None => None,
    };
    Ok(RawDataset { name: m.name.clone(), timestamps, series, graph, labels })
}

fn parse_timestamp(s: &str) -> Option<f64> {
    let s = s.trim();
    if let Ok(v) = s.parse::<f64>() {
        return v.is_finite().then_some(v);
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.timestamp() as f64);
    }
    for fmt in ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M", "%Y/%m/%d %H:%M"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(dt.and_utc().timestamp() as f64);
        }
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .map(|d| d.and_hms_opt(0, 0, 0).unwrap().and_utc().timestamp() as f64)
}

fn is_missing(s: &str) -> bool {
    matches!(s.trim().to_ascii_lowercase().as_str(), "" | "nan" | "na" | "null")
}

/// Parse a signal CSV with a header row. Columns after the timestamp are
/// grouped into nodes of `features` consecutive columns. Missing cells are
/// linearly interpolated in time, with the nearest value held at the ends.
pub fn parse_signal_csv(text: &str, features: usize) -> Result<(Vec<f64>, Series), Error> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(text.as_bytes());
    let width = rdr.headers().map_err(|e| Error::Ingest(format!("header: {e}")))?.len();
    if width < 2 {
        return Err(Error::Ingest("line 1: need a timestamp column and at least one value column".into()));
    }
    let cols = width - 1;
    if cols % features != 0 {
        return Err(Error::Ingest(format!(
            "line 1: {cols} value columns is not a multiple of {features} features per node"
        )));
    }
    let mut stamps = Vec::new();
    let mut cells = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Ingest(e.to_string()))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != width {
            return Err(Error::Ingest(format!("line {line}: expected {width} fields, found {}", rec.len())));
        }
        let ts = parse_timestamp(&rec[0])
            .ok_or_else(|| Error::Ingest(format!("line {line}: unparseable timestamp {:?}", &rec[0])))?;
        if let Some(&prev) = stamps.last() {
            if ts <= prev {
                return Err(Error::Ingest(format!("line {line}: timestamps must increase strictly")));
            }
        }
        stamps.push(ts);
        for field in rec.iter().skip(1) {
            let v = if is_missing(field) {
                f64::NAN
            } else {
                field
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Ingest(format!("line {line}: bad value {field:?}")))?
            };
            cells.push(v);
        }
    }
    let len = stamps.len();
    if len == 0 {
        return Err(Error::Ingest("signal file has no data rows".into()));
    }
    let series = Series { len, nodes: cols / features, features, values: cells };
    Ok((stamps, interpolate(series)?))
}

fn interpolate(mut s: Series) -> Result<Series, Error> {
    let stride = s.nodes * s.features;
    for c in 0..stride {
        let known: Vec<usize> = (0..s.len).filter(|&t| !s.values[t * stride + c].is_nan()).collect();
        let Some((&first, &last)) = known.first().zip(known.last()) else {
            return Err(Error::Ingest(format!("value column {} has no observations", c + 1)));
        };
        for t in 0..first {
            s.values[t * stride + c] = s.values[first * stride + c];
        }
        for t in last + 1..s.len {
            s.values[t * stride + c] = s.values[last * stride + c];
        }
        for pair in known.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            let (va, vb) = (s.values[a * stride + c], s.values[b * stride + c]);
            for t in a + 1..b {
                let w = (t - a) as f64 / (b - a) as f64;
                s.values[t * stride + c] = va + w * (vb - va);
            }
        }
    }
    Ok(s)
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines().enumerate().filter_map(|(i, l)| {
        let l = l.split('#').next().unwrap_or("").trim();
        (!l.is_empty()).then(|| (i + 1, l.split(|c: char| c == ',' || c.is_whitespace()).filter(|s| !s.is_empty()).collect()))
    })
}

pub fn parse_edge_list(text: &str) -> Result<Vec<(usize, usize)>, Error> {
    data_lines(text)
        .map(|(line, f)| match f.as_slice() {
            [a, b] => a
                .parse()
                .ok()
                .zip(b.parse().ok())
                .ok_or_else(|| Error::Ingest(format!("edge list line {line}: expected two node ids"))),
            _ => Err(Error::Ingest(format!("edge list line {line}: expected `src dst`"))),
        })
        .collect()
}

pub fn parse_coords(text: &str) -> Result<Vec<Coord>, Error> {
    data_lines(text)
        .map(|(line, f)| match f.as_slice() {
            [x, y] => x
                .parse()
                .ok()
                .zip(y.parse().ok())
                .map(|(x, y)| Coord { x, y })
                .ok_or_else(|| Error::Ingest(format!("coordinate line {line}: expected two numbers"))),
            _ => Err(Error::Ingest(format!("coordinate line {line}: expected `x y`"))),
        })
        .collect()
}

fn parse_labels(text: &str, len: usize) -> Result<Vec<usize>, Error> {
    let mut out = Vec::with_capacity(len);
    for (line, f) in data_lines(text) {
        if line == 1 && f.first().is_some_and(|s| s.parse::<f64>().is_err()) {
            continue;
        }
        let label = f
            .last()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Ingest(format!("label line {line}: expected an integer label")))?;
        out.push(label);
    }
    if out.len() != len {
        return Err(Error::Ingest(format!("label file has {} rows, signal has {len}", out.len())));
    }
    Ok(out)
}
