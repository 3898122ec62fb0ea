//! CSV and JSON formats for matrices, servers and reports.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::net::IpAddr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::evaluate::HoldoutReport;
use super::geo::GeoCoordinate;
use super::matrix::{check_unique_ids, LatencyMatrix, ServerMeta};
use super::EstimatorError;
use crate::tier::MinOwd;

fn csv_err(e: csv::Error) -> EstimatorError {
    EstimatorError::Format(e.to_string())
}

fn parse_cell(s: &str, what: &str) -> Result<Option<f64>, EstimatorError> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(None);
    }
    s.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .map(Some)
        .ok_or_else(|| EstimatorError::Format(format!("{what}: '{s}' is not a number")))
}

fn fmt_value(v: f64) -> String {
    // Shortest round-trip representation.
    format!("{v:?}")
}

#[derive(Deserialize)]
struct ServerRow {
    id: String,
    address: IpAddr,
    lat: f64,
    lon: f64,
}

/// Server list with columns `id,address,lat,lon`.
pub fn read_servers_csv(r: impl Read) -> Result<Vec<ServerMeta>, EstimatorError> {
    let mut out = Vec::new();
    for row in csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r).deserialize() {
        let row: ServerRow = row.map_err(csv_err)?;
        out.push(ServerMeta {
            id: row.id,
            address: row.address,
            coordinate: GeoCoordinate::new(row.lat, row.lon)?,
        });
    }
    check_unique_ids(&out)?;
    Ok(out)
}

pub fn write_servers_csv(servers: &[ServerMeta], w: impl Write) -> Result<(), EstimatorError> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(["id", "address", "lat", "lon"]).map_err(csv_err)?;
    for s in servers {
        w.write_record([
            s.id.clone(),
            s.address.to_string(),
            fmt_value(s.coordinate.lat),
            fmt_value(s.coordinate.lon),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Square matrix CSV: header `id,<id>...`, then one row per node with its id
/// first. Empty cells are unobserved.
pub fn read_matrix_csv(r: impl Read) -> Result<(Vec<String>, DMatrix<Option<f64>>), EstimatorError> {
    let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let ids: Vec<String> = rd.headers().map_err(csv_err)?.iter().skip(1).map(str::to_string).collect();
    let s = ids.len();
    let mut out = DMatrix::from_element(s, s, None);
    let mut rows = 0;
    for rec in rd.records() {
        let rec = rec.map_err(csv_err)?;
        if rows >= s {
            return Err(EstimatorError::Format(format!("more than {s} rows")));
        }
        if rec.get(0) != Some(ids[rows].as_str()) {
            return Err(EstimatorError::Format(format!(
                "row {} is labeled '{}', expected '{}'",
                rows + 1,
                rec.get(0).unwrap_or(""),
                ids[rows]
            )));
        }
        for j in 0..s {
            out[(rows, j)] = parse_cell(rec.get(j + 1).unwrap_or(""), &format!("({}, {})", ids[rows], ids[j]))?;
        }
        rows += 1;
    }
    if rows != s {
        return Err(EstimatorError::Format(format!("expected {s} rows, got {rows}")));
    }
    Ok((ids, out))
}

pub fn write_matrix_csv(
    ids: &[String],
    values: &DMatrix<f64>,
    mask: Option<&DMatrix<bool>>,
    w: impl Write,
) -> Result<(), EstimatorError> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(std::iter::once("id").chain(ids.iter().map(String::as_str)))
        .map_err(csv_err)?;
    for (i, id) in ids.iter().enumerate() {
        let cells = (0..ids.len()).map(|j| match mask {
            Some(mk) if !mk[(i, j)] => String::new(),
            _ => fmt_value(values[(i, j)]),
        });
        w.write_record(std::iter::once(id.clone()).chain(cells)).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Server-server half-RTT matrix, reordered to follow `servers`.
pub fn read_a_rtt_csv(r: impl Read, servers: &[ServerMeta]) -> Result<DMatrix<Option<f64>>, EstimatorError> {
    let (ids, raw) = read_matrix_csv(r)?;
    let pos: BTreeMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let index: Vec<Option<usize>> = servers.iter().map(|s| pos.get(s.id.as_str()).copied()).collect();
    for id in &ids {
        if !servers.iter().any(|s| &s.id == id) {
            return Err(EstimatorError::Format(format!("a_rtt names unknown server '{id}'")));
        }
    }
    let m = servers.len();
    Ok(DMatrix::from_fn(m, m, |i, j| match (index[i], index[j]) {
        _ if i == j => Some(0.0),
        (Some(a), Some(b)) => raw[(a, b)],
        _ => None,
    }))
}

#[derive(Serialize, Deserialize)]
struct MatrixJson {
    m: usize,
    n: usize,
    ids: Vec<String>,
    entries: Vec<Vec<f64>>,
    mask: Vec<Vec<bool>>,
}

pub fn write_matrix_json(x: &LatencyMatrix, w: impl Write) -> Result<(), EstimatorError> {
    let s = x.size();
    let doc = MatrixJson {
        m: x.m,
        n: x.n,
        ids: x.ids.clone(),
        entries: (0..s).map(|i| (0..s).map(|j| x.values[(i, j)]).collect()).collect(),
        mask: (0..s).map(|i| (0..s).map(|j| x.mask[(i, j)]).collect()).collect(),
    };
    serde_json::to_writer_pretty(w, &doc).map_err(|e| EstimatorError::Format(e.to_string()))
}

pub fn read_matrix_json(r: impl Read) -> Result<LatencyMatrix, EstimatorError> {
    let doc: MatrixJson = serde_json::from_reader(r).map_err(|e| EstimatorError::Format(e.to_string()))?;
    let s = doc.m + doc.n;
    let square = |rows: usize, ok: bool| rows == s && ok;
    if doc.ids.len() != s
        || !square(doc.entries.len(), doc.entries.iter().all(|r| r.len() == s))
        || !square(doc.mask.len(), doc.mask.iter().all(|r| r.len() == s))
    {
        return Err(EstimatorError::Format(format!("matrix JSON is not {s}x{s}")));
    }
    let mut x = LatencyMatrix::empty(doc.m, doc.ids);
    for i in 0..s {
        for j in 0..s {
            if doc.mask[i][j] {
                x.set(i, j, doc.entries[i][j]);
            } else {
                x.unset(i, j);
            }
        }
    }
    Ok(x)
}

#[derive(Serialize, Deserialize)]
struct MinOwdRow {
    client: IpAddr,
    server: IpAddr,
    c2s_ms: Option<f64>,
    s2c_ms: Option<f64>,
}

/// Columns `client,server,c2s_ms,s2c_ms`; a missing direction is an empty cell.
pub fn read_min_owd_csv(r: impl Read) -> Result<BTreeMap<(IpAddr, IpAddr), MinOwd>, EstimatorError> {
    let mut out = BTreeMap::new();
    for row in csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r).deserialize() {
        let row: MinOwdRow = row.map_err(csv_err)?;
        out.insert(
            (row.client, row.server),
            MinOwd {
                c2s_ms: row.c2s_ms,
                s2c_ms: row.s2c_ms,
            },
        );
    }
    Ok(out)
}

pub fn write_min_owd_csv(owds: &BTreeMap<(IpAddr, IpAddr), MinOwd>, w: impl Write) -> Result<(), EstimatorError> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(["client", "server", "c2s_ms", "s2c_ms"]).map_err(csv_err)?;
    let opt = |v: Option<f64>| v.map(fmt_value).unwrap_or_default();
    for ((c, s), o) in owds {
        w.write_record([c.to_string(), s.to_string(), opt(o.c2s_ms), opt(o.s2c_ms)])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_errors_csv(report: &HoldoutReport, w: impl Write) -> Result<(), EstimatorError> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(["row", "col", "truth", "predicted", "rel_error"]).map_err(csv_err)?;
    for e in &report.entries {
        w.write_record([
            e.row.clone(),
            e.col.clone(),
            fmt_value(e.truth),
            fmt_value(e.predicted),
            fmt_value(e.rel_error),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_cdf_csv(cdf: &[(f64, f64)], w: impl Write) -> Result<(), EstimatorError> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(["error", "cumulative_fraction"]).map_err(csv_err)?;
    for (e, f) in cdf {
        w.write_record([fmt_value(*e), fmt_value(*f)]).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_csv_roundtrip() {
        let ids: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let mut x = LatencyMatrix::empty(2, ids.clone());
        x.set(0, 1, 1.25);
        x.set(1, 0, 0.1 + 0.2);
        let mut buf = Vec::new();
        write_matrix_csv(&ids, &x.values, Some(&x.mask), &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("id,a,b,c\na,0.0,1.25,\n"), "{text}");
        let (rids, m) = read_matrix_csv(&buf[..]).unwrap();
        assert_eq!(rids, ids);
        assert_eq!(m[(1, 0)], Some(0.1 + 0.2));
        assert_eq!(m[(2, 0)], None);
    }

    #[test]
    fn matrix_csv_rejects_garbage() {
        assert!(read_matrix_csv(&b"id,a,b\na,0,x\nb,1,0\n"[..]).is_err());
        assert!(read_matrix_csv(&b"id,a,b\nb,0,1\na,1,0\n"[..]).is_err());
        assert!(read_matrix_csv(&b"id,a,b\na,0,1\n"[..]).is_err());
    }

    #[test]
    fn matrix_json_roundtrip() {
        let mut x = LatencyMatrix::empty(1, vec!["s".into(), "c".into()]);
        x.set(0, 1, 3.5);
        let mut buf = Vec::new();
        write_matrix_json(&x, &mut buf).unwrap();
        assert_eq!(read_matrix_json(&buf[..]).unwrap(), x);
    }

    #[test]
    fn servers_csv() {
        let text = "id,address,lat,lon\ns1,192.0.2.1,40.0,-74.0\ns2,2001:db8::1,51.5,-0.1\n";
        let s = read_servers_csv(text.as_bytes()).unwrap();
        assert_eq!(s.len(), 2);
        let mut buf = Vec::new();
        write_servers_csv(&s, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), text);
        let dup = "id,address,lat,lon\ns1,192.0.2.1,40,-74\ns1,192.0.2.2,41,-74\n";
        assert!(read_servers_csv(dup.as_bytes()).is_err());
    }

    #[test]
    fn a_rtt_follows_server_order() {
        let servers = read_servers_csv(
            "id,address,lat,lon\ns1,192.0.2.1,40,-74\ns2,192.0.2.2,41,-75\ns3,192.0.2.3,42,-76\n".as_bytes(),
        )
        .unwrap();
        let csv = "id,s2,s1\ns2,0,7.5\ns1,7.5,0\n";
        let a = read_a_rtt_csv(csv.as_bytes(), &servers).unwrap();
        assert_eq!(a[(0, 1)], Some(7.5));
        assert_eq!(a[(0, 2)], None);
        assert_eq!(a[(2, 2)], Some(0.0));
    }

    #[test]
    fn min_owd_roundtrip() {
        let mut m = BTreeMap::new();
        let c: IpAddr = "10.0.0.1".parse().unwrap();
        let s: IpAddr = "192.0.2.1".parse().unwrap();
        m.insert((c, s), MinOwd { c2s_ms: Some(1.5), s2c_ms: None });
        let mut buf = Vec::new();
        write_min_owd_csv(&m, &mut buf).unwrap();
        assert_eq!(read_min_owd_csv(&buf[..]).unwrap(), m);
    }
}
