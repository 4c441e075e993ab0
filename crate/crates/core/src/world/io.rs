//! On-disk formats for catalogs and event streams.
//!
//! Event files are newline-delimited JSON: a header object (schema name,
//! version, split, cutoff, user count, field list) followed by one event
//! object per line. Catalog files are tab-separated: a `#`-prefixed header
//! line carrying the schema version and vector dimensions, then one title per
//! line with each semantic vector written as comma-separated fixed-width
//! decimals.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Dataset, Event, SemanticDims, Split, Title, TitleCatalog, UserHistory};
use crate::error::{Error, Result};

pub const EVENTS_SCHEMA: &str = "genrec.events";
pub const CATALOG_SCHEMA: &str = "genrec.catalog";
pub const SCHEMA_VERSION: u32 = 1;

const EVENT_FIELDS: [&str; 7] =
    ["user_id", "item", "timestamp", "reward", "high_value", "context", "task"];

#[derive(Debug, Serialize, Deserialize)]
struct EventsHeader {
    schema: String,
    version: u32,
    split: Split,
    cutoff_time: i64,
    n_users: usize,
    fields: Vec<String>,
}

pub fn write_dataset<W: Write>(mut w: W, dataset: &Dataset) -> Result<()> {
    let header = EventsHeader {
        schema: EVENTS_SCHEMA.to_string(),
        version: SCHEMA_VERSION,
        split: dataset.split,
        cutoff_time: dataset.cutoff_time,
        n_users: dataset.histories.len(),
        fields: EVENT_FIELDS.iter().map(|s| s.to_string()).collect(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for h in &dataset.histories {
        for e in &h.events {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset<R: BufRead>(r: R, catalog: Arc<TitleCatalog>) -> Result<Dataset> {
    let mut lines = r.lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Format("empty events file".into()))??;
    let header: EventsHeader = serde_json::from_str(&first)
        .map_err(|e| Error::Format(format!("bad events header: {e}")))?;
    if header.schema != EVENTS_SCHEMA || header.version != SCHEMA_VERSION {
        return Err(Error::Format(format!(
            "unsupported events schema {} v{}",
            header.schema, header.version
        )));
    }
    let mut by_user: BTreeMap<u32, Vec<Event>> =
        (0..header.n_users as u32).map(|u| (u, Vec::new())).collect();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: Event = serde_json::from_str(&line)
            .map_err(|err| Error::Format(format!("events line {}: {err}", lineno + 2)))?;
        if e.item as usize >= catalog.len() {
            return Err(Error::Input(format!("event item {} outside catalog", e.item)));
        }
        by_user.entry(e.user_id).or_default().push(e);
    }
    let mut histories = Vec::with_capacity(by_user.len());
    for (user_id, events) in by_user {
        if events.windows(2).any(|w| w[0].timestamp >= w[1].timestamp) {
            return Err(Error::Input(format!("user {user_id}: timestamps not strictly increasing")));
        }
        histories.push(UserHistory { user_id, events });
    }
    Ok(Dataset { catalog, histories, cutoff_time: header.cutoff_time, split: header.split })
}

const DECIMALS: usize = 6;
const WIDTH: usize = 12;

fn fmt_vec(v: &[f64]) -> String {
    v.iter()
        .map(|x| format!("{:+0width$.prec$}", x, width = WIDTH, prec = DECIMALS))
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_vec(s: &str, dim: usize, what: &str) -> Result<Vec<f64>> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Format(format!("{what}: {e}")))?;
    if v.len() != dim {
        return Err(Error::Input(format!("{what}: expected {dim} values, got {}", v.len())));
    }
    Ok(v)
}

pub fn write_catalog<W: Write>(mut w: W, catalog: &TitleCatalog) -> Result<()> {
    writeln!(
        w,
        "#schema={CATALOG_SCHEMA} version={SCHEMA_VERSION} columns=id,launch_time,in_vocab,graph,lang,ann graph_dim={} lang_dim={} ann_dim={} decimals={DECIMALS} width={WIDTH}",
        catalog.dims.graph, catalog.dims.lang, catalog.dims.ann
    )?;
    for t in &catalog.titles {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}",
            t.id,
            t.launch_time,
            u8::from(t.in_vocab),
            fmt_vec(&t.graph_vec),
            fmt_vec(&t.lang_vec),
            fmt_vec(&t.ann_vec)
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a catalog file. Generator internals are not stored on disk, so the
/// result has empty latent tastes and no [`super::WorldTruth`].
pub fn read_catalog<R: BufRead>(r: R) -> Result<TitleCatalog> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty catalog file".into()))??;
    let header = header
        .strip_prefix('#')
        .ok_or_else(|| Error::Format("catalog header must start with '#'".into()))?;
    let kv: BTreeMap<&str, &str> = header
        .split_whitespace()
        .filter_map(|tok| tok.split_once('='))
        .collect();
    if kv.get("schema") != Some(&CATALOG_SCHEMA) {
        return Err(Error::Format("not a catalog file".into()));
    }
    if kv.get("version").and_then(|v| v.parse::<u32>().ok()) != Some(SCHEMA_VERSION) {
        return Err(Error::Format("unsupported catalog version".into()));
    }
    let dim = |k: &str| -> Result<usize> {
        kv.get(k)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Format(format!("catalog header lacks {k}")))
    };
    let dims = SemanticDims { graph: dim("graph_dim")?, lang: dim("lang_dim")?, ann: dim("ann_dim")? };

    let mut titles = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 6 {
            return Err(Error::Format(format!("catalog row has {} columns", cols.len())));
        }
        let id: u32 = cols[0].parse().map_err(|e| Error::Format(format!("id: {e}")))?;
        if id as usize != titles.len() {
            return Err(Error::Input(format!("catalog ids must be dense, got {id}")));
        }
        titles.push(Title {
            id,
            launch_time: cols[1].parse().map_err(|e| Error::Format(format!("launch_time: {e}")))?,
            in_vocab: match cols[2] {
                "1" => true,
                "0" => false,
                other => return Err(Error::Format(format!("in_vocab flag {other:?}"))),
            },
            graph_vec: parse_vec(cols[3], dims.graph, "graph")?,
            lang_vec: parse_vec(cols[4], dims.lang, "lang")?,
            ann_vec: parse_vec(cols[5], dims.ann, "ann")?,
            latent_taste: Vec::new(),
        });
    }
    Ok(TitleCatalog { titles, dims, truth: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{generate_dataset, WorldConfig};

    #[test]
    fn catalog_roundtrip_is_exact() {
        let cfg = WorldConfig { vocab_size: 80, n_users: 10, ..Default::default() };
        let pair = generate_dataset(&cfg, 5).unwrap();
        let mut buf = Vec::new();
        write_catalog(&mut buf, &pair.catalog).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("#schema=genrec.catalog version=1"));
        let back = read_catalog(buf.as_slice()).unwrap();
        for (a, b) in pair.catalog.titles.iter().zip(&back.titles) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.launch_time, b.launch_time);
            assert_eq!(a.in_vocab, b.in_vocab);
            for (x, y) in a.features().zip(b.features()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        // Every vector entry has the same printed width.
        let row = text.lines().nth(1).unwrap();
        let widths: Vec<usize> = row.split('\t').nth(3).unwrap().split(',').map(str::len).collect();
        assert!(widths.iter().all(|&w| w == WIDTH));
    }

    #[test]
    fn dataset_roundtrip_is_exact() {
        let cfg = WorldConfig { vocab_size: 80, n_users: 12, ..Default::default() };
        let pair = generate_dataset(&cfg, 6).unwrap();
        for ds in [&pair.train, &pair.validation] {
            let mut buf = Vec::new();
            write_dataset(&mut buf, ds).unwrap();
            let back = read_dataset(buf.as_slice(), Arc::clone(&pair.catalog)).unwrap();
            assert_eq!(back.histories, ds.histories);
            assert_eq!(back.cutoff_time, ds.cutoff_time);
            assert_eq!(back.split, ds.split);
        }
    }

    #[test]
    fn rejects_wrong_schema() {
        let cat = Arc::new(TitleCatalog {
            titles: vec![],
            dims: SemanticDims { graph: 1, lang: 1, ann: 1 },
            truth: None,
        });
        let bad = br#"{"schema":"other","version":1,"split":"train","cutoff_time":0,"n_users":0,"fields":[]}"#;
        assert!(matches!(read_dataset(&bad[..], cat), Err(Error::Format(_))));
        assert!(read_catalog(&b"#schema=genrec.catalog version=2 graph_dim=1 lang_dim=1 ann_dim=1\n"[..]).is_err());
    }
}
