//! Chunked, order-preserving JSONL processing.
//!
//! Records stream through in fixed-size chunks: each chunk is mapped in
//! parallel, then written in input order, so memory stays bounded and
//! outputs are byte-stable regardless of worker scheduling. Per-record
//! failures go to the rejects stream and never abort the run.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use anyhow::Context;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

use reflex_core::perturb::RejectRecord;

const CHUNK: usize = 512;

#[derive(Debug, Default, Clone, Copy)]
pub struct StreamStats {
    pub ok: usize,
    pub rejected: usize,
}

/// Maps every JSONL record of `input` through `f`, writing successes to
/// `out` and failures to `rejects`, both in input order.
pub fn process_jsonl<I, O, F>(
    input: &Path,
    out: &mut impl Write,
    rejects: &mut impl Write,
    f: F,
) -> anyhow::Result<StreamStats>
where
    I: DeserializeOwned + Send,
    O: Serialize + Send,
    F: Fn(I) -> Result<O, String> + Sync,
{
    let file =
        File::open(input).with_context(|| format!("cannot open input {}", input.display()))?;
    let reader = BufReader::new(file);
    let mut stats = StreamStats::default();
    let mut chunk: Vec<(usize, String)> = Vec::with_capacity(CHUNK);
    let flush = |chunk: &mut Vec<(usize, String)>,
                 stats: &mut StreamStats,
                 out: &mut dyn Write,
                 rejects: &mut dyn Write|
     -> anyhow::Result<()> {
        let results: Vec<(usize, Result<String, String>)> = chunk
            .par_iter()
            .map(|(line_no, line)| {
                let result = serde_json::from_str::<I>(line)
                    .map_err(|e| format!("parse: {e}"))
                    .and_then(&f)
                    .map(|o| serde_json::to_string(&o).expect("output serializes"));
                (*line_no, result)
            })
            .collect();
        for (line_no, result) in results {
            match result {
                Ok(line) => {
                    out.write_all(line.as_bytes())?;
                    out.write_all(b"\n")?;
                    stats.ok += 1;
                }
                Err(reason) => {
                    let record = RejectRecord {
                        item_id: format!("line-{line_no}"),
                        reasons: vec![reason],
                    };
                    rejects.write_all(serde_json::to_string(&record)?.as_bytes())?;
                    rejects.write_all(b"\n")?;
                    stats.rejected += 1;
                }
            }
        }
        chunk.clear();
        Ok(())
    };

    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        chunk.push((idx + 1, line));
        if chunk.len() >= CHUNK {
            flush(&mut chunk, &mut stats, out, rejects)?;
        }
    }
    if !chunk.is_empty() {
        flush(&mut chunk, &mut stats, out, rejects)?;
    }
    Ok(stats)
}
