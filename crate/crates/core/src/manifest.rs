//! Line-oriented sample manifest: a versioned header line followed by one
//! JSON record per sample, ordered by `(epoch, index)`.

use std::io::Write;

use crate::error::{Error, Result};
use crate::pipeline::SampleRecord;

pub const MANIFEST_VERSION: u32 = 1;

pub fn header() -> String {
    format!("# trackaug-manifest v{MANIFEST_VERSION}")
}

pub fn write_manifest<W: Write>(out: &mut W, records: &[SampleRecord]) -> std::io::Result<()> {
    writeln!(out, "{}", header())?;
    for r in records {
        serde_json::to_writer(&mut *out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn parse_manifest(text: &str) -> Result<Vec<SampleRecord>> {
    let mut lines = text.lines();
    let first = lines.next().unwrap_or_default();
    if first != header() {
        return Err(Error::Config(format!(
            "manifest header `{first}` does not match `{}`",
            header()
        )));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: "manifest".into(),
                line: i + 2,
                field: String::new(),
                message: e.to_string(),
            })
        })
        .collect()
}
