use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

use crate::OutputFormat;

/// Provenance block written at the top of every artifact.
#[derive(Debug, Serialize)]
pub struct Header<'a, C: Serialize> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'a str,
    pub seed: u64,
    pub config: &'a C,
}

impl<'a, C: Serialize> Header<'a, C> {
    pub fn new(command: &'a str, seed: u64, config: &'a C) -> Self {
        Header {
            tool: "zest",
            version: zest_core::VERSION,
            command,
            seed,
            config,
        }
    }

    /// `#`-prefixed lines for CSV artifacts.
    pub fn comment_lines(&self) -> Result<String> {
        Ok(format!(
            "# {} {}\n# command: {}\n# seed: {}\n# config: {}\n",
            self.tool,
            self.version,
            self.command,
            self.seed,
            serde_json::to_string(self.config)?
        ))
    }
}

#[derive(Serialize)]
struct Document<'a, C: Serialize, R: Serialize> {
    header: &'a Header<'a, C>,
    result: &'a R,
}

/// Writes to a file, or stdout when no path is given.
pub fn sink(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("cannot create {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

/// Emit `result` in the requested format. `csv` renders the body for the
/// CSV case.
pub fn emit<C, R, F>(
    out: Option<&Path>,
    format: OutputFormat,
    header: &Header<'_, C>,
    result: &R,
    csv: F,
) -> Result<()>
where
    C: Serialize,
    R: Serialize,
    F: FnOnce(&mut dyn Write) -> Result<()>,
{
    let mut w = sink(out)?;
    match format {
        OutputFormat::Json => {
            serde_json::to_writer_pretty(&mut w, &Document { header, result })?;
            writeln!(w)?;
        }
        OutputFormat::Csv => {
            w.write_all(header.comment_lines()?.as_bytes())?;
            csv(&mut w)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Format a float for CSV; empty when absent.
pub fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn join<T: ToString>(xs: &[T], sep: &str) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(sep)
}
