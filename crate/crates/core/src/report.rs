//! Result files that carry their own provenance: every CSV starts with
//! `#`-comment lines echoing the seed and the config, every JSON report wraps
//! its payload next to the same echo.

use std::fs;
use std::path::Path;

use serde::Serialize;
use serde_json::{json, Value};

use crate::Result;

/// The seed and config a result file was produced from.
#[derive(Clone, Debug, PartialEq)]
pub struct Echo {
    pub seed: u64,
    pub config: Value,
}

impl Echo {
    pub fn new(seed: u64, config: &impl Serialize) -> Result<Self> {
        Ok(Self {
            seed,
            config: serde_json::to_value(config)?,
        })
    }

    /// `# seed: ..` and `# config: ..` lines.
    pub fn csv_preamble(&self) -> Result<String> {
        Ok(format!(
            "# seed: {}\n# config: {}\n",
            self.seed,
            serde_json::to_string(&self.config)?
        ))
    }
}

/// Writes `body` (produced by `fill`) after the preamble.
pub fn write_csv(
    path: impl AsRef<Path>,
    echo: &Echo,
    fill: impl FnOnce(&mut Vec<u8>) -> Result<()>,
) -> Result<()> {
    let mut buf = echo.csv_preamble()?.into_bytes();
    fill(&mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

/// Writes `{"seed": .., "config": .., "result": ..}` as pretty JSON.
pub fn write_json(path: impl AsRef<Path>, echo: &Echo, result: &impl Serialize) -> Result<()> {
    let doc = json!({
        "seed": echo.seed,
        "config": echo.config,
        "result": serde_json::to_value(result)?,
    });
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Strips the `#` preamble from CSV text.
pub fn csv_body(text: &str) -> String {
    text.lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| format!("{l}\n"))
        .collect()
}
