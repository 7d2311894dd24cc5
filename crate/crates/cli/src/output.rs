use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::config::RunConfig;
use crate::CliError;

pub const TOOL: &str = "ewasr";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Wrapper written around every JSON artifact so it records how it was made.
#[derive(Serialize)]
pub struct Envelope<'a, T: Serialize> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'a str,
    pub config: &'a RunConfig,
    #[serde(flatten)]
    pub body: T,
}

impl<'a, T: Serialize> Envelope<'a, T> {
    pub fn new(command: &'a str, config: &'a RunConfig, body: T) -> Self {
        Self {
            tool: TOOL,
            version: VERSION,
            command,
            config,
            body,
        }
    }
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(ewasr::Error::from)?;
    text.push('\n');
    write_text(path, &text)
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

/// `# key: value` comment lines carrying version and config for text reports.
pub fn text_header(command: &str, config: &RunConfig) -> String {
    let cfg = serde_json::to_string(config).unwrap_or_default();
    format!("# {TOOL} {VERSION} {command}\n# config: {cfg}\n")
}

/// Prints to stdout, ignoring a closed pipe.
pub fn emit(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(text.as_bytes());
    let _ = out.flush();
}
