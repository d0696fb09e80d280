use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use tempfile::NamedTempFile;

pub const MANIFEST: &str = "manifest.json";

/// Everything needed to rerun a command and get the same bytes back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub engine_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Resolved training config in `key = value` form.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suite: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
    /// Paths relative to the output directory.
    #[serde(default)]
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            engine_version: segreward::VERSION.to_string(),
            seed: None,
            config: None,
            input: None,
            gt: None,
            suite: None,
            count: None,
            outputs: Vec::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("{} is not a run manifest", path.display()))
    }
}

/// An output directory whose files all appear atomically.
pub struct OutDir {
    root: PathBuf,
    written: Vec<String>,
}

/// A file being streamed into a temporary sibling; renamed into place by
/// [`OutDir::commit`].
pub struct Stream {
    name: String,
    writer: BufWriter<NamedTempFile>,
}

impl Stream {
    pub fn writer(&mut self) -> &mut BufWriter<NamedTempFile> {
        &mut self.writer
    }
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        Ok(Self {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn stream(&self, name: &str) -> Result<Stream> {
        let tmp = NamedTempFile::new_in(&self.root).with_context(|| format!("creating temp file in {}", self.root.display()))?;
        Ok(Stream {
            name: name.to_string(),
            writer: BufWriter::new(tmp),
        })
    }

    pub fn commit(&mut self, stream: Stream) -> Result<()> {
        let target = self.root.join(&stream.name);
        let tmp = stream
            .writer
            .into_inner()
            .map_err(|e| e.into_error())
            .with_context(|| format!("flushing {}", target.display()))?;
        tmp.persist(&target).with_context(|| format!("writing {}", target.display()))?;
        self.written.push(stream.name);
        Ok(())
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let mut s = self.stream(name)?;
        s.writer().write_all(bytes)?;
        self.commit(s)
    }

    /// Records a file written by someone else, such as a nested run.
    pub fn note(&mut self, name: String) {
        self.written.push(name);
    }

    /// Writes the manifest last, listing every file committed before it.
    pub fn finish(mut self, mut manifest: Manifest) -> Result<()> {
        manifest.outputs = std::mem::take(&mut self.written);
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        self.write(MANIFEST, text.as_bytes())
    }
}
