//! File plumbing shared by the shard, checkpoint and video writers.

use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use phydiff_core::data::shard::ByteSource;

use crate::error::{Error, Result};

/// Buffered reader that reports short reads as truncation.
pub struct FileSource<R> {
    inner: BufReader<R>,
}

impl<R: Read> FileSource<R> {
    pub fn new(r: R) -> Self {
        Self { inner: BufReader::with_capacity(1 << 16, r) }
    }
}

impl FileSource<File> {
    pub fn open(path: &Path) -> Result<Self> {
        Ok(Self::new(File::open(path).map_err(Error::io(path))?))
    }
}

impl<R: Read> ByteSource for FileSource<R> {
    fn fill(&mut self, buf: &mut [u8], what: &str) -> phydiff_core::Result<()> {
        self.inner.read_exact(buf).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => phydiff_core::Error::Truncated(format!("{what}: unexpected end of file")),
            _ => phydiff_core::Error::Malformed(format!("{what}: {e}")),
        })
    }

    fn at_end(&mut self) -> phydiff_core::Result<bool> {
        self.inner
            .fill_buf()
            .map(|b| b.is_empty())
            .map_err(|e| phydiff_core::Error::Malformed(format!("read error: {e}")))
    }
}

/// Sibling path used while a file is being written.
pub(crate) fn temp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".partial");
    path.with_file_name(name)
}

/// Writes `bytes` to a temporary sibling, syncs it, then renames over `path`,
/// so readers never observe a half-written file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = temp_path(path);
    let res = (|| {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()
    })();
    if let Err(e) = res {
        let _ = fs::remove_file(&tmp);
        return Err(Error::Io { path: tmp, source: e });
    }
    fs::rename(&tmp, path).map_err(Error::io(path))
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))
}
