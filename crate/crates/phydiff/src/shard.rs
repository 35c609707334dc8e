//! Shard files on disk; see `phydiff_core::data::shard` for the layout.

use std::fs::{self, File};
use std::io::{BufWriter, Seek, SeekFrom, Write};
use std::path::Path;

use phydiff_core::config::ModelConfig;
use phydiff_core::data::shard::{encode_record, ShardHeader, ShardReader};
use phydiff_core::data::TrainingSample;

use crate::error::{Error, Result};
use crate::io::{temp_path, FileSource};

/// Streams samples into a shard and returns the record count. The header
/// count is patched once the stream ends; the file appears under `path`
/// only after every record is written.
pub fn write_shard<I>(samples: I, cfg: &ModelConfig, path: &Path) -> Result<u64>
where
    I: IntoIterator<Item = phydiff_core::Result<TrainingSample>>,
{
    let tmp = temp_path(path);
    let file = File::create(&tmp).map_err(Error::io(&tmp))?;
    let res = write_records(file, samples, cfg, &tmp);
    match res {
        Ok(n) => {
            fs::rename(&tmp, path).map_err(Error::io(path))?;
            Ok(n)
        }
        Err(e) => {
            let _ = fs::remove_file(&tmp);
            Err(e)
        }
    }
}

fn write_records<I>(file: File, samples: I, cfg: &ModelConfig, tmp: &Path) -> Result<u64>
where
    I: IntoIterator<Item = phydiff_core::Result<TrainingSample>>,
{
    let mut w = BufWriter::new(file);
    w.write_all(&ShardHeader::new(cfg, 0).encode()).map_err(Error::io(tmp))?;
    let mut n = 0u64;
    let mut buf = Vec::new();
    for s in samples {
        let s = s?;
        s.check(cfg)?;
        buf.clear();
        encode_record(&mut buf, &s);
        w.write_all(&buf).map_err(Error::io(tmp))?;
        n += 1;
    }
    let mut file = w.into_inner().map_err(|e| Error::Io { path: tmp.to_path_buf(), source: e.into_error() })?;
    file.seek(SeekFrom::Start(0)).map_err(Error::io(tmp))?;
    file.write_all(&ShardHeader::new(cfg, n).encode()).map_err(Error::io(tmp))?;
    file.sync_all().map_err(Error::io(tmp))?;
    Ok(n)
}

/// Opens a shard and validates its header against `cfg`.
pub fn read_shard(path: &Path, cfg: &ModelConfig) -> Result<ShardReader<FileSource<File>>> {
    Ok(ShardReader::new(FileSource::open(path)?, cfg)?)
}
