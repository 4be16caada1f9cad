//! Output transport to directories: each archive lands as `<name>.gz`.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use caf_core::portal::{OutputSink, Unreachable};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

/// Local path named by a destination: `file:///abs`, `file:rel` or a bare
/// path. Other schemes are not served by this sink.
pub fn destination_path(destination: &str) -> Option<PathBuf> {
    if let Some(rest) = destination.strip_prefix("file://") {
        return Some(PathBuf::from(rest));
    }
    if let Some(rest) = destination.strip_prefix("file:") {
        return Some(PathBuf::from(rest));
    }
    if destination.contains("://") || destination.is_empty() {
        return None;
    }
    Some(PathBuf::from(destination))
}

/// Writes gzip-wrapped archives into the destination directory, creating
/// it if needed.
#[derive(Clone, Debug, Default)]
pub struct DirSink;

impl DirSink {
    fn dir(destination: &str) -> Result<PathBuf, Unreachable> {
        let dir = destination_path(destination).ok_or_else(|| Unreachable(format!("{destination}: unsupported scheme")))?;
        fs::create_dir_all(&dir).map_err(|e| Unreachable(format!("{destination}: {e}")))?;
        Ok(dir)
    }
}

impl OutputSink for DirSink {
    fn check(&mut self, destination: &str) -> Result<(), Unreachable> {
        Self::dir(destination).map(|_| ())
    }

    fn put(&mut self, destination: &str, name: &str, archive: &[u8]) -> Result<(), Unreachable> {
        let path = Self::dir(destination)?.join(format!("{name}.gz"));
        let write = || -> io::Result<()> {
            let mut gz = GzEncoder::new(fs::File::create(&path)?, Compression::default());
            gz.write_all(archive)?;
            gz.finish()?.sync_all()
        };
        write().map_err(|e| Unreachable(format!("{}: {e}", path.display())))
    }
}

pub fn gzip(bytes: &[u8]) -> Vec<u8> {
    let mut gz = GzEncoder::new(Vec::new(), Compression::default());
    gz.write_all(bytes).expect("in-memory write");
    gz.finish().expect("in-memory write")
}

pub fn gunzip(bytes: &[u8]) -> io::Result<Vec<u8>> {
    let mut out = Vec::new();
    GzDecoder::new(bytes).read_to_end(&mut out)?;
    Ok(out)
}

/// Read a delivered archive back to CAF1 bytes.
pub fn read_delivered(path: &Path) -> io::Result<Vec<u8>> {
    gunzip(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use caf_core::archive::{pack, unpack, Entry};

    #[test]
    fn destinations() {
        assert_eq!(destination_path("file:///tmp/x"), Some(PathBuf::from("/tmp/x")));
        assert_eq!(destination_path("out/dir"), Some(PathBuf::from("out/dir")));
        assert_eq!(destination_path("gsiftp://host/x"), None);
    }

    #[test]
    fn archives_round_trip_through_gzip() {
        let dir = tempfile::tempdir().unwrap();
        let dest = format!("file://{}/out", dir.path().display());
        let (bytes, _) = pack(&[Entry::new("section.log", 0o644, "done\n")]).unwrap();
        let mut sink = DirSink;
        sink.put(&dest, "job1.section0.caf", &bytes).unwrap();
        let path = dir.path().join("out/job1.section0.caf.gz");
        let raw = fs::read(&path).unwrap();
        assert_eq!(&raw[..2], &[0x1f, 0x8b]);
        assert_eq!(read_delivered(&path).unwrap(), bytes);
        assert_eq!(unpack(&read_delivered(&path).unwrap()).unwrap()[0].data, b"done\n");
    }

    #[test]
    fn unwritable_destination_is_unreachable() {
        let file = tempfile::NamedTempFile::new().unwrap();
        let dest = format!("{}/sub", file.path().display());
        assert!(DirSink.check(&dest).is_err());
        assert!(DirSink.check("srm://se.example/x").is_err());
    }
}
