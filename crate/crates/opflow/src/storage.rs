//! Artifact storage: the five-method client contract and a filesystem backend.

use std::fs;
use std::io::{self, Read};
use std::path::{Path, PathBuf};

use md5::{Digest, Md5};

#[derive(Debug, thiserror::Error)]
pub enum StorageError {
    #[error("source path {0} does not exist")]
    SourceMissing(PathBuf),
    #[error("invalid artifact key `{0}`")]
    KeyInvalid(String),
    #[error("no artifact under key `{0}`")]
    KeyMissing(String),
    #[error("key `{0}` is a directory, not a file")]
    NotAFile(String),
    #[error("operation not supported by this backend")]
    Unsupported,
    #[error("storage I/O: {0}")]
    Io(#[from] io::Error),
}

/// Artifact storage backend.
///
/// Keys are `/`-separated with no empty, `.` or `..` segments. A key names a
/// file or a directory tree.
pub trait StorageClient: Send + Sync {
    fn upload(&self, path: &Path, key: &str) -> Result<String, StorageError>;

    fn download(&self, key: &str, path: &Path) -> Result<(), StorageError>;

    /// File keys starting with `prefix`, sorted.
    fn list(&self, prefix: &str) -> Result<Vec<String>, StorageError>;

    fn copy(&self, src: &str, dst: &str) -> Result<String, StorageError>;

    /// Lowercase hex MD5 of a file key. Optional capability.
    fn get_md5(&self, _key: &str) -> Result<String, StorageError> {
        Err(StorageError::Unsupported)
    }

    /// Immediate child names under a directory key. Numeric names sort
    /// numerically when every child is numeric, otherwise lexicographically.
    fn children(&self, key: &str) -> Result<Vec<String>, StorageError> {
        validate_key(key)?;
        let prefix = format!("{key}/");
        let mut names: Vec<String> = Vec::new();
        for k in self.list(&prefix)? {
            let rest = &k[prefix.len()..];
            names.push(rest.split('/').next().unwrap_or(rest).to_string());
        }
        names.dedup();
        if names.iter().all(|n| n.parse::<u64>().is_ok()) {
            names.sort_by_key(|n| n.parse::<u64>().unwrap_or(u64::MAX));
        } else {
            names.sort();
        }
        Ok(names)
    }
}

const STAGING: &str = ".staging";

pub fn validate_key(key: &str) -> Result<(), StorageError> {
    let ok = !key.is_empty()
        && key
            .split('/')
            .all(|seg| !seg.is_empty() && seg != "." && seg != "..")
        && key.split('/').next() != Some(STAGING);
    if ok {
        Ok(())
    } else {
        Err(StorageError::KeyInvalid(key.to_string()))
    }
}

/// Filesystem backend: `<root>/<key>`, trees mirrored verbatim.
#[derive(Debug, Clone)]
pub struct FsStorage {
    root: PathBuf,
}

impl FsStorage {
    pub fn new(root: impl Into<PathBuf>) -> io::Result<Self> {
        let root = root.into();
        fs::create_dir_all(root.join(STAGING))?;
        Ok(FsStorage { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path_of(&self, key: &str) -> Result<PathBuf, StorageError> {
        validate_key(key)?;
        Ok(self.root.join(key))
    }

    fn staging_path(&self) -> PathBuf {
        self.root
            .join(STAGING)
            .join(uuid::Uuid::new_v4().simple().to_string())
    }

    /// Moves a staged tree to `dst`, replacing whatever was there.
    fn publish(&self, staged: &Path, dst: &Path) -> io::Result<()> {
        if let Some(parent) = dst.parent() {
            fs::create_dir_all(parent)?;
        }
        match fs::symlink_metadata(dst) {
            Ok(m) if m.is_dir() => {
                let old = self.staging_path();
                fs::rename(dst, &old)?;
                fs::rename(staged, dst)?;
                fs::remove_dir_all(&old)
            }
            // rename(2) replaces files atomically.
            _ => fs::rename(staged, dst),
        }
    }

    fn stage_and_publish(&self, src: &Path, dst: &Path) -> Result<(), StorageError> {
        let staged = self.staging_path();
        if let Err(e) = copy_tree(src, &staged) {
            let _ = remove_any(&staged);
            return Err(e.into());
        }
        self.publish(&staged, dst).map_err(|e| {
            let _ = remove_any(&staged);
            e.into()
        })
    }
}

fn remove_any(path: &Path) -> io::Result<()> {
    match fs::symlink_metadata(path) {
        Ok(m) if m.is_dir() => fs::remove_dir_all(path),
        Ok(_) => fs::remove_file(path),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(e),
    }
}

/// Recursive copy following symlinks at the source.
pub fn copy_tree(src: &Path, dst: &Path) -> io::Result<()> {
    if fs::metadata(src)?.is_dir() {
        fs::create_dir_all(dst)?;
        for entry in fs::read_dir(src)? {
            let entry = entry?;
            copy_tree(&entry.path(), &dst.join(entry.file_name()))?;
        }
        Ok(())
    } else {
        if let Some(parent) = dst.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::copy(src, dst).map(|_| ())
    }
}

fn collect_files(dir: &Path, rel: &str, out: &mut Vec<String>) -> io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if rel.is_empty() && name == STAGING {
            continue;
        }
        let key = if rel.is_empty() {
            name
        } else {
            format!("{rel}/{name}")
        };
        if entry.file_type()?.is_dir() {
            collect_files(&entry.path(), &key, out)?;
        } else {
            out.push(key);
        }
    }
    Ok(())
}

impl StorageClient for FsStorage {
    fn upload(&self, path: &Path, key: &str) -> Result<String, StorageError> {
        let dst = self.path_of(key)?;
        if fs::metadata(path).is_err() {
            return Err(StorageError::SourceMissing(path.to_path_buf()));
        }
        self.stage_and_publish(path, &dst)?;
        Ok(key.to_string())
    }

    fn download(&self, key: &str, path: &Path) -> Result<(), StorageError> {
        let src = self.path_of(key)?;
        if fs::symlink_metadata(&src).is_err() {
            return Err(StorageError::KeyMissing(key.to_string()));
        }
        copy_tree(&src, path)?;
        Ok(())
    }

    fn list(&self, prefix: &str) -> Result<Vec<String>, StorageError> {
        // Walk only the deepest directory the prefix pins down.
        let base = match prefix.rfind('/') {
            Some(i) => &prefix[..i],
            None => "",
        };
        if !base.is_empty() {
            validate_key(base)?;
        }
        let dir = self.root.join(base);
        let mut out = Vec::new();
        match fs::metadata(&dir) {
            Ok(m) if m.is_dir() => collect_files(&dir, base, &mut out)?,
            _ => return Ok(out),
        }
        out.retain(|k| k.starts_with(prefix));
        out.sort();
        Ok(out)
    }

    fn copy(&self, src: &str, dst: &str) -> Result<String, StorageError> {
        let from = self.path_of(src)?;
        let to = self.path_of(dst)?;
        if fs::symlink_metadata(&from).is_err() {
            return Err(StorageError::KeyMissing(src.to_string()));
        }
        self.stage_and_publish(&from, &to)?;
        Ok(dst.to_string())
    }

    fn get_md5(&self, key: &str) -> Result<String, StorageError> {
        let path = self.path_of(key)?;
        let meta = fs::metadata(&path).map_err(|_| StorageError::KeyMissing(key.to_string()))?;
        if meta.is_dir() {
            return Err(StorageError::NotAFile(key.to_string()));
        }
        let mut file = fs::File::open(&path)?;
        let mut hasher = Md5::new();
        let mut buf = [0u8; 64 * 1024];
        loop {
            let n = file.read(&mut buf)?;
            if n == 0 {
                break;
            }
            hasher.update(&buf[..n]);
        }
        Ok(hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect())
    }
}
