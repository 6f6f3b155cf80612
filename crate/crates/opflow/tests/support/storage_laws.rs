//! The storage contract, checked against any client over a generated tree.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;

use opflow::storage::{StorageClient, StorageError};

/// Relative file path -> contents.
pub type Tree = BTreeMap<String, Vec<u8>>;

pub fn write_tree(root: &Path, tree: &Tree) {
    fs::create_dir_all(root).unwrap();
    for (rel, bytes) in tree {
        let p = root.join(rel);
        fs::create_dir_all(p.parent().unwrap()).unwrap();
        fs::write(p, bytes).unwrap();
    }
}

pub fn read_tree(root: &Path) -> Tree {
    fn walk(dir: &Path, rel: &str, out: &mut Tree) {
        for e in fs::read_dir(dir).unwrap() {
            let e = e.unwrap();
            let name = e.file_name().to_string_lossy().into_owned();
            let r = if rel.is_empty() { name } else { format!("{rel}/{name}") };
            if e.file_type().unwrap().is_dir() {
                walk(&e.path(), &r, out);
            } else {
                out.insert(r, fs::read(e.path()).unwrap());
            }
        }
    }
    let mut out = Tree::new();
    walk(root, "", &mut out);
    out
}

/// MD5 as computed by the system tool.
pub fn md5sum(path: &Path) -> String {
    let out = Command::new("md5sum").arg(path).output().expect("md5sum");
    String::from_utf8(out.stdout).unwrap().split_whitespace().next().unwrap().to_string()
}

/// Checks the five laws; returns the first violation.
///
/// 1. upload then download reproduces the tree byte for byte;
/// 2. list returns exactly the uploaded leaves under the key;
/// 3. copy yields an identical tree and leaves the source alone;
/// 4. get_md5 of every leaf agrees with `md5sum`;
/// 5. re-uploading replaces the previous content, with no stale leaves.
pub fn check_laws(store: &dyn StorageClient, scratch: &Path, key: &str, tree: &Tree) -> Result<(), String> {
    let src = scratch.join("src");
    let _ = fs::remove_dir_all(&src);
    write_tree(&src, tree);

    store.upload(&src, key).map_err(|e| format!("upload: {e}"))?;
    let out = scratch.join("out");
    let _ = fs::remove_dir_all(&out);
    store.download(key, &out).map_err(|e| format!("download: {e}"))?;
    if fs::metadata(&out).is_ok() && read_tree(&out) != *tree {
        return Err("law 1: download differs from upload".into());
    }

    let want: Vec<String> = tree.keys().map(|r| format!("{key}/{r}")).collect();
    let listed = store.list(&format!("{key}/")).map_err(|e| format!("list: {e}"))?;
    if listed != want {
        return Err(format!("law 2: list {listed:?} != {want:?}"));
    }

    let copy_key = format!("{key}-copy");
    store.copy(key, &copy_key).map_err(|e| format!("copy: {e}"))?;
    let copied = scratch.join("copied");
    let _ = fs::remove_dir_all(&copied);
    store.download(&copy_key, &copied).map_err(|e| format!("download copy: {e}"))?;
    let again = scratch.join("again");
    let _ = fs::remove_dir_all(&again);
    store.download(key, &again).map_err(|e| format!("download after copy: {e}"))?;
    if read_tree(&copied) != *tree || read_tree(&again) != *tree {
        return Err("law 3: copy changed content".into());
    }

    for rel in tree.keys() {
        let ours = store.get_md5(&format!("{key}/{rel}")).map_err(|e| format!("md5: {e}"))?;
        let theirs = md5sum(&src.join(rel));
        if ours != theirs {
            return Err(format!("law 4: md5 of {rel}: {ours} != {theirs}"));
        }
    }
    if !matches!(store.get_md5(&format!("{key}/no-such-leaf")), Err(StorageError::KeyMissing(_))) {
        return Err("law 4: md5 of a missing key must fail".into());
    }

    let mut smaller = tree.clone();
    if let Some(first) = smaller.keys().next().cloned() {
        smaller.remove(&first);
    }
    smaller.insert("fresh".into(), b"new".to_vec());
    let _ = fs::remove_dir_all(&src);
    write_tree(&src, &smaller);
    store.upload(&src, key).map_err(|e| format!("re-upload: {e}"))?;
    let want: Vec<String> = smaller.keys().map(|r| format!("{key}/{r}")).collect();
    let listed = store.list(&format!("{key}/")).map_err(|e| format!("list: {e}"))?;
    if listed != want {
        return Err(format!("law 5: stale leaves after re-upload: {listed:?}"));
    }
    Ok(())
}

pub fn rfc1321_vectors(store: &dyn StorageClient, scratch: &Path) -> Result<(), String> {
    let vectors = [
        ("", "d41d8cd98f00b204e9800998ecf8427e"),
        ("a", "0cc175b9c0f1b6a831c399e269772661"),
        ("abc", "900150983cd24fb0d6963f7d28e17f72"),
        ("message digest", "f96b697d7cb7938d525a2f31aaf161d0"),
        ("abcdefghijklmnopqrstuvwxyz", "c3fcd3d76192e4007dfb496cca67e13b"),
    ];
    for (i, (text, want)) in vectors.iter().enumerate() {
        let p = scratch.join(format!("vec{i}"));
        fs::write(&p, text).unwrap();
        let key = format!("rfc/{i}");
        store.upload(&p, &key).map_err(|e| e.to_string())?;
        let got = store.get_md5(&key).map_err(|e| e.to_string())?;
        if got != *want {
            return Err(format!("md5({text:?}) = {got}, want {want}"));
        }
    }
    Ok(())
}
