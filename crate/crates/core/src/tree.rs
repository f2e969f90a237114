//! In-memory file trees with a deterministic canonical encoding.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{Read, Write};

use flate2::read::DeflateDecoder;
use flate2::write::DeflateEncoder;
use flate2::Compression;
use thiserror::Error;

const TREE_MAGIC: &[u8] = b"TSTREE1\n";
const ARCHIVE_MAGIC: &[u8] = b"TSZIP1\n";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TreeError {
    #[error("invalid path {0:?}")]
    InvalidPath(String),
    #[error("not a directory: {0}")]
    NotADirectory(String),
    #[error("is a directory: {0}")]
    IsADirectory(String),
    #[error("no such file or directory: {0}")]
    NotFound(String),
    #[error("directory not empty: {0}")]
    NotEmpty(String),
    #[error("malformed tree encoding: {0}")]
    Malformed(String),
}

pub type Result<T, E = TreeError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Node {
    File(Vec<u8>),
    Symlink(String),
    Dir,
}

impl Node {
    fn kind(&self) -> u8 {
        match self {
            Node::Dir => b'd',
            Node::File(_) => b'f',
            Node::Symlink(_) => b'l',
        }
    }
}

/// Normalizes an absolute path: collapses separators, drops `.` segments,
/// strips a trailing slash. `..` is rejected.
pub fn normalize(path: &str) -> Result<String> {
    if !path.starts_with('/') {
        return Err(TreeError::InvalidPath(path.to_string()));
    }
    let mut out = String::with_capacity(path.len());
    for seg in path.split('/') {
        match seg {
            "" | "." => {}
            ".." => return Err(TreeError::InvalidPath(path.to_string())),
            s => {
                out.push('/');
                out.push_str(s);
            }
        }
    }
    if out.is_empty() {
        out.push('/');
    }
    Ok(out)
}

pub fn parent(path: &str) -> Option<&str> {
    if path == "/" {
        return None;
    }
    match path.rfind('/') {
        Some(0) => Some("/"),
        Some(i) => Some(&path[..i]),
        None => None,
    }
}

pub fn file_name(path: &str) -> &str {
    path.rsplit('/').next().unwrap_or(path)
}

/// Joins `rel` (absolute within its own tree) under `mount`.
pub fn rebase(mount: &str, rel: &str) -> String {
    if mount == "/" {
        rel.to_string()
    } else if rel == "/" {
        mount.to_string()
    } else {
        format!("{mount}{rel}")
    }
}

/// Strips `prefix` from `path`, returning the remainder as an absolute path.
pub fn strip_mount(prefix: &str, path: &str) -> Option<String> {
    if prefix == "/" {
        return Some(path.to_string());
    }
    let rest = path.strip_prefix(prefix)?;
    if rest.is_empty() {
        Some("/".into())
    } else if rest.starts_with('/') {
        Some(rest.to_string())
    } else {
        None
    }
}

/// Map of normalized absolute path to node. The root directory is implicit.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FileTree {
    nodes: BTreeMap<String, Node>,
}

impl FileTree {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn get(&self, path: &str) -> Option<&Node> {
        let p = normalize(path).ok()?;
        if p == "/" {
            return Some(&Node::Dir);
        }
        self.nodes.get(&p)
    }

    pub fn exists(&self, path: &str) -> bool {
        self.get(path).is_some()
    }

    pub fn is_dir(&self, path: &str) -> bool {
        matches!(self.get(path), Some(Node::Dir))
    }

    pub fn read_file(&self, path: &str) -> Option<&[u8]> {
        match self.get(path)? {
            Node::File(b) => Some(b),
            _ => None,
        }
    }

    pub fn read_text(&self, path: &str) -> Option<String> {
        self.read_file(path).map(|b| String::from_utf8_lossy(b).into_owned())
    }

    pub fn mkdir_p(&mut self, path: &str) -> Result<()> {
        let p = normalize(path)?;
        self.ensure_dir(&p)
    }

    fn ensure_dir(&mut self, p: &str) -> Result<()> {
        if p == "/" {
            return Ok(());
        }
        match self.nodes.get(p) {
            Some(Node::Dir) => return Ok(()),
            Some(_) => return Err(TreeError::NotADirectory(p.to_string())),
            None => {}
        }
        if let Some(parent) = parent(p) {
            self.ensure_dir(parent)?;
        }
        self.nodes.insert(p.to_string(), Node::Dir);
        Ok(())
    }

    fn insert_leaf(&mut self, path: &str, node: Node) -> Result<String> {
        let p = normalize(path)?;
        if p == "/" || matches!(self.nodes.get(&p), Some(Node::Dir)) {
            return Err(TreeError::IsADirectory(p));
        }
        if let Some(parent) = parent(&p) {
            self.ensure_dir(parent)?;
        }
        self.nodes.insert(p.clone(), node);
        Ok(p)
    }

    /// Creates or replaces a regular file, creating parent directories.
    pub fn write_file(&mut self, path: &str, bytes: impl Into<Vec<u8>>) -> Result<()> {
        self.insert_leaf(path, Node::File(bytes.into())).map(|_| ())
    }

    pub fn append_file(&mut self, path: &str, bytes: &[u8]) -> Result<()> {
        let p = normalize(path)?;
        match self.nodes.get_mut(&p) {
            Some(Node::File(existing)) => {
                existing.extend_from_slice(bytes);
                Ok(())
            }
            Some(Node::Dir) => Err(TreeError::IsADirectory(p)),
            Some(Node::Symlink(_)) => Err(TreeError::InvalidPath(p)),
            None => self.write_file(&p, bytes.to_vec()),
        }
    }

    pub fn symlink(&mut self, path: &str, target: &str) -> Result<()> {
        self.insert_leaf(path, Node::Symlink(target.to_string())).map(|_| ())
    }

    fn descendant_keys(&self, p: &str) -> Vec<String> {
        if p == "/" {
            return self.nodes.keys().cloned().collect();
        }
        let lo = format!("{p}/");
        let hi = format!("{p}0");
        self.nodes.range(lo..hi).map(|(k, _)| k.clone()).collect()
    }

    /// Removes a file, symlink, or empty directory.
    pub fn remove(&mut self, path: &str) -> Result<Node> {
        let p = normalize(path)?;
        if !self.nodes.contains_key(&p) {
            return Err(TreeError::NotFound(p));
        }
        if !self.descendant_keys(&p).is_empty() {
            return Err(TreeError::NotEmpty(p));
        }
        Ok(self.nodes.remove(&p).expect("checked above"))
    }

    /// Removes a path and everything beneath it.
    pub fn remove_all(&mut self, path: &str) -> Result<()> {
        let p = normalize(path)?;
        if p != "/" && !self.nodes.contains_key(&p) {
            return Err(TreeError::NotFound(p));
        }
        for k in self.descendant_keys(&p) {
            self.nodes.remove(&k);
        }
        self.nodes.remove(&p);
        Ok(())
    }

    /// Entries strictly beneath `path` in bytewise path order.
    pub fn descendants<'a>(&'a self, path: &str) -> impl Iterator<Item = (&'a str, &'a Node)> + 'a {
        let p = normalize(path).unwrap_or_else(|_| "\u{0}".into());
        let (lo, hi) = if p == "/" {
            ("/".to_string(), "0".to_string())
        } else {
            (format!("{p}/"), format!("{p}0"))
        };
        self.nodes.range(lo..hi).map(|(k, v)| (k.as_str(), v))
    }

    /// Direct children of a directory.
    pub fn children<'a>(&'a self, path: &str) -> impl Iterator<Item = (&'a str, &'a Node)> + 'a {
        let p = normalize(path).unwrap_or_default();
        let depth = if p == "/" { 1 } else { p.matches('/').count() + 1 };
        self.descendants(&p).filter(move |(k, _)| k.matches('/').count() == depth)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Node)> {
        self.nodes.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Copy of `path` and everything under it, keeping absolute paths.
    pub fn subtree(&self, path: &str) -> Result<FileTree> {
        let p = normalize(path)?;
        let mut out = FileTree::new();
        match self.get(&p) {
            None => return Err(TreeError::NotFound(p)),
            Some(Node::Dir) => {
                if p != "/" {
                    out.ensure_dir(&p)?;
                }
                for (k, v) in self.descendants(&p) {
                    out.nodes.insert(k.to_string(), v.clone());
                }
            }
            Some(leaf) => {
                out.insert_leaf(&p, leaf.clone())?;
            }
        }
        Ok(out)
    }

    /// Places every entry of `other` beneath `mount`.
    pub fn graft(&mut self, mount: &str, other: &FileTree) -> Result<()> {
        let m = normalize(mount)?;
        self.ensure_dir(&m)?;
        for (k, v) in other.iter() {
            let target = rebase(&m, k);
            if let Node::Dir = v {
                self.ensure_dir(&target)?;
            } else {
                self.insert_leaf(&target, v.clone())?;
            }
        }
        Ok(())
    }

    /// Extracts the part of the tree below `mount` re-rooted at `/`.
    pub fn detach(&self, mount: &str) -> Result<FileTree> {
        let m = normalize(mount)?;
        let mut out = FileTree::new();
        for (k, v) in self.descendants(&m) {
            let rel = strip_mount(&m, k).expect("descendant has prefix");
            out.nodes.insert(rel, v.clone());
        }
        Ok(out)
    }

    pub fn rename(&mut self, from: &str, to: &str) -> Result<()> {
        let src = normalize(from)?;
        let dst = normalize(to)?;
        let node = self.nodes.get(&src).cloned().ok_or_else(|| TreeError::NotFound(src.clone()))?;
        let moved: Vec<(String, Node)> = self
            .descendant_keys(&src)
            .into_iter()
            .map(|k| {
                let rel = strip_mount(&src, &k).expect("descendant has prefix");
                (rebase(&dst, &rel), self.nodes[&k].clone())
            })
            .collect();
        self.remove_all(&src)?;
        match node {
            Node::Dir => self.ensure_dir(&dst)?,
            leaf => {
                self.insert_leaf(&dst, leaf)?;
            }
        }
        self.nodes.extend(moved);
        Ok(())
    }

    /// `ls -RlA`-style listing of everything under `path`.
    pub fn listing(&self, path: &str) -> String {
        let mut out = String::new();
        for (k, v) in self.descendants(path) {
            match v {
                Node::Dir => writeln!(out, "d {k}"),
                Node::File(b) => writeln!(out, "- {} {k}", b.len()),
                Node::Symlink(t) => writeln!(out, "l {k} -> {t}"),
            }
            .expect("writing to a String cannot fail");
        }
        out
    }

    /// Sorted, length-prefixed records. Equal trees encode to equal bytes.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(TREE_MAGIC);
        out.extend_from_slice(&(self.nodes.len() as u64).to_le_bytes());
        for (path, node) in &self.nodes {
            out.push(node.kind());
            put_bytes(&mut out, path.as_bytes());
            match node {
                Node::Dir => put_bytes(&mut out, &[]),
                Node::File(b) => put_bytes(&mut out, b),
                Node::Symlink(t) => put_bytes(&mut out, t.as_bytes()),
            }
        }
        out
    }

    /// Decodes an encoding, ignoring any zero padding after the last record.
    pub fn decode(bytes: &[u8]) -> Result<FileTree> {
        let bad = |m: &str| TreeError::Malformed(m.to_string());
        let mut rest = bytes.strip_prefix(TREE_MAGIC).ok_or_else(|| bad("bad magic"))?;
        let count = u64::from_le_bytes(take(&mut rest, 8)?.try_into().unwrap());
        let mut nodes = BTreeMap::new();
        let mut prev: Option<String> = None;
        for _ in 0..count {
            let kind = take(&mut rest, 1)?[0];
            let path = String::from_utf8(take_bytes(&mut rest)?.to_vec()).map_err(|_| bad("non-utf8 path"))?;
            let payload = take_bytes(&mut rest)?;
            if normalize(&path)? != path || path == "/" {
                return Err(bad("non-canonical path"));
            }
            if prev.as_deref().is_some_and(|p| p >= path.as_str()) {
                return Err(bad("records out of order"));
            }
            let node = match kind {
                b'd' if payload.is_empty() => Node::Dir,
                b'f' => Node::File(payload.to_vec()),
                b'l' => Node::Symlink(String::from_utf8(payload.to_vec()).map_err(|_| bad("non-utf8 symlink"))?),
                _ => return Err(bad("unknown record kind")),
            };
            prev = Some(path.clone());
            nodes.insert(path, node);
        }
        if rest.iter().any(|&b| b != 0) {
            return Err(bad("trailing garbage"));
        }
        Ok(FileTree { nodes })
    }
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

fn take<'a>(rest: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if rest.len() < n {
        return Err(TreeError::Malformed("unexpected end of encoding".into()));
    }
    let (head, tail) = rest.split_at(n);
    *rest = tail;
    Ok(head)
}

fn take_bytes<'a>(rest: &mut &'a [u8]) -> Result<&'a [u8]> {
    let n = u32::from_le_bytes(take(rest, 4)?.try_into().unwrap()) as usize;
    take(rest, n)
}

/// Compressed archive of a subtree (what `zip -r` produces in the model).
pub fn pack(tree: &FileTree, root: &str) -> Result<Vec<u8>> {
    let sub = tree.subtree(root)?;
    let mut enc = DeflateEncoder::new(Vec::new(), Compression::default());
    enc.write_all(&sub.encode()).expect("in-memory write");
    let mut out = ARCHIVE_MAGIC.to_vec();
    out.extend(enc.finish().expect("in-memory write"));
    Ok(out)
}

pub fn unpack(bytes: &[u8]) -> Result<FileTree> {
    let body = bytes
        .strip_prefix(ARCHIVE_MAGIC)
        .ok_or_else(|| TreeError::Malformed("not an archive".into()))?;
    let mut raw = Vec::new();
    DeflateDecoder::new(body)
        .read_to_end(&mut raw)
        .map_err(|e| TreeError::Malformed(format!("archive: {e}")))?;
    FileTree::decode(&raw)
}
