//! SHA3-512 hash manifests over file trees, in `rhash` listing format.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::Serialize;
use sha3::{Digest, Sha3_512};
use thiserror::Error;

use crate::tree::{normalize, FileTree, Node};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ManifestError {
    #[error("hash root does not exist: {0}")]
    MissingRoot(String),
    #[error("manifest line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

/// One tree root to hash. Non-recursive roots cover only direct children,
/// like `rhash --sha3-512 /usr/bin/*`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct HashRoot {
    pub path: String,
    pub recursive: bool,
}

impl HashRoot {
    pub fn recursive(path: &str) -> Self {
        HashRoot { path: path.to_string(), recursive: true }
    }

    pub fn shallow(path: &str) -> Self {
        HashRoot { path: path.to_string(), recursive: false }
    }

    pub fn command(&self) -> String {
        if self.recursive {
            format!("rhash -r --sha3-512 {}", self.path)
        } else {
            format!("rhash --sha3-512 {}/*", self.path)
        }
    }
}

/// The fixed root list hashed by the sealing scripts.
pub fn default_hash_roots() -> Vec<HashRoot> {
    let mut roots: Vec<HashRoot> = [
        "/boot", "/etc", "/home", "/lib", "/lib64", "/lost+found", "/media", "/mnt", "/opt", "/root", "/sbin",
        "/srv", "/tmp",
    ]
    .iter()
    .map(|p| HashRoot::recursive(p))
    .collect();
    // /usr/bin holds the X11 -> . link, so it is hashed one level deep.
    roots.push(HashRoot::shallow("/usr/bin"));
    roots.extend(
        ["/usr/games", "/usr/include", "/usr/lib", "/usr/local", "/usr/sbin", "/usr/share", "/usr/src", "/var"]
            .iter()
            .map(|p| HashRoot::recursive(p)),
    );
    roots
}

pub fn sha3_hex(bytes: &[u8]) -> String {
    hex::encode(Sha3_512::digest(bytes))
}

/// Digest of a single node. Symlinks are hashed by their target string.
pub fn node_digest(node: &Node) -> Option<String> {
    match node {
        Node::File(b) => Some(sha3_hex(b)),
        Node::Symlink(t) => Some(sha3_hex(t.as_bytes())),
        Node::Dir => None,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Manifest {
    entries: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, path: &str) -> Option<&str> {
        self.entries.get(path).map(String::as_str)
    }

    pub fn insert(&mut self, path: &str, digest: &str) {
        self.entries.insert(path.to_string(), digest.to_string());
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn extend(&mut self, other: Manifest) {
        self.entries.extend(other.entries);
    }

    /// Entries under `root`, restricted as `HashRoot` would select them.
    pub fn restrict(&self, root: &HashRoot) -> Manifest {
        let entries = self
            .entries
            .iter()
            .filter(|(p, _)| under_root(p, root))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        Manifest { entries }
    }

    /// Parses `<128-hex>  <path>` lines.
    pub fn parse(text: &str) -> Result<Manifest, ManifestError> {
        let mut m = Manifest::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (digest, path) = parse_line(line).map_err(|reason| ManifestError::Malformed { line: i + 1, reason })?;
            m.entries.insert(path.to_string(), digest.to_string());
        }
        Ok(m)
    }
}

pub(crate) fn parse_line(line: &str) -> Result<(&str, &str), String> {
    let (digest, path) = line.split_once("  ").ok_or("missing two-space separator")?;
    if digest.len() != 128 || !digest.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b)) {
        return Err("digest is not 128 lowercase hex characters".into());
    }
    if !path.starts_with('/') {
        return Err("path is not absolute".into());
    }
    Ok((digest, path))
}

impl fmt::Display for Manifest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (path, digest) in &self.entries {
            writeln!(f, "{digest}  {path}")?;
        }
        Ok(())
    }
}

fn under_root(path: &str, root: &HashRoot) -> bool {
    let Some(rest) = path.strip_prefix(root.path.as_str()) else { return false };
    let Some(rest) = rest.strip_prefix('/') else { return false };
    root.recursive || !rest.contains('/')
}

/// Hashes every regular file and symlink under each root.
pub fn compute_manifest(tree: &FileTree, roots: &[HashRoot]) -> Result<Manifest, ManifestError> {
    let mut m = Manifest::new();
    for root in roots {
        m.extend(compute_root(tree, root)?);
    }
    Ok(m)
}

pub fn compute_root(tree: &FileTree, root: &HashRoot) -> Result<Manifest, ManifestError> {
    let p = normalize(&root.path).map_err(|_| ManifestError::MissingRoot(root.path.clone()))?;
    if !tree.is_dir(&p) {
        return Err(ManifestError::MissingRoot(root.path.clone()));
    }
    let mut m = Manifest::new();
    let nodes: Box<dyn Iterator<Item = (&str, &Node)>> =
        if root.recursive { Box::new(tree.descendants(&p)) } else { Box::new(tree.children(&p)) };
    for (path, node) in nodes {
        if let Some(d) = node_digest(node) {
            m.entries.insert(path.to_string(), d);
        }
    }
    Ok(m)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ManifestDiff {
    pub added: BTreeSet<String>,
    pub removed: BTreeSet<String>,
    pub changed: BTreeSet<String>,
}

impl ManifestDiff {
    pub fn is_empty(&self) -> bool {
        self.added.is_empty() && self.removed.is_empty() && self.changed.is_empty()
    }
}

pub fn diff_manifests(pre: &Manifest, post: &Manifest) -> ManifestDiff {
    let mut d = ManifestDiff::default();
    for (path, digest) in &pre.entries {
        match post.entries.get(path) {
            None => {
                d.removed.insert(path.clone());
            }
            Some(other) if other != digest => {
                d.changed.insert(path.clone());
            }
            Some(_) => {}
        }
    }
    for path in post.entries.keys() {
        if !pre.entries.contains_key(path) {
            d.added.insert(path.clone());
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tree() -> FileTree {
        let mut t = FileTree::new();
        t.write_file("/etc/a", "same").unwrap();
        t.write_file("/etc/b", "same").unwrap();
        t.write_file("/usr/bin/ls", "ls").unwrap();
        t.write_file("/usr/bin/sub/deep", "deep").unwrap();
        t.symlink("/usr/bin/X11", ".").unwrap();
        t
    }

    #[test]
    fn sha3_512_known_answer() {
        assert_eq!(
            sha3_hex(b""),
            "a69f73cca23a9ac5c8b567dc185a756e97c982164fe25859e0d1dcc1475c80a6\
             15b2123af1f5f94c11e3e9402c3ac558f500199d95b6d3e301758586281dcd26"
        );
        assert_eq!(
            sha3_hex(b"abc"),
            "b751850b1a57168a5693cd924b6b096e08f621827444f70d884f5d0240d2712e\
             10e116e9192af3c91a7ec57647e3934057340b4cf408d5a56592f8274eec53f0"
        );
    }

    #[test]
    fn empty_tree_empty_manifest() {
        let mut t = FileTree::new();
        t.mkdir_p("/etc").unwrap();
        assert!(compute_manifest(&t, &[HashRoot::recursive("/etc")]).unwrap().is_empty());
    }

    #[test]
    fn identical_content_identical_digest() {
        let m = compute_manifest(&tree(), &[HashRoot::recursive("/etc")]).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.get("/etc/a"), m.get("/etc/b"));
    }

    #[test]
    fn symlink_cycle_hashed_by_target() {
        let m = compute_manifest(&tree(), &[HashRoot::recursive("/usr/bin")]).unwrap();
        assert_eq!(m.get("/usr/bin/X11"), Some(sha3_hex(b".").as_str()));
        assert_eq!(m.len(), 3);
    }

    #[test]
    fn shallow_root_skips_subdirectories() {
        let m = compute_manifest(&tree(), &[HashRoot::shallow("/usr/bin")]).unwrap();
        let paths: Vec<_> = m.iter().map(|(p, _)| p).collect();
        assert_eq!(paths, vec!["/usr/bin/X11", "/usr/bin/ls"]);
        assert_eq!(m, compute_manifest(&tree(), &[HashRoot::recursive("/usr/bin")]).unwrap().restrict(&HashRoot::shallow("/usr/bin")));
    }

    #[test]
    fn missing_root_is_an_error() {
        assert_eq!(
            compute_manifest(&tree(), &[HashRoot::recursive("/srv")]).unwrap_err(),
            ManifestError::MissingRoot("/srv".into())
        );
    }

    #[test]
    fn render_parse_round_trip() {
        let m = compute_manifest(&tree(), &[HashRoot::recursive("/")]).unwrap();
        let text = m.to_string();
        assert!(text.lines().all(|l| l.len() > 130 && &l[128..130] == "  "));
        assert_eq!(Manifest::parse(&text).unwrap(), m);
        assert!(matches!(Manifest::parse("abc  /x"), Err(ManifestError::Malformed { line: 1, .. })));
    }

    #[test]
    fn diff_classifies_paths() {
        let roots = [HashRoot::recursive("/")];
        let before = compute_manifest(&tree(), &roots).unwrap();
        assert!(diff_manifests(&before, &before).is_empty());

        let mut t = tree();
        t.write_file("/etc/new", "x").unwrap();
        let mut bytes = t.read_file("/usr/bin/ls").unwrap().to_vec();
        bytes[0] ^= 1;
        t.write_file("/usr/bin/ls", bytes.clone()).unwrap();
        t.remove("/etc/b").unwrap();
        let after = compute_manifest(&t, &roots).unwrap();

        // independent recomputation of the modified file's digest
        assert_eq!(after.get("/usr/bin/ls"), Some(hex::encode(Sha3_512::digest(&bytes)).as_str()));
        let d = diff_manifests(&before, &after);
        assert_eq!(d.added.iter().collect::<Vec<_>>(), vec!["/etc/new"]);
        assert_eq!(d.removed.iter().collect::<Vec<_>>(), vec!["/etc/b"]);
        assert_eq!(d.changed.iter().collect::<Vec<_>>(), vec!["/usr/bin/ls"]);
    }
}
