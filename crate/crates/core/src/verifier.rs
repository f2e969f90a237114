//! Third-party verification of a sealed server from its published bundle
//! and the pre-seal disk images.
//!
//! Each published log is parsed back into commands and typed evidence
//! (keyslot dumps, account listings, ssh status, firewall, hash
//! manifests). The evidence is then checked against what the sealing plans
//! promise, and the manifests and archives are compared with the pre-seal
//! images under an explicit allowlist.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use globset::{GlobBuilder, GlobSet, GlobSetBuilder};
use serde::Serialize;
use thiserror::Error;

use crate::escrow::SHARE_MAGIC;
use crate::machine::{parse_accounts, DiskImagePair, Policy, Ruleset, SealingStep, UserAccount, KEYFILE_PATH, SSH_PACKAGE_FILES};
use crate::manifest::{compute_root, diff_manifests, HashRoot, Manifest};
use crate::sealing::{Plans, SealingPlan, ServerConfig, ServerImages, Stage, GUEST_BOOT_MOUNT, HOST_LOG, VM_LOG};
use crate::tree::{self, FileTree};
use crate::volume::KEYSLOT_COUNT;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum VerifyError {
    #[error("malformed log at line {line}: {reason}")]
    MalformedLog { line: usize, reason: String },
    #[error("malformed bundle: {0}")]
    MalformedBundle(String),
    #[error("unusable pre-seal image: {0}")]
    PreImage(String),
    #[error("bad policy line {line}: {reason}")]
    BadPolicy { line: usize, reason: String },
}

pub type Result<T, E = VerifyError> = std::result::Result<T, E>;

/// One `+ command` line and the output that followed it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LoggedCommand {
    pub line: usize,
    pub command: String,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct KeyslotDump {
    pub device: String,
    /// Position of the dump among the log's commands.
    pub position: usize,
    pub slots: [bool; KEYSLOT_COUNT],
    pub mk_digest: String,
}

/// Facts extracted from command outputs. The latest occurrence wins.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LogEvidence {
    /// Devices with a `luksErase` command, with the command position.
    pub erased: Vec<(String, usize)>,
    pub dumps: Vec<KeyslotDump>,
    pub passwd: Option<String>,
    pub shadow: Option<String>,
    /// `Some(true)` once `systemctl status sshd` reported the unit missing.
    pub ssh_absent: Option<bool>,
    pub firewall_v4: Option<Ruleset>,
    pub hosts_allow_absent: Option<bool>,
    pub manifests: Vec<(HashRoot, Manifest)>,
    /// Outputs that looked like evidence but could not be parsed.
    pub problems: Vec<String>,
}

impl LogEvidence {
    pub fn accounts(&self) -> Option<Vec<UserAccount>> {
        Some(parse_accounts(self.passwd.as_deref()?, self.shadow.as_deref()))
    }

    pub fn combined_manifest(&self) -> Manifest {
        let mut m = Manifest::new();
        for (_, part) in &self.manifests {
            m.extend(part.clone());
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParsedLog {
    pub records: Vec<LoggedCommand>,
    pub evidence: LogEvidence,
}

impl ParsedLog {
    pub fn commands(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.command.as_str())
    }

    pub fn render(&self) -> String {
        self.records
            .iter()
            .map(|r| {
                let mut s = format!("+ {}\n{}", r.command, r.output);
                if !r.output.is_empty() && !r.output.ends_with('\n') {
                    s.push('\n');
                }
                s
            })
            .collect()
    }
}

fn parse_hash_command(cmd: &str) -> Option<HashRoot> {
    if let Some(p) = cmd.strip_prefix("rhash -r --sha3-512 ") {
        return Some(HashRoot::recursive(p));
    }
    cmd.strip_prefix("rhash --sha3-512 ")?.strip_suffix("/*").map(HashRoot::shallow)
}

fn parse_dump(device: &str, position: usize, output: &str) -> Option<KeyslotDump> {
    let mut slots = [false; KEYSLOT_COUNT];
    let mut seen = 0;
    let mut mk_digest = None;
    for line in output.lines() {
        if let Some(d) = line.strip_prefix("MK digest:") {
            mk_digest = Some(d.trim().to_string());
        } else if let Some(rest) = line.strip_prefix("Key Slot ") {
            let (idx, state) = rest.split_once(": ")?;
            let idx: usize = idx.parse().ok()?;
            *slots.get_mut(idx)? = match state.trim() {
                "ACTIVE" => true,
                "EMPTY" => false,
                _ => return None,
            };
            seen += 1;
        }
    }
    if seen != KEYSLOT_COUNT {
        return None;
    }
    Some(KeyslotDump { device: device.to_string(), position, slots, mk_digest: mk_digest? })
}

/// Parses a `set -x` trace back into commands and evidence.
pub fn parse_sealing_log(text: &str) -> Result<ParsedLog> {
    let mut records: Vec<LoggedCommand> = Vec::new();
    if text.trim().is_empty() {
        return Err(VerifyError::MalformedLog { line: 1, reason: "empty log".into() });
    }
    for (i, line) in text.split_inclusive('\n').enumerate() {
        if let Some(cmd) = line.strip_prefix("+ ") {
            let command = cmd.trim_end_matches('\n').to_string();
            if command.is_empty() {
                return Err(VerifyError::MalformedLog { line: i + 1, reason: "empty command".into() });
            }
            records.push(LoggedCommand { line: i + 1, command, output: String::new() });
        } else {
            match records.last_mut() {
                Some(r) => r.output.push_str(line),
                None => {
                    return Err(VerifyError::MalformedLog {
                        line: i + 1,
                        reason: "output before the first traced command".into(),
                    })
                }
            }
        }
        if line.contains('\0') {
            return Err(VerifyError::MalformedLog { line: i + 1, reason: "binary content".into() });
        }
    }
    let evidence = extract_evidence(&records);
    Ok(ParsedLog { records, evidence })
}

fn extract_evidence(records: &[LoggedCommand]) -> LogEvidence {
    let mut ev = LogEvidence::default();
    for (pos, r) in records.iter().enumerate() {
        let cmd = r.command.as_str();
        if let Some(dev) = cmd.strip_prefix("cryptsetup luksErase ") {
            ev.erased.push((dev.to_string(), pos));
        } else if let Some(dev) = cmd.strip_prefix("cryptsetup luksDump ") {
            match parse_dump(dev, pos, &r.output) {
                Some(d) => ev.dumps.push(d),
                None => ev.problems.push(format!("unreadable keyslot dump for {dev} (line {})", r.line)),
            }
        } else if cmd == "cat /etc/passwd" {
            ev.passwd = Some(r.output.clone());
        } else if cmd == "cat /etc/shadow" {
            ev.shadow = Some(r.output.clone());
        } else if cmd == "cat /etc/hosts.allow" {
            ev.hosts_allow_absent = Some(r.output.contains("No such file or directory"));
        } else if cmd == "systemctl status sshd" {
            ev.ssh_absent = Some(r.output.contains("could not be found"));
        } else if cmd == "iptables-save" {
            match Ruleset::parse(&r.output) {
                Some(rs) => ev.firewall_v4 = Some(rs),
                None => ev.problems.push(format!("unreadable iptables-save output (line {})", r.line)),
            }
        } else if let Some(root) = parse_hash_command(cmd) {
            match Manifest::parse(&r.output) {
                Ok(m) => ev.manifests.push((root, m)),
                Err(e) => ev.problems.push(format!("unreadable hash listing for {} (line {}): {e}", root.path, r.line)),
            }
        }
    }
    ev
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ChangeKind {
    Added,
    Removed,
    Changed,
}

impl ChangeKind {
    const ALL: [ChangeKind; 3] = [ChangeKind::Added, ChangeKind::Removed, ChangeKind::Changed];

    fn as_str(self) -> &'static str {
        match self {
            ChangeKind::Added => "added",
            ChangeKind::Removed => "removed",
            ChangeKind::Changed => "changed",
        }
    }
}

/// Path globs permitted to appear, disappear or change across sealing.
/// Text form: one `<added|removed|changed> <glob>` per line.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct AllowlistPolicy {
    pub rules: Vec<(ChangeKind, String)>,
}

impl AllowlistPolicy {
    pub fn allow(&mut self, kind: ChangeKind, pattern: impl Into<String>) {
        let pattern = pattern.into();
        if !self.rules.iter().any(|(k, p)| *k == kind && *p == pattern) {
            self.rules.push((kind, pattern));
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut p = AllowlistPolicy::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |reason: &str| VerifyError::BadPolicy { line: i + 1, reason: reason.into() };
            let (kind, pat) = line.split_once(char::is_whitespace).ok_or_else(|| bad("expected `<kind> <glob>`"))?;
            let kind = ChangeKind::ALL
                .into_iter()
                .find(|k| k.as_str() == kind)
                .ok_or_else(|| bad("kind must be added, removed or changed"))?;
            let pat = pat.trim();
            glob(pat).map_err(|e| bad(&e.to_string()))?;
            p.allow(kind, pat);
        }
        Ok(p)
    }

    pub fn compile(&self) -> CompiledPolicy {
        let mut sets = BTreeMap::new();
        for kind in ChangeKind::ALL {
            let mut b = GlobSetBuilder::new();
            for (_, pat) in self.rules.iter().filter(|(k, _)| *k == kind) {
                b.add(glob(pat).expect("patterns are validated on entry"));
            }
            sets.insert(kind, b.build().expect("valid globs build"));
        }
        CompiledPolicy { sets }
    }
}

fn glob(pattern: &str) -> Result<globset::Glob, globset::Error> {
    GlobBuilder::new(pattern).literal_separator(true).build()
}

impl fmt::Display for AllowlistPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, p) in &self.rules {
            writeln!(f, "{} {p}", k.as_str())?;
        }
        Ok(())
    }
}

pub struct CompiledPolicy {
    sets: BTreeMap<ChangeKind, GlobSet>,
}

impl CompiledPolicy {
    pub fn admits(&self, kind: ChangeKind, path: &str) -> bool {
        self.sets[&kind].is_match(path)
    }
}

fn created(p: &mut AllowlistPolicy, path: &str) {
    p.allow(ChangeKind::Added, path);
    p.allow(ChangeKind::Changed, path);
}

/// Allowlist derived from the mutating steps of `plan`.
pub fn default_policy(plan: &SealingPlan) -> AllowlistPolicy {
    let mut p = AllowlistPolicy::default();
    if plan.steps.is_empty() {
        return p;
    }
    created(&mut p, &plan.log_path);
    for step in &plan.steps {
        match step {
            SealingStep::RemoveUser { .. } => {
                for f in ["/etc/passwd", "/etc/shadow", "/etc/group"] {
                    p.allow(ChangeKind::Changed, f);
                }
            }
            SealingStep::RemoveHostsAllow => p.allow(ChangeKind::Removed, "/etc/hosts.allow"),
            SealingStep::PurgeSsh => {
                for f in SSH_PACKAGE_FILES {
                    p.allow(ChangeKind::Removed, *f);
                }
            }
            SealingStep::ZipTree { archive, .. } => created(&mut p, archive),
            SealingStep::CopyTo { source, dest_dir } => {
                created(&mut p, &format!("{}/{}", dest_dir.trim_end_matches('/'), tree::file_name(source)))
            }
            SealingStep::MoveTo { source, dest_dir } => {
                created(&mut p, &format!("{}/{}", dest_dir.trim_end_matches('/'), tree::file_name(source)));
                p.allow(ChangeKind::Removed, source.as_str());
            }
            SealingStep::LdapDump { dest } => created(&mut p, dest),
            SealingStep::WriteDate { path } => created(&mut p, path),
            _ => {}
        }
    }
    p
}

/// What the verifier expects: the plans and per-stage allowlists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct VerificationProfile {
    pub plans: Plans,
    pub host_policy: AllowlistPolicy,
    pub vm_policy: AllowlistPolicy,
}

impl VerificationProfile {
    pub fn from_plans(plans: Plans) -> Self {
        VerificationProfile { host_policy: default_policy(&plans.host), vm_policy: default_policy(&plans.vm), plans }
    }

    pub fn for_config(cfg: &ServerConfig) -> Result<Self, crate::sealing::SealError> {
        Ok(Self::from_plans(Plans::dual_stage(cfg)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Severity {
    Info,
    Warning,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Finding {
    pub severity: Severity,
    /// Path, device, user or step the finding is about.
    pub subject: String,
    pub explanation: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Status {
    Pass,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Verdict {
    pub status: Status,
    pub preamble: String,
    pub findings: Vec<Finding>,
}

pub const VERDICT_PREAMBLE: &str = "\
This verdict covers the published sealing logs, hash listings, archives and \
directory dump, compared with the pre-seal disk images. Manipulations \
confined to volatile state (RAM contents, running processes, firewall or \
service changes made outside the logged commands) or to paths outside the \
hashed roots leave no published evidence and cannot be detected here.";

impl Verdict {
    fn from_findings(findings: Vec<Finding>) -> Self {
        let status = if findings.iter().any(|f| f.severity == Severity::Error) { Status::Fail } else { Status::Pass };
        Verdict { status, preamble: VERDICT_PREAMBLE.to_string(), findings }
    }

    pub fn errors(&self) -> impl Iterator<Item = &Finding> {
        self.findings.iter().filter(|f| f.severity == Severity::Error)
    }

    pub fn passed(&self) -> bool {
        self.status == Status::Pass
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("verdict serializes")
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", self.preamble)?;
        writeln!(f)?;
        for x in &self.findings {
            let sev = match x.severity {
                Severity::Info => "INFO",
                Severity::Warning => "WARNING",
                Severity::Error => "ERROR",
            };
            writeln!(f, "{sev:<7} {}: {}", x.subject, x.explanation)?;
        }
        writeln!(f, "verdict: {}", if self.passed() { "PASS" } else { "FAIL" })
    }
}

struct Findings(Vec<Finding>);

impl Findings {
    fn push(&mut self, severity: Severity, subject: impl Into<String>, explanation: impl Into<String>) {
        self.0.push(Finding { severity, subject: subject.into(), explanation: explanation.into() });
    }

    fn error(&mut self, subject: impl Into<String>, explanation: impl Into<String>) {
        self.push(Severity::Error, subject, explanation);
    }
}

/// Longest-common-subsequence alignment of expected vs. logged commands.
/// Returns (missing expected indices, unexpected logged indices).
fn align(expected: &[String], actual: &[&str]) -> (Vec<usize>, Vec<usize>) {
    let (n, m) = (expected.len(), actual.len());
    let mut dp = vec![vec![0u32; m + 1]; n + 1];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            dp[i][j] =
                if expected[i] == actual[j] { dp[i + 1][j + 1] + 1 } else { dp[i + 1][j].max(dp[i][j + 1]) };
        }
    }
    let (mut i, mut j) = (0, 0);
    let (mut missing, mut extra) = (Vec::new(), Vec::new());
    while i < n && j < m {
        if expected[i] == actual[j] {
            i += 1;
            j += 1;
        } else if dp[i + 1][j] >= dp[i][j + 1] {
            missing.push(i);
            i += 1;
        } else {
            extra.push(j);
            j += 1;
        }
    }
    missing.extend(i..n);
    extra.extend(j..m);
    (missing, extra)
}

fn stage_name(stage: Stage) -> &'static str {
    match stage {
        Stage::Host => "host",
        Stage::Vm => "vm",
    }
}

fn check_steps(out: &mut Findings, plan: &SealingPlan, log: &ParsedLog) {
    let published = plan.published_steps();
    let expected: Vec<String> = published.iter().map(SealingStep::command).collect();
    let actual: Vec<&str> = log.commands().collect();
    let (missing, extra) = align(&expected, &actual);
    let stage = stage_name(plan.stage);
    for i in missing {
        let what = if published[i].is_critical() { "missing critical step" } else { "missing step" };
        out.error(expected[i].clone(), format!("{what} in {stage} sealing log"));
    }
    for j in extra {
        out.error(actual[j], format!("unexpected command in {stage} sealing log (line {})", log.records[j].line));
    }
}

fn check_keyslots(out: &mut Findings, plan: &SealingPlan, log: &ParsedLog) {
    let ev = &log.evidence;
    for step in plan.published_steps() {
        match step {
            SealingStep::LuksErase { device } => {
                let erase_pos = ev.erased.iter().filter(|(d, _)| d == device).map(|(_, p)| *p).next_back();
                let dump = ev.dumps.iter().rfind(|d| d.device == *device);
                match (erase_pos, dump) {
                    (_, None) => out.error(device.clone(), "no keyslot dump in the log"),
                    (Some(e), Some(d)) if d.position < e => {
                        out.error(device.clone(), "no keyslot dump after the erase command")
                    }
                    (_, Some(d)) => {
                        for (i, active) in d.slots.iter().enumerate() {
                            if *active {
                                out.error(format!("{device} key slot {i}"), "keyslot still ACTIVE after sealing");
                            }
                        }
                    }
                }
            }
            SealingStep::Reencrypt { device, .. } => {
                let digests: Vec<&str> =
                    ev.dumps.iter().filter(|d| d.device == *device).map(|d| d.mk_digest.as_str()).collect();
                let changed = digests.windows(2).any(|w| w[0] != w[1]);
                if !changed {
                    out.error(device.clone(), "no evidence that reencryption replaced the master key");
                }
            }
            _ => {}
        }
    }
}

fn check_accounts_and_access(out: &mut Findings, plan: &SealingPlan, log: &ParsedLog) {
    let ev = &log.evidence;
    let stage = stage_name(plan.stage);
    match ev.accounts() {
        None => out.error("/etc/passwd", format!("no account listing in {stage} log")),
        Some(accounts) => {
            if ev.shadow.is_none() {
                out.error("/etc/shadow", format!("no shadow listing in {stage} log"));
            }
            for a in accounts.iter().filter(|a| a.login_enabled) {
                out.error(format!("user {}", a.name), format!("login-capable account survives on {stage}"));
            }
        }
    }
    match ev.ssh_absent {
        Some(true) => {}
        Some(false) => out.error("openssh-server (/usr/sbin/sshd)", format!("ssh daemon still installed on {stage}")),
        None => out.error("openssh-server", format!("no ssh status evidence in {stage} log")),
    }
    match &ev.firewall_v4 {
        None => out.error("iptables", format!("no firewall listing in {stage} log")),
        Some(rs) => {
            if rs.output_policy != Policy::Drop {
                out.error("iptables OUTPUT", format!("outgoing traffic not dropped on {stage}"));
            }
            if rs.allows_ssh() {
                out.error("iptables INPUT", format!("ssh port still open on {stage}"));
            }
        }
    }
    if ev.hosts_allow_absent != Some(true) {
        out.error("/etc/hosts.allow", format!("hosts.allow still present or unverified on {stage}"));
    }
    for p in &ev.problems {
        out.error(stage, p.clone());
    }
}

fn report_diff(
    out: &mut Findings,
    policy: &CompiledPolicy,
    context: &str,
    pre: &Manifest,
    post: &Manifest,
) -> usize {
    let diff = diff_manifests(pre, post);
    let mut admitted = 0;
    for (kind, paths) in
        [(ChangeKind::Added, &diff.added), (ChangeKind::Removed, &diff.removed), (ChangeKind::Changed, &diff.changed)]
    {
        for path in paths {
            if policy.admits(kind, path) {
                admitted += 1;
            } else {
                out.error(path.clone(), format!("{} since the pre-seal image ({context})", kind.as_str()));
            }
        }
    }
    admitted
}

fn root_manifest(view: &FileTree, root: &HashRoot) -> Manifest {
    compute_root(view, root).unwrap_or_default()
}

fn check_manifests(out: &mut Findings, plan: &SealingPlan, log: &ParsedLog, pre_view: &FileTree, policy: &CompiledPolicy) {
    let stage = stage_name(plan.stage);
    let mut admitted = 0;
    for (root, post) in &log.evidence.manifests {
        let pre = root_manifest(pre_view, root);
        admitted += report_diff(out, policy, &format!("{stage} hash listing"), &pre, post);
    }
    out.push(Severity::Info, format!("{stage} manifests"), format!("{admitted} differences admitted by the allowlist"));
}

fn check_archives(
    out: &mut Findings,
    plan: &SealingPlan,
    bundle: &crate::sealing::PublishedBundle,
    pre_view: &FileTree,
    policy: &CompiledPolicy,
) {
    for step in &plan.steps {
        let SealingStep::ZipTree { archive, source } = step else { continue };
        let name = tree::file_name(archive);
        let Some(bytes) = bundle.get(name) else {
            out.error(name, "archive missing from the published bundle");
            continue;
        };
        let unpacked = match tree::unpack(bytes) {
            Ok(t) => t,
            Err(e) => {
                out.error(name, format!("archive unreadable: {e}"));
                continue;
            }
        };
        let root = HashRoot::recursive(source);
        let post = root_manifest(&unpacked, &root);
        let pre = root_manifest(pre_view, &root);
        report_diff(out, policy, &format!("archive {name}"), &pre, &post);
    }
}

/// Byte windows long enough that a match means the secret itself leaked.
const LEAK_WINDOW: usize = 16;

fn check_secrets(out: &mut Findings, pre: &ServerImages, bundle: &crate::sealing::PublishedBundle) {
    let mut windows = HashSet::new();
    for boot in [&pre.host.boot, &pre.vm.boot] {
        if let Some(k) = boot.read_file(KEYFILE_PATH) {
            windows.extend(k.windows(LEAK_WINDOW).map(|w| w.to_vec()));
        }
    }
    for (name, bytes) in bundle.files() {
        if bytes.windows(SHARE_MAGIC.len()).any(|w| w == SHARE_MAGIC) {
            out.error(name.clone(), "bundle contains an escrow key share");
        }
        if bytes.windows(LEAK_WINDOW).any(|w| windows.contains(w)) {
            out.error(name.clone(), "bundle contains keyfile material");
        }
    }
}

/// Pre-seal view of a machine as its sealing script sees it.
fn pre_view(images: &DiskImagePair, guest_boot: Option<&FileTree>) -> Result<FileTree> {
    let mut v = images.open_root_tree().map_err(|e| VerifyError::PreImage(e.to_string()))?;
    v.graft("/boot", &images.boot).map_err(|e| VerifyError::PreImage(e.to_string()))?;
    if let Some(g) = guest_boot {
        v.graft(GUEST_BOOT_MOUNT, g).map_err(|e| VerifyError::PreImage(e.to_string()))?;
    }
    Ok(v)
}

fn bundle_log(bundle: &crate::sealing::PublishedBundle, name: &str) -> Result<ParsedLog> {
    let bytes = bundle.get(name).ok_or_else(|| VerifyError::MalformedBundle(format!("{name} missing")))?;
    let text = std::str::from_utf8(bytes).map_err(|_| VerifyError::MalformedBundle(format!("{name} is not text")))?;
    parse_sealing_log(text).map_err(|e| VerifyError::MalformedBundle(format!("{name}: {e}")))
}

/// Checks a published bundle against the pre-seal images.
pub fn verify_seal(
    pre: &ServerImages,
    bundle: &crate::sealing::PublishedBundle,
    profile: &VerificationProfile,
) -> Result<Verdict> {
    let host_log = bundle_log(bundle, HOST_LOG)?;
    let vm_log = bundle_log(bundle, VM_LOG)?;
    let host_view = pre_view(&pre.host, Some(&pre.vm.boot))?;
    let vm_view = pre_view(&pre.vm, None)?;
    let mut out = Findings(Vec::new());

    for (plan, log, view, policy) in [
        (&profile.plans.host, &host_log, &host_view, &profile.host_policy),
        (&profile.plans.vm, &vm_log, &vm_view, &profile.vm_policy),
    ] {
        let compiled = policy.compile();
        check_steps(&mut out, plan, log);
        check_keyslots(&mut out, plan, log);
        check_accounts_and_access(&mut out, plan, log);
        check_manifests(&mut out, plan, log, view, &compiled);
        check_archives(&mut out, plan, bundle, view, &compiled);
    }
    check_secrets(&mut out, pre, bundle);
    Ok(Verdict::from_findings(out.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::machine::StepRecord;
    use crate::sealing::{prepare_trusted_server, seal_all, LogStatus, SealingLog};
    use crate::sim::SimEnv;

    fn cfg() -> ServerConfig {
        ServerConfig { kdf_iterations: 64, ..ServerConfig::default() }
    }

    #[test]
    fn parse_round_trips_generated_logs() {
        let log = SealingLog {
            stage: Stage::Vm,
            records: vec![
                StepRecord { command: "rm /etc/hosts.allow".into(), output: String::new(), status: 0 },
                StepRecord { command: "cat /etc/passwd".into(), output: "root:x:0:0::/root:/bin/bash\n".into(), status: 0 },
                StepRecord { command: "iptables -P OUTPUT DROP".into(), output: "no newline".into(), status: 0 },
            ],
            status: LogStatus::Complete,
        };
        let text = log.render();
        let parsed = parse_sealing_log(&text).unwrap();
        assert_eq!(parsed.render(), text);
        assert_eq!(parsed.records.len(), 3);
        assert_eq!(parsed.records[1].line, 2);
        assert!(parsed.evidence.passwd.is_some());
    }

    #[test]
    fn garbage_is_malformed() {
        assert!(matches!(parse_sealing_log("hello\n+ ls\n"), Err(VerifyError::MalformedLog { line: 1, .. })));
        assert!(matches!(parse_sealing_log(""), Err(VerifyError::MalformedLog { .. })));
        assert!(matches!(parse_sealing_log("+ ls\nx\0y\n"), Err(VerifyError::MalformedLog { line: 2, .. })));
    }

    #[test]
    fn missing_erase_line_leaves_no_erase_evidence() {
        let text = "+ cryptsetup luksErase /dev/vda2\n+ cryptsetup luksDump /dev/vda2\n";
        assert_eq!(parse_sealing_log(text).unwrap().evidence.erased.len(), 1);
        let cut = text.replace("+ cryptsetup luksErase /dev/vda2\n", "");
        let ev = parse_sealing_log(&cut).unwrap().evidence;
        assert!(ev.erased.is_empty());
        // the dump without slot lines is flagged as unreadable evidence
        assert_eq!(ev.problems.len(), 1);
    }

    #[test]
    fn default_policy_examples() {
        let plans = Plans::dual_stage(&cfg()).unwrap();
        let p = default_policy(&plans.vm).compile();
        assert!(p.admits(ChangeKind::Changed, "/etc/passwd"));
        assert!(p.admits(ChangeKind::Removed, "/usr/sbin/sshd"));
        assert!(!p.admits(ChangeKind::Added, "/usr/sbin/sshd"));
        assert!(!p.admits(ChangeKind::Added, "/usr/sbin/backdoor"));
        assert!(p.admits(ChangeKind::Added, "/var/www/log/ldap.txt"));
        let empty = SealingPlan { steps: Vec::new(), ..plans.vm.clone() };
        let e = default_policy(&empty);
        assert!(e.rules.is_empty());
        let c = e.compile();
        assert!(ChangeKind::ALL.iter().all(|k| !c.admits(*k, "/etc/passwd")));
    }

    #[test]
    fn policy_text_round_trip() {
        let plans = Plans::dual_stage(&cfg()).unwrap();
        let p = default_policy(&plans.host);
        assert_eq!(AllowlistPolicy::parse(&p.to_string()).unwrap(), p);
        let q = AllowlistPolicy::parse("# comment\nadded /var/www/log/*.zip\n").unwrap();
        assert!(q.compile().admits(ChangeKind::Added, "/var/www/log/a.zip"));
        assert!(!q.compile().admits(ChangeKind::Added, "/var/www/log/sub/a.zip"));
        assert!(matches!(AllowlistPolicy::parse("moved /x"), Err(VerifyError::BadPolicy { line: 1, .. })));
    }

    #[test]
    fn alignment_reports_missing_and_extra() {
        let exp: Vec<String> = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
        assert_eq!(align(&exp, &["a", "b", "c", "d"]), (vec![], vec![]));
        assert_eq!(align(&exp, &["a", "c", "x", "d"]), (vec![1], vec![2]));
        assert_eq!(align(&exp, &[]), (vec![0, 1, 2, 3], vec![]));
    }

    #[test]
    fn clean_seal_passes() {
        let c = cfg();
        let mut env = SimEnv::seeded(21);
        let mut s = prepare_trusted_server(&c, &mut env).unwrap();
        let pre = ServerImages::snapshot(&s.host).unwrap();
        let out = seal_all(&mut s.host, &c, &mut env).unwrap();
        let v = verify_seal(&pre, &out.bundle, &VerificationProfile::for_config(&c).unwrap()).unwrap();
        assert!(v.passed(), "{v}");
        assert_eq!(v.errors().count(), 0);
        assert!(v.to_string().contains("verdict: PASS"));
        assert!(v.to_json().contains("\"status\": \"PASS\""));
    }

    #[test]
    fn removed_erase_line_fails() {
        let c = cfg();
        let mut env = SimEnv::seeded(22);
        let mut s = prepare_trusted_server(&c, &mut env).unwrap();
        let pre = ServerImages::snapshot(&s.host).unwrap();
        let mut out = seal_all(&mut s.host, &c, &mut env).unwrap();
        let log = out.bundle.vm_log().unwrap().replace("+ cryptsetup luksErase /dev/vda2\n", "");
        out.bundle.files_mut().insert(VM_LOG.into(), log.into_bytes());
        let v = verify_seal(&pre, &out.bundle, &VerificationProfile::for_config(&c).unwrap()).unwrap();
        assert!(!v.passed());
        assert!(v.errors().any(|f| f.explanation.starts_with("missing critical step")
            && f.subject == "cryptsetup luksErase /dev/vda2"));
    }

    #[test]
    fn leaked_share_or_key_is_flagged() {
        let c = cfg();
        let mut env = SimEnv::seeded(23);
        let mut s = prepare_trusted_server(&c, &mut env).unwrap();
        let pre = ServerImages::snapshot(&s.host).unwrap();
        let key = pre.vm.boot.read_file(KEYFILE_PATH).unwrap().to_vec();
        let mut out = seal_all(&mut s.host, &c, &mut env).unwrap();
        let mut share = SHARE_MAGIC.to_vec();
        share.extend_from_slice(b"rest");
        out.bundle.files_mut().insert("share.bin".into(), share);
        out.bundle.files_mut().insert("key.bin".into(), key[100..140].to_vec());
        let v = verify_seal(&pre, &out.bundle, &VerificationProfile::for_config(&c).unwrap()).unwrap();
        let subjects: Vec<_> = v.errors().map(|f| f.subject.as_str()).collect();
        assert!(subjects.contains(&"share.bin") && subjects.contains(&"key.bin"), "{subjects:?}");
    }

    #[test]
    fn missing_log_is_malformed_bundle() {
        let c = cfg();
        let mut env = SimEnv::seeded(24);
        let mut s = prepare_trusted_server(&c, &mut env).unwrap();
        let pre = ServerImages::snapshot(&s.host).unwrap();
        let mut out = seal_all(&mut s.host, &c, &mut env).unwrap();
        out.bundle.files_mut().remove(HOST_LOG);
        assert!(matches!(
            verify_seal(&pre, &out.bundle, &VerificationProfile::for_config(&c).unwrap()),
            Err(VerifyError::MalformedBundle(_))
        ));
    }
}
