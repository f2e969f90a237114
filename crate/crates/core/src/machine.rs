//! Simulated host and guest machines.
//!
//! A machine has a plaintext boot partition (holding the keyfile), an
//! encrypted root volume that stores the canonical encoding of the root file
//! tree, optional extra encrypted disks, and volatile RAM. While powered on,
//! every root tree mutation is written through to the encrypted volume.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::manifest::{compute_root, HashRoot};
use crate::sim::SimEnv;
use crate::tree::{self, FileTree, Node, TreeError};
use crate::volume::{
    CipherSpec, EncryptedVolume, Keyfile, Liveness, UnlockedVolume, VolumeError, SECTOR_BYTES,
};

/// Keyfile location inside a boot partition.
pub const KEYFILE_PATH: &str = "/keyfile";

/// Files owned by the `openssh-server` package.
pub const SSH_PACKAGE_FILES: &[&str] = &[
    "/etc/ssh/sshd_config",
    "/etc/ssh/ssh_host_ed25519_key",
    "/etc/ssh/ssh_host_ed25519_key.pub",
    "/etc/systemd/system/multi-user.target.wants/ssh.service",
    "/lib/systemd/system/ssh.service",
    "/usr/sbin/sshd",
    "/usr/share/doc/openssh-server/copyright",
];
pub const SSHD_BINARY: &str = "/usr/sbin/sshd";
pub const APACHE_BINARY: &str = "/usr/sbin/apache2";
pub const LDAP_CONFIG_DB: &str = "/etc/ldap/slapd.d/cn=config.ldif";
pub const LDAP_DATA_DB: &str = "/var/lib/ldap/data.ldif";

#[derive(Debug, Error)]
pub enum MachineError {
    #[error("machine is already running")]
    AlreadyRunning,
    #[error("machine is powered off")]
    PoweredOff,
    #[error("machine must be powered off for this operation")]
    MachineRunning,
    #[error("root volume cannot be unlocked, machine is sealed and cold: {0}")]
    SealedAndCold(VolumeError),
    #[error("boot partition holds no usable keyfile")]
    MissingKeyfile,
    #[error("root filesystem is unreadable: {0}")]
    CorruptRoot(String),
    #[error("root volume full: need {needed} bytes, have {capacity}")]
    DiskFull { needed: usize, capacity: usize },
    #[error("step failed with status {}: {}", .0.status, .0.command)]
    StepFailure(StepRecord),
    #[error("disk image geometry does not match machine: {0}")]
    GeometryMismatch(String),
    #[error("no such device {0}")]
    NoSuchDevice(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("image i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = MachineError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MachineKind {
    Host,
    Vm,
}

/// Static wiring of a machine: names, devices, script locations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MachineConfig {
    pub kind: MachineKind,
    pub name: String,
    pub root_device: String,
    /// Devices under which the guest's disks appear on a host.
    pub guest_boot_device: Option<String>,
    pub guest_root_device: Option<String>,
    pub cron_script: String,
}

impl MachineConfig {
    pub fn host() -> Self {
        MachineConfig {
            kind: MachineKind::Host,
            name: "ts-host".into(),
            root_device: "/dev/sda2".into(),
            guest_boot_device: Some("/dev/sdb1".into()),
            guest_root_device: Some("/dev/sdb2".into()),
            cron_script: "/root/cron-reboot.sh".into(),
        }
    }

    pub fn vm() -> Self {
        MachineConfig {
            kind: MachineKind::Vm,
            name: "debian9".into(),
            root_device: "/dev/vda2".into(),
            guest_boot_device: None,
            guest_root_device: None,
            cron_script: "/home/trust/cron-reboot.sh".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Policy {
    #[serde(rename = "ACCEPT")]
    Accept,
    #[serde(rename = "DROP")]
    Drop,
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Policy::Accept => "ACCEPT",
            Policy::Drop => "DROP",
        })
    }
}

impl Policy {
    fn parse(s: &str) -> Option<Policy> {
        match s {
            "ACCEPT" => Some(Policy::Accept),
            "DROP" => Some(Policy::Drop),
            _ => None,
        }
    }
}

/// One netfilter table: chain policies plus the ordered INPUT rule list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Ruleset {
    pub input_policy: Policy,
    pub forward_policy: Policy,
    pub output_policy: Policy,
    /// Rule specifications following `-A INPUT`.
    pub input_rules: Vec<String>,
}

impl Default for Ruleset {
    fn default() -> Self {
        Ruleset {
            input_policy: Policy::Accept,
            forward_policy: Policy::Accept,
            output_policy: Policy::Accept,
            input_rules: Vec::new(),
        }
    }
}

impl Ruleset {
    /// Parses `iptables-save` output.
    pub fn parse(text: &str) -> Option<Ruleset> {
        let mut rs = Ruleset::default();
        for line in text.lines().map(str::trim) {
            if let Some(rest) = line.strip_prefix(':') {
                let mut it = rest.split_whitespace();
                let (chain, pol) = (it.next()?, Policy::parse(it.next()?)?);
                match chain {
                    "INPUT" => rs.input_policy = pol,
                    "FORWARD" => rs.forward_policy = pol,
                    "OUTPUT" => rs.output_policy = pol,
                    _ => {}
                }
            } else if let Some(rule) = line.strip_prefix("-A INPUT ") {
                rs.input_rules.push(rule.to_string());
            }
        }
        Some(rs)
    }

    pub fn save(&self) -> String {
        let mut out = String::from("*filter\n");
        out += &format!(":INPUT {} [0:0]\n", self.input_policy);
        out += &format!(":FORWARD {} [0:0]\n", self.forward_policy);
        out += &format!(":OUTPUT {} [0:0]\n", self.output_policy);
        for r in &self.input_rules {
            out += &format!("-A INPUT {r}\n");
        }
        out += "COMMIT\n";
        out
    }

    pub fn list(&self) -> String {
        let mut out = format!("Chain INPUT (policy {})\n", self.input_policy);
        for (i, r) in self.input_rules.iter().enumerate() {
            out += &format!("{:<4}{r}\n", i + 1);
        }
        out += &format!("\nChain FORWARD (policy {})\n", self.forward_policy);
        out += &format!("\nChain OUTPUT (policy {})\n", self.output_policy);
        out
    }

    /// Deletes the rule at 1-based `index`; later rules shift down.
    pub fn delete_input(&mut self, index: usize) -> bool {
        if index == 0 || index > self.input_rules.len() {
            return false;
        }
        self.input_rules.remove(index - 1);
        true
    }

    pub fn allows_ssh(&self) -> bool {
        self.input_rules.iter().any(|r| r.contains("--dport 22 "))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FirewallPolicy {
    pub v4: Ruleset,
    pub v6: Ruleset,
    pub hosts_allow_present: bool,
    pub hosts_deny: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct UserAccount {
    pub name: String,
    pub uid: u32,
    pub shell: String,
    pub login_enabled: bool,
}

fn is_login_shell(shell: &str) -> bool {
    !(shell.ends_with("nologin") || shell.ends_with("/false") || shell.ends_with("/sync") || shell.is_empty())
}

fn is_locked_hash(hash: &str) -> bool {
    hash.is_empty() || hash.starts_with('!') || hash.starts_with('*')
}

/// Users from a passwd listing, with login capability judged against the
/// matching shadow listing. A user with a real shell and an unlocked
/// password hash can log in.
pub fn parse_accounts(passwd: &str, shadow: Option<&str>) -> Vec<UserAccount> {
    let hashes: BTreeMap<&str, &str> = shadow
        .unwrap_or("")
        .lines()
        .filter_map(|l| {
            let mut it = l.split(':');
            Some((it.next()?, it.next()?))
        })
        .collect();
    passwd
        .lines()
        .filter_map(|l| {
            let f: Vec<&str> = l.split(':').collect();
            if f.len() < 7 {
                return None;
            }
            let shell = f[6].to_string();
            let unlocked = match shadow {
                Some(_) => hashes.get(f[0]).is_some_and(|h| !is_locked_hash(h)),
                None => true,
            };
            Some(UserAccount {
                name: f[0].to_string(),
                uid: f[2].parse().ok()?,
                login_enabled: is_login_shell(&shell) && unlocked,
                shell,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SshPackage {
    Installed,
    Purged,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct OutboundMail {
    pub to: String,
    pub subject: String,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ServiceState {
    pub ssh: SshPackage,
    pub ssh_running: bool,
    pub web_running: bool,
    pub cron_reboot: Vec<String>,
    pub outbox: Vec<OutboundMail>,
}

/// A single provisioning or sealing command the machine can execute.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "step", rename_all = "snake_case")]
pub enum SealingStep {
    RemoveUser { name: String },
    RemoveHostsAllow,
    ShowFile { path: String },
    SetOutputDrop,
    DeleteInputRule { index: usize },
    SaveFirewall { v6: bool },
    ListFirewall { v6: bool },
    PurgeSsh,
    Autoremove,
    SshStatus,
    LuksErase { device: String },
    LuksDump { device: String },
    Reencrypt { device: String, keyfile: String, key_bits: u32 },
    ZipTree { archive: String, source: String },
    ListAll,
    HashTree { root: HashRoot },
    CopyTo { source: String, dest_dir: String },
    MoveTo { source: String, dest_dir: String },
    Chown { owner: String, path: String, recursive: bool },
    Unmount { mount: String },
    StartVm { domain: String },
    LdapDump { dest: String },
    StartWeb,
    WriteDate { path: String },
    SendMail { subject: String, to: String, body: String },
}

impl SealingStep {
    /// Shell command text as it appears in a `set -x` trace.
    pub fn command(&self) -> String {
        use SealingStep::*;
        match self {
            RemoveUser { name } => format!("userdel -f {name}"),
            RemoveHostsAllow => "rm /etc/hosts.allow".into(),
            ShowFile { path } => format!("cat {path}"),
            SetOutputDrop => "iptables -P OUTPUT DROP".into(),
            DeleteInputRule { index } => format!("iptables -D INPUT {index}"),
            SaveFirewall { v6 } => format!("{}-save", ipt(*v6)),
            ListFirewall { v6 } => format!("{} -L -n", ipt(*v6)),
            PurgeSsh => "apt-get -y purge openssh-server".into(),
            Autoremove => "apt-get -y autoremove".into(),
            SshStatus => "systemctl status sshd".into(),
            LuksErase { device } => format!("cryptsetup luksErase {device}"),
            LuksDump { device } => format!("cryptsetup luksDump {device}"),
            Reencrypt { device, keyfile, key_bits } => {
                format!("cryptsetup-reencrypt -v -d {keyfile} -l {key_bits} {device}")
            }
            ZipTree { archive, source } => format!("zip -r {archive} {source}"),
            ListAll => "ls -RlA /".into(),
            HashTree { root } => root.command(),
            CopyTo { source, dest_dir } => format!("cp {source} {dest_dir}"),
            MoveTo { source, dest_dir } => format!("mv {source} {dest_dir}"),
            Chown { owner, path, recursive } => {
                format!("chown {}{owner} {path}", if *recursive { "-R " } else { "" })
            }
            Unmount { mount } => format!("umount {mount}"),
            StartVm { domain } => format!("virsh start {domain}"),
            LdapDump { dest } => {
                format!("date >> {dest} && slapcat -n 0 >> {dest} && slapcat -n 1 >> {dest}")
            }
            StartWeb => "systemctl start apache2".into(),
            WriteDate { path } => format!("echo $(date) >> {path}"),
            SendMail { subject, to, body } => format!("mail -s \"{subject}\" {to} < {body}"),
        }
    }

    /// A failure of these aborts sealing.
    pub fn is_critical(&self) -> bool {
        matches!(self, SealingStep::LuksErase { .. } | SealingStep::Reencrypt { .. })
    }
}

fn ipt(v6: bool) -> &'static str {
    if v6 {
        "ip6tables"
    } else {
        "iptables"
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StepRecord {
    pub command: String,
    pub output: String,
    pub status: i32,
}

impl StepRecord {
    fn ok(command: String, output: impl Into<String>) -> Self {
        StepRecord { command, output: output.into(), status: 0 }
    }

    fn fail(command: String, output: impl Into<String>, status: i32) -> Self {
        StepRecord { command, output: output.into(), status }
    }

    /// `set -x` rendering: the traced command then its raw output.
    pub fn render(&self) -> String {
        let mut s = format!("+ {}\n", self.command);
        s.push_str(&self.output);
        if !self.output.is_empty() && !self.output.ends_with('\n') {
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BootReport {
    pub machine: String,
    pub cron_executed: Vec<String>,
    /// Cron line that launches the sealing script, if one is armed.
    pub sealing_trigger: Option<String>,
}

/// Persistent disks of one machine, as stored for verification and restore.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiskImagePair {
    pub boot: FileTree,
    pub root: EncryptedVolume,
    pub extra: Vec<(String, EncryptedVolume)>,
}

impl DiskImagePair {
    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("boot.tree"), self.boot.encode())?;
        fs::write(dir.join("root.tsvol"), self.root.to_bytes())?;
        for (dev, vol) in &self.extra {
            fs::write(dir.join(extra_file_name(dev)), vol.to_bytes())?;
        }
        Ok(())
    }

    pub fn read_from_dir(dir: &Path) -> Result<Self> {
        let boot = FileTree::decode(&fs::read(dir.join("boot.tree"))?)?;
        let root = EncryptedVolume::from_bytes(&fs::read(dir.join("root.tsvol"))?)?;
        let mut extra = Vec::new();
        let mut names: Vec<String> = fs::read_dir(dir)?
            .filter_map(|e| e.ok()?.file_name().into_string().ok())
            .filter(|n| n.starts_with("disk-") && n.ends_with(".tsvol"))
            .collect();
        names.sort();
        for n in names {
            let dev = format!("/dev/{}", &n["disk-".len()..n.len() - ".tsvol".len()]);
            extra.push((dev, EncryptedVolume::from_bytes(&fs::read(dir.join(&n))?)?));
        }
        Ok(DiskImagePair { boot, root, extra })
    }

    /// Decrypts the root tree with the keyfile on the image's own boot
    /// partition. Only works while the image's keyslots are intact.
    pub fn open_root_tree(&self) -> Result<FileTree> {
        let keyfile = read_keyfile(&self.boot).ok_or(MachineError::MissingKeyfile)?;
        let handle = self.root.unlock(&keyfile).map_err(MachineError::SealedAndCold)?;
        let image = handle.read_all(&self.root).map_err(|e| MachineError::CorruptRoot(e.to_string()))?;
        decode_root_image(&image)
    }
}

fn extra_file_name(device: &str) -> String {
    format!("disk-{}.tsvol", tree::file_name(device))
}

fn read_keyfile(boot: &FileTree) -> Option<Keyfile> {
    Keyfile::from_bytes(boot.read_file(KEYFILE_PATH)?).ok()
}

fn encode_root_image(tree: &FileTree, sectors: u64) -> Result<Vec<u8>> {
    let enc = tree.encode();
    let capacity = sectors as usize * SECTOR_BYTES;
    let needed = enc.len() + 8;
    if needed > capacity {
        return Err(MachineError::DiskFull { needed, capacity });
    }
    let mut out = Vec::with_capacity(capacity);
    out.extend_from_slice(&(enc.len() as u64).to_le_bytes());
    out.extend_from_slice(&enc);
    out.resize(capacity, 0);
    Ok(out)
}

pub fn decode_root_image(image: &[u8]) -> Result<FileTree> {
    let corrupt = |m: &str| MachineError::CorruptRoot(m.to_string());
    if image.len() < 8 {
        return Err(corrupt("image shorter than length prefix"));
    }
    let len = u64::from_le_bytes(image[..8].try_into().unwrap()) as usize;
    let body = image.get(8..8 + len).ok_or_else(|| corrupt("length prefix exceeds image"))?;
    Ok(FileTree::decode(body)?)
}

/// Sector count that fits `tree` with generous room for growth.
pub fn sectors_for(tree: &FileTree, slack_bytes: usize) -> u64 {
    let bytes = tree.encode().len() * 2 + 8 + slack_bytes;
    bytes.div_ceil(SECTOR_BYTES) as u64
}

#[derive(Debug)]
struct Ram {
    liveness: Liveness,
    root_handle: UnlockedVolume,
    tree: FileTree,
    image: Vec<u8>,
    firewall_v4: Ruleset,
    firewall_v6: Ruleset,
    ssh_running: bool,
    web_running: bool,
    guest_mounted: Option<String>,
    extra_handles: BTreeMap<String, UnlockedVolume>,
    outbox: Vec<OutboundMail>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Fs {
    Root,
    Boot,
    GuestBoot,
}

#[derive(Debug)]
pub struct Machine {
    config: MachineConfig,
    boot: FileTree,
    root: EncryptedVolume,
    extra_disks: Vec<(String, EncryptedVolume)>,
    ram: Option<Ram>,
    nested_vm: Option<Box<Machine>>,
}

impl Machine {
    /// Formats a root volume bound to a fresh keyfile on `boot` and writes
    /// `root_tree` into it. The machine starts powered off.
    pub fn install(
        config: MachineConfig,
        mut boot: FileTree,
        root_tree: &FileTree,
        sectors: u64,
        spec: CipherSpec,
        env: &mut SimEnv,
    ) -> Result<Machine> {
        let keyfile = Keyfile::generate(&mut env.rng);
        boot.write_file(KEYFILE_PATH, keyfile.as_bytes().to_vec())?;
        let mut root = EncryptedVolume::format(sectors, &keyfile, spec, &mut env.rng)?;
        let handle = root.unlock(&keyfile)?;
        let image = encode_root_image(root_tree, sectors)?;
        for (i, chunk) in image.chunks_exact(SECTOR_BYTES).enumerate() {
            if chunk.iter().any(|&b| b != 0) {
                handle.write_sector(&mut root, i as u64, chunk.try_into().unwrap(), &mut env.rng)?;
            }
        }
        Ok(Machine { config, boot, root, extra_disks: Vec::new(), ram: None, nested_vm: None })
    }

    pub fn attach_disk(&mut self, device: &str, vol: EncryptedVolume) {
        self.extra_disks.push((device.to_string(), vol));
    }

    pub fn set_guest(&mut self, vm: Machine) {
        self.nested_vm = Some(Box::new(vm));
    }

    pub fn config(&self) -> &MachineConfig {
        &self.config
    }

    pub fn kind(&self) -> MachineKind {
        self.config.kind
    }

    pub fn name(&self) -> &str {
        &self.config.name
    }

    pub fn is_on(&self) -> bool {
        self.ram.is_some()
    }

    pub fn guest(&self) -> Option<&Machine> {
        self.nested_vm.as_deref()
    }

    pub fn guest_mut(&mut self) -> Option<&mut Machine> {
        self.nested_vm.as_deref_mut()
    }

    pub fn boot_partition(&self) -> &FileTree {
        &self.boot
    }

    /// Direct access to the plaintext boot partition (offline tampering).
    pub fn boot_partition_mut(&mut self) -> &mut FileTree {
        &mut self.boot
    }

    pub fn root_volume(&self) -> &EncryptedVolume {
        &self.root
    }

    /// Raw access to the encrypted root disk, as an attacker with the
    /// hardware would have.
    pub fn root_volume_mut(&mut self) -> &mut EncryptedVolume {
        &mut self.root
    }

    pub fn extra_disks(&self) -> &[(String, EncryptedVolume)] {
        &self.extra_disks
    }

    pub fn keyfile(&self) -> Option<Keyfile> {
        read_keyfile(&self.boot)
    }

    /// On, and the root volume has no active keyslot left.
    pub fn is_sealed(&self) -> bool {
        self.is_on() && self.root.header().active_slots() == 0
    }

    fn ram(&self) -> Result<&Ram> {
        self.ram.as_ref().ok_or(MachineError::PoweredOff)
    }

    fn ram_mut(&mut self) -> Result<&mut Ram> {
        self.ram.as_mut().ok_or(MachineError::PoweredOff)
    }

    /// Working copy of the root tree (powered-on machines only).
    pub fn root_tree(&self) -> Option<&FileTree> {
        self.ram.as_ref().map(|r| &r.tree)
    }

    pub fn boot(&mut self, env: &mut SimEnv) -> Result<BootReport> {
        if self.ram.is_some() {
            return Err(MachineError::AlreadyRunning);
        }
        let keyfile = self.keyfile().ok_or(MachineError::MissingKeyfile)?;
        let liveness = Liveness::new();
        let handle = self.root.unlock(&keyfile).map_err(MachineError::SealedAndCold)?.bind(&liveness);
        let image = handle.read_all(&self.root).map_err(|e| MachineError::CorruptRoot(e.to_string()))?;
        let tree = decode_root_image(&image)?;
        let ssh_running = tree.exists(SSHD_BINARY);
        self.ram = Some(Ram {
            liveness,
            root_handle: handle,
            tree,
            image,
            firewall_v4: Ruleset::default(),
            firewall_v6: Ruleset::default(),
            ssh_running,
            web_running: false,
            guest_mounted: None,
            extra_handles: BTreeMap::new(),
            outbox: Vec::new(),
        });
        let cron = self.cron_lines();
        let mut report = BootReport { machine: self.config.name.clone(), cron_executed: Vec::new(), sealing_trigger: None };
        for line in cron {
            self.run_cron_line(&line, env)?;
            if line.contains("init_trusted_mode") {
                report.sealing_trigger = Some(line.clone());
            }
            report.cron_executed.push(line);
        }
        Ok(report)
    }

    fn cron_lines(&self) -> Vec<String> {
        self.root_tree()
            .and_then(|t| t.read_text(&self.config.cron_script))
            .unwrap_or_default()
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_string)
            .collect()
    }

    fn run_cron_line(&mut self, line: &str, _env: &mut SimEnv) -> Result<()> {
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["iptables-restore", file] | ["ip6tables-restore", file] => {
                let v6 = words[0].starts_with("ip6");
                let text = self.read_text(file).unwrap_or_default();
                let rules = Ruleset::parse(&text).unwrap_or_default();
                let ram = self.ram_mut()?;
                if v6 {
                    ram.firewall_v6 = rules;
                } else {
                    ram.firewall_v4 = rules;
                }
            }
            ["mount", dev, mnt] if Some(*dev) == self.config.guest_boot_device.as_deref() => {
                let mnt = tree::normalize(mnt)?;
                self.ram_mut()?.guest_mounted = Some(mnt);
            }
            _ => {}
        }
        Ok(())
    }

    /// Cuts power: RAM, keys and handles are gone. A nested guest goes down too.
    pub fn power_off(&mut self) {
        if let Some(mut ram) = self.ram.take() {
            ram.liveness.clear();
            ram.root_handle.invalidate();
            for h in ram.extra_handles.values_mut() {
                h.invalidate();
            }
        }
        if let Some(vm) = self.nested_vm.as_deref_mut() {
            vm.power_off();
        }
    }

    pub fn firewall(&self) -> Option<FirewallPolicy> {
        let ram = self.ram.as_ref()?;
        Some(FirewallPolicy {
            v4: ram.firewall_v4.clone(),
            v6: ram.firewall_v6.clone(),
            hosts_allow_present: ram.tree.exists("/etc/hosts.allow"),
            hosts_deny: ram.tree.read_text("/etc/hosts.deny").unwrap_or_default(),
        })
    }

    pub fn services(&self) -> Option<ServiceState> {
        let ram = self.ram.as_ref()?;
        Some(ServiceState {
            ssh: if ram.tree.exists(SSHD_BINARY) { SshPackage::Installed } else { SshPackage::Purged },
            ssh_running: ram.ssh_running,
            web_running: ram.web_running,
            cron_reboot: self.cron_lines(),
            outbox: ram.outbox.clone(),
        })
    }

    pub fn web_running(&self) -> bool {
        self.ram.as_ref().is_some_and(|r| r.web_running)
    }

    pub fn users(&self) -> Vec<UserAccount> {
        let Some(t) = self.root_tree() else { return Vec::new() };
        let passwd = t.read_text("/etc/passwd").unwrap_or_default();
        let shadow = t.read_text("/etc/shadow");
        parse_accounts(&passwd, shadow.as_deref())
    }

    pub fn outbox(&self) -> &[OutboundMail] {
        self.ram.as_ref().map(|r| r.outbox.as_slice()).unwrap_or(&[])
    }

    pub fn send_mail(&mut self, mail: OutboundMail) -> Result<()> {
        self.ram_mut()?.outbox.push(mail);
        Ok(())
    }

    fn resolve(&self, path: &str) -> Result<(Fs, String)> {
        let p = tree::normalize(path)?;
        if let Some(rel) = tree::strip_mount("/boot", &p) {
            return Ok((Fs::Boot, rel));
        }
        if let Some(mnt) = self.ram.as_ref().and_then(|r| r.guest_mounted.as_deref()) {
            if let Some(rel) = tree::strip_mount(mnt, &p) {
                return Ok((Fs::GuestBoot, rel));
            }
        }
        Ok((Fs::Root, p))
    }

    fn fs(&self, fs: Fs) -> Result<&FileTree> {
        match fs {
            Fs::Root => Ok(&self.ram()?.tree),
            Fs::Boot => Ok(&self.boot),
            Fs::GuestBoot => {
                Ok(&self.nested_vm.as_ref().ok_or_else(|| MachineError::NoSuchDevice("guest".into()))?.boot)
            }
        }
    }

    fn mutate<T>(&mut self, fs: Fs, env: &mut SimEnv, f: impl FnOnce(&mut FileTree) -> T) -> Result<T> {
        match fs {
            Fs::Root => self.edit_root(env, f),
            Fs::Boot => Ok(f(&mut self.boot)),
            Fs::GuestBoot => {
                let vm = self.nested_vm.as_mut().ok_or_else(|| MachineError::NoSuchDevice("guest".into()))?;
                Ok(f(&mut vm.boot))
            }
        }
    }

    /// Reads a node through the mount table.
    pub fn read_node(&self, path: &str) -> Option<Node> {
        let (fs, rel) = self.resolve(path).ok()?;
        self.fs(fs).ok()?.get(&rel).cloned()
    }

    pub fn read_text(&self, path: &str) -> Option<String> {
        match self.read_node(path)? {
            Node::File(b) => Some(String::from_utf8_lossy(&b).into_owned()),
            _ => None,
        }
    }

    pub fn write_file(&mut self, path: &str, bytes: impl Into<Vec<u8>>, env: &mut SimEnv) -> Result<()> {
        let (fs, rel) = self.resolve(path)?;
        let bytes = bytes.into();
        self.mutate(fs, env, |t| t.write_file(&rel, bytes))??;
        Ok(())
    }

    pub fn append_file(&mut self, path: &str, bytes: &[u8], env: &mut SimEnv) -> Result<()> {
        let (fs, rel) = self.resolve(path)?;
        self.mutate(fs, env, |t| t.append_file(&rel, bytes))??;
        Ok(())
    }

    /// Applies `f` to the root tree and writes the result through to disk.
    pub fn edit_root<T>(&mut self, env: &mut SimEnv, f: impl FnOnce(&mut FileTree) -> T) -> Result<T> {
        let ram = self.ram.as_mut().ok_or(MachineError::PoweredOff)?;
        let mut draft = ram.tree.clone();
        let out = f(&mut draft);
        let image = encode_root_image(&draft, self.root.sector_count())?;
        for (i, (new, old)) in image.chunks_exact(SECTOR_BYTES).zip(ram.image.chunks_exact(SECTOR_BYTES)).enumerate() {
            if new != old {
                ram.root_handle.write_sector(&mut self.root, i as u64, new.try_into().unwrap(), &mut env.rng)?;
            }
        }
        ram.image = image;
        ram.tree = draft;
        Ok(out)
    }

    /// Decrypts the root volume with the live key and checks it matches
    /// the RAM working tree.
    pub fn write_through_consistent(&self) -> bool {
        let Some(ram) = self.ram.as_ref() else { return false };
        match ram.root_handle.read_all(&self.root) {
            Ok(image) => decode_root_image(&image).is_ok_and(|t| t == ram.tree),
            Err(_) => false,
        }
    }

    /// The filesystem as seen from inside: root tree, boot partition at
    /// `/boot`, and the guest boot partition if mounted.
    pub fn view(&self) -> Result<FileTree> {
        let ram = self.ram()?;
        let mut v = ram.tree.clone();
        v.graft("/boot", &self.boot)?;
        if let (Some(mnt), Some(vm)) = (ram.guest_mounted.as_deref(), self.nested_vm.as_deref()) {
            v.graft(mnt, &vm.boot)?;
        }
        Ok(v)
    }

    fn volume_for(&mut self, device: &str) -> Option<&mut EncryptedVolume> {
        if device == self.config.root_device {
            return Some(&mut self.root);
        }
        if Some(device) == self.config.guest_root_device.as_deref() {
            return self.nested_vm.as_deref_mut().map(|vm| &mut vm.root);
        }
        self.extra_disks.iter_mut().find(|(d, _)| d == device).map(|(_, v)| v)
    }

    /// Opens an attached data disk into RAM.
    pub fn unlock_extra(&mut self, device: &str, keyfile: &Keyfile) -> Result<()> {
        let vol = self
            .extra_disks
            .iter()
            .find(|(d, _)| d == device)
            .map(|(_, v)| v)
            .ok_or_else(|| MachineError::NoSuchDevice(device.to_string()))?;
        let ram = self.ram.as_ref().ok_or(MachineError::PoweredOff)?;
        let handle = vol.unlock(keyfile)?.bind(&ram.liveness);
        self.ram_mut()?.extra_handles.insert(device.to_string(), handle);
        Ok(())
    }

    pub fn extra_unlocked(&self, device: &str) -> bool {
        self.ram.as_ref().is_some_and(|r| r.extra_handles.get(device).is_some_and(|h| h.is_valid()))
    }

    pub fn read_extra(&self, device: &str, sector: u64) -> Result<Vec<u8>> {
        let ram = self.ram()?;
        let handle = ram.extra_handles.get(device).ok_or(VolumeError::StaleHandle)?;
        let vol = self
            .extra_disks
            .iter()
            .find(|(d, _)| d == device)
            .map(|(_, v)| v)
            .ok_or_else(|| MachineError::NoSuchDevice(device.to_string()))?;
        Ok(handle.read_sector(vol, sector)?.to_vec())
    }

    pub fn snapshot_image(&self) -> Result<DiskImagePair> {
        if self.is_on() {
            return Err(MachineError::MachineRunning);
        }
        Ok(DiskImagePair { boot: self.boot.clone(), root: self.root.clone(), extra: self.extra_disks.clone() })
    }

    /// A powered-off machine built straight from stored disk images.
    pub fn from_image(config: MachineConfig, images: &DiskImagePair) -> Machine {
        Machine {
            config,
            boot: images.boot.clone(),
            root: images.root.clone(),
            extra_disks: images.extra.clone(),
            ram: None,
            nested_vm: None,
        }
    }

    pub fn restore_image(&mut self, images: &DiskImagePair) -> Result<()> {
        if self.is_on() {
            return Err(MachineError::MachineRunning);
        }
        if images.root.sector_count() != self.root.sector_count() {
            return Err(MachineError::GeometryMismatch(format!(
                "root volume has {} sectors, image has {}",
                self.root.sector_count(),
                images.root.sector_count()
            )));
        }
        let ours: Vec<(&str, u64)> = self.extra_disks.iter().map(|(d, v)| (d.as_str(), v.sector_count())).collect();
        let theirs: Vec<(&str, u64)> = images.extra.iter().map(|(d, v)| (d.as_str(), v.sector_count())).collect();
        if ours != theirs {
            return Err(MachineError::GeometryMismatch("attached disks differ".into()));
        }
        self.boot = images.boot.clone();
        self.root = images.root.clone();
        self.extra_disks = images.extra.clone();
        Ok(())
    }

    /// Runs one step. Non-zero exit status comes back as `StepFailure`.
    pub fn exec_step(&mut self, step: &SealingStep, env: &mut SimEnv) -> Result<StepRecord> {
        self.ram()?;
        let rec = self.apply(step, env)?;
        if rec.status == 0 {
            Ok(rec)
        } else {
            Err(MachineError::StepFailure(rec))
        }
    }

    fn apply(&mut self, step: &SealingStep, env: &mut SimEnv) -> Result<StepRecord> {
        use SealingStep::*;
        let cmd = step.command();
        let rec = match step {
            RemoveUser { name } => self.remove_user(cmd, name, env)?,
            RemoveHostsAllow => match self.read_node("/etc/hosts.allow") {
                Some(_) => {
                    self.edit_root(env, |t| t.remove("/etc/hosts.allow"))??;
                    StepRecord::ok(cmd, "")
                }
                None => StepRecord::fail(cmd, "rm: cannot remove '/etc/hosts.allow': No such file or directory\n", 1),
            },
            ShowFile { path } => match self.read_node(path) {
                Some(Node::File(b)) => StepRecord::ok(cmd, String::from_utf8_lossy(&b).into_owned()),
                Some(_) => StepRecord::fail(cmd, format!("cat: {path}: Is a directory\n"), 1),
                None => StepRecord::fail(cmd, format!("cat: {path}: No such file or directory\n"), 1),
            },
            SetOutputDrop => {
                self.ram_mut()?.firewall_v4.output_policy = Policy::Drop;
                StepRecord::ok(cmd, "")
            }
            DeleteInputRule { index } => {
                if self.ram_mut()?.firewall_v4.delete_input(*index) {
                    StepRecord::ok(cmd, "")
                } else {
                    StepRecord::fail(cmd, "iptables: Index of deletion too big.\n", 1)
                }
            }
            SaveFirewall { v6 } => {
                let ram = self.ram()?;
                StepRecord::ok(cmd, if *v6 { ram.firewall_v6.save() } else { ram.firewall_v4.save() })
            }
            ListFirewall { v6 } => {
                let ram = self.ram()?;
                StepRecord::ok(cmd, if *v6 { ram.firewall_v6.list() } else { ram.firewall_v4.list() })
            }
            PurgeSsh => {
                let installed = self.read_node(SSHD_BINARY).is_some();
                if installed {
                    self.edit_root(env, |t| {
                        for f in SSH_PACKAGE_FILES {
                            let _ = t.remove(f);
                        }
                        let _ = t.remove("/etc/ssh");
                        let _ = t.remove("/usr/share/doc/openssh-server");
                    })?;
                    self.ram_mut()?.ssh_running = false;
                    StepRecord::ok(
                        cmd,
                        "Removing openssh-server ...\nPurging configuration files for openssh-server ...\n",
                    )
                } else {
                    StepRecord::ok(cmd, "Package 'openssh-server' is not installed, so not removed\n")
                }
            }
            Autoremove => StepRecord::ok(cmd, "0 upgraded, 0 newly installed, 0 to remove and 0 not upgraded.\n"),
            SshStatus => {
                let ram = self.ram()?;
                if !ram.tree.exists(SSHD_BINARY) {
                    StepRecord::fail(cmd, "Unit sshd.service could not be found.\n", 4)
                } else if ram.ssh_running {
                    StepRecord::ok(cmd, "ssh.service - OpenBSD Secure Shell server\n   Active: active (running)\n")
                } else {
                    StepRecord::fail(cmd, "ssh.service - OpenBSD Secure Shell server\n   Active: inactive (dead)\n", 3)
                }
            }
            LuksErase { device } => match self.volume_for(device) {
                Some(vol) => {
                    vol.erase_keyslots();
                    StepRecord::ok(cmd, "")
                }
                None => no_device(cmd, device),
            },
            LuksDump { device } => match self.volume_for(device) {
                Some(vol) => StepRecord::ok(cmd, vol.dump().to_string()),
                None => no_device(cmd, device),
            },
            Reencrypt { device, keyfile, key_bits } => self.reencrypt(cmd, device, keyfile, *key_bits, env)?,
            ZipTree { archive, source } => {
                let view = self.view()?;
                match tree::pack(&view, source) {
                    Ok(bytes) => {
                        let listing: String =
                            view.descendants(source).map(|(p, _)| format!("  adding: {}\n", &p[1..])).collect();
                        self.write_file(archive, bytes, env)?;
                        StepRecord::ok(cmd, listing)
                    }
                    Err(_) => StepRecord::fail(cmd, format!("zip error: Nothing to do! ({archive})\n"), 12),
                }
            }
            ListAll => StepRecord::ok(cmd, self.view()?.listing("/")),
            HashTree { root } => match compute_root(&self.view()?, root) {
                Ok(m) => StepRecord::ok(cmd, m.to_string()),
                Err(e) => StepRecord::fail(cmd, format!("rhash: {e}\n"), 1),
            },
            CopyTo { source, dest_dir } | MoveTo { source, dest_dir } => {
                let is_move = matches!(step, MoveTo { .. });
                let tool = if is_move { "mv" } else { "cp" };
                match self.read_node(source) {
                    Some(Node::File(bytes)) => {
                        let dest = format!("{}/{}", dest_dir.trim_end_matches('/'), tree::file_name(source));
                        self.write_file(&dest, bytes, env)?;
                        if is_move {
                            let (fs, rel) = self.resolve(source)?;
                            self.mutate(fs, env, |t| t.remove(&rel))??;
                        }
                        StepRecord::ok(cmd, "")
                    }
                    _ => StepRecord::fail(cmd, format!("{tool}: cannot stat '{source}': No such file or directory\n"), 1),
                }
            }
            Chown { path, .. } => match self.read_node(path) {
                Some(_) => StepRecord::ok(cmd, ""),
                None => StepRecord::fail(cmd, format!("chown: cannot access '{path}': No such file or directory\n"), 1),
            },
            Unmount { mount } => {
                let ram = self.ram_mut()?;
                if ram.guest_mounted.as_deref() == Some(tree::normalize(mount)?.as_str()) {
                    ram.guest_mounted = None;
                    StepRecord::ok(cmd, "")
                } else {
                    StepRecord::fail(cmd, format!("umount: {mount}: not mounted.\n"), 32)
                }
            }
            StartVm { domain } => match self.nested_vm.as_deref_mut() {
                Some(vm) if vm.config.name == *domain => match vm.boot(env) {
                    Ok(_) => StepRecord::ok(cmd, format!("Domain {domain} started\n")),
                    Err(e) => StepRecord::fail(cmd, format!("error: Failed to start domain {domain}\nerror: {e}\n"), 1),
                },
                _ => StepRecord::fail(cmd, format!("error: failed to get domain '{domain}'\n"), 1),
            },
            LdapDump { dest } => {
                let date = env.clock.date();
                let config = self.read_text(LDAP_CONFIG_DB);
                let data = self.read_text(LDAP_DATA_DB);
                match (config, data) {
                    (Some(c), Some(d)) => {
                        let text = format!("{date}\n{c}{d}");
                        self.append_file(dest, text.as_bytes(), env)?;
                        StepRecord::ok(cmd, "")
                    }
                    _ => StepRecord::fail(cmd, "slapcat: database not configured\n", 1),
                }
            }
            StartWeb => {
                if self.read_node(APACHE_BINARY).is_some() {
                    self.ram_mut()?.web_running = true;
                    StepRecord::ok(cmd, "")
                } else {
                    StepRecord::fail(cmd, "Failed to start apache2.service: Unit apache2.service not found.\n", 5)
                }
            }
            WriteDate { path } => {
                let line = format!("{}\n", env.clock.date());
                self.append_file(path, line.as_bytes(), env)?;
                StepRecord::ok(cmd, "")
            }
            SendMail { subject, to, body } => match self.read_text(body) {
                Some(text) => {
                    self.send_mail(OutboundMail { to: to.clone(), subject: subject.clone(), body: text })?;
                    StepRecord::ok(cmd, "")
                }
                None => StepRecord::fail(cmd, format!("{body}: No such file or directory\n"), 1),
            },
        };
        Ok(rec)
    }

    fn remove_user(&mut self, cmd: String, name: &str, env: &mut SimEnv) -> Result<StepRecord> {
        let passwd = self.read_text("/etc/passwd").unwrap_or_default();
        let present = passwd.lines().any(|l| l.split(':').next() == Some(name));
        if !present {
            return Ok(StepRecord::fail(cmd, format!("userdel: user '{name}' does not exist\n"), 6));
        }
        let prefix = format!("{name}:");
        self.edit_root(env, |t| -> Result<()> {
            for db in ["/etc/passwd", "/etc/shadow", "/etc/group"] {
                let Some(text) = t.read_text(db) else { continue };
                let kept: String = text
                    .lines()
                    .filter(|l| !l.starts_with(&prefix))
                    .map(|l| {
                        if db == "/etc/group" {
                            strip_group_member(l, name) + "\n"
                        } else {
                            format!("{l}\n")
                        }
                    })
                    .collect();
                t.write_file(db, kept)?;
            }
            Ok(())
        })??;
        Ok(StepRecord::ok(cmd, ""))
    }

    fn reencrypt(
        &mut self,
        cmd: String,
        device: &str,
        keyfile_path: &str,
        key_bits: u32,
        env: &mut SimEnv,
    ) -> Result<StepRecord> {
        let keyfile = match self.read_node(keyfile_path) {
            Some(Node::File(b)) => match Keyfile::from_bytes(&b) {
                Ok(k) => k,
                Err(e) => return Ok(StepRecord::fail(cmd, format!("{e}\n"), 1)),
            },
            _ => return Ok(StepRecord::fail(cmd, format!("Failed to open key file {keyfile_path}.\n"), 1)),
        };
        let guest_running = Some(device) == self.config.guest_root_device.as_deref()
            && self.nested_vm.as_ref().is_some_and(|vm| vm.is_on());
        if guest_running || device == self.config.root_device {
            return Ok(StepRecord::fail(cmd, format!("Cannot exclusively open {device}, device in use.\n"), 1));
        }
        let Some(vol) = self.volume_for(device) else { return Ok(no_device(cmd, device)) };
        if vol.spec().master_key_bits != key_bits {
            return Ok(StepRecord::fail(cmd, format!("Unsupported key length {key_bits} bits.\n"), 1));
        }
        match vol.reencrypt(&keyfile, &mut env.rng) {
            Ok(()) => Ok(StepRecord::ok(
                cmd,
                format!("Key slot 0 unlocked.\nReencryption finished, {} sectors rewritten.\n", vol.sector_count()),
            )),
            Err(e) => Ok(StepRecord::fail(cmd, format!("{e}\n"), 1)),
        }
    }
}

fn strip_group_member(line: &str, name: &str) -> String {
    let mut f: Vec<String> = line.split(':').map(str::to_string).collect();
    if f.len() == 4 {
        f[3] = f[3].split(',').filter(|m| !m.is_empty() && *m != name).collect::<Vec<_>>().join(",");
    }
    f.join(":")
}

fn no_device(cmd: String, device: &str) -> StepRecord {
    StepRecord::fail(cmd, format!("Device {device} doesn't exist or access denied.\n"), 4)
}
