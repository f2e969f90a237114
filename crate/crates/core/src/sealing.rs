//! Dual-stage sealing: provisioning a host with a nested VM, running the
//! host and VM sealing plans, and assembling the published bundle.
//!
//! The host erases its own keyslots, then reencrypts the (powered-off) VM
//! disk under a fresh master key using the VM's keyfile, and boots the VM.
//! The VM then erases its own keyslots. Nobody ever held a copy of the VM's
//! new header, so header backups taken before sealing are useless against it.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::escrow::{self, KeyShare};
use crate::machine::{
    DiskImagePair, Machine, MachineConfig, MachineError, SealingStep, StepRecord, APACHE_BINARY, LDAP_CONFIG_DB,
    LDAP_DATA_DB, SSHD_BINARY, SSH_PACKAGE_FILES,
};
use crate::manifest::{default_hash_roots, sha3_hex, HashRoot};
use crate::services::{CredentialDirectory, RankingOrder};
use crate::sim::SimEnv;
use crate::tree::FileTree;
use crate::volume::{CipherSpec, EncryptedVolume, Keyfile, DEFAULT_KDF_ITERATIONS, SECTOR_BYTES};

pub const HOST_LOG: &str = "0_init_trusted_mode_host.log";
pub const VM_LOG: &str = "1_init_trusted_mode.log";
pub const GUEST_BOOT_MOUNT: &str = "/mnt";
pub const LOGIN_USER: &str = "trust";
pub const VAULT_DEVICE: &str = "/dev/vdb";
/// Every file the VM webroot must hold once sealing completes.
pub const BUNDLE_FILES: &[&str] =
    &[HOST_LOG, VM_LOG, "etc-host.zip", "root-host.zip", "etc-vm.zip", "trust-vm.zip", "ldap.txt"];
const BUNDLE_INDEX: &str = "index.sha3";

#[derive(Debug, Error)]
pub enum SealError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("precondition violated: {0}")]
    NotReady(String),
    #[error("server is already sealed")]
    AlreadySealed,
    #[error("no sealing trigger is armed in the boot cron script")]
    NotArmed,
    #[error("critical step failed during {stage:?} sealing: {}", failed_command(.log))]
    CriticalStepFailure { stage: Stage, log: SealingLog },
    #[error("webroot is missing published files: {0:?}")]
    WebrootIncomplete(Vec<String>),
    #[error("malformed bundle: {0}")]
    MalformedBundle(String),
    #[error(transparent)]
    Machine(#[from] MachineError),
    #[error(transparent)]
    Volume(#[from] crate::volume::VolumeError),
    #[error(transparent)]
    Escrow(#[from] escrow::EscrowError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

fn failed_command(log: &SealingLog) -> String {
    log.records.iter().rev().find(|r| r.status != 0).map(|r| r.command.clone()).unwrap_or_default()
}

pub type Result<T, E = SealError> = std::result::Result<T, E>;

/// Operator configuration, loadable from a TOML key-value file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    /// 1-based INPUT rule index of the ssh rule on the host.
    pub host_ssh_rule: usize,
    pub vm_ssh_rule: usize,
    pub mail_destination: String,
    pub server_address: String,
    pub webroot: String,
    /// Roots hashed by the sealing scripts; `/dir/*` means one level deep.
    pub hash_roots: Vec<String>,
    pub kdf_iterations: u32,
    pub millionaires_order: RankingOrder,
    /// `name:password` entries seeded into the external directory.
    pub ldap_users: Vec<String>,
    /// Attach a provider-keyed data vault to the VM.
    pub vault: bool,
    /// Split the reencrypted VM keyslot among this many escrow parties.
    pub escrow_parties: Option<usize>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            host_ssh_rule: 4,
            vm_ssh_rule: 5,
            mail_destination: "admin@example.org".into(),
            server_address: "192.0.2.17".into(),
            webroot: "/var/www/log".into(),
            hash_roots: default_hash_roots()
                .into_iter()
                .map(|r| if r.recursive { r.path } else { format!("{}/*", r.path) })
                .collect(),
            kdf_iterations: DEFAULT_KDF_ITERATIONS,
            millionaires_order: RankingOrder::Descending,
            ldap_users: vec!["alice:wonderland".into(), "bob:builder".into()],
            vault: true,
            escrow_parties: None,
        }
    }
}

impl ServerConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ServerConfig = toml::from_str(text).map_err(|e| SealError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SealError::InvalidConfig(m));
        if self.host_ssh_rule == 0 || self.vm_ssh_rule == 0 || self.host_ssh_rule > 16 || self.vm_ssh_rule > 16 {
            return bad("ssh rule indices must be between 1 and 16".into());
        }
        if !self.mail_destination.contains('@') || self.mail_destination.contains(char::is_whitespace) {
            return bad(format!("bad mail destination {:?}", self.mail_destination));
        }
        if !self.webroot.starts_with("/var/www/") {
            return bad(format!("webroot {:?} must live under /var/www", self.webroot));
        }
        if self.hash_roots.is_empty() {
            return bad("hash root list is empty".into());
        }
        for r in self.hash_roots()? {
            if !r.path.starts_with('/') {
                return bad(format!("hash root {:?} is not absolute", r.path));
            }
        }
        if self.kdf_iterations == 0 {
            return bad("kdf_iterations must be positive".into());
        }
        for u in &self.ldap_users {
            if u.split_once(':').is_none_or(|(n, p)| n.is_empty() || p.is_empty()) {
                return bad(format!("ldap user entry {u:?} is not name:password"));
            }
        }
        if self.escrow_parties.is_some_and(|n| n < 2) {
            return bad("escrow needs at least two parties".into());
        }
        Ok(())
    }

    pub fn hash_roots(&self) -> Result<Vec<HashRoot>> {
        self.hash_roots
            .iter()
            .map(|r| match r.strip_suffix("/*") {
                Some(dir) => Ok(HashRoot::shallow(dir)),
                None if r.contains('*') => Err(SealError::InvalidConfig(format!("unsupported glob in {r:?}"))),
                None => Ok(HashRoot::recursive(r)),
            })
            .collect()
    }

    pub fn cipher_spec(&self) -> CipherSpec {
        CipherSpec::with_iterations(self.kdf_iterations)
    }

    pub fn ldap_accounts(&self) -> Vec<(String, String)> {
        self.ldap_users
            .iter()
            .filter_map(|u| u.split_once(':'))
            .map(|(n, p)| (n.to_string(), p.to_string()))
            .collect()
    }

    pub fn mail_subject(&self) -> String {
        format!("trusted server running@{}", self.server_address)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Host,
    Vm,
}

/// Ordered steps for one stage plus where its trace is written.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SealingPlan {
    pub stage: Stage,
    pub log_path: String,
    pub steps: Vec<SealingStep>,
}

fn firewall_listing() -> Vec<SealingStep> {
    vec![
        SealingStep::SaveFirewall { v6: false },
        SealingStep::ListFirewall { v6: false },
        SealingStep::SaveFirewall { v6: true },
        SealingStep::ListFirewall { v6: true },
        SealingStep::ShowFile { path: "/etc/hosts.allow".into() },
        SealingStep::ShowFile { path: "/etc/hosts.deny".into() },
    ]
}

fn ssh_removal() -> Vec<SealingStep> {
    vec![SealingStep::PurgeSsh, SealingStep::Autoremove, SealingStep::SshStatus]
}

impl SealingPlan {
    /// Host stage. The administrator's manual pre-reboot commands come
    /// first, followed by the commands of the reboot-triggered script.
    pub fn host(cfg: &ServerConfig) -> Result<Self> {
        let host = MachineConfig::host();
        let vm = MachineConfig::vm();
        let guest_root = host.guest_root_device.clone().expect("host has a guest disk");
        let log_path = format!("/root/{HOST_LOG}");
        let mut steps = vec![
            SealingStep::RemoveUser { name: LOGIN_USER.into() },
            SealingStep::RemoveHostsAllow,
            SealingStep::ShowFile { path: "/etc/hosts.allow".into() },
            SealingStep::ShowFile { path: "/etc/hosts.deny".into() },
            SealingStep::SetOutputDrop,
            SealingStep::DeleteInputRule { index: cfg.host_ssh_rule },
        ];
        steps.extend(firewall_listing());
        steps.extend(ssh_removal());
        steps.extend([
            SealingStep::RemoveUser { name: LOGIN_USER.into() },
            SealingStep::ShowFile { path: "/etc/passwd".into() },
            SealingStep::ShowFile { path: "/etc/shadow".into() },
            SealingStep::LuksErase { device: host.root_device.clone() },
            SealingStep::LuksDump { device: host.root_device.clone() },
            SealingStep::LuksDump { device: guest_root.clone() },
            SealingStep::Reencrypt {
                device: guest_root.clone(),
                keyfile: format!("{GUEST_BOOT_MOUNT}/keyfile"),
                key_bits: cfg.cipher_spec().master_key_bits,
            },
            SealingStep::LuksDump { device: guest_root },
            SealingStep::ZipTree { archive: format!("{GUEST_BOOT_MOUNT}/etc-host.zip"), source: "/etc".into() },
            SealingStep::ZipTree { archive: format!("{GUEST_BOOT_MOUNT}/root-host.zip"), source: "/root".into() },
            SealingStep::ListAll,
        ]);
        steps.extend(cfg.hash_roots()?.into_iter().map(|root| SealingStep::HashTree { root }));
        steps.extend([
            SealingStep::CopyTo { source: log_path.clone(), dest_dir: GUEST_BOOT_MOUNT.into() },
            SealingStep::Unmount { mount: GUEST_BOOT_MOUNT.into() },
            SealingStep::StartVm { domain: vm.name },
        ]);
        Ok(SealingPlan { stage: Stage::Host, log_path, steps })
    }

    pub fn vm(cfg: &ServerConfig) -> Result<Self> {
        let vm = MachineConfig::vm();
        let webroot = cfg.webroot.trim_end_matches('/').to_string();
        let log_path = format!("{webroot}/{VM_LOG}");
        let mut steps = vec![
            SealingStep::RemoveHostsAllow,
            SealingStep::SetOutputDrop,
            SealingStep::DeleteInputRule { index: cfg.vm_ssh_rule },
        ];
        steps.extend(firewall_listing());
        steps.extend(ssh_removal());
        steps.extend([
            SealingStep::RemoveUser { name: LOGIN_USER.into() },
            SealingStep::ShowFile { path: "/etc/passwd".into() },
            SealingStep::ShowFile { path: "/etc/group".into() },
            SealingStep::ShowFile { path: "/etc/shadow".into() },
            SealingStep::LuksErase { device: vm.root_device.clone() },
            SealingStep::LuksDump { device: vm.root_device },
        ]);
        for f in [HOST_LOG, "etc-host.zip", "root-host.zip"] {
            steps.push(SealingStep::MoveTo { source: format!("/boot/{f}"), dest_dir: webroot.clone() });
        }
        steps.extend([
            SealingStep::Chown { owner: "www-data:www-data".into(), path: "/var/www".into(), recursive: false },
            SealingStep::ZipTree { archive: format!("{webroot}/etc-vm.zip"), source: "/etc".into() },
            SealingStep::ZipTree {
                archive: format!("{webroot}/trust-vm.zip"),
                source: format!("/home/{LOGIN_USER}"),
            },
            SealingStep::LdapDump { dest: format!("{webroot}/ldap.txt") },
            SealingStep::Chown { owner: "www-data:www-data".into(), path: "/var/www".into(), recursive: true },
            SealingStep::ListAll,
        ]);
        steps.extend(cfg.hash_roots()?.into_iter().map(|root| SealingStep::HashTree { root }));
        let date_file = format!("/home/{LOGIN_USER}/date.txt");
        steps.extend([
            SealingStep::StartWeb,
            SealingStep::WriteDate { path: date_file.clone() },
            SealingStep::SendMail { subject: cfg.mail_subject(), to: cfg.mail_destination.clone(), body: date_file },
        ]);
        Ok(SealingPlan { stage: Stage::Vm, log_path, steps })
    }

    /// Steps whose trace ends up in the published copy of this stage's log.
    /// The host log is copied to the VM mid-run, so its published copy ends
    /// with the copy command itself.
    pub fn published_steps(&self) -> &[SealingStep] {
        let end = self
            .steps
            .iter()
            .position(|s| matches!(s, SealingStep::CopyTo { source, .. } if *source == self.log_path))
            .map(|i| i + 1)
            .unwrap_or(self.steps.len());
        &self.steps[..end]
    }

    /// The plan as a `set -x` shell script.
    pub fn script(&self) -> String {
        let mut s = String::from("#!/bin/bash\nset -x\n");
        for step in &self.steps {
            s.push_str(&step.command());
            s.push('\n');
        }
        s
    }

    pub fn without(mut self, pred: impl Fn(&SealingStep) -> bool) -> Self {
        self.steps.retain(|s| !pred(s));
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Plans {
    pub host: SealingPlan,
    pub vm: SealingPlan,
}

impl Plans {
    pub fn dual_stage(cfg: &ServerConfig) -> Result<Self> {
        Ok(Plans { host: SealingPlan::host(cfg)?, vm: SealingPlan::vm(cfg)? })
    }

    /// Same protocol without the host's reencryption of the VM disk.
    pub fn single_stage(cfg: &ServerConfig) -> Result<Self> {
        let mut plans = Self::dual_stage(cfg)?;
        plans.host = plans.host.without(|s| matches!(s, SealingStep::Reencrypt { .. }));
        Ok(plans)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LogStatus {
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SealingLog {
    pub stage: Stage,
    pub records: Vec<StepRecord>,
    pub status: LogStatus,
}

impl SealingLog {
    pub fn render(&self) -> String {
        self.records.iter().map(StepRecord::render).collect()
    }
}

/// A freshly provisioned, unsealed server plus the secret its data
/// provider keeps to itself.
#[derive(Debug)]
pub struct PreparedServer {
    pub host: Machine,
    pub vault_key: Option<Keyfile>,
}

fn random_blob(env: &mut SimEnv, lo: usize, hi: usize) -> Vec<u8> {
    let n = env.rng.gen_range(lo..hi);
    let mut v = vec![0u8; n];
    env.rng.fill_bytes(&mut v);
    v
}

fn ruleset_file(ssh_index: usize, extra: &[&str]) -> String {
    let mut rules: Vec<String> = vec![
        "-i lo -j ACCEPT".into(),
        "-m state --state RELATED,ESTABLISHED -j ACCEPT".into(),
        "-p icmp -j ACCEPT".into(),
    ];
    rules.extend(extra.iter().map(|r| r.to_string()));
    let mut filler = 1;
    while rules.len() < ssh_index - 1 {
        rules.push(format!("-p tcp -m tcp --dport {} -j REJECT", 9000 + filler));
        filler += 1;
    }
    rules.insert(ssh_index - 1, "-p tcp -m tcp --dport 22 -j ACCEPT".into());
    let mut out = String::from("*filter\n:INPUT DROP [0:0]\n:FORWARD DROP [0:0]\n:OUTPUT ACCEPT [0:0]\n");
    for r in rules {
        out += &format!("-A INPUT {r}\n");
    }
    out + "COMMIT\n"
}

const IPTABLES_V6: &str = "*filter\n:INPUT DROP [0:0]\n:FORWARD DROP [0:0]\n:OUTPUT DROP [0:0]\n-A INPUT -i lo -j ACCEPT\nCOMMIT\n";

/// Filesystem content shared by host and VM.
fn base_tree(env: &mut SimEnv, hostname: &str, extra_users: &[&str]) -> FileTree {
    let mut t = FileTree::new();
    for d in [
        "/boot", "/home", "/lib64", "/lost+found", "/media", "/mnt", "/opt", "/srv", "/tmp", "/usr/games",
        "/usr/local/bin", "/usr/src", "/var/tmp",
    ] {
        t.mkdir_p(d).unwrap();
    }
    let mut passwd = String::from(
        "root:x:0:0:root:/root:/bin/bash\n\
         daemon:x:1:1:daemon:/usr/sbin:/usr/sbin/nologin\n\
         bin:x:2:2:bin:/bin:/usr/sbin/nologin\n\
         sys:x:3:3:sys:/dev:/usr/sbin/nologin\n\
         sync:x:4:65534:sync:/bin:/bin/sync\n",
    );
    let mut shadow = String::from("root:!:19000:0:99999:7:::\ndaemon:*:19000:0:99999:7:::\nbin:*:19000:0:99999:7:::\nsys:*:19000:0:99999:7:::\nsync:*:19000:0:99999:7:::\n");
    let mut group = String::from("root:x:0:\ndaemon:x:1:\nbin:x:2:\nsys:x:3:\nsudo:x:27:trust\n");
    for (i, u) in extra_users.iter().enumerate() {
        let id = 100 + i;
        passwd += &format!("{u}:x:{id}:{id}::/var/lib/{u}:/usr/sbin/nologin\n");
        shadow += &format!("{u}:*:19000:0:99999:7:::\n");
        group += &format!("{u}:x:{id}:\n");
    }
    let salt = hex::encode(random_blob(env, 8, 9));
    let hash = hex::encode(random_blob(env, 32, 33));
    passwd += &format!("{LOGIN_USER}:x:1000:1000:trust,,,:/home/{LOGIN_USER}:/bin/bash\n");
    shadow += &format!("{LOGIN_USER}:$6${salt}${hash}:19000:0:99999:7:::\n");
    group += &format!("{LOGIN_USER}:x:1000:\n");
    t.write_file("/etc/passwd", passwd).unwrap();
    t.write_file("/etc/shadow", shadow).unwrap();
    t.write_file("/etc/group", group).unwrap();
    t.write_file("/etc/hostname", format!("{hostname}\n")).unwrap();
    t.write_file("/etc/hosts", format!("127.0.0.1\tlocalhost\n127.0.1.1\t{hostname}\n")).unwrap();
    t.write_file("/etc/hosts.allow", "sshd: 10.0.0.0/255.0.0.0\n").unwrap();
    t.write_file("/etc/hosts.deny", "# /etc/hosts.deny: list of hosts that are _not_ allowed to access the system.\nALL: ALL\n")
        .unwrap();
    t.write_file("/root/.profile", "mesg n 2> /dev/null || true\n").unwrap();
    t.write_file("/etc/os-release", "PRETTY_NAME=\"Debian GNU/Linux 9 (stretch)\"\n").unwrap();
    for f in SSH_PACKAGE_FILES {
        let content = if *f == SSHD_BINARY { random_blob(env, 800, 1600) } else { random_blob(env, 40, 200) };
        t.write_file(f, content).unwrap();
    }
    for bin in ["bash", "cat", "ls", "mail", "rhash", "zip", "date"] {
        t.write_file(&format!("/usr/bin/{bin}"), random_blob(env, 400, 1200)).unwrap();
    }
    t.symlink("/usr/bin/X11", ".").unwrap();
    for bin in ["iptables", "userdel", "cryptsetup", "cryptsetup-reencrypt"] {
        t.write_file(&format!("/usr/sbin/{bin}"), random_blob(env, 400, 1200)).unwrap();
    }
    t.write_file("/sbin/init", random_blob(env, 300, 600)).unwrap();
    t.write_file("/lib/x86_64-linux-gnu/libc.so.6", random_blob(env, 1000, 2000)).unwrap();
    t.write_file("/lib64/ld-linux-x86-64.so.2", random_blob(env, 200, 400)).unwrap();
    t.write_file("/usr/lib/os-release", "ID=debian\n").unwrap();
    t.write_file("/usr/include/stdio.h", "/* stdio */\n").unwrap();
    t.write_file("/usr/share/common-licenses/GPL-3", random_blob(env, 200, 400)).unwrap();
    t.write_file("/var/log/installer/status", "installed\n").unwrap();
    t
}

fn host_tree(cfg: &ServerConfig, plan: &SealingPlan, env: &mut SimEnv) -> FileTree {
    let mut t = base_tree(env, "ts-host", &["libvirt-qemu"]);
    t.write_file("/etc/crontab", "@reboot root /root/cron-reboot.sh\n").unwrap();
    t.write_file("/usr/bin/virsh", random_blob(env, 400, 900)).unwrap();
    t.write_file("/etc/libvirt/qemu/debian9.xml", "<domain type='kvm'><name>debian9</name></domain>\n").unwrap();
    t.write_file("/root/iptables.v4", ruleset_file(cfg.host_ssh_rule, &[])).unwrap();
    t.write_file("/root/iptables.v6", IPTABLES_V6).unwrap();
    let guest_boot = MachineConfig::host().guest_boot_device.expect("host has guest boot device");
    t.write_file(
        "/root/cron-reboot.sh",
        format!(
            "#!/bin/bash\n## cron-reboot TS-Host\nmount {guest_boot} {GUEST_BOOT_MOUNT}\n\
             iptables-restore /root/iptables.v4\nip6tables-restore /root/iptables.v6\n\
             ## INIT TRUSTED MODE AND CREATE HOST SEALING:\n\
             /root/init_trusted_mode_reboot.sh > {} 2>&1\n",
            plan.log_path
        ),
    )
    .unwrap();
    t.write_file("/root/init_trusted_mode_reboot.sh", plan.script()).unwrap();
    t
}

fn vm_tree(cfg: &ServerConfig, plan: &SealingPlan, env: &mut SimEnv) -> FileTree {
    let mut t = base_tree(env, "debian9", &["www-data", "openldap"]);
    let home = format!("/home/{LOGIN_USER}");
    t.write_file("/etc/crontab", format!("@reboot root {home}/cron-reboot.sh\n")).unwrap();
    t.write_file(APACHE_BINARY, random_blob(env, 1000, 2000)).unwrap();
    t.write_file(
        "/etc/apache2/sites-enabled/trusted.conf",
        "<Location /app>\n  AuthType Basic\n  AuthBasicProvider ldap\n  AuthLDAPURL ldap://localhost/ou=people,dc=ts,dc=local?uid\n  Require valid-user\n</Location>\n",
    )
    .unwrap();
    t.write_file(
        LDAP_CONFIG_DB,
        "dn: cn=config\nobjectClass: olcGlobal\ncn: config\nolcSyncrepl: rid=001 provider=ldap://primary.example.org type=refreshOnly\n\n",
    )
    .unwrap();
    t.write_file(LDAP_DATA_DB, CredentialDirectory::with_users(&cfg.ldap_accounts(), &mut env.rng).to_ldif()).unwrap();
    t.write_file("/var/www/html/index.html", "<html><body>Trusted Server</body></html>\n").unwrap();
    t.mkdir_p(&cfg.webroot).unwrap();
    t.write_file(&format!("{home}/iptables.v4"), ruleset_file(cfg.vm_ssh_rule, &["-p tcp -m tcp --dport 443 -j ACCEPT"]))
        .unwrap();
    t.write_file(&format!("{home}/iptables.v6"), IPTABLES_V6).unwrap();
    t.write_file(
        &format!("{home}/cron-reboot.sh"),
        format!(
            "#!/bin/bash\n# cron-reboot TS-VM\niptables-restore {home}/iptables.v4\nip6tables-restore {home}/iptables.v6\n\
             ## INIT TRUSTED MODE AND CREATE VM SEALING LOG\n{home}/init_trusted_mode.sh > {} 2>&1\n",
            plan.log_path
        ),
    )
    .unwrap();
    t.write_file(&format!("{home}/init_trusted_mode.sh"), plan.script()).unwrap();
    // sensitive research data only ever held on the VM disk
    let rows: String = (0..env.rng.gen_range(8..24))
        .map(|i| format!("{i},{},{}\n", env.rng.gen_range(18..90), env.rng.gen_range(0..1_000_000)))
        .collect();
    t.write_file(&format!("{home}/research/cohort.csv"), format!("id,age,value\n{rows}")).unwrap();
    t
}

fn boot_partition(env: &mut SimEnv) -> FileTree {
    let mut b = FileTree::new();
    b.write_file("/vmlinuz-4.9.0-amd64", random_blob(env, 600, 1200)).unwrap();
    b.write_file("/initrd.img-4.9.0-amd64", random_blob(env, 600, 1200)).unwrap();
    b.write_file("/grub/grub.cfg", "linux /vmlinuz-4.9.0-amd64 root=/dev/mapper/root\n").unwrap();
    b
}

/// Room for logs, archives and service data written after provisioning.
const ROOT_SLACK_BYTES: usize = 512 * 1024;

/// Builds an unsealed host with its nested VM, both powered off.
pub fn prepare_trusted_server(cfg: &ServerConfig, env: &mut SimEnv) -> Result<PreparedServer> {
    cfg.validate()?;
    let plans = Plans::dual_stage(cfg)?;
    let spec = cfg.cipher_spec();

    let vm_root = vm_tree(cfg, &plans.vm, env);
    let vm_boot = boot_partition(env);
    let sectors = crate::machine::sectors_for(&vm_root, ROOT_SLACK_BYTES);
    let mut vm = Machine::install(MachineConfig::vm(), vm_boot, &vm_root, sectors, spec, env)?;

    let vault_key = if cfg.vault {
        let key = Keyfile::generate(&mut env.rng);
        let mut vault = EncryptedVolume::format(16, &key, spec, &mut env.rng)?;
        let handle = vault.unlock(&key)?;
        for i in 0..4 {
            let mut sector = [0u8; SECTOR_BYTES];
            let record = format!("vault record {i}: {}\n", hex::encode(random_blob(env, 16, 17)));
            sector[..record.len()].copy_from_slice(record.as_bytes());
            handle.write_sector(&mut vault, i, &sector, &mut env.rng)?;
        }
        vm.attach_disk(VAULT_DEVICE, vault);
        Some(key)
    } else {
        None
    };

    let host_root = host_tree(cfg, &plans.host, env);
    let host_boot = boot_partition(env);
    let sectors = crate::machine::sectors_for(&host_root, ROOT_SLACK_BYTES);
    let mut host = Machine::install(MachineConfig::host(), host_boot, &host_root, sectors, spec, env)?;
    host.set_guest(vm);
    Ok(PreparedServer { host, vault_key })
}

/// Pre-seal disk images of both machines.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServerImages {
    pub host: DiskImagePair,
    pub vm: DiskImagePair,
}

impl ServerImages {
    pub fn snapshot(host: &Machine) -> Result<Self> {
        let vm = host.guest().ok_or_else(|| SealError::NotReady("host has no guest VM".into()))?;
        if vm.is_on() {
            return Err(MachineError::MachineRunning.into());
        }
        Ok(ServerImages { host: host.snapshot_image()?, vm: vm.snapshot_image()? })
    }

    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        self.host.write_to_dir(&dir.join("host"))?;
        self.vm.write_to_dir(&dir.join("vm"))?;
        Ok(())
    }

    pub fn read_from_dir(dir: &Path) -> Result<Self> {
        Ok(ServerImages {
            host: DiskImagePair::read_from_dir(&dir.join("host"))?,
            vm: DiskImagePair::read_from_dir(&dir.join("vm"))?,
        })
    }

    /// Rebuilds a powered-off host (with guest) from these images.
    pub fn instantiate(&self) -> Machine {
        let mut vm = Machine::from_image(MachineConfig::vm(), &self.vm);
        let mut host = Machine::from_image(MachineConfig::host(), &self.host);
        vm.power_off();
        host.set_guest(vm);
        host
    }
}

/// Runs one plan on a running machine, tracing into the plan's log file.
pub fn run_plan(machine: &mut Machine, plan: &SealingPlan, env: &mut SimEnv) -> Result<SealingLog> {
    if !machine.is_on() {
        return Err(SealError::NotReady(format!("{} is not running", machine.name())));
    }
    let mut log = SealingLog { stage: plan.stage, records: Vec::new(), status: LogStatus::Complete };
    machine.write_file(&plan.log_path, Vec::new(), env)?;
    for step in &plan.steps {
        machine.append_file(&plan.log_path, format!("+ {}\n", step.command()).as_bytes(), env)?;
        let (record, failed) = match machine.exec_step(step, env) {
            Ok(r) => (r, false),
            Err(MachineError::StepFailure(r)) => (r, true),
            Err(e) => return Err(e.into()),
        };
        let trace = record.render();
        let output = &trace[trace.find('\n').map(|i| i + 1).unwrap_or(trace.len())..];
        // a shut-down machine (e.g. after starting a guest) cannot log further
        if machine.is_on() {
            machine.append_file(&plan.log_path, output.as_bytes(), env)?;
        }
        log.records.push(record);
        if failed && step.is_critical() {
            log.status = LogStatus::Failed;
            return Err(SealError::CriticalStepFailure { stage: plan.stage, log });
        }
    }
    Ok(log)
}

pub fn seal_host(host: &mut Machine, plan: &SealingPlan, env: &mut SimEnv) -> Result<SealingLog> {
    if !host.is_on() {
        return Err(SealError::NotReady("host must be booted".into()));
    }
    if host.guest().is_none_or(|vm| vm.is_on()) {
        return Err(SealError::NotReady("guest VM must exist and be powered off".into()));
    }
    if host.root_volume().header().active_slots() == 0 {
        return Err(SealError::AlreadySealed);
    }
    run_plan(host, plan, env)
}

pub fn seal_vm(vm: &mut Machine, plan: &SealingPlan, env: &mut SimEnv) -> Result<SealingLog> {
    if !vm.is_on() {
        return Err(SealError::NotReady("VM must be booted by the host".into()));
    }
    if vm.root_volume().header().active_slots() == 0 {
        return Err(SealError::AlreadySealed);
    }
    run_plan(vm, plan, env)
}

/// Everything a completed seal produces.
#[derive(Debug)]
pub struct SealOutcome {
    pub host_log: SealingLog,
    pub vm_log: SealingLog,
    pub bundle: PublishedBundle,
    /// Escrow fragments of the reencrypted VM keyslot; never published.
    pub escrow_shares: Vec<KeyShare>,
}

pub fn seal_all(host: &mut Machine, cfg: &ServerConfig, env: &mut SimEnv) -> Result<SealOutcome> {
    seal_all_with(host, &Plans::dual_stage(cfg)?, cfg, env)
}

/// Boot host, seal host, boot VM, seal VM, publish.
pub fn seal_all_with(host: &mut Machine, plans: &Plans, cfg: &ServerConfig, env: &mut SimEnv) -> Result<SealOutcome> {
    if host.is_on() {
        return Err(SealError::NotReady("host must start powered off".into()));
    }
    let report = match host.boot(env) {
        Ok(r) => r,
        Err(MachineError::SealedAndCold(_)) => return Err(SealError::AlreadySealed),
        Err(e) => return Err(e.into()),
    };
    if report.sealing_trigger.is_none() {
        return Err(SealError::NotArmed);
    }
    let host_log = seal_host(host, &plans.host, env)?;

    let vm = host.guest_mut().expect("checked by seal_host");
    if !vm.is_on() {
        return Err(SealError::NotReady("host plan did not start the VM".into()));
    }
    let escrow_shares = match cfg.escrow_parties {
        Some(n) => escrow::split_key(&escrow_secret(vm.root_volume()), n, &mut env.rng)?,
        None => Vec::new(),
    };
    let vm_log = seal_vm(vm, &plans.vm, env)?;
    let bundle = publish_bundle(vm, &cfg.webroot)?;
    Ok(SealOutcome { host_log, vm_log, bundle, escrow_shares })
}

/// The escrowed secret: slot 0's wrapped-key record, which together with the
/// surviving keyfile re-enables unlocking.
pub fn escrow_secret(vol: &EncryptedVolume) -> Vec<u8> {
    vol.header().slots[0].to_record()
}

/// Published files from the sealed VM's webroot.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PublishedBundle {
    files: BTreeMap<String, Vec<u8>>,
}

impl PublishedBundle {
    pub fn from_files(files: BTreeMap<String, Vec<u8>>) -> Self {
        PublishedBundle { files }
    }

    pub fn files(&self) -> &BTreeMap<String, Vec<u8>> {
        &self.files
    }

    pub fn files_mut(&mut self) -> &mut BTreeMap<String, Vec<u8>> {
        &mut self.files
    }

    pub fn get(&self, name: &str) -> Option<&[u8]> {
        self.files.get(name).map(Vec::as_slice)
    }

    pub fn text(&self, name: &str) -> Option<String> {
        self.get(name).map(|b| String::from_utf8_lossy(b).into_owned())
    }

    pub fn host_log(&self) -> Option<String> {
        self.text(HOST_LOG)
    }

    pub fn vm_log(&self) -> Option<String> {
        self.text(VM_LOG)
    }

    pub fn ldap_dump(&self) -> Option<String> {
        self.text("ldap.txt")
    }

    /// `<sha3-512>  <name>` for every artifact, sorted by name.
    pub fn index(&self) -> String {
        self.files.iter().map(|(n, b)| format!("{}  {n}\n", sha3_hex(b))).collect()
    }

    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (name, bytes) in &self.files {
            fs::write(dir.join(name), bytes)?;
        }
        fs::write(dir.join(BUNDLE_INDEX), self.index())?;
        Ok(())
    }

    /// Reads a bundle directory; the index must match the files.
    pub fn read_from_dir(dir: &Path) -> Result<Self> {
        let mut files = BTreeMap::new();
        let mut index = None;
        for entry in fs::read_dir(dir)? {
            let entry = entry?;
            if !entry.file_type()?.is_file() {
                continue;
            }
            let name = entry.file_name().into_string().map_err(|_| SealError::MalformedBundle("non-utf8 name".into()))?;
            let bytes = fs::read(entry.path())?;
            if name == BUNDLE_INDEX {
                index = Some(String::from_utf8_lossy(&bytes).into_owned());
            } else {
                files.insert(name, bytes);
            }
        }
        let bundle = PublishedBundle { files };
        match index {
            Some(ix) if ix == bundle.index() => Ok(bundle),
            Some(_) => Err(SealError::MalformedBundle("index does not match bundle contents".into())),
            None => Err(SealError::MalformedBundle(format!("missing {BUNDLE_INDEX}"))),
        }
    }
}

/// Collects the published webroot of a sealed, serving VM.
pub fn publish_bundle(vm: &Machine, webroot: &str) -> Result<PublishedBundle> {
    if !vm.is_sealed() {
        return Err(SealError::NotReady("VM is not sealed".into()));
    }
    if !vm.web_running() {
        return Err(SealError::NotReady("web service is not running".into()));
    }
    collect_webroot(vm, webroot)
}

/// Reads the webroot of a running VM without checking its sealed state.
pub fn collect_webroot(vm: &Machine, webroot: &str) -> Result<PublishedBundle> {
    let tree = vm.root_tree().ok_or(SealError::Machine(MachineError::PoweredOff))?;
    let webroot = crate::tree::normalize(webroot).map_err(|e| SealError::InvalidConfig(e.to_string()))?;
    let files: BTreeMap<String, Vec<u8>> = tree
        .children(&webroot)
        .filter_map(|(p, n)| match n {
            crate::tree::Node::File(b) => Some((crate::tree::file_name(p).to_string(), b.clone())),
            _ => None,
        })
        .collect();
    let missing: Vec<String> =
        BUNDLE_FILES.iter().filter(|f| !files.contains_key(**f)).map(|f| f.to_string()).collect();
    if !missing.is_empty() {
        return Err(SealError::WebrootIncomplete(missing));
    }
    Ok(PublishedBundle { files })
}

/// Puts both machines back to their pre-seal images, optionally resealing.
pub fn restore_pre_seal(
    host: &mut Machine,
    images: &ServerImages,
    reseal: bool,
    cfg: &ServerConfig,
    env: &mut SimEnv,
) -> Result<Option<SealOutcome>> {
    if host.is_on() || host.guest().is_some_and(|vm| vm.is_on()) {
        return Err(MachineError::MachineRunning.into());
    }
    host.restore_image(&images.host)?;
    host.guest_mut().ok_or_else(|| SealError::NotReady("host has no guest VM".into()))?.restore_image(&images.vm)?;
    if reseal {
        seal_all(host, cfg, env).map(Some)
    } else {
        Ok(None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::VolumeError;

    fn cfg() -> ServerConfig {
        ServerConfig { kdf_iterations: 64, ..ServerConfig::default() }
    }

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let c = ServerConfig::default();
        c.validate().unwrap();
        assert_eq!(ServerConfig::from_toml(&c.to_toml()).unwrap(), c);
        let partial = ServerConfig::from_toml("host_ssh_rule = 2\nmail_destination = \"x@y.z\"\n").unwrap();
        assert_eq!(partial.host_ssh_rule, 2);
        assert_eq!(partial.vm_ssh_rule, 5);
    }

    #[test]
    fn bad_configs_are_rejected() {
        for text in [
            "host_ssh_rule = 0",
            "mail_destination = \"nobody\"",
            "webroot = \"/tmp/log\"",
            "hash_roots = []",
            "hash_roots = [\"/usr/*/bin\"]",
            "kdf_iterations = 0",
            "ldap_users = [\"alice\"]",
            "escrow_parties = 1",
            "bogus_key = 1",
        ] {
            assert!(ServerConfig::from_toml(text).is_err(), "{text} accepted");
        }
    }

    #[test]
    fn plans_have_required_endings() {
        let plans = Plans::dual_stage(&cfg()).unwrap();
        let h = &plans.host.steps;
        assert!(matches!(h[h.len() - 3], SealingStep::CopyTo { .. }));
        assert!(matches!(h[h.len() - 1], SealingStep::StartVm { .. }));
        let v = &plans.vm.steps;
        assert!(matches!(v[v.len() - 3], SealingStep::StartWeb));
        assert!(matches!(v[v.len() - 1], SealingStep::SendMail { .. }));
        assert_eq!(plans.host.published_steps().len(), h.len() - 2);
        assert_eq!(plans.vm.published_steps().len(), v.len());
        assert!(plans.host.script().contains("iptables -D INPUT 4\n"));
        assert!(plans.vm.script().contains("iptables -D INPUT 5\n"));
        assert!(plans.host.script().contains("cryptsetup-reencrypt -v -d /mnt/keyfile -l 512 /dev/sdb2\n"));
        assert!(plans.vm.script().contains("rhash --sha3-512 /usr/bin/*\n"));
    }

    #[test]
    fn prepared_server_boots_with_one_active_slot_per_disk() {
        let mut env = SimEnv::seeded(1);
        let mut s = prepare_trusted_server(&cfg(), &mut env).unwrap();
        assert_eq!(s.host.root_volume().header().active_slots(), 1);
        let vm = s.host.guest().unwrap();
        assert_eq!(vm.root_volume().header().active_slots(), 1);
        assert!(vm.root_volume().dump().slots[0]);
        let report = s.host.boot(&mut env).unwrap();
        assert!(report.sealing_trigger.is_some());
        assert_eq!(s.host.firewall().unwrap().v4.input_rules[3], "-p tcp -m tcp --dport 22 -j ACCEPT");
        assert!(s.host.read_node("/mnt/keyfile").is_some());
        let vm_tree = s.host.guest().unwrap().snapshot_image().unwrap().open_root_tree().unwrap();
        assert!(vm_tree.descendants("/var/www/log").next().is_none());
    }

    #[test]
    fn full_seal_reaches_sealed_state() {
        let mut env = SimEnv::seeded(2);
        let c = cfg();
        let mut s = prepare_trusted_server(&c, &mut env).unwrap();
        let vm_wrapped_before = s.host.guest().unwrap().root_volume().header().slots[0].clone();
        let out = seal_all(&mut s.host, &c, &mut env).unwrap();

        assert_eq!(out.host_log.status, LogStatus::Complete);
        assert!(s.host.root_volume().dump().all_empty());
        let vm = s.host.guest().unwrap();
        assert!(vm.root_volume().dump().all_empty());
        assert!(vm.is_sealed() && vm.web_running());
        for m in [&s.host, s.host.guest().unwrap()] {
            let svc = m.services().unwrap();
            assert_eq!(svc.ssh, crate::machine::SshPackage::Purged);
            assert!(m.users().iter().all(|u| u.name != LOGIN_USER));
            assert_eq!(m.firewall().unwrap().v4.output_policy, crate::machine::Policy::Drop);
            assert!(!m.firewall().unwrap().v4.allows_ssh());
            assert!(m.write_through_consistent());
        }
        let mails = vm.outbox();
        assert_eq!(mails.len(), 1);
        assert!(mails[0].subject.contains("trusted server running"));

        // host log dumps show the VM header changing under reencryption
        let dumps: Vec<_> = out.host_log.records.iter().filter(|r| r.command.ends_with("luksDump /dev/sdb2")).collect();
        assert_eq!(dumps.len(), 2);
        assert_ne!(dumps[0].output, dumps[1].output);
        assert_ne!(vm_wrapped_before, crate::volume::KeySlot::Empty);

        // the second userdel on the host is the expected, tolerated failure
        let userdels: Vec<_> = out.host_log.records.iter().filter(|r| r.command == "userdel -f trust").collect();
        assert_eq!(userdels.iter().map(|r| r.status).collect::<Vec<_>>(), vec![0, 6]);

        for f in BUNDLE_FILES {
            assert!(out.bundle.get(f).is_some(), "{f} missing");
        }
        assert_eq!(out.bundle.vm_log().unwrap(), out.vm_log.render());
        let published_host = out.bundle.host_log().unwrap();
        assert!(out.host_log.render().starts_with(&published_host));
        assert!(published_host.ends_with(&format!("+ cp /root/{HOST_LOG} /mnt\n")));
    }

    #[test]
    fn sealed_server_is_cold_after_power_off() {
        let mut env = SimEnv::seeded(3);
        let c = cfg();
        let mut s = prepare_trusted_server(&c, &mut env).unwrap();
        seal_all(&mut s.host, &c, &mut env).unwrap();
        s.host.power_off();
        assert!(!s.host.guest().unwrap().is_on());
        assert!(matches!(s.host.boot(&mut env), Err(MachineError::SealedAndCold(VolumeError::KeyslotsEmpty))));
        let vm = s.host.guest_mut().unwrap();
        assert!(matches!(vm.boot(&mut env), Err(MachineError::SealedAndCold(VolumeError::KeyslotsEmpty))));
        assert!(matches!(seal_all(&mut s.host, &c, &mut env), Err(SealError::AlreadySealed)));
    }

    #[test]
    fn sealing_while_running_is_refused() {
        let mut env = SimEnv::seeded(4);
        let c = cfg();
        let mut s = prepare_trusted_server(&c, &mut env).unwrap();
        s.host.boot(&mut env).unwrap();
        assert!(matches!(seal_all(&mut s.host, &c, &mut env), Err(SealError::NotReady(_))));
    }

    #[test]
    fn critical_failure_aborts() {
        let mut env = SimEnv::seeded(5);
        let c = cfg();
        let mut s = prepare_trusted_server(&c, &mut env).unwrap();
        let mut plans = Plans::dual_stage(&c).unwrap();
        for step in plans.host.steps.iter_mut() {
            if let SealingStep::LuksErase { device } = step {
                *device = "/dev/sdx2".into();
            }
        }
        match seal_all_with(&mut s.host, &plans, &c, &mut env) {
            Err(SealError::CriticalStepFailure { stage: Stage::Host, log }) => {
                assert_eq!(log.status, LogStatus::Failed);
                assert_eq!(log.records.last().unwrap().command, "cryptsetup luksErase /dev/sdx2");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn restore_and_reseal_uses_a_fresh_key() {
        let mut env = SimEnv::seeded(6);
        let c = cfg();
        let mut s = prepare_trusted_server(&c, &mut env).unwrap();
        let images = ServerImages::snapshot(&s.host).unwrap();
        seal_all(&mut s.host, &c, &mut env).unwrap();
        assert!(matches!(
            restore_pre_seal(&mut s.host, &images, false, &c, &mut env),
            Err(SealError::Machine(MachineError::MachineRunning))
        ));
        s.host.power_off();
        let first_vm_digest = {
            let mut probe = images.instantiate();
            seal_all(&mut probe, &c, &mut env).unwrap();
            probe.guest().unwrap().root_volume().header().mk_digest
        };
        assert!(restore_pre_seal(&mut s.host, &images, false, &c, &mut env).unwrap().is_none());
        s.host.boot(&mut env).unwrap();
        s.host.power_off();
        let out = restore_pre_seal(&mut s.host, &images, true, &c, &mut env).unwrap().unwrap();
        assert!(!out.bundle.files().is_empty());
        assert_ne!(s.host.guest().unwrap().root_volume().header().mk_digest, first_vm_digest);
    }

    #[test]
    fn publish_requires_sealed_vm() {
        let mut env = SimEnv::seeded(7);
        let c = cfg();
        let mut s = prepare_trusted_server(&c, &mut env).unwrap();
        let vm = s.host.guest_mut().unwrap();
        vm.boot(&mut env).unwrap();
        assert!(matches!(publish_bundle(vm, &c.webroot), Err(SealError::NotReady(_))));
    }

    #[test]
    fn incomplete_webroot_is_reported() {
        let mut env = SimEnv::seeded(8);
        let c = cfg();
        let mut s = prepare_trusted_server(&c, &mut env).unwrap();
        seal_all(&mut s.host, &c, &mut env).unwrap();
        let vm = s.host.guest_mut().unwrap();
        vm.edit_root(&mut env, |t| t.remove("/var/www/log/ldap.txt")).unwrap().unwrap();
        match publish_bundle(vm, &c.webroot) {
            Err(SealError::WebrootIncomplete(missing)) => assert_eq!(missing, vec!["ldap.txt"]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bundle_dir_round_trip_and_index_check() {
        let mut env = SimEnv::seeded(9);
        let c = cfg();
        let mut s = prepare_trusted_server(&c, &mut env).unwrap();
        let out = seal_all(&mut s.host, &c, &mut env).unwrap();
        let dir = tempfile::tempdir().unwrap();
        out.bundle.write_to_dir(dir.path()).unwrap();
        assert_eq!(PublishedBundle::read_from_dir(dir.path()).unwrap(), out.bundle);
        assert_eq!(out.bundle.index(), out.bundle.clone().index());
        fs::write(dir.path().join("ldap.txt"), "edited").unwrap();
        assert!(matches!(PublishedBundle::read_from_dir(dir.path()), Err(SealError::MalformedBundle(_))));
    }
}
