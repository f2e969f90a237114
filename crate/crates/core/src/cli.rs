//! `tsctl`: build, seal, verify, restore, escrow, serve, attack, manifest.
//!
//! Exit status: 0 success, 1 negative result (verdict FAIL, scenario
//! mismatch, incomplete escrow), 2 usage or operational error.
//!
//! Work directory layout:
//!
//! ```text
//! config.toml      effective configuration
//! images/{host,vm} pre-seal disk images disclosed for verification
//! disks/{host,vm}  current disk contents
//! bundle/          published webroot files plus index.sha3
//! escrow/          key shares, one file per party
//! vault.key        the data provider's vault key (hex)
//! ```

use std::ffi::OsString;
use std::fs;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::escrow::{self, KeyShare};
use crate::machine::Machine;
use crate::manifest::{compute_manifest, HashRoot};
use crate::scenario::{run_scenario, Scenario};
use crate::sealing::{
    prepare_trusted_server, restore_pre_seal, seal_all, PublishedBundle, SealOutcome, ServerConfig, ServerImages,
};
use crate::services::{CredentialDirectory, Resolver, ServeSession, ServiceContext};
use crate::sim::SimEnv;
use crate::verifier::{verify_seal, AllowlistPolicy, VerificationProfile};
use crate::volume::{KeySlot, Keyfile};

#[derive(Debug, Parser)]
#[command(name = "tsctl", version, about = "Trusted Server sealing simulator and verifier")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOpts,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalOpts {
    /// Seed for the simulated RNG.
    #[arg(long, global = true, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, global = true, default_value = "ts-work")]
    pub workdir: PathBuf,
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Machine-readable JSON output.
    #[arg(long, global = true)]
    pub json: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Provision an unsealed server and write its pre-seal images.
    Build,
    /// Boot and seal the server in the work directory, publishing its bundle.
    Seal,
    /// Check a published bundle against the pre-seal images.
    Verify {
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long)]
        images: Option<PathBuf>,
        /// Allowlist file applied to both stages instead of the plan-derived ones.
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// Put the disks back to their pre-seal images.
    Restore {
        /// Seal again right away, under a fresh VM master key.
        #[arg(long)]
        reseal: bool,
    },
    #[command(subcommand)]
    Escrow(EscrowCommand),
    /// Seal in memory and answer line requests from stdin.
    Serve {
        /// Require AUTH before SUBMIT.
        #[arg(long)]
        require_auth: bool,
    },
    /// Run a named attack scenario and assert its outcome.
    Attack {
        /// theft-reboot | header-restore-single | header-restore-dual | tamper-binary | skip-erase | leftover-user
        scenario: String,
    },
    /// Print the SHA3-512 manifest of a pre-seal image as its machine sees it.
    Manifest {
        /// host or vm
        #[arg(long, default_value = "vm")]
        machine: String,
        /// Hash root; `/dir/*` hashes one level. Defaults to the configured roots.
        #[arg(long = "root")]
        roots: Vec<String>,
    },
}

#[derive(Debug, Subcommand)]
pub enum EscrowCommand {
    /// Split a secret file (default: the VM keyslot of the pre-seal image) into shares.
    Split {
        #[arg(long)]
        parties: usize,
        #[arg(long)]
        secret: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Combine shares; optionally reinstall the keyslot on the sealed VM disk.
    Recover {
        #[arg(required = true)]
        shares: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        install: bool,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CommandOutput {
    pub status: i32,
    pub stdout: String,
    pub stderr: String,
}

struct Failure {
    status: i32,
    message: String,
}

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure { status: 2, message: e.to_string() }
    }
}

type CmdResult = Result<(i32, String), Failure>;

pub fn run_command<I, T>(argv: I) -> CommandOutput
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_command_with_input(argv, &mut std::io::empty())
}

pub fn run_command_with_input<I, T>(argv: I, input: &mut dyn BufRead) -> CommandOutput
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let status = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            return if status == 0 {
                CommandOutput { status, stdout: text, stderr: String::new() }
            } else {
                CommandOutput { status, stdout: String::new(), stderr: text }
            };
        }
    };
    match execute(&cli, input) {
        Ok((status, stdout)) => CommandOutput { status, stdout, stderr: String::new() },
        Err(f) => CommandOutput { status: f.status, stdout: String::new(), stderr: format!("error: {}\n", f.message) },
    }
}

fn load_config(g: &GlobalOpts) -> Result<ServerConfig, Failure> {
    match &g.config {
        Some(p) => Ok(ServerConfig::from_toml(&fs::read_to_string(p)?)?),
        None => {
            let saved = g.workdir.join("config.toml");
            if saved.exists() {
                Ok(ServerConfig::from_toml(&fs::read_to_string(saved)?)?)
            } else {
                Ok(ServerConfig::default())
            }
        }
    }
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

fn write_host(host: &Machine, dir: &Path) -> Result<(), Failure> {
    ServerImages::snapshot(host)?.write_to_dir(dir)?;
    Ok(())
}

fn read_host(dir: &Path) -> Result<Machine, Failure> {
    if !dir.exists() {
        return Err(Failure { status: 2, message: format!("{} not found; run `tsctl build` first", dir.display()) });
    }
    Ok(ServerImages::read_from_dir(dir)?.instantiate())
}

fn execute(cli: &Cli, input: &mut dyn BufRead) -> CmdResult {
    let g = &cli.global;
    let cfg = load_config(g)?;
    let mut env = SimEnv::seeded(g.seed);
    let wd = &g.workdir;
    match &cli.command {
        Command::Build => {
            let server = prepare_trusted_server(&cfg, &mut env)?;
            fs::create_dir_all(wd)?;
            fs::write(wd.join("config.toml"), cfg.to_toml())?;
            write_host(&server.host, &wd.join("images"))?;
            write_host(&server.host, &wd.join("disks"))?;
            if let Some(k) = &server.vault_key {
                fs::write(wd.join("vault.key"), hex::encode(k.as_bytes()))?;
            }
            let vm = server.host.guest().expect("provisioned guest");
            let msg = format!(
                "built unsealed server in {}\nhost root: {} sectors, vm root: {} sectors\n",
                wd.display(),
                server.host.root_volume().sector_count(),
                vm.root_volume().sector_count()
            );
            Ok((0, if g.json { json(&serde_json::json!({"workdir": wd, "sealed": false})) } else { msg }))
        }
        Command::Seal => {
            let mut host = read_host(&wd.join("disks"))?;
            let out = seal_all(&mut host, &cfg, &mut env)?;
            persist_seal(wd, &mut host, &out)?;
            Ok((0, seal_summary(&out, g.json)))
        }
        Command::Verify { bundle, images, policy } => {
            let bundle = PublishedBundle::read_from_dir(&bundle.clone().unwrap_or_else(|| wd.join("bundle")))?;
            let pre = ServerImages::read_from_dir(&images.clone().unwrap_or_else(|| wd.join("images")))?;
            let mut profile = VerificationProfile::for_config(&cfg)?;
            if let Some(p) = policy {
                let pol = AllowlistPolicy::parse(&fs::read_to_string(p)?)?;
                profile.host_policy = pol.clone();
                profile.vm_policy = pol;
            }
            let verdict = verify_seal(&pre, &bundle, &profile)?;
            let text = if g.json { verdict.to_json() + "\n" } else { verdict.to_string() };
            Ok((if verdict.passed() { 0 } else { 1 }, text))
        }
        Command::Restore { reseal } => {
            let mut host = read_host(&wd.join("disks"))?;
            let images = ServerImages::read_from_dir(&wd.join("images"))?;
            match restore_pre_seal(&mut host, &images, *reseal, &cfg, &mut env)? {
                Some(out) => {
                    persist_seal(wd, &mut host, &out)?;
                    Ok((0, format!("restored pre-seal images and resealed\n{}", seal_summary(&out, g.json))))
                }
                None => {
                    write_host(&host, &wd.join("disks"))?;
                    Ok((0, "restored pre-seal images; server is unsealed\n".into()))
                }
            }
        }
        Command::Escrow(EscrowCommand::Split { parties, secret, out }) => {
            let secret = match secret {
                Some(p) => fs::read(p)?,
                None => {
                    let images = ServerImages::read_from_dir(&wd.join("images"))?;
                    crate::sealing::escrow_secret(&images.vm.root)
                }
            };
            let shares = escrow::split_key(&secret, *parties, &mut env.rng)?;
            let dir = out.clone().unwrap_or_else(|| wd.join("escrow"));
            let paths = write_shares(&dir, &shares)?;
            Ok((0, paths.iter().map(|p| format!("{}\n", p.display())).collect()))
        }
        Command::Escrow(EscrowCommand::Recover { shares, out, install }) => {
            let shares: Vec<KeyShare> =
                shares.iter().map(|p| Ok(KeyShare::from_bytes(&fs::read(p)?)?)).collect::<Result<_, Failure>>()?;
            let secret = match escrow::reconstruct(&shares) {
                Ok(s) => s,
                Err(e @ escrow::EscrowError::MissingShares { .. }) => {
                    return Err(Failure { status: 1, message: e.to_string() })
                }
                Err(e) => return Err(e.into()),
            };
            let mut msg = format!("reconstructed {} byte secret from {} shares\n", secret.len(), shares.len());
            if let Some(p) = out {
                fs::write(p, &secret)?;
            }
            if *install {
                let dir = wd.join("disks");
                let mut images = ServerImages::read_from_dir(&dir)?;
                let slot = KeySlot::from_record(&secret)?;
                images.vm.root.install_slot(0, slot)?;
                let key = Keyfile::from_bytes(images.vm.boot.read_file(crate::machine::KEYFILE_PATH).unwrap_or(&[]))?;
                images.vm.root.unlock(&key)?;
                images.write_to_dir(&dir)?;
                msg += "installed keyslot 0 on the VM disk; its keyfile unlocks it again\n";
            }
            Ok((0, msg))
        }
        Command::Serve { require_auth } => {
            let mut host = read_host(&wd.join("disks")).or_else(|_| {
                prepare_trusted_server(&cfg, &mut env).map(|s| s.host).map_err(Failure::from)
            })?;
            seal_all(&mut host, &cfg, &mut env)?;
            let mut ctx = ServiceContext::from_config(&cfg);
            ctx.require_auth = *require_auth;
            let primary = CredentialDirectory::with_users(&cfg.ldap_accounts(), &mut env.rng);
            let mut resolver = Resolver::with_records(&[("example.org", "93.184.216.34"), ("debian.org", "130.89.148.77")]);
            let vm = host.guest_mut().expect("provisioned guest");
            let mut session = ServeSession::new(vm, ctx, &primary, &mut resolver, "client");
            let mut out = String::new();
            for line in input.lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                out += &session.handle(&line, &mut env);
                out.push('\n');
            }
            Ok((0, out))
        }
        Command::Attack { scenario } => {
            let sc: Scenario = scenario.parse().map_err(|m| Failure { status: 2, message: m })?;
            let report = run_scenario(sc, g.seed, &cfg)?;
            let text = if g.json { json(&report) } else { report.to_string() };
            Ok((if report.matches() { 0 } else { 1 }, text))
        }
        Command::Manifest { machine, roots } => {
            let images = ServerImages::read_from_dir(&wd.join("images"))?;
            let roots: Vec<HashRoot> = if roots.is_empty() {
                cfg.hash_roots()?
            } else {
                ServerConfig { hash_roots: roots.clone(), ..cfg.clone() }.hash_roots()?
            };
            let view = match machine.as_str() {
                "host" => {
                    let mut v = images.host.open_root_tree()?;
                    v.graft("/boot", &images.host.boot)?;
                    v.graft(crate::sealing::GUEST_BOOT_MOUNT, &images.vm.boot)?;
                    v
                }
                "vm" => {
                    let mut v = images.vm.open_root_tree()?;
                    v.graft("/boot", &images.vm.boot)?;
                    v
                }
                other => return Err(Failure { status: 2, message: format!("unknown machine {other:?}") }),
            };
            Ok((0, compute_manifest(&view, &roots)?.to_string()))
        }
    }
}

fn write_shares(dir: &Path, shares: &[KeyShare]) -> Result<Vec<PathBuf>, Failure> {
    fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for s in shares {
        let p = dir.join(format!("share-{}-of-{}.tsshare", s.index, s.total));
        fs::write(&p, s.to_bytes())?;
        paths.push(p);
    }
    Ok(paths)
}

/// The simulated server cannot outlive this process, so what gets stored is
/// the disk contents as they stand after sealing.
fn persist_seal(wd: &Path, host: &mut Machine, out: &SealOutcome) -> Result<(), Failure> {
    let bundle_dir = wd.join("bundle");
    if bundle_dir.exists() {
        fs::remove_dir_all(&bundle_dir)?;
    }
    out.bundle.write_to_dir(&bundle_dir)?;
    if !out.escrow_shares.is_empty() {
        write_shares(&wd.join("escrow"), &out.escrow_shares)?;
    }
    host.power_off();
    write_host(host, &wd.join("disks"))
}

fn seal_summary(out: &SealOutcome, as_json: bool) -> String {
    if as_json {
        return json(&serde_json::json!({
            "host_log_status": out.host_log.status,
            "vm_log_status": out.vm_log.status,
            "bundle_files": out.bundle.files().keys().collect::<Vec<_>>(),
            "escrow_shares": out.escrow_shares.len(),
        }));
    }
    let mut s = format!(
        "sealed: host log {} steps, vm log {} steps\npublished:\n",
        out.host_log.records.len(),
        out.vm_log.records.len()
    );
    for name in out.bundle.files().keys() {
        s += &format!("  {name}\n");
    }
    if !out.escrow_shares.is_empty() {
        s += &format!("escrow: {} shares written\n", out.escrow_shares.len());
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(wd: &Path, args: &[&str]) -> CommandOutput {
        let mut argv = vec!["tsctl".to_string(), "--workdir".into(), wd.display().to_string()];
        argv.extend(args.iter().map(|s| s.to_string()));
        run_command(argv)
    }

    fn fast_config(dir: &Path) -> PathBuf {
        let p = dir.join("fast.toml");
        fs::write(&p, "kdf_iterations = 64\n").unwrap();
        p
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run_command(["tsctl", "frobnicate"]).status, 2);
        assert_eq!(run_command(["tsctl", "seal", "--bogus"]).status, 2);
        assert_eq!(run_command(["tsctl", "attack", "no-such-scenario"]).status, 2);
        assert_eq!(run_command(["tsctl", "--help"]).status, 0);
    }

    #[test]
    fn build_seal_verify_golden_path() {
        let dir = tempfile::tempdir().unwrap();
        let wd = dir.path().join("w");
        let cfg = fast_config(dir.path());
        let cfg = cfg.to_str().unwrap();
        assert_eq!(run(&wd, &["--config", cfg, "build"]).status, 0);
        let sealed = run(&wd, &["seal"]);
        assert_eq!(sealed.status, 0, "{}", sealed.stderr);
        assert!(sealed.stdout.contains("etc-vm.zip"));
        let v = run(&wd, &["verify"]);
        assert_eq!(v.status, 0, "{}", v.stdout);
        assert!(v.stdout.contains("verdict: PASS"));
        // sealing twice is refused
        assert_eq!(run(&wd, &["seal"]).status, 2);

        // tampering with a published archive fails verification
        let zip = wd.join("bundle/etc-vm.zip");
        let mut tree = crate::tree::unpack(&fs::read(&zip).unwrap()).unwrap();
        tree.write_file("/etc/cron.d/persist", "* * * * * root /tmp/x\n").unwrap();
        fs::write(&zip, crate::tree::pack(&tree, "/etc").unwrap()).unwrap();
        let b = PublishedBundle::read_from_dir(&wd.join("bundle"));
        assert!(b.is_err(), "index must catch the edit");
        let mut files = std::collections::BTreeMap::new();
        for e in fs::read_dir(wd.join("bundle")).unwrap() {
            let e = e.unwrap();
            let n = e.file_name().into_string().unwrap();
            if n != "index.sha3" {
                files.insert(n, fs::read(e.path()).unwrap());
            }
        }
        PublishedBundle::from_files(files).write_to_dir(&wd.join("bundle")).unwrap();
        let v = run(&wd, &["verify", "--json"]);
        assert_eq!(v.status, 1);
        assert!(v.stdout.contains("/etc/cron.d/persist"));

        let r = run(&wd, &["restore", "--reseal"]);
        assert_eq!(r.status, 0, "{}", r.stderr);
        assert_eq!(run(&wd, &["verify"]).status, 0);
    }

    #[test]
    fn escrow_round_trip_reopens_vm_disk() {
        let dir = tempfile::tempdir().unwrap();
        let wd = dir.path().join("w");
        let cfg = dir.path().join("esc.toml");
        fs::write(&cfg, "kdf_iterations = 64\nescrow_parties = 3\n").unwrap();
        let cfg = cfg.to_str().unwrap();
        assert_eq!(run(&wd, &["--config", cfg, "build"]).status, 0);
        assert_eq!(run(&wd, &["seal"]).status, 0);
        let shares: Vec<String> = (1..=3).map(|i| wd.join(format!("escrow/share-{i}-of-3.tsshare")).display().to_string()).collect();
        let two: Vec<&str> = ["escrow", "recover"].into_iter().chain(shares[..2].iter().map(String::as_str)).collect();
        assert_eq!(run(&wd, &two).status, 1);
        let mut all: Vec<&str> = vec!["escrow", "recover", "--install"];
        all.extend(shares.iter().map(String::as_str));
        let r = run(&wd, &all);
        assert_eq!(r.status, 0, "{}", r.stderr);
        assert!(r.stdout.contains("unlocks it again"));
        // nothing of the escrow ended up in the bundle
        assert_eq!(run(&wd, &["verify"]).status, 0);
    }

    #[test]
    fn attack_and_manifest_commands() {
        let dir = tempfile::tempdir().unwrap();
        let wd = dir.path().join("w");
        let cfg = fast_config(dir.path());
        let cfg = cfg.to_str().unwrap();
        let a = run(&wd, &["--config", cfg, "--json", "attack", "header-restore-dual"]);
        assert_eq!(a.status, 0, "{}", a.stdout);
        assert!(a.stdout.contains("\"observed\": \"attack-fails\""));
        assert_eq!(run(&wd, &["--config", cfg, "build"]).status, 0);
        let m1 = run(&wd, &["manifest", "--root", "/etc"]);
        let m2 = run(&wd, &["manifest", "--root", "/etc"]);
        assert_eq!(m1.status, 0);
        assert_eq!(m1.stdout, m2.stdout);
        assert!(m1.stdout.contains("  /etc/passwd\n"));
    }

    #[test]
    fn serve_answers_requests() {
        let dir = tempfile::tempdir().unwrap();
        let wd = dir.path().join("w");
        let cfg = fast_config(dir.path());
        let argv = ["tsctl", "--workdir", wd.to_str().unwrap(), "--config", cfg.to_str().unwrap(), "serve"];
        let mut input = std::io::Cursor::new("SUBMIT Alice 5\nSUBMIT Bob 3\nSUBMIT Carol 7\nPUBLISH\nRESOLVE example.org\n");
        let out = run_command_with_input(argv, &mut input);
        assert_eq!(out.status, 0, "{}", out.stderr);
        assert_eq!(out.stdout, "OK 1\nOK 2\nOK 3\nCarol\nAlice\nBob\nOK\nOK 93.184.216.34\n");
    }
}
