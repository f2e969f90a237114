//! Named attack and tamper scenarios with asserted outcomes.
//!
//! Each scenario builds a fresh server from a seed, performs what an
//! attacker or careless administrator would do, and reports whether
//! protected data became readable and whether the verifier noticed.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::machine::{MachineError, SealingStep, APACHE_BINARY};
use crate::sealing::{
    prepare_trusted_server, seal_all_with, Plans, PreparedServer, PublishedBundle, Result as SealResult, SealError, ServerConfig,
    ServerImages, LOGIN_USER,
};
use crate::sim::SimEnv;
use crate::tree::FileTree;
use crate::verifier::{verify_seal, VerificationProfile, Verdict};
use crate::volume::{EncryptedVolume, Keyfile, VolumeError, VolumeHeader};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    TheftReboot,
    HeaderRestoreSingle,
    HeaderRestoreDual,
    TamperBinary,
    SkipErase,
    LeftoverUser,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Outcome {
    AttackSucceeds,
    AttackFails,
    VerifierFlags,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Outcome::AttackSucceeds => "attack-succeeds",
            Outcome::AttackFails => "attack-fails",
            Outcome::VerifierFlags => "verifier-flags",
        })
    }
}

impl Scenario {
    pub const ALL: [Scenario; 6] = [
        Scenario::TheftReboot,
        Scenario::HeaderRestoreSingle,
        Scenario::HeaderRestoreDual,
        Scenario::TamperBinary,
        Scenario::SkipErase,
        Scenario::LeftoverUser,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::TheftReboot => "theft-reboot",
            Scenario::HeaderRestoreSingle => "header-restore-single",
            Scenario::HeaderRestoreDual => "header-restore-dual",
            Scenario::TamperBinary => "tamper-binary",
            Scenario::SkipErase => "skip-erase",
            Scenario::LeftoverUser => "leftover-user",
        }
    }

    pub fn expected(self) -> Outcome {
        match self {
            Scenario::TheftReboot | Scenario::HeaderRestoreDual => Outcome::AttackFails,
            Scenario::HeaderRestoreSingle => Outcome::AttackSucceeds,
            Scenario::TamperBinary | Scenario::SkipErase | Scenario::LeftoverUser => Outcome::VerifierFlags,
        }
    }
}

impl FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| format!("unknown scenario {s:?}; expected one of {}", scenario_names().join(", ")))
    }
}

pub fn scenario_names() -> Vec<&'static str> {
    Scenario::ALL.iter().map(|s| s.name()).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ScenarioReport {
    pub scenario: Scenario,
    pub seed: u64,
    pub expected: Outcome,
    pub observed: Outcome,
    pub protected_data_readable: bool,
    pub verifier_flagged: Option<bool>,
    pub details: Vec<String>,
}

impl ScenarioReport {
    pub fn matches(&self) -> bool {
        self.expected == self.observed
    }
}

impl fmt::Display for ScenarioReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "scenario: {} (seed {})", self.scenario.name(), self.seed)?;
        for d in &self.details {
            writeln!(f, "  {d}")?;
        }
        writeln!(f, "protected data readable: {}", self.protected_data_readable)?;
        if let Some(flag) = self.verifier_flagged {
            writeln!(f, "verifier flagged: {flag}")?;
        }
        writeln!(
            f,
            "expected {}, observed {}: {}",
            self.expected,
            self.observed,
            if self.matches() { "OK" } else { "MISMATCH" }
        )
    }
}

/// Result of restoring an old header onto a sealed disk and reading it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeaderAttack {
    pub unlocked: bool,
    pub sectors: u64,
    pub readable: u64,
    pub auth_failures: u64,
    /// Decoded root tree, when every sector decrypted.
    pub recovered: Option<FileTree>,
}

/// Restores `old_header` onto a copy of `sealed`, unlocks with the keyfile
/// that matched the old header and tries every sector.
pub fn header_restore_attack(sealed: &EncryptedVolume, old_header: &VolumeHeader, keyfile: &Keyfile) -> HeaderAttack {
    let mut vol = sealed.clone();
    let sectors = vol.sector_count();
    let mut out = HeaderAttack { unlocked: false, sectors, readable: 0, auth_failures: 0, recovered: None };
    if vol.restore_header(old_header.clone()).is_err() {
        return out;
    }
    let Ok(handle) = vol.unlock(keyfile) else { return out };
    out.unlocked = true;
    let mut image = Vec::with_capacity(sectors as usize * crate::volume::SECTOR_BYTES);
    for i in 0..sectors {
        match handle.read_sector(&vol, i) {
            Ok(s) => {
                out.readable += 1;
                image.extend_from_slice(&s[..]);
            }
            Err(VolumeError::AuthFailure(_)) => out.auth_failures += 1,
            Err(_) => {}
        }
    }
    if out.readable == sectors {
        out.recovered = crate::machine::decode_root_image(&image).ok();
    }
    out
}

fn fresh(cfg: &ServerConfig, seed: u64) -> SealResult<(PreparedServer, SimEnv)> {
    let mut env = SimEnv::seeded(seed);
    let s = prepare_trusted_server(cfg, &mut env)?;
    Ok((s, env))
}

/// Plaintext only ever stored on the VM disk.
fn vm_secret(pre: &ServerImages) -> Vec<u8> {
    let t = pre.vm.open_root_tree().expect("pre-seal image opens");
    t.read_file(&format!("/home/{LOGIN_USER}/research/cohort.csv")).expect("provisioned").to_vec()
}

/// Tamper classes the verifier must catch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TamperClass {
    AddedScript,
    ModifiedBinary,
    ResidualKeyslot,
    SurvivingUser,
    SurvivingSsh,
}

impl TamperClass {
    pub const ALL: [TamperClass; 5] = [
        TamperClass::AddedScript,
        TamperClass::ModifiedBinary,
        TamperClass::ResidualKeyslot,
        TamperClass::SurvivingUser,
        TamperClass::SurvivingSsh,
    ];

    /// Finding subject the verifier must report.
    pub fn artifact(self) -> &'static str {
        match self {
            TamperClass::AddedScript => "/usr/local/bin/sync-helper.sh",
            TamperClass::ModifiedBinary => APACHE_BINARY,
            TamperClass::ResidualKeyslot => "/dev/vda2 key slot 0",
            TamperClass::SurvivingUser => "user trust",
            TamperClass::SurvivingSsh => "openssh-server (/usr/sbin/sshd)",
        }
    }
}

/// A tampered seal plus the honest verification inputs.
pub struct TamperedSeal {
    pub pre: ServerImages,
    pub bundle: PublishedBundle,
    pub profile: VerificationProfile,
    pub machine_after: PreparedServer,
    pub env: SimEnv,
}

/// Builds a server, snapshots it for disclosure, then tampers according to
/// `class` before or during sealing.
pub fn tampered_seal(cfg: &ServerConfig, seed: u64, class: TamperClass) -> SealResult<TamperedSeal> {
    let (mut s, mut env) = fresh(cfg, seed)?;
    let pre = ServerImages::snapshot(&s.host)?;
    let profile = VerificationProfile::for_config(cfg)?;
    let mut plans = Plans::dual_stage(cfg)?;
    match class {
        TamperClass::AddedScript | TamperClass::ModifiedBinary => {
            // changes made after the disclosed images were taken
            let vm = s.host.guest_mut().expect("provisioned guest");
            vm.boot(&mut env)?;
            vm.edit_root(&mut env, |t| match class {
                TamperClass::AddedScript => t.write_file(class.artifact(), "#!/bin/sh\nnc -l -p 4444 -e /bin/sh\n"),
                _ => {
                    let mut b = t.read_file(APACHE_BINARY).expect("apache installed").to_vec();
                    b[0] ^= 0x80;
                    t.write_file(APACHE_BINARY, b)
                }
            })?
            .map_err(MachineError::from)?;
            vm.power_off();
        }
        TamperClass::ResidualKeyslot => {
            plans.vm = plans.vm.without(|st| matches!(st, SealingStep::LuksErase { .. }));
        }
        TamperClass::SurvivingUser => {
            plans.vm = plans.vm.without(|st| matches!(st, SealingStep::RemoveUser { .. }));
        }
        TamperClass::SurvivingSsh => {
            plans.vm = plans.vm.without(|st| matches!(st, SealingStep::PurgeSsh));
        }
    }
    let bundle = match seal_all_with(&mut s.host, &plans, cfg, &mut env) {
        Ok(out) => out.bundle,
        // an unerased VM is refused by the publisher; take its webroot as served
        Err(SealError::NotReady(_)) if class == TamperClass::ResidualKeyslot => {
            crate::sealing::collect_webroot(s.host.guest().expect("provisioned guest"), &cfg.webroot)?
        }
        Err(e) => return Err(e),
    };
    Ok(TamperedSeal { pre, bundle, profile, machine_after: s, env })
}

fn flagged(verdict: &Verdict, details: &mut Vec<String>) -> bool {
    for f in verdict.errors().take(6) {
        details.push(format!("finding: {}: {}", f.subject, f.explanation));
    }
    !verdict.passed()
}

pub fn run_scenario(scenario: Scenario, seed: u64, cfg: &ServerConfig) -> SealResult<ScenarioReport> {
    let mut details = Vec::new();
    let mut verifier_flagged = None;
    let readable = match scenario {
        Scenario::TheftReboot => {
            let (mut s, mut env) = fresh(cfg, seed)?;
            let pre = ServerImages::snapshot(&s.host)?;
            crate::sealing::seal_all(&mut s.host, cfg, &mut env)?;
            s.host.power_off();
            let boot = s.host.boot(&mut env);
            details.push(format!("reboot of stolen host: {}", describe(&boot.map(|_| ()))));
            let mut any = false;
            for (name, vol, key) in [
                ("host", s.host.root_volume().clone(), pre.host.boot.read_file("/keyfile").map(|k| k.to_vec())),
                ("vm", s.host.guest().expect("guest").root_volume().clone(), pre.vm.boot.read_file("/keyfile").map(|k| k.to_vec())),
            ] {
                let key = Keyfile::from_bytes(&key.expect("keyfile provisioned")).expect("valid keyfile");
                let r = vol.unlock(&key);
                details.push(format!("{name} disk unlock with original keyfile: {}", describe(&r.as_ref().map(|_| ()))));
                any |= r.is_ok();
            }
            let secret = vm_secret(&pre);
            let raw = s.host.guest().expect("guest").root_volume().to_bytes();
            let windows: std::collections::HashSet<&[u8]> = secret.windows(16).collect();
            let leaked = raw.windows(16).any(|r| windows.contains(r));
            details.push(format!("plaintext visible in raw VM disk: {leaked}"));
            any || leaked
        }
        Scenario::HeaderRestoreSingle | Scenario::HeaderRestoreDual => {
            let (mut s, mut env) = fresh(cfg, seed)?;
            let pre = ServerImages::snapshot(&s.host)?;
            crate::sealing::seal_all(&mut s.host, cfg, &mut env)?;
            s.host.power_off();
            let (name, image, sealed) = if scenario == Scenario::HeaderRestoreSingle {
                ("host", &pre.host, s.host.root_volume())
            } else {
                ("vm", &pre.vm, s.host.guest().expect("guest").root_volume())
            };
            let key = Keyfile::from_bytes(image.boot.read_file("/keyfile").expect("keyfile")).expect("valid keyfile");
            let attack = header_restore_attack(sealed, image.root.header(), &key);
            details.push(format!(
                "{name} disk with pre-seal header: unlocked={} readable={}/{} auth_failures={}",
                attack.unlocked, attack.readable, attack.sectors, attack.auth_failures
            ));
            attack.recovered.is_some()
        }
        Scenario::TamperBinary | Scenario::SkipErase | Scenario::LeftoverUser => {
            let (pre, bundle, profile, mut s, mut env) = if scenario == Scenario::TamperBinary {
                let t = tampered_seal(cfg, seed, TamperClass::ModifiedBinary)?;
                (t.pre, t.bundle, t.profile, t.machine_after, t.env)
            } else {
                let (mut s, mut env) = fresh(cfg, seed)?;
                let pre = ServerImages::snapshot(&s.host)?;
                let mut plans = Plans::dual_stage(cfg)?;
                if scenario == Scenario::SkipErase {
                    plans.host = plans.host.without(|st| matches!(st, SealingStep::LuksErase { .. }));
                } else {
                    plans.vm = plans.vm.without(|st| matches!(st, SealingStep::RemoveUser { .. }));
                }
                let out = seal_all_with(&mut s.host, &plans, cfg, &mut env)?;
                (pre, out.bundle, VerificationProfile::for_config(cfg)?, s, env)
            };
            let v = verify_seal(&pre, &bundle, &profile).map_err(|e| SealError::MalformedBundle(e.to_string()))?;
            verifier_flagged = Some(flagged(&v, &mut details));
            s.host.power_off();
            let reboot = s.host.boot(&mut env);
            details.push(format!("host reboot after power-off: {}", describe(&reboot.map(|_| ()))));
            s.host.is_on()
        }
    };
    let report = ScenarioReport {
        scenario,
        seed,
        expected: scenario.expected(),
        observed: if readable { Outcome::AttackSucceeds } else { Outcome::AttackFails },
        protected_data_readable: readable,
        verifier_flagged,
        details,
    };
    Ok(finish(report))
}

fn finish(mut r: ScenarioReport) -> ScenarioReport {
    if r.verifier_flagged == Some(true) {
        r.observed = Outcome::VerifierFlags;
    }
    r
}

fn describe<E: fmt::Display>(r: &Result<(), E>) -> String {
    match r {
        Ok(()) => "succeeded".into(),
        Err(e) => format!("failed ({e})"),
    }
}
