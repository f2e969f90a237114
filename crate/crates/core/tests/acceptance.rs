//! Acceptance criteria. Runs without the libtest harness so each criterion
//! prints exactly one PASS/FAIL line; exits non-zero if any fails.

use std::collections::{HashMap, HashSet};
use std::time::{Duration, Instant};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use trusted_server::escrow::{reconstruct, split_key, EscrowError, KeyShare};
use trusted_server::machine::KEYFILE_PATH;
use trusted_server::manifest::compute_manifest;
use trusted_server::scenario::{header_restore_attack, tampered_seal, TamperClass};
use trusted_server::sealing::{
    prepare_trusted_server, seal_all, seal_all_with, Plans, ServerConfig, ServerImages,
};
use trusted_server::services::{millionaires_publish, millionaires_submit, ServiceContext};
use trusted_server::sim::SimEnv;
use trusted_server::verifier::{parse_sealing_log, verify_seal, VerificationProfile};
use trusted_server::volume::{
    CipherSpec, EncryptedVolume, Keyfile, VolumeError, DEFAULT_KDF_ITERATIONS, SECTOR_BYTES,
};

const MIB: usize = 1024 * 1024;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Default configuration with a few fields varied per server.
fn random_config(rng: &mut ChaCha20Rng) -> ServerConfig {
    let users = rng.gen_range(0..4);
    ServerConfig {
        ldap_users: (0..users).map(|i| format!("member{i}:pw{}", rng.next_u32())).collect(),
        vault: rng.gen_bool(0.5),
        ..ServerConfig::default()
    }
}

fn keyfile_of(boot: &trusted_server::tree::FileTree) -> Keyfile {
    Keyfile::from_bytes(boot.read_file(KEYFILE_PATH).expect("keyfile provisioned")).expect("valid keyfile")
}

fn sealed_inaccessibility() -> Check {
    let mut meta = ChaCha20Rng::seed_from_u64(0x5ea1);
    let mut ok = 0;
    for i in 0..100u64 {
        let cfg = random_config(&mut meta);
        let mut env = SimEnv::seeded(1000 + i);
        let mut s = prepare_trusted_server(&cfg, &mut env).map_err(|e| e.to_string())?;
        let pre = ServerImages::snapshot(&s.host).map_err(|e| e.to_string())?;
        seal_all(&mut s.host, &cfg, &mut env).map_err(|e| format!("server {i}: {e}"))?;
        s.host.power_off();
        let host_try = s.host.root_volume().unlock(&keyfile_of(&pre.host.boot)).err();
        let vm_try = s.host.guest().expect("guest").root_volume().unlock(&keyfile_of(&pre.vm.boot)).err();
        ensure(
            host_try == Some(VolumeError::KeyslotsEmpty) && vm_try == Some(VolumeError::KeyslotsEmpty),
            || format!("server {i}: host {host_try:?}, vm {vm_try:?}"),
        )?;
        ok += 1;
    }
    Ok(format!("{ok}/100 servers: both disks refuse original keyfiles with KeyslotsEmpty"))
}

fn dual_stage_theorem() -> Check {
    let mut meta = ChaCha20Rng::seed_from_u64(0xd5a1);
    let (mut dual_ok, mut single_ok) = (0, 0);
    for i in 0..100u64 {
        let cfg = random_config(&mut meta);
        for single in [false, true] {
            let mut env = SimEnv::seeded(2000 + i);
            let mut s = prepare_trusted_server(&cfg, &mut env).map_err(|e| e.to_string())?;
            let pre = ServerImages::snapshot(&s.host).map_err(|e| e.to_string())?;
            let plans = if single { Plans::single_stage(&cfg) } else { Plans::dual_stage(&cfg) }.map_err(|e| e.to_string())?;
            seal_all_with(&mut s.host, &plans, &cfg, &mut env).map_err(|e| format!("server {i}: {e}"))?;
            s.host.power_off();
            let sealed = s.host.guest().expect("guest").root_volume();
            let a = header_restore_attack(sealed, pre.vm.root.header(), &keyfile_of(&pre.vm.boot));
            if single {
                let recovered = a.recovered.as_ref().and_then(|t| t.read_file("/home/trust/research/cohort.csv"));
                let original = pre.vm.open_root_tree().map_err(|e| e.to_string())?;
                ensure(
                    recovered.is_some() && recovered == original.read_file("/home/trust/research/cohort.csv"),
                    || format!("single-stage server {i}: plaintext not recovered ({}/{} sectors)", a.readable, a.sectors),
                )?;
                single_ok += 1;
            } else {
                ensure(a.unlocked && a.auth_failures == a.sectors && a.readable == 0, || {
                    format!("dual-stage server {i}: {} of {} sectors failed auth", a.auth_failures, a.sectors)
                })?;
                dual_ok += 1;
            }
        }
    }
    Ok(format!(
        "dual-stage: {dual_ok}/100 servers all sectors AuthFailure; single-stage: {single_ok}/100 plaintext recovered"
    ))
}

fn verifier_soundness() -> Check {
    let cfg = ServerConfig::default();
    for (k, class) in TamperClass::ALL.into_iter().enumerate() {
        let t = tampered_seal(&cfg, 3000 + k as u64, class).map_err(|e| format!("{class:?}: {e}"))?;
        let v = verify_seal(&t.pre, &t.bundle, &t.profile).map_err(|e| e.to_string())?;
        ensure(!v.passed() && v.errors().any(|f| f.subject == class.artifact()), || {
            format!("{class:?} not flagged by name {:?}", class.artifact())
        })?;
    }
    let mut meta = ChaCha20Rng::seed_from_u64(0xc1ea);
    for i in 0..100u64 {
        let cfg = random_config(&mut meta);
        let mut env = SimEnv::seeded(3100 + i);
        let mut s = prepare_trusted_server(&cfg, &mut env).map_err(|e| e.to_string())?;
        let pre = ServerImages::snapshot(&s.host).map_err(|e| e.to_string())?;
        let out = seal_all(&mut s.host, &cfg, &mut env).map_err(|e| e.to_string())?;
        let profile = VerificationProfile::for_config(&cfg).map_err(|e| e.to_string())?;
        let v = verify_seal(&pre, &out.bundle, &profile).map_err(|e| e.to_string())?;
        ensure(v.passed() && v.errors().count() == 0, || format!("clean seal {i} failed:\n{v}"))?;
    }
    Ok("5/5 tamper classes FAIL naming the artifact; 100/100 clean seals PASS with 0 errors".into())
}

fn escrow_properties() -> Check {
    let mut rng = ChaCha20Rng::seed_from_u64(0xe5c0);
    let mut subsets = 0;
    for trial in 0..1000 {
        let len = rng.gen_range(1..=128);
        let mut secret = vec![0u8; len];
        rng.fill_bytes(&mut secret);
        let n = rng.gen_range(2..=8);
        let shares = split_key(&secret, n, &mut rng).map_err(|e| e.to_string())?;
        ensure(reconstruct(&shares).as_deref() == Ok(&secret[..]), || format!("trial {trial}: round trip failed"))?;
        for skip in 0..n {
            let subset: Vec<KeyShare> =
                shares.iter().enumerate().filter(|(i, _)| *i != skip).map(|(_, s)| s.clone()).collect();
            let r = reconstruct(&subset);
            ensure(matches!(r, Err(EscrowError::MissingShares { .. })), || {
                format!("trial {trial}: {}-of-{n} subset gave {r:?}", n - 1)
            })?;
            subsets += 1;
        }
    }
    // each share of a constant secret, taken alone, must look uniform
    let secret = [0u8; 64];
    let mut counts = [[0u64; 256]; 3];
    for _ in 0..1000 {
        let shares = split_key(&secret, 3, &mut rng).map_err(|e| e.to_string())?;
        for (c, share) in counts.iter_mut().zip(&shares) {
            for &b in &share.payload {
                c[b as usize] += 1;
            }
        }
    }
    let mut chi2 = 0f64;
    for c in &counts {
        let expected = c.iter().sum::<u64>() as f64 / 256.0;
        chi2 = chi2.max(c.iter().map(|&n| (n as f64 - expected).powi(2) / expected).sum());
    }
    // 255 degrees of freedom, p = 0.001
    ensure(chi2 < 330.5, || format!("share bytes not uniform: chi-square {chi2:.1}"))?;
    Ok(format!("1000/1000 round trips; {subsets} (n-1)-subsets -> MissingShares; worst share chi-square {chi2:.1} < 330.5"))
}

fn volume_round_trip() -> Check {
    let mut rng = ChaCha20Rng::seed_from_u64(0x701);
    let key = Keyfile::generate(&mut rng);
    let sectors = 256u64;
    let mut vol = EncryptedVolume::format(sectors, &key, CipherSpec::default(), &mut rng).map_err(|e| e.to_string())?;
    let handle = vol.unlock(&key).map_err(|e| e.to_string())?;
    let mut written: HashMap<u64, [u8; SECTOR_BYTES]> = HashMap::new();
    let mut windows: HashSet<[u8; 16]> = HashSet::new();
    for w in 0..1000 {
        let idx = rng.gen_range(0..sectors);
        let mut pt = [0u8; SECTOR_BYTES];
        match w % 3 {
            0 => rng.fill_bytes(&mut pt),
            // low-entropy text, the kind of content a leak test should catch
            1 => {
                let line = format!("patient-{w:05},age={},dx=C{:02}\n", rng.gen_range(18..90), rng.gen_range(0..99));
                for (i, b) in pt.iter_mut().enumerate() {
                    *b = line.as_bytes()[i % line.len()];
                }
            }
            _ => pt.fill(rng.gen()),
        }
        handle.write_sector(&mut vol, idx, &pt, &mut rng).map_err(|e| e.to_string())?;
        let back = handle.read_sector(&vol, idx).map_err(|e| e.to_string())?;
        ensure(back[..] == pt[..], || format!("write {w}: sector {idx} read back differently"))?;
        written.insert(idx, pt);
        for win in pt.windows(16) {
            windows.insert(win.try_into().expect("16 bytes"));
        }
    }
    for (idx, pt) in &written {
        ensure(handle.read_sector(&vol, *idx).map_err(|e| e.to_string())?[..] == pt[..], || {
            format!("sector {idx} lost its last write")
        })?;
    }
    let raw = vol.to_bytes();
    let leak = raw.windows(16).position(|r| windows.contains(<&[u8; 16]>::try_from(r).expect("16 bytes")));
    ensure(leak.is_none(), || format!("raw image shares a plaintext window at offset {}", leak.unwrap_or(0)))?;
    Ok(format!("1000/1000 writes read back; {} raw bytes share no 16-byte window with {} plaintext windows", raw.len(), windows.len()))
}

fn millionaires_oracle() -> Check {
    let cfg = ServerConfig::default();
    let mut env = SimEnv::seeded(0x6000);
    let mut s = prepare_trusted_server(&cfg, &mut env).map_err(|e| e.to_string())?;
    seal_all(&mut s.host, &cfg, &mut env).map_err(|e| e.to_string())?;
    let ctx = ServiceContext::from_config(&cfg);
    let vm = s.host.guest_mut().expect("guest");
    let mut rng = ChaCha20Rng::seed_from_u64(0x6001);
    let pool: Vec<String> = (0..40).map(|i| format!("{}{}", ["Ada", "Bo", "Cy", "Di", "Ed"][i % 5], "xyzqw".repeat(i / 5 + 1))).collect();
    let ranking_path = format!("{}/ranking.txt", cfg.webroot);
    for set in 0..500 {
        vm.write_file(trusted_server::services::MILLIONAIRES_TABLE, "", &mut env).map_err(|e| e.to_string())?;
        let n = rng.gen_range(1..=30);
        let distinct_values = rng.gen_range(1..=n); // small value ranges force ties
        let mut subs: Vec<(String, u64)> = Vec::new();
        for _ in 0..n {
            let name = pool[rng.gen_range(0..pool.len())].clone(); // duplicates allowed
            let assets = 1_000 + rng.gen_range(0..distinct_values as u64) * 7_919;
            millionaires_submit(vm, &ctx, None, &name, assets, &mut env).map_err(|e| e.to_string())?;
            subs.push((name, assets));
        }
        let names = millionaires_publish(vm, &ctx, &mut env).map_err(|e| e.to_string())?;
        // brute force: repeatedly take the first (earliest) entry with the largest value
        let mut left = subs.clone();
        let mut oracle = Vec::new();
        while !left.is_empty() {
            let max = left.iter().map(|s| s.1).max().expect("non-empty");
            let pos = left.iter().position(|s| s.1 == max).expect("present");
            oracle.push(left.remove(pos).0);
        }
        ensure(names == oracle, || format!("set {set}: published {names:?}, oracle {oracle:?}"))?;
        let published = vm.read_text(&ranking_path).unwrap_or_default();
        ensure(published.lines().eq(oracle.iter().map(String::as_str)), || format!("set {set}: ranking file differs"))?;
        ensure(!published.bytes().any(|b| b.is_ascii_digit()), || format!("set {set}: asset value in output"))?;
    }
    Ok("500/500 submission sets match brute-force order; no asset values published".into())
}

fn determinism() -> Check {
    let cfg = ServerConfig::default();
    let mut runs = Vec::new();
    for _ in 0..3 {
        let mut env = SimEnv::seeded(0x7777);
        let mut s = prepare_trusted_server(&cfg, &mut env).map_err(|e| e.to_string())?;
        let pre = ServerImages::snapshot(&s.host).map_err(|e| e.to_string())?;
        let roots = cfg.hash_roots().map_err(|e| e.to_string())?;
        let manifest = compute_manifest(&pre.vm.open_root_tree().map_err(|e| e.to_string())?, &roots)
            .map_err(|e| e.to_string())?
            .to_string();
        let out = seal_all(&mut s.host, &cfg, &mut env).map_err(|e| e.to_string())?;
        let profile = VerificationProfile::for_config(&cfg).map_err(|e| e.to_string())?;
        let verdict = verify_seal(&pre, &out.bundle, &profile).map_err(|e| e.to_string())?;
        let host_log = out.bundle.host_log().unwrap_or_default();
        let vm_log = out.bundle.vm_log().unwrap_or_default();
        let structure = |log: &str| -> Result<Vec<(String, String)>, String> {
            let p = parse_sealing_log(log).map_err(|e| e.to_string())?;
            Ok(p.records.iter().map(|c| (c.command.clone(), c.output.clone())).collect())
        };
        runs.push((manifest, out.bundle.files().clone(), structure(&host_log)?, structure(&vm_log)?, verdict.to_string()));
    }
    let first = &runs[0];
    for (k, r) in runs.iter().enumerate().skip(1) {
        ensure(r.0 == first.0, || format!("run {k}: pre-seal manifest differs"))?;
        ensure(r.2 == first.2 && r.3 == first.3, || format!("run {k}: log structure differs"))?;
        ensure(r.1 == first.1, || format!("run {k}: published bundle (logs, manifests, archives) differs"))?;
        ensure(r.4 == first.4, || format!("run {k}: verdict differs"))?;
    }
    Ok(format!("3 cycles on one seed: identical manifests ({} lines), logs and bundles", first.0.lines().count()))
}

fn desk_scale(suite_elapsed: Duration) -> Check {
    let cfg = ServerConfig::default();
    ensure(cfg.kdf_iterations == DEFAULT_KDF_ITERATIONS, || "default config does not use default KDF cost".into())?;
    let start = Instant::now();
    let mut env = SimEnv::seeded(0x8888);
    let mut s = prepare_trusted_server(&cfg, &mut env).map_err(|e| e.to_string())?;
    let pre = ServerImages::snapshot(&s.host).map_err(|e| e.to_string())?;
    let out = seal_all(&mut s.host, &cfg, &mut env).map_err(|e| e.to_string())?;
    let profile = VerificationProfile::for_config(&cfg).map_err(|e| e.to_string())?;
    let v = verify_seal(&pre, &out.bundle, &profile).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let disk_bytes = s.host.root_volume().sector_count() as usize * SECTOR_BYTES
        + s.host.guest().expect("guest").root_volume().sector_count() as usize * SECTOR_BYTES;
    ensure(v.passed(), || "cycle did not verify".into())?;
    ensure(disk_bytes <= 16 * MIB, || format!("simulated disks total {disk_bytes} bytes"))?;
    ensure(elapsed < Duration::from_secs(10), || format!("cycle took {elapsed:?}"))?;
    ensure(suite_elapsed < Duration::from_secs(300), || format!("acceptance suite took {suite_elapsed:?}"))?;
    Ok(format!(
        "build->seal->verify {:.2}s on {:.1} MiB of disk; acceptance criteria 1-7 took {:.1}s",
        elapsed.as_secs_f64(),
        disk_bytes as f64 / MIB as f64,
        suite_elapsed.as_secs_f64()
    ))
}

fn main() {
    let suite = Instant::now();
    let criteria: Vec<Criterion> = vec![
        ("1 sealed inaccessibility", sealed_inaccessibility),
        ("2 dual-stage header restore", dual_stage_theorem),
        ("3 verifier soundness/completeness", verifier_soundness),
        ("4 escrow", escrow_properties),
        ("5 volume round trip and secrecy", volume_round_trip),
        ("6 millionaires oracle", millionaires_oracle),
        ("7 log/manifest determinism", determinism),
    ];
    // independent criteria run concurrently
    let results: Vec<(&str, Check, Duration)> = std::thread::scope(|scope| {
        let handles: Vec<_> = criteria
            .into_iter()
            .map(|(name, f)| {
                scope.spawn(move || {
                    let t = Instant::now();
                    let r = f();
                    (name, r, t.elapsed())
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("criterion panicked")).collect()
    });
    let mut results = results;
    let suite_elapsed = suite.elapsed();
    let t = Instant::now();
    results.push(("8 desk-scale runtime", desk_scale(suite_elapsed), t.elapsed()));

    let mut failed = 0;
    for (name, r, took) in &results {
        match r {
            Ok(msg) => println!("PASS  criterion {name}: {msg} [{:.1}s]", took.as_secs_f64()),
            Err(msg) => {
                failed += 1;
                println!("FAIL  criterion {name}: {msg} [{:.1}s]", took.as_secs_f64());
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
