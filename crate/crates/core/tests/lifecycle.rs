//! Seal, publish, restore and recover, going through files on disk.

use trusted_server::escrow::reconstruct;
use trusted_server::sealing::{
    prepare_trusted_server, restore_pre_seal, seal_all, PublishedBundle, ServerConfig, ServerImages,
};
use trusted_server::sim::SimEnv;
use trusted_server::verifier::{verify_seal, VerificationProfile};
use trusted_server::volume::{KeySlot, Keyfile, VolumeError};

fn cfg() -> ServerConfig {
    ServerConfig { kdf_iterations: 64, escrow_parties: Some(4), ..ServerConfig::default() }
}

#[test]
fn bundle_and_images_survive_the_filesystem() {
    let c = cfg();
    let mut env = SimEnv::seeded(8);
    let mut s = prepare_trusted_server(&c, &mut env).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ServerImages::snapshot(&s.host).unwrap().write_to_dir(&dir.path().join("images")).unwrap();
    let out = seal_all(&mut s.host, &c, &mut env).unwrap();
    out.bundle.write_to_dir(&dir.path().join("bundle")).unwrap();

    let pre = ServerImages::read_from_dir(&dir.path().join("images")).unwrap();
    let bundle = PublishedBundle::read_from_dir(&dir.path().join("bundle")).unwrap();
    assert_eq!(bundle, out.bundle);
    let v = verify_seal(&pre, &bundle, &VerificationProfile::for_config(&c).unwrap()).unwrap();
    assert!(v.passed(), "{v}");
}

#[test]
fn escrow_shares_reopen_the_sealed_vm_disk() {
    let c = cfg();
    let mut env = SimEnv::seeded(9);
    let mut s = prepare_trusted_server(&c, &mut env).unwrap();
    let pre = ServerImages::snapshot(&s.host).unwrap();
    let out = seal_all(&mut s.host, &c, &mut env).unwrap();
    assert_eq!(out.escrow_shares.len(), 4);
    s.host.power_off();

    let key = Keyfile::from_bytes(pre.vm.boot.read_file("/keyfile").unwrap()).unwrap();
    let mut vol = s.host.guest().unwrap().root_volume().clone();
    assert_eq!(vol.unlock(&key).err(), Some(VolumeError::KeyslotsEmpty));
    let record = reconstruct(&out.escrow_shares).unwrap();
    vol.install_slot(0, KeySlot::from_record(&record).unwrap()).unwrap();
    let h = vol.unlock(&key).unwrap();
    assert!(h.read_all(&vol).is_ok());
    // the restored slot holds the post-reencryption key, so the old header is no help
    assert_ne!(vol.header().to_bytes(), pre.vm.root.header().to_bytes());
}

#[test]
fn restore_then_reseal_verifies_again() {
    let c = cfg();
    let mut env = SimEnv::seeded(10);
    let mut s = prepare_trusted_server(&c, &mut env).unwrap();
    let images = ServerImages::snapshot(&s.host).unwrap();
    let first = seal_all(&mut s.host, &c, &mut env).unwrap();
    s.host.power_off();
    let second = restore_pre_seal(&mut s.host, &images, true, &c, &mut env).unwrap().unwrap();
    let profile = VerificationProfile::for_config(&c).unwrap();
    assert!(verify_seal(&images, &second.bundle, &profile).unwrap().passed());
    // fresh master key each time
    assert_ne!(first.vm_log.render(), second.vm_log.render());
}
