//! All-parties key escrow: XOR splitting of the wrapped VM keyslot.
//!
//! Any proper subset of shares is uniformly random and says nothing about
//! the secret. Only the full set, combined, restores it.

use std::collections::BTreeSet;

use rand::RngCore;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const SHARE_MAGIC: &[u8] = b"TSSHARE1\n";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EscrowError {
    #[error("need at least two parties, got {0}")]
    TooFewParties(usize),
    #[error("secret is empty")]
    EmptySecret,
    #[error("have {have} of {need} shares")]
    MissingShares { have: usize, need: usize },
    #[error("shares do not match their commitment")]
    CommitmentMismatch,
    #[error("inconsistent share set: {0}")]
    Inconsistent(String),
    #[error("malformed share file: {0}")]
    Malformed(&'static str),
}

#[derive(Clone, PartialEq, Eq, Serialize)]
pub struct KeyShare {
    pub index: u32,
    pub total: u32,
    pub commitment: [u8; 32],
    pub payload: Vec<u8>,
}

impl std::fmt::Debug for KeyShare {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KeyShare")
            .field("index", &self.index)
            .field("total", &self.total)
            .field("commitment", &hex::encode(self.commitment))
            .field("payload_len", &self.payload.len())
            .finish()
    }
}

fn commit(secret: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"tsvol escrow commitment v1");
    h.update(secret);
    h.finalize().into()
}

fn put(out: &mut Vec<u8>, field: &[u8]) {
    out.extend_from_slice(&(field.len() as u32).to_le_bytes());
    out.extend_from_slice(field);
}

impl KeyShare {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = SHARE_MAGIC.to_vec();
        put(&mut out, &self.index.to_le_bytes());
        put(&mut out, &self.total.to_le_bytes());
        put(&mut out, &self.commitment);
        put(&mut out, &self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EscrowError> {
        let mut rest = bytes.strip_prefix(SHARE_MAGIC).ok_or(EscrowError::Malformed("bad magic"))?;
        let mut fields = Vec::with_capacity(4);
        for _ in 0..4 {
            let len = rest.get(..4).ok_or(EscrowError::Malformed("truncated length"))?;
            let len = u32::from_le_bytes(len.try_into().unwrap()) as usize;
            let field = rest.get(4..4 + len).ok_or(EscrowError::Malformed("truncated field"))?;
            fields.push(field);
            rest = &rest[4 + len..];
        }
        if !rest.is_empty() {
            return Err(EscrowError::Malformed("trailing bytes"));
        }
        let u32_field = |b: &[u8]| b.try_into().map(u32::from_le_bytes).map_err(|_| EscrowError::Malformed("bad integer"));
        Ok(KeyShare {
            index: u32_field(fields[0])?,
            total: u32_field(fields[1])?,
            commitment: fields[2].try_into().map_err(|_| EscrowError::Malformed("bad commitment"))?,
            payload: fields[3].to_vec(),
        })
    }
}

pub fn split_key(secret: &[u8], n: usize, rng: &mut impl RngCore) -> Result<Vec<KeyShare>, EscrowError> {
    if n < 2 {
        return Err(EscrowError::TooFewParties(n));
    }
    if secret.is_empty() {
        return Err(EscrowError::EmptySecret);
    }
    let commitment = commit(secret);
    let mut last = secret.to_vec();
    let mut shares = Vec::with_capacity(n);
    for i in 1..n {
        let mut payload = vec![0u8; secret.len()];
        rng.fill_bytes(&mut payload);
        last.iter_mut().zip(&payload).for_each(|(a, b)| *a ^= b);
        shares.push(KeyShare { index: i as u32, total: n as u32, commitment, payload });
    }
    shares.push(KeyShare { index: n as u32, total: n as u32, commitment, payload: last });
    Ok(shares)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ShareReport {
    pub consistent: bool,
    pub complete: bool,
    pub problems: Vec<String>,
}

/// Checks a share set for structural consistency without combining it.
pub fn verify_shares(shares: &[KeyShare]) -> ShareReport {
    let mut problems = Vec::new();
    let Some(first) = shares.first() else {
        return ShareReport { consistent: false, complete: false, problems: vec!["no shares".into()] };
    };
    if shares.iter().any(|s| s.total != first.total) {
        problems.push("shares disagree on the party count".into());
    }
    if shares.iter().any(|s| s.commitment != first.commitment) {
        problems.push("shares carry different commitments".into());
    }
    if shares.iter().any(|s| s.payload.len() != first.payload.len()) {
        problems.push("payload lengths differ".into());
    }
    let mut seen = BTreeSet::new();
    for s in shares {
        if s.index == 0 || s.index > s.total {
            problems.push(format!("index {} outside 1..={}", s.index, s.total));
        }
        if !seen.insert(s.index) {
            problems.push(format!("duplicate index {}", s.index));
        }
    }
    let consistent = problems.is_empty();
    let complete = consistent && seen.len() == first.total as usize;
    ShareReport { consistent, complete, problems }
}

pub fn reconstruct(shares: &[KeyShare]) -> Result<Vec<u8>, EscrowError> {
    let report = verify_shares(shares);
    if !report.consistent {
        // differing commitments or lengths mean somebody's share was altered
        if shares.iter().any(|s| s.commitment != shares[0].commitment) {
            return Err(EscrowError::CommitmentMismatch);
        }
        if shares.is_empty() {
            return Err(EscrowError::MissingShares { have: 0, need: 2 });
        }
        return Err(EscrowError::Inconsistent(report.problems.join("; ")));
    }
    let need = shares[0].total as usize;
    if shares.len() < need {
        return Err(EscrowError::MissingShares { have: shares.len(), need });
    }
    let mut secret = vec![0u8; shares[0].payload.len()];
    for s in shares {
        secret.iter_mut().zip(&s.payload).for_each(|(a, b)| *a ^= b);
    }
    if commit(&secret) != shares[0].commitment {
        return Err(EscrowError::CommitmentMismatch);
    }
    Ok(secret)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn xor_of_payloads_is_secret() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let secret = b"wrapped master key record".to_vec();
        let shares = split_key(&secret, 4, &mut rng).unwrap();
        let mut x = vec![0u8; secret.len()];
        for s in &shares {
            x.iter_mut().zip(&s.payload).for_each(|(a, b)| *a ^= b);
        }
        assert_eq!(x, secret);
        assert_eq!(reconstruct(&shares).unwrap(), secret);
    }

    #[test]
    fn zero_secret_two_parties_gives_equal_shares() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let shares = split_key(&[0u8; 32], 2, &mut rng).unwrap();
        assert_eq!(shares[0].payload, shares[1].payload);
    }

    #[test]
    fn bad_parameters() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        assert_eq!(split_key(b"x", 1, &mut rng), Err(EscrowError::TooFewParties(1)));
        assert_eq!(split_key(b"", 3, &mut rng), Err(EscrowError::EmptySecret));
    }

    #[test]
    fn repeated_splits_use_fresh_randomness() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let secret = [7u8; 64];
        let mut seen = BTreeSet::new();
        for _ in 0..100 {
            for s in split_key(&secret, 3, &mut rng).unwrap() {
                assert!(seen.insert(s.payload), "payload repeated");
            }
        }
    }

    #[test]
    fn missing_and_tampered_shares() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let shares = split_key(b"secret record", 3, &mut rng).unwrap();
        assert_eq!(reconstruct(&shares[..2]), Err(EscrowError::MissingShares { have: 2, need: 3 }));
        let mut bad = shares.clone();
        bad[1].payload[0] ^= 1;
        assert_eq!(reconstruct(&bad), Err(EscrowError::CommitmentMismatch));
        let mut other = split_key(b"secret record", 3, &mut rng).unwrap();
        other[0] = shares[0].clone();
        // right commitment, but payloads from two different splits
        assert_eq!(reconstruct(&other), Err(EscrowError::CommitmentMismatch));
    }

    #[test]
    fn verify_reports() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let shares = split_key(b"abc", 3, &mut rng).unwrap();
        let r = verify_shares(&shares);
        assert!(r.consistent && r.complete);
        let r = verify_shares(&shares[..2]);
        assert!(r.consistent && !r.complete);
        let dup = vec![shares[0].clone(), shares[0].clone(), shares[2].clone()];
        assert!(!verify_shares(&dup).consistent);
        let mut mixed = shares.clone();
        mixed[2] = split_key(b"xyz", 3, &mut rng).unwrap().remove(2);
        assert!(!verify_shares(&mixed).consistent);
        assert!(!verify_shares(&[]).consistent);
    }

    #[test]
    fn share_file_round_trip() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        for s in split_key(&[9u8; 40], 5, &mut rng).unwrap() {
            let bytes = s.to_bytes();
            assert!(bytes.starts_with(SHARE_MAGIC));
            assert_eq!(KeyShare::from_bytes(&bytes).unwrap(), s);
            assert!(KeyShare::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        }
        assert!(KeyShare::from_bytes(b"garbage").is_err());
    }

    #[test]
    fn random_round_trips() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        for _ in 0..200 {
            let len = rng.gen_range(1..200);
            let mut secret = vec![0u8; len];
            rng.fill_bytes(&mut secret);
            let n = rng.gen_range(2..=8);
            assert_eq!(reconstruct(&split_key(&secret, n, &mut rng).unwrap()).unwrap(), secret);
        }
    }
}
