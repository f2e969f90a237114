//! Application layer of the sealed VM: millionaires' ranking, anonymous
//! maildrop, one-way credential replication, the data vault and a DNS
//! privacy proxy, plus the line protocol used by `tsctl serve`.
//!
//! Nothing here offers a way in besides the typed requests below.

use std::collections::BTreeMap;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::machine::{Machine, MachineError, OutboundMail, LDAP_CONFIG_DB, LDAP_DATA_DB};
use crate::sealing::{ServerConfig, VAULT_DEVICE};
use crate::sim::SimEnv;
use crate::volume::{Keyfile, VolumeError};

pub const MILLIONAIRES_TABLE: &str = "/var/lib/millionaires/table.tsv";
pub const RANKING_FILE: &str = "ranking.txt";
pub const LDAP_UPDATES_FILE: &str = "ldap-updates.txt";

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("server is not sealed and serving")]
    NotSealed,
    #[error("authentication required")]
    AuthRequired,
    #[error("no replication source configured")]
    ReplicationUnconfigured,
    #[error("the sealed directory is a read-only replica")]
    ReadOnlyReplica,
    #[error("no data vault attached")]
    NoVault,
    #[error("vault key rejected")]
    WrongKey,
    #[error("cannot resolve {0}")]
    Unresolvable(String),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error(transparent)]
    Machine(#[from] MachineError),
}

pub type Result<T, E = ServiceError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankingOrder {
    /// Richest first.
    #[default]
    Descending,
    Ascending,
}

/// Settings the sealed services were provisioned with.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceContext {
    pub webroot: String,
    pub mail_destination: String,
    pub order: RankingOrder,
    /// Require directory authentication for submissions.
    pub require_auth: bool,
    pub proxy_address: String,
}

impl ServiceContext {
    pub fn from_config(cfg: &ServerConfig) -> Self {
        ServiceContext {
            webroot: cfg.webroot.trim_end_matches('/').to_string(),
            mail_destination: cfg.mail_destination.clone(),
            order: cfg.millionaires_order,
            require_auth: false,
            proxy_address: cfg.server_address.clone(),
        }
    }
}

fn require_serving(vm: &Machine) -> Result<()> {
    if vm.is_sealed() && vm.web_running() {
        Ok(())
    } else {
        Err(ServiceError::NotSealed)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Submission {
    pub name: String,
    /// Minor currency units.
    pub assets: u64,
    pub sequence: u64,
}

/// The submission table, stored human readable inside the encrypted VM tree.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MillionairesState {
    pub rows: Vec<Submission>,
}

impl MillionairesState {
    pub fn parse(text: &str) -> Self {
        let rows = text
            .lines()
            .filter_map(|l| {
                let (name, assets) = l.rsplit_once('\t')?;
                Some((name.to_string(), assets.parse().ok()?))
            })
            .enumerate()
            .map(|(i, (name, assets))| Submission { name, assets, sequence: i as u64 + 1 })
            .collect();
        MillionairesState { rows }
    }

    pub fn render(&self) -> String {
        self.rows.iter().map(|r| format!("{}\t{}\n", r.name, r.assets)).collect()
    }

    pub fn push(&mut self, name: &str, assets: u64) -> u64 {
        let sequence = self.rows.len() as u64 + 1;
        self.rows.push(Submission { name: name.to_string(), assets, sequence });
        sequence
    }

    /// Names only, sorted by assets; equal assets keep arrival order.
    pub fn ranking(&self, order: RankingOrder) -> Vec<String> {
        let mut rows: Vec<&Submission> = self.rows.iter().collect();
        match order {
            RankingOrder::Descending => rows.sort_by_key(|r| std::cmp::Reverse(r.assets)),
            RankingOrder::Ascending => rows.sort_by_key(|a| a.assets),
        }
        rows.into_iter().map(|r| r.name.clone()).collect()
    }
}

fn load_table(vm: &Machine) -> MillionairesState {
    MillionairesState::parse(&vm.read_text(MILLIONAIRES_TABLE).unwrap_or_default())
}

pub fn millionaires_submit(
    vm: &mut Machine,
    ctx: &ServiceContext,
    credentials: Option<(&str, &str)>,
    name: &str,
    assets: u64,
    env: &mut SimEnv,
) -> Result<u64> {
    require_serving(vm)?;
    if ctx.require_auth && !credentials.is_some_and(|(u, p)| authenticate(vm, u, p)) {
        return Err(ServiceError::AuthRequired);
    }
    let name = name.trim();
    if name.is_empty() || name.contains(['\t', '\n', '\r']) {
        return Err(ServiceError::BadRequest(format!("unusable name {name:?}")));
    }
    let mut table = load_table(vm);
    let seq = table.push(name, assets);
    vm.write_file(MILLIONAIRES_TABLE, table.render(), env)?;
    Ok(seq)
}

/// Sorts the table and publishes only the names, one per line.
pub fn millionaires_publish(vm: &mut Machine, ctx: &ServiceContext, env: &mut SimEnv) -> Result<Vec<String>> {
    require_serving(vm)?;
    let names = load_table(vm).ranking(ctx.order);
    let text: String = names.iter().map(|n| format!("{n}\n")).collect();
    vm.write_file(&format!("{}/{RANKING_FILE}", ctx.webroot), text, env)?;
    Ok(names)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MailMessage {
    pub nickname: String,
    pub comment: String,
    pub return_address: Option<String>,
}

/// Forwards the form to the preconfigured address. Nothing is kept on disk.
pub fn maildrop_submit(vm: &mut Machine, ctx: &ServiceContext, msg: &MailMessage) -> Result<OutboundMail> {
    require_serving(vm)?;
    let mut body = format!("nickname: {}\ncomment: {}\n", msg.nickname, msg.comment);
    if let Some(r) = &msg.return_address {
        body += &format!("reply-to: {r}\n");
    }
    let mail = OutboundMail { to: ctx.mail_destination.clone(), subject: "maildrop".into(), body };
    vm.send_mail(mail.clone())?;
    Ok(mail)
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Verifier {
    salt: [u8; 16],
    hash: [u8; 32],
}

fn verifier_hash(salt: &[u8], password: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(salt);
    h.update(password.as_bytes());
    h.finalize().into()
}

/// User → salted password verifier, as held by the external primary and
/// replicated to the sealed VM.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CredentialDirectory {
    entries: BTreeMap<String, Verifier>,
}

impl CredentialDirectory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_users(users: &[(String, String)], rng: &mut impl RngCore) -> Self {
        let mut d = Self::new();
        for (u, p) in users {
            d.set_password(u, p, rng);
        }
        d
    }

    pub fn set_password(&mut self, user: &str, password: &str, rng: &mut impl RngCore) {
        let mut salt = [0u8; 16];
        rng.fill_bytes(&mut salt);
        self.entries.insert(user.to_string(), Verifier { salt, hash: verifier_hash(&salt, password) });
    }

    pub fn remove_user(&mut self, user: &str) -> bool {
        self.entries.remove(user).is_some()
    }

    pub fn users(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn authenticate(&self, user: &str, password: &str) -> bool {
        self.entries.get(user).is_some_and(|v| verifier_hash(&v.salt, password) == v.hash)
    }

    pub fn to_ldif(&self) -> String {
        self.entries
            .iter()
            .map(|(u, v)| {
                format!(
                    "dn: uid={u},ou=people,dc=ts,dc=local\nobjectClass: inetOrgPerson\nuid: {u}\nuserPassword: {{SSHA256}}{}${}\n\n",
                    hex::encode(v.hash),
                    hex::encode(v.salt)
                )
            })
            .collect()
    }

    /// Reads back `to_ldif` output; entries without a usable verifier are skipped.
    pub fn from_ldif(text: &str) -> Self {
        let mut entries = BTreeMap::new();
        for block in text.split("\n\n") {
            let mut uid = None;
            let mut verifier = None;
            for line in block.lines() {
                if let Some(u) = line.strip_prefix("uid: ") {
                    uid = Some(u.to_string());
                } else if let Some(p) = line.strip_prefix("userPassword: {SSHA256}") {
                    verifier = p.split_once('$').and_then(|(h, s)| {
                        Some(Verifier {
                            hash: hex::decode(h).ok()?.try_into().ok()?,
                            salt: hex::decode(s).ok()?.try_into().ok()?,
                        })
                    });
                }
            }
            if let (Some(u), Some(v)) = (uid, verifier) {
                entries.insert(u, v);
            }
        }
        CredentialDirectory { entries }
    }
}

/// The replica currently held by the VM.
pub fn sealed_directory(vm: &Machine) -> CredentialDirectory {
    CredentialDirectory::from_ldif(&vm.read_text(LDAP_DATA_DB).unwrap_or_default())
}

pub fn authenticate(vm: &Machine, user: &str, password: &str) -> bool {
    sealed_directory(vm).authenticate(user, password)
}

/// Pulls a snapshot of the primary into the sealed replica and publishes
/// the full dump. Data only ever flows primary → sealed.
pub fn credential_sync(
    vm: &mut Machine,
    ctx: &ServiceContext,
    primary: &CredentialDirectory,
    env: &mut SimEnv,
) -> Result<String> {
    require_serving(vm)?;
    let configured = vm.read_text(LDAP_CONFIG_DB).is_some_and(|c| c.contains("olcSyncrepl:"));
    if !configured {
        return Err(ServiceError::ReplicationUnconfigured);
    }
    let ldif = primary.to_ldif();
    vm.write_file(LDAP_DATA_DB, ldif.clone(), env)?;
    let dump = format!("{}\n{ldif}", env.clock.date());
    vm.append_file(&format!("{}/{LDAP_UPDATES_FILE}", ctx.webroot), dump.as_bytes(), env)?;
    Ok(dump)
}

/// There is no write path into the sealed replica.
pub fn sealed_directory_write(_vm: &mut Machine, _user: &str, _password: &str) -> Result<()> {
    Err(ServiceError::ReadOnlyReplica)
}

/// Accepts the data provider's uploaded vault key; it lives in RAM only.
pub fn vault_attach(vm: &mut Machine, key: &Keyfile) -> Result<()> {
    require_serving(vm)?;
    if !vm.extra_disks().iter().any(|(d, _)| d == VAULT_DEVICE) {
        return Err(ServiceError::NoVault);
    }
    match vm.unlock_extra(VAULT_DEVICE, key) {
        Ok(()) => Ok(()),
        Err(MachineError::Volume(VolumeError::NoMatchingSlot)) => Err(ServiceError::WrongKey),
        Err(e) => Err(e.into()),
    }
}

pub fn vault_read(vm: &Machine, sector: u64) -> Result<Vec<u8>> {
    if !vm.extra_unlocked(VAULT_DEVICE) {
        return Err(ServiceError::NoVault);
    }
    Ok(vm.read_extra(VAULT_DEVICE, sector)?)
}

/// Simulated public resolver that records who asked what.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Resolver {
    pub table: BTreeMap<String, String>,
    pub query_log: Vec<(String, String)>,
}

impl Resolver {
    pub fn with_records(records: &[(&str, &str)]) -> Self {
        Resolver {
            table: records.iter().map(|(d, a)| (d.to_string(), a.to_string())).collect(),
            query_log: Vec::new(),
        }
    }

    pub fn query(&mut self, source: &str, domain: &str) -> Option<String> {
        self.query_log.push((source.to_string(), domain.to_string()));
        self.table.get(domain).cloned()
    }
}

/// Resolves on behalf of `client`; the upstream only ever sees the proxy.
pub fn dns_proxy_resolve(ctx: &ServiceContext, domain: &str, _client: &str, upstream: &mut Resolver) -> Result<String> {
    let domain = domain.trim().trim_end_matches('.').to_ascii_lowercase();
    upstream.query(&ctx.proxy_address, &domain).ok_or(ServiceError::Unresolvable(domain))
}

/// One client connection speaking the line protocol.
pub struct ServeSession<'a> {
    pub vm: &'a mut Machine,
    pub ctx: ServiceContext,
    pub primary: &'a CredentialDirectory,
    pub resolver: &'a mut Resolver,
    pub client: String,
    credentials: Option<(String, String)>,
}

impl<'a> ServeSession<'a> {
    pub fn new(
        vm: &'a mut Machine,
        ctx: ServiceContext,
        primary: &'a CredentialDirectory,
        resolver: &'a mut Resolver,
        client: &str,
    ) -> Self {
        ServeSession { vm, ctx, primary, resolver, client: client.to_string(), credentials: None }
    }

    /// Handles one request line and returns the response text.
    pub fn handle(&mut self, line: &str, env: &mut SimEnv) -> String {
        match self.dispatch(line.trim(), env) {
            Ok(s) => s,
            Err(e) => format!("ERR {e}"),
        }
    }

    fn dispatch(&mut self, line: &str, env: &mut SimEnv) -> Result<String> {
        let (verb, rest) = line.split_once(' ').unwrap_or((line, ""));
        let rest = rest.trim();
        match verb.to_ascii_uppercase().as_str() {
            "SUBMIT" => {
                let (name, assets) =
                    rest.rsplit_once(' ').ok_or_else(|| ServiceError::BadRequest("SUBMIT <name> <assets>".into()))?;
                let assets: u64 =
                    assets.parse().map_err(|_| ServiceError::BadRequest(format!("bad asset value {assets:?}")))?;
                let creds = self.credentials.as_ref().map(|(u, p)| (u.as_str(), p.as_str()));
                let seq = millionaires_submit(self.vm, &self.ctx, creds, name, assets, env)?;
                Ok(format!("OK {seq}"))
            }
            "PUBLISH" => {
                let names = millionaires_publish(self.vm, &self.ctx, env)?;
                Ok(names.iter().map(|n| format!("{n}\n")).collect::<String>() + "OK")
            }
            "MAIL" => {
                let mut parts = rest.splitn(3, '|');
                let nickname = parts.next().unwrap_or_default().to_string();
                let comment = parts.next().ok_or_else(|| ServiceError::BadRequest("MAIL nick|comment|[return]".into()))?;
                let return_address = parts.next().map(str::trim).filter(|r| !r.is_empty()).map(String::from);
                let msg = MailMessage { nickname, comment: comment.to_string(), return_address };
                maildrop_submit(self.vm, &self.ctx, &msg)?;
                Ok("OK queued".into())
            }
            "AUTH" => {
                let (u, p) = rest.split_once(' ').ok_or_else(|| ServiceError::BadRequest("AUTH <user> <pass>".into()))?;
                if authenticate(self.vm, u, p) {
                    self.credentials = Some((u.to_string(), p.to_string()));
                    Ok("OK".into())
                } else {
                    self.credentials = None;
                    Ok("ERR rejected".into())
                }
            }
            "SYNC" => {
                credential_sync(self.vm, &self.ctx, self.primary, env)?;
                Ok(format!("OK {} users", self.primary.len()))
            }
            "VAULTKEY" => {
                let bytes = hex::decode(rest).map_err(|_| ServiceError::BadRequest("key is not hex".into()))?;
                let key = Keyfile::from_bytes(&bytes).map_err(|_| ServiceError::WrongKey)?;
                vault_attach(self.vm, &key)?;
                Ok("OK vault unlocked".into())
            }
            "RESOLVE" => {
                let addr = dns_proxy_resolve(&self.ctx, rest, &self.client, self.resolver)?;
                Ok(format!("OK {addr}"))
            }
            "" => Err(ServiceError::BadRequest("empty request".into())),
            other => Err(ServiceError::BadRequest(format!("unknown command {other}"))),
        }
    }
}
