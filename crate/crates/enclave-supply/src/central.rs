//! The builder-enclave pipeline: source and key arrive over an attested,
//! encrypted channel and only a signed bundle leaves. Nothing in between is
//! reachable from outside.

use std::io::{self, Read, Write};
use std::time::{Duration, Instant};

use chacha20poly1305::aead::{Aead, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use rand::{CryptoRng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};
use x25519_dalek::{PublicKey as DhPublic, StaticSecret};

use enclave_supply_core::attack::{InterceptError, InterceptionHandle, InterceptionPoint};
use enclave_supply_core::format::{assemble, locate_ecall_table, EnclaveImage, HEADER_LEN, SECTION_PREFIX_LEN};
use enclave_supply_core::signing::{
    append_signature, generate_signing_material, measure, sign_material, AttestationReport, MeasurementHash, Platform,
    SignedEnclave, SigningKey, VendorMetadata,
};

use crate::files::{decode_bundle, encode_bundle};

/// What the builder's own measurement is computed over.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BuilderManifest {
    pub assembler_version: String,
    pub isa_version: String,
    pub module_version: String,
}

impl BuilderManifest {
    pub fn current() -> Self {
        BuilderManifest {
            assembler_version: "seta-asm 1".into(),
            isa_version: "set1-isa 1".into(),
            module_version: env!("CARGO_PKG_VERSION").into(),
        }
    }

    pub fn measurement(&self) -> MeasurementHash {
        let text = format!(
            "builder-manifest\nassembler={}\nisa={}\nmodule={}\n",
            self.assembler_version, self.isa_version, self.module_version
        );
        MeasurementHash::of_bytes(text.as_bytes())
    }
}

/// The ISV's enclave identity on the shared platform.
pub fn isv_measurement(isv: &str) -> MeasurementHash {
    MeasurementHash::of_bytes(format!("isv:{isv}").as_bytes())
}

/// Platform secret for a simulated machine, derived from a seed.
pub fn platform_for_seed(seed: u64) -> Platform {
    let secret: [u8; 32] = Sha256::new()
        .chain_update(b"platform-secret")
        .chain_update(seed.to_le_bytes())
        .finalize()
        .into();
    Platform::with_secret(secret)
}

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
pub enum ChannelError {
    #[error("builder attests {actual}, expected {expected}")]
    AttestationMismatch {
        expected: MeasurementHash,
        actual: MeasurementHash,
    },
    #[error("attestation report does not verify on this platform")]
    BadReport,
    #[error("report does not bind the builder's key share")]
    UnboundKey,
    #[error("message authentication failed")]
    Mac,
    #[error("malformed {0}")]
    Malformed(&'static str),
    #[error("builder: {0}")]
    Remote(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClientHello {
    pub isv: String,
    pub key_share: [u8; 32],
}

impl ClientHello {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = (self.isv.len() as u16).to_le_bytes().to_vec();
        out.extend_from_slice(self.isv.as_bytes());
        out.extend_from_slice(&self.key_share);
        out
    }

    pub fn decode(b: &[u8]) -> Result<Self, ChannelError> {
        let bad = ChannelError::Malformed("client hello");
        let n = u16::from_le_bytes(b.get(..2).ok_or(bad.clone())?.try_into().unwrap()) as usize;
        if b.len() != 2 + n + 32 {
            return Err(bad);
        }
        Ok(ClientHello {
            isv: String::from_utf8(b[2..2 + n].to_vec()).map_err(|_| bad)?,
            key_share: b[2 + n..].try_into().unwrap(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ServerHello {
    pub report: AttestationReport,
    pub key_share: [u8; 32],
}

impl ServerHello {
    const LEN: usize = 32 + 32 + 16 + 32 + 32;

    pub fn encode(&self) -> Vec<u8> {
        let r = &self.report;
        let mut out = Vec::with_capacity(Self::LEN);
        out.extend_from_slice(r.target_measurement.as_bytes());
        out.extend_from_slice(r.attester_measurement.as_bytes());
        out.extend_from_slice(&r.auxiliary);
        out.extend_from_slice(&r.mac);
        out.extend_from_slice(&self.key_share);
        out
    }

    pub fn decode(b: &[u8]) -> Result<Self, ChannelError> {
        if b.len() != Self::LEN {
            return Err(ChannelError::Malformed("server hello"));
        }
        Ok(ServerHello {
            report: AttestationReport {
                target_measurement: MeasurementHash(b[0..32].try_into().unwrap()),
                attester_measurement: MeasurementHash(b[32..64].try_into().unwrap()),
                auxiliary: b[64..80].try_into().unwrap(),
                mac: b[80..112].try_into().unwrap(),
            },
            key_share: b[112..144].try_into().unwrap(),
        })
    }
}

fn key_binding(share: &[u8; 32]) -> [u8; 16] {
    Sha256::digest(share)[..16].try_into().unwrap()
}

fn derive_session_key(shared: &[u8; 32], isv_share: &[u8; 32], builder_share: &[u8; 32]) -> [u8; 32] {
    Sha256::new()
        .chain_update(b"provisioning-channel")
        .chain_update(shared)
        .chain_update(isv_share)
        .chain_update(builder_share)
        .finalize()
        .into()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Direction {
    ToBuilder = 0,
    ToIsv = 1,
}

/// One end of an established channel. Each direction has its own counter, so
/// replayed or reordered frames fail authentication.
#[derive(Clone)]
struct Sealer {
    cipher: ChaCha20Poly1305,
    sent: u64,
    received: u64,
}

impl Sealer {
    fn new(key: &[u8; 32]) -> Self {
        Sealer {
            cipher: ChaCha20Poly1305::new(Key::from_slice(key)),
            sent: 0,
            received: 0,
        }
    }

    fn nonce(dir: Direction, counter: u64) -> Nonce {
        let mut n = [0u8; 12];
        n[0] = dir as u8;
        n[4..].copy_from_slice(&counter.to_le_bytes());
        *Nonce::from_slice(&n)
    }

    fn seal(&mut self, dir: Direction, plain: &[u8]) -> Vec<u8> {
        let ct = self
            .cipher
            .encrypt(&Self::nonce(dir, self.sent), plain)
            .expect("in-memory encryption");
        self.sent += 1;
        ct
    }

    fn open(&mut self, dir: Direction, ct: &[u8]) -> Result<Vec<u8>, ChannelError> {
        let pt = self
            .cipher
            .decrypt(&Self::nonce(dir, self.received), ct)
            .map_err(|_| ChannelError::Mac)?;
        self.received += 1;
        Ok(pt)
    }
}

/// ISV side of the channel.
pub struct ProvisioningChannel {
    pub session_key: [u8; 32],
    pub peer: String,
    pub attested_measurement: MeasurementHash,
    sealer: Sealer,
}

impl std::fmt::Debug for ProvisioningChannel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProvisioningChannel")
            .field("peer", &self.peer)
            .field("attested_measurement", &self.attested_measurement)
            .finish_non_exhaustive()
    }
}

/// Client half of the handshake, for callers that carry the hellos themselves.
pub struct PendingChannel {
    isv: String,
    secret: StaticSecret,
    share: [u8; 32],
}

impl PendingChannel {
    pub fn start(isv: &str, rng: &mut (impl RngCore + CryptoRng)) -> (Self, ClientHello) {
        let secret = StaticSecret::random_from_rng(rng);
        let share = DhPublic::from(&secret).to_bytes();
        let hello = ClientHello {
            isv: isv.into(),
            key_share: share,
        };
        (
            PendingChannel {
                isv: isv.into(),
                secret,
                share,
            },
            hello,
        )
    }

    /// Checks the builder's report and derives the session key.
    pub fn finish(
        self,
        platform: &Platform,
        reply: &ServerHello,
        expected_builder: MeasurementHash,
    ) -> Result<ProvisioningChannel, ChannelError> {
        if !platform.check_report(&reply.report, &isv_measurement(&self.isv)) {
            return Err(ChannelError::BadReport);
        }
        let actual = reply.report.target_measurement;
        if actual != expected_builder {
            return Err(ChannelError::AttestationMismatch {
                expected: expected_builder,
                actual,
            });
        }
        if reply.report.auxiliary != key_binding(&reply.key_share) {
            return Err(ChannelError::UnboundKey);
        }
        let shared = self.secret.diffie_hellman(&DhPublic::from(reply.key_share));
        let session_key = derive_session_key(shared.as_bytes(), &self.share, &reply.key_share);
        Ok(ProvisioningChannel {
            session_key,
            peer: self.isv,
            attested_measurement: actual,
            sealer: Sealer::new(&session_key),
        })
    }
}

impl ProvisioningChannel {
    pub fn seal_request(&mut self, request: &BuildRequest) -> Vec<u8> {
        self.sealer.seal(Direction::ToBuilder, &request.encode())
    }

    pub fn open_response(&mut self, frame: &[u8]) -> Result<SignedEnclave, ChannelError> {
        let plain = self.sealer.open(Direction::ToIsv, frame)?;
        match plain.split_first() {
            Some((0, bundle)) => decode_bundle(bundle).map_err(|_| ChannelError::Malformed("bundle")),
            Some((_, msg)) => Err(ChannelError::Remote(String::from_utf8_lossy(msg).into_owned())),
            None => Err(ChannelError::Malformed("response")),
        }
    }
}

/// Runs both halves of the handshake against an in-process builder.
pub fn establish_channel(
    platform: &Platform,
    builder: &mut AtomicBuilder,
    isv: &str,
    expected_builder: MeasurementHash,
    rng: &mut (impl RngCore + CryptoRng),
) -> Result<ProvisioningChannel, ChannelError> {
    let (pending, hello) = PendingChannel::start(isv, rng);
    let reply = builder.accept(&hello)?;
    pending.finish(platform, &reply, expected_builder)
}

/// Source, metadata and the private key, as sent to the builder.
#[derive(Clone, Debug)]
pub struct BuildRequest {
    pub source: String,
    pub metadata: VendorMetadata,
    /// PKCS#1 DER.
    pub private_key: Vec<u8>,
}

impl BuildRequest {
    /// `src_len u32 | source | vendor_id 16 | date u32 | attributes u64 | version u32 | key_len u32 | key`
    pub fn encode(&self) -> Vec<u8> {
        let m = &self.metadata;
        let mut out = Vec::new();
        out.extend_from_slice(&(self.source.len() as u32).to_le_bytes());
        out.extend_from_slice(self.source.as_bytes());
        out.extend_from_slice(&m.vendor_id);
        out.extend_from_slice(&m.date.to_le_bytes());
        out.extend_from_slice(&m.attributes.to_le_bytes());
        out.extend_from_slice(&m.version.to_le_bytes());
        out.extend_from_slice(&(self.private_key.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.private_key);
        out
    }

    pub fn decode(b: &[u8]) -> Result<Self, ChannelError> {
        let bad = || ChannelError::Malformed("build request");
        let mut pos = 0;
        let mut take = |n: usize| -> Result<&[u8], ChannelError> {
            let s = b.get(pos..pos + n).ok_or_else(bad)?;
            pos += n;
            Ok(s)
        };
        let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap());
        let n = u32_at(take(4)?) as usize;
        let source = String::from_utf8(take(n)?.to_vec()).map_err(|_| bad())?;
        let vendor_id = take(16)?.try_into().unwrap();
        let date = u32_at(take(4)?);
        let attributes = u64::from_le_bytes(take(8)?.try_into().unwrap());
        let version = u32_at(take(4)?);
        let k = u32_at(take(4)?) as usize;
        let private_key = take(k)?.to_vec();
        if pos != b.len() {
            return Err(bad());
        }
        Ok(BuildRequest {
            source,
            metadata: VendorMetadata {
                vendor_id,
                date,
                attributes,
                version,
            },
            private_key,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PhaseTimings {
    pub prepare: Duration,
    pub compile: Duration,
    pub sign: Duration,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum BuilderError {
    #[error("no channel established")]
    NoSession,
    #[error("request failed authentication; nothing produced")]
    Mac,
}

struct Session {
    sealer: Sealer,
}

/// The builder enclave. It holds no state an outsider can read between
/// receiving a request and emitting the encrypted bundle.
pub struct AtomicBuilder {
    manifest: BuilderManifest,
    platform: Platform,
    rng: ChaCha20Rng,
    session: Option<Session>,
    last_timings: Option<PhaseTimings>,
}

impl AtomicBuilder {
    pub fn new(manifest: BuilderManifest, platform: Platform, seed: u64) -> Self {
        AtomicBuilder {
            manifest,
            platform,
            rng: ChaCha20Rng::seed_from_u64(seed),
            session: None,
            last_timings: None,
        }
    }

    pub fn measurement(&self) -> MeasurementHash {
        self.manifest.measurement()
    }

    pub fn last_timings(&self) -> Option<PhaseTimings> {
        self.last_timings
    }

    /// Server half of the handshake: a report addressed to the ISV that binds
    /// the builder's key share.
    pub fn accept(&mut self, hello: &ClientHello) -> Result<ServerHello, ChannelError> {
        let secret = StaticSecret::random_from_rng(&mut self.rng);
        let share = DhPublic::from(&secret).to_bytes();
        let report = self
            .platform
            .report(self.measurement(), isv_measurement(&hello.isv), key_binding(&share))
            .map_err(|_| ChannelError::BadReport)?;
        let shared = secret.diffie_hellman(&DhPublic::from(hello.key_share));
        let key = derive_session_key(shared.as_bytes(), &hello.key_share, &share);
        self.session = Some(Session {
            sealer: Sealer::new(&key),
        });
        Ok(ServerHello {
            report,
            key_share: share,
        })
    }

    /// One encrypted request in, one encrypted response out. Build errors are
    /// returned encrypted; a request that fails authentication yields nothing.
    pub fn handle(&mut self, frame: &[u8]) -> Result<Vec<u8>, BuilderError> {
        let session = self.session.as_mut().ok_or(BuilderError::NoSession)?;
        let plain = session
            .sealer
            .open(Direction::ToBuilder, frame)
            .map_err(|_| BuilderError::Mac)?;
        let (reply, timings) = build_inside(&plain);
        self.last_timings = timings;
        let session = self.session.as_mut().expect("checked above");
        Ok(session.sealer.seal(Direction::ToIsv, &reply))
    }
}

/// Everything between decryption and encryption. Returns the plaintext reply.
fn build_inside(plain: &[u8]) -> (Vec<u8>, Option<PhaseTimings>) {
    let fail = |msg: String| {
        let mut v = vec![1u8];
        v.extend_from_slice(msg.as_bytes());
        (v, None)
    };
    let t0 = Instant::now();
    let req = match BuildRequest::decode(plain) {
        Ok(r) => r,
        Err(e) => return fail(e.to_string()),
    };
    let key = match SigningKey::from_pkcs1_der(&req.private_key) {
        Ok(k) => k,
        Err(e) => return fail(format!("invalid key: {e}")),
    };
    let prepare = t0.elapsed();
    let t1 = Instant::now();
    let image = match assemble(&req.source) {
        Ok(a) => a.image,
        Err(e) => return fail(format!("assembly error: {e}")),
    };
    let compile = t1.elapsed();
    let t2 = Instant::now();
    let material = generate_signing_material(&image, req.metadata).expect("assembler output is valid");
    let signature = match sign_material(&material, &key) {
        Ok(s) => s,
        Err(e) => return fail(format!("invalid key: {e}")),
    };
    let bundle = append_signature(image.serialize().expect("valid"), material, signature);
    let sign = t2.elapsed();
    let mut out = vec![0u8];
    out.extend_from_slice(&encode_bundle(&bundle));
    (out, Some(PhaseTimings { prepare, compile, sign }))
}

impl InterceptionPoint for AtomicBuilder {
    fn intercept(&mut self) -> Result<InterceptionHandle<'_>, InterceptError> {
        Err(InterceptError::PipelineHardened)
    }
}

/// The two places an adversary on the host can touch: the encrypted request
/// on its way in and the encrypted response on its way out.
pub trait ChannelAdversary {
    fn on_request(&mut self, _frame: &mut Vec<u8>) {}
    fn on_response(&mut self, _frame: &mut Vec<u8>) {}
}

pub struct Passive;

impl ChannelAdversary for Passive {}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum CentralError {
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Builder(#[from] BuilderError),
}

/// Sends one request through the builder and opens the response.
pub fn build_and_sign_atomic(
    channel: &mut ProvisioningChannel,
    builder: &mut AtomicBuilder,
    request: &BuildRequest,
    adversary: &mut dyn ChannelAdversary,
) -> Result<SignedEnclave, CentralError> {
    let mut frame = channel.seal_request(request);
    adversary.on_request(&mut frame);
    let mut reply = builder.handle(&frame)?;
    adversary.on_response(&mut reply);
    Ok(channel.open_response(&reply)?)
}

/// Changes to a signed bundle's image, applied after it left the builder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Mutation {
    None,
    /// XOR `mask` into the image byte at `offset` (modulo the image length).
    FlipByte {
        offset: usize,
        mask: u8,
    },
    /// Point ecall-table entry `index` at `target`.
    RewriteEcallEntry {
        index: usize,
        target: u32,
    },
}

pub fn adversary_post_hook_tamper(bundle: &SignedEnclave, mutation: &Mutation) -> SignedEnclave {
    let mut out = bundle.clone();
    match mutation {
        Mutation::None => {}
        Mutation::FlipByte { offset, mask } => {
            let n = out.image_bytes.len();
            out.image_bytes[offset % n] ^= mask;
        }
        Mutation::RewriteEcallEntry { index, target } => {
            if let Some(at) = ecall_entry_position(&out.image_bytes, *index) {
                out.image_bytes[at..at + 4].copy_from_slice(&target.to_le_bytes());
            }
        }
    }
    out
}

/// Byte position of an ecall-table entry inside the serialized image.
pub fn ecall_entry_position(image_bytes: &[u8], index: usize) -> Option<usize> {
    let img = EnclaveImage::parse(image_bytes).ok()?;
    let table = locate_ecall_table(&img).ok()?.table;
    if index >= table.entries.len() {
        return None;
    }
    let rodata_start = HEADER_LEN + SECTION_PREFIX_LEN + img.code().len() + SECTION_PREFIX_LEN;
    Some(rodata_start + table.rodata_offset as usize + 4 * index)
}

/// ISV-side check: recompute the measurement from the source it sent.
pub fn isv_recompute(source: &str) -> Option<MeasurementHash> {
    measure(&assemble(source).ok()?.image).ok()
}

pub fn write_frame(w: &mut impl Write, payload: &[u8]) -> io::Result<()> {
    w.write_all(&(payload.len() as u32).to_le_bytes())?;
    w.write_all(payload)?;
    w.flush()
}

/// `None` on a clean end of stream.
pub fn read_frame(r: &mut impl Read) -> io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let mut buf = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut buf)?;
    Ok(Some(buf))
}

/// Serves one ISV over framed stdio: a plaintext hello exchange, then any
/// number of encrypted build requests.
pub fn serve(builder: &mut AtomicBuilder, input: &mut impl Read, output: &mut impl Write) -> io::Result<()> {
    let Some(hello) = read_frame(input)? else {
        return Ok(());
    };
    let hello = ClientHello::decode(&hello).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
    let reply = builder.accept(&hello).map_err(io::Error::other)?;
    write_frame(output, &reply.encode())?;
    while let Some(frame) = read_frame(input)? {
        match builder.handle(&frame) {
            Ok(resp) => write_frame(output, &resp)?,
            // Unauthenticated input gets an empty frame and no output.
            Err(_) => write_frame(output, &[])?,
        }
    }
    Ok(())
}
