//! Software secure processor: PCR bank, a private attestation key that never
//! leaves this module, and signed runtime reports.
//!
//! PCR11 carries the launch-time code measurement, PCR23 accumulates runtime
//! claims (EDR digests). Extend is `P' = H(0x03 ‖ P ‖ v)`.

use serde::{Deserialize, Serialize};

use crate::crypto::{self, domain, hash_parts, Digest, KeyPair, Signature, VerifyKey, SIGNATURE_SCHEME};
use crate::error::{Error, Result};

pub const PCR_COUNT: usize = 24;
pub const PCR_CODE: usize = 11;
pub const PCR_RUNTIME: usize = 23;

pub fn pcr_extend(current: &Digest, value: &Digest) -> Digest {
    hash_parts(domain::PCR_EXTEND, &[&current.0, &value.0])
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PcrBank {
    regs: [Digest; PCR_COUNT],
}

impl Default for PcrBank {
    fn default() -> Self {
        PcrBank { regs: [Digest::ZERO; PCR_COUNT] }
    }
}

impl PcrBank {
    pub fn read(&self, index: usize) -> Digest {
        self.regs[index]
    }

    pub fn extend(&mut self, index: usize, value: &Digest) {
        self.regs[index] = pcr_extend(&self.regs[index], value);
    }
}

/// Platform-root signature over an attestation verify key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Endorsement {
    pub att_pub: VerifyKey,
    pub sig: Signature,
}

fn endorsement_message(att_pub: &VerifyKey) -> Vec<u8> {
    let mut m = Vec::with_capacity(33);
    m.push(domain::ENDORSEMENT);
    m.extend_from_slice(&att_pub.0);
    m
}

impl Endorsement {
    pub fn verify(&self, platform_root: &VerifyKey) -> bool {
        crypto::verify(platform_root, &endorsement_message(&self.att_pub), &self.sig)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttestationReport {
    pub pcr11: Digest,
    pub pcr23: Digest,
    pub edr_digest: Digest,
    pub counter: u64,
    pub sig: Signature,
    pub att_pub: VerifyKey,
    pub endorsement: Signature,
    pub scheme: String,
}

impl AttestationReport {
    /// The byte string covered by `sig`.
    pub fn signed_message(&self) -> Vec<u8> {
        report_message(&self.pcr11, &self.pcr23, &self.edr_digest, self.counter)
    }
}

fn report_message(pcr11: &Digest, pcr23: &Digest, edr_digest: &Digest, counter: u64) -> Vec<u8> {
    let mut m = Vec::with_capacity(1 + 32 * 3 + 8);
    m.push(domain::REPORT);
    m.extend_from_slice(&pcr11.0);
    m.extend_from_slice(&pcr23.0);
    m.extend_from_slice(&edr_digest.0);
    m.extend_from_slice(&counter.to_be_bytes());
    m
}

/// A simulated secure processor. Only the owning exclave can submit claims,
/// since it holds the only `&mut` to it.
pub struct SecureProcessor {
    pcr: PcrBank,
    attestation_key: KeyPair,
    endorsement: Endorsement,
    counter: u64,
    measured: bool,
}

impl std::fmt::Debug for SecureProcessor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SecureProcessor")
            .field("att_pub", &self.endorsement.att_pub)
            .field("counter", &self.counter)
            .field("measured", &self.measured)
            .finish_non_exhaustive()
    }
}

impl SecureProcessor {
    pub fn create(platform_root: &KeyPair, seed: &[u8; 32]) -> (Self, Endorsement) {
        let attestation_key = KeyPair::from_seed(seed);
        let att_pub = attestation_key.verify_key();
        let endorsement = Endorsement { att_pub, sig: platform_root.sign(&endorsement_message(&att_pub)) };
        let sp = SecureProcessor {
            pcr: PcrBank::default(),
            attestation_key,
            endorsement,
            counter: 0,
            measured: false,
        };
        (sp, endorsement)
    }

    pub fn pcr(&self) -> &PcrBank {
        &self.pcr
    }

    pub fn endorsement(&self) -> &Endorsement {
        &self.endorsement
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    pub fn measure_code(&mut self, code_measurement: &Digest) -> Result<()> {
        if self.measured || self.counter > 0 {
            return Err(Error::MeasureAfterAttest);
        }
        self.pcr.extend(PCR_CODE, code_measurement);
        self.measured = true;
        Ok(())
    }

    pub fn attest(&mut self, edr_digest: &Digest) -> Result<AttestationReport> {
        if !self.measured {
            return Err(Error::NotMeasured);
        }
        self.pcr.extend(PCR_RUNTIME, edr_digest);
        self.counter += 1;
        let pcr11 = self.pcr.read(PCR_CODE);
        let pcr23 = self.pcr.read(PCR_RUNTIME);
        let sig = self.attestation_key.sign(&report_message(&pcr11, &pcr23, edr_digest, self.counter));
        Ok(AttestationReport {
            pcr11,
            pcr23,
            edr_digest: *edr_digest,
            counter: self.counter,
            sig,
            att_pub: self.endorsement.att_pub,
            endorsement: self.endorsement.sig,
            scheme: SIGNATURE_SCHEME.to_string(),
        })
    }
}

pub fn sp_create(platform_root: &KeyPair, seed: &[u8; 32]) -> (SecureProcessor, Endorsement) {
    SecureProcessor::create(platform_root, seed)
}

pub fn sp_measure_code(sp: &mut SecureProcessor, code_measurement: &Digest) -> Result<()> {
    sp.measure_code(code_measurement)
}

pub fn sp_attest(sp: &mut SecureProcessor, edr_digest: &Digest) -> Result<AttestationReport> {
    sp.attest(edr_digest)
}

/// Checks the endorsement chain and the report signature. Stateless.
pub fn verify_report(report: &AttestationReport, platform_root: &VerifyKey) -> bool {
    if report.scheme != SIGNATURE_SCHEME {
        return false;
    }
    let cert = Endorsement { att_pub: report.att_pub, sig: report.endorsement };
    cert.verify(platform_root) && crypto::verify(&report.att_pub, &report.signed_message(), &report.sig)
}
