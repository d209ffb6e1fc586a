//! Wall-clock timings of the signing pipelines, reported as mean and 95%
//! confidence interval per phase.

use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::statistics::Statistics;

use enclave_supply_core::attack::{
    identify_signer, intercept, NodePatch, ProcessDescriptor, SignerHeuristics, SigningPipeline, TamperPatchSpec,
};
use enclave_supply_core::format::assemble;
use enclave_supply_core::samples::{self, remote_decrypt};
use enclave_supply_core::signing::{
    bundled_key, bundled_key_der, sign_material, verify_and_load, SigningKey, VendorMetadata,
};

use crate::central::{
    build_and_sign_atomic, establish_channel, platform_for_seed, AtomicBuilder, BuildRequest, BuilderManifest, Passive,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum PipelineKind {
    Plain,
    Intercepted,
    Atomic,
}

impl FromStr for PipelineKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "plain" => Ok(PipelineKind::Plain),
            "intercepted" => Ok(PipelineKind::Intercepted),
            "atomic" => Ok(PipelineKind::Atomic),
            _ => Err(format!("unknown pipeline {s:?} (plain, intercepted, atomic)")),
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum BenchError {
    #[error("need at least 3 repetitions, got {0}")]
    TooFewRepetitions(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Interval {
    pub mean: f64,
    pub half_width: f64,
}

/// Mean and two-sided 95% t-interval half-width.
pub fn mean_ci95(samples: &[f64]) -> Interval {
    let n = samples.len();
    let mean = samples.mean();
    if n < 2 {
        return Interval {
            mean,
            half_width: f64::NAN,
        };
    }
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .expect("positive degrees of freedom")
        .inverse_cdf(0.975);
    Interval {
        mean,
        half_width: t * samples.std_dev() / (n as f64).sqrt(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PhaseRow {
    pub phase: String,
    pub millis: Interval,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchTable {
    pub kind: PipelineKind,
    pub repetitions: usize,
    pub rows: Vec<PhaseRow>,
}

impl BenchTable {
    pub fn total(&self) -> &Interval {
        &self.rows.last().expect("total row").millis
    }

    pub fn render(&self) -> String {
        let mut s = format!(
            "pipeline {:?}, {} repetitions (ms, mean ± 95% CI)\n",
            self.kind, self.repetitions
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "  {:<10} {:>10.3} ± {:.3}",
                r.phase, r.millis.mean, r.millis.half_width
            );
        }
        s
    }
}

struct Clock {
    phases: Vec<(&'static str, f64)>,
    last: Instant,
}

impl Clock {
    fn start() -> Self {
        Clock {
            phases: Vec::new(),
            last: Instant::now(),
        }
    }

    fn lap(&mut self, name: &'static str) {
        let now = Instant::now();
        self.phases.push((name, (now - self.last).as_secs_f64() * 1e3));
        self.last = now;
    }
}

fn signer_processes() -> Vec<ProcessDescriptor> {
    let mk = |name: &str, argv: &str, mem: u64| ProcessDescriptor {
        name: name.into(),
        argv: argv.split(' ').map(String::from).collect(),
        memory_bytes: mem,
        code_hash: [0; 32],
        signer_cert_id: None,
    };
    vec![
        mk("explorer.exe", "explorer.exe", 80 << 20),
        mk("devenv.exe", "devenv.exe /build", 600 << 20),
        mk(
            "sgx_sign.exe",
            "sgx_sign.exe sign -enclave enclave.dll -key key.pem",
            6 << 20,
        ),
    ]
}

fn run_once(kind: PipelineKind, key: &SigningKey, seed: u64) -> Vec<(&'static str, f64)> {
    let meta = VendorMetadata::default();
    let mut c = Clock::start();
    match kind {
        PipelineKind::Plain => {
            let mut p = SigningPipeline::new(samples::REMOTE_DECRYPT, meta);
            c.lap("prepare");
            let (bytes, material) = p.generate_material().expect("sample builds");
            c.lap("compile");
            let sig = sign_material(&material, key).expect("bundled key");
            c.lap("sign");
            std::hint::black_box((bytes, sig));
        }
        PipelineKind::Intercepted => {
            let procs = signer_processes();
            let heur = SignerHeuristics {
                name_glob: Some("*sign*".into()),
                argv_substring: Some("-enclave".into()),
                ..Default::default()
            };
            std::hint::black_box(identify_signer(&procs, &heur));
            let mut p = SigningPipeline::new(samples::REMOTE_DECRYPT, meta);
            c.lap("prepare");
            let spec = TamperPatchSpec::new(remote_decrypt::DECRYPT, b"John", b"Lary", 25).expect("valid");
            let mut h = intercept(&mut p).expect("plain pipeline");
            NodePatch::Tamper(spec)
                .apply_to_bytes(h.image_bytes_mut())
                .expect("patch fits");
            h.resume();
            let (bytes, material) = p.generate_material().expect("sample builds");
            c.lap("compile");
            let sig = sign_material(&material, key).expect("bundled key");
            c.lap("sign");
            std::hint::black_box((bytes, sig));
        }
        PipelineKind::Atomic => {
            let platform = platform_for_seed(seed);
            let manifest = BuilderManifest::current();
            let mut builder = AtomicBuilder::new(manifest.clone(), platform.clone(), seed);
            let mut rng = <rand_chacha::ChaCha20Rng as rand::SeedableRng>::seed_from_u64(seed);
            let mut ch = establish_channel(&platform, &mut builder, "isv", manifest.measurement(), &mut rng)
                .expect("same platform");
            let req = BuildRequest {
                source: samples::REMOTE_DECRYPT.into(),
                metadata: meta,
                private_key: bundled_key_der(0),
            };
            c.lap("prepare");
            let bundle = build_and_sign_atomic(&mut ch, &mut builder, &req, &mut Passive).expect("builds");
            let t = builder.last_timings().expect("successful build");
            c.phases.push(("compile", t.compile.as_secs_f64() * 1e3));
            c.phases.push(("sign", (t.prepare + t.sign).as_secs_f64() * 1e3));
            c.last = Instant::now();
            std::hint::black_box(verify_and_load(&bundle).is_ok());
        }
    }
    let total = c.phases.iter().map(|(_, ms)| ms).sum();
    c.phases.push(("total", total));
    c.phases
}

pub fn emit_benchmark(kind: PipelineKind, repetitions: usize) -> Result<BenchTable, BenchError> {
    if repetitions < 3 {
        return Err(BenchError::TooFewRepetitions(repetitions));
    }
    let key = bundled_key(0);
    // Warm-up so first-touch costs do not skew the first sample.
    let _ = assemble(samples::REMOTE_DECRYPT);
    let runs: Vec<Vec<(&str, f64)>> = (0..repetitions).map(|i| run_once(kind, &key, i as u64)).collect();
    let rows = runs[0]
        .iter()
        .enumerate()
        .map(|(p, (name, _))| {
            let samples: Vec<f64> = runs.iter().map(|r| r[p].1).collect();
            PhaseRow {
                phase: name.to_string(),
                millis: mean_ci95(&samples),
            }
        })
        .collect();
    Ok(BenchTable {
        kind,
        repetitions,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ci_matches_hand_computed_interval() {
        // mean 5, sample sd sqrt(2.5), t(0.975, 4) = 2.776445
        let iv = mean_ci95(&[3.0, 4.0, 5.0, 6.0, 7.0]);
        assert!((iv.mean - 5.0).abs() < 1e-12);
        let expected = 2.776_445_105 * 2.5f64.sqrt() / 5f64.sqrt();
        assert!((iv.half_width - expected).abs() < 1e-6, "{}", iv.half_width);
    }

    #[test]
    fn too_few_repetitions() {
        assert_eq!(
            emit_benchmark(PipelineKind::Plain, 1),
            Err(BenchError::TooFewRepetitions(1))
        );
    }
}
