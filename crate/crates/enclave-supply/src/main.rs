use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode, Stdio};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde_json::json;

use enclave_supply::agent_script::{parse_agent_script, parse_number};
use enclave_supply::bench::{emit_benchmark, PipelineKind};
use enclave_supply::central::{
    platform_for_seed, read_frame, serve, write_frame, AtomicBuilder, BuildRequest, BuilderManifest, PendingChannel,
    ServerHello,
};
use enclave_supply::dist::{load_gas_model, run_dist_sim, DistConfig};
use enclave_supply::files::{
    self, decode_material, encode_bundle, encode_signature, load_key, read_bundle, read_image,
};
use enclave_supply::scenario::{run_scenario, Scenario, ScenarioName};
use enclave_supply_core::attack::{
    intercept, make_leak_patch, make_tamper_patch, plan_patch, LeakPatchSpec, NodePatch, PatchPayload, SigningPipeline,
    TamperPatchSpec,
};
use enclave_supply_core::contract::SubmissionMode;
use enclave_supply_core::format::{assemble, find_free_chunks, locate_ecall_table, EnclaveImage};
use enclave_supply_core::samples;
use enclave_supply_core::signing::{
    append_signature, generate_signing_material, measure, sign_material, sign_single_step, verify_and_load,
    VendorMetadata,
};
use enclave_supply_core::vm::{self, run_with_agent, EcallRequest, MemoryLayout, UntrustedAgent};

type AnyError = Box<dyn std::error::Error>;

#[derive(Parser)]
#[command(
    name = "enclave-supply",
    version,
    about = "Enclave supply-chain attack and mitigation simulator"
)]
struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    emit_json: bool,
    /// Directory for written files.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct MetaArgs {
    #[arg(long, default_value = "isv")]
    vendor: String,
    #[arg(long, default_value_t = 20_190_611)]
    date: u32,
    #[arg(long, default_value_t = 0)]
    attributes: u64,
    #[arg(long = "enclave-version", default_value_t = 1)]
    version: u32,
}

impl MetaArgs {
    fn metadata(&self) -> VendorMetadata {
        VendorMetadata {
            vendor_id: VendorMetadata::vendor_from_label(&self.vendor),
            date: self.date,
            attributes: self.attributes,
            version: self.version,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Full,
    Hash,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a named scenario: ATTACK_LEAK, ATTACK_TAMPER, MITIGATE_CENTRAL, MITIGATE_DISTRIBUTED.
    Scenario {
        name: String,
        /// Scenario parameter as key=value.
        #[arg(short = 'p', long = "param")]
        params: Vec<String>,
        #[arg(long)]
        nodes: Option<u32>,
        #[arg(long)]
        adversaries: Option<u32>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Assemble a `.seta` file (or `sample:<name>`) into a `.set1` image.
    Assemble {
        source: String,
        #[arg(short = 'o', long = "output")]
        output: Option<String>,
        /// Print the symbol map.
        #[arg(long)]
        symbols: bool,
    },
    /// SHA-256 measurement of a `.set1` image.
    Measure { image: PathBuf },
    /// Material, signature and bundle in one step.
    #[command(name = "sign-1step")]
    SignOneStep {
        image: PathBuf,
        #[arg(long)]
        key: String,
        #[command(flatten)]
        meta: MetaArgs,
        #[arg(short = 'o', long = "output", default_value = "enclave.sgxs1")]
        output: String,
    },
    /// Write the 64-byte signing material for an image.
    GenMaterial {
        image: PathBuf,
        #[command(flatten)]
        meta: MetaArgs,
        #[arg(short = 'o', long = "output", default_value = "enclave.material")]
        output: String,
    },
    /// Sign a material file at the signing facility.
    SignMaterial {
        material: PathBuf,
        #[arg(long)]
        key: String,
        #[arg(short = 'o', long = "output", default_value = "enclave.sig")]
        output: String,
    },
    /// Append a signature to an image without any checks.
    AppendSig {
        image: PathBuf,
        material: PathBuf,
        signature: PathBuf,
        #[arg(short = 'o', long = "output", default_value = "enclave.sgxs1")]
        output: String,
    },
    /// Load-time verification of a `.sgxs1` bundle.
    Verify { bundle: PathBuf },
    /// Signer-pipeline attack tooling.
    #[command(subcommand)]
    Attack(AttackCmd),
    /// Run ecalls in the enclave VM.
    #[command(subcommand)]
    Vm(VmCmd),
    /// Builder enclave over framed stdin/stdout.
    BuilderServe,
    /// Send a build request to a freshly spawned builder and write the bundle.
    IsvClient {
        source: String,
        #[arg(long)]
        key: String,
        #[command(flatten)]
        meta: MetaArgs,
        #[arg(long, default_value = "isv")]
        isv: String,
        #[arg(short = 'o', long = "output", default_value = "enclave.sgxs1")]
        output: String,
    },
    /// Distributed majority build with gas accounting.
    DistSim {
        #[arg(long, default_value_t = 10)]
        nodes: u32,
        #[arg(long, default_value_t = 1)]
        adversaries: u32,
        #[arg(long, value_enum, default_value = "full")]
        mode: ModeArg,
        #[arg(long, default_value_t = 0.0)]
        lambda: f64,
        /// TOML file overriding gas model fields.
        #[arg(long)]
        gas_config: Option<PathBuf>,
    },
    /// Pipeline timings, mean and 95% CI per phase.
    Bench {
        #[arg(long, default_value = "plain")]
        pipeline: String,
        #[arg(long, default_value_t = 10)]
        reps: usize,
    },
}

#[derive(Args, Clone)]
struct PatchArgs {
    image: PathBuf,
    #[arg(value_parser = ["leak", "tamper"])]
    kind: String,
    #[arg(long, default_value_t = 1)]
    ecall: u16,
    #[arg(long, default_value_t = 32)]
    stack_bytes: u16,
    #[arg(long, default_value_t = 48)]
    flag_offset: u16,
    #[arg(long, default_value = "John")]
    needle: String,
    #[arg(long, default_value = "Lary")]
    replacement: String,
    #[arg(long, default_value_t = 25)]
    buffer_len: u32,
}

impl PatchArgs {
    fn patch(&self) -> Result<NodePatch, AnyError> {
        Ok(match self.kind.as_str() {
            "leak" => NodePatch::Leak(LeakPatchSpec::new(self.ecall, self.stack_bytes, self.flag_offset)?),
            _ => NodePatch::Tamper(TamperPatchSpec::new(
                self.ecall,
                self.needle.as_bytes(),
                self.replacement.as_bytes(),
                self.buffer_len,
            )?),
        })
    }

    fn payload(&self, img: &EnclaveImage) -> Result<(PatchPayload, u32), AnyError> {
        Ok(match self.patch()? {
            NodePatch::Leak(s) => make_leak_patch(img, &s)?,
            NodePatch::Tamper(s) => make_tamper_patch(img, &s)?,
            NodePatch::FlipCodeByte(_) => unreachable!(),
        })
    }
}

#[derive(Subcommand)]
enum AttackCmd {
    /// Show where a payload would go.
    Plan(PatchArgs),
    /// Patch an image file.
    Apply {
        #[command(flatten)]
        args: PatchArgs,
        #[arg(short = 'o', long = "output", default_value = "patched.set1")]
        output: String,
    },
    /// Intercept a signing pipeline, insert the leak payload, sign.
    Leak {
        source: String,
        #[arg(long, default_value = "bundled:isv-alpha")]
        key: String,
        #[arg(long, default_value_t = 1)]
        ecall: u16,
        #[arg(long, default_value_t = 32)]
        stack_bytes: u16,
        #[arg(short = 'o', long = "output", default_value = "leaky.sgxs1")]
        output: String,
    },
    /// Intercept a signing pipeline, insert the tamper payload, sign.
    Tamper {
        source: String,
        #[arg(long, default_value = "bundled:isv-alpha")]
        key: String,
        #[arg(long, default_value_t = 0)]
        ecall: u16,
        #[arg(long, default_value = "John")]
        needle: String,
        #[arg(long, default_value = "Lary")]
        replacement: String,
        #[arg(long, default_value_t = 25)]
        buffer_len: u32,
        #[arg(short = 'o', long = "output", default_value = "tampered.sgxs1")]
        output: String,
    },
}

#[derive(Subcommand)]
enum VmCmd {
    /// Verify, load and run one ecall.
    Run {
        bundle: PathBuf,
        #[arg(long, default_value_t = 0)]
        ecall: u16,
        /// Ecall argument (decimal or 0x hex).
        #[arg(long = "arg")]
        args: Vec<String>,
        /// Untrusted memory preload as addr:hexbytes.
        #[arg(long = "write")]
        writes: Vec<String>,
        /// Out-buffer to dump after the run, as addr:len.
        #[arg(long = "out-buffer")]
        out_buffers: Vec<String>,
        /// Agent script file.
        #[arg(long)]
        agent: Option<PathBuf>,
        /// Snapshot the frame when execution reaches this CODE offset.
        #[arg(long)]
        watch: Option<String>,
        #[arg(long, default_value_t = vm::DEFAULT_STEP_BUDGET)]
        budget: u64,
    },
}

fn out_path(dir: &Path, name: &str) -> PathBuf {
    let p = Path::new(name);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        dir.join(p)
    }
}

fn load_source(spec: &str) -> Result<String, AnyError> {
    match spec.strip_prefix("sample:") {
        Some(name) => Ok(samples::sample(name)
            .ok_or_else(|| format!("no bundled sample {name:?}"))?
            .to_string()),
        None => Ok(files::read_text(spec)?),
    }
}

fn num(s: &str) -> Result<u32, AnyError> {
    Ok(parse_number(s).ok_or_else(|| format!("not a number: {s:?}"))?)
}

fn pair(s: &str) -> Result<(&str, &str), AnyError> {
    Ok(s.split_once(':').ok_or_else(|| format!("expected a:b, got {s:?}"))?)
}

fn emit(cli: &Cli, text: String, value: serde_json::Value) {
    if cli.emit_json {
        println!("{}", serde_json::to_string_pretty(&value).expect("json"));
    } else {
        print!("{text}");
    }
}

fn run(cli: &Cli) -> Result<bool, AnyError> {
    match &cli.cmd {
        Cmd::Scenario {
            name,
            params,
            nodes,
            adversaries,
            mode,
            lambda,
        } => {
            let mut s = Scenario::new(name.parse::<ScenarioName>()?, cli.seed);
            for p in params {
                let (k, v) = p
                    .split_once('=')
                    .ok_or_else(|| format!("expected key=value, got {p:?}"))?;
                s = s.with(k, v);
            }
            if let Some(n) = nodes {
                s = s.with("nodes", n);
            }
            if let Some(f) = adversaries {
                s = s.with("adversaries", f);
            }
            if let Some(m) = mode {
                s = s.with("mode", if matches!(m, ModeArg::Full) { "full" } else { "hash" });
            }
            if let Some(l) = lambda {
                s = s.with("lambda", l);
            }
            let report = run_scenario(&s)?;
            let passed = report.passed;
            emit(cli, report.text, report.json);
            Ok(passed)
        }
        Cmd::Assemble {
            source,
            output,
            symbols,
        } => {
            let asm = assemble(&load_source(source)?)?;
            let bytes = asm.image.serialize()?;
            let name = output.clone().unwrap_or_else(|| {
                let stem = Path::new(source.trim_start_matches("sample:"))
                    .file_stem()
                    .map_or("enclave".into(), |s| s.to_string_lossy().into_owned());
                format!("{stem}.set1")
            });
            let path = out_path(&cli.out, &name);
            files::write(&path, &bytes)?;
            let mut text = format!("wrote {} ({} bytes)\n", path.display(), bytes.len());
            if *symbols {
                for e in &asm.symbols.ecalls {
                    text += &format!(
                        "ecall {:<16} wrapper {:#06x} function {:#06x}\n",
                        e.label, e.wrapper_offset, e.function_offset
                    );
                }
                for c in find_free_chunks(&asm.image) {
                    text += &format!("free {:#06x} len {} {:?}\n", c.code_offset, c.length, c.fill);
                }
            }
            let ecalls: Vec<_> = asm
                .symbols
                .ecalls
                .iter()
                .map(|e| json!({"label": e.label, "function_offset": e.function_offset}))
                .collect();
            emit(cli, text, json!({"path": path, "bytes": bytes.len(), "ecalls": ecalls}));
            Ok(true)
        }
        Cmd::Measure { image } => {
            let m = measure(&read_image(image)?)?;
            emit(cli, format!("{m}\n"), json!({ "measurement": m.to_string() }));
            Ok(true)
        }
        Cmd::SignOneStep {
            image,
            key,
            meta,
            output,
        } => {
            let bundle = sign_single_step(&read_image(image)?, meta.metadata(), &load_key(key)?)?;
            let path = out_path(&cli.out, output);
            files::write(&path, &encode_bundle(&bundle))?;
            emit(
                cli,
                format!("signed {} -> {}\n", bundle.material.measurement, path.display()),
                json!({"measurement": bundle.material.measurement.to_string(), "path": path}),
            );
            Ok(true)
        }
        Cmd::GenMaterial { image, meta, output } => {
            let m = generate_signing_material(&read_image(image)?, meta.metadata())?;
            let path = out_path(&cli.out, output);
            files::write(&path, &m.to_bytes())?;
            emit(
                cli,
                format!("material for {} -> {}\n", m.measurement, path.display()),
                json!({"measurement": m.measurement.to_string(), "path": path}),
            );
            Ok(true)
        }
        Cmd::SignMaterial { material, key, output } => {
            let m = decode_material(&files::read(material)?)?;
            let sig = sign_material(&m, &load_key(key)?)?;
            let path = out_path(&cli.out, output);
            files::write(&path, &encode_signature(&sig))?;
            emit(cli, format!("signature -> {}\n", path.display()), json!({"path": path}));
            Ok(true)
        }
        Cmd::AppendSig {
            image,
            material,
            signature,
            output,
        } => {
            let bundle = append_signature(
                files::read(image)?,
                decode_material(&files::read(material)?)?,
                files::decode_signature(&files::read(signature)?)?,
            );
            let path = out_path(&cli.out, output);
            files::write(&path, &encode_bundle(&bundle))?;
            emit(cli, format!("bundle -> {}\n", path.display()), json!({"path": path}));
            Ok(true)
        }
        Cmd::Verify { bundle } => {
            let b = read_bundle(bundle)?;
            let r = verify_and_load(&b);
            let (text, ok) = match &r {
                Ok(l) => (format!("ACCEPTED measurement {}\n", l.measurement), true),
                Err(e) => (format!("REJECTED {e}\n"), false),
            };
            emit(
                cli,
                text,
                json!({"accepted": ok, "detail": r.as_ref().map(|_| String::new()).unwrap_or_else(|e| e.to_string())}),
            );
            Ok(ok)
        }
        Cmd::Attack(a) => attack(cli, a),
        Cmd::Vm(VmCmd::Run {
            bundle,
            ecall,
            args,
            writes,
            out_buffers,
            agent,
            watch,
            budget,
        }) => {
            let loaded = verify_and_load(&read_bundle(bundle)?)?;
            let mut layout = MemoryLayout::default();
            for ob in out_buffers {
                let (a, l) = pair(ob)?;
                layout = layout.with_out_buffer(num(a)?, num(l)?);
            }
            let mut m = vm::load(&loaded, layout)?;
            for w in writes {
                let (a, h) = pair(w)?;
                m.write_untrusted(num(a)?, &hex::decode(h)?)
                    .map_err(|f| f.to_string())?;
            }
            if let Some(pc) = watch {
                m.watch(num(pc)?);
            }
            let agent = match agent {
                Some(p) => parse_agent_script(&files::read_text(p)?)?,
                None => UntrustedAgent::default(),
            };
            let args: Vec<u32> = args.iter().map(|a| num(a)).collect::<Result<_, _>>()?;
            let t = run_with_agent(
                &mut m,
                EcallRequest {
                    index: *ecall,
                    args: &args,
                },
                &agent,
                *budget,
            );
            let ok = t.result().is_ok();
            let reads: Vec<_> = t
                .reads()
                .map(|(a, b)| json!({"addr": a, "hex": hex::encode(b)}))
                .collect();
            emit(
                cli,
                t.render(),
                json!({"ok": ok, "steps": t.steps, "reads": reads, "outcome": format!("{:?}", t.outcome)}),
            );
            Ok(ok)
        }
        Cmd::BuilderServe => {
            let mut builder = AtomicBuilder::new(BuilderManifest::current(), platform_for_seed(cli.seed), cli.seed);
            serve(
                &mut builder,
                &mut std::io::stdin().lock(),
                &mut std::io::stdout().lock(),
            )?;
            Ok(true)
        }
        Cmd::IsvClient {
            source,
            key,
            meta,
            isv,
            output,
        } => isv_client(cli, source, key, meta, isv, output),
        Cmd::DistSim {
            nodes,
            adversaries,
            mode,
            lambda,
            gas_config,
        } => {
            let cfg = DistConfig {
                nodes: *nodes,
                adversaries: *adversaries,
                mode: match mode {
                    ModeArg::Full => SubmissionMode::FullMaterial,
                    ModeArg::Hash => SubmissionMode::HashOnly,
                },
                ambient_load: *lambda,
                seed: cli.seed,
                gas: match gas_config {
                    Some(p) => load_gas_model(p)?,
                    None => Default::default(),
                },
            };
            let r = run_dist_sim(&cfg)?;
            emit(cli, r.render(), r.to_json());
            Ok(r.verdict_holds)
        }
        Cmd::Bench { pipeline, reps } => {
            let t = emit_benchmark(pipeline.parse::<PipelineKind>()?, *reps)?;
            emit(cli, t.render(), serde_json::to_value(&t)?);
            Ok(true)
        }
    }
}

fn attack(cli: &Cli, a: &AttackCmd) -> Result<bool, AnyError> {
    match a {
        AttackCmd::Plan(p) => {
            let img = read_image(&p.image)?;
            let found = locate_ecall_table(&img)?;
            let (payload, hook) = p.payload(&img)?;
            let plan = plan_patch(&img, &payload, hook)?;
            let text = format!(
                "ecall table at RODATA {:#x}, {} entries\npayload {} instructions\n{plan}",
                found.table.rodata_offset,
                found.table.count,
                payload.instruction_count()
            );
            emit(
                cli,
                text,
                json!({"hook_site": plan.hook_site, "fragments": plan.fragments.len(), "bytes_used": plan.bytes_used()}),
            );
            Ok(true)
        }
        AttackCmd::Apply { args, output } => {
            let img = read_image(&args.image)?;
            let (patched, plan) = args.patch()?.apply(&img)?;
            let path = out_path(&cli.out, output);
            files::write(&path, &patched.serialize()?)?;
            let plan = plan.expect("trampoline patch");
            emit(
                cli,
                format!("{plan}wrote {}\n", path.display()),
                json!({"path": path, "hook_site": plan.hook_site}),
            );
            Ok(true)
        }
        AttackCmd::Leak {
            source,
            key,
            ecall,
            stack_bytes,
            output,
        } => {
            let flag = (4 + *stack_bytes).next_multiple_of(4);
            let patch = NodePatch::Leak(LeakPatchSpec::new(*ecall, *stack_bytes, flag)?);
            intercepted_sign(cli, source, key, &patch, output)
        }
        AttackCmd::Tamper {
            source,
            key,
            ecall,
            needle,
            replacement,
            buffer_len,
            output,
        } => {
            let patch = NodePatch::Tamper(TamperPatchSpec::new(
                *ecall,
                needle.as_bytes(),
                replacement.as_bytes(),
                *buffer_len,
            )?);
            intercepted_sign(cli, source, key, &patch, output)
        }
    }
}

fn intercepted_sign(cli: &Cli, source: &str, key: &str, patch: &NodePatch, output: &str) -> Result<bool, AnyError> {
    let mut pipeline = SigningPipeline::new(load_source(source)?, VendorMetadata::default());
    let mut h = intercept(&mut pipeline)?;
    let plan = patch.apply_to_bytes(h.image_bytes_mut())?;
    h.resume();
    let bundle = pipeline.sign_single_step(&load_key(key)?)?;
    let path = out_path(&cli.out, output);
    files::write(&path, &encode_bundle(&bundle))?;
    let accepted = verify_and_load(&bundle).is_ok();
    let mut text = String::new();
    if let Some(p) = &plan {
        text += &p.to_string();
    }
    text += &format!(
        "signed {} -> {}\nverify_and_load: {}\n",
        bundle.material.measurement,
        path.display(),
        if accepted { "ACCEPTED" } else { "REJECTED" }
    );
    emit(
        cli,
        text,
        json!({"path": path, "measurement": bundle.material.measurement.to_string(), "accepted": accepted}),
    );
    Ok(accepted)
}

fn isv_client(cli: &Cli, source: &str, key: &str, meta: &MetaArgs, isv: &str, output: &str) -> Result<bool, AnyError> {
    let source = load_source(source)?;
    let request = BuildRequest {
        source: source.clone(),
        metadata: meta.metadata(),
        private_key: files::key_der(key)?,
    };
    let mut child = Command::new(std::env::current_exe()?)
        .args(["--seed", &cli.seed.to_string(), "builder-serve"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()?;
    let mut to = child.stdin.take().expect("piped");
    let mut from = child.stdout.take().expect("piped");

    let mut rng = ChaCha20Rng::seed_from_u64(cli.seed ^ 0x15f);
    let (pending, hello) = PendingChannel::start(isv, &mut rng);
    write_frame(&mut to, &hello.encode())?;
    let reply = ServerHello::decode(&read_frame(&mut from)?.ok_or("builder closed the channel")?)?;
    let expected = BuilderManifest::current().measurement();
    let mut channel = pending.finish(&platform_for_seed(cli.seed), &reply, expected)?;
    write_frame(&mut to, &channel.seal_request(&request))?;
    let frame = read_frame(&mut from)?.ok_or("builder closed the channel")?;
    drop(to);
    child.wait()?;
    let bundle = channel.open_response(&frame)?;

    let recomputed = enclave_supply::central::isv_recompute(&source);
    let matches = recomputed == Some(bundle.material.measurement);
    let accepted = verify_and_load(&bundle).is_ok();
    let path = out_path(&cli.out, output);
    files::write(&path, &encode_bundle(&bundle))?;
    emit(
        cli,
        format!(
            "builder attested {}\nbundle {} -> {}\nISV recomputed measurement matches: {}\nverify_and_load: {}\n",
            channel.attested_measurement,
            bundle.material.measurement,
            path.display(),
            if matches { "yes" } else { "NO" },
            if accepted { "ACCEPTED" } else { "REJECTED" }
        ),
        json!({"path": path, "measurement": bundle.material.measurement.to_string(), "matches": matches, "accepted": accepted}),
    );
    Ok(matches && accepted)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
