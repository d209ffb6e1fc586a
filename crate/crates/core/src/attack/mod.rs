//! The pre-signing attack: find the signer, suspend the pipeline after
//! compilation, and rewrite the image before any material exists.

pub mod identify;
pub mod patch;
pub mod payloads;
pub mod pipeline;

use alloc::vec::Vec;

pub use identify::{glob_match, identify_signer, ProcessDescriptor, SignerHeuristics};
pub use patch::{apply_patch, plan_patch, touched_ranges, Fragment, PatchError, PatchPayload, PatchPlan};
pub use payloads::{
    final_return_hook, make_leak_patch, make_tamper_patch, LeakPatchSpec, PayloadError, TamperPatchSpec,
    TamperPlacement, MARKER,
};
pub use pipeline::{intercept, InterceptError, InterceptionHandle, InterceptionPoint, PipelineError, SigningPipeline};

use crate::format::{EnclaveImage, FormatError, SectionKind};

/// A modification an adversary applies inside the interception window.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum NodePatch {
    /// XOR `0x01` into one CODE byte (offset taken modulo the CODE length).
    FlipCodeByte(u32),
    Leak(LeakPatchSpec),
    Tamper(TamperPatchSpec),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AttackError {
    #[error("intercepted bytes do not parse: {0}")]
    Format(#[from] FormatError),
    #[error(transparent)]
    Payload(#[from] PayloadError),
    #[error(transparent)]
    Patch(#[from] PatchError),
}

/// Plans and applies a payload in one go.
pub fn patch_image(
    image: &EnclaveImage,
    payload: &PatchPayload,
    hook_site: u32,
) -> Result<(EnclaveImage, PatchPlan), PatchError> {
    let plan = plan_patch(image, payload, hook_site)?;
    Ok((apply_patch(image, &plan)?, plan))
}

impl NodePatch {
    /// Applies the patch to an image. Returns the plan for trampoline patches.
    pub fn apply(&self, image: &EnclaveImage) -> Result<(EnclaveImage, Option<PatchPlan>), AttackError> {
        let (payload, hook) = match self {
            NodePatch::FlipCodeByte(at) => {
                let mut out = image.clone();
                let code = out.payload_mut(SectionKind::Code);
                let i = *at as usize % code.len();
                code[i] ^= 0x01;
                return Ok((out, None));
            }
            NodePatch::Leak(spec) => make_leak_patch(image, spec)?,
            NodePatch::Tamper(spec) => make_tamper_patch(image, spec)?,
        };
        let (out, plan) = patch_image(image, &payload, hook)?;
        Ok((out, Some(plan)))
    }

    /// Rewrites in-flight serialized bytes, as the malware does while the
    /// pipeline is suspended.
    pub fn apply_to_bytes(&self, bytes: &mut Vec<u8>) -> Result<Option<PatchPlan>, AttackError> {
        let image = EnclaveImage::parse(bytes)?;
        let (patched, plan) = self.apply(&image)?;
        *bytes = patched.serialize()?;
        Ok(plan)
    }
}
