//! The plain build-and-sign pipeline and its pre-material interception window.

use alloc::string::String;
use alloc::vec::Vec;

use crate::format::{assemble, AsmError};
use crate::signing::{
    append_signature, material_for_bytes, sign_material, KeyError, SignedEnclave, SigningKey, SigningMaterial,
    VendorMetadata,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Stage {
    Fresh,
    Compiled,
    Suspended,
    Resumed,
    Finished,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum InterceptError {
    #[error("pipeline was already intercepted")]
    AlreadyIntercepted,
    #[error("pipeline exposes no interception point")]
    PipelineHardened,
    #[error("pipeline already produced its output")]
    PipelineFinished,
    #[error(transparent)]
    Assembly(#[from] AsmError),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Assembly(#[from] AsmError),
    #[error(transparent)]
    Key(#[from] KeyError),
    #[error("pipeline is suspended; resume the interception handle first")]
    Suspended,
    #[error("pipeline already produced its output")]
    Finished,
}

/// Anything an adversary can try to suspend between compilation and
/// material generation.
pub trait InterceptionPoint {
    fn intercept(&mut self) -> Result<InterceptionHandle<'_>, InterceptError>;
}

/// Suspends `pipeline` right after compilation.
pub fn intercept<P: InterceptionPoint + ?Sized>(pipeline: &mut P) -> Result<InterceptionHandle<'_>, InterceptError> {
    pipeline.intercept()
}

/// Read/write access to the in-flight image bytes of a suspended pipeline.
pub struct InterceptionHandle<'a> {
    bytes: &'a mut Vec<u8>,
    stage: &'a mut Stage,
}

impl InterceptionHandle<'_> {
    pub fn image_bytes(&self) -> &[u8] {
        self.bytes
    }

    pub fn image_bytes_mut(&mut self) -> &mut Vec<u8> {
        self.bytes
    }

    /// Lets the pipeline continue with whatever bytes are present now.
    pub fn resume(self) {
        *self.stage = Stage::Resumed;
    }
}

/// Source in, signed bundle out: assemble, then generate material over the
/// compiler output, sign, append. The signer only ever sees the material.
pub struct SigningPipeline {
    source: String,
    metadata: VendorMetadata,
    stage: Stage,
    bytes: Vec<u8>,
    intercepted: bool,
}

impl SigningPipeline {
    pub fn new(source: impl Into<String>, metadata: VendorMetadata) -> Self {
        SigningPipeline {
            source: source.into(),
            metadata,
            stage: Stage::Fresh,
            bytes: Vec::new(),
            intercepted: false,
        }
    }

    fn compile(&mut self) -> Result<(), AsmError> {
        if self.stage == Stage::Fresh {
            self.bytes = assemble(&self.source)?
                .image
                .serialize()
                .expect("assembler output is valid");
            self.stage = Stage::Compiled;
        }
        Ok(())
    }

    fn ready(&mut self) -> Result<(), PipelineError> {
        match self.stage {
            Stage::Suspended => Err(PipelineError::Suspended),
            Stage::Finished => Err(PipelineError::Finished),
            _ => Ok(self.compile()?),
        }
    }

    /// First half of the two-step flow: image bytes and the material over them.
    pub fn generate_material(&mut self) -> Result<(Vec<u8>, SigningMaterial), PipelineError> {
        self.ready()?;
        self.stage = Stage::Finished;
        let bytes = core::mem::take(&mut self.bytes);
        let material = material_for_bytes(&bytes, self.metadata);
        Ok((bytes, material))
    }

    /// Single-step signing with a key held by the pipeline's host.
    pub fn sign_single_step(&mut self, key: &SigningKey) -> Result<SignedEnclave, PipelineError> {
        let (bytes, material) = self.generate_material()?;
        let signature = sign_material(&material, key)?;
        Ok(append_signature(bytes, material, signature))
    }

    pub fn was_intercepted(&self) -> bool {
        self.intercepted
    }
}

impl InterceptionPoint for SigningPipeline {
    fn intercept(&mut self) -> Result<InterceptionHandle<'_>, InterceptError> {
        if self.intercepted {
            return Err(InterceptError::AlreadyIntercepted);
        }
        if self.stage == Stage::Finished {
            return Err(InterceptError::PipelineFinished);
        }
        self.compile()?;
        self.stage = Stage::Suspended;
        self.intercepted = true;
        Ok(InterceptionHandle {
            bytes: &mut self.bytes,
            stage: &mut self.stage,
        })
    }
}
