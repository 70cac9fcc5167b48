//! Robust blind video watermarking with an attention-based encoder/decoder.
//!
//! The library embeds a short bit message into a video as a bounded residual
//! (at most ±0.01 per pixel) and recovers it from the watermarked frames
//! alone, even after the video has been scaled, cropped or compressed. Five
//! networks cooperate: a shared attention module that assigns each pixel a
//! probability distribution over message bits, an encoder, a blind decoder,
//! a Wasserstein critic that scores realism, and an adversary that tries to
//! scrub the watermark during training.
//!
//! Start with the `examples/` directory for runnable walkthroughs of each
//! capability, or use the `videomark` binary for the end-to-end workflows
//! (corpus synthesis, training, embedding, extraction, evaluation).

pub mod autodiff;
pub mod error;

/// Tune glibc malloc for the training workload: activation tensors are tens
/// of megabytes and are allocated and freed every operation, so serving them
/// from the reusable heap instead of fresh mmap regions avoids a page-fault
/// and zeroing pass per tensor. Safe to call more than once.
pub fn tune_allocator() {
    use std::sync::Once;
    static ONCE: Once = Once::new();
    ONCE.call_once(|| unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
    });
}
pub mod eval;
pub mod media;
pub mod model;
pub mod nn;
pub mod noise;
pub mod objectives;
pub mod train;
pub mod video;

pub use error::{Error, Result};
