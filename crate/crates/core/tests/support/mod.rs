#![allow(dead_code)]

pub mod kkt_oracle;
pub mod prompt_check;
pub mod replay_oracle;
pub mod scenarios;

use std::io::Cursor;
use std::sync::Arc;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use workbench_core::{
    AgentContext, AgentId, AuditLog, BuiltinExtractor, ManualClock, MockScript, Session,
    SessionConfig, SessionDeps,
};

pub fn png_from(img: &RgbImage) -> Vec<u8> {
    let mut out = Vec::new();
    img.write_to(&mut Cursor::new(&mut out), image::ImageFormat::Png)
        .unwrap();
    out
}

pub fn solid_png(w: u32, h: u32, rgb: [u8; 3]) -> Vec<u8> {
    png_from(&RgbImage::from_pixel(w, h, Rgb(rgb)))
}

/// A small image around `base` with per-pixel noise, distinct per seed.
pub fn noisy_png(base: [u8; 3], seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img = RgbImage::from_fn(16, 16, |_, _| {
        Rgb(base.map(|c| c.saturating_add(rng.gen_range(0..24)).saturating_sub(12)))
    });
    png_from(&img)
}

pub struct Harness {
    pub session: Arc<Session>,
    pub clock: Arc<ManualClock>,
    pub audit: Arc<AuditLog>,
}

pub fn deps(script: MockScript, clock: Arc<ManualClock>, audit: Arc<AuditLog>) -> SessionDeps {
    SessionDeps {
        clock,
        extractor: Arc::new(BuiltinExtractor::new()),
        passive: AgentContext::mock(AgentId::Passive, script.clone(), audit.clone()),
        active: AgentContext::mock(AgentId::Active, script, audit),
    }
}

pub fn harness(script: MockScript) -> Harness {
    harness_with(script, SessionConfig::default())
}

pub fn harness_with(script: MockScript, config: SessionConfig) -> Harness {
    let clock = Arc::new(ManualClock::new(0));
    let audit = AuditLog::in_memory();
    let session = Session::new("test-session", config, deps(script, clock.clone(), audit.clone()));
    Harness {
        session: Arc::new(session),
        clock,
        audit,
    }
}
