//! Helpers shared by the integration test targets: golden fixtures and
//! finite-difference gradient checks.
//!
//! Run with `ECNET_BLESS=1` to regenerate the files under `tests/fixtures/`.

#![allow(dead_code)]

pub mod gradcheck;

use std::path::PathBuf;

use ecnet::checkpoint::{Block, Container, Fnv1a};
use ecnet::engine::{TrainConfig, TrainState};
use ecnet::keypoint::init_detector;
use ecnet::sgi::tokenize_annotations;
use ecnet::world::{render_image, sample_scene, GenConfig};

pub fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// Compares `actual` with the committed fixture, or rewrites it when blessing.
pub fn check_fixture(name: &str, actual: &[u8]) -> Result<(), String> {
    let path = fixture_path(name);
    if std::env::var_os("ECNET_BLESS").is_some() {
        std::fs::write(&path, actual).map_err(|e| e.to_string())?;
        return Ok(());
    }
    let want = std::fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    if want == actual {
        Ok(())
    } else {
        Err(format!("{name} differs from the committed fixture"))
    }
}

/// Digest of the seed-7 scene's rendering plus its scene description.
pub fn scene7_render() -> String {
    let scene = sample_scene(7, &GenConfig::default()).unwrap();
    let img = render_image(&scene);
    let mut h = Fnv1a::new();
    for v in img.data() {
        h.write(&v.to_le_bytes());
    }
    format!(
        "scene = {}\nfnv1a64 = {:016x}\n",
        serde_json::to_string(&scene).unwrap(),
        h.finish()
    )
}

/// Token table of the seed-7 scene, one row per position.
pub fn scene7_tokens() -> String {
    let scene = sample_scene(7, &GenConfig::default()).unwrap();
    let tok = tokenize_annotations(&scene);
    let mut out = String::from("pos,kp_id,x_bin,y_bin,mask\n");
    for i in 0..tok.kp_ids.len() {
        out += &format!(
            "{i},{},{},{},{}\n",
            tok.kp_ids[i], tok.coords[i][0], tok.coords[i][1], tok.mask[i] as u8
        );
    }
    out
}

/// A small container with fixed contents.
pub fn tiny_container() -> Container {
    let mut c = Container::default();
    c.push(Block::scalar("step", 3.0));
    c.push(Block::new("w", &[2, 3], vec![0.0, 0.5, -1.0, 1.5, 2.0, -2.5]));
    c.push(Block::new("empty", &[0], vec![]));
    c
}

/// Block names and shapes of a freshly initialized training checkpoint.
pub fn checkpoint_layout() -> String {
    let state = TrainState::new(TrainConfig::default(), init_detector(0)).unwrap();
    let mut out = String::new();
    for b in &state.to_container().blocks {
        out += &format!("{} {:?}\n", b.name, b.shape);
    }
    out
}
