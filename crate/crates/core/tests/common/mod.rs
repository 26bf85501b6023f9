//! Pretrained base policy shared by the slow integration tests. The first
//! test binary that needs it trains it and caches the checkpoint under the
//! cargo target directory; later binaries load it.

#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Instant;

use palette_core::checkpoint::Checkpoint;
use palette_core::seeding::stream;
use palette_core::tasks::generate_mixed;
use palette_core::toy_lm::{pretrain, ModelConfig, PolicyModel, PretrainConfig};

pub const PRETRAIN_PER_DOMAIN: usize = 2000;

fn cache_path() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("palette-base-1500.ckpt")
}

pub fn base_model() -> &'static PolicyModel {
    static BASE: OnceLock<PolicyModel> = OnceLock::new();
    BASE.get_or_init(|| {
        let path = cache_path();
        if let Ok(ck) = Checkpoint::load(&path) {
            if let Some(s) = ck.section("policy") {
                if let Ok(m) = PolicyModel::from_section(s) {
                    eprintln!("base policy loaded from {}", path.display());
                    return m;
                }
            }
        }
        let t = Instant::now();
        let corpus = generate_mixed(PRETRAIN_PER_DOMAIN, 1).unwrap();
        let mut m = PolicyModel::new(ModelConfig::default(), &mut stream(1, &[1])).unwrap();
        pretrain(&mut m, &corpus, &PretrainConfig::default(), 3).unwrap();
        Checkpoint { sections: vec![m.to_section("policy")] }.save(&path).unwrap();
        eprintln!("base policy pretrained in {:.0}s", t.elapsed().as_secs_f64());
        m
    })
}
