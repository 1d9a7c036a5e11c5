//! Regenerates the committed fixtures under `fixtures/`:
//! the scaled corpus inputs and two small golden checkpoints with their
//! tensor listings and reference logits.
//!
//! cargo run -p protestlens-core --example write_fixtures

use std::fs;
use std::path::{Path, PathBuf};

use protestlens_core::synth;
use protestlens_core::text::{TextClassifier, TextModelConfig, TokenSequence, Vocabulary};
use protestlens_core::trainer::Classifier;
use protestlens_core::vision::image::save_image;
use protestlens_core::vision::{VisionClassifier, VisionModelConfig};
use serde_json::json;

const CORPUS_SEED: u64 = 2024;

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn main() -> protestlens_core::Result<()> {
    let root = root();
    synth::corpus_fixture(CORPUS_SEED).write(&root.join("corpus"))?;

    let golden = root.join("golden");
    fs::create_dir_all(&golden).expect("create fixtures/golden");

    let texts = ["students rally at city hall", "the team won the game", "marchers picket the plant gates today"];
    let vocab = Vocabulary::build(texts.iter().copied(), 40)?;
    let config = TextModelConfig {
        max_len: 32,
        vocab_size: vocab.len(),
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        window: 4,
        global_positions: vec![0],
        dropout: 0.0,
    };
    let text = TextClassifier::new(config.clone(), 11)?;
    let mut ck = text.checkpoint();
    ck.header.vocabulary = Some(vocab.tokens().to_vec());
    ck.save(&golden.join("text-tiny.plck"))?;
    fs::write(golden.join("text-tiny.listing"), ck.listing()).expect("write listing");
    let logits: Vec<_> = texts
        .iter()
        .map(|t| Ok(json!({ "text": t, "logits": text.logits(&TokenSequence::encode(t, &vocab, &config))?.data() })))
        .collect::<protestlens_core::Result<_>>()?;
    fs::write(golden.join("text-tiny.logits.json"), serde_json::to_string_pretty(&logits)? + "\n").expect("write logits");

    let vconfig = VisionModelConfig {
        image_size: 16,
        window: 2,
        embed_dim: 8,
        depths: vec![1, 1],
        heads: vec![2, 2],
        cpb_hidden: 8,
        ..VisionModelConfig::default()
    };
    let vision = VisionClassifier::new(vconfig, 12)?;
    let vck = vision.checkpoint();
    vck.save(&golden.join("vision-tiny.plck"))?;
    fs::write(golden.join("vision-tiny.listing"), vck.listing()).expect("write listing");
    let mut vlogits = Vec::new();
    for ex in synth::image_dataset(2, 16, 0.5, 3) {
        let name = format!("{}.plim", ex.id);
        save_image(&ex.pixels, &golden.join(&name))?;
        vlogits.push(json!({ "image": name, "logits": vision.logits(&ex.pixels)?.data() }));
    }
    fs::write(golden.join("vision-tiny.logits.json"), serde_json::to_string_pretty(&vlogits)? + "\n").expect("write logits");
    println!("fixtures written to {}", root.display());
    Ok(())
}
