use iterprune::model::{ModelConfig, TransformerModel};
use iterprune::pruning::CalibrationSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn small_config(n_layers: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        n_layers,
        d_model: 16,
        n_heads: 2,
        vocab_size: 258,
        max_seq_len: 32,
        seed,
    }
}

pub fn small_model(n_layers: usize, seed: u64) -> TransformerModel {
    TransformerModel::init(small_config(n_layers, seed)).unwrap()
}

/// Randomly initialized weights are near the identity map; scaling the
/// residual projections up makes every block matter.
pub fn distinct_blocks(mut m: TransformerModel, seed: u64) -> TransformerModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for b in &mut m.blocks {
        for t in [&mut b.wo, &mut b.w2, &mut b.wq, &mut b.wk] {
            for x in t.data_mut() {
                *x = *x * 10.0 + rng.random_range(-0.05..0.05);
            }
        }
    }
    m
}

/// `model` with the residual branches of each listed block zeroed.
pub fn planted(mut m: TransformerModel, identity: &[usize]) -> TransformerModel {
    for &i in identity {
        m.blocks[i].make_identity();
    }
    m
}

pub fn random_sequences(n: usize, len: usize, vocab: u32, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..len).map(|_| rng.random_range(0..vocab)).collect())
        .collect()
}

pub fn calibration(n: usize, len: usize, seed: u64) -> CalibrationSet {
    CalibrationSet::new(random_sequences(n, len, 256, seed), "random", seed).unwrap()
}

pub fn text_tokens(repeat: usize) -> Vec<u32> {
    let text = "Now is the winter of our discontent made glorious summer by this sun of York. ";
    iterprune::model::tokenizer::encode(text.repeat(repeat).as_bytes())
}
