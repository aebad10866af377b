//! Parameter reports and single-threaded forward-pass timing.

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::{count_params, encode, CaptureRequest, EncodeInput, ModelConfig, TransformerModel};

pub const DEFAULT_VOCAB: usize = 30522;

/// `85054464` → `"85,054,464"`.
pub fn with_commas(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

/// `85054464` → `"85.1M"`.
pub fn millions(n: usize) -> String {
    format!("{:.1}M", n as f64 / 1e6)
}

/// Architecture shorthand used by the report commands. Head count defaults
/// to `hidden / 64` (at least one).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub layers: usize,
    pub hidden: usize,
    #[serde(default)]
    pub heads: Option<usize>,
}

impl Arch {
    pub fn new(layers: usize, hidden: usize) -> Self {
        Arch {
            layers,
            hidden,
            heads: None,
        }
    }

    pub fn config(&self, vocab: usize, max_seq_len: usize) -> ModelConfig {
        let heads = self.heads.unwrap_or((self.hidden / 64).max(1));
        ModelConfig::new(self.layers, self.hidden, heads, vocab, max_seq_len)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamsReport {
    pub layers: usize,
    pub hidden: usize,
    pub vocab: usize,
    pub emd: usize,
    pub trm: usize,
}

impl ParamsReport {
    pub fn new(layers: usize, hidden: usize, vocab: usize) -> Result<Self> {
        let config = Arch::new(layers, hidden).config(vocab, 512);
        config.validate()?;
        let (emd, trm) = count_params(&config);
        Ok(ParamsReport {
            layers,
            hidden,
            vocab,
            emd,
            trm,
        })
    }
}

impl fmt::Display for ParamsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "model {}x{} (vocab {})", self.layers, self.hidden, self.vocab)?;
        writeln!(f, "Emd {:>14} ({})", with_commas(self.emd), millions(self.emd))?;
        write!(f, "Trm {:>14} ({})", with_commas(self.trm), millions(self.trm))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub layers: usize,
    pub hidden: usize,
    pub emd: usize,
    pub trm: usize,
    /// Mean wall time per batch in seconds.
    pub mean_secs: f64,
    /// Reference (first row) time divided by this row's time.
    pub speedup: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub seq_len: usize,
    pub batch_size: usize,
    pub batches: usize,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    /// Speedup of row `i` relative to row `j`.
    pub fn ratio(&self, i: usize, j: usize) -> f64 {
        self.rows[j].mean_secs / self.rows[i].mean_secs
    }
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "seq {} · batch {} · {} batches, single thread, forward only",
            self.seq_len, self.batch_size, self.batches
        )?;
        writeln!(f, "{:<10} {:>8} {:>8} {:>14} {:>8}", "model", "Emd", "Trm", "ms/batch", "speedup")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<10} {:>8} {:>8} {:>14.2} {:>7.2}x",
                format!("{}x{}", r.layers, r.hidden),
                millions(r.emd),
                millions(r.trm),
                r.mean_secs * 1e3,
                r.speedup
            )?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct BenchOptions {
    pub seq_len: usize,
    pub batch_size: usize,
    pub batches: usize,
    /// Untimed batches run first to warm caches.
    pub warmup: usize,
    pub vocab: usize,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            seq_len: 128,
            batch_size: 1,
            batches: 100,
            warmup: 1,
            vocab: DEFAULT_VOCAB,
            seed: 0,
        }
    }
}

/// Times the encoder forward pass for each architecture in `archs`; speedups
/// are relative to the first.
pub fn run_bench(archs: &[Arch], opts: &BenchOptions) -> Result<BenchReport> {
    if archs.is_empty() || opts.batches == 0 || opts.batch_size == 0 || opts.seq_len == 0 {
        return Err(Error::Config("bench needs architectures, batches and a sequence length".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let batches: Vec<Vec<Vec<usize>>> = (0..opts.batches + opts.warmup)
        .map(|_| {
            (0..opts.batch_size)
                .map(|_| (0..opts.seq_len).map(|_| rng.gen_range(0..opts.vocab)).collect())
                .collect()
        })
        .collect();
    let segments = vec![0usize; opts.seq_len];
    let mask = vec![1u8; opts.seq_len];

    let mut rows = Vec::with_capacity(archs.len());
    for arch in archs {
        let config = arch.config(opts.vocab, opts.seq_len.max(512)).with_dropout(0.0);
        let model = TransformerModel::<f32>::init(config.clone(), opts.seed)?;
        let mut elapsed = 0.0;
        for (b, batch) in batches.iter().enumerate() {
            let start = Instant::now();
            for tokens in batch {
                let mut tape = Tape::new();
                let bound = model.bind_frozen(&mut tape);
                let input = EncodeInput {
                    token_ids: tokens,
                    segment_ids: &segments,
                    attn_mask: &mask,
                };
                let enc = encode(&mut tape, &bound, &input, &CaptureRequest::none(), None)?;
                std::hint::black_box(tape.value(enc.hidden));
            }
            if b >= opts.warmup {
                elapsed += start.elapsed().as_secs_f64();
            }
        }
        let (emd, trm) = count_params(&config);
        rows.push(BenchRow {
            layers: arch.layers,
            hidden: arch.hidden,
            emd,
            trm,
            mean_secs: elapsed / opts.batches as f64,
            speedup: 0.0,
        });
    }
    let reference = rows[0].mean_secs;
    for r in &mut rows {
        r.speedup = reference / r.mean_secs;
    }
    Ok(BenchReport {
        seq_len: opts.seq_len,
        batch_size: opts.batch_size,
        batches: opts.batches,
        rows,
    })
}
