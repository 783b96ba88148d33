//! Model hyperparameters and the flat `key = value` configuration format.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Shared hidden width.
    pub d: usize,
    /// Width of the learnable text embedding.
    pub d_l: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub conv_kernel: usize,
    pub attn_dropout: f64,
    pub embed_dropout: f64,
    pub out_dropout: f64,
    /// Weight of the feature reconstruction loss.
    pub alpha: f64,
    /// Weight of the attention distillation loss.
    pub beta: f64,
    /// Weight of the joint-representation distillation loss.
    pub gamma: f64,
    /// Counterfactual subtraction strength.
    pub tau: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub early_stop_patience: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub use_wsam: bool,
    pub use_mcm: bool,
    pub use_cf: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 32,
            d_l: 32,
            n_layers: 1,
            n_heads: 1,
            conv_kernel: 1,
            attn_dropout: 0.1,
            embed_dropout: 0.1,
            out_dropout: 0.1,
            alpha: 0.5,
            beta: 0.5,
            gamma: 0.5,
            tau: 1.0,
            batch_size: 128,
            epochs: 200,
            early_stop_patience: 10,
            learning_rate: 1e-3,
            seed: 0,
            use_wsam: true,
            use_mcm: true,
            use_cf: true,
        }
    }
}

impl ModelConfig {
    /// Small, dropout-free configuration used by tests and examples.
    pub fn tiny(d: usize) -> Self {
        Self {
            d,
            d_l: d,
            attn_dropout: 0.0,
            embed_dropout: 0.0,
            out_dropout: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.d_l == 0 {
            return bad("hidden widths must be positive".into());
        }
        if self.n_heads == 0 || self.d % self.n_heads != 0 {
            return bad(format!("d = {} is not divisible by n_heads = {}", self.d, self.n_heads));
        }
        if self.conv_kernel == 0 || self.conv_kernel % 2 == 0 {
            return bad(format!("conv_kernel must be odd, got {}", self.conv_kernel));
        }
        for (name, p) in [
            ("attn_dropout", self.attn_dropout),
            ("embed_dropout", self.embed_dropout),
            ("out_dropout", self.out_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} must be in [0, 1), got {p}"));
            }
        }
        for (name, w) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(0.0..=1.0).contains(&w) {
                return bad(format!("{name} must be in [0, 1], got {w}"));
            }
        }
        if !self.tau.is_finite() {
            return bad("tau must be finite".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("invalid learning_rate {}", self.learning_rate));
        }
        Ok(())
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
        }
        match key {
            "d" => self.d = p(key, value)?,
            "d_l" => self.d_l = p(key, value)?,
            "n_layers" => self.n_layers = p(key, value)?,
            "n_heads" => self.n_heads = p(key, value)?,
            "conv_kernel" => self.conv_kernel = p(key, value)?,
            "attn_dropout" => self.attn_dropout = p(key, value)?,
            "embed_dropout" => self.embed_dropout = p(key, value)?,
            "out_dropout" => self.out_dropout = p(key, value)?,
            "alpha" => self.alpha = p(key, value)?,
            "beta" => self.beta = p(key, value)?,
            "gamma" => self.gamma = p(key, value)?,
            "tau" => self.tau = p(key, value)?,
            "batch_size" => self.batch_size = p(key, value)?,
            "epochs" => self.epochs = p(key, value)?,
            "early_stop_patience" => self.early_stop_patience = p(key, value)?,
            "learning_rate" | "lr" => self.learning_rate = p(key, value)?,
            "seed" => self.seed = p(key, value)?,
            "use_wsam" => self.use_wsam = p(key, value)?,
            "use_mcm" => self.use_mcm = p(key, value)?,
            "use_cf" => self.use_cf = p(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }
}

/// Parses `key = value` lines. Blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

/// Reads a config file; keys the model does not know are returned for the
/// caller (experiment-level settings such as the data source).
pub fn load_config_file(path: &Path) -> Result<(ModelConfig, BTreeMap<String, String>)> {
    let text = std::fs::read_to_string(path)?;
    let mut cfg = ModelConfig::default();
    let mut rest = BTreeMap::new();
    for (k, v) in parse_kv(&text)? {
        match cfg.set(&k, &v) {
            Ok(()) => {}
            Err(Error::Config(msg)) if msg.starts_with("unknown key") => {
                rest.insert(k, v);
            }
            Err(e) => return Err(e),
        }
    }
    Ok((cfg, rest))
}
