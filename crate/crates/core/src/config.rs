//! Run configuration: a flat UTF-8 `key=value` file (one pair per line,
//! `#` comments). Every key has a default; unknown keys are rejected; every
//! value is validated before any work starts. `dump()` emits the full
//! effective configuration in a form `parse()` accepts back.

use std::path::Path;

use crate::error::{Error, Result};

/// Decoding strategy for transcription and evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Beam(usize),
}

/// One encoder block: output channels, kernel extents, stride.
/// Padding is derived per axis as `(kernel - 1) / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSpec {
    pub channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
}

impl BlockSpec {
    pub fn padding(&self) -> (usize, usize) {
        ((self.kernel.0 - 1) / 2, (self.kernel.1 - 1) / 2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub input_width: usize,
    pub input_height: usize,
    pub feature_dim: usize,
    pub conv_channels: Vec<usize>,
    pub conv_kernels: Vec<(usize, usize)>,
    pub conv_strides: Vec<(usize, usize)>,
    pub gate_positions: Vec<usize>,
    pub dropout_p: f64,
    pub bn_epsilon: f64,
    pub bn_momentum: f64,
    pub attn_score_dim: usize,
    pub attn_output_dim: usize,
    pub attn_tied_projections: bool,
    pub gru_hidden: usize,
    pub gru_layers: usize,
    pub charset: String,
    pub max_label_len: usize,
    pub invert_colors: bool,
    pub split_names: Vec<String>,
    pub split_fractions: Vec<f64>,
    pub word_disjoint_test: bool,
    pub learning_rate: f64,
    pub rmsprop_decay: f64,
    pub rmsprop_epsilon: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub threads: usize,
    pub decode: String,
    pub beam_width: usize,
}

/// Key table: name, default, one-line description. Single source of truth
/// for `--help`, `dump`, and unknown-key rejection.
pub const CONFIG_KEYS: &[(&str, &str, &str)] = &[
    ("input_width", "1024", "input image width after resize-with-padding"),
    ("input_height", "128", "input image height after resize-with-padding"),
    ("feature_dim", "256", "features per time step after map-to-sequence (must equal C*H of the last block)"),
    ("conv_channels", "16,32,40,48,64", "encoder blocks: output channels per block"),
    ("conv_kernels", "3x3,3x3,2x4,3x3,2x4", "encoder blocks: kernel HxW per block"),
    ("conv_strides", "2x2,2x1,2x2,2x1,2x2", "encoder blocks: stride HxW per block"),
    ("gate_positions", "2,4", "insert a gated conv layer after these blocks (1-based; empty for none)"),
    ("dropout_p", "0.2", "dropout probability inside encoder blocks (0.5 preset also common)"),
    ("bn_epsilon", "1e-5", "batch-norm variance epsilon"),
    ("bn_momentum", "0.9", "batch-norm running-statistics momentum"),
    ("attn_score_dim", "128", "additive-attention scoring dimension"),
    ("attn_output_dim", "256", "attention vector dimension fed to the decoder"),
    ("attn_tied_projections", "false", "share one matrix for query and key projections"),
    ("gru_hidden", "128", "GRU hidden size per direction"),
    ("gru_layers", "2", "number of stacked bidirectional GRU layers"),
    ("charset", "default", "'default' (Cyrillic) or path to a UTF-8 charset file"),
    ("max_label_len", "96", "maximum transcript length accepted at preprocessing"),
    ("invert_colors", "false", "invert pixel values for black-background corpora"),
    ("split_names", "train,valid,test", "bundle names produced by preprocess"),
    ("split_fractions", "0.7,0.15,0.15", "split fractions (must sum to 1)"),
    ("word_disjoint_test", "false", "partition the last split into <name>1 (unseen transcripts) and <name>2"),
    ("learning_rate", "0.001", "RMSProp base learning rate"),
    ("rmsprop_decay", "0.9", "RMSProp squared-gradient decay rho"),
    ("rmsprop_epsilon", "1e-8", "RMSProp denominator epsilon"),
    ("clip_norm", "0", "global gradient-norm clip (0 disables)"),
    ("batch_size", "32", "mini-batch size"),
    ("patience", "20", "early stopping: non-improving epochs before stopping"),
    ("max_epochs", "400", "hard epoch cap"),
    ("seed", "42", "root seed for every random choice of the run"),
    ("threads", "0", "worker thread cap (0 = all cores)"),
    ("decode", "greedy", "decoding strategy: greedy | beam"),
    ("beam_width", "16", "beam width when decode=beam"),
];

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = RunConfig {
            input_width: 0,
            input_height: 0,
            feature_dim: 0,
            conv_channels: vec![],
            conv_kernels: vec![],
            conv_strides: vec![],
            gate_positions: vec![],
            dropout_p: 0.0,
            bn_epsilon: 0.0,
            bn_momentum: 0.0,
            attn_score_dim: 0,
            attn_output_dim: 0,
            attn_tied_projections: false,
            gru_hidden: 0,
            gru_layers: 0,
            charset: String::new(),
            max_label_len: 0,
            invert_colors: false,
            split_names: vec![],
            split_fractions: vec![],
            word_disjoint_test: false,
            learning_rate: 0.0,
            rmsprop_decay: 0.0,
            rmsprop_epsilon: 0.0,
            clip_norm: 0.0,
            batch_size: 0,
            patience: 0,
            max_epochs: 0,
            seed: 0,
            threads: 0,
            decode: String::new(),
            beam_width: 0,
        };
        for (key, default, _) in CONFIG_KEYS {
            cfg.set(key, default).expect("defaults are valid");
        }
        cfg
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got {raw:?}", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        RunConfig::parse(&text)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "input_width" => self.input_width = parse_num(key, value)?,
            "input_height" => self.input_height = parse_num(key, value)?,
            "feature_dim" => self.feature_dim = parse_num(key, value)?,
            "conv_channels" => self.conv_channels = parse_list(key, value, parse_num)?,
            "conv_kernels" => self.conv_kernels = parse_list(key, value, parse_pair)?,
            "conv_strides" => self.conv_strides = parse_list(key, value, parse_pair)?,
            "gate_positions" => self.gate_positions = parse_list(key, value, parse_num)?,
            "dropout_p" => self.dropout_p = parse_num(key, value)?,
            "bn_epsilon" => self.bn_epsilon = parse_num(key, value)?,
            "bn_momentum" => self.bn_momentum = parse_num(key, value)?,
            "attn_score_dim" => self.attn_score_dim = parse_num(key, value)?,
            "attn_output_dim" => self.attn_output_dim = parse_num(key, value)?,
            "attn_tied_projections" => self.attn_tied_projections = parse_bool(key, value)?,
            "gru_hidden" => self.gru_hidden = parse_num(key, value)?,
            "gru_layers" => self.gru_layers = parse_num(key, value)?,
            "charset" => self.charset = value.to_string(),
            "max_label_len" => self.max_label_len = parse_num(key, value)?,
            "invert_colors" => self.invert_colors = parse_bool(key, value)?,
            "split_names" => {
                self.split_names = value.split(',').filter(|s| !s.is_empty()).map(str::to_string).collect()
            }
            "split_fractions" => self.split_fractions = parse_list(key, value, parse_num)?,
            "word_disjoint_test" => self.word_disjoint_test = parse_bool(key, value)?,
            "learning_rate" => self.learning_rate = parse_num(key, value)?,
            "rmsprop_decay" => self.rmsprop_decay = parse_num(key, value)?,
            "rmsprop_epsilon" => self.rmsprop_epsilon = parse_num(key, value)?,
            "clip_norm" => self.clip_norm = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "patience" => self.patience = parse_num(key, value)?,
            "max_epochs" => self.max_epochs = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "threads" => self.threads = parse_num(key, value)?,
            "decode" => self.decode = value.to_string(),
            "beam_width" => self.beam_width = parse_num(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::Config(msg));
        if self.input_width == 0 || self.input_height == 0 {
            return err("input dimensions must be positive".into());
        }
        let n = self.conv_channels.len();
        if n == 0 {
            return err("at least one encoder block is required".into());
        }
        if self.conv_kernels.len() != n || self.conv_strides.len() != n {
            return err(format!(
                "conv schedule lists disagree: {} channels, {} kernels, {} strides",
                n,
                self.conv_kernels.len(),
                self.conv_strides.len()
            ));
        }
        if self.conv_kernels.iter().any(|&(a, b)| a == 0 || b == 0)
            || self.conv_strides.iter().any(|&(a, b)| a == 0 || b == 0)
            || self.conv_channels.iter().any(|&c| c == 0)
        {
            return err("conv schedule entries must be positive".into());
        }
        for &g in &self.gate_positions {
            if g == 0 || g > n {
                return err(format!("gate position {g} outside 1..={n}"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return err(format!("dropout_p must be in [0,1), got {}", self.dropout_p));
        }
        if self.bn_epsilon <= 0.0 {
            return err("bn_epsilon must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return err("bn_momentum must be in [0,1]".into());
        }
        for (name, v) in [
            ("feature_dim", self.feature_dim),
            ("attn_score_dim", self.attn_score_dim),
            ("attn_output_dim", self.attn_output_dim),
            ("gru_hidden", self.gru_hidden),
            ("gru_layers", self.gru_layers),
            ("max_label_len", self.max_label_len),
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("beam_width", self.beam_width),
        ] {
            if v == 0 {
                return err(format!("{name} must be positive"));
            }
        }
        if self.learning_rate <= 0.0 {
            return err("learning_rate must be positive".into());
        }
        if !(0.0 < self.rmsprop_decay && self.rmsprop_decay < 1.0) {
            return err("rmsprop_decay must lie in (0,1)".into());
        }
        if self.rmsprop_epsilon <= 0.0 {
            return err("rmsprop_epsilon must be positive".into());
        }
        if self.clip_norm < 0.0 {
            return err("clip_norm must be non-negative".into());
        }
        if self.split_names.is_empty() || self.split_names.len() != self.split_fractions.len() {
            return err("split_names and split_fractions must align and be non-empty".into());
        }
        let sum: f64 = self.split_fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return err(format!("split_fractions sum to {sum}, expected 1"));
        }
        match self.decode.as_str() {
            "greedy" | "beam" => {}
            other => return err(format!("decode must be 'greedy' or 'beam', got {other:?}")),
        }
        self.encoder_shapes()?;
        Ok(())
    }

    pub fn decode_mode(&self) -> DecodeMode {
        match self.decode.as_str() {
            "beam" => DecodeMode::Beam(self.beam_width),
            _ => DecodeMode::Greedy,
        }
    }

    pub fn blocks(&self) -> Vec<BlockSpec> {
        self.conv_channels
            .iter()
            .zip(&self.conv_kernels)
            .zip(&self.conv_strides)
            .map(|((&channels, &kernel), &stride)| BlockSpec {
                channels,
                kernel,
                stride,
            })
            .collect()
    }

    /// Shape chain `(C, H, W)` after each encoder block; validates that the
    /// final map matches `feature_dim` and leaves at least one time step.
    pub fn encoder_shapes(&self) -> Result<Vec<(usize, usize, usize)>> {
        let mut shapes = Vec::new();
        let (mut h, mut w) = (self.input_height, self.input_width);
        for (i, b) in self.blocks().iter().enumerate() {
            let pad = b.padding();
            h = crate::tensor::conv_out_extent(h, b.kernel.0, b.stride.0, pad.0)
                .map_err(|e| Error::Config(format!("block {}: {e}", i + 1)))?;
            w = crate::tensor::conv_out_extent(w, b.kernel.1, b.stride.1, pad.1)
                .map_err(|e| Error::Config(format!("block {}: {e}", i + 1)))?;
            shapes.push((b.channels, h, w));
        }
        let (c, h, w) = *shapes.last().unwrap();
        if c * h != self.feature_dim {
            return Err(Error::Config(format!(
                "encoder ends at C*H = {c}*{h} = {}, feature_dim is {}",
                c * h,
                self.feature_dim
            )));
        }
        if w == 0 {
            return Err(Error::Config("encoder collapses the time axis to zero".into()));
        }
        Ok(shapes)
    }

    /// Time steps produced by the encoder for the configured input size.
    pub fn time_steps(&self) -> Result<usize> {
        Ok(self.encoder_shapes()?.last().unwrap().2)
    }

    /// Full effective configuration, parseable by [`RunConfig::parse`].
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (key, _, doc) in CONFIG_KEYS {
            let value = self.get(key);
            out.push_str(&format!("# {doc}\n{key}={value}\n"));
        }
        out
    }

    pub fn get(&self, key: &str) -> String {
        match key {
            "input_width" => self.input_width.to_string(),
            "input_height" => self.input_height.to_string(),
            "feature_dim" => self.feature_dim.to_string(),
            "conv_channels" => join(&self.conv_channels),
            "conv_kernels" => join_pairs(&self.conv_kernels),
            "conv_strides" => join_pairs(&self.conv_strides),
            "gate_positions" => join(&self.gate_positions),
            "dropout_p" => format_f64(self.dropout_p),
            "bn_epsilon" => format_f64(self.bn_epsilon),
            "bn_momentum" => format_f64(self.bn_momentum),
            "attn_score_dim" => self.attn_score_dim.to_string(),
            "attn_output_dim" => self.attn_output_dim.to_string(),
            "attn_tied_projections" => self.attn_tied_projections.to_string(),
            "gru_hidden" => self.gru_hidden.to_string(),
            "gru_layers" => self.gru_layers.to_string(),
            "charset" => self.charset.clone(),
            "max_label_len" => self.max_label_len.to_string(),
            "invert_colors" => self.invert_colors.to_string(),
            "split_names" => self.split_names.join(","),
            "split_fractions" => join_f64(&self.split_fractions),
            "word_disjoint_test" => self.word_disjoint_test.to_string(),
            "learning_rate" => format_f64(self.learning_rate),
            "rmsprop_decay" => format_f64(self.rmsprop_decay),
            "rmsprop_epsilon" => format_f64(self.rmsprop_epsilon),
            "clip_norm" => format_f64(self.clip_norm),
            "batch_size" => self.batch_size.to_string(),
            "patience" => self.patience.to_string(),
            "max_epochs" => self.max_epochs.to_string(),
            "seed" => self.seed.to_string(),
            "threads" => self.threads.to_string(),
            "decode" => self.decode.clone(),
            "beam_width" => self.beam_width.to_string(),
            _ => String::new(),
        }
    }

    /// Resolve the charset source: the built-in default or a file of symbols.
    pub fn load_charset(&self) -> Result<crate::pipeline::Charset> {
        if self.charset == "default" {
            return Ok(crate::pipeline::Charset::default_cyrillic());
        }
        let text = std::fs::read_to_string(&self.charset)
            .map_err(|e| Error::Config(format!("cannot read charset file {:?}: {e}", self.charset)))?;
        crate::pipeline::Charset::from_text(text.trim_end_matches(['\n', '\r']))
    }
}

trait Parse: Sized {
    fn parse_from(key: &str, value: &str) -> Result<Self>;
}

macro_rules! impl_parse {
    ($($t:ty),*) => {$(
        impl Parse for $t {
            fn parse_from(key: &str, value: &str) -> Result<Self> {
                value.parse().map_err(|_| {
                    Error::Config(format!("key {key:?}: cannot parse {value:?}"))
                })
            }
        }
    )*};
}
impl_parse!(usize, u64, f64);

fn parse_num<T: Parse>(key: &str, value: &str) -> Result<T> {
    T::parse_from(key, value)
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("key {key:?}: expected true/false, got {value:?}"))),
    }
}

fn parse_pair(key: &str, value: &str) -> Result<(usize, usize)> {
    let (a, b) = value
        .split_once('x')
        .ok_or_else(|| Error::Config(format!("key {key:?}: expected HxW, got {value:?}")))?;
    Ok((parse_num(key, a)?, parse_num(key, b)?))
}

fn parse_list<T>(key: &str, value: &str, f: impl Fn(&str, &str) -> Result<T>) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| f(key, s))
        .collect()
}

fn join(xs: &[usize]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn join_pairs(xs: &[(usize, usize)]) -> String {
    xs.iter().map(|(a, b)| format!("{a}x{b}")).collect::<Vec<_>>().join(",")
}

fn join_f64(xs: &[f64]) -> String {
    xs.iter().map(|x| format_f64(*x)).collect::<Vec<_>>().join(",")
}

fn format_f64(v: f64) -> String {
    // shortest representation that round-trips
    let s = format!("{v}");
    debug_assert_eq!(s.parse::<f64>().unwrap(), v);
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_paper_anchored() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!((cfg.input_width, cfg.input_height), (1024, 128));
        assert_eq!(cfg.learning_rate, 0.001);
        assert_eq!(cfg.batch_size, 32);
        assert_eq!(cfg.patience, 20);
        assert_eq!(cfg.feature_dim, 256);
        // the default schedule produces 128 time steps of 256 features
        assert_eq!(cfg.time_steps().unwrap(), 128);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::parse("frobnicate=1\n").unwrap_err().to_string();
        assert!(err.contains("frobnicate"), "{err}");
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let cfg = RunConfig::parse("# a comment\n\nseed=7 # trailing\n").unwrap();
        assert_eq!(cfg.seed, 7);
    }

    #[test]
    fn dump_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.seed = 1234;
        cfg.conv_channels = vec![8, 16, 32];
        cfg.conv_kernels = vec![(3, 3), (3, 3), (2, 4)];
        cfg.conv_strides = vec![(2, 2), (2, 2), (2, 2)];
        cfg.gate_positions = vec![2];
        cfg.input_width = 256;
        cfg.input_height = 32;
        cfg.feature_dim = 128;
        cfg.attn_score_dim = 64;
        cfg.attn_output_dim = 128;
        cfg.gru_hidden = 64;
        cfg.gru_layers = 1;
        cfg.validate().unwrap();
        let text = cfg.dump();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn schedule_mismatch_is_caught() {
        let mut cfg = RunConfig::default();
        cfg.feature_dim = 100; // 64×4 = 256 ≠ 100
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));

        let mut cfg = RunConfig::default();
        cfg.conv_channels.pop();
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.gate_positions = vec![9];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn every_documented_key_parses() {
        for (key, default, _) in CONFIG_KEYS {
            let mut cfg = RunConfig::default();
            cfg.set(key, default).unwrap();
        }
        // and the dump mentions every key
        let dump = RunConfig::default().dump();
        for (key, _, _) in CONFIG_KEYS {
            assert!(dump.contains(&format!("{key}=")), "missing {key}");
        }
    }
}
