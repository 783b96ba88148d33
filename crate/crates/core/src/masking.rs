//! Missing-modality scenarios: mask generation and application.
//!
//! Feature-level scenarios (RMFM, traditional RMFM, TMFM, STMFM) drop an exact
//! number of positions, `round_half_up(rate * T)`, so curves over missing
//! rates are free of sampling noise in the drop count. RMM draws one
//! Bernoulli flag per modality; SMM is a fixed modality pattern.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Sample, MASK_ID};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scenario {
    Rmfm,
    TraditionalRmfm,
    Rmm,
    Tmfm,
    Stmfm,
    Smm,
}

impl Scenario {
    pub const ALL: [Scenario; 6] = [
        Scenario::Rmfm,
        Scenario::TraditionalRmfm,
        Scenario::Rmm,
        Scenario::Tmfm,
        Scenario::Stmfm,
        Scenario::Smm,
    ];

    /// Whether the scenario needs equal sequence lengths across modalities.
    pub fn requires_alignment(self) -> bool {
        matches!(self, Scenario::Tmfm | Scenario::Stmfm)
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::Rmfm => "rmfm",
            Scenario::TraditionalRmfm => "trad-rmfm",
            Scenario::Rmm => "rmm",
            Scenario::Tmfm => "tmfm",
            Scenario::Stmfm => "stmfm",
            Scenario::Smm => "smm",
        })
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rmfm" => Ok(Scenario::Rmfm),
            "trad-rmfm" | "traditional-rmfm" | "traditional_rmfm" => Ok(Scenario::TraditionalRmfm),
            "rmm" => Ok(Scenario::Rmm),
            "tmfm" => Ok(Scenario::Tmfm),
            "stmfm" => Ok(Scenario::Stmfm),
            "smm" => Ok(Scenario::Smm),
            other => Err(Error::InvalidArgument(format!("unknown scenario `{other}`"))),
        }
    }
}

/// Subset of {language, audio, vision}.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Modalities {
    pub l: bool,
    pub a: bool,
    pub v: bool,
}

impl Modalities {
    pub const ALL: Modalities = Modalities {
        l: true,
        a: true,
        v: true,
    };

    pub fn is_empty(&self) -> bool {
        !(self.l || self.a || self.v)
    }
}

impl FromStr for Modalities {
    type Err = Error;

    /// Parses a comma list such as `l,a`.
    fn from_str(s: &str) -> Result<Self> {
        let mut m = Modalities {
            l: false,
            a: false,
            v: false,
        };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part.to_ascii_lowercase().as_str() {
                "l" | "language" | "text" => m.l = true,
                "a" | "audio" => m.a = true,
                "v" | "vision" | "visual" => m.v = true,
                other => {
                    return Err(Error::InvalidArgument(format!("unknown modality `{other}`")))
                }
            }
        }
        Ok(m)
    }
}

impl fmt::Display for Modalities {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = [(self.l, "l"), (self.a, "a"), (self.v, "v")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect();
        f.write_str(&parts.join(","))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MissingSpec {
    pub scenario: Scenario,
    pub rate: f64,
    pub smm_keep: Option<Modalities>,
    pub seed: u64,
}

impl MissingSpec {
    pub fn new(scenario: Scenario, rate: f64, seed: u64) -> Self {
        Self {
            scenario,
            rate,
            smm_keep: None,
            seed,
        }
    }

    pub fn smm(keep: Modalities) -> Self {
        Self {
            scenario: Scenario::Smm,
            rate: 0.0,
            smm_keep: Some(keep),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_rate(self.rate)?;
        match (self.scenario, &self.smm_keep) {
            (Scenario::Smm, None) => Err(Error::InvalidArgument("SMM needs a keep set".into())),
            (Scenario::Smm, Some(k)) if k.is_empty() => {
                Err(Error::InvalidArgument("SMM keep set is empty".into()))
            }
            (Scenario::Smm, Some(_)) => Ok(()),
            (_, Some(_)) => Err(Error::InvalidArgument(
                "a keep set is only meaningful for SMM".into(),
            )),
            (_, None) => Ok(()),
        }
    }
}

/// Per-modality validity masks; `true` keeps a position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSet {
    pub m_l: Vec<bool>,
    pub m_a: Vec<bool>,
    pub m_v: Vec<bool>,
}

impl MaskSet {
    pub fn ones((t_l, t_a, t_v): (usize, usize, usize)) -> Self {
        Self {
            m_l: vec![true; t_l],
            m_a: vec![true; t_a],
            m_v: vec![true; t_v],
        }
    }

    pub fn lengths(&self) -> (usize, usize, usize) {
        (self.m_l.len(), self.m_a.len(), self.m_v.len())
    }

    pub fn zeros(&self) -> usize {
        [&self.m_l, &self.m_a, &self.m_v]
            .iter()
            .map(|m| m.iter().filter(|&&k| !k).count())
            .sum()
    }

    pub fn is_identity(&self) -> bool {
        self.zeros() == 0
    }
}

/// Modality-level keep flags drawn by RMM.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModalityFlags(pub Modalities);

impl ModalityFlags {
    pub fn to_maskset(self, (t_l, t_a, t_v): (usize, usize, usize)) -> MaskSet {
        MaskSet {
            m_l: vec![self.0.l; t_l],
            m_a: vec![self.0.a; t_a],
            m_v: vec![self.0.v; t_v],
        }
    }
}

/// `round(rate * n)` with halves rounded up.
pub fn missing_count(rate: f64, n: usize) -> usize {
    let k = (rate * n as f64 + 0.5 + 1e-9).floor() as usize;
    k.min(n)
}

fn check_rate(rate: f64) -> Result<()> {
    if (0.0..=1.0).contains(&rate) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("missing rate {rate} outside [0, 1]")))
    }
}

fn exact_drop<R: Rng>(n: usize, k: usize, rng: &mut R) -> Vec<bool> {
    let mut keep = vec![true; n];
    for i in index::sample(rng, n, k) {
        keep[i] = false;
    }
    keep
}

fn aligned_length((t_l, t_a, t_v): (usize, usize, usize)) -> Result<usize> {
    if t_l == t_a && t_a == t_v {
        Ok(t_l)
    } else {
        Err(Error::LengthMismatch(format!(
            "temporal scenarios need aligned sequences, got ({t_l}, {t_a}, {t_v})"
        )))
    }
}

/// Drops exactly `round(rate * (T_l + T_a + T_v))` positions drawn uniformly
/// over the concatenated index space.
pub fn gen_rmfm(lengths: (usize, usize, usize), rate: f64, seed: u64) -> Result<MaskSet> {
    check_rate(rate)?;
    let (t_l, t_a, t_v) = lengths;
    let total = t_l + t_a + t_v;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all = exact_drop(total, missing_count(rate, total), &mut rng);
    Ok(MaskSet {
        m_l: all[..t_l].to_vec(),
        m_a: all[t_l..t_l + t_a].to_vec(),
        m_v: all[t_l + t_a..].to_vec(),
    })
}

/// Drops exactly `round(rate * T_k)` positions in each modality independently.
pub fn gen_traditional_rmfm(
    lengths: (usize, usize, usize),
    rate: f64,
    seed: u64,
) -> Result<MaskSet> {
    check_rate(rate)?;
    let (t_l, t_a, t_v) = lengths;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(MaskSet {
        m_l: exact_drop(t_l, missing_count(rate, t_l), &mut rng),
        m_a: exact_drop(t_a, missing_count(rate, t_a), &mut rng),
        m_v: exact_drop(t_v, missing_count(rate, t_v), &mut rng),
    })
}

/// Drops each whole modality independently with probability `rate`.
pub fn gen_rmm(rate: f64, seed: u64) -> Result<ModalityFlags> {
    check_rate(rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = || rng.gen::<f64>() >= rate;
    Ok(ModalityFlags(Modalities {
        l: keep(),
        a: keep(),
        v: keep(),
    }))
}

/// One mask over the aligned time axis, shared by all modalities.
pub fn gen_tmfm(lengths: (usize, usize, usize), rate: f64, seed: u64) -> Result<MaskSet> {
    check_rate(rate)?;
    let t = aligned_length(lengths)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = exact_drop(t, missing_count(rate, t), &mut rng);
    Ok(MaskSet {
        m_l: m.clone(),
        m_a: m.clone(),
        m_v: m,
    })
}

/// One contiguous dropped block of `round(rate * T)` steps at a uniform
/// start, shared by all modalities.
pub fn gen_stmfm(lengths: (usize, usize, usize), rate: f64, seed: u64) -> Result<MaskSet> {
    check_rate(rate)?;
    let t = aligned_length(lengths)?;
    let len = missing_count(rate, t);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = rng.gen_range(0..=t - len);
    let m: Vec<bool> = (0..t).map(|i| i < start || i >= start + len).collect();
    Ok(MaskSet {
        m_l: m.clone(),
        m_a: m.clone(),
        m_v: m,
    })
}

pub fn gen_smm(keep: Modalities, lengths: (usize, usize, usize)) -> Result<MaskSet> {
    if keep.is_empty() {
        return Err(Error::InvalidArgument("SMM keep set is empty".into()));
    }
    Ok(ModalityFlags(keep).to_maskset(lengths))
}

/// Masks for `spec` on a sample with the given lengths.
pub fn generate(spec: &MissingSpec, lengths: (usize, usize, usize)) -> Result<MaskSet> {
    spec.validate()?;
    match spec.scenario {
        Scenario::Rmfm => gen_rmfm(lengths, spec.rate, spec.seed),
        Scenario::TraditionalRmfm => gen_traditional_rmfm(lengths, spec.rate, spec.seed),
        Scenario::Rmm => Ok(gen_rmm(spec.rate, spec.seed)?.to_maskset(lengths)),
        Scenario::Tmfm => gen_tmfm(lengths, spec.rate, spec.seed),
        Scenario::Stmfm => gen_stmfm(lengths, spec.rate, spec.seed),
        Scenario::Smm => gen_smm(spec.smm_keep.expect("validated"), lengths),
    }
}

/// Zeroes masked audio/vision frames and replaces masked tokens by the mask
/// token. Every text position, BOS included, is maskable.
pub fn apply_masks(sample: &Sample, masks: &MaskSet) -> Result<Sample> {
    if masks.lengths() != sample.lengths() {
        return Err(Error::LengthMismatch(format!(
            "mask lengths {:?} do not match sample lengths {:?}",
            masks.lengths(),
            sample.lengths()
        )));
    }
    let mut out = sample.clone();
    for (tok, &keep) in out.tokens.iter_mut().zip(&masks.m_l) {
        if !keep {
            *tok = MASK_ID;
        }
    }
    for (mut row, &keep) in out.audio.outer_iter_mut().zip(&masks.m_a) {
        if !keep {
            row.fill(0.0);
        }
    }
    for (mut row, &keep) in out.vision.outer_iter_mut().zip(&masks.m_v) {
        if !keep {
            row.fill(0.0);
        }
    }
    Ok(out)
}

/// Mixes two seeds into one (splitmix64 finalizer).
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
