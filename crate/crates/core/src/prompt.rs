//! Learnable state prompts: one shared prefix of `M` word embeddings,
//! followed by the fixed suffix `without defect.` (normal) or
//! `with defect.` (abnormal).

use ndarray::{concatenate, s, Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::util::{gaussian_matrix, seeded_rng};

pub const NORMAL_SUFFIX: &str = "without defect.";
pub const ABNORMAL_SUFFIX: &str = "with defect.";
/// Words the learnable prefix is warm-started from.
pub const DEFAULT_INIT_TEXT: &str = "a photo of a damaged object with anomaly";
/// Hand-written prefix used when prompts are not learned.
pub const FIXED_PREFIX_TEXT: &str = "a photo of an object";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBank {
    /// `M × e` shared prefix embeddings.
    pub prefix: Array2<f64>,
    pub suffix_normal_text: String,
    pub suffix_abnormal_text: String,
    pub suffix_normal: Vec<u32>,
    pub suffix_abnormal: Vec<u32>,
}

impl PromptBank {
    /// Learnable bank of length `m`, initialised from the embedded words of
    /// `init_text` (cycled or truncated to `m`) plus seeded noise.
    pub fn init(backbone: &dyn Backbone, m: usize, init_text: &str, noise_std: f64, seed: u64) -> Result<Self> {
        if m == 0 {
            return Err(Error::config("prompt prefix length must be at least 1"));
        }
        let ids = backbone.tokenize(init_text);
        if ids.is_empty() {
            return Err(Error::config("prompt init text has no tokens"));
        }
        let cycled: Vec<u32> = ids.iter().copied().cycle().take(m).collect();
        let e = backbone.spec().text_embed_dim;
        let noise = gaussian_matrix(&mut seeded_rng(seed), m, e, noise_std);
        Self::with_prefix(backbone, backbone.embed_tokens(&cycled) + noise)
    }

    /// Non-learnable bank whose prefix is the embedding of `text`.
    pub fn fixed(backbone: &dyn Backbone, text: &str) -> Result<Self> {
        let ids = backbone.tokenize(text);
        if ids.is_empty() {
            return Err(Error::config("fixed prompt text has no tokens"));
        }
        Self::with_prefix(backbone, backbone.embed_tokens(&ids))
    }

    pub fn with_prefix(backbone: &dyn Backbone, prefix: Array2<f64>) -> Result<Self> {
        if prefix.nrows() == 0 {
            return Err(Error::config("prompt prefix length must be at least 1"));
        }
        if prefix.ncols() != backbone.spec().text_embed_dim {
            return Err(Error::config("prompt prefix width does not match the text encoder"));
        }
        Ok(Self {
            prefix,
            suffix_normal_text: NORMAL_SUFFIX.to_string(),
            suffix_abnormal_text: ABNORMAL_SUFFIX.to_string(),
            suffix_normal: backbone.tokenize(NORMAL_SUFFIX),
            suffix_abnormal: backbone.tokenize(ABNORMAL_SUFFIX),
        })
    }

    pub fn len(&self) -> usize {
        self.prefix.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.prefix.nrows() == 0
    }
}

/// The two composed embedding sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSequences {
    pub normal: Array2<f64>,
    pub abnormal: Array2<f64>,
}

/// `[start] + prefix + suffix + [end]` for both states.
pub fn compose_state_prompts(bank: &PromptBank, backbone: &dyn Backbone) -> Result<StateSequences> {
    if bank.is_empty() {
        return Err(Error::config("prompt prefix length must be at least 1"));
    }
    let limit = backbone.spec().context_length;
    let compose = |suffix: &[u32]| -> Result<Array2<f64>> {
        let len = bank.len() + suffix.len() + 2;
        if len > limit {
            return Err(Error::config(format!("composed prompt length {len} exceeds context length {limit}")));
        }
        let start = backbone.start_embedding().insert_axis(Axis(0));
        let end = backbone.end_embedding().insert_axis(Axis(0));
        let tail = backbone.embed_tokens(suffix);
        Ok(concatenate![Axis(0), start, bank.prefix, tail, end])
    };
    Ok(StateSequences {
        normal: compose(&bank.suffix_normal)?,
        abnormal: compose(&bank.suffix_abnormal)?,
    })
}

/// Unit-norm normal/abnormal text anchors.
#[derive(Debug, Clone, PartialEq)]
pub struct StateEmbeddings {
    pub normal: Array1<f64>,
    pub abnormal: Array1<f64>,
}

pub fn encode_states(bank: &PromptBank, backbone: &dyn Backbone) -> Result<StateEmbeddings> {
    let seqs = compose_state_prompts(bank, backbone)?;
    Ok(StateEmbeddings {
        normal: backbone.encode_text(seqs.normal.view())?,
        abnormal: backbone.encode_text(seqs.abnormal.view())?,
    })
}

/// Gradient with respect to the shared prefix, given gradients on both
/// encoded anchors. Sentinel and suffix slots receive no update.
pub fn prefix_gradient(
    bank: &PromptBank,
    backbone: &dyn Backbone,
    grad_normal: &Array1<f64>,
    grad_abnormal: &Array1<f64>,
) -> Result<Array2<f64>> {
    let seqs = compose_state_prompts(bank, backbone)?;
    let gn = backbone.encode_text_backward(seqs.normal.view(), grad_normal.view())?;
    let ga = backbone.encode_text_backward(seqs.abnormal.view(), grad_abnormal.view())?;
    let m = bank.len();
    Ok(&gn.slice(s![1..=m, ..]) + &ga.slice(s![1..=m, ..]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::StubBackbone;
    use crate::util::l2_norm;

    #[test]
    fn prefix_slots_are_shared() {
        let bb = StubBackbone::new(0);
        let bank = PromptBank::init(&bb, 12, DEFAULT_INIT_TEXT, 0.02, 1).unwrap();
        let seqs = compose_state_prompts(&bank, &bb).unwrap();
        assert_eq!(seqs.normal.slice(s![1..13, ..]), bank.prefix);
        assert_eq!(seqs.normal.slice(s![1..13, ..]), seqs.abnormal.slice(s![1..13, ..]));
        // "without defect ." vs "with defect ."
        assert_eq!(seqs.normal.nrows(), 12 + 3 + 2);
        assert_eq!(seqs.abnormal.nrows(), 12 + 3 + 2);
        assert_ne!(seqs.normal.row(13), seqs.abnormal.row(13));
        assert_eq!(seqs.normal.row(14), seqs.abnormal.row(14));
    }

    #[test]
    fn empty_prefix_is_rejected() {
        let bb = StubBackbone::new(0);
        assert!(matches!(PromptBank::init(&bb, 0, DEFAULT_INIT_TEXT, 0.0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn context_overflow_is_rejected() {
        let bb = StubBackbone::new(0);
        let bank = PromptBank::init(&bb, 40, DEFAULT_INIT_TEXT, 0.0, 0).unwrap();
        assert!(matches!(compose_state_prompts(&bank, &bb), Err(Error::Config(_))));
    }

    #[test]
    fn anchors_are_unit_distinct_and_reproducible() {
        let bb = StubBackbone::new(0);
        let bank = PromptBank::init(&bb, 12, DEFAULT_INIT_TEXT, 0.02, 1).unwrap();
        let a = encode_states(&bank, &bb).unwrap();
        let b = encode_states(&bank, &bb).unwrap();
        assert_eq!(a, b);
        assert!((l2_norm(a.normal.view()) - 1.0).abs() < 1e-6);
        assert!((l2_norm(a.abnormal.view()) - 1.0).abs() < 1e-6);
        assert!((&a.normal - &a.abnormal).mapv(f64::abs).sum() > 1e-3);
    }

    #[test]
    fn fixed_bank_uses_text_embeddings() {
        let bb = StubBackbone::new(0);
        let bank = PromptBank::fixed(&bb, FIXED_PREFIX_TEXT).unwrap();
        assert_eq!(bank.len(), 5);
        assert_eq!(bank.prefix, bb.embed_tokens(&bb.tokenize(FIXED_PREFIX_TEXT)));
    }

    #[test]
    fn prefix_gradient_matches_finite_differences() {
        let bb = StubBackbone::new(0);
        let bank = PromptBank::init(&bb, 4, DEFAULT_INIT_TEXT, 0.1, 2).unwrap();
        let mut rng = seeded_rng(5);
        let gn = crate::util::gaussian_vector(&mut rng, 32, 1.0);
        let ga = crate::util::gaussian_vector(&mut rng, 32, 1.0);
        let f = |b: &PromptBank| {
            let s = encode_states(b, &bb).unwrap();
            s.normal.dot(&gn) + s.abnormal.dot(&ga)
        };
        let grad = prefix_gradient(&bank, &bb, &gn, &ga).unwrap();
        let h = 1e-5;
        for idx in [(0, 0), (1, 5), (3, 15)] {
            let mut p = bank.clone();
            p.prefix[idx] += h;
            let mut m = bank.clone();
            m.prefix[idx] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert!((fd - grad[idx]).abs() < 1e-7 * (1.0 + fd.abs()));
        }
    }
}
