//! Frozen vision-language backbone abstraction.
//!
//! A backbone exposes four hierarchical visual blocks, a text encoder that
//! accepts raw embedding sequences (so learnable prefix embeddings can be
//! injected), and the frozen projection head into the joint space. The
//! toolkit never updates backbone weights; training only needs the
//! vector-Jacobian products of the text encoder and projection head.
//!
//! [`StubBackbone`] is a small seeded network with the same interface. It
//! lets the whole pipeline run on a CPU without pretrained weights.

use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::ImageTensor;
use crate::util::{gaussian_matrix, gaussian_vector, l2_norm, seeded_rng, WeightHasher};

/// Identifier of the bundled stub backbone.
pub const STUB_ID: &str = "stub-32";
/// Identifier of the ViT-L/14 CLIP preset.
pub const VITL14_ID: &str = "vitl14-336";
/// Environment variable naming the pretrained weight directory.
pub const WEIGHTS_DIR_ENV: &str = "FOCUSAD_BACKBONE_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub backbone_id: String,
    pub patch_size: usize,
    pub input_size: usize,
    pub grid_side: usize,
    /// Visual token width `d`.
    pub token_dim: usize,
    /// Joint image-text width `t`.
    pub joint_dim: usize,
    /// Word-embedding width `e`.
    pub text_embed_dim: usize,
    /// Encoder layer index closing each of the four blocks.
    pub block_boundaries: [usize; 4],
    pub context_length: usize,
    pub pixel_mean: [f64; 3],
    pub pixel_std: [f64; 3],
}

impl BackboneSpec {
    pub fn stub() -> Self {
        Self {
            backbone_id: STUB_ID.to_string(),
            patch_size: 4,
            input_size: 32,
            grid_side: 8,
            token_dim: 32,
            joint_dim: 32,
            text_embed_dim: 16,
            block_boundaries: [1, 2, 3, 4],
            context_length: 32,
            pixel_mean: [0.5, 0.5, 0.5],
            pixel_std: [0.25, 0.25, 0.25],
        }
    }

    /// CLIP ViT-L/14 at the 518-pixel working resolution.
    pub fn vitl14_336() -> Self {
        Self {
            backbone_id: VITL14_ID.to_string(),
            patch_size: 14,
            input_size: 518,
            grid_side: 37,
            token_dim: 1024,
            joint_dim: 768,
            text_embed_dim: 768,
            block_boundaries: [6, 12, 18, 24],
            context_length: 77,
            pixel_mean: [0.481_454_66, 0.457_827_5, 0.408_210_73],
            pixel_std: [0.268_629_54, 0.261_302_58, 0.275_777_11],
        }
    }

    pub fn preset(id: &str) -> Result<Self> {
        match id {
            STUB_ID => Ok(Self::stub()),
            VITL14_ID => Ok(Self::vitl14_336()),
            other => Err(Error::config(format!("unknown backbone id `{other}`"))),
        }
    }

    /// Patch tokens per block, `N = grid_side²`.
    pub fn num_patches(&self) -> usize {
        self.grid_side * self.grid_side
    }

    pub fn depth(&self) -> usize {
        self.block_boundaries[3]
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.patch_size,
            self.input_size,
            self.grid_side,
            self.token_dim,
            self.joint_dim,
            self.text_embed_dim,
            self.context_length,
        ];
        if dims.iter().any(|&v| v == 0) {
            return Err(Error::config("backbone dimensions must be strictly positive"));
        }
        if self.input_size % self.patch_size != 0 {
            return Err(Error::config(format!(
                "input size {} is not divisible by patch size {}",
                self.input_size, self.patch_size
            )));
        }
        if self.input_size / self.patch_size != self.grid_side {
            return Err(Error::config(format!(
                "grid side {} does not match {} / {}",
                self.grid_side, self.input_size, self.patch_size
            )));
        }
        let b = self.block_boundaries;
        if b[0] == 0 || b.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(format!("block boundaries {b:?} must be strictly increasing and positive")));
        }
        if self.pixel_std.iter().any(|&s| s <= 0.0) {
            return Err(Error::config("pixel std must be positive"));
        }
        Ok(())
    }
}

/// One encoder block's class token and patch tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockTokens {
    /// 1-based block index.
    pub block_id: usize,
    pub cls: Array1<f64>,
    /// `N × d`, row-major over the patch grid.
    pub patches: Array2<f64>,
}

impl BlockTokens {
    /// `[cls; patches]` as an `(N+1) × d` matrix.
    pub fn stacked(&self) -> Array2<f64> {
        let d = self.cls.len();
        let mut out = Array2::zeros((self.patches.nrows() + 1, d));
        out.row_mut(0).assign(&self.cls);
        out.slice_mut(s![1.., ..]).assign(&self.patches);
        out
    }

    pub fn check(&self, spec: &BackboneSpec) -> Result<()> {
        if self.patches.nrows() != spec.num_patches()
            || self.patches.ncols() != spec.token_dim
            || self.cls.len() != spec.token_dim
        {
            return Err(Error::config(format!(
                "block {} has shape {:?}, expected {}×{}",
                self.block_id,
                self.patches.dim(),
                spec.num_patches(),
                spec.token_dim
            )));
        }
        if !self.cls.iter().chain(self.patches.iter()).all(|v| v.is_finite()) {
            return Err(Error::numeric(format!("non-finite activation in block {}", self.block_id)));
        }
        Ok(())
    }
}

pub trait Backbone: Send + Sync {
    fn spec(&self) -> &BackboneSpec;

    /// Extracts the four hierarchical blocks of an image that has already
    /// been resized to `input_size`.
    fn encode_image_blocks(&self, image: &ImageTensor) -> Result<[BlockTokens; 4]>;

    /// Encodes an `L × e` embedding sequence (sentinels included) into a
    /// unit-norm joint-space vector.
    fn encode_text(&self, sequence: ArrayView2<f64>) -> Result<Array1<f64>>;

    /// Gradient of a scalar loss with respect to the input sequence, given
    /// its gradient with respect to [`Backbone::encode_text`]'s output.
    fn encode_text_backward(&self, sequence: ArrayView2<f64>, grad_output: ArrayView1<f64>) -> Result<Array2<f64>>;

    /// Applies the frozen projection head row-wise.
    fn project_to_joint(&self, tokens: ArrayView2<f64>) -> Result<Array2<f64>>;

    /// Vector-Jacobian product of the projection head.
    fn project_backward(&self, grad_output: ArrayView2<f64>) -> Result<Array2<f64>>;

    fn tokenize(&self, text: &str) -> Vec<u32>;

    /// Word embeddings for token ids, `len × e`.
    fn embed_tokens(&self, ids: &[u32]) -> Array2<f64>;

    fn start_embedding(&self) -> Array1<f64>;

    fn end_embedding(&self) -> Array1<f64>;

    /// SHA-256 over all frozen weights.
    fn weight_checksum(&self) -> String;
}

/// Resolves a backbone by identifier.
///
/// Only the stub is bundled. Pretrained encoders plug in by implementing
/// [`Backbone`]; asking for one here without such an implementation is a
/// configuration error.
pub fn load_backbone(id: &str, weights_dir: Option<&Path>) -> Result<Box<dyn Backbone>> {
    if let Some(seed) = id.strip_prefix(STUB_ID) {
        let seed = match seed.strip_prefix(':') {
            Some(v) => v
                .parse::<u64>()
                .map_err(|_| Error::config(format!("bad stub seed in `{id}`")))?,
            None if seed.is_empty() => 0,
            None => return Err(Error::config(format!("unknown backbone id `{id}`"))),
        };
        return Ok(Box::new(StubBackbone::new(seed)));
    }
    let spec = BackboneSpec::preset(id)?;
    let dir = weights_dir
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(WEIGHTS_DIR_ENV).map(Into::into));
    Err(Error::config(match dir {
        Some(d) => format!(
            "no loader for pretrained backbone `{}` is compiled into this build (weights dir {})",
            spec.backbone_id,
            d.display()
        ),
        None => format!(
            "pretrained backbone `{}` needs a weight directory (set {WEIGHTS_DIR_ENV}) and a loader implementing Backbone",
            spec.backbone_id
        ),
    }))
}

const STUB_VOCAB: &[&str] = &[
    "a", "an", "photo", "of", "the", "object", "damaged", "with", "without", "anomaly", "defect", "flawless",
    "perfect", "normal", "abnormal", "broken", "scratch", "hole", "crack", ".",
];
const STUB_HASHED_BUCKETS: usize = 12;
const STUB_TEXT_HIDDEN: usize = 32;

/// Seeded CPU backbone: linear patchifier, four residual tanh layers
/// (one per block) and a pooled two-layer text encoder. The projection
/// head is the identity (`d = t`).
#[derive(Debug, Clone)]
pub struct StubBackbone {
    spec: BackboneSpec,
    patch_embed: Array2<f64>,
    patch_bias: Array1<f64>,
    pos_embed: Array2<f64>,
    cls_embed: Array1<f64>,
    layers: Vec<Array2<f64>>,
    token_table: Array2<f64>,
    start: Array1<f64>,
    end: Array1<f64>,
    position_gain: Array1<f64>,
    text_in: Array2<f64>,
    text_out: Array2<f64>,
}

impl StubBackbone {
    pub fn new(seed: u64) -> Self {
        let mut spec = BackboneSpec::stub();
        if seed != 0 {
            spec.backbone_id = format!("{STUB_ID}:{seed}");
        }
        let mut rng = seeded_rng(seed ^ 0x5eed_bacb_0e00);
        let d = spec.token_dim;
        let patch_len = 3 * spec.patch_size * spec.patch_size;
        let patch_embed = gaussian_matrix(&mut rng, patch_len, d, 1.0 / (patch_len as f64).sqrt());
        let pos_embed = gaussian_matrix(&mut rng, spec.num_patches(), d, 0.02);
        let cls_embed = gaussian_vector(&mut rng, d, 0.5);
        let layers = (0..spec.depth())
            .map(|_| gaussian_matrix(&mut rng, d, d, 1.0 / (d as f64).sqrt()))
            .collect();
        let e = spec.text_embed_dim;
        let vocab = STUB_VOCAB.len() + STUB_HASHED_BUCKETS;
        let token_table = gaussian_matrix(&mut rng, vocab, e, 1.0);
        let start = gaussian_vector(&mut rng, e, 1.0);
        let end = gaussian_vector(&mut rng, e, 1.0);
        let position_gain = Array1::from_shape_fn(spec.context_length, |j| 1.0 / (1.0 + 0.15 * j as f64));
        let text_in = gaussian_matrix(&mut rng, e, STUB_TEXT_HIDDEN, 1.0 / (e as f64).sqrt());
        let text_out = gaussian_matrix(&mut rng, STUB_TEXT_HIDDEN, spec.joint_dim, 1.0 / (STUB_TEXT_HIDDEN as f64).sqrt());
        let patch_bias = gaussian_vector(&mut rng, d, 1.0);
        Self {
            spec,
            patch_embed,
            patch_bias,
            pos_embed,
            cls_embed,
            layers,
            token_table,
            start,
            end,
            position_gain,
            text_in,
            text_out,
        }
    }

    fn patchify(&self, image: &ImageTensor) -> Array2<f64> {
        let p = self.spec.patch_size;
        let g = self.spec.grid_side;
        let mut out = Array2::zeros((g * g, 3 * p * p));
        for gy in 0..g {
            for gx in 0..g {
                let mut row = out.row_mut(gy * g + gx);
                let mut k = 0;
                for c in 0..3 {
                    let (mean, std) = (self.spec.pixel_mean[c], self.spec.pixel_std[c]);
                    for py in 0..p {
                        for px in 0..p {
                            row[k] = (image.data[[c, gy * p + py, gx * p + px]] - mean) / std;
                            k += 1;
                        }
                    }
                }
            }
        }
        out
    }

    /// Pre-activation of the pooled text encoder: `(hidden, output)`.
    fn text_forward(&self, sequence: ArrayView2<f64>) -> (Array1<f64>, Array1<f64>) {
        let pooled = self.position_gain.slice(s![..sequence.nrows()]).dot(&sequence);
        let hidden = pooled.dot(&self.text_in).mapv(f64::tanh);
        let out = hidden.dot(&self.text_out);
        (hidden, out)
    }

    fn check_sequence(&self, sequence: ArrayView2<f64>) -> Result<()> {
        if sequence.ncols() != self.spec.text_embed_dim {
            return Err(Error::config(format!(
                "text embedding width {} != {}",
                sequence.ncols(),
                self.spec.text_embed_dim
            )));
        }
        if sequence.nrows() > self.spec.context_length {
            return Err(Error::config(format!(
                "text sequence length {} exceeds context length {}",
                sequence.nrows(),
                self.spec.context_length
            )));
        }
        Ok(())
    }
}

impl Backbone for StubBackbone {
    fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    fn encode_image_blocks(&self, image: &ImageTensor) -> Result<[BlockTokens; 4]> {
        let size = self.spec.input_size;
        if image.height() != size || image.width() != size {
            return Err(Error::config(format!(
                "image is {}×{}, backbone expects {size}×{size}",
                image.height(),
                image.width()
            )));
        }
        let mut patches = self.patchify(image).dot(&self.patch_embed) + &self.patch_bias + &self.pos_embed;
        let mut cls = &self.cls_embed + &patches.mean_axis(Axis(0)).expect("non-empty grid");
        let mut taps: Vec<BlockTokens> = Vec::with_capacity(4);
        for (layer_idx, w) in self.layers.iter().enumerate() {
            patches = &patches + &patches.dot(w).mapv(f64::tanh);
            cls = &cls + &cls.dot(w).mapv(f64::tanh);
            if let Some(block) = self.spec.block_boundaries.iter().position(|&b| b == layer_idx + 1) {
                let tokens = BlockTokens {
                    block_id: block + 1,
                    cls: cls.clone(),
                    patches: patches.clone(),
                };
                tokens.check(&self.spec)?;
                taps.push(tokens);
            }
        }
        taps.try_into()
            .map_err(|_| Error::config("stub backbone must tap exactly four blocks"))
    }

    fn encode_text(&self, sequence: ArrayView2<f64>) -> Result<Array1<f64>> {
        self.check_sequence(sequence)?;
        let (_, out) = self.text_forward(sequence);
        let norm = l2_norm(out.view());
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::numeric("text feature has zero or non-finite norm"));
        }
        Ok(out / norm)
    }

    fn encode_text_backward(&self, sequence: ArrayView2<f64>, grad_output: ArrayView1<f64>) -> Result<Array2<f64>> {
        self.check_sequence(sequence)?;
        let (hidden, out) = self.text_forward(sequence);
        let norm = l2_norm(out.view());
        let unit = &out / norm;
        let grad_out = (&grad_output - &(&unit * unit.dot(&grad_output))) / norm;
        let grad_hidden = self.text_out.dot(&grad_out);
        let grad_pre = grad_hidden * hidden.mapv(|h| 1.0 - h * h);
        let grad_pooled = self.text_in.dot(&grad_pre);
        let mut grad_seq = Array2::zeros(sequence.raw_dim());
        for (j, mut row) in grad_seq.rows_mut().into_iter().enumerate() {
            row.assign(&(&grad_pooled * self.position_gain[j]));
        }
        Ok(grad_seq)
    }

    fn project_to_joint(&self, tokens: ArrayView2<f64>) -> Result<Array2<f64>> {
        if tokens.ncols() != self.spec.token_dim {
            return Err(Error::config(format!(
                "token width {} != {}",
                tokens.ncols(),
                self.spec.token_dim
            )));
        }
        Ok(tokens.to_owned())
    }

    fn project_backward(&self, grad_output: ArrayView2<f64>) -> Result<Array2<f64>> {
        if grad_output.ncols() != self.spec.joint_dim {
            return Err(Error::config("projection gradient width mismatch"));
        }
        Ok(grad_output.to_owned())
    }

    fn tokenize(&self, text: &str) -> Vec<u32> {
        let lower = text.to_lowercase();
        let spaced = lower.replace('.', " . ");
        spaced
            .split_whitespace()
            .map(|word| match STUB_VOCAB.iter().position(|&v| v == word) {
                Some(i) => i as u32,
                None => {
                    // FNV-1a into the hashed buckets
                    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
                    for b in word.bytes() {
                        h ^= u64::from(b);
                        h = h.wrapping_mul(0x0100_0000_01b3);
                    }
                    (STUB_VOCAB.len() + (h % STUB_HASHED_BUCKETS as u64) as usize) as u32
                }
            })
            .collect()
    }

    fn embed_tokens(&self, ids: &[u32]) -> Array2<f64> {
        let mut out = Array2::zeros((ids.len(), self.spec.text_embed_dim));
        for (mut row, &id) in out.rows_mut().into_iter().zip(ids) {
            row.assign(&self.token_table.row(id as usize % self.token_table.nrows()));
        }
        out
    }

    fn start_embedding(&self) -> Array1<f64> {
        self.start.clone()
    }

    fn end_embedding(&self) -> Array1<f64> {
        self.end.clone()
    }

    fn weight_checksum(&self) -> String {
        let mut h = WeightHasher::default();
        h.tag(&self.spec.backbone_id)
            .tag("patch_embed")
            .floats(&self.patch_embed)
            .floats(&self.patch_bias)
            .tag("pos_embed")
            .floats(&self.pos_embed)
            .tag("cls_embed")
            .floats(&self.cls_embed);
        for w in &self.layers {
            h.tag("layer").floats(w);
        }
        h.tag("text")
            .floats(&self.token_table)
            .floats(&self.start)
            .floats(&self.end)
            .floats(&self.position_gain)
            .floats(&self.text_in)
            .floats(&self.text_out);
        h.finish()
    }
}
