//! The detector: trainable adapter and prompt state plus the forward and
//! backward passes that connect backbone features to anomaly scores.

use ndarray::{s, Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::adapter::{adapt_backward, adapt_with_cache, init_adapter, AdaptCache, AdapterParams};
use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::imageio::ImageTensor;
use crate::par;
use crate::prompt::{encode_states, PromptBank, StateEmbeddings, DEFAULT_INIT_TEXT, FIXED_PREFIX_TEXT};
use crate::scoring::{
    anomaly_probabilities, normalize_rows, render_score_map, AnomalyResult, ScoreConfig, ScoreTensors, StreamScores,
};
use crate::spatial::{build_multiscale_set, AggregatedFeatureSet, StreamKey};

/// Component switches; all on is the full model, all off the fixed-prompt,
/// last-block, unadapted baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Switches {
    pub learnable_prompts: bool,
    pub adapter: bool,
    pub multilevel: bool,
    pub aggregation: bool,
}

impl Default for Switches {
    fn default() -> Self {
        Self::all_on()
    }
}

impl Switches {
    pub const fn all_on() -> Self {
        Self {
            learnable_prompts: true,
            adapter: true,
            multilevel: true,
            aggregation: true,
        }
    }

    pub const fn all_off() -> Self {
        Self {
            learnable_prompts: false,
            adapter: false,
            multilevel: false,
            aggregation: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    pub scales: Vec<usize>,
    pub sigma: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            scales: vec![1, 3, 5],
            sigma: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    /// Inner width `d̃`; 0 selects `d / 2`.
    pub inner_dim: usize,
    pub heads: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self { inner_dim: 0, heads: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    pub length: usize,
    pub init_text: String,
    pub init_noise: f64,
    /// Prefix used instead of learned embeddings when prompts are fixed.
    pub fixed_text: String,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            length: 12,
            init_text: DEFAULT_INIT_TEXT.to_string(),
            init_noise: 0.02,
            fixed_text: FIXED_PREFIX_TEXT.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub window: WindowConfig,
    pub adapter: AdapterConfig,
    pub prompt: PromptConfig,
    pub switches: Switches,
    pub score: ScoreConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window.scales.is_empty() {
            return Err(Error::config("at least one window size is required"));
        }
        for &r in &self.window.scales {
            crate::spatial::WindowSpec::new(r, self.window.sigma)?;
        }
        if self.adapter.heads == 0 {
            return Err(Error::config("adapter needs at least one head"));
        }
        if self.prompt.length == 0 {
            return Err(Error::config("prompt prefix length must be at least 1"));
        }
        self.score.validate()
    }

    pub fn block_ids(&self) -> Vec<usize> {
        if self.switches.multilevel {
            vec![1, 2, 3, 4]
        } else {
            vec![4]
        }
    }

    pub fn scales(&self) -> Vec<usize> {
        if self.switches.aggregation {
            self.window.scales.clone()
        } else {
            vec![1]
        }
    }
}

/// Trainable state plus the configuration that shapes the forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detector {
    pub config: ModelConfig,
    pub adapter: Option<AdapterParams>,
    pub prompts: PromptBank,
}

/// One stream's forward intermediates.
#[derive(Debug, Clone)]
pub struct StreamForward {
    pub key: StreamKey,
    cache: Option<AdaptCache>,
    /// Joint-space tokens `z^{ℓr}`, `(N+1) × t`.
    pub z: Array2<f64>,
    unit: Array2<f64>,
    norms: Array1<f64>,
    pub scores: StreamScores,
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub streams: Vec<StreamForward>,
    /// `p_i` for `i ∈ {CLS, 1..N}`.
    pub probs: Array1<f64>,
}

impl ForwardPass {
    pub fn image_score(&self) -> f64 {
        self.probs[0]
    }

    pub fn patch_grid(&self) -> Array2<f64> {
        let n = self.probs.len() - 1;
        let side = (n as f64).sqrt().round() as usize;
        self.probs
            .slice(s![1..])
            .to_owned()
            .into_shape_with_order((side, side))
            .expect("square patch grid")
    }
}

/// Gradients of a scalar loss with respect to the trainable state.
#[derive(Debug, Clone)]
pub struct DetectorGrads {
    pub adapter: Option<AdapterParams>,
    pub anchor_normal: Array1<f64>,
    pub anchor_abnormal: Array1<f64>,
}

impl DetectorGrads {
    pub fn accumulate(&mut self, other: &DetectorGrads) {
        if let (Some(a), Some(b)) = (self.adapter.as_mut(), other.adapter.as_ref()) {
            a.accumulate(b);
        }
        self.anchor_normal += &other.anchor_normal;
        self.anchor_abnormal += &other.anchor_abnormal;
    }
}

impl Detector {
    pub fn init(backbone: &dyn Backbone, config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let spec = backbone.spec();
        let adapter = if config.switches.adapter {
            let inner = match config.adapter.inner_dim {
                0 => (spec.token_dim / 2).max(1),
                v => v,
            };
            Some(init_adapter(spec.token_dim, inner, config.adapter.heads, seed)?)
        } else {
            None
        };
        let prompts = if config.switches.learnable_prompts {
            PromptBank::init(
                backbone,
                config.prompt.length,
                &config.prompt.init_text,
                config.prompt.init_noise,
                seed.wrapping_add(1),
            )?
        } else {
            PromptBank::fixed(backbone, &config.prompt.fixed_text)?
        };
        Ok(Self {
            config,
            adapter,
            prompts,
        })
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        let adapter = self.adapter.as_ref().map_or(0, AdapterParams::num_weights);
        let prompts = if self.config.switches.learnable_prompts {
            self.prompts.prefix.len()
        } else {
            0
        };
        adapter + prompts
    }

    pub fn output_size(&self, backbone: &dyn Backbone) -> usize {
        match self.config.score.output_size {
            0 => backbone.spec().input_size,
            v => v,
        }
    }

    /// Resizes, encodes and aggregates an image into `c^{ℓr}`.
    pub fn features(&self, backbone: &dyn Backbone, image: &ImageTensor) -> Result<AggregatedFeatureSet> {
        let resized = image.resized(backbone.spec().input_size);
        let blocks = backbone.encode_image_blocks(&resized)?;
        build_multiscale_set(
            &blocks,
            &self.config.block_ids(),
            &self.config.scales(),
            self.config.window.sigma,
        )
    }

    pub fn anchors(&self, backbone: &dyn Backbone) -> Result<StateEmbeddings> {
        encode_states(&self.prompts, backbone)
    }

    pub fn forward(&self, backbone: &dyn Backbone, features: &AggregatedFeatureSet, anchors: &StateEmbeddings) -> Result<ForwardPass> {
        let tau = self.config.score.tau;
        let streams = par::try_map_slice(&features.entries, |(key, c)| -> Result<StreamForward> {
            let (adapted, cache) = match &self.adapter {
                Some(p) => {
                    let (y, cache) = adapt_with_cache(c.view(), p)?;
                    (y, Some(cache))
                }
                None => (c.clone(), None),
            };
            let z = backbone.project_to_joint(adapted.view())?;
            let (unit, norms) = normalize_rows(z.view());
            let scores = StreamScores {
                normal: unit.dot(&anchors.normal) / tau,
                abnormal: unit.dot(&anchors.abnormal) / tau,
            };
            Ok(StreamForward {
                key: *key,
                cache,
                z,
                unit,
                norms,
                scores,
            })
        })?;
        let tensors = ScoreTensors::from_streams(streams.iter().map(|s| (s.key, s.scores.clone())).collect())?;
        let probs = anomaly_probabilities(&tensors);
        if !probs.iter().all(|p| p.is_finite()) {
            return Err(Error::numeric("non-finite anomaly probability"));
        }
        Ok(ForwardPass { streams, probs })
    }

    /// Backpropagates `∂L/∂p` (and optional direct gradients on each
    /// stream's joint-space tokens) to the adapter and the two anchors.
    pub fn backward(
        &self,
        backbone: &dyn Backbone,
        pass: &ForwardPass,
        anchors: &StateEmbeddings,
        grad_probs: &Array1<f64>,
        grad_z: &[Option<Array2<f64>>],
    ) -> Result<DetectorGrads> {
        let tau = self.config.score.tau;
        // ∂L/∂(S_ia − S_in) per token; every stream shares it.
        let grad_logit = grad_probs * &pass.probs.mapv(|p| p * (1.0 - p)) / tau;
        let direction = &anchors.abnormal - &anchors.normal;
        let jobs: Vec<(usize, &StreamForward)> = pass.streams.iter().enumerate().collect();
        let per_stream = par::try_map_slice(&jobs, |&(idx, stream)| -> Result<DetectorGrads> {
            let unit_grad = grad_logit
                .view()
                .insert_axis(Axis(1))
                .dot(&direction.view().insert_axis(Axis(0)));
            let anchor_grad = stream.unit.t().dot(&grad_logit);
            let mut dz = Array2::zeros(stream.z.raw_dim());
            for (((mut row, u), g), &n) in dz
                .rows_mut()
                .into_iter()
                .zip(stream.unit.rows())
                .zip(unit_grad.rows())
                .zip(&stream.norms)
            {
                if n > 0.0 {
                    let proj = u.dot(&g);
                    row.assign(&((&g - &(&u * proj)) / n));
                }
            }
            if let Some(Some(extra)) = grad_z.get(idx) {
                dz += extra;
            }
            let adapted_grad = backbone.project_backward(dz.view())?;
            let adapter = match (&self.adapter, &stream.cache) {
                (Some(p), Some(cache)) => Some(adapt_backward(p, cache, adapted_grad.view()).0),
                _ => None,
            };
            Ok(DetectorGrads {
                adapter,
                anchor_normal: -&anchor_grad,
                anchor_abnormal: anchor_grad,
            })
        })?;
        let mut iter = per_stream.into_iter();
        let mut total = iter.next().ok_or_else(|| Error::config("forward pass has no streams"))?;
        for g in iter {
            total.accumulate(&g);
        }
        Ok(total)
    }

    /// Scores pre-computed features.
    pub fn score(
        &self,
        backbone: &dyn Backbone,
        features: &AggregatedFeatureSet,
        anchors: &StateEmbeddings,
    ) -> Result<AnomalyResult> {
        let pass = self.forward(backbone, features, anchors)?;
        let patch_probs = pass.patch_grid();
        let pixel_map = render_score_map(patch_probs.view(), &self.config.score, self.output_size(backbone));
        let result = AnomalyResult {
            image_score: pass.image_score(),
            patch_probs,
            pixel_map,
        };
        result.check()?;
        Ok(result)
    }

    /// Full zero-shot pipeline on one image.
    pub fn infer(&self, backbone: &dyn Backbone, image: &ImageTensor) -> Result<AnomalyResult> {
        let anchors = self.anchors(backbone)?;
        let feats = self.features(backbone, image)?;
        self.score(backbone, &feats, &anchors)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::StubBackbone;
    use crate::util::{gaussian_matrix, seeded_rng};
    use ndarray::Array3;

    fn noise_image(seed: u64) -> ImageTensor {
        let m = gaussian_matrix(&mut seeded_rng(seed), 96, 32, 0.2);
        ImageTensor::new(Array3::from_shape_vec((3, 32, 32), m.iter().map(|v| (0.5 + v).clamp(0.0, 1.0)).collect()).unwrap())
            .unwrap()
    }

    #[test]
    fn full_model_has_twelve_streams() {
        let bb = StubBackbone::new(0);
        let det = Detector::init(&bb, ModelConfig::default(), 0).unwrap();
        let feats = det.features(&bb, &noise_image(1)).unwrap();
        assert_eq!(feats.len(), 12);
        let r = det.infer(&bb, &noise_image(1)).unwrap();
        assert_eq!(r.patch_probs.dim(), (8, 8));
        assert_eq!(r.pixel_map.dim(), (32, 32));
        r.check().unwrap();
    }

    #[test]
    fn baseline_uses_last_block_unadapted() {
        let bb = StubBackbone::new(0);
        let cfg = ModelConfig {
            switches: Switches::all_off(),
            ..Default::default()
        };
        let det = Detector::init(&bb, cfg, 0).unwrap();
        assert!(det.adapter.is_none());
        assert_eq!(det.num_trainable(), 0);
        let feats = det.features(&bb, &noise_image(2)).unwrap();
        assert_eq!(feats.keys().collect::<Vec<_>>(), vec![StreamKey { block: 4, r: 1 }]);
    }

    #[test]
    fn trainable_count_for_stub() {
        let bb = StubBackbone::new(0);
        let det = Detector::init(&bb, ModelConfig::default(), 0).unwrap();
        // 4·32·16 adapter weights + 12·16 prefix values
        assert_eq!(det.num_trainable(), 2048 + 192);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let bb = StubBackbone::new(0);
        let det = Detector::init(&bb, ModelConfig::default(), 3).unwrap();
        let feats = det.features(&bb, &noise_image(4)).unwrap();
        let anchors = det.anchors(&bb).unwrap();
        let mut rng = seeded_rng(9);
        let w = gaussian_matrix(&mut rng, 1, 65, 1.0).row(0).to_owned();
        let pass = det.forward(&bb, &feats, &anchors).unwrap();
        let direct: Vec<Option<Array2<f64>>> = pass
            .streams
            .iter()
            .enumerate()
            .map(|(i, s)| (i % 3 == 0).then(|| gaussian_matrix(&mut rng, s.z.nrows(), s.z.ncols(), 0.1)))
            .collect();
        let loss = |d: &Detector, a: &StateEmbeddings| {
            let pass = d.forward(&bb, &feats, a).unwrap();
            let mut l = pass.probs.dot(&w);
            for (s, g) in pass.streams.iter().zip(&direct) {
                if let Some(g) = g {
                    l += (&s.z * g).sum();
                }
            }
            l
        };
        let grads = det.backward(&bb, &pass, &anchors, &w, &direct).unwrap();
        let h = 1e-5;
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-6);
        let adapter_grads = grads.adapter.as_ref().unwrap();
        for t in 0..4 {
            for idx in [0usize, 17, 100, 255] {
                let mut up = det.clone();
                let mut down = det.clone();
                let cols = up.adapter.as_ref().unwrap().tensors()[t].ncols();
                let (i, j) = (idx / cols, idx % cols);
                up.adapter.as_mut().unwrap().tensors_mut()[t][[i, j]] += h;
                down.adapter.as_mut().unwrap().tensors_mut()[t][[i, j]] -= h;
                let numeric = (loss(&up, &anchors) - loss(&down, &anchors)) / (2.0 * h);
                let analytic = adapter_grads.tensors()[t][[i, j]];
                assert!(rel(analytic, numeric) < 1e-4, "tensor {t} [{i},{j}]: {analytic} vs {numeric}");
            }
        }
        for k in [0usize, 5, 15] {
            for abnormal in [false, true] {
                let mut up = anchors.clone();
                let mut down = anchors.clone();
                let (u, d) = if abnormal { (&mut up.abnormal, &mut down.abnormal) } else { (&mut up.normal, &mut down.normal) };
                u[k] += h;
                d[k] -= h;
                let numeric = (loss(&det, &up) - loss(&det, &down)) / (2.0 * h);
                let analytic = if abnormal { grads.anchor_abnormal[k] } else { grads.anchor_normal[k] };
                assert!(rel(analytic, numeric) < 1e-4, "anchor {k} abnormal={abnormal}: {analytic} vs {numeric}");
            }
        }
    }
}
