//! The segmentation network: a patch-token visual encoder carrying two banks
//! of learnable group tokens, a text encoder, a sentence-conditioned region
//! filter over the group tokens, and a two-stage decoder ending in a
//! per-patch linear mask head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::ModelError;
use crate::dataset::ExpressionTokens;
use crate::mask::{binarize, resize_prob, BinaryMask, ProbMask};
use crate::nn::layers::{normal_matrix, DecoderLayer, EncoderBlock, LayerNorm, Linear};
use crate::nn::{Graph, Matrix, ParamId, ParamStore, Scalar, Var};
use crate::pixels::PixelGrid;

const EMBED_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupLevel {
    Low,
    High,
}

impl std::str::FromStr for GroupLevel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "low" => Ok(GroupLevel::Low),
            "high" => Ok(GroupLevel::High),
            other => Err(format!("unknown group level `{other}`")),
        }
    }
}

#[derive(Clone, Debug)]
struct VisualEncoder {
    patch_embed: Linear,
    pos: ParamId,
    low_tokens: Option<ParamId>,
    high_tokens: Option<ParamId>,
    blocks: Vec<EncoderBlock>,
    norm: LayerNorm,
}

#[derive(Clone, Debug)]
struct TextEncoder {
    token_embed: ParamId,
    pos: ParamId,
    blocks: Vec<EncoderBlock>,
    norm: LayerNorm,
}

/// Sentence-queried attention over one group-token bank; each token is
/// gated by its attention weight (scaled by the bank size so a uniform
/// distribution is the identity gate).
#[derive(Clone, Debug)]
struct RegionFilter {
    query: Linear,
    key: Linear,
    value: Linear,
}

impl RegionFilter {
    fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, group: &str, d: usize) -> Self {
        Self {
            query: Linear::new(store, rng, &format!("{group}.q"), group, d, d),
            key: Linear::new(store, rng, &format!("{group}.k"), group, d, d),
            value: Linear::new(store, rng, &format!("{group}.v"), group, d, d),
        }
    }

    /// Returns the gated bank and the `1 × n` attention row.
    fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, bank: Var, sentence: Var) -> (Var, Var) {
        let n = g.value(bank).rows();
        let d = g.value(bank).cols();
        let q = self.query.forward(g, store, sentence);
        let k = self.key.forward(g, store, bank);
        let v = self.value.forward(g, store, bank);
        let scores = g.matmul_t(q, k);
        let scores = g.scale(scores, T::of(1.0 / (d as f64).sqrt()));
        let attn = g.softmax(scores, None);
        let gate = g.transpose(attn);
        let gate = g.scale(gate, T::of(n as f64));
        (g.mul_col(v, gate), attn)
    }
}

/// Graph handles for every intermediate of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub patch_features: Var,
    pub low_group_out: Option<Var>,
    pub high_group_out: Option<Var>,
    pub text_features: Var,
    pub sentence_feature: Var,
    pub selected_regions: Option<Var>,
    pub low_attention: Option<Var>,
    pub high_attention: Option<Var>,
    pub stage1_features: Var,
    pub stage2_features: Option<Var>,
    /// Pre-sigmoid mask scores, one row per patch.
    pub logits: Var,
    /// Sigmoid confidences, one row per patch.
    pub probs: Var,
}

/// Diagnostic record of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace<T> {
    pub text_features: Matrix<T>,
    pub sentence_feature: Matrix<T>,
    pub patch_features: Matrix<T>,
    pub low_group_out: Option<Matrix<T>>,
    pub high_group_out: Option<Matrix<T>>,
    pub selected_regions: Matrix<T>,
    pub low_attention: Option<Matrix<T>>,
    pub high_attention: Option<Matrix<T>>,
    pub stage1_features: Matrix<T>,
    pub stage2_features: Option<Matrix<T>>,
    /// Confidences on the patch grid.
    pub mask_logits: ProbMask,
    pub first_half_len: usize,
    pub second_half_len: usize,
    pub grid_size: usize,
}

#[derive(Clone, Debug)]
pub struct VisualOutput<T> {
    pub patch_features: Matrix<T>,
    pub low_group_out: Option<Matrix<T>>,
    pub high_group_out: Option<Matrix<T>>,
    pub first_half_len: usize,
    pub second_half_len: usize,
}

#[derive(Clone, Debug)]
pub struct TextOutput<T> {
    pub per_token: Matrix<T>,
    pub sentence: Matrix<T>,
}

/// Per-patch group indices on the patch grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupAssignment {
    pub level: GroupLevel,
    pub grid_size: usize,
    pub num_groups: usize,
    /// Row-major, `grid_size²` entries, each `< num_groups`.
    pub values: Vec<u32>,
}

impl GroupAssignment {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.values.chunks(self.grid_size) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    /// Shannon entropy (nats) of the group histogram.
    pub fn entropy(&self) -> f64 {
        histogram_entropy(&self.values, self.num_groups)
    }
}

pub fn histogram_entropy(values: &[u32], bins: usize) -> f64 {
    let mut counts = vec![0usize; bins];
    for &v in values {
        counts[v as usize] += 1;
    }
    let n = values.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

#[derive(Clone, Debug)]
pub struct UniRes<T: Scalar> {
    config: ModelConfig,
    store: ParamStore<T>,
    visual: VisualEncoder,
    text: TextEncoder,
    low_filter: Option<RegionFilter>,
    high_filter: Option<RegionFilter>,
    stage1: Vec<DecoderLayer>,
    stage2: Vec<DecoderLayer>,
    head_norm: LayerNorm,
    head: Linear,
}

impl<T: Scalar> UniRes<T> {
    /// Randomly initialized model; the same config and seed always give the
    /// same parameters.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.embed_dim;
        let h = config.num_heads;
        let rng = &mut rng;

        let patch_embed = Linear::new(&mut store, rng, "visual.patch_embed", "visual.embed", config.patch_dim(), d);
        let pos = store.add(
            "visual.pos_embed",
            "visual.embed",
            normal_matrix(rng, config.num_patches(), d, EMBED_INIT_STD),
        );
        let low_tokens = (config.n_low_group > 0).then(|| {
            store.add(
                "group_tokens.low",
                "group_tokens.low",
                normal_matrix(rng, config.n_low_group, d, 1.0),
            )
        });
        let first: Vec<EncoderBlock> = (0..config.visual_layers / 2)
            .map(|i| EncoderBlock::new(&mut store, rng, &format!("visual.blocks.{i}"), d, h))
            .collect();
        let high_tokens = (config.n_high_group > 0).then(|| {
            store.add(
                "group_tokens.high",
                "group_tokens.high",
                normal_matrix(rng, config.n_high_group, d, 1.0),
            )
        });
        let second: Vec<EncoderBlock> = (config.visual_layers / 2..config.visual_layers)
            .map(|i| EncoderBlock::new(&mut store, rng, &format!("visual.blocks.{i}"), d, h))
            .collect();
        let visual_norm = LayerNorm::new(&mut store, "visual.norm", "visual.norm", d);
        let visual = VisualEncoder {
            patch_embed,
            pos,
            low_tokens,
            high_tokens,
            blocks: first.into_iter().chain(second).collect(),
            norm: visual_norm,
        };

        let token_embed = store.add(
            "text.token_embed",
            "text.embed",
            normal_matrix(rng, config.vocab_size, d, 1.0),
        );
        let text_pos = store.add(
            "text.pos_embed",
            "text.embed",
            normal_matrix(rng, config.max_text_len, d, EMBED_INIT_STD),
        );
        let text_blocks = (0..config.text_layers)
            .map(|i| EncoderBlock::new(&mut store, rng, &format!("text.blocks.{i}"), d, h))
            .collect();
        let text_norm = LayerNorm::new(&mut store, "text.norm", "text.norm", d);
        let text = TextEncoder {
            token_embed,
            pos: text_pos,
            blocks: text_blocks,
            norm: text_norm,
        };

        let low_filter = (config.n_low_group > 0).then(|| RegionFilter::new(&mut store, rng, "lrf.low", d));
        let high_filter = (config.n_high_group > 0).then(|| RegionFilter::new(&mut store, rng, "lrf.high", d));

        let stage1 = (0..config.decoder_layers_stage1)
            .map(|i| DecoderLayer::new(&mut store, rng, &format!("decoder.stage1.{i}"), d, h))
            .collect();
        let stage2 = (0..config.effective_stage2_layers())
            .map(|i| DecoderLayer::new(&mut store, rng, &format!("decoder.stage2.{i}"), d, h))
            .collect();
        let head_norm = LayerNorm::new(&mut store, "mask_head.norm", "mask_head", d);
        let head = Linear::new(&mut store, rng, "mask_head.proj", "mask_head", d, 1);

        let model = Self {
            config,
            store,
            visual,
            text,
            low_filter,
            high_filter,
            stage1,
            stage2,
            head_norm,
            head,
        };
        debug_assert_eq!(model.store.scalar_count(), model.config.param_count());
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn param_count(&self) -> usize {
        self.store.scalar_count()
    }

    fn check_image(&self, image: &PixelGrid) -> Result<(), ModelError> {
        let s = self.config.image_size;
        if image.width() != s || image.height() != s {
            return Err(ModelError::ShapeMismatch(format!(
                "image is {}x{}, model expects {s}x{s}",
                image.width(),
                image.height()
            )));
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &ExpressionTokens) -> Result<(), ModelError> {
        if tokens.ids.len() != self.config.max_text_len {
            return Err(ModelError::ShapeMismatch(format!(
                "token sequence has length {}, model expects {}",
                tokens.ids.len(),
                self.config.max_text_len
            )));
        }
        if tokens.true_length < 2 || tokens.true_length > tokens.ids.len() {
            return Err(ModelError::ShapeMismatch(format!(
                "true_length {} invalid",
                tokens.true_length
            )));
        }
        if let Some(&id) = tokens.ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(ModelError::TokenOutOfRange {
                id,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Visual encoder on the graph. Returns (patch features, low bank, high bank).
    pub fn visual_graph(
        &self,
        g: &mut Graph<T>,
        image: &PixelGrid,
    ) -> Result<(Var, Option<Var>, Option<Var>), ModelError> {
        self.check_image(image)?;
        let c = &self.config;
        let s = &self.store;
        let (num_patches, raw) = image.patchify(c.patch_size);
        let patches = Matrix::from_vec(num_patches, c.patch_dim(), raw.into_iter().map(|v| T::of(f64::from(v))).collect());
        let patches = g.constant(patches);
        let x = self.visual.patch_embed.forward(g, s, patches);
        let pos = g.param(s, self.visual.pos);
        let mut x = g.add(x, pos);
        if let Some(low) = self.visual.low_tokens {
            let tokens = g.param(s, low);
            x = g.concat_rows(&[x, tokens]);
        }
        debug_assert_eq!(g.value(x).rows(), c.first_half_len());
        let half = c.visual_layers / 2;
        for block in &self.visual.blocks[..half] {
            x = block.forward(g, s, x, None);
        }
        if let Some(high) = self.visual.high_tokens {
            let tokens = g.param(s, high);
            x = g.concat_rows(&[x, tokens]);
        }
        debug_assert_eq!(g.value(x).rows(), c.second_half_len());
        for block in &self.visual.blocks[half..] {
            x = block.forward(g, s, x, None);
        }
        let x = self.visual.norm.forward(g, s, x);
        let patch = g.slice_rows(x, 0, num_patches);
        let low = (c.n_low_group > 0).then(|| g.slice_rows(x, num_patches, c.n_low_group));
        let high = (c.n_high_group > 0).then(|| g.slice_rows(x, c.first_half_len(), c.n_high_group));
        Ok((patch, low, high))
    }

    /// Text encoder on the graph. Returns (per-token features with padding
    /// rows zeroed, sentence feature at the end marker).
    pub fn text_graph(&self, g: &mut Graph<T>, tokens: &ExpressionTokens) -> Result<(Var, Var), ModelError> {
        self.check_tokens(tokens)?;
        let s = &self.store;
        let ids: Vec<usize> = tokens.ids.iter().map(|&i| i as usize).collect();
        let valid = tokens.valid_mask();
        let table = g.param(s, self.text.token_embed);
        let x = g.gather_rows(table, &ids);
        let pos = g.param(s, self.text.pos);
        let mut x = g.add(x, pos);
        for block in &self.text.blocks {
            x = block.forward(g, s, x, Some(&valid));
        }
        let x = self.text.norm.forward(g, s, x);
        let keep = Matrix::from_fn(valid.len(), 1, |r, _| if valid[r] { T::one() } else { T::zero() });
        let keep = g.constant(keep);
        let per_token = g.mul_col(x, keep);
        let sentence = g.slice_rows(x, tokens.eos_index(), 1);
        Ok((per_token, sentence))
    }

    /// Region filter over both banks followed by concatenation.
    /// Returns (regions, low attention, high attention).
    pub fn lrf_graph(
        &self,
        g: &mut Graph<T>,
        low: Option<Var>,
        high: Option<Var>,
        sentence: Var,
    ) -> (Option<Var>, Option<Var>, Option<Var>) {
        let s = &self.store;
        let mut parts = Vec::new();
        let mut low_attn = None;
        let mut high_attn = None;
        if let (Some(bank), Some(filter)) = (low, &self.low_filter) {
            let (out, attn) = filter.forward(g, s, bank, sentence);
            parts.push(out);
            low_attn = Some(attn);
        }
        if let (Some(bank), Some(filter)) = (high, &self.high_filter) {
            let (out, attn) = filter.forward(g, s, bank, sentence);
            parts.push(out);
            high_attn = Some(attn);
        }
        let regions = match parts.len() {
            0 => None,
            1 => Some(parts[0]),
            _ => Some(g.concat_rows(&parts)),
        };
        (regions, low_attn, high_attn)
    }

    /// Two-stage decoder and mask head. Returns (stage 1, stage 2, logits, probs).
    pub fn decode_graph(
        &self,
        g: &mut Graph<T>,
        patch: Var,
        text: Var,
        text_valid: &[bool],
        regions: Option<Var>,
    ) -> (Var, Option<Var>, Var, Var) {
        let s = &self.store;
        let mut x = patch;
        for layer in &self.stage1 {
            x = layer.forward(g, s, x, text, Some(text_valid));
        }
        let stage1 = x;
        let mut stage2 = None;
        if let (Some(regions), false) = (regions, self.stage2.is_empty()) {
            let memory = g.concat_rows(&[text, regions]);
            let n = g.value(regions).rows();
            let mask: Vec<bool> = text_valid.iter().copied().chain(std::iter::repeat_n(true, n)).collect();
            for layer in &self.stage2 {
                x = layer.forward(g, s, x, memory, Some(&mask));
            }
            stage2 = Some(x);
        }
        let h = self.head_norm.forward(g, s, x);
        let logits = self.head.forward(g, s, h);
        let probs = g.sigmoid(logits);
        (stage1, stage2, logits, probs)
    }

    /// Full forward pass on the graph for an image already at model size.
    pub fn build(&self, g: &mut Graph<T>, image: &PixelGrid, tokens: &ExpressionTokens) -> Result<ForwardVars, ModelError> {
        let (patch, low, high) = self.visual_graph(g, image)?;
        let (text, sentence) = self.text_graph(g, tokens)?;
        let (regions, low_attention, high_attention) = self.lrf_graph(g, low, high, sentence);
        let valid = tokens.valid_mask();
        let (stage1, stage2, logits, probs) = self.decode_graph(g, patch, text, &valid, regions);
        Ok(ForwardVars {
            patch_features: patch,
            low_group_out: low,
            high_group_out: high,
            text_features: text,
            sentence_feature: sentence,
            selected_regions: regions,
            low_attention,
            high_attention,
            stage1_features: stage1,
            stage2_features: stage2,
            logits,
            probs,
        })
    }

    pub fn visual_encode(&self, image: &PixelGrid) -> Result<VisualOutput<T>, ModelError> {
        let mut g = Graph::new();
        let (patch, low, high) = self.visual_graph(&mut g, image)?;
        Ok(VisualOutput {
            patch_features: g.value(patch).clone(),
            low_group_out: low.map(|v| g.value(v).clone()),
            high_group_out: high.map(|v| g.value(v).clone()),
            first_half_len: self.config.first_half_len(),
            second_half_len: self.config.second_half_len(),
        })
    }

    pub fn text_encode(&self, tokens: &ExpressionTokens) -> Result<TextOutput<T>, ModelError> {
        let mut g = Graph::new();
        let (per_token, sentence) = self.text_graph(&mut g, tokens)?;
        Ok(TextOutput {
            per_token: g.value(per_token).clone(),
            sentence: g.value(sentence).clone(),
        })
    }

    /// Filtered and concatenated group tokens,
    /// `(n_low_group + n_high_group) × embed_dim`.
    pub fn lrf_select(
        &self,
        low: Option<&Matrix<T>>,
        high: Option<&Matrix<T>>,
        sentence: &Matrix<T>,
    ) -> Matrix<T> {
        let mut g = Graph::new();
        let low = low.map(|m| g.constant(m.clone()));
        let high = high.map(|m| g.constant(m.clone()));
        let sentence = g.constant(sentence.clone());
        match self.lrf_graph(&mut g, low, high, sentence).0 {
            Some(v) => g.value(v).clone(),
            None => Matrix::zeros(0, self.config.embed_dim),
        }
    }

    /// Decoder on precomputed features; returns confidences on the patch grid.
    pub fn decode(
        &self,
        patch_features: &Matrix<T>,
        text_features: &Matrix<T>,
        text_valid: &[bool],
        regions: &Matrix<T>,
    ) -> ProbMask {
        let mut g = Graph::new();
        let patch = g.constant(patch_features.clone());
        let text = g.constant(text_features.clone());
        let regions = (regions.rows() > 0).then(|| g.constant(regions.clone()));
        let (_, _, _, probs) = self.decode_graph(&mut g, patch, text, text_valid, regions);
        self.grid_prob(g.value(probs))
    }

    fn grid_prob(&self, probs: &Matrix<T>) -> ProbMask {
        let n = self.config.grid_size();
        let data = probs.data().iter().map(|v| (v.as_f64() as f32).clamp(0.0, 1.0)).collect();
        ProbMask::new(n, n, data).expect("grid-shaped probabilities")
    }

    /// Forward pass on an image already at model size; the confidence map is
    /// upsampled to `out_w × out_h`.
    pub fn forward_grid(
        &self,
        image: &PixelGrid,
        tokens: &ExpressionTokens,
        out_w: usize,
        out_h: usize,
    ) -> Result<(ProbMask, ForwardTrace<T>), ModelError> {
        let mut g = Graph::new();
        let v = self.build(&mut g, image, tokens)?;
        let grid = self.grid_prob(g.value(v.probs));
        let full = resize_prob(&grid, out_w, out_h).map_err(|e| ModelError::ShapeMismatch(e.to_string()))?;
        let get = |var: Option<Var>| var.map(|x| g.value(x).clone());
        let trace = ForwardTrace {
            text_features: g.value(v.text_features).clone(),
            sentence_feature: g.value(v.sentence_feature).clone(),
            patch_features: g.value(v.patch_features).clone(),
            low_group_out: get(v.low_group_out),
            high_group_out: get(v.high_group_out),
            selected_regions: get(v.selected_regions).unwrap_or_else(|| Matrix::zeros(0, self.config.embed_dim)),
            low_attention: get(v.low_attention),
            high_attention: get(v.high_attention),
            stage1_features: g.value(v.stage1_features).clone(),
            stage2_features: get(v.stage2_features),
            mask_logits: grid,
            first_half_len: self.config.first_half_len(),
            second_half_len: self.config.second_half_len(),
            grid_size: self.config.grid_size(),
        };
        Ok((full, trace))
    }

    /// Resizes the image to model size, runs the network and returns the
    /// confidence map at the original image size.
    pub fn forward(
        &self,
        image: &image::RgbImage,
        tokens: &ExpressionTokens,
    ) -> Result<(ProbMask, ForwardTrace<T>), ModelError> {
        let grid = PixelGrid::prepare(image, self.config.image_size);
        self.forward_grid(&grid, tokens, image.width() as usize, image.height() as usize)
    }

    /// Binarized prediction at the original image size.
    pub fn predict_mask(&self, image: &image::RgbImage, tokens: &ExpressionTokens) -> Result<BinaryMask, ModelError> {
        let (prob, _) = self.forward(image, tokens)?;
        Ok(binarize(&prob, self.config.mask_threshold))
    }
}

/// Affinity between patch features and one encoded token bank,
/// `patches × tokens`, before any region filtering.
pub fn group_affinity<T: Scalar>(trace: &ForwardTrace<T>, level: GroupLevel) -> Result<Matrix<T>, ModelError> {
    let bank = match level {
        GroupLevel::Low => trace.low_group_out.as_ref(),
        GroupLevel::High => trace.high_group_out.as_ref(),
    }
    .ok_or(ModelError::DisabledBank(level))?;
    let d = trace.patch_features.cols() as f64;
    Ok(trace.patch_features.matmul_t(bank).scale(T::of(1.0 / d.sqrt())))
}

/// Assigns each patch to its highest-affinity group token. Ties go to the
/// lower index.
pub fn group_assignment<T: Scalar>(trace: &ForwardTrace<T>, level: GroupLevel) -> Result<GroupAssignment, ModelError> {
    group_assignment_tempered(trace, level, 1.0)
}

/// As [`group_assignment`], taking the argmax of a softmax at `temperature`.
pub fn group_assignment_tempered<T: Scalar>(
    trace: &ForwardTrace<T>,
    level: GroupLevel,
    temperature: f64,
) -> Result<GroupAssignment, ModelError> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(ModelError::InvalidConfig(format!("temperature {temperature} must be positive")));
    }
    let aff = group_affinity(trace, level)?;
    let values = (0..aff.rows())
        .map(|r| {
            let row: Vec<f64> = aff.row(r).iter().map(|v| v.as_f64() / temperature).collect();
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let mut best = 0;
            for (i, &w) in weights.iter().enumerate() {
                if w > weights[best] {
                    best = i;
                }
            }
            best as u32
        })
        .collect();
    Ok(GroupAssignment {
        level,
        grid_size: trace.grid_size,
        num_groups: aff.cols(),
        values,
    })
}
