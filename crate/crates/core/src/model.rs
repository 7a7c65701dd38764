//! The multi-grained pose model.
//!
//! Three frames go through a patch-embedding backbone stub. The key frame's
//! tokens are upsampled to a fine grid and pruned (high-resolution branch);
//! all three frames are mixed by a spatio-temporal block and pruned
//! (low-resolution branch). Both branches refine their survivors with the
//! same transformer blocks. Fine tokens attend to coarse tokens, the fused
//! rows are written back into the fine grid at their original positions,
//! and a per-position MLP plus a linear head produce one heatmap per joint.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{cross_attention, run_blocks, spatio_temporal_block, AttentionParams, BlockParams, MLP_RATIO};
use crate::autodiff::Var;
use crate::dpc::{self, DpcConfig, PruneSelection};
use crate::error::{Error, Result};
use crate::params::{glorot, join, normal};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub patch: usize,
    pub embed_dim: usize,
    pub heads: usize,
    /// Heads of the fusion cross-attention; 1 gives `d = C`.
    pub fusion_heads: usize,
    pub joints: usize,
    /// Transformer blocks in the backbone stub and in the shared refiner.
    pub blocks: usize,
    pub upsample: usize,
    /// Add a learned positional embedding to the upsampled grid.
    pub hr_pos_embed: bool,
    pub hr: DpcConfig,
    pub lr: DpcConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_height: 256,
            image_width: 192,
            patch: 16,
            embed_dim: 32,
            heads: 4,
            fusion_heads: 1,
            joints: 15,
            blocks: 2,
            upsample: 4,
            hr_pos_embed: true,
            hr: DpcConfig::default(),
            lr: DpcConfig::default(),
        }
    }
}

impl ModelConfig {
    /// 32×32 input, two tokens per side, eight channels, two joints.
    pub fn tiny() -> Self {
        Self {
            image_height: 32,
            image_width: 32,
            patch: 16,
            embed_dim: 8,
            heads: 2,
            fusion_heads: 1,
            joints: 2,
            blocks: 2,
            upsample: 4,
            hr_pos_embed: true,
            hr: DpcConfig {
                k: 3,
                tau: None,
                epsilon: 6,
            },
            lr: DpcConfig {
                k: 3,
                tau: None,
                epsilon: 6,
            },
        }
    }

    pub fn with_ratios(mut self, hr_epsilon: usize, lr_epsilon: usize) -> Self {
        self.hr.epsilon = hr_epsilon;
        self.lr.epsilon = lr_epsilon;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_height", self.image_height),
            ("image_width", self.image_width),
            ("patch", self.patch),
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
            ("fusion_heads", self.fusion_heads),
            ("joints", self.joints),
            ("upsample", self.upsample),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Argument(format!("model config: {name} must be positive")));
            }
        }
        if !self.image_height.is_multiple_of(self.patch) || !self.image_width.is_multiple_of(self.patch) {
            return Err(Error::Argument(format!(
                "image {}x{} is not divisible into {}-pixel patches",
                self.image_height, self.image_width, self.patch
            )));
        }
        for h in [self.heads, self.fusion_heads] {
            if !self.embed_dim.is_multiple_of(h) {
                return Err(Error::Argument(format!(
                    "embed_dim {} not divisible by {h} heads",
                    self.embed_dim
                )));
            }
        }
        self.hr.validate()?;
        self.lr.validate()
    }

    /// Patch grid `(rows, cols)`.
    pub fn grid(&self) -> (usize, usize) {
        (self.image_height / self.patch, self.image_width / self.patch)
    }

    pub fn tokens_per_frame(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    /// Upsampled grid, which is also the heatmap resolution.
    pub fn hr_grid(&self) -> (usize, usize) {
        let (h, w) = self.grid();
        (h * self.upsample, w * self.upsample)
    }

    pub fn hr_tokens(&self) -> usize {
        let (h, w) = self.hr_grid();
        h * w
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }

    /// Expected token counts at every stage for this configuration.
    pub fn token_ledger(&self) -> TokenLedger {
        let per_frame = self.tokens_per_frame();
        let high_res = self.hr_tokens();
        TokenLedger {
            per_frame,
            high_res,
            high_res_kept: self.hr.keep_count(high_res),
            temporal: 3 * per_frame,
            temporal_kept: self.lr.keep_count(3 * per_frame),
        }
    }
}

/// Token counts through the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLedger {
    pub per_frame: usize,
    pub high_res: usize,
    pub high_res_kept: usize,
    pub temporal: usize,
    pub temporal_kept: usize,
}

/// Three consecutive crops of one person; the middle one is the key frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameTriplet {
    /// `H×W×3` images for `t-1`, `t`, `t+1`.
    pub frames: [Tensor; 3],
    pub person_id: usize,
    pub frame_index: usize,
}

impl FrameTriplet {
    pub fn new(frames: [Tensor; 3], person_id: usize, frame_index: usize) -> Result<Self> {
        let shape = frames[0].shape();
        if shape.len() != 3 || shape[2] != 3 {
            return Err(Error::shape("frame triplet", shape, &[0, 0, 3]));
        }
        for f in &frames[1..] {
            if f.shape() != shape {
                return Err(Error::shape("frame triplet", shape, f.shape()));
            }
        }
        Ok(Self {
            frames,
            person_id,
            frame_index,
        })
    }
}

/// `J×H×W` per-joint maps.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub maps: Tensor,
}

impl Heatmap {
    pub fn new(maps: Tensor) -> Result<Self> {
        if maps.shape().len() != 3 {
            return Err(Error::shape("heatmap", maps.shape(), &[0, 0, 0]));
        }
        Ok(Self { maps })
    }

    pub fn joints(&self) -> usize {
        self.maps.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.maps.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.maps.shape()[2]
    }

    pub fn joint(&self, j: usize) -> &[f64] {
        let n = self.height() * self.width();
        &self.maps.data()[j * n..(j + 1) * n]
    }

    /// `(row, col)` of each joint's maximum; the first maximum wins ties.
    pub fn argmax(&self) -> Vec<(usize, usize)> {
        (0..self.joints())
            .map(|j| {
                let (best, _) = self
                    .joint(j)
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
                (best / self.width(), best % self.width())
            })
            .collect()
    }
}

/// All trainable weights. Generic over the leaf type; see `params`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = Tensor> {
    pub patch_w: T,
    pub patch_b: T,
    pub pos_embed: T,
    pub backbone: Vec<BlockParams<T>>,
    /// Refinement blocks used by both branches.
    pub shared: Vec<BlockParams<T>>,
    pub st_block: BlockParams<T>,
    pub frame_embed: T,
    pub hr_pos_embed: Option<T>,
    pub fusion: AttentionParams<T>,
    pub mlp_w1: T,
    pub mlp_b1: T,
    pub mlp_w2: T,
    pub mlp_b2: T,
    pub head_w: T,
    pub head_b: T,
}

impl<T> ModelParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&str, &T) -> U) -> ModelParams<U> {
        let blocks = |prefix: &str, bs: &[BlockParams<T>], f: &mut dyn FnMut(&str, &T) -> U| {
            bs.iter()
                .enumerate()
                .map(|(i, b)| b.map(&join(prefix, &i.to_string()), &mut |n: &str, t: &T| f(n, t)))
                .collect::<Vec<_>>()
        };
        ModelParams {
            patch_w: f("patch_w", &self.patch_w),
            patch_b: f("patch_b", &self.patch_b),
            pos_embed: f("pos_embed", &self.pos_embed),
            backbone: blocks("backbone", &self.backbone, f),
            shared: blocks("shared", &self.shared, f),
            st_block: self.st_block.map("st_block", f),
            frame_embed: f("frame_embed", &self.frame_embed),
            hr_pos_embed: self.hr_pos_embed.as_ref().map(|t| f("hr_pos_embed", t)),
            fusion: self.fusion.map("fusion", f),
            mlp_w1: f("mlp_w1", &self.mlp_w1),
            mlp_b1: f("mlp_b1", &self.mlp_b1),
            mlp_w2: f("mlp_w2", &self.mlp_w2),
            mlp_b2: f("mlp_b2", &self.mlp_b2),
            head_w: f("head_w", &self.head_w),
            head_b: f("head_b", &self.head_b),
        }
    }

    /// Visits every leaf with its dotted name, in a fixed order.
    pub fn for_each(&self, f: &mut impl FnMut(&str, &T)) {
        self.map(&mut |n, t| f(n, t));
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.for_each(&mut |n, _| out.push(n.to_string()));
        out
    }

    /// Blocks the high-resolution branch refines with.
    pub fn hr_blocks(&self) -> &[BlockParams<T>] {
        &self.shared
    }

    /// Blocks the low-resolution branch refines with; the same storage as
    /// [`ModelParams::hr_blocks`].
    pub fn lr_blocks(&self) -> &[BlockParams<T>] {
        &self.shared
    }
}

impl ModelParams<Tensor> {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = cfg.embed_dim;
        let hidden = MLP_RATIO * c;
        let blocks = |n: usize, rng: &mut ChaCha8Rng| {
            (0..n).map(|_| BlockParams::init(c, cfg.heads, rng)).collect::<Result<Vec<_>>>()
        };
        let backbone = blocks(cfg.blocks, &mut rng)?;
        let shared = blocks(cfg.blocks, &mut rng)?;
        Ok(Self {
            patch_w: glorot(cfg.patch_dim(), c, &mut rng),
            patch_b: Tensor::zeros(&[1, c]),
            pos_embed: normal(&[cfg.tokens_per_frame(), c], 0.1, &mut rng),
            backbone,
            shared,
            st_block: BlockParams::init(c, cfg.heads, &mut rng)?,
            frame_embed: normal(&[3, c], 0.1, &mut rng),
            hr_pos_embed: cfg
                .hr_pos_embed
                .then(|| normal(&[cfg.hr_tokens(), c], 0.1, &mut rng)),
            fusion: AttentionParams::init(c, cfg.fusion_heads, &mut rng)?,
            mlp_w1: glorot(c, hidden, &mut rng),
            mlp_b1: Tensor::zeros(&[1, hidden]),
            mlp_w2: glorot(hidden, c, &mut rng),
            mlp_b2: Tensor::zeros(&[1, c]),
            head_w: glorot(c, cfg.joints, &mut rng),
            head_b: Tensor::zeros(&[1, cfg.joints]),
        })
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.for_each(&mut |_, t| n += t.numel());
        n
    }

    pub fn constants(&self) -> ModelParams<Var> {
        self.map(&mut |_, t| Var::constant(t.clone()))
    }

    pub fn trainable(&self) -> ModelParams<Var> {
        self.map(&mut |_, t| Var::param(t.clone()))
    }

    /// Copy of the leaf with this dotted name.
    pub fn get(&self, name: &str) -> Option<Tensor> {
        let mut found = None;
        self.for_each(&mut |n, t| {
            if n == name {
                found = Some(t.clone());
            }
        });
        found
    }
}

/// Which parts of the encoder run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Low-resolution branch only; its key-frame tokens are upsampled and
    /// decoded directly.
    LowResOnly,
    /// Both branches fused by cross-attention.
    MultiGrained,
}

/// Pruning decisions of one forward pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Selections {
    pub hr: Option<PruneSelection>,
    pub lr: PruneSelection,
}

pub struct ForwardOutput {
    /// `J×H×W` heatmap node.
    pub heatmap: Var,
    pub selections: Selections,
    pub ledger: TokenLedger,
}

/// Splits an `H×W×3` image into row-major `P×P×3` patches, one per row.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let (h, w) = match image.shape() {
        &[h, w, 3] => (h, w),
        other => return Err(Error::shape("patchify", other, &[0, 0, 3])),
    };
    if h % patch != 0 || w % patch != 0 {
        return Err(Error::shape("patchify", image.shape(), &[patch, patch, 3]));
    }
    let (gh, gw) = (h / patch, w / patch);
    let mut data = Vec::with_capacity(h * w * 3);
    for py in 0..gh {
        for px in 0..gw {
            for y in 0..patch {
                let start = ((py * patch + y) * w + px * patch) * 3;
                data.extend_from_slice(&image.data()[start..start + patch * 3]);
            }
        }
    }
    Tensor::new(vec![gh * gw, patch * patch * 3], data)
}

/// Linear patch projection plus positional embedding, before any block.
pub fn patch_embed(image: &Tensor, cfg: &ModelConfig, p: &ModelParams<Var>) -> Result<Var> {
    if image.shape() != [cfg.image_height, cfg.image_width, 3] {
        return Err(Error::shape(
            "patch_embed",
            image.shape(),
            &[cfg.image_height, cfg.image_width, 3],
        ));
    }
    let patches = Var::constant(patchify(image, cfg.patch)?);
    patches.matmul(&p.patch_w)?.add_row(&p.patch_b)?.add(&p.pos_embed)
}

/// Backbone stub: one `T×C` token matrix per frame.
pub fn patch_embed_backbone(triplet: &FrameTriplet, cfg: &ModelConfig, p: &ModelParams<Var>) -> Result<[Var; 3]> {
    let embed = |i: usize| run_blocks(&patch_embed(&triplet.frames[i], cfg, p)?, &p.backbone);
    Ok([embed(0)?, embed(1)?, embed(2)?])
}

fn choose(tokens: &Var, cfg: &DpcConfig, frozen: Option<&PruneSelection>) -> Result<PruneSelection> {
    match frozen {
        Some(sel) if sel.kept.iter().all(|&i| i < tokens.shape()[0]) => Ok(sel.clone()),
        Some(_) => Err(Error::Index {
            op: "prune",
            msg: "frozen selection does not fit the token set".into(),
        }),
        None => dpc::select(tokens.value(), cfg),
    }
}

/// Upsamples a `T×C` token grid to the fine grid, adding the fine
/// positional embedding when present.
fn upsample_tokens(tokens: &Var, cfg: &ModelConfig, hr_pos: Option<&Var>) -> Result<Var> {
    let (gh, gw) = cfg.grid();
    let c = cfg.embed_dim;
    let up = tokens
        .reshape(&[gh, gw, c])?
        .upsample_bilinear(cfg.upsample)?
        .reshape(&[cfg.hr_tokens(), c])?;
    match hr_pos {
        Some(pos) => up.add(pos),
        None => Ok(up),
    }
}

/// High-resolution branch. Returns the refined fine tokens, the selection,
/// and the full pre-pruning fine grid.
pub fn high_res_branch(
    f_t: &Var,
    cfg: &ModelConfig,
    shared: &[BlockParams<Var>],
    hr_pos: Option<&Var>,
    frozen: Option<&PruneSelection>,
) -> Result<(Var, PruneSelection, Var)> {
    let grid = upsample_tokens(f_t, cfg, hr_pos)?;
    let sel = choose(&grid, &cfg.hr, frozen)?;
    let pruned = if sel.len() == grid.shape()[0] {
        grid.clone()
    } else {
        grid.gather_rows(&sel.kept)?
    };
    Ok((run_blocks(&pruned, shared)?, sel, grid))
}

/// Low-resolution branch. Returns the refined coarse tokens, the selection,
/// and the pre-pruning spatio-temporal tokens.
pub fn low_res_branch(
    frames: &[Var; 3],
    cfg: &ModelConfig,
    shared: &[BlockParams<Var>],
    st_block: &BlockParams<Var>,
    frame_embed: &Var,
    frozen: Option<&PruneSelection>,
) -> Result<(Var, PruneSelection, Var)> {
    let temporal = spatio_temporal_block(frames, frame_embed, st_block)?;
    let sel = choose(&temporal, &cfg.lr, frozen)?;
    let pruned = if sel.len() == temporal.shape()[0] {
        temporal.clone()
    } else {
        temporal.gather_rows(&sel.kept)?
    };
    Ok((run_blocks(&pruned, shared)?, sel, temporal))
}

/// Per-position MLP and linear head over a fine `G×C` grid, giving `J×H×W`.
fn decode_grid(grid: &Var, cfg: &ModelConfig, p: &ModelParams<Var>) -> Result<Var> {
    let hidden = grid.matmul(&p.mlp_w1)?.add_row(&p.mlp_b1)?.gelu();
    let feat = hidden.matmul(&p.mlp_w2)?.add_row(&p.mlp_b2)?;
    let logits = feat.matmul(&p.head_w)?.add_row(&p.head_b)?;
    let (h, w) = cfg.hr_grid();
    logits.transpose()?.reshape(&[cfg.joints, h, w])
}

/// Cross-attention fusion, scatter-back into the fine grid, then decoding.
pub fn fuse_and_decode(
    f_f: &Var,
    sel_f: &PruneSelection,
    hr_grid: &Var,
    f_c: &Var,
    cfg: &ModelConfig,
    p: &ModelParams<Var>,
) -> Result<Var> {
    if sel_f.len() != f_f.shape()[0] {
        return Err(Error::Index {
            op: "fuse_and_decode",
            msg: format!("{} selected indices for {} fine tokens", sel_f.len(), f_f.shape()[0]),
        });
    }
    let fused = cross_attention(f_f, f_c, &p.fusion)?;
    let grid = hr_grid.scatter_rows(&sel_f.kept, &fused)?;
    decode_grid(&grid, cfg, p)
}

/// Mean of squared element-wise differences between two heatmaps.
pub fn heatmap_loss(h: &Var, g: &Var) -> Result<Var> {
    if h.shape() != g.shape() {
        return Err(Error::shape("heatmap_loss", h.shape(), g.shape()));
    }
    h.mse_loss(g)
}

/// Records one forward pass. `frozen` replays earlier pruning decisions.
pub fn forward_graph(
    triplet: &FrameTriplet,
    cfg: &ModelConfig,
    p: &ModelParams<Var>,
    variant: Variant,
    frozen: Option<&Selections>,
) -> Result<ForwardOutput> {
    cfg.validate()?;
    let frames = patch_embed_backbone(triplet, cfg, p)?;
    let (f_c, sel_c, temporal) = low_res_branch(
        &frames,
        cfg,
        p.lr_blocks(),
        &p.st_block,
        &p.frame_embed,
        frozen.map(|s| &s.lr),
    )?;
    let mut ledger = TokenLedger {
        per_frame: frames[1].shape()[0],
        high_res: 0,
        high_res_kept: 0,
        temporal: temporal.shape()[0],
        temporal_kept: f_c.shape()[0],
    };
    let (heatmap, sel_f) = match variant {
        Variant::MultiGrained => {
            let (f_f, sel_f, grid) = high_res_branch(
                &frames[1],
                cfg,
                p.hr_blocks(),
                p.hr_pos_embed.as_ref(),
                frozen.and_then(|s| s.hr.as_ref()),
            )?;
            ledger.high_res = grid.shape()[0];
            ledger.high_res_kept = f_f.shape()[0];
            (fuse_and_decode(&f_f, &sel_f, &grid, &f_c, cfg, p)?, Some(sel_f))
        }
        Variant::LowResOnly => {
            let t = ledger.per_frame;
            let refreshed = temporal.scatter_rows(&sel_c.kept, &f_c)?;
            let key: Vec<usize> = (t..2 * t).collect();
            let grid = upsample_tokens(&refreshed.gather_rows(&key)?, cfg, p.hr_pos_embed.as_ref())?;
            ledger.high_res = grid.shape()[0];
            ledger.high_res_kept = grid.shape()[0];
            (decode_grid(&grid, cfg, p)?, None)
        }
    };
    Ok(ForwardOutput {
        heatmap,
        selections: Selections { hr: sel_f, lr: sel_c },
        ledger,
    })
}

/// Inference: the key frame's heatmap.
pub fn forward_full(triplet: &FrameTriplet, cfg: &ModelConfig, params: &ModelParams) -> Result<Heatmap> {
    let out = forward_graph(triplet, cfg, &params.constants(), Variant::MultiGrained, None)?;
    Heatmap::new(out.heatmap.value().clone())
}

/// One labelled training example.
#[derive(Clone, Debug)]
pub struct Sample {
    pub triplet: FrameTriplet,
    pub target: Heatmap,
}

/// Mean heatmap loss over a batch, with gradients for every parameter.
pub fn loss_and_grads(batch: &[Sample], cfg: &ModelConfig, params: &ModelParams) -> Result<(f64, ModelParams)> {
    if batch.is_empty() {
        return Err(Error::Argument("empty training batch".into()));
    }
    let bound = params.trainable();
    let mut total: Option<Var> = None;
    for s in batch {
        let out = forward_graph(&s.triplet, cfg, &bound, Variant::MultiGrained, None)?;
        let loss = heatmap_loss(&out.heatmap, &Var::constant(s.target.maps.clone()))?;
        total = Some(match total {
            Some(t) => t.add(&loss)?,
            None => loss,
        });
    }
    let total = total.unwrap().scale(1.0 / batch.len() as f64);
    let loss = total.value().item();
    if !loss.is_finite() {
        return Err(Error::Training {
            step: 0,
            loss,
            detail: "non-finite loss".into(),
        });
    }
    total.backward()?;
    let grads = bound.map(&mut |_, v| v.grad().unwrap_or_else(|| Tensor::zeros(v.shape())));
    Ok((loss, grads))
}

/// One plain gradient-descent step on the mean heatmap loss. Pruning
/// decisions are constants of the forward pass.
pub fn train_step(batch: &[Sample], cfg: &ModelConfig, params: &ModelParams, lr: f64) -> Result<(f64, ModelParams)> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::Argument(format!("learning rate must be >= 0, got {lr}")));
    }
    let (loss, grads) = loss_and_grads(batch, cfg, params)?;
    let mut updated = Vec::new();
    grads.for_each(&mut |_, g| updated.push(g.clone()));
    let mut it = updated.into_iter();
    let next = params.map(&mut |name, t| {
        let g = it.next().expect("same tree");
        if lr == 0.0 {
            t.clone()
        } else {
            t.sub(&g.scale(lr)).unwrap_or_else(|_| panic!("gradient shape for {name}"))
        }
    });
    let mut finite = true;
    next.for_each(&mut |_, t| finite &= t.is_finite());
    if !finite {
        return Err(Error::Training {
            step: 0,
            loss,
            detail: "parameters became non-finite".into(),
        });
    }
    Ok((loss, next))
}

/// Runs `steps` gradient steps on a fixed batch; returns the loss before each
/// step followed by the final loss.
pub fn train_loop(
    batch: &[Sample],
    cfg: &ModelConfig,
    params: ModelParams,
    lr: f64,
    steps: usize,
) -> Result<(Vec<f64>, ModelParams)> {
    let mut params = params;
    let mut curve = Vec::with_capacity(steps + 1);
    for step in 0..steps {
        let (loss, next) = train_step(batch, cfg, &params, lr).map_err(|e| match e {
            Error::Training { loss, detail, .. } => Error::Training { step, loss, detail },
            other => other,
        })?;
        curve.push(loss);
        params = next;
    }
    let (final_loss, _) = loss_and_grads(batch, cfg, &params).map_err(|e| match e {
        Error::Training { loss, detail, .. } => Error::Training { step: steps, loss, detail },
        other => other,
    })?;
    curve.push(final_loss);
    Ok((curve, params))
}
