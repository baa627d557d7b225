//! Feature and context extraction.
//!
//! Both networks share the same backbone layout: a 7x7 stride-2 stem,
//! residual blocks at 1/2 resolution, a stride-2 downsampling conv,
//! residual blocks at 1/4 resolution, and a 1x1 projection. The context
//! network appends two further downsampling stages, producing a pyramid
//! at 1/4, 1/8 and 1/16 resolution from which the initial hidden and
//! context states are derived.

use crate::layers::{ConvLayer, ResBlock};
use crate::tensor::{ParamStore, PoolMode, Result, Tape, TensorError, TensorId, TensorValue};
use rand_chacha::ChaCha8Rng;

/// Matching features for the left/right pair, both at 1/4 resolution.
pub struct FeaturePair {
    pub left: TensorId,
    pub right: TensorId,
    pub channels: usize,
}

/// Context features at 1/4, 1/8, 1/16 resolution.
pub struct ContextPyramid {
    pub levels: [TensorId; 3],
}

/// Initial recurrent state: `hidden = tanh(level)`, `context = relu(level)`.
pub struct RecurrentInit {
    pub hidden: [TensorId; 3],
    pub context: [TensorId; 3],
}

pub struct Backbone {
    stem: ConvLayer, // 7x7 stride 2
    rb_half: [ResBlock; 2],
    down: ConvLayer, // 3x3 stride 2
    rb_quarter: [ResBlock; 2],
    proj: ConvLayer, // 1x1
}

impl Backbone {
    pub fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, channels: usize) -> Self {
        Backbone {
            stem: ConvLayer::init(store, rng, &format!("{name}.stem"), 3, channels, 7, 2),
            rb_half: [
                ResBlock::init(store, rng, &format!("{name}.rb_half0"), channels),
                ResBlock::init(store, rng, &format!("{name}.rb_half1"), channels),
            ],
            down: ConvLayer::init(store, rng, &format!("{name}.down"), channels, channels, 3, 2),
            rb_quarter: [
                ResBlock::init(store, rng, &format!("{name}.rb_quarter0"), channels),
                ResBlock::init(store, rng, &format!("{name}.rb_quarter1"), channels),
            ],
            proj: ConvLayer::init(store, rng, &format!("{name}.proj"), channels, channels, 1, 1),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, image: TensorId) -> Result<TensorId> {
        let x = self.stem.forward(tape, store, image)?;
        let x = tape.relu(x)?;
        let x = self.rb_half[0].forward(tape, store, x)?;
        let x = self.rb_half[1].forward(tape, store, x)?;
        let x = self.down.forward(tape, store, x)?;
        let x = tape.relu(x)?;
        let x = self.rb_quarter[0].forward(tape, store, x)?;
        let x = self.rb_quarter[1].forward(tape, store, x)?;
        self.proj.forward(tape, store, x)
    }
}

/// One extra downsampling stage of the context network.
pub struct ContextStage {
    down: ConvLayer,
    rb: ResBlock,
}

impl ContextStage {
    pub fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, channels: usize) -> Self {
        ContextStage {
            down: ConvLayer::init(store, rng, &format!("{name}.down"), channels, channels, 3, 2),
            rb: ResBlock::init(store, rng, &format!("{name}.rb"), channels),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: TensorId) -> Result<TensorId> {
        let x = self.down.forward(tape, store, x)?;
        let x = tape.relu(x)?;
        self.rb.forward(tape, store, x)
    }
}

pub struct FeatureExtractor {
    pub backbone: Backbone,
    pub channels: usize,
}

pub struct ContextExtractor {
    pub backbone: Backbone,
    pub stages: [ContextStage; 2],
    pub channels: usize,
}

/// Checks the divisibility contract and places an image on the tape as a
/// rank-4 constant. Grayscale inputs are replicated to 3 channels.
pub fn image_leaf(tape: &mut Tape, image: &TensorValue) -> Result<TensorId> {
    let sh = &image.shape;
    let (c, h, w) = match sh.len() {
        3 => (sh[0], sh[1], sh[2]),
        4 if sh[0] == 1 => (sh[1], sh[2], sh[3]),
        _ => {
            return Err(TensorError::ShapeMismatch {
                op: "image_leaf",
                detail: format!("expected (3,H,W) or (1,3,H,W), got {sh:?}"),
            })
        }
    };
    if h % 16 != 0 || w % 16 != 0 {
        return Err(TensorError::Invalid {
            op: "image_leaf",
            detail: format!("image dimensions {h}x{w} must be divisible by 16"),
        });
    }
    match c {
        3 => Ok(tape.constant_from(vec![1, 3, h, w], image.data.clone())),
        1 => {
            let gray = tape.constant_from(vec![1, 1, h, w], image.data.clone());
            tape.concat(&[gray, gray, gray], 1)
        }
        _ => Err(TensorError::ShapeMismatch {
            op: "image_leaf",
            detail: format!("expected 1 or 3 channels, got {c}"),
        }),
    }
}

impl FeatureExtractor {
    pub fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, channels: usize) -> Self {
        FeatureExtractor {
            backbone: Backbone::init(store, rng, "fnet", channels),
            channels,
        }
    }

    /// Shared-weight extraction of matching features for both images.
    pub fn extract_features(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        left: &TensorValue,
        right: &TensorValue,
    ) -> Result<FeaturePair> {
        let li = image_leaf(tape, left)?;
        let ri = image_leaf(tape, right)?;
        // Spatially centered, per-pixel unit-norm channel vectors: removing
        // each channel's spatial mean kills the position-independent
        // component that otherwise dominates every dot product, and
        // normalizing keeps every correlation entry in [-1, 1] whatever
        // magnitude the backbone develops while training.
        let lf = self.backbone.forward(tape, store, li)?;
        let lf = self.center_normalize(tape, lf)?;
        let rf = self.backbone.forward(tape, store, ri)?;
        let rf = self.center_normalize(tape, rf)?;
        Ok(FeaturePair {
            left: lf,
            right: rf,
            channels: self.channels,
        })
    }

    fn center_normalize(&self, tape: &mut Tape, f: TensorId) -> Result<TensorId> {
        let mean = tape.spatial_pool(f, PoolMode::Avg)?;
        let centered = tape.sub(f, mean)?;
        tape.channel_l2_normalize(centered, 1e-12)
    }
}

impl ContextExtractor {
    pub fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, channels: usize) -> Self {
        ContextExtractor {
            backbone: Backbone::init(store, rng, "cnet", channels),
            stages: [
                ContextStage::init(store, rng, "cnet.stage8", channels),
                ContextStage::init(store, rng, "cnet.stage16", channels),
            ],
            channels,
        }
    }

    pub fn extract_context(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        left: &TensorValue,
    ) -> Result<ContextPyramid> {
        let img = image_leaf(tape, left)?;
        let l1 = self.backbone.forward(tape, store, img)?;
        let l2 = self.stages[0].forward(tape, store, l1)?;
        let l3 = self.stages[1].forward(tape, store, l2)?;
        Ok(ContextPyramid {
            levels: [l1, l2, l3],
        })
    }
}

pub fn init_states(tape: &mut Tape, ctx: &ContextPyramid) -> Result<RecurrentInit> {
    let mut hidden = Vec::with_capacity(3);
    let mut context = Vec::with_capacity(3);
    for &level in &ctx.levels {
        hidden.push(tape.tanh(level)?);
        context.push(tape.relu(level)?);
    }
    Ok(RecurrentInit {
        hidden: [hidden[0], hidden[1], hidden[2]],
        context: [context[0], context[1], context[2]],
    })
}
