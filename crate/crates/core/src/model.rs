//! The assembled stereo network: extractors, correlation pyramid,
//! attention, the three-level recurrent update and the upsampling head.

use crate::cost::{self, CorrelationPyramid};
use crate::csa::{self, CsaParams};
use crate::features::{init_states, ContextExtractor, FeatureExtractor, RecurrentInit};
use crate::layers::ConvLayer;
use crate::sru::{gru_cell, sru_cell, GruBranchParams, SruLevelParams};
use crate::tensor::{ParamStore, Result, Tape, TensorError, TensorId, TensorValue};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Ablation variants of the update operator.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Variant {
    /// Single-branch GRU with the large kernel, no attention.
    GruBaseline,
    /// Dual branches fused with a fixed weight of 0.5.
    SruSum,
    /// Attention maps inverted at every fusion site.
    SruCsaContrary,
    /// Attention-guided fusion.
    SruCsaFull,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::GruBaseline => "gru_baseline",
            Variant::SruSum => "sru_sum",
            Variant::SruCsaContrary => "sru_csa_contrary",
            Variant::SruCsaFull => "sru_csa_full",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gru_baseline" => Some(Variant::GruBaseline),
            "sru_sum" => Some(Variant::SruSum),
            "sru_csa_contrary" => Some(Variant::SruCsaContrary),
            "sru_csa_full" => Some(Variant::SruCsaFull),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ModelConfig {
    pub channels: usize,
    pub radius: i64,
    /// (small, large) GRU kernel sizes.
    pub kernels: (usize, usize),
    pub variant: Variant,
    pub csa_ratio: usize,
    pub sae_kernel: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 32,
            radius: 4,
            kernels: (1, 3),
            variant: Variant::SruCsaFull,
            csa_ratio: 4,
            sae_kernel: 7,
        }
    }
}

enum LevelUnit {
    Single(GruBranchParams),
    Dual(SruLevelParams),
}

/// Per-iteration recurrent state.
pub struct IterationState {
    pub hidden: [TensorId; 3],
    pub disparity: TensorId,
    pub iteration_index: usize,
}

pub struct ForwardOutput {
    /// Full-resolution disparity prediction per iteration.
    pub predictions: Vec<TensorId>,
    /// Attention maps per level (None for the baseline / sum variants).
    pub attention: Option<[TensorId; 3]>,
    pub state: IterationState,
}

pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub seed: u64,
    feature: FeatureExtractor,
    context: ContextExtractor,
    csa: Option<CsaParams>,
    units: [LevelUnit; 3],
    down_q8: ConvLayer,  // 1/4 hidden -> 1/8
    down_816: ConvLayer, // 1/8 hidden -> 1/16
    head1: ConvLayer,
    head2: ConvLayer,
    mask1: ConvLayer,
    mask2: ConvLayer,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let rng = &mut ChaCha8Rng::seed_from_u64(seed);
        let c = cfg.channels;
        let feature = FeatureExtractor::init(&mut store, rng, c);
        let context = ContextExtractor::init(&mut store, rng, c);
        let csa = match cfg.variant {
            Variant::SruCsaContrary | Variant::SruCsaFull => Some(CsaParams::init(
                &mut store,
                rng,
                c,
                cfg.csa_ratio,
                cfg.sae_kernel,
            )?),
            _ => None,
        };
        // x-channel budget per level; attention never enters x.
        let lookup_ch = 4 * (2 * cfg.radius as usize + 1);
        let x_q = 1 + lookup_ch + c + c; // disparity, cost, context, upsampled hidden
        let x_8 = 3 * c; // context, upsampled 1/16, downsampled 1/4
        let x_16 = 2 * c; // context, downsampled 1/8
        let unit = |store: &mut ParamStore,
                        rng: &mut ChaCha8Rng,
                        name: &str,
                        x_ch: usize|
         -> Result<LevelUnit> {
            Ok(match cfg.variant {
                Variant::GruBaseline => LevelUnit::Single(GruBranchParams::init(
                    store,
                    rng,
                    &format!("{name}.gru"),
                    c,
                    x_ch,
                    cfg.kernels.1,
                )),
                _ => LevelUnit::Dual(SruLevelParams::init(store, rng, name, c, x_ch, cfg.kernels)?),
            })
        };
        let units = [
            unit(&mut store, rng, "update.l0", x_q)?,
            unit(&mut store, rng, "update.l1", x_8)?,
            unit(&mut store, rng, "update.l2", x_16)?,
        ];
        let down_q8 = ConvLayer::init(&mut store, rng, "transfer.down_q8", c, c, 3, 2);
        let down_816 = ConvLayer::init(&mut store, rng, "transfer.down_816", c, c, 3, 2);
        let head1 = ConvLayer::init(&mut store, rng, "head.c1", c, c, 3, 1);
        let head2 = ConvLayer::init_zero(&mut store, "head.c2", c, 1, 3, 1);
        let mask1 = ConvLayer::init(&mut store, rng, "mask.c1", c, c, 3, 1);
        let mask2 = ConvLayer::init(&mut store, rng, "mask.c2", c, 144, 1, 1);
        Ok(Model {
            cfg,
            store,
            seed,
            feature,
            context,
            csa,
            units,
            down_q8,
            down_816,
            head1,
            head2,
            mask1,
            mask2,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.total_elements()
    }

    fn cell(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        level: usize,
        h_prev: TensorId,
        x: TensorId,
        attention: Option<TensorId>,
    ) -> Result<TensorId> {
        match (&self.units[level], attention) {
            (LevelUnit::Single(p), _) => gru_cell(tape, store, p, h_prev, x),
            (LevelUnit::Dual(p), Some(a)) => sru_cell(tape, store, p, h_prev, x, a),
            (LevelUnit::Dual(p), None) => {
                // Fixed 0.5/0.5 fusion for the sum ablation.
                let sh = tape.shape(h_prev).to_vec();
                let half = tape.constant(&TensorValue::full(vec![1, 1, sh[2], sh[3]], 0.5));
                sru_cell(tape, store, p, h_prev, x, half)
            }
        }
    }

    /// Attention maps for this variant, or None when fusion weights are
    /// fixed (baseline, sum).
    pub fn attention_maps(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ctx: &crate::features::ContextPyramid,
    ) -> Result<Option<[TensorId; 3]>> {
        let Some(params) = &self.csa else {
            return Ok(None);
        };
        let maps = csa::csa_forward(tape, store, params, ctx)?;
        if self.cfg.variant == Variant::SruCsaContrary {
            let mut inverted = Vec::with_capacity(3);
            for &m in &maps {
                let ones = tape.constant(&TensorValue::full(tape.shape(m).to_vec(), 1.0));
                inverted.push(tape.sub(ones, m)?);
            }
            Ok(Some([inverted[0], inverted[1], inverted[2]]))
        } else {
            Ok(Some(maps))
        }
    }

    /// One coarse-to-fine sweep over the three levels. The disparity is
    /// left untouched; the caller applies the residual head.
    pub fn multi_level_update(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        state: &IterationState,
        attention: Option<&[TensorId; 3]>,
        init: &RecurrentInit,
        pyr: &CorrelationPyramid,
    ) -> Result<IterationState> {
        let att = |lvl: usize| attention.map(|a| a[lvl]);
        let [h_q, h_8, h_16] = state.hidden;

        // 1/16: own hidden, context, downsampled 1/8 hidden.
        let d8 = self.down_816.forward(tape, store, h_8)?;
        let x16 = tape.concat(&[init.context[2], d8], 1)?;
        let h_16 = self.cell(tape, store, 2, h_16, x16, att(2))?;

        // 1/8: own hidden, context, upsampled 1/16, downsampled 1/4.
        let up16 = tape.bilinear_upsample2x(h_16)?;
        let dq = self.down_q8.forward(tape, store, h_q)?;
        let x8 = tape.concat(&[init.context[1], up16, dq], 1)?;
        let h_8 = self.cell(tape, store, 1, h_8, x8, att(1))?;

        // 1/4: disparity, local cost volume, context, upsampled 1/8.
        let up8 = tape.bilinear_upsample2x(h_8)?;
        let cost = cost::lookup(tape, pyr, state.disparity, self.cfg.radius)?;
        let xq = tape.concat(&[state.disparity, cost, init.context[0], up8], 1)?;
        let h_q = self.cell(tape, store, 0, h_q, xq, att(0))?;

        Ok(IterationState {
            hidden: [h_q, h_8, h_16],
            disparity: state.disparity,
            iteration_index: state.iteration_index + 1,
        })
    }

    /// Two convs on the 1/4 hidden state -> disparity residual.
    pub fn disparity_head(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        h_quarter: TensorId,
    ) -> Result<TensorId> {
        let y = self.head1.forward(tape, store, h_quarter)?;
        let y = tape.relu(y)?;
        self.head2.forward(tape, store, y)
    }

    /// `d + delta`, clamped below at zero.
    pub fn update_disparity(
        &self,
        tape: &mut Tape,
        d: TensorId,
        delta: TensorId,
    ) -> Result<TensorId> {
        let s = tape.add(d, delta)?;
        tape.clamp_min(s, 0.0)
    }

    /// Full-resolution disparity via a learned convex combination of the
    /// 3x3 coarse neighborhood, scaled by the resolution factor 4.
    pub fn convex_upsample(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        d_quarter: TensorId,
        h_quarter: TensorId,
    ) -> Result<TensorId> {
        let sh = tape.shape(d_quarter).to_vec();
        let (h, w) = (sh[2], sh[3]);
        let m = self.mask1.forward(tape, store, h_quarter)?;
        let m = tape.relu(m)?;
        let logits = self.mask2.forward(tape, store, m)?;
        let logits = tape.reshape(logits, vec![9, 16, h, w])?;
        let weights = tape.softmax(logits, 0)?;
        let up = tape.convex_combine(d_quarter, weights)?;
        tape.scale(up, 4.0)
    }

    /// Runs the full pipeline for `n_iters` update iterations, returning
    /// one full-resolution prediction per iteration.
    pub fn run(
        &self,
        tape: &mut Tape,
        left: &TensorValue,
        right: &TensorValue,
        n_iters: usize,
    ) -> Result<ForwardOutput> {
        self.run_with(tape, &self.store, left, right, n_iters)
    }

    /// As [`Model::run`], but reading parameters from an external store
    /// (the store must have been produced by an identically configured
    /// construction; used by finite-difference verification).
    pub fn run_with(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        left: &TensorValue,
        right: &TensorValue,
        n_iters: usize,
    ) -> Result<ForwardOutput> {
        if n_iters < 1 {
            return Err(TensorError::Invalid {
                op: "run",
                detail: "iteration count must be >= 1".into(),
            });
        }
        let pair = self.feature.extract_features(tape, store, left, right)?;
        let ctx = self.context.extract_context(tape, store, left)?;
        let init = init_states(tape, &ctx)?;
        let attention = self.attention_maps(tape, store, &ctx)?;

        let volume = cost::build_all_pairs(tape, pair.left, pair.right)?;
        let pyr = cost::build_pyramid(tape, volume)?;

        let qsh = tape.shape(init.hidden[0]).to_vec();
        let d0 = tape.constant(&TensorValue::zeros(vec![1, 1, qsh[2], qsh[3]]));
        let mut state = IterationState {
            hidden: init.hidden,
            disparity: d0,
            iteration_index: 0,
        };

        let mut predictions = Vec::with_capacity(n_iters);
        for _ in 0..n_iters {
            state = self.multi_level_update(tape, store, &state, attention.as_ref(), &init, &pyr)?;
            let delta = self.disparity_head(tape, store, state.hidden[0])?;
            state.disparity = self.update_disparity(tape, state.disparity, delta)?;
            predictions.push(self.convex_upsample(tape, store, state.disparity, state.hidden[0])?);
        }
        Ok(ForwardOutput {
            predictions,
            attention,
            state,
        })
    }
}
