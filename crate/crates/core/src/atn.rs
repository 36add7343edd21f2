//! Attention transfer between adjacent encoder levels.
//!
//! Region affinity is measured on the coarse map: 3×3 patches (stride 1)
//! are split into hole and context patches by the mask value at their
//! center, L2-normalized, and compared by inner product. A row-wise
//! softmax over context patches gives the attention scores. The scores
//! are then applied one level finer, where every coarse location owns a
//! 4×4, stride-2 footprint: each hole footprint is rebuilt as the
//! score-weighted sum of context footprints and pasted back, averaging
//! overlaps. Finally four dilated 3×3 convolution groups refine the result
//! residually.

use rand::Rng;
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::autograd::Var;
use crate::conv::ConvSpec;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::nn::{Bound, Conv2d, ParamStore};
use crate::tensor::Tensor;

pub const AFFINITY_PATCH: usize = 3;
pub const TRANSFER_PATCH: usize = 4;
pub const TRANSFER_STRIDE: usize = 2;
pub const NORM_EPS: f64 = 1e-8;
pub const DILATIONS: [usize; 4] = [1, 2, 4, 8];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchOrigin {
    Context,
    Hole,
}

/// Patch locations of one origin on a `height × width` grid, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchSet {
    pub origin: PatchOrigin,
    pub height: usize,
    pub width: usize,
    pub locations: Vec<usize>,
}

impl PatchSet {
    /// Splits the grid into `(hole, context)` by the mask value at each patch center.
    pub fn classify(mask: &BinaryMask) -> (PatchSet, PatchSet) {
        let (h, w) = (mask.height(), mask.width());
        let (hole, context): (Vec<usize>, Vec<usize>) =
            (0..h * w).partition(|&i| mask.values()[i] == 1.0);
        (
            PatchSet {
                origin: PatchOrigin::Hole,
                height: h,
                width: w,
                locations: hole,
            },
            PatchSet {
                origin: PatchOrigin::Context,
                height: h,
                width: w,
                locations: context,
            },
        )
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }
}

/// Attention scores (`holes × context`, rows sum to one) still attached to
/// the tape they were computed on.
#[derive(Clone, Debug)]
pub struct Affinity<'t> {
    pub alpha: Var<'t>,
    pub hole: PatchSet,
    pub context: PatchSet,
}

/// Detached attention scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionScores {
    pub holes: usize,
    pub contexts: usize,
    /// Row-major `holes × contexts`.
    pub alpha: Vec<f64>,
    pub hole_locations: Vec<usize>,
    pub context_locations: Vec<usize>,
}

impl AttentionScores {
    pub fn row(&self, j: usize) -> &[f64] {
        &self.alpha[j * self.contexts..(j + 1) * self.contexts]
    }
}

impl Affinity<'_> {
    pub fn scores(&self) -> AttentionScores {
        let alpha = self.alpha.value();
        let (holes, contexts) = alpha.dims2();
        AttentionScores {
            holes,
            contexts,
            alpha: alpha.data().to_vec(),
            hole_locations: self.hole.locations.clone(),
            context_locations: self.context.locations.clone(),
        }
    }
}

fn check_single_map(feature: &Tensor, mask: &BinaryMask, what: &str) -> Result<()> {
    let (n, _, h, w) = feature.dims4();
    if n != 1 || h != mask.height() || w != mask.width() {
        return Err(Error::shape(format!(
            "{what}: feature {:?} vs mask {}x{}",
            feature.shape(),
            mask.height(),
            mask.width()
        )));
    }
    Ok(())
}

/// Cosine affinity between hole and context patches of `feature`
/// (`[1, C, H, W]`), softmax-normalized over context patches.
///
/// `level` only labels the error when no context patch exists.
pub fn region_affinity<'t>(
    feature: Var<'t>,
    mask: &BinaryMask,
    level: usize,
) -> Result<Affinity<'t>> {
    check_single_map(&feature.value(), mask, "region_affinity")?;
    let (hole, context) = PatchSet::classify(mask);
    if context.is_empty() {
        return Err(Error::AllHoles { level });
    }
    let patches = feature.patches(AFFINITY_PATCH, 1, AFFINITY_PATCH / 2)?;
    let hole_rows = patches.gather_rows(&hole.locations).normalize_rows(NORM_EPS);
    let context_rows = patches
        .gather_rows(&context.locations)
        .normalize_rows(NORM_EPS);
    // Each normalized context patch acts as a filter slid over the hole
    // locations; only the hole rows of that response are needed.
    let alpha = hole_rows.matmul(context_rows, true).softmax_rows();
    Ok(Affinity {
        alpha,
        hole,
        context,
    })
}

/// Fills the holes of the finer map `low` (`[1, C, 2H, 2W]`) with
/// context footprints weighted by `affinity`, leaving every pixel whose
/// `low_mask` value is 0 untouched.
pub fn attention_transfer<'t>(
    affinity: &Affinity<'t>,
    low: Var<'t>,
    low_mask: &BinaryMask,
) -> Result<Var<'t>> {
    let low_value = low.value();
    check_single_map(&low_value, low_mask, "attention_transfer")?;
    let (_, _, h, w) = low_value.dims4();
    let grid = &affinity.hole;
    if h != grid.height * TRANSFER_STRIDE || w != grid.width * TRANSFER_STRIDE {
        return Err(Error::shape(format!(
            "attention_transfer: {h}x{w} map is not twice the {}x{} affinity grid",
            grid.height, grid.width
        )));
    }
    let (rows, cols) = affinity.alpha.value().dims2();
    if rows != affinity.hole.len() || cols != affinity.context.len() {
        return Err(Error::shape(format!(
            "attention_transfer: {rows}x{cols} scores for {} hole and {} context patches",
            affinity.hole.len(),
            affinity.context.len()
        )));
    }
    if affinity.hole.is_empty() {
        return Ok(low);
    }
    let pad = (TRANSFER_PATCH - TRANSFER_STRIDE) / 2;
    let footprints = low.patches(TRANSFER_PATCH, TRANSFER_STRIDE, pad)?;
    let context = footprints.gather_rows(&affinity.context.locations);
    let filled = affinity.alpha.matmul(context, false);
    low.paste_patches(
        filled,
        &affinity.hole.locations,
        low_mask.values(),
        TRANSFER_PATCH,
        TRANSFER_STRIDE,
        pad,
    )
}

/// Four parallel dilated 3×3 convolution groups, concatenated and added
/// back onto the input.
#[derive(Clone, Debug)]
pub struct Refine {
    pub channels: usize,
    branches: Vec<Conv2d>,
}

impl Refine {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        channels: usize,
    ) -> Result<Self> {
        if !channels.is_multiple_of(DILATIONS.len()) || channels == 0 {
            return Err(Error::config(format!(
                "refinement needs a channel count divisible by {}, got {channels}",
                DILATIONS.len()
            )));
        }
        let group = channels / DILATIONS.len();
        let branches = DILATIONS
            .iter()
            .map(|&d| {
                Conv2d::new(
                    store,
                    rng,
                    &format!("{name}.dilated{d}"),
                    channels,
                    group,
                    3,
                    ConvSpec::same(3, 1, d),
                    0.0,
                )
            })
            .collect();
        Ok(Refine { channels, branches })
    }

    pub fn forward<'t>(&self, params: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let groups = self
            .branches
            .iter()
            .map(|b| Ok(b.forward(params, x)?.relu()))
            .collect::<Result<Vec<_>>>()?;
        Ok(x.add(Var::concat_channels(&groups)?))
    }
}

/// Per-level record of an attention transfer, for debugging and visualization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelTrace {
    /// 1-based encoder level of the coarse (affinity) map.
    pub level: usize,
    pub batch_index: usize,
    pub scores: Option<AttentionScores>,
    /// Shape and values of the filled finer map before refinement.
    pub filled_shape: Vec<usize>,
    pub filled: Vec<f64>,
}

pub const TRACE_SCHEMA_VERSION: u32 = 1;

/// JSON dump of the [`LevelTrace`]s of one forward pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceArchive {
    pub schema_version: u32,
    pub levels: Vec<LevelTrace>,
}

impl TraceArchive {
    pub fn new(levels: Vec<LevelTrace>) -> Self {
        TraceArchive {
            schema_version: TRACE_SCHEMA_VERSION,
            levels,
        }
    }

    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        let archive: TraceArchive = serde_json::from_slice(&std::fs::read(path)?)?;
        if archive.schema_version != TRACE_SCHEMA_VERSION {
            return Err(Error::config(format!(
                "trace schema version {} is not {TRACE_SCHEMA_VERSION}",
                archive.schema_version
            )));
        }
        Ok(archive)
    }
}

/// One attention transfer network: affinity on the coarse map, transfer
/// into the finer map, refinement.
#[derive(Clone, Debug)]
pub struct Atn {
    /// 1-based level of the coarse map this unit reads affinity from.
    pub level: usize,
    pub refine: Refine,
}

impl Atn {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        level: usize,
        channels: usize,
    ) -> Result<Self> {
        Ok(Atn {
            level,
            refine: Refine::new(store, rng, &format!("{name}.refine"), channels)?,
        })
    }

    /// `f(low, high)`: fills `low` (`[N, C, 2H, 2W]`) under guidance of
    /// `high` (`[N, C', H, W]`), per batch item with its own masks.
    pub fn forward<'t>(
        &self,
        params: &Bound<'t>,
        low: Var<'t>,
        high: Var<'t>,
        low_masks: &[&BinaryMask],
        high_masks: &[&BinaryMask],
        mut trace: Option<&mut Vec<LevelTrace>>,
    ) -> Result<Var<'t>> {
        let n = low.value().dims4().0;
        if high.value().dims4().0 != n || low_masks.len() != n || high_masks.len() != n {
            return Err(Error::shape("atn: batch size differs between maps and masks"));
        }
        let mut filled = Vec::with_capacity(n);
        for b in 0..n {
            let low_b = if n == 1 { low } else { low.batch_item(b) };
            let high_b = if n == 1 { high } else { high.batch_item(b) };
            let (out, scores) = match region_affinity(high_b, high_masks[b], self.level) {
                Ok(aff) => (
                    attention_transfer(&aff, low_b, low_masks[b])?,
                    Some(aff.scores()),
                ),
                Err(Error::AllHoles { level }) => {
                    warn!(level, "fully masked level; skipping attention transfer");
                    (low_b, None)
                }
                Err(e) => return Err(e),
            };
            if let Some(trace) = trace.as_deref_mut() {
                let v = out.value();
                trace.push(LevelTrace {
                    level: self.level,
                    batch_index: b,
                    scores,
                    filled_shape: v.shape().to_vec(),
                    filled: v.data().to_vec(),
                });
            }
            filled.push(out);
        }
        let filled = if n == 1 {
            filled[0]
        } else {
            Var::stack_batch(&filled)?
        };
        self.refine.forward(params, filled)
    }
}
