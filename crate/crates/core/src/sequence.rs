//! Token-sequence codec: converts a [`CodeGrid`] to paired content and
//! position streams and back.
//!
//! A sequence holds one segment per granularity, concatenated coarse to
//! fine. Each segment is `[sos, body…, eos, pad…]` in both streams, padded
//! to a caller-chosen length so batches align. Within a segment, regions
//! appear in raster order of the region grid and cells in raster order of
//! that granularity's position map.

use crate::error::{Error, Result};
use crate::grain::GrainGeometry;
use crate::stage1::CodeGrid;

/// Token id spaces. Content: code indices `0..k_c`, then sos, eos, pad,
/// then class labels. Positions: one vocabulary per granularity, cell
/// indices `0..cells(k)` followed by sos, eos, pad.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    k_c: usize,
    n_labels: usize,
    cells: Vec<usize>,
}

impl Vocab {
    pub fn new(geo: &GrainGeometry, k_c: usize, n_labels: usize) -> Vocab {
        Vocab {
            k_c,
            n_labels,
            cells: (0..geo.spec.k_g()).map(|k| geo.cells(k)).collect(),
        }
    }

    pub fn k_c(&self) -> usize {
        self.k_c
    }

    pub fn k_g(&self) -> usize {
        self.cells.len()
    }

    pub fn n_labels(&self) -> usize {
        self.n_labels
    }

    pub fn content_size(&self) -> usize {
        self.k_c + 3 + self.n_labels
    }

    pub fn sos_c(&self) -> usize {
        self.k_c
    }

    pub fn eos_c(&self) -> usize {
        self.k_c + 1
    }

    pub fn pad_c(&self) -> usize {
        self.k_c + 2
    }

    pub fn label(&self, l: usize) -> Result<usize> {
        if l >= self.n_labels {
            return Err(Error::Index {
                what: "class label",
                index: l,
                len: self.n_labels,
                cell: 0,
            });
        }
        Ok(self.k_c + 3 + l)
    }

    /// Class index of a label token, if it is one.
    pub fn label_of(&self, token: usize) -> Option<usize> {
        (token >= self.k_c + 3 && token < self.content_size()).then(|| token - self.k_c - 3)
    }

    pub fn position_size(&self, k: usize) -> usize {
        self.cells[k] + 3
    }

    pub fn cells(&self, k: usize) -> usize {
        self.cells[k]
    }

    pub fn sos_p(&self, k: usize) -> usize {
        self.cells[k]
    }

    pub fn eos_p(&self, k: usize) -> usize {
        self.cells[k] + 1
    }

    pub fn pad_p(&self, k: usize) -> usize {
        self.cells[k] + 2
    }
}

/// Aligned content/position/granularity streams. `segment_bounds[k]` is
/// the half-open token range of granularity k's segment; segments sit in
/// the stream coarse first, so `segment_bounds[k_g-1]` starts at 0.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub content: Vec<usize>,
    pub position: Vec<usize>,
    pub grain_tag: Vec<usize>,
    pub segment_bounds: Vec<(usize, usize)>,
}

impl TokenSequence {
    pub fn from_parts(
        content: Vec<usize>,
        position: Vec<usize>,
        grain_tag: Vec<usize>,
        segment_bounds: Vec<(usize, usize)>,
    ) -> Result<TokenSequence> {
        if content.len() != position.len() || content.len() != grain_tag.len() {
            return Err(Error::Structure {
                grain: 0,
                detail: format!(
                    "stream lengths differ: content {}, position {}, grain {}",
                    content.len(),
                    position.len(),
                    grain_tag.len()
                ),
            });
        }
        let k_g = segment_bounds.len();
        if k_g == 0 {
            return Err(Error::Structure {
                grain: 0,
                detail: "no segments".into(),
            });
        }
        let mut cursor = 0;
        for k in (0..k_g).rev() {
            let (start, end) = segment_bounds[k];
            if start != cursor || end < start + 2 {
                return Err(Error::Structure {
                    grain: k,
                    detail: format!("segment bounds {start}..{end} break the coarse-to-fine layout"),
                });
            }
            if grain_tag[start..end].iter().any(|&g| g != k) {
                return Err(Error::Structure {
                    grain: k,
                    detail: "granularity tags disagree with segment bounds".into(),
                });
            }
            cursor = end;
        }
        if cursor != content.len() {
            return Err(Error::Structure {
                grain: 0,
                detail: format!(
                    "segments cover {cursor} tokens but streams hold {}",
                    content.len()
                ),
            });
        }
        Ok(TokenSequence {
            content,
            position,
            grain_tag,
            segment_bounds,
        })
    }

    pub fn len(&self) -> usize {
        self.content.len()
    }

    pub fn is_empty(&self) -> bool {
        self.content.is_empty()
    }

    /// Tokens that carry a code (body slots across all segments).
    pub fn body_len(&self, vocab: &Vocab) -> usize {
        self.content
            .iter()
            .filter(|&&c| c < vocab.k_c())
            .count()
    }
}

/// Smallest legal `pad_to` per granularity for one grid: body plus the
/// sos/eos pair.
pub fn natural_lengths(grid: &CodeGrid, geo: &GrainGeometry) -> Vec<usize> {
    let k_g = geo.spec.k_g();
    let mut out = vec![2usize; k_g];
    for (_, &k) in grid.assignments.iter().enumerate() {
        out[k] += geo.spec.codes_per_region(k);
    }
    out
}

/// Shared per-granularity segment lengths for a batch: the per-segment
/// maximum natural length plus headroom.
pub fn pad_plan(grids: &[CodeGrid], geo: &GrainGeometry, headroom: usize) -> Vec<usize> {
    let mut plan = vec![2 + headroom; geo.spec.k_g()];
    for grid in grids {
        for (k, n) in natural_lengths(grid, geo).into_iter().enumerate() {
            plan[k] = plan[k].max(n + headroom);
        }
    }
    plan
}

/// Serializes a grid into aligned token streams, one segment per
/// granularity from coarsest to finest.
pub fn encode_sequence(
    grid: &CodeGrid,
    geo: &GrainGeometry,
    vocab: &Vocab,
    pad_to: &[usize],
) -> Result<TokenSequence> {
    let k_g = geo.spec.k_g();
    if pad_to.len() != k_g {
        return Err(Error::Shape {
            op: "encode_sequence",
            lhs: vec![pad_to.len()],
            rhs: vec![k_g],
        });
    }
    let mut content = Vec::new();
    let mut position = Vec::new();
    let mut grain_tag = Vec::new();
    let mut segment_bounds = vec![(0usize, 0usize); k_g];
    for k in (0..k_g).rev() {
        let start = content.len();
        content.push(vocab.sos_c());
        position.push(vocab.sos_p(k));
        for cell in 0..geo.cells(k) {
            let region = geo.cell_region(k, cell);
            if grid.assignments[region] != k {
                continue;
            }
            let code = grid.per_grain[k][cell].ok_or(Error::Coverage {
                detail: "grid cell missing its code".into(),
                regions: vec![region],
            })?;
            content.push(code);
            position.push(cell);
        }
        content.push(vocab.eos_c());
        position.push(vocab.eos_p(k));
        let natural = content.len() - start;
        if pad_to[k] < natural {
            return Err(Error::Length {
                grain: k,
                natural,
                pad_to: pad_to[k],
            });
        }
        content.resize(start + pad_to[k], vocab.pad_c());
        position.resize(start + pad_to[k], vocab.pad_p(k));
        grain_tag.resize(start + pad_to[k], k);
        segment_bounds[k] = (start, start + pad_to[k]);
    }
    TokenSequence::from_parts(content, position, grain_tag, segment_bounds)
}

/// Parses the streams back into a grid, validating the full segment
/// grammar: sos openers, in-vocabulary body tokens, a single eos, trailing
/// pads only, no duplicate cells, regions claimed by exactly one
/// granularity, and complete coverage.
pub fn decode_sequence(
    seq: &TokenSequence,
    geo: &GrainGeometry,
    vocab: &Vocab,
) -> Result<CodeGrid> {
    let k_g = geo.spec.k_g();
    if seq.segment_bounds.len() != k_g {
        return Err(Error::Structure {
            grain: 0,
            detail: format!(
                "sequence has {} segments, geometry has {k_g} granularities",
                seq.segment_bounds.len()
            ),
        });
    }
    let mut per_grain: Vec<Vec<Option<usize>>> = (0..k_g).map(|k| vec![None; geo.cells(k)]).collect();
    // region → granularity that first claimed it
    let mut claimed: Vec<Option<usize>> = vec![None; geo.regions()];
    for k in (0..k_g).rev() {
        let (start, end) = seq.segment_bounds[k];
        let c = &seq.content[start..end];
        let p = &seq.position[start..end];
        if p[0] != vocab.sos_p(k) || (c[0] != vocab.sos_c() && vocab.label_of(c[0]).is_none()) {
            return Err(Error::Structure {
                grain: k,
                detail: "segment must open with sos (or a class label in the content stream)".into(),
            });
        }
        let mut i = 1;
        while i < c.len() && p[i] < vocab.cells(k) {
            let cell = p[i];
            if c[i] >= vocab.k_c() {
                return Err(Error::Structure {
                    grain: k,
                    detail: format!("body slot {i} holds content token {} which is not a code", c[i]),
                });
            }
            if per_grain[k][cell].is_some() {
                return Err(Error::DuplicatePosition {
                    grain: k,
                    position: cell,
                });
            }
            per_grain[k][cell] = Some(c[i]);
            let region = geo.cell_region(k, cell);
            match claimed[region] {
                None => claimed[region] = Some(k),
                Some(first) if first != k => {
                    return Err(Error::RegionConflict {
                        region,
                        first,
                        second: k,
                    })
                }
                Some(_) => {}
            }
            i += 1;
        }
        if i >= c.len() || p[i] != vocab.eos_p(k) || c[i] != vocab.eos_c() {
            return Err(Error::Structure {
                grain: k,
                detail: format!("expected eos in both streams at slot {i}"),
            });
        }
        i += 1;
        while i < c.len() {
            if p[i] != vocab.pad_p(k) || c[i] != vocab.pad_c() {
                return Err(Error::Structure {
                    grain: k,
                    detail: format!("non-pad token after eos at slot {i}"),
                });
            }
            i += 1;
        }
    }
    let mut uncovered = Vec::new();
    let mut partial = Vec::new();
    let mut assignments = vec![0usize; geo.regions()];
    for region in 0..geo.regions() {
        match claimed[region] {
            None => uncovered.push(region),
            Some(k) => {
                assignments[region] = k;
                if geo
                    .region_cells(k, region)
                    .iter()
                    .any(|&cell| per_grain[k][cell].is_none())
                {
                    partial.push(region);
                }
            }
        }
    }
    if !partial.is_empty() {
        return Err(Error::Coverage {
            detail: "regions only partially filled at their granularity".into(),
            regions: partial,
        });
    }
    if !uncovered.is_empty() {
        return Err(Error::Coverage {
            detail: "regions absent from every segment".into(),
            regions: uncovered,
        });
    }
    CodeGrid::new(geo, assignments, per_grain)
}

/// Replaces every segment's content-sos with the class-label token; the
/// position stream is untouched. Overwrites an existing label, so the
/// operation is idempotent for a fixed label.
pub fn make_conditional(
    seq: &TokenSequence,
    label: usize,
    vocab: &Vocab,
) -> Result<TokenSequence> {
    let token = vocab.label(label)?;
    let mut out = seq.clone();
    for &(start, _) in &seq.segment_bounds {
        out.content[start] = token;
    }
    Ok(out)
}

/// Restores content-sos tokens where labels were substituted.
pub fn strip_labels(seq: &TokenSequence, vocab: &Vocab) -> TokenSequence {
    let mut out = seq.clone();
    for &(start, _) in &seq.segment_bounds {
        if vocab.label_of(out.content[start]).is_some() {
            out.content[start] = vocab.sos_c();
        }
    }
    out
}
