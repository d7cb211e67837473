//! Batched coarse-to-fine generation: position and content streams sampled
//! segment by segment, with repeat masking, eos-to-pad forcing, and region
//! coverage enforcement so every sample decodes into a valid grid.
//!
//! Coverage enforcement goes beyond plain repeat masking: cells of regions
//! already covered by a coarser segment are banned, eos is banned while any
//! region is partially filled, and in the final segment eos stays banned
//! until every region is covered. Without these rules an autoregressive
//! model can emit sequences whose codes do not tile the image.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grain::GrainGeometry;
use crate::prior::Prior;
use crate::scalar::Scalar;
use crate::sequence::{decode_sequence, TokenSequence, Vocab};
use crate::stage1::CodeGrid;

/// Next-token interface the sampler drives. Logits are plain `f64` host
/// vectors; the prefix is the full generated stream so far.
pub trait SamplingModel {
    /// Logits over `target_grain`'s position vocabulary.
    fn next_position_logits(
        &self,
        content: &[usize],
        position: &[usize],
        grains: &[usize],
        target_grain: usize,
    ) -> Result<Vec<f64>>;

    /// Logits over the content vocabulary, conditioned on the position
    /// just chosen for the upcoming slot.
    fn next_content_logits(
        &self,
        content: &[usize],
        position: &[usize],
        grains: &[usize],
        target_grain: usize,
        next_pos: usize,
    ) -> Result<Vec<f64>>;
}

impl<S: Scalar> SamplingModel for Prior<S> {
    fn next_position_logits(
        &self,
        content: &[usize],
        position: &[usize],
        grains: &[usize],
        target_grain: usize,
    ) -> Result<Vec<f64>> {
        Prior::next_position_logits(self, content, position, grains, target_grain)
    }

    fn next_content_logits(
        &self,
        content: &[usize],
        position: &[usize],
        grains: &[usize],
        target_grain: usize,
        next_pos: usize,
    ) -> Result<Vec<f64>> {
        Prior::next_content_logits(self, content, position, grains, target_grain, next_pos)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSettings {
    /// 0 means greedy argmax.
    pub temperature: f64,
    /// 0 means no top-k cut.
    pub top_k: usize,
    /// 1.0 means no nucleus cut.
    pub top_p: f64,
}

impl Default for SampleSettings {
    fn default() -> Self {
        SampleSettings {
            temperature: 1.0,
            top_k: 0,
            top_p: 1.0,
        }
    }
}

impl SampleSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0) {
            return Err(Error::Config(format!(
                "temperature must be ≥ 0, got {}",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config(format!(
                "top_p must lie in (0, 1], got {}",
                self.top_p
            )));
        }
        Ok(())
    }
}

/// Temperature, top-k, and nucleus filtering over masked logits. Returns a
/// probability vector in which banned entries are exactly zero. Nucleus
/// mass is measured on the pre-cut softmax, and the entry that crosses
/// `top_p` is kept.
pub fn filter_logits(logits: &[f64], allowed: &[bool], set: &SampleSettings) -> Result<Vec<f64>> {
    set.validate()?;
    if logits.len() != allowed.len() {
        return Err(Error::Shape {
            op: "filter_logits",
            lhs: vec![logits.len()],
            rhs: vec![allowed.len()],
        });
    }
    let live: Vec<usize> = (0..logits.len()).filter(|&i| allowed[i]).collect();
    if live.is_empty() {
        return Err(Error::Deadlock(
            "every entry of the sampling distribution is masked".into(),
        ));
    }
    let mut out = vec![0.0; logits.len()];
    if set.temperature == 0.0 {
        let best = *live
            .iter()
            .reduce(|a, b| if logits[*b] > logits[*a] { b } else { a })
            .unwrap();
        out[best] = 1.0;
        return Ok(out);
    }
    let mx = live.iter().map(|&i| logits[i] / set.temperature).fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<(usize, f64)> = live
        .iter()
        .map(|&i| (i, (logits[i] / set.temperature - mx).exp()))
        .collect();
    let z: f64 = probs.iter().map(|(_, e)| e).sum();
    for p in &mut probs {
        p.1 /= z;
    }
    probs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    if set.top_k > 0 {
        probs.truncate(set.top_k);
    }
    if set.top_p < 1.0 {
        let mut cum = 0.0;
        let mut keep = probs.len();
        for (rank, (_, p)) in probs.iter().enumerate() {
            cum += p;
            if cum >= set.top_p {
                keep = rank + 1;
                break;
            }
        }
        probs.truncate(keep);
    }
    let z: f64 = probs.iter().map(|(_, p)| p).sum();
    for (i, p) in probs {
        out[i] = p / z;
    }
    Ok(out)
}

/// Allowed-position mask for grain k's vocabulary given the segment state:
/// `used` marks cells already emitted this segment, `opened` counts emitted
/// cells per region, `covered` is the grain that fully owns each region
/// from earlier segments. sos and pad are never sampled.
pub fn region_mask(
    geo: &GrainGeometry,
    vocab: &Vocab,
    k: usize,
    used: &[bool],
    opened: &[usize],
    covered: &[Option<usize>],
) -> Vec<bool> {
    let cells = geo.cells(k);
    let per_region = geo.spec.codes_per_region(k);
    let mut mask = vec![false; vocab.position_size(k)];
    for cell in 0..cells {
        let region = geo.cell_region(k, cell);
        mask[cell] = !used[cell] && covered[region].is_none();
    }
    let any_partial = opened.iter().any(|&n| n > 0 && n < per_region);
    let complete = (0..geo.regions()).all(|r| covered[r].is_some() || opened[r] == per_region);
    mask[vocab.eos_p(k)] = !any_partial && (k != 0 || complete);
    mask
}

fn draw(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut cum = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            cum += p;
            last = i;
            if u < cum {
                return i;
            }
        }
    }
    last
}

pub struct SampleOut {
    pub grids: Vec<CodeGrid>,
    pub sequences: Vec<TokenSequence>,
}

/// Generates a batch in lockstep: one segment per granularity, coarse to
/// fine; within a segment all elements advance one slot per round, with
/// finished elements receiving pads, so segment bounds align across the
/// batch. `cond` supplies one class label per element and replaces the
/// content-sos of every segment.
pub fn sample_batch<M: SamplingModel>(
    model: &M,
    geo: &GrainGeometry,
    vocab: &Vocab,
    b: usize,
    cond: Option<&[usize]>,
    settings: &SampleSettings,
    rng: &mut ChaCha8Rng,
) -> Result<SampleOut> {
    settings.validate()?;
    if b == 0 {
        return Err(Error::Config("batch must hold at least one element".into()));
    }
    let sos_content: Vec<usize> = match cond {
        None => vec![vocab.sos_c(); b],
        Some(labels) => {
            if labels.len() != b {
                return Err(Error::Shape {
                    op: "sample_batch labels",
                    lhs: vec![labels.len()],
                    rhs: vec![b],
                });
            }
            labels
                .iter()
                .map(|&l| vocab.label(l))
                .collect::<Result<Vec<_>>>()?
        }
    };
    let k_g = geo.spec.k_g();
    let mut content: Vec<Vec<usize>> = vec![Vec::new(); b];
    let mut position: Vec<Vec<usize>> = vec![Vec::new(); b];
    let mut grains: Vec<Vec<usize>> = vec![Vec::new(); b];
    let mut covered: Vec<Vec<Option<usize>>> = vec![vec![None; geo.regions()]; b];
    let mut bounds = vec![(0usize, 0usize); k_g];
    let content_mask: Vec<bool> = (0..vocab.content_size()).map(|t| t < vocab.k_c()).collect();

    for k in (0..k_g).rev() {
        let start = content[0].len();
        for e in 0..b {
            content[e].push(sos_content[e]);
            position[e].push(vocab.sos_p(k));
            grains[e].push(k);
        }
        let mut used: Vec<Vec<bool>> = vec![vec![false; geo.cells(k)]; b];
        let mut opened: Vec<Vec<usize>> = vec![vec![0; geo.regions()]; b];
        let mut eos = vec![false; b];
        let mut rounds = 0usize;
        while eos.iter().any(|&done| !done) {
            rounds += 1;
            if rounds > geo.cells(k) + 2 {
                return Err(Error::Deadlock(format!(
                    "segment of grain {k} still open after {rounds} rounds; \
                     eos flags {eos:?}, coverage {covered:?}"
                )));
            }
            for e in 0..b {
                if eos[e] {
                    content[e].push(vocab.pad_c());
                    position[e].push(vocab.pad_p(k));
                    grains[e].push(k);
                    continue;
                }
                let mask = region_mask(geo, vocab, k, &used[e], &opened[e], &covered[e]);
                let logits =
                    model.next_position_logits(&content[e], &position[e], &grains[e], k)?;
                let probs = filter_logits(&logits, &mask, settings)?;
                let pos = draw(&probs, rng);
                if pos == vocab.eos_p(k) {
                    eos[e] = true;
                    content[e].push(vocab.eos_c());
                    position[e].push(vocab.eos_p(k));
                    grains[e].push(k);
                    continue;
                }
                used[e][pos] = true;
                opened[e][geo.cell_region(k, pos)] += 1;
                let logits = model.next_content_logits(
                    &content[e],
                    &position[e],
                    &grains[e],
                    k,
                    pos,
                )?;
                let probs = filter_logits(&logits, &content_mask, settings)?;
                let code = draw(&probs, rng);
                content[e].push(code);
                position[e].push(pos);
                grains[e].push(k);
            }
        }
        for e in 0..b {
            for region in 0..geo.regions() {
                if opened[e][region] == geo.spec.codes_per_region(k) {
                    covered[e][region] = Some(k);
                }
            }
        }
        bounds[k] = (start, content[0].len());
    }

    let mut grids = Vec::with_capacity(b);
    let mut sequences = Vec::with_capacity(b);
    for e in 0..b {
        let seq = TokenSequence::from_parts(
            content[e].clone(),
            position[e].clone(),
            grains[e].clone(),
            bounds.clone(),
        )?;
        let stripped = crate::sequence::strip_labels(&seq, vocab);
        grids.push(decode_sequence(&stripped, geo, vocab)?);
        sequences.push(seq);
    }
    Ok(SampleOut { grids, sequences })
}
