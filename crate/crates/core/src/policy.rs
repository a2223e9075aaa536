//! Recurrent token policy with exact log-probabilities and hand-derived
//! gradients.
//!
//! One tanh recurrence over a closed vocabulary: the flow features feed every
//! step, the previous token feeds an embedding, and a linear head produces
//! next-token logits. Everything is plain `Vec<f64>` math so gradients are
//! exact reverse accumulation with no framework in the loop, and identical
//! inputs give bit-identical outputs.
//!
//!   h_0     = tanh(Wf x + b_h)
//!   h_k     = tanh(Wf x + Wr h_{k-1} + E[tok_{k-1}] + b_h)
//!   p(·|h)  = softmax(Wo h + b_o)

use crate::vocab::TokenId;
use rand::Rng;
use std::io::{self, Read, Write};
use std::path::Path;
use thiserror::Error;

/// Uniform init range for all weight matrices.
pub const INIT_RANGE: f64 = 0.08;

const CKPT_MAGIC: &[u8; 8] = b"EGOPOL01";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("feature length mismatch: params expect {expected}, got {got}")]
    FeatureLenMismatch { expected: usize, got: usize },
    #[error("token {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: TokenId, vocab: usize },
    #[error("max_len must be positive")]
    ZeroMaxLen,
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] io::Error),
    #[error("not a policy checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("checkpoint shape mismatch in {0}")]
    ShapeMismatch(&'static str),
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Mat {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn uniform<R: Rng>(rows: usize, cols: usize, range: f64, rng: &mut R) -> Mat {
        let data = (0..rows * cols).map(|_| rng.gen_range(-range..=range)).collect();
        Mat { rows, cols, data }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// out[i] += Σ_j self[i][j] x[j]
    fn matvec_accum(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for i in 0..self.rows {
            let row = self.row(i);
            let mut acc = 0.0;
            for j in 0..self.cols {
                acc += row[j] * x[j];
            }
            out[i] += acc;
        }
    }

    /// out[j] += Σ_i self[i][j] y[i]
    fn add_transpose_vec(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for i in 0..self.rows {
            let yi = y[i];
            if yi == 0.0 {
                continue;
            }
            let row = self.row(i);
            for j in 0..self.cols {
                out[j] += row[j] * yi;
            }
        }
    }

    /// self[i][j] += u[i] v[j]
    fn add_outer(&mut self, u: &[f64], v: &[f64]) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        let cols = self.cols;
        for i in 0..self.rows {
            let ui = u[i];
            if ui == 0.0 {
                continue;
            }
            let row = &mut self.data[i * cols..(i + 1) * cols];
            for j in 0..cols {
                row[j] += ui * v[j];
            }
        }
    }
}

/// All learnable tensors. The same shape doubles as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub hidden: usize,
    pub feature_len: usize,
    pub vocab_size: usize,
    /// hidden x feature_len.
    pub feature_proj: Mat,
    /// vocab x hidden; row t is token t's input embedding.
    pub token_embed: Mat,
    /// hidden x hidden.
    pub recur: Mat,
    /// vocab x hidden output head.
    pub out_proj: Mat,
    pub bias_h: Vec<f64>,
    pub bias_out: Vec<f64>,
}

impl PolicyParams {
    /// Fresh parameters: weights uniform in ±[`INIT_RANGE`], biases zero.
    pub fn init<R: Rng>(hidden: usize, feature_len: usize, vocab_size: usize, rng: &mut R) -> Self {
        PolicyParams {
            hidden,
            feature_len,
            vocab_size,
            feature_proj: Mat::uniform(hidden, feature_len, INIT_RANGE, rng),
            token_embed: Mat::uniform(vocab_size, hidden, INIT_RANGE, rng),
            recur: Mat::uniform(hidden, hidden, INIT_RANGE, rng),
            out_proj: Mat::uniform(vocab_size, hidden, INIT_RANGE, rng),
            bias_h: vec![0.0; hidden],
            bias_out: vec![0.0; vocab_size],
        }
    }

    pub fn zeros_like(&self) -> Self {
        PolicyParams {
            hidden: self.hidden,
            feature_len: self.feature_len,
            vocab_size: self.vocab_size,
            feature_proj: Mat::zeros(self.hidden, self.feature_len),
            token_embed: Mat::zeros(self.vocab_size, self.hidden),
            recur: Mat::zeros(self.hidden, self.hidden),
            out_proj: Mat::zeros(self.vocab_size, self.hidden),
            bias_h: vec![0.0; self.hidden],
            bias_out: vec![0.0; self.vocab_size],
        }
    }

    pub fn shape_matches(&self, other: &Self) -> bool {
        self.hidden == other.hidden
            && self.feature_len == other.feature_len
            && self.vocab_size == other.vocab_size
    }

    pub fn flat(&self) -> impl Iterator<Item = &f64> {
        self.feature_proj
            .data
            .iter()
            .chain(self.token_embed.data.iter())
            .chain(self.recur.data.iter())
            .chain(self.out_proj.data.iter())
            .chain(self.bias_h.iter())
            .chain(self.bias_out.iter())
    }

    pub fn flat_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.feature_proj
            .data
            .iter_mut()
            .chain(self.token_embed.data.iter_mut())
            .chain(self.recur.data.iter_mut())
            .chain(self.out_proj.data.iter_mut())
            .chain(self.bias_h.iter_mut())
            .chain(self.bias_out.iter_mut())
    }

    pub fn num_params(&self) -> usize {
        self.flat().count()
    }

    /// self += c * other, elementwise.
    pub fn scaled_add(&mut self, c: f64, other: &Self) {
        debug_assert!(self.shape_matches(other));
        for (a, b) in self.flat_mut().zip(other.flat()) {
            *a += c * b;
        }
    }

    pub fn scale(&mut self, c: f64) {
        for a in self.flat_mut() {
            *a *= c;
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.flat().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.flat().all(|v| v.is_finite())
    }

    fn check_features(&self, features: &[f64]) -> Result<(), PolicyError> {
        if features.len() != self.feature_len {
            return Err(PolicyError::FeatureLenMismatch {
                expected: self.feature_len,
                got: features.len(),
            });
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<(), PolicyError> {
        for &t in tokens {
            if t as usize >= self.vocab_size {
                return Err(PolicyError::TokenOutOfRange { token: t, vocab: self.vocab_size });
            }
        }
        Ok(())
    }
}

fn tanh_in_place(v: &mut [f64]) {
    for x in v {
        *x = x.tanh();
    }
}

/// h_0 (no token consumed yet).
fn initial_hidden(params: &PolicyParams, features: &[f64]) -> Vec<f64> {
    let mut h = params.bias_h.clone();
    params.feature_proj.matvec_accum(features, &mut h);
    tanh_in_place(&mut h);
    h
}

/// h_{k} from h_{k-1} after consuming `token`.
fn step_hidden(params: &PolicyParams, features: &[f64], prev: &[f64], token: TokenId) -> Vec<f64> {
    let mut h = params.bias_h.clone();
    params.feature_proj.matvec_accum(features, &mut h);
    params.recur.matvec_accum(prev, &mut h);
    for (a, b) in h.iter_mut().zip(params.token_embed.row(token as usize)) {
        *a += b;
    }
    tanh_in_place(&mut h);
    h
}

fn logits_of(params: &PolicyParams, h: &[f64]) -> Vec<f64> {
    let mut z = params.bias_out.clone();
    params.out_proj.matvec_accum(h, &mut z);
    z
}

/// Stable softmax with its log-normalizer: probs and log Σ exp(logits).
pub(crate) fn softmax_parts(logits: &[f64]) -> (Vec<f64>, f64) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    let mut probs: Vec<f64> = logits
        .iter()
        .map(|&z| {
            let e = (z - max).exp();
            sum += e;
            e
        })
        .collect();
    for p in &mut probs {
        *p /= sum;
    }
    (probs, max + sum.ln())
}

/// Hidden states for prefix lengths 0..=consumed.len(); `states[k]` is the
/// state after consuming `consumed[..k]`.
pub(crate) fn hidden_states(
    params: &PolicyParams,
    features: &[f64],
    consumed: &[TokenId],
) -> Vec<Vec<f64>> {
    let mut states = Vec::with_capacity(consumed.len() + 1);
    states.push(initial_hidden(params, features));
    for &tok in consumed {
        let next = step_hidden(params, features, states.last().unwrap(), tok);
        states.push(next);
    }
    states
}

pub(crate) fn position_logits(params: &PolicyParams, state: &[f64]) -> Vec<f64> {
    logits_of(params, state)
}

/// Next-token distribution after the given prefix. Strictly positive,
/// sums to 1.
pub fn next_token_dist(
    params: &PolicyParams,
    features: &[f64],
    prefix: &[TokenId],
) -> Result<Vec<f64>, PolicyError> {
    params.check_features(features)?;
    params.check_tokens(prefix)?;
    let states = hidden_states(params, features, prefix);
    let (probs, _) = softmax_parts(&logits_of(params, states.last().unwrap()));
    Ok(probs)
}

/// Shannon entropy of a distribution, in nats.
pub fn entropy(dist: &[f64]) -> f64 {
    dist.iter().map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 }).sum()
}

/// KL(p ‖ q) over one distribution pair, exact over the full support.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    let mut kl = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            kl += pi * (pi.ln() - qi.ln());
        }
    }
    kl
}

/// One sampled response.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    /// Response tokens; ends with eos unless truncated at max_len.
    pub tokens: Vec<TokenId>,
    /// Exact logprob of each emitted token under the sampling params.
    pub per_token_logprob: Vec<f64>,
    pub total_logprob: f64,
    pub truncated: bool,
}

pub(crate) struct SampleInfo {
    pub rollout: Rollout,
    /// Σ over emitted positions of the distribution entropy.
    pub entropy_sum: f64,
    pub positions: usize,
}

pub(crate) fn sample_rollout_info<R: Rng>(
    params: &PolicyParams,
    features: &[f64],
    question: &[TokenId],
    eos: TokenId,
    max_len: usize,
    rng: &mut R,
) -> Result<SampleInfo, PolicyError> {
    params.check_features(features)?;
    params.check_tokens(question)?;
    if max_len == 0 {
        return Err(PolicyError::ZeroMaxLen);
    }
    let mut h = initial_hidden(params, features);
    for &tok in question {
        h = step_hidden(params, features, &h, tok);
    }
    let mut tokens = Vec::new();
    let mut per_token_logprob = Vec::new();
    let mut entropy_sum = 0.0;
    let mut truncated = true;
    for _ in 0..max_len {
        let (probs, _) = softmax_parts(&logits_of(params, &h));
        entropy_sum += entropy(&probs);
        let tok = sample_index(&probs, rng.gen::<f64>());
        tokens.push(tok as TokenId);
        per_token_logprob.push(probs[tok].ln());
        if tok as TokenId == eos {
            truncated = false;
            break;
        }
        h = step_hidden(params, features, &h, tok as TokenId);
    }
    let total_logprob = per_token_logprob.iter().sum();
    let positions = tokens.len();
    Ok(SampleInfo {
        rollout: Rollout { tokens, per_token_logprob, total_logprob, truncated },
        entropy_sum,
        positions,
    })
}

/// Inverse-CDF draw; `u` uniform in [0, 1).
fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Ancestral sampling until eos or `max_len` tokens (then `truncated`).
pub fn sample_rollout<R: Rng>(
    params: &PolicyParams,
    features: &[f64],
    question: &[TokenId],
    eos: TokenId,
    max_len: usize,
    rng: &mut R,
) -> Result<Rollout, PolicyError> {
    Ok(sample_rollout_info(params, features, question, eos, max_len, rng)?.rollout)
}

/// Exact logprob of `tokens` given the features and a context prefix.
/// Zero-length `tokens` scores 0.
pub fn sequence_logprob(
    params: &PolicyParams,
    features: &[f64],
    context: &[TokenId],
    tokens: &[TokenId],
) -> Result<f64, PolicyError> {
    params.check_features(features)?;
    params.check_tokens(context)?;
    params.check_tokens(tokens)?;
    if tokens.is_empty() {
        return Ok(0.0);
    }
    let mut all = Vec::with_capacity(context.len() + tokens.len());
    all.extend_from_slice(context);
    all.extend_from_slice(tokens);
    let states = hidden_states(params, features, &all[..all.len() - 1]);
    let mut lp = 0.0;
    for (offset, &tok) in tokens.iter().enumerate() {
        let pos = context.len() + offset;
        let logits = logits_of(params, &states[pos]);
        let (_, lse) = softmax_parts(&logits);
        lp += logits[tok as usize] - lse;
    }
    Ok(lp)
}

/// Reverse accumulation through the recurrence for any per-position logit
/// gradients. `states` must come from `hidden_states(params, features,
/// consumed)`; each `(pos, dz)` adds `dz` as dLoss/dlogits at state `pos`.
pub(crate) fn backward(
    params: &PolicyParams,
    features: &[f64],
    consumed: &[TokenId],
    states: &[Vec<f64>],
    dz_at: &[(usize, Vec<f64>)],
) -> PolicyParams {
    debug_assert_eq!(states.len(), consumed.len() + 1);
    let mut grad = params.zeros_like();
    let mut dh: Vec<Vec<f64>> = vec![vec![0.0; params.hidden]; states.len()];
    for (pos, dz) in dz_at {
        grad.out_proj.add_outer(dz, &states[*pos]);
        for (a, b) in grad.bias_out.iter_mut().zip(dz) {
            *a += b;
        }
        params.out_proj.add_transpose_vec(dz, &mut dh[*pos]);
    }
    for k in (0..states.len()).rev() {
        // d(pre-activation) = dh ⊙ (1 - h²)
        let da: Vec<f64> =
            dh[k].iter().zip(&states[k]).map(|(&g, &h)| g * (1.0 - h * h)).collect();
        if da.iter().all(|&v| v == 0.0) {
            continue;
        }
        grad.feature_proj.add_outer(&da, features);
        for (a, b) in grad.bias_h.iter_mut().zip(&da) {
            *a += b;
        }
        if k > 0 {
            let tok = consumed[k - 1] as usize;
            for (a, b) in grad.token_embed.row_mut(tok).iter_mut().zip(&da) {
                *a += b;
            }
            grad.recur.add_outer(&da, &states[k - 1]);
            params.recur.add_transpose_vec(&da, &mut dh[k - 1]);
        }
    }
    grad
}

/// Value and exact gradient of [`sequence_logprob`] in one pass.
pub fn grad_sequence_logprob(
    params: &PolicyParams,
    features: &[f64],
    context: &[TokenId],
    tokens: &[TokenId],
) -> Result<(f64, PolicyParams), PolicyError> {
    params.check_features(features)?;
    params.check_tokens(context)?;
    params.check_tokens(tokens)?;
    if tokens.is_empty() {
        return Ok((0.0, params.zeros_like()));
    }
    let mut all = Vec::with_capacity(context.len() + tokens.len());
    all.extend_from_slice(context);
    all.extend_from_slice(tokens);
    let consumed = &all[..all.len() - 1];
    let states = hidden_states(params, features, consumed);
    let mut lp = 0.0;
    let mut dz_at = Vec::with_capacity(tokens.len());
    for (offset, &tok) in tokens.iter().enumerate() {
        let pos = context.len() + offset;
        let logits = logits_of(params, &states[pos]);
        let (probs, lse) = softmax_parts(&logits);
        lp += logits[tok as usize] - lse;
        // d logprob / d logits = onehot(tok) - p
        let mut dz: Vec<f64> = probs.iter().map(|&p| -p).collect();
        dz[tok as usize] += 1.0;
        dz_at.push((pos, dz));
    }
    Ok((lp, backward(params, features, consumed, &states, &dz_at)))
}

/// Mean exact KL(π_params ‖ π_ref) over the prediction positions of
/// `context` (prefix lengths 0..len-1). Empty context gives 0.
pub fn kl_to_reference(
    params: &PolicyParams,
    ref_params: &PolicyParams,
    features: &[f64],
    context: &[TokenId],
) -> Result<f64, PolicyError> {
    params.check_features(features)?;
    params.check_tokens(context)?;
    if context.is_empty() {
        return Ok(0.0);
    }
    let consumed = &context[..context.len() - 1];
    let states = hidden_states(params, features, consumed);
    let ref_states = hidden_states(ref_params, features, consumed);
    let mut kl_sum = 0.0;
    for k in 0..context.len() {
        let (p, _) = softmax_parts(&logits_of(params, &states[k]));
        let (q, _) = softmax_parts(&logits_of(ref_params, &ref_states[k]));
        kl_sum += kl_divergence(&p, &q);
    }
    Ok(kl_sum / context.len() as f64)
}

fn write_mat<W: Write>(w: &mut W, m: &Mat) -> io::Result<()> {
    w.write_all(&(m.rows as u32).to_le_bytes())?;
    w.write_all(&(m.cols as u32).to_le_bytes())?;
    for &v in &m.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_mat<R: Read>(r: &mut R, name: &'static str) -> Result<Mat, CheckpointError> {
    let rows = read_u32(r)? as usize;
    let cols = read_u32(r)? as usize;
    let mut data = vec![0.0; rows * cols];
    let mut buf = [0u8; 8];
    for v in &mut data {
        r.read_exact(&mut buf)?;
        *v = f64::from_le_bytes(buf);
    }
    if rows.checked_mul(cols).is_none() {
        return Err(CheckpointError::ShapeMismatch(name));
    }
    Ok(Mat { rows, cols, data })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn write_vec<W: Write>(w: &mut W, v: &[f64]) -> io::Result<()> {
    w.write_all(&(v.len() as u32).to_le_bytes())?;
    for &x in v {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_vec<R: Read>(r: &mut R) -> Result<Vec<f64>, CheckpointError> {
    let len = read_u32(r)? as usize;
    let mut out = vec![0.0; len];
    let mut buf = [0u8; 8];
    for v in &mut out {
        r.read_exact(&mut buf)?;
        *v = f64::from_le_bytes(buf);
    }
    Ok(out)
}

/// Byte-stable little-endian checkpoint.
pub fn save_checkpoint(params: &PolicyParams, path: &Path) -> Result<(), CheckpointError> {
    let file = std::fs::File::create(path)?;
    let mut w = io::BufWriter::new(file);
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&CKPT_VERSION.to_le_bytes())?;
    for dim in [params.hidden, params.feature_len, params.vocab_size] {
        w.write_all(&(dim as u32).to_le_bytes())?;
    }
    write_mat(&mut w, &params.feature_proj)?;
    write_mat(&mut w, &params.token_embed)?;
    write_mat(&mut w, &params.recur)?;
    write_mat(&mut w, &params.out_proj)?;
    write_vec(&mut w, &params.bias_h)?;
    write_vec(&mut w, &params.bias_out)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<PolicyParams, CheckpointError> {
    let file = std::fs::File::open(path)?;
    let mut r = io::BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != CKPT_VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let hidden = read_u32(&mut r)? as usize;
    let feature_len = read_u32(&mut r)? as usize;
    let vocab_size = read_u32(&mut r)? as usize;
    let feature_proj = read_mat(&mut r, "feature_proj")?;
    let token_embed = read_mat(&mut r, "token_embed")?;
    let recur = read_mat(&mut r, "recur")?;
    let out_proj = read_mat(&mut r, "out_proj")?;
    let bias_h = read_vec(&mut r)?;
    let bias_out = read_vec(&mut r)?;
    let params = PolicyParams {
        hidden,
        feature_len,
        vocab_size,
        feature_proj,
        token_embed,
        recur,
        out_proj,
        bias_h,
        bias_out,
    };
    for (ok, name) in [
        (params.feature_proj.rows == hidden && params.feature_proj.cols == feature_len, "feature_proj"),
        (params.token_embed.rows == vocab_size && params.token_embed.cols == hidden, "token_embed"),
        (params.recur.rows == hidden && params.recur.cols == hidden, "recur"),
        (params.out_proj.rows == vocab_size && params.out_proj.cols == hidden, "out_proj"),
        (params.bias_h.len() == hidden, "bias_h"),
        (params.bias_out.len() == vocab_size, "bias_out"),
    ] {
        if !ok {
            return Err(CheckpointError::ShapeMismatch(name));
        }
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny(seed: u64) -> (PolicyParams, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = PolicyParams::init(6, 4, 9, &mut rng);
        let features: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        (params, features)
    }

    #[test]
    fn init_respects_range_and_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = PolicyParams::init(8, 3, 7, &mut rng);
        for (w, total) in [(&a.feature_proj, 24), (&a.token_embed, 56), (&a.recur, 64), (&a.out_proj, 56)]
        {
            assert_eq!(w.data.len(), total);
            assert!(w.data.iter().all(|v| v.abs() <= INIT_RANGE));
        }
        assert!(a.bias_h.iter().chain(&a.bias_out).all(|&v| v == 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = PolicyParams::init(8, 3, 7, &mut rng);
        assert_eq!(a, b);
        assert_eq!(a.num_params(), 24 + 56 + 64 + 56 + 8 + 7);
    }

    #[test]
    fn dist_is_a_distribution() {
        let (params, features) = tiny(1);
        let d = next_token_dist(&params, &features, &[0, 3, 5]).unwrap();
        assert_eq!(d.len(), 9);
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(d.iter().all(|&p| p > 0.0));
    }

    #[test]
    fn dist_input_validation() {
        let (params, features) = tiny(2);
        assert!(matches!(
            next_token_dist(&params, &features[..2], &[]),
            Err(PolicyError::FeatureLenMismatch { expected: 4, got: 2 })
        ));
        assert!(matches!(
            next_token_dist(&params, &features, &[42]),
            Err(PolicyError::TokenOutOfRange { token: 42, vocab: 9 })
        ));
    }

    #[test]
    fn logit_shift_leaves_dist_unchanged() {
        let (params, features) = tiny(3);
        let base = next_token_dist(&params, &features, &[1]).unwrap();
        let mut shifted = params.clone();
        for b in &mut shifted.bias_out {
            *b += 3.7;
        }
        let moved = next_token_dist(&shifted, &features, &[1]).unwrap();
        for (a, b) in base.iter().zip(&moved) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let (params, features) = tiny(4);
        let mut r1 = ChaCha8Rng::seed_from_u64(77);
        let mut r2 = ChaCha8Rng::seed_from_u64(77);
        let a = sample_rollout(&params, &features, &[2], 0, 24, &mut r1).unwrap();
        let b = sample_rollout(&params, &features, &[2], 0, 24, &mut r2).unwrap();
        assert_eq!(a, b);
        let mut r3 = ChaCha8Rng::seed_from_u64(78);
        let c = sample_rollout(&params, &features, &[2], 0, 200, &mut r3).unwrap();
        assert!(a.tokens != c.tokens || a.per_token_logprob != c.per_token_logprob);
    }

    #[test]
    fn rollout_bookkeeping_holds() {
        let (params, features) = tiny(5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let r = sample_rollout(&params, &features, &[1, 2], 0, 12, &mut rng).unwrap();
            assert_eq!(r.tokens.len(), r.per_token_logprob.len());
            assert!(r.tokens.len() <= 12);
            assert!((r.total_logprob - r.per_token_logprob.iter().sum::<f64>()).abs() < 1e-9);
            assert!(r.per_token_logprob.iter().all(|&lp| lp <= 0.0));
            if r.truncated {
                assert_eq!(r.tokens.len(), 12);
            } else {
                assert_eq!(*r.tokens.last().unwrap(), 0);
            }
        }
    }

    #[test]
    fn degenerate_logit_forces_repetition() {
        let (mut params, features) = tiny(6);
        // Slam one non-eos logit: softmax saturates to a point mass.
        params.bias_out[4] = 1e6;
        let d = next_token_dist(&params, &features, &[]).unwrap();
        assert_eq!(d[4], 1.0);
        assert!(d.iter().enumerate().all(|(i, &p)| i == 4 || p == 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = sample_rollout(&params, &features, &[], 0, 10, &mut rng).unwrap();
        assert!(r.truncated);
        assert_eq!(r.tokens, vec![4; 10]);
        // A single forced token scores logprob ≈ 0.
        let lp = sequence_logprob(&params, &features, &[], &[4]).unwrap();
        assert!(lp.abs() < 1e-12);
    }

    #[test]
    fn sequence_logprob_matches_sampled_rollout() {
        let (params, features) = tiny(7);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let r = sample_rollout(&params, &features, &[3, 1], 0, 16, &mut rng).unwrap();
            let lp = sequence_logprob(&params, &features, &[3, 1], &r.tokens).unwrap();
            assert!((lp - r.total_logprob).abs() < 1e-9, "{lp} vs {}", r.total_logprob);
        }
    }

    #[test]
    fn sequence_logprob_is_additive_over_splits() {
        let (params, features) = tiny(8);
        let tokens = [1u32, 4, 2, 8, 0];
        let whole = sequence_logprob(&params, &features, &[5], &tokens).unwrap();
        let head = sequence_logprob(&params, &features, &[5], &tokens[..2]).unwrap();
        let tail = sequence_logprob(&params, &features, &[5, 1, 4], &tokens[2..]).unwrap();
        assert!((whole - (head + tail)).abs() < 1e-12);
        assert_eq!(sequence_logprob(&params, &features, &[5], &[]).unwrap(), 0.0);
    }

    #[test]
    fn empty_continuation_has_zero_gradient() {
        let (params, features) = tiny(9);
        let (lp, g) = grad_sequence_logprob(&params, &features, &[1, 2], &[]).unwrap();
        assert_eq!(lp, 0.0);
        assert!(g.flat().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (params, features) = tiny(10);
        let ctx = [2u32, 7];
        let toks = [1u32, 5, 0];
        let (_, grad) = grad_sequence_logprob(&params, &features, &ctx, &toks).unwrap();
        let eps = 1e-5;
        let mut probe = params.clone();
        let n = params.num_params();
        for i in 0..n {
            let orig = *probe.flat().nth(i).unwrap();
            *probe.flat_mut().nth(i).unwrap() = orig + eps;
            let hi = sequence_logprob(&probe, &features, &ctx, &toks).unwrap();
            *probe.flat_mut().nth(i).unwrap() = orig - eps;
            let lo = sequence_logprob(&probe, &features, &ctx, &toks).unwrap();
            *probe.flat_mut().nth(i).unwrap() = orig;
            let fd = (hi - lo) / (2.0 * eps);
            let g = *grad.flat().nth(i).unwrap();
            let denom = g.abs().max(fd.abs()).max(1e-6);
            assert!(
                ((g - fd) / denom).abs() < 1e-4,
                "param {i}: analytic {g} vs fd {fd}"
            );
        }
    }

    #[test]
    fn sampled_frequencies_match_dist() {
        let (params, features) = tiny(11);
        let d = next_token_dist(&params, &features, &[3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let n = 50_000;
        let mut counts = vec![0usize; d.len()];
        for _ in 0..n {
            // Sample only the first token of a fresh rollout.
            let r = sample_rollout(&params, &features, &[3], 0, 1, &mut rng).unwrap();
            counts[r.tokens[0] as usize] += 1;
        }
        for (i, &p) in d.iter().enumerate() {
            let freq = counts[i] as f64 / n as f64;
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!(
                (freq - p).abs() <= 3.0 * se + 1e-9,
                "token {i}: freq {freq} vs p {p} (se {se})"
            );
        }
    }

    #[test]
    fn kl_hand_value_and_axioms() {
        let p = [0.7, 0.2, 0.1];
        let q = [0.1, 0.2, 0.7];
        let expected = 0.7 * 7f64.ln() + 0.1 * (1.0 / 7f64).ln();
        assert!((kl_divergence(&p, &q) - expected).abs() < 1e-12);
        assert!((expected - 1.16750).abs() < 1e-4);
        assert_eq!(kl_divergence(&p, &p), 0.0);
    }

    #[test]
    fn kl_to_reference_zero_for_identical_params() {
        let (params, features) = tiny(12);
        let kl = kl_to_reference(&params, &params.clone(), &features, &[1, 2, 3]).unwrap();
        assert_eq!(kl, 0.0);
        assert_eq!(kl_to_reference(&params, &params, &features, &[]).unwrap(), 0.0);
    }

    #[test]
    fn kl_to_reference_nonnegative_over_random_pairs() {
        for seed in 0..1000u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = PolicyParams::init(4, 3, 6, &mut rng);
            let q = PolicyParams::init(4, 3, 6, &mut rng);
            let features: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let ctx: Vec<TokenId> = (0..4).map(|_| rng.gen_range(0..6)).collect();
            let kl = kl_to_reference(&p, &q, &features, &ctx).unwrap();
            assert!(kl >= -1e-12, "seed {seed}: {kl}");
        }
    }

    #[test]
    fn checkpoint_round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        let (params, _) = tiny(13);
        save_checkpoint(&params, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(params, loaded);
        // Same bytes when saved again.
        let path2 = dir.path().join("p2.ckpt");
        save_checkpoint(&loaded, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"definitely not a checkpoint").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::BadMagic)));
        let (params, _) = tiny(14);
        let good = dir.path().join("good.ckpt");
        save_checkpoint(&params, &good).unwrap();
        let mut bytes = std::fs::read(&good).unwrap();
        bytes.truncate(bytes.len() - 9);
        std::fs::write(&good, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&good), Err(CheckpointError::Io(_))));
    }

    proptest! {
        #[test]
        fn dist_always_normalized(
            seed in 0u64..200,
            prefix in prop::collection::vec(0u32..9, 0..6),
        ) {
            let (params, features) = tiny(seed);
            let d = next_token_dist(&params, &features, &prefix).unwrap();
            prop_assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(d.iter().all(|&p| p >= 0.0));
        }

        #[test]
        fn entropy_nonnegative_and_bounded(seed in 0u64..200) {
            let (params, features) = tiny(seed);
            let d = next_token_dist(&params, &features, &[1]).unwrap();
            let h = entropy(&d);
            prop_assert!(h >= 0.0);
            prop_assert!(h <= (d.len() as f64).ln() + 1e-12);
        }
    }
}
