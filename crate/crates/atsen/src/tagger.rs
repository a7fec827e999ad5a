//! A small differentiable token classifier with exact manual gradients.
//!
//! Architecture: embedding lookup over a 3-token window (previous, current,
//! next; zeros past the sentence boundary) -> tanh hidden layer -> linear
//! tag head. The hidden activations are the shared features `Z`; the
//! parameters are a flat vector partitioned into named fragments, grouped
//! into one unit per network layer, which is what the ensemble updates
//! operate on.
//!
//! Everything here is pure 64-bit arithmetic so finite-difference checks are
//! meaningful at tight tolerances.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::Mat;

/// Shape and initialization parameters of the classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaggerConfig {
    pub token_vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub tag_count: usize,
    pub init_seed: u64,
    pub init_scale: f64,
}

/// Context window width of the hidden layer's input (previous, current,
/// next token embeddings).
pub const WINDOW: usize = 3;

impl TaggerConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("token_vocab_size", self.token_vocab_size),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("tag_count", self.tag_count),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be >= 1"));
            }
        }
        if !(self.init_scale >= 0.0) {
            return Err(Error::config("init_scale", "must be >= 0"));
        }
        Ok(())
    }

    /// Fragment layout `(name, unit, length)` in canonical order.
    pub fn fragment_layout(&self) -> Vec<(&'static str, &'static str, usize)> {
        let (v, e, h, k) = (
            self.token_vocab_size,
            self.embed_dim,
            self.hidden_dim,
            self.tag_count,
        );
        vec![
            ("embed.weight", "embed", v * e),
            ("hidden.weight", "hidden", h * WINDOW * e),
            ("hidden.bias", "hidden", h),
            ("head.weight", "head", k * h),
            ("head.bias", "head", k),
        ]
    }
}

/// One named slice of the parameter vector. `unit` groups the fragments of a
/// network layer together for the ensemble updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fragment {
    pub name: String,
    pub unit: String,
    pub values: Vec<f64>,
}

/// The full parameter vector, partitioned into disjoint named fragments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    fragments: Vec<Fragment>,
}

impl ParamSet {
    pub fn from_fragments(fragments: Vec<Fragment>) -> Result<Self> {
        let mut names = std::collections::HashSet::new();
        for f in &fragments {
            if !names.insert(f.name.clone()) {
                return Err(Error::Shape(format!("duplicate fragment name {:?}", f.name)));
            }
        }
        Ok(ParamSet { fragments })
    }

    /// All-zero parameters in the layout of `config`.
    pub fn zeros_like_config(config: &TaggerConfig) -> Self {
        ParamSet {
            fragments: config
                .fragment_layout()
                .into_iter()
                .map(|(name, unit, len)| Fragment {
                    name: name.to_string(),
                    unit: unit.to_string(),
                    values: vec![0.0; len],
                })
                .collect(),
        }
    }

    pub fn fragments(&self) -> &[Fragment] {
        &self.fragments
    }

    pub fn fragment(&self, name: &str) -> Option<&Fragment> {
        self.fragments.iter().find(|f| f.name == name)
    }

    pub fn fragment_mut(&mut self, name: &str) -> Option<&mut Fragment> {
        self.fragments.iter_mut().find(|f| f.name == name)
    }

    /// Unit names in first-appearance order.
    pub fn units(&self) -> Vec<&str> {
        let mut units: Vec<&str> = Vec::new();
        for f in &self.fragments {
            if units.last() != Some(&f.unit.as_str()) && !units.contains(&f.unit.as_str()) {
                units.push(&f.unit);
            }
        }
        units
    }

    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.fragments.len() == other.fragments.len()
            && self
                .fragments
                .iter()
                .zip(&other.fragments)
                .all(|(a, b)| a.name == b.name && a.unit == b.unit && a.values.len() == b.values.len())
    }

    pub fn total_len(&self) -> usize {
        self.fragments.iter().map(|f| f.values.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_len());
        for f in &self.fragments {
            out.extend_from_slice(&f.values);
        }
        out
    }

    /// Rebuilds a ParamSet with this one's layout from a flat vector.
    pub fn from_flat_like(&self, flat: &[f64]) -> Result<ParamSet> {
        if flat.len() != self.total_len() {
            return Err(Error::Shape(format!(
                "flat vector has {} values, layout needs {}",
                flat.len(),
                self.total_len()
            )));
        }
        let mut fragments = Vec::with_capacity(self.fragments.len());
        let mut offset = 0;
        for f in &self.fragments {
            let len = f.values.len();
            fragments.push(Fragment {
                name: f.name.clone(),
                unit: f.unit.clone(),
                values: flat[offset..offset + len].to_vec(),
            });
            offset += len;
        }
        Ok(ParamSet { fragments })
    }

    /// Zero-valued ParamSet with this one's layout (gradient accumulator).
    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            fragments: self
                .fragments
                .iter()
                .map(|f| Fragment {
                    name: f.name.clone(),
                    unit: f.unit.clone(),
                    values: vec![0.0; f.values.len()],
                })
                .collect(),
        }
    }

    /// In-place axpy over every parameter: `self += scale * other`.
    pub fn add_scaled(&mut self, other: &ParamSet, scale: f64) -> Result<()> {
        if !self.same_layout(other) {
            return Err(Error::Shape("parameter layouts differ".into()));
        }
        for (a, b) in self.fragments.iter_mut().zip(&other.fragments) {
            for (x, y) in a.values.iter_mut().zip(&b.values) {
                *x += scale * y;
            }
        }
        Ok(())
    }

    /// Writes the binary serialization: a header carrying the tagger config
    /// for shape validation, then each fragment as name, unit, length and
    /// raw little-endian 64-bit values.
    pub fn write_to<W: Write>(&self, config: &TaggerConfig, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        for v in [
            config.token_vocab_size as u64,
            config.embed_dim as u64,
            config.hidden_dim as u64,
            config.tag_count as u64,
            config.init_seed,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&config.init_scale.to_le_bytes())?;
        w.write_all(&(self.fragments.len() as u64).to_le_bytes())?;
        for f in &self.fragments {
            for s in [&f.name, &f.unit] {
                w.write_all(&(s.len() as u64).to_le_bytes())?;
                w.write_all(s.as_bytes())?;
            }
            w.write_all(&(f.values.len() as u64).to_le_bytes())?;
            for v in &f.values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Reads the binary serialization and validates the fragment layout
    /// against the header's config.
    pub fn read_from<R: Read>(r: &mut R) -> Result<(TaggerConfig, ParamSet)> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Schema("not a parameter file (bad magic)".into()));
        }
        let mut u64buf = [0u8; 8];
        let mut read_u64 = |r: &mut R| -> Result<u64> {
            r.read_exact(&mut u64buf)?;
            Ok(u64::from_le_bytes(u64buf))
        };
        let token_vocab_size = read_u64(r)? as usize;
        let embed_dim = read_u64(r)? as usize;
        let hidden_dim = read_u64(r)? as usize;
        let tag_count = read_u64(r)? as usize;
        let init_seed = read_u64(r)?;
        let init_scale = f64::from_le_bytes({
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            b
        });
        let config = TaggerConfig {
            token_vocab_size,
            embed_dim,
            hidden_dim,
            tag_count,
            init_seed,
            init_scale,
        };
        config.validate()?;
        let n_fragments = read_u64(r)? as usize;
        let mut fragments = Vec::with_capacity(n_fragments);
        for _ in 0..n_fragments {
            let mut read_string = |r: &mut R| -> Result<String> {
                let len = read_u64(r)? as usize;
                if len > 1 << 20 {
                    return Err(Error::Schema("unreasonable string length".into()));
                }
                let mut buf = vec![0u8; len];
                r.read_exact(&mut buf)?;
                String::from_utf8(buf).map_err(|_| Error::Schema("non-utf8 fragment name".into()))
            };
            let name = read_string(r)?;
            let unit = read_string(r)?;
            let len = read_u64(r)? as usize;
            let mut values = Vec::with_capacity(len);
            let mut b = [0u8; 8];
            for _ in 0..len {
                r.read_exact(&mut b)?;
                values.push(f64::from_le_bytes(b));
            }
            fragments.push(Fragment { name, unit, values });
        }
        let params = ParamSet { fragments };
        let expected = config.fragment_layout();
        if params.fragments.len() != expected.len()
            || !params
                .fragments
                .iter()
                .zip(&expected)
                .all(|(f, (n, u, l))| f.name == *n && f.unit == *u && f.values.len() == *l)
        {
            return Err(Error::Shape(
                "fragment layout does not match header config".into(),
            ));
        }
        Ok((config, params))
    }
}

const MAGIC: &[u8; 8] = b"ATSNPRM1";

/// Per-sentence forward pass: logits, shared features, and the cached
/// inputs needed for exact backprop.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// N x K pre-softmax scores.
    pub logits: Mat,
    /// N x hidden_dim shared features Z (the tanh layer output).
    pub features: Mat,
    /// N x (WINDOW * embed_dim) assembled window inputs.
    pub(crate) embedded: Mat,
    pub(crate) token_ids: Vec<usize>,
}

/// Cross-entropy term of a loss bundle: per-token target tags plus a
/// supervision mask. Masked-out tokens contribute nothing.
#[derive(Debug, Clone)]
pub struct CeTerm<'a> {
    pub tags: &'a [usize],
    pub mask: &'a [bool],
    pub weight: f64,
}

/// One distillation term: soften both the student's and this teacher's
/// logits at `temperature` and push the student toward the teacher.
#[derive(Debug, Clone)]
pub struct KdTerm<'a> {
    pub teacher_logits: &'a Mat,
    pub temperature: f64,
    pub weight: f64,
}

/// The composite per-sentence training loss: an optional CE term plus any
/// number of weighted distillation terms (the trainer uses two).
#[derive(Debug, Clone, Default)]
pub struct LossSpec<'a> {
    pub ce: Option<CeTerm<'a>>,
    pub kd: Vec<KdTerm<'a>>,
}

/// Dimensions helper: strided views into the fragment vector.
struct Views<'a> {
    embed: &'a [f64],  // V x E row-major
    w1: &'a [f64],     // H x (WINDOW*E) row-major
    b1: &'a [f64],     // H
    w2: &'a [f64],     // K x H row-major
    b2: &'a [f64],     // K
    e: usize,
    h: usize,
    k: usize,
    v: usize,
}

fn views(params: &ParamSet) -> Result<Views<'_>> {
    let get = |name: &str| {
        params
            .fragment(name)
            .map(|f| f.values.as_slice())
            .ok_or_else(|| Error::Shape(format!("missing fragment {name:?}")))
    };
    let embed = get("embed.weight")?;
    let w1 = get("hidden.weight")?;
    let b1 = get("hidden.bias")?;
    let w2 = get("head.weight")?;
    let b2 = get("head.bias")?;
    let h = b1.len();
    let k = b2.len();
    if h == 0 || k == 0 || w1.len() % (h * WINDOW) != 0 || w2.len() != k * h {
        return Err(Error::Shape("inconsistent fragment sizes".into()));
    }
    let e = w1.len() / (h * WINDOW);
    if e == 0 || embed.len() % e != 0 {
        return Err(Error::Shape("inconsistent embedding size".into()));
    }
    Ok(Views {
        embed,
        w1,
        b1,
        w2,
        b2,
        e,
        h,
        k,
        v: embed.len() / e,
    })
}

/// Deterministic parameter initialization: values drawn uniformly from
/// `[-init_scale, +init_scale]` in fragment order.
pub fn init(config: &TaggerConfig) -> Result<ParamSet> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
    let fragments = config
        .fragment_layout()
        .into_iter()
        .map(|(name, unit, len)| Fragment {
            name: name.to_string(),
            unit: unit.to_string(),
            values: (0..len)
                .map(|_| rng.gen::<f64>() * 2.0 * config.init_scale - config.init_scale)
                .collect(),
        })
        .collect();
    Ok(ParamSet { fragments })
}

/// Numerically safe softmax (max subtraction).
pub(crate) fn softmax(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        let v = (x - max).exp();
        *o = v;
        sum += v;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Forward pass over a pre-encoded sentence. Pure: identical inputs give
/// bitwise-identical outputs.
pub fn forward(params: &ParamSet, token_ids: &[usize]) -> Result<ForwardTrace> {
    let vw = views(params)?;
    let n = token_ids.len();
    if let Some(&tok) = token_ids.iter().find(|&&t| t >= vw.v) {
        return Err(Error::Input(format!(
            "token index {tok} out of vocabulary (size {})",
            vw.v
        )));
    }
    let win = WINDOW * vw.e;
    let mut embedded = Mat::zeros(n, win);
    let mut features = Mat::zeros(n, vw.h);
    let mut logits = Mat::zeros(n, vw.k);
    for j in 0..n {
        // Window input [prev | current | next]; zeros past the boundary.
        let x = embedded.row_mut(j);
        for (slot, pos) in [(0usize, j.checked_sub(1)), (1, Some(j)), (2, j.checked_add(1).filter(|&p| p < n))] {
            if let Some(p) = pos {
                let tok = token_ids[p];
                x[slot * vw.e..(slot + 1) * vw.e]
                    .copy_from_slice(&vw.embed[tok * vw.e..(tok + 1) * vw.e]);
            }
        }
        let x = embedded.row(j);
        for i in 0..vw.h {
            let w_row = &vw.w1[i * win..(i + 1) * win];
            let mut acc = vw.b1[i];
            for (w, xv) in w_row.iter().zip(x) {
                acc += w * xv;
            }
            features.set(j, i, acc.tanh());
        }
        let z_row = features.row(j);
        for c in 0..vw.k {
            let w_row = &vw.w2[c * vw.h..(c + 1) * vw.h];
            let mut acc = vw.b2[c];
            for (w, z) in w_row.iter().zip(z_row) {
                acc += w * z;
            }
            logits.set(j, c, acc);
        }
    }
    Ok(ForwardTrace {
        logits,
        features,
        embedded,
        token_ids: token_ids.to_vec(),
    })
}

/// Per-token argmax tags and max-softmax confidences. Argmax ties break to
/// the lowest index.
pub fn predict(params: &ParamSet, token_ids: &[usize]) -> Result<(Vec<usize>, Vec<f64>)> {
    let trace = forward(params, token_ids)?;
    Ok(predict_from_logits(&trace.logits))
}

/// The argmax/confidence read-out, reusable when logits are already at hand.
pub fn predict_from_logits(logits: &Mat) -> (Vec<usize>, Vec<f64>) {
    let k = logits.cols();
    let mut tags = Vec::with_capacity(logits.rows());
    let mut confidences = Vec::with_capacity(logits.rows());
    let mut probs = vec![0.0; k];
    for j in 0..logits.rows() {
        softmax(logits.row(j), &mut probs);
        let mut best = 0;
        for c in 1..k {
            if probs[c] > probs[best] {
                best = c;
            }
        }
        tags.push(best);
        confidences.push(probs[best]);
    }
    (tags, confidences)
}

fn validate_spec(spec: &LossSpec<'_>, n: usize, k: usize) -> Result<()> {
    if let Some(ce) = &spec.ce {
        if ce.tags.len() != n || ce.mask.len() != n {
            return Err(Error::Input(format!(
                "CE term covers {} tokens, sentence has {n}",
                ce.tags.len()
            )));
        }
        if let Some(&t) = ce.tags.iter().find(|&&t| t >= k) {
            return Err(Error::Input(format!("CE target {t} out of range (K={k})")));
        }
        if !ce.weight.is_finite() {
            return Err(Error::Input("non-finite CE weight".into()));
        }
    }
    for term in &spec.kd {
        if term.teacher_logits.rows() != n || term.teacher_logits.cols() != k {
            return Err(Error::Input(format!(
                "teacher logits are {}x{}, expected {n}x{k}",
                term.teacher_logits.rows(),
                term.teacher_logits.cols()
            )));
        }
        if !(term.temperature > 0.0) {
            return Err(Error::config("temperature", "must be > 0"));
        }
        if !term.weight.is_finite() {
            return Err(Error::Input("non-finite KD weight".into()));
        }
    }
    Ok(())
}

/// Composite loss and its exact gradient in ParamSet shape.
///
/// The CE part averages `-log p(tag)` over all tokens of the sentence with
/// masked-out tokens contributing zero; each KD part averages the softened
/// teacher/student cross-entropy over all tokens.
pub fn loss_and_grad(
    params: &ParamSet,
    token_ids: &[usize],
    spec: &LossSpec<'_>,
) -> Result<(f64, ParamSet)> {
    let trace = forward(params, token_ids)?;
    let vw = views(params)?;
    let n = token_ids.len();
    validate_spec(spec, n, vw.k)?;
    let mut grad = ParamSet {
        fragments: params
            .fragments
            .iter()
            .map(|f| Fragment {
                name: f.name.clone(),
                unit: f.unit.clone(),
                values: vec![0.0; f.values.len()],
            })
            .collect(),
    };
    if n == 0 {
        return Ok((0.0, grad));
    }
    let inv_n = 1.0 / n as f64;

    // d(loss)/d(logits), accumulated across terms.
    let mut dlogits = Mat::zeros(n, vw.k);
    let mut loss = 0.0;
    let mut probs = vec![0.0; vw.k];
    let mut t_probs = vec![0.0; vw.k];
    if let Some(ce) = &spec.ce {
        for j in 0..n {
            if !ce.mask[j] {
                continue;
            }
            softmax(trace.logits.row(j), &mut probs);
            let y = ce.tags[j];
            loss += ce.weight * inv_n * -probs[y].ln();
            let drow = dlogits.row_mut(j);
            for c in 0..vw.k {
                let indicator = if c == y { 1.0 } else { 0.0 };
                drow[c] += ce.weight * inv_n * (probs[c] - indicator);
            }
        }
    }
    let mut scaled = vec![0.0; vw.k];
    for term in &spec.kd {
        let t = term.temperature;
        for j in 0..n {
            for (s, &x) in scaled.iter_mut().zip(trace.logits.row(j)) {
                *s = x / t;
            }
            let log_ps = log_softmax(&scaled);
            softmax(&scaled, &mut probs);
            for (s, &x) in scaled.iter_mut().zip(term.teacher_logits.row(j)) {
                *s = x / t;
            }
            softmax(&scaled, &mut t_probs);
            let mut h = 0.0;
            for c in 0..vw.k {
                h -= t_probs[c] * log_ps[c];
            }
            loss += term.weight * inv_n * h;
            let drow = dlogits.row_mut(j);
            for c in 0..vw.k {
                drow[c] += term.weight * inv_n * (probs[c] - t_probs[c]) / t;
            }
        }
    }

    backprop_from_dlogits(&vw, &trace, &dlogits, &mut grad);
    Ok((loss, grad))
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|&x| x - max - log_sum).collect()
}

fn backprop_from_dlogits(vw: &Views<'_>, trace: &ForwardTrace, dlogits: &Mat, grad: &mut ParamSet) {
    let n = trace.token_ids.len();
    let win = WINDOW * vw.e;
    let mut dz = vec![0.0; vw.h];
    let mut dpre = vec![0.0; vw.h];
    let mut dx = vec![0.0; win];
    // Split the gradient fragments out by name once.
    let mut g_embed = std::mem::take(&mut grad.fragment_mut("embed.weight").unwrap().values);
    let mut g_w1 = std::mem::take(&mut grad.fragment_mut("hidden.weight").unwrap().values);
    let mut g_b1 = std::mem::take(&mut grad.fragment_mut("hidden.bias").unwrap().values);
    let mut g_w2 = std::mem::take(&mut grad.fragment_mut("head.weight").unwrap().values);
    let mut g_b2 = std::mem::take(&mut grad.fragment_mut("head.bias").unwrap().values);
    for j in 0..n {
        let drow = dlogits.row(j);
        let z = trace.features.row(j);
        let x = trace.embedded.row(j);
        dz.iter_mut().for_each(|v| *v = 0.0);
        for c in 0..vw.k {
            let d = drow[c];
            if d == 0.0 {
                continue;
            }
            g_b2[c] += d;
            let w_row = &vw.w2[c * vw.h..(c + 1) * vw.h];
            let g_row = &mut g_w2[c * vw.h..(c + 1) * vw.h];
            for i in 0..vw.h {
                g_row[i] += d * z[i];
                dz[i] += d * w_row[i];
            }
        }
        for i in 0..vw.h {
            dpre[i] = dz[i] * (1.0 - z[i] * z[i]);
        }
        dx.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..vw.h {
            let d = dpre[i];
            if d == 0.0 {
                continue;
            }
            g_b1[i] += d;
            let w_row = &vw.w1[i * win..(i + 1) * win];
            let g_row = &mut g_w1[i * win..(i + 1) * win];
            for m in 0..win {
                g_row[m] += d * x[m];
                dx[m] += d * w_row[m];
            }
        }
        // Scatter the window-input gradient back onto the embedding rows.
        for (slot, pos) in [(0usize, j.checked_sub(1)), (1, Some(j)), (2, j.checked_add(1).filter(|&p| p < n))] {
            if let Some(p) = pos {
                let tok = trace.token_ids[p];
                let g_e = &mut g_embed[tok * vw.e..(tok + 1) * vw.e];
                for m in 0..vw.e {
                    g_e[m] += dx[slot * vw.e + m];
                }
            }
        }
    }
    grad.fragment_mut("embed.weight").unwrap().values = g_embed;
    grad.fragment_mut("hidden.weight").unwrap().values = g_w1;
    grad.fragment_mut("hidden.bias").unwrap().values = g_b1;
    grad.fragment_mut("head.weight").unwrap().values = g_w2;
    grad.fragment_mut("head.bias").unwrap().values = g_b2;
}

/// Exact gradient of the temperature-softened distillation loss with respect
/// to the shared features `Z`, returned as an N x hidden_dim matrix.
///
/// This is the quantity the adaptive weight solver consumes: the loss is the
/// same token-averaged softened cross-entropy used by [`loss_and_grad`], and
/// only the logit path `a = W2 z + b2` depends on `Z`.
pub fn feature_grad_of_kd(
    params: &ParamSet,
    token_ids: &[usize],
    teacher_logits: &Mat,
    temperature: f64,
) -> Result<Mat> {
    if !(temperature > 0.0) {
        return Err(Error::config("temperature", "must be > 0"));
    }
    let trace = forward(params, token_ids)?;
    let vw = views(params)?;
    let n = token_ids.len();
    if teacher_logits.rows() != n || teacher_logits.cols() != vw.k {
        return Err(Error::Input(format!(
            "teacher logits are {}x{}, expected {n}x{}",
            teacher_logits.rows(),
            teacher_logits.cols(),
            vw.k
        )));
    }
    let mut out = Mat::zeros(n, vw.h);
    if n == 0 {
        return Ok(out);
    }
    let inv_n = 1.0 / n as f64;
    let mut probs = vec![0.0; vw.k];
    let mut t_probs = vec![0.0; vw.k];
    let mut scaled = vec![0.0; vw.k];
    for j in 0..n {
        for (s, &x) in scaled.iter_mut().zip(trace.logits.row(j)) {
            *s = x / temperature;
        }
        softmax(&scaled, &mut probs);
        for (s, &x) in scaled.iter_mut().zip(teacher_logits.row(j)) {
            *s = x / temperature;
        }
        softmax(&scaled, &mut t_probs);
        let drow = out.row_mut(j);
        for c in 0..vw.k {
            let d = inv_n * (probs[c] - t_probs[c]) / temperature;
            let w_row = &vw.w2[c * vw.h..(c + 1) * vw.h];
            for i in 0..vw.h {
                drow[i] += d * w_row[i];
            }
        }
    }
    Ok(out)
}
