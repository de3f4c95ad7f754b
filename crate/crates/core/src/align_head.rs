//! Contrastive alignment head: a bias-free linear projection of visual
//! features, cosine similarity against text embeddings, and a learnable
//! affine `alpha * cos + beta` with `alpha = exp(alpha_raw)`.
//!
//! The same projection scores both holistic queries and attributes; each
//! granularity gets its own affine unless `shared_affine` is set.

use std::io::{Read, Write};

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::{dot, norm, Matrix};
use crate::rng::StreamRng;
use crate::supervision::TextBatch;

/// Logit written into masked columns. `sigmoid(NEG)` is 0 in `f64`.
pub const NEG: f64 = -1e9;

pub const DEFAULT_ALPHA: f64 = 5.0;
pub const DEFAULT_BETA: f64 = -2.0;
pub const DEFAULT_D_VIS: usize = 32;
pub const DEFAULT_D_TXT: usize = 32;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"OTAHEAD1";

#[derive(Debug, Error)]
pub enum HeadError {
    #[error("projected visual row {row} has zero norm")]
    ZeroNormVisual { row: usize },
    #[error("text row {row} has zero norm")]
    ZeroNormText { row: usize },
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogitAffine {
    pub alpha_raw: f64,
    pub beta: f64,
}

impl LogitAffine {
    pub fn new(alpha: f64, beta: f64) -> Self {
        assert!(alpha > 0.0, "alpha must be positive");
        Self {
            alpha_raw: alpha.ln(),
            beta,
        }
    }

    #[inline]
    pub fn alpha(&self) -> f64 {
        self.alpha_raw.exp()
    }
}

impl Default for LogitAffine {
    fn default() -> Self {
        Self::new(DEFAULT_ALPHA, DEFAULT_BETA)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    /// Projection, `d_txt x d_vis`.
    pub w: Matrix,
    pub query: LogitAffine,
    pub attr: LogitAffine,
    /// When set, attribute logits use `query` and `attr` is ignored.
    pub shared_affine: bool,
}

impl HeadParams {
    /// Gaussian projection scaled by `1/sqrt(d_vis)` and the default affines.
    pub fn init(d_vis: usize, d_txt: usize, shared_affine: bool, rng: &mut StreamRng) -> Self {
        let scale = 1.0 / (d_vis as f64).sqrt();
        let data = (0..d_vis * d_txt)
            .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng))
            .collect::<Vec<f64>>();
        Self {
            w: Matrix::from_vec(d_txt, d_vis, data),
            query: LogitAffine::default(),
            attr: LogitAffine::default(),
            shared_affine,
        }
    }

    pub fn d_vis(&self) -> usize {
        self.w.cols()
    }

    pub fn d_txt(&self) -> usize {
        self.w.rows()
    }

    pub fn attr_affine(&self) -> &LogitAffine {
        if self.shared_affine {
            &self.query
        } else {
            &self.attr
        }
    }

    pub fn is_finite(&self) -> bool {
        self.w.is_finite()
            && [self.query.alpha_raw, self.query.beta, self.attr.alpha_raw, self.attr.beta]
                .iter()
                .all(|v| v.is_finite())
    }

    /// Flat little-endian checkpoint: magic, `d_vis` and `d_txt` as `u32`,
    /// `w` row-major as `f64`, then query `alpha_raw`, `beta`, attribute
    /// `alpha_raw`, `beta` as `f64`, then one byte for `shared_affine`.
    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> Result<(), HeadError> {
        out.write_all(&CHECKPOINT_MAGIC)?;
        out.write_all(&(self.d_vis() as u32).to_le_bytes())?;
        out.write_all(&(self.d_txt() as u32).to_le_bytes())?;
        for v in self.w.as_slice() {
            out.write_all(&v.to_le_bytes())?;
        }
        for v in [self.query.alpha_raw, self.query.beta, self.attr.alpha_raw, self.attr.beta] {
            out.write_all(&v.to_le_bytes())?;
        }
        out.write_all(&[u8::from(self.shared_affine)])?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Self, HeadError> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        let bad = |m: &str| HeadError::Checkpoint(m.to_string());
        if bytes.len() < 16 || bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let d_vis = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let d_txt = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let n = d_vis * d_txt;
        if bytes.len() != 16 + 8 * (n + 4) + 1 {
            return Err(bad("truncated or oversized body"));
        }
        let f = |i: usize| f64::from_le_bytes(bytes[16 + 8 * i..24 + 8 * i].try_into().unwrap());
        let w = Matrix::from_vec(d_txt, d_vis, (0..n).map(f).collect());
        let shared = match bytes[bytes.len() - 1] {
            0 => false,
            1 => true,
            _ => return Err(bad("bad shared flag")),
        };
        let p = Self {
            w,
            query: LogitAffine {
                alpha_raw: f(n),
                beta: f(n + 1),
            },
            attr: LogitAffine {
                alpha_raw: f(n + 2),
                beta: f(n + 3),
            },
            shared_affine: shared,
        };
        if !p.is_finite() {
            return Err(bad("non-finite parameter"));
        }
        Ok(p)
    }
}

/// Logits for `N` predictions against `C` text columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitBlock {
    pub values: Matrix,
    pub mask: Vec<bool>,
}

impl LogitBlock {
    pub fn n_pred(&self) -> usize {
        self.values.rows()
    }

    pub fn n_cols(&self) -> usize {
        self.values.cols()
    }

    pub fn prob(&self, i: usize, j: usize) -> f64 {
        sigmoid(self.values.get(i, j))
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Intermediate values of one forward pass, reused by [`backward`].
#[derive(Debug, Clone)]
pub struct Forward {
    pub block: LogitBlock,
    u_hat: Matrix,
    u_norm: Vec<f64>,
    t_hat: Matrix,
    t_norm: Vec<f64>,
    cos: Matrix,
    alpha: f64,
}

pub fn project(v: &Matrix, w: &Matrix) -> Matrix {
    let mut u = Matrix::zeros(v.rows(), w.rows());
    for i in 0..v.rows() {
        let vi = v.row(i);
        for a in 0..w.rows() {
            u.set(i, a, dot(w.row(a), vi));
        }
    }
    u
}

fn normalize_rows(m: &Matrix, rows: impl Fn(usize) -> bool) -> Result<(Matrix, Vec<f64>), usize> {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    let mut norms = vec![0.0; m.rows()];
    for i in 0..m.rows() {
        if !rows(i) {
            continue;
        }
        let n = norm(m.row(i));
        if n == 0.0 || !n.is_finite() {
            return Err(i);
        }
        norms[i] = n;
        for (o, x) in out.row_mut(i).iter_mut().zip(m.row(i)) {
            *o = x / n;
        }
    }
    Ok((out, norms))
}

/// Forward pass keeping intermediates for the gradient.
pub fn forward(v: &Matrix, t: &Matrix, w: &Matrix, affine: &LogitAffine, valid: &[bool]) -> Result<Forward, HeadError> {
    if v.cols() != w.cols() || t.cols() != w.rows() || t.rows() != valid.len() {
        return Err(HeadError::Shape(format!(
            "v {}x{}, t {}x{}, w {}x{}, mask {}",
            v.rows(),
            v.cols(),
            t.rows(),
            t.cols(),
            w.rows(),
            w.cols(),
            valid.len()
        )));
    }
    let u = project(v, w);
    let any_valid = valid.iter().any(|&b| b);
    let (u_hat, u_norm) =
        normalize_rows(&u, |_| any_valid).map_err(|row| HeadError::ZeroNormVisual { row })?;
    let (t_hat, t_norm) = normalize_rows(t, |j| valid[j]).map_err(|row| HeadError::ZeroNormText { row })?;
    let alpha = affine.alpha();
    let mut cos = Matrix::zeros(v.rows(), t.rows());
    let mut values = Matrix::filled(v.rows(), t.rows(), NEG);
    for i in 0..v.rows() {
        for j in 0..t.rows() {
            if valid[j] {
                let c = dot(u_hat.row(i), t_hat.row(j));
                cos.set(i, j, c);
                values.set(i, j, alpha * c + affine.beta);
            }
        }
    }
    Ok(Forward {
        block: LogitBlock {
            values,
            mask: valid.to_vec(),
        },
        u_hat,
        u_norm,
        t_hat,
        t_norm,
        cos,
        alpha,
    })
}

/// `values[i,j] = alpha * cos(w v_i, t_j) + beta` on valid columns, [`NEG`]
/// elsewhere.
pub fn similarity_logits(
    v: &Matrix,
    t: &Matrix,
    w: &Matrix,
    affine: &LogitAffine,
    valid: &[bool],
) -> Result<LogitBlock, HeadError> {
    forward(v, t, w, affine, valid).map(|f| f.block)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    pub v: Matrix,
    pub t: Matrix,
    pub w: Matrix,
    pub alpha_raw: f64,
    pub beta: f64,
}

/// Gradient of `sum(upstream * values)` over valid columns. Masked columns
/// of `upstream` are ignored.
pub fn backward(fwd: &Forward, v: &Matrix, w: &Matrix, upstream: &Matrix) -> HeadGrads {
    let (n, c) = (fwd.cos.rows(), fwd.cos.cols());
    assert_eq!((upstream.rows(), upstream.cols()), (n, c), "upstream shape");
    let d_txt = w.rows();
    let mask = &fwd.block.mask;
    let mut d_alpha_raw = 0.0;
    let mut d_beta = 0.0;
    let mut d_cos = Matrix::zeros(n, c);
    for i in 0..n {
        for j in 0..c {
            if mask[j] {
                let g = upstream.get(i, j);
                d_beta += g;
                d_alpha_raw += fwd.alpha * g * fwd.cos.get(i, j);
                d_cos.set(i, j, fwd.alpha * g);
            }
        }
    }

    // Through the row normalizations: d x = (d x_hat - x_hat (x_hat . d x_hat)) / |x|.
    let mut d_u = Matrix::zeros(n, d_txt);
    let mut buf = vec![0.0; d_txt];
    for i in 0..n {
        buf.iter_mut().for_each(|b| *b = 0.0);
        for j in 0..c {
            let g = d_cos.get(i, j);
            if g != 0.0 {
                for (b, t) in buf.iter_mut().zip(fwd.t_hat.row(j)) {
                    *b += g * t;
                }
            }
        }
        let uh = fwd.u_hat.row(i);
        let proj = dot(uh, &buf);
        let inv = if fwd.u_norm[i] > 0.0 { 1.0 / fwd.u_norm[i] } else { 0.0 };
        for a in 0..d_txt {
            d_u.set(i, a, (buf[a] - uh[a] * proj) * inv);
        }
    }
    let mut d_t = Matrix::zeros(c, d_txt);
    for j in 0..c {
        if !mask[j] {
            continue;
        }
        buf.iter_mut().for_each(|b| *b = 0.0);
        for i in 0..n {
            let g = d_cos.get(i, j);
            for (b, u) in buf.iter_mut().zip(fwd.u_hat.row(i)) {
                *b += g * u;
            }
        }
        let th = fwd.t_hat.row(j);
        let proj = dot(th, &buf);
        for a in 0..d_txt {
            d_t.set(j, a, (buf[a] - th[a] * proj) / fwd.t_norm[j]);
        }
    }

    let d_vis = w.cols();
    let mut d_w = Matrix::zeros(d_txt, d_vis);
    let mut d_v = Matrix::zeros(n, d_vis);
    for i in 0..n {
        let du = d_u.row(i);
        let vi = v.row(i);
        for a in 0..d_txt {
            if du[a] == 0.0 {
                continue;
            }
            let wa = w.row(a);
            for b in 0..d_vis {
                d_w.add_at(a, b, du[a] * vi[b]);
                d_v.add_at(i, b, du[a] * wa[b]);
            }
        }
    }
    HeadGrads {
        v: d_v,
        t: d_t,
        w: d_w,
        alpha_raw: d_alpha_raw,
        beta: d_beta,
    }
}

/// Query-level and attribute-level forward passes over shared visual
/// features and projection.
#[derive(Debug, Clone)]
pub struct DualForward {
    pub query: Forward,
    pub attr: Forward,
}

impl DualForward {
    pub fn s_query(&self) -> &LogitBlock {
        &self.query.block
    }

    pub fn s_attr(&self) -> &LogitBlock {
        &self.attr.block
    }
}

/// Attribute columns of padded query slots are masked even if the batch
/// marks them valid.
pub fn dual_forward(
    q_feats: &Matrix,
    f_query: &Matrix,
    f_attr: &Matrix,
    p: &HeadParams,
    tb: &TextBatch,
) -> Result<DualForward, HeadError> {
    if f_query.rows() != tb.q_max || f_attr.rows() != tb.n_attr_cols() {
        return Err(HeadError::Shape(format!(
            "text rows {} / {} do not match batch {} / {}",
            f_query.rows(),
            f_attr.rows(),
            tb.q_max,
            tb.n_attr_cols()
        )));
    }
    let attr_mask: Vec<bool> = (0..tb.n_attr_cols())
        .map(|k| tb.attr_valid[k] && tb.query_valid[k / tb.a_max])
        .collect();
    let query = forward(q_feats, f_query, &p.w, &p.query, &tb.query_valid)?;
    let attr = forward(q_feats, f_attr, &p.w, p.attr_affine(), &attr_mask)?;
    Ok(DualForward { query, attr })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualGrads {
    pub q_feats: Matrix,
    pub f_query: Matrix,
    pub f_attr: Matrix,
    pub params: HeadParams,
}

/// Backward through both heads given upstream gradients for `S_query` and
/// `S_attr`. `params` in the result holds gradients, not parameters.
pub fn dual_backward(
    fwd: &DualForward,
    q_feats: &Matrix,
    p: &HeadParams,
    up_query: &Matrix,
    up_attr: &Matrix,
) -> DualGrads {
    let gq = backward(&fwd.query, q_feats, &p.w, up_query);
    let ga = backward(&fwd.attr, q_feats, &p.w, up_attr);
    let mut v = gq.v;
    v.add_assign(&ga.v);
    let mut w = gq.w;
    w.add_assign(&ga.w);
    let (query, attr) = if p.shared_affine {
        (
            LogitAffine {
                alpha_raw: gq.alpha_raw + ga.alpha_raw,
                beta: gq.beta + ga.beta,
            },
            LogitAffine { alpha_raw: 0.0, beta: 0.0 },
        )
    } else {
        (
            LogitAffine {
                alpha_raw: gq.alpha_raw,
                beta: gq.beta,
            },
            LogitAffine {
                alpha_raw: ga.alpha_raw,
                beta: ga.beta,
            },
        )
    };
    DualGrads {
        q_feats: v,
        f_query: gq.t,
        f_attr: ga.t,
        params: HeadParams {
            w,
            query,
            attr,
            shared_affine: p.shared_affine,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use proptest::prelude::*;

    fn eye(n: usize) -> Matrix {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    fn gaussian(rows: usize, cols: usize, rng: &mut StreamRng) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| Distribution::<f64>::sample(&StandardNormal, rng)).collect())
    }

    #[test]
    fn identical_and_orthogonal() {
        let v = Matrix::from_rows(&[vec![1.0, 0.0]]);
        let t = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]);
        let b = similarity_logits(&v, &t, &eye(2), &LogitAffine::new(1.0, 0.0), &[true, true]).unwrap();
        assert!((b.values.get(0, 0) - 1.0).abs() < 1e-15);
        let b = similarity_logits(&v, &t, &eye(2), &LogitAffine::new(3.0, -1.0), &[true, true]).unwrap();
        assert!((b.values.get(0, 1) + 1.0).abs() < 1e-15);
    }

    #[test]
    fn all_masked() {
        let v = Matrix::from_rows(&[vec![1.0, 0.0]]);
        let t = Matrix::zeros(3, 2);
        let b = similarity_logits(&v, &t, &eye(2), &LogitAffine::default(), &[false; 3]).unwrap();
        assert!(b.values.as_slice().iter().all(|&x| x == NEG));
        assert_eq!(sigmoid(NEG), 0.0);
    }

    #[test]
    fn zero_norm_rows_are_named() {
        let v = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]);
        let t = Matrix::from_rows(&[vec![1.0, 0.0]]);
        let e = similarity_logits(&v, &t, &eye(2), &LogitAffine::default(), &[true]).unwrap_err();
        assert!(matches!(e, HeadError::ZeroNormVisual { row: 1 }));
        let v = Matrix::from_rows(&[vec![1.0, 0.0]]);
        let t = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]);
        let e = similarity_logits(&v, &t, &eye(2), &LogitAffine::default(), &[true, true]).unwrap_err();
        assert!(matches!(e, HeadError::ZeroNormText { row: 1 }));
        // A zero row in a masked column is fine.
        similarity_logits(&v, &t, &eye(2), &LogitAffine::default(), &[true, false]).unwrap();
    }

    fn batch(q_max: usize, a_max: usize, valid_q: usize, attrs: usize) -> TextBatch {
        let mut tb = TextBatch {
            q_max,
            a_max,
            query_texts: vec![String::new(); q_max],
            attr_texts: vec![String::new(); q_max * a_max],
            query_valid: vec![false; q_max],
            attr_valid: vec![false; q_max * a_max],
            query_origin: vec![None; q_max],
        };
        for j in 0..valid_q {
            tb.query_valid[j] = true;
            tb.query_texts[j] = format!("q{j}");
            tb.query_origin[j] = Some(j);
            for k in 0..attrs {
                tb.attr_valid[j * a_max + k] = true;
                tb.attr_texts[j * a_max + k] = format!("q{j}a{k}");
            }
        }
        tb
    }

    #[test]
    fn dual_shapes_and_masks() {
        let mut rng = rng_from_seed(3);
        let p = HeadParams::init(4, 3, false, &mut rng);
        let v = gaussian(5, 4, &mut rng);
        let fq = gaussian(2, 3, &mut rng);
        let fa = gaussian(4, 3, &mut rng);
        let tb = batch(2, 2, 1, 2);
        let d = dual_forward(&v, &fq, &fa, &p, &tb).unwrap();
        assert_eq!((d.s_query().n_pred(), d.s_query().n_cols()), (5, 2));
        assert_eq!((d.s_attr().n_pred(), d.s_attr().n_cols()), (5, 4));
        for i in 0..5 {
            assert_eq!(d.s_attr().values.get(i, 2), NEG);
            assert_eq!(d.s_attr().values.get(i, 3), NEG);
        }
        let mut tb_bad = tb.clone();
        tb_bad.attr_valid[2] = true;
        let d = dual_forward(&v, &fq, &fa, &p, &tb_bad).unwrap();
        assert_eq!(d.s_attr().values.get(0, 2), NEG);
    }

    #[test]
    fn attribute_equal_to_query_gives_equal_column() {
        let mut rng = rng_from_seed(5);
        let p = HeadParams::init(4, 3, true, &mut rng);
        let v = gaussian(3, 4, &mut rng);
        let fq = gaussian(2, 3, &mut rng);
        let mut fa = Matrix::zeros(2, 3);
        fa.row_mut(0).copy_from_slice(fq.row(0));
        fa.row_mut(1).copy_from_slice(fq.row(1));
        let tb = batch(2, 1, 2, 1);
        let d = dual_forward(&v, &fq, &fa, &p, &tb).unwrap();
        assert_eq!(d.s_query().values, d.s_attr().values);
    }

    #[test]
    fn zero_upstream_zero_grads() {
        let mut rng = rng_from_seed(8);
        let p = HeadParams::init(3, 3, false, &mut rng);
        let v = gaussian(2, 3, &mut rng);
        let t = gaussian(4, 3, &mut rng);
        let f = forward(&v, &t, &p.w, &p.query, &[true, false, true, true]).unwrap();
        let g = backward(&f, &v, &p.w, &Matrix::zeros(2, 4));
        assert!(g.v.as_slice().iter().chain(g.t.as_slice()).chain(g.w.as_slice()).all(|&x| x == 0.0));
        assert_eq!((g.alpha_raw, g.beta), (0.0, 0.0));
    }

    #[test]
    fn grad_beta_is_valid_upstream_sum() {
        let mut rng = rng_from_seed(9);
        let p = HeadParams::init(3, 3, false, &mut rng);
        let v = gaussian(2, 3, &mut rng);
        let t = gaussian(3, 3, &mut rng);
        let mask = [true, false, true];
        let f = forward(&v, &t, &p.w, &p.query, &mask).unwrap();
        let up = gaussian(2, 3, &mut rng);
        let g = backward(&f, &v, &p.w, &up);
        let expected: f64 = (0..2).map(|i| up.get(i, 0) + up.get(i, 2)).sum();
        assert!((g.beta - expected).abs() < 1e-12);
        // masked text rows receive nothing
        assert!(g.t.row(1).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = rng_from_seed(1);
        let mut p = HeadParams::init(3, 2, false, &mut rng);
        p.attr.beta = 0.25;
        let mut buf = Vec::new();
        p.write_checkpoint(&mut buf).unwrap();
        assert_eq!(&buf[..8], b"OTAHEAD1");
        assert_eq!(buf.len(), 16 + 8 * (6 + 4) + 1);
        assert_eq!(HeadParams::read_checkpoint(&buf[..]).unwrap(), p);
        assert!(HeadParams::read_checkpoint(&buf[..buf.len() - 2]).is_err());
        let json = serde_json::to_string(&p).unwrap();
        assert_eq!(serde_json::from_str::<HeadParams>(&json).unwrap(), p);
    }

    proptest! {
        #[test]
        fn visual_scale_invariance(seed in any::<u64>(), c in 0.01..100.0f64) {
            let mut rng = rng_from_seed(seed);
            let p = HeadParams::init(4, 3, false, &mut rng);
            let v = gaussian(3, 4, &mut rng);
            let t = gaussian(5, 3, &mut rng);
            let mask = [true, true, false, true, true];
            let a = similarity_logits(&v, &t, &p.w, &p.query, &mask).unwrap();
            let mut v2 = v.clone();
            for x in v2.row_mut(1) { *x *= c; }
            let b = similarity_logits(&v2, &t, &p.w, &p.query, &mask).unwrap();
            for j in 0..5 {
                prop_assert!((a.values.get(1, j) - b.values.get(1, j)).abs() < 1e-9);
            }
            for (i, j) in (0..3).flat_map(|i| (0..5).map(move |j| (i, j))) {
                if mask[j] {
                    prop_assert!((a.values.get(i, j) - p.query.beta).abs() <= p.query.alpha() + 1e-12);
                }
            }
        }

        #[test]
        fn masked_text_never_matters(seed in any::<u64>()) {
            let mut rng = rng_from_seed(seed);
            let p = HeadParams::init(3, 3, false, &mut rng);
            let v = gaussian(2, 3, &mut rng);
            let t = gaussian(3, 3, &mut rng);
            let mask = [true, false, true];
            let up = gaussian(2, 3, &mut rng);
            let f1 = forward(&v, &t, &p.w, &p.query, &mask).unwrap();
            let mut t2 = t.clone();
            for x in t2.row_mut(1) { *x += 3.0; }
            let f2 = forward(&v, &t2, &p.w, &p.query, &mask).unwrap();
            prop_assert_eq!(&f1.block, &f2.block);
            prop_assert_eq!(backward(&f1, &v, &p.w, &up), backward(&f2, &v, &p.w, &up));
        }
    }
}
