//! Attention kernels over multi-view frames: plain scaled dot-product
//! self-attention and the rewired cross-frame variant, where articulation
//! view `k` attends to source view `k` plus every other articulation view.
//!
//! Kernels are projection-free: Q/K/V arrive precomputed, shaped
//! `views × tokens × channels`.

use crate::error::{Error, Result};
use crate::exec::Execution;
use ndarray::{concatenate, s, Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FrameTag {
    /// Renderings of the input mesh; provides structure.
    Source,
    /// The frame being denoised toward the new pose.
    Articulation,
}

/// Token features for every view of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTensor {
    pub tag: FrameTag,
    pub data: Array3<f64>,
}

impl FrameTensor {
    pub fn new(tag: FrameTag, data: Array3<f64>) -> Result<Self> {
        check_tensor(&data, "frame")?;
        Ok(FrameTensor { tag, data })
    }

    pub fn views(&self) -> usize {
        self.data.dim().0
    }

    pub fn tokens(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }
}

fn check_tensor(a: &Array3<f64>, what: &str) -> Result<()> {
    let (n, t, c) = a.dim();
    if n == 0 || t == 0 || c == 0 {
        return Err(Error::dim(format!("{what} has an empty dimension ({n}×{t}×{c})")));
    }
    if !a.iter().all(|x| x.is_finite()) {
        return Err(Error::invalid(format!("{what} has non-finite entries")));
    }
    Ok(())
}

/// Query/key/value features of one attention layer for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Qkv {
    pub q: Array3<f64>,
    pub k: Array3<f64>,
    pub v: Array3<f64>,
}

impl Qkv {
    pub fn new(q: Array3<f64>, k: Array3<f64>, v: Array3<f64>) -> Result<Self> {
        if q.dim() != k.dim() || k.dim() != v.dim() {
            return Err(Error::dim(format!(
                "Q/K/V shapes differ: {:?} {:?} {:?}",
                q.dim(),
                k.dim(),
                v.dim()
            )));
        }
        check_tensor(&q, "Q")?;
        check_tensor(&k, "K")?;
        check_tensor(&v, "V")?;
        Ok(Qkv { q, k, v })
    }

    pub fn views(&self) -> usize {
        self.q.dim().0
    }

    pub fn channels(&self) -> usize {
        self.q.dim().2
    }
}

pub fn default_scale(channels: usize) -> f64 {
    1.0 / (channels as f64).sqrt()
}

/// Row-wise softmax of `scale · Q Kᵀ`.
pub fn attention_weights(q: ArrayView2<f64>, k: ArrayView2<f64>, scale: f64) -> Result<Array2<f64>> {
    if q.ncols() != k.ncols() {
        return Err(Error::dim(format!("query width {} vs key width {}", q.ncols(), k.ncols())));
    }
    if k.nrows() == 0 {
        return Err(Error::dim("attention over zero keys"));
    }
    let mut w = q.dot(&k.t()) * scale;
    for mut row in w.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    Ok(w)
}

/// `Softmax(scale · Q Kᵀ) V`.
pub fn self_attention(q: ArrayView2<f64>, k: ArrayView2<f64>, v: ArrayView2<f64>, scale: f64) -> Result<Array2<f64>> {
    if k.nrows() != v.nrows() {
        return Err(Error::dim(format!("{} keys vs {} values", k.nrows(), v.nrows())));
    }
    Ok(attention_weights(q, k, scale)?.dot(&v))
}

/// Head-sliced attention: channels split evenly into `heads` groups, each
/// attended independently with scale `1/√(c/heads)`, outputs concatenated.
pub fn multi_head_attention(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    heads: usize,
) -> Result<Array2<f64>> {
    let c = q.ncols();
    if heads == 0 || !c.is_multiple_of(heads) || k.ncols() != c || v.ncols() != c {
        return Err(Error::dim(format!("{c} channels cannot be split into {heads} heads")));
    }
    let d = c / heads;
    let outs = (0..heads)
        .map(|h| {
            let cols = s![.., h * d..(h + 1) * d];
            self_attention(q.slice(cols), k.slice(cols), v.slice(cols), default_scale(d))
        })
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = outs.iter().map(|o| o.view()).collect();
    Ok(concatenate(Axis(1), &views).expect("equal row counts"))
}

/// Key/value sources for articulation view `k`: articulation views in
/// order, with the source frame occupying slot `k`.
pub fn build_attention_set(k: usize, n_views: usize) -> Result<Vec<(FrameTag, usize)>> {
    if k >= n_views {
        return Err(Error::invalid(format!("view {k} out of range for {n_views} views")));
    }
    Ok((0..n_views)
        .map(|i| if i == k { (FrameTag::Source, i) } else { (FrameTag::Articulation, i) })
        .collect())
}

fn gather(set: &[(FrameTag, usize)], source: &Array3<f64>, articulation: &Array3<f64>) -> Array2<f64> {
    let parts: Vec<_> = set
        .iter()
        .map(|&(tag, i)| match tag {
            FrameTag::Source => source.index_axis(Axis(0), i),
            FrameTag::Articulation => articulation.index_axis(Axis(0), i),
        })
        .collect();
    concatenate(Axis(0), &parts).expect("equal channel counts")
}

/// Rewired cross-frame self-attention for every articulation view.
pub fn rsactrl_attention(articulation: &Qkv, source: &Qkv) -> Result<Array3<f64>> {
    rsactrl_attention_with(articulation, source, Execution::Sequential)
}

pub fn rsactrl_attention_with(articulation: &Qkv, source: &Qkv, exec: Execution) -> Result<Array3<f64>> {
    if articulation.q.dim() != source.q.dim() {
        return Err(Error::dim(format!(
            "articulation frame {:?} vs source frame {:?}",
            articulation.q.dim(),
            source.q.dim()
        )));
    }
    let (n, t, c) = articulation.q.dim();
    let scale = default_scale(c);
    let outs = exec.map(n, |view| -> Result<Array2<f64>> {
        let set = build_attention_set(view, n)?;
        let k = gather(&set, &source.k, &articulation.k);
        let v = gather(&set, &source.v, &articulation.v);
        self_attention(articulation.q.index_axis(Axis(0), view), k.view(), v.view(), scale)
    });
    let mut out = Array3::zeros((n, t, c));
    for (view, o) in outs.into_iter().enumerate() {
        out.index_axis_mut(Axis(0), view).assign(&o?);
    }
    Ok(out)
}

/// Joint multi-view self-attention: every view attends to the tokens of all
/// views of the same frame.
pub fn joint_attention(qkv: &Qkv) -> Result<Array3<f64>> {
    let (n, t, c) = qkv.q.dim();
    let flat = |a: &Array3<f64>| a.to_shape((n * t, c)).expect("contiguous").to_owned();
    let (k, v) = (flat(&qkv.k), flat(&qkv.v));
    let scale = default_scale(c);
    let mut out = Array3::zeros((n, t, c));
    for view in 0..n {
        let o = self_attention(qkv.q.index_axis(Axis(0), view), k.view(), v.view(), scale)?;
        out.index_axis_mut(Axis(0), view).assign(&o);
    }
    Ok(out)
}
