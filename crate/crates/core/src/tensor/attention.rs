//! Segment-local multi-head attention kernels over a packed `[rows × width]` layout.
//!
//! Each segment is an independent sequence; heads occupy contiguous column blocks.

use std::ops::Range;

use super::array::{gemm, MatMut, MatRef};
use super::graph::split_lengths_mut;
use super::Scalar;
use crate::par;

fn head_view<'a, T>(
    data: &'a [T],
    seg: &Range<usize>,
    width: usize,
    head: usize,
    dh: usize,
) -> MatRef<'a, T> {
    MatRef {
        data: &data[seg.start * width + head * dh..],
        rows: seg.len(),
        cols: dh,
        rs: width,
        cs: 1,
    }
}

fn head_view_mut<'a, T>(
    chunk: &'a mut [T],
    rows: usize,
    width: usize,
    head: usize,
    dh: usize,
) -> MatMut<'a, T> {
    MatMut {
        data: &mut chunk[head * dh..],
        rows,
        cols: dh,
        rs: width,
        cs: 1,
    }
}

fn prob_lengths(segments: &[Range<usize>], heads: usize) -> Vec<usize> {
    segments.iter().map(|s| heads * s.len() * s.len()).collect()
}

/// Returns the attended output and the softmax weights (segment-major, then head, row, col).
pub(crate) fn forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    width: usize,
    heads: usize,
    segments: &[Range<usize>],
) -> (Vec<T>, Vec<T>) {
    let dh = width / heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut out = vec![T::ZERO; q.len()];
    let plens = prob_lengths(segments, heads);
    let mut probs = vec![T::ZERO; plens.iter().sum()];
    {
        let out_lens: Vec<usize> = segments.iter().map(|s| s.len() * width).collect();
        let out_chunks = split_lengths_mut(&mut out, &out_lens);
        let prob_chunks = split_lengths_mut(&mut probs, &plens);
        let mut work: Vec<(usize, &mut [T], &mut [T])> = out_chunks
            .into_iter()
            .zip(prob_chunks)
            .enumerate()
            .map(|(i, (o, p))| (i, o, p))
            .collect();
        par::for_each_mut(&mut work, |_, (si, ochunk, pchunk)| {
            let seg = &segments[*si];
            let l = seg.len();
            for h in 0..heads {
                let p = &mut pchunk[h * l * l..(h + 1) * l * l];
                gemm(
                    scale,
                    head_view(q, seg, width, h, dh),
                    head_view(k, seg, width, h, dh).t(),
                    T::ZERO,
                    MatMut::row_major(p, l, l),
                );
                for row in p.chunks_mut(l) {
                    let max = row.iter().copied().fold(row[0], T::max);
                    let mut total = T::ZERO;
                    for x in row.iter_mut() {
                        *x = (*x - max).exp();
                        total += *x;
                    }
                    for x in row.iter_mut() {
                        *x /= total;
                    }
                }
                gemm(
                    T::ONE,
                    MatRef::row_major(p, l, l),
                    head_view(v, seg, width, h, dh),
                    T::ZERO,
                    head_view_mut(ochunk, l, width, h, dh),
                );
            }
        });
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward<T: Scalar>(
    grad: &[T],
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    width: usize,
    heads: usize,
    segments: &[Range<usize>],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let dh = width / heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut dq = vec![T::ZERO; q.len()];
    let mut dk = vec![T::ZERO; k.len()];
    let mut dv = vec![T::ZERO; v.len()];
    let plens = prob_lengths(segments, heads);
    let mut poffsets = Vec::with_capacity(segments.len());
    let mut acc = 0;
    for &len in &plens {
        poffsets.push(acc);
        acc += len;
    }
    {
        let lens: Vec<usize> = segments.iter().map(|s| s.len() * width).collect();
        let mut work: Vec<(usize, (&mut [T], (&mut [T], &mut [T])))> =
            split_lengths_mut(&mut dq, &lens)
                .into_iter()
                .zip(
                    split_lengths_mut(&mut dk, &lens)
                        .into_iter()
                        .zip(split_lengths_mut(&mut dv, &lens)),
                )
                .enumerate()
                .collect();
        par::for_each_mut(&mut work, |_, (si, (dqc, (dkc, dvc)))| {
            let seg = &segments[*si];
            let l = seg.len();
            let mut dp = vec![T::ZERO; l * l];
            for h in 0..heads {
                let off = poffsets[*si] + h * l * l;
                let p = &probs[off..off + l * l];
                let go = head_view(grad, seg, width, h, dh);
                // dV = Pᵀ·dO
                gemm(
                    T::ONE,
                    MatRef::row_major(p, l, l).t(),
                    go,
                    T::ZERO,
                    head_view_mut(dvc, l, width, h, dh),
                );
                // dP = dO·Vᵀ
                gemm(
                    T::ONE,
                    go,
                    head_view(v, seg, width, h, dh).t(),
                    T::ZERO,
                    MatMut::row_major(&mut dp, l, l),
                );
                // dS = P ⊙ (dP − rowsum(dP ⊙ P)), folded with the score scale
                for r in 0..l {
                    let prow = &p[r * l..(r + 1) * l];
                    let drow = &mut dp[r * l..(r + 1) * l];
                    let dot: T = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                    for (d, &pv) in drow.iter_mut().zip(prow) {
                        *d = pv * (*d - dot) * scale;
                    }
                }
                gemm(
                    T::ONE,
                    MatRef::row_major(&dp, l, l),
                    head_view(k, seg, width, h, dh),
                    T::ZERO,
                    head_view_mut(dqc, l, width, h, dh),
                );
                gemm(
                    T::ONE,
                    MatRef::row_major(&dp, l, l).t(),
                    head_view(q, seg, width, h, dh),
                    T::ZERO,
                    head_view_mut(dkc, l, width, h, dh),
                );
            }
        });
    }
    (dq, dk, dv)
}
