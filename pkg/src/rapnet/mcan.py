"""Multi-cast attention feature extraction.

Runs a highway pre-transform plus four attention casts (intra-attention
and inter-attention with max-, mean- and alignment-pooling) over a
context/candidate sequence pair, then compresses every cast into three
scalar features per word: twelve features total.

Shape convention: a sequence is [.., n, e]; leading axes are optional
batches (the model batches the candidate axis). The context side may be
unbatched while the candidate side is batched; inter-attention results
then carry the candidate batch axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .layers import HighwayParams, highway_forward, init_matrix
from .tensor import Tensor


@dataclass
class AblationFlags:
    """Component switches; all true is the full model."""

    inter_attention: bool = True
    intra_attention: bool = True
    highway_encoder: bool = True
    dynamic_pooling: bool = True
    use_mcan: bool = True
    use_knowledge: bool = True

    def as_dict(self) -> dict:
        return {
            "inter_attention": self.inter_attention,
            "intra_attention": self.intra_attention,
            "highway_encoder": self.highway_encoder,
            "dynamic_pooling": self.dynamic_pooling,
            "use_mcan": self.use_mcan,
            "use_knowledge": self.use_knowledge,
        }


@dataclass
class McanParams:
    """Highway layer, per-cast bilinear matrices and the 12 compressors."""

    highway: HighwayParams
    m_intra_d: Tensor
    m_intra_q: Tensor
    m_max: Tensor
    m_mean: Tensor
    m_align: Tensor
    compressors: list = field(default_factory=list)  # W_1..W_12 as columns

    @classmethod
    def create(cls, rng: np.random.Generator, e: int, prefix: str = "mcan") -> "McanParams":
        ws = []
        for i in range(1, 13):
            width = 2 * e if i in (1, 4, 7, 10) else e
            ws.append(init_matrix(rng, width, 1, f"{prefix}.w{i}"))
        return cls(
            highway=HighwayParams.create(rng, e, f"{prefix}.highway"),
            m_intra_d=init_matrix(rng, e, e, f"{prefix}.m_intra_d"),
            m_intra_q=init_matrix(rng, e, e, f"{prefix}.m_intra_q"),
            m_max=init_matrix(rng, e, e, f"{prefix}.m_max"),
            m_mean=init_matrix(rng, e, e, f"{prefix}.m_mean"),
            m_align=init_matrix(rng, e, e, f"{prefix}.m_align"),
            compressors=ws,
        )

    def named(self) -> dict:
        out = dict(self.highway.named())
        for t in (self.m_intra_d, self.m_intra_q, self.m_max, self.m_mean, self.m_align):
            out[t.name] = t
        for w in self.compressors:
            out[w.name] = w
        return out


def _weighted_sum(weights: Tensor, vecs: Tensor) -> Tensor:
    """Σ_t weights[.., t] * vecs[.., t, :] -> [.., e]."""
    w2 = T.reshape(weights, weights.data.shape[:-1] + (1, weights.data.shape[-1]))
    out = T.matmul(w2, vecs)
    return T.reshape(out, out.data.shape[:-2] + (out.data.shape[-1],))


def intra_attention(m: Tensor, seq: Tensor) -> Tensor:
    """Self-attention: position j receives softmax_i(seq_i M seq_j) · seq_i."""
    if seq.data.shape[-2] == 0:
        raise ValueError("intra_attention on an empty sequence")
    s = T.matmul(T.matmul(seq, m), T.swapaxes(seq, -1, -2))
    alpha = T.softmax(s, axis=-2)  # weights for output j sum to 1 over i
    return T.matmul(T.swapaxes(alpha, -1, -2), seq)


def inter_similarity(m: Tensor, d_prime: Tensor, q_prime: Tensor) -> Tensor:
    """S[.., i, j] = d'_i M q'_j."""
    if d_prime.data.shape[-2] == 0 or q_prime.data.shape[-2] == 0:
        raise ValueError("inter_similarity on an empty sequence")
    return T.matmul(T.matmul(d_prime, m), T.swapaxes(q_prime, -1, -2))


def pooled_cast(kind: str, s: Tensor, d_prime: Tensor, q_prime: Tensor):
    """Max- or mean-pooled inter-attention.

    Column pooling over i gives per-j scores whose softmax weights a sum
    of the q-side vectors; that single vector is broadcast to every word
    of q. Row pooling over j symmetrically yields the vector for every
    word of d. Returns (vec_for_d_words, vec_for_q_words), each [.., e].
    """
    if kind == "max":
        col = T.max_axis(s, axis=-2)
        row = T.max_axis(s, axis=-1)
    elif kind == "mean":
        col = T.mean_axis(s, axis=-2)
        row = T.mean_axis(s, axis=-1)
    else:
        raise ValueError(f"unknown pooling kind {kind!r}")
    vec_for_q = _weighted_sum(T.softmax(col, axis=-1), q_prime)
    vec_for_d = _weighted_sum(T.softmax(row, axis=-1), d_prime)
    return vec_for_d, vec_for_q


def alignment_cast(s: Tensor, d_prime: Tensor, q_prime: Tensor):
    """Soft alignment: every word is matched against the opposite sequence.

    q word j gets softmax_i(S[:, j]) · d'; d word i gets softmax_j(S[i, :]) · q'.
    Returns (align_for_d [.., |d|, e], align_for_q [.., |q|, e]).
    """
    align_for_q = T.matmul(T.swapaxes(T.softmax(s, axis=-2), -1, -2), d_prime)
    align_for_d = T.matmul(T.softmax(s, axis=-1), q_prime)
    return align_for_d, align_for_q


def _cast_features(w_prime, cast, w_cat, w_diff, w_prod, enabled: bool):
    """Three scalars per word for one cast: concat, difference, product.

    A disabled cast contributes the zero vector, so the difference and
    product features vanish and the concat feature degrades to W·[w'; 0].
    """
    if enabled:
        cat = T.concat([w_prime, cast], axis=-1)
        diff = T.sub(cast, w_prime)
        prod = T.mul(cast, w_prime)
        return [T.matmul(cat, w_cat), T.matmul(diff, w_diff), T.matmul(prod, w_prod)]
    zeros = Tensor(np.zeros(w_prime.data.shape))
    cat = T.concat([w_prime, zeros], axis=-1)
    zero_feat = Tensor(np.zeros(w_prime.data.shape[:-1] + (1,)))
    return [T.matmul(cat, w_cat), zero_feat, zero_feat]


def compress(params: McanParams, w_prime, align, intra, mean, mx,
             enabled=(True, True, True, True)) -> Tensor:
    """Map the four casts of every word into twelve scalar features.

    Order follows the cast order (align, intra, mean, max), three features
    each: W·[w'; cast], W·(cast − w'), W·(cast ⊙ w'). Inputs are [.., n, e];
    output is [.., n, 12].
    """
    e = w_prime.data.shape[-1]
    for v in (align, intra, mean, mx):
        if v.data.shape[-1] != e:
            raise ValueError("compress inputs must share the feature dimension")
    ws = params.compressors
    feats = []
    for k, cast in enumerate((align, intra, mean, mx)):
        feats.extend(_cast_features(w_prime, cast,
                                    ws[3 * k], ws[3 * k + 1], ws[3 * k + 2],
                                    enabled[k]))
    return T.concat(feats, axis=-1)


def mcan_extract(params: McanParams, d_words: Tensor, q_words: Tensor,
                 flags: AblationFlags | None = None):
    """Full cast pipeline over a sequence pair.

    d_words is [n, e] (or batched); q_words may carry a leading candidate
    batch axis [k, m, e]. Returns (f_d, f_q), the twelve features per word
    on each side, batched like the inter-attention results.
    """
    flags = flags or AblationFlags()
    if d_words.data.shape[-2] == 0 or q_words.data.shape[-2] == 0:
        raise ValueError("mcan_extract on an empty sequence")
    if flags.highway_encoder:
        d_prime = highway_forward(params.highway, d_words)
        q_prime = highway_forward(params.highway, q_words)
    else:
        d_prime, q_prime = d_words, q_words

    e = d_prime.data.shape[-1]
    n = d_prime.data.shape[-2]
    m = q_prime.data.shape[-2]
    batch = np.broadcast_shapes(d_prime.data.shape[:-2], q_prime.data.shape[:-2])

    def zeros(*shape):
        return Tensor(np.zeros(shape))

    if flags.intra_attention:
        intra_d = intra_attention(params.m_intra_d, d_prime)
        intra_q = intra_attention(params.m_intra_q, q_prime)
    else:
        intra_d = zeros(*d_prime.data.shape)
        intra_q = zeros(*q_prime.data.shape)

    if flags.inter_attention:
        s_max = inter_similarity(params.m_max, d_prime, q_prime)
        s_mean = inter_similarity(params.m_mean, d_prime, q_prime)
        s_align = inter_similarity(params.m_align, d_prime, q_prime)
        max_d, max_q = pooled_cast("max", s_max, d_prime, q_prime)
        mean_d, mean_q = pooled_cast("mean", s_mean, d_prime, q_prime)
        align_d, align_q = alignment_cast(s_align, d_prime, q_prime)
    else:
        max_d = mean_d = zeros(*batch, e)
        max_q = mean_q = zeros(*batch, e)
        align_d = zeros(*batch, n, e)
        align_q = zeros(*batch, m, e)

    def expand_rows(x, rows):
        # broadcast a per-sequence vector [.., e] to every word [.., rows, e]
        tgt = batch + (rows, e)
        if x.data.shape == tgt:
            return x
        v = T.reshape(x, x.data.shape[:-1] + (1, e)) if x.data.ndim == len(batch) + 1 else x
        return T.broadcast_to(v, tgt)

    def expand_seq(x, rows):
        tgt = batch + (rows, e)
        return x if x.data.shape == tgt else T.broadcast_to(x, tgt)

    enabled = (flags.inter_attention, flags.intra_attention,
               flags.inter_attention, flags.inter_attention)
    f_d = compress(params, expand_seq(d_prime, n), expand_seq(align_d, n),
                   expand_seq(intra_d, n), expand_rows(mean_d, n),
                   expand_rows(max_d, n), enabled)
    f_q = compress(params, expand_seq(q_prime, m), expand_seq(align_q, m),
                   expand_seq(intra_q, m), expand_rows(mean_q, m),
                   expand_rows(max_q, m), enabled)
    return f_d, f_q
