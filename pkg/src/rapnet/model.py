"""End-to-end scoring models: RAP-Net plus Dual Encoder and HRED baselines.

RAP-Net pipeline per candidate: MCAN feature extraction over the
(context, candidate) pair, word feature augmentation, dynamic-pooling
bi-LSTM context encoding, candidate encoding, highway scorer. All
candidates of a dialogue are scored in one batched forward (grouped by
candidate length, so no padding is ever needed) and combined into one
binary cross-entropy loss.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import Instance
from .layers import (HighwayParams, LstmParams, bilstm_sequence, highway_forward,
                     init_matrix, lstm_last_hidden)
from .mcan import AblationFlags, McanParams, mcan_extract
from .tensor import Tensor


@dataclass
class RapNetParams:
    embedding: Tensor  # [V, e]
    mcan: McanParams
    lstm1_f: LstmParams  # shared by context and candidate encoders
    lstm1_b: LstmParams
    lstm2_f: LstmParams
    lstm2_b: LstmParams
    scorer_h1: HighwayParams  # [8h, 8h]
    scorer_h2: HighwayParams
    scorer_w: Tensor  # [8h, 1]
    scorer_b: Tensor  # [1]

    @classmethod
    def create(cls, rng: np.random.Generator, vocab_size: int, e: int, h: int,
               n_features: int) -> "RapNetParams":
        in1 = e + n_features + 12
        return cls(
            embedding=init_matrix(rng, vocab_size, e, "embedding"),
            mcan=McanParams.create(rng, e),
            lstm1_f=LstmParams.create(rng, in1, h, "lstm1_f"),
            lstm1_b=LstmParams.create(rng, in1, h, "lstm1_b"),
            lstm2_f=LstmParams.create(rng, 2 * h, h, "lstm2_f"),
            lstm2_b=LstmParams.create(rng, 2 * h, h, "lstm2_b"),
            scorer_h1=HighwayParams.create(rng, 8 * h, "scorer_h1"),
            scorer_h2=HighwayParams.create(rng, 8 * h, "scorer_h2"),
            scorer_w=init_matrix(rng, 8 * h, 1, "scorer_w"),
            scorer_b=Tensor(np.zeros(1), name="scorer_b"),
        )

    @property
    def e(self):
        return self.embedding.data.shape[1]

    @property
    def h(self):
        return self.lstm1_f.h_dim

    @property
    def n_features(self):
        return self.lstm1_f.in_dim - self.e - 12

    def named(self) -> dict:
        out = {"embedding": self.embedding}
        out.update(self.mcan.named())
        for p in (self.lstm1_f, self.lstm1_b, self.lstm2_f, self.lstm2_b):
            out.update(p.named())
        out.update(self.scorer_h1.named())
        out.update(self.scorer_h2.named())
        out["scorer_w"] = self.scorer_w
        out["scorer_b"] = self.scorer_b
        return out


@dataclass
class ContextEncoding:
    r_c: Tensor       # [.., 2h]
    pooled: Tensor    # per-utterance vectors [.., l, 2h]
    first_layer: tuple  # (h_cat, c_cat) of the word-level bi-LSTM


def augment(words: Tensor, f_mcan: Tensor, feats: Tensor) -> Tensor:
    """Per-word concatenation [embedding; F(w); f_mcan(w)]."""
    if not (words.data.shape[:-1] == f_mcan.data.shape[:-1] == feats.data.shape[:-1]):
        raise ValueError(
            f"augment row mismatch: {words.data.shape}, {feats.data.shape}, "
            f"{f_mcan.data.shape}")
    return T.concat([words, feats, f_mcan], axis=-1)


def _take_position(seq: Tensor, pos: int, lo: int, length: int) -> Tensor:
    """seq[.., pos, lo:lo+length] with the position axis dropped."""
    row = T.narrow(T.narrow(seq, -2, pos, 1), -1, lo, length)
    return T.reshape(row, seq.data.shape[:-2] + (length,))


def encode_context(params: RapNetParams, seq: Tensor, lengths: list,
                   flags: AblationFlags | None = None) -> ContextEncoding:
    """Dynamic-pooling recurrent encoding of a concatenated utterance sequence.

    seq is the context's word features [.., n, d] with utterance i owning
    the next lengths[i] positions. The first bi-LSTM runs over the whole
    sequence, so its state flows across utterance boundaries in both
    directions. Each utterance is then max-pooled over its own positions
    (or, with dynamic pooling disabled, represented by its boundary hidden
    states) and a second bi-LSTM runs over the per-utterance vectors. The
    dialogue representation is [forward cell at l; backward cell at 1].
    """
    flags = flags or AblationFlags()
    if not lengths:
        raise ValueError("empty dialogue")
    if any(n == 0 for n in lengths) or sum(lengths) != seq.data.shape[-2]:
        raise ValueError(f"bad utterance lengths {lengths} for {seq.data.shape}")
    h = params.lstm1_f.h_dim
    h_cat, c_cat = bilstm_sequence(params.lstm1_f, params.lstm1_b, seq)

    pooled = []
    off = 0
    for n_i in lengths:
        if flags.dynamic_pooling:
            pooled.append(T.max_over_positions(T.narrow(h_cat, -2, off, n_i)))
        else:
            pooled.append(T.concat([_take_position(h_cat, off + n_i - 1, 0, h),
                                    _take_position(h_cat, off, h, h)], axis=-1))
        off += n_i
    pooled_seq = T.stack(pooled, axis=-2)
    _, c2 = bilstm_sequence(params.lstm2_f, params.lstm2_b, pooled_seq)
    r_c = T.concat([_take_position(c2, len(lengths) - 1, 0, h),
                    _take_position(c2, 0, h, h)], axis=-1)
    return ContextEncoding(r_c, pooled_seq, (h_cat, c_cat))


def encode_candidate(params: RapNetParams, candidate: Tensor,
                     pool: str = "cells") -> Tensor:
    """Bi-LSTM over the candidate from zero states, max-pooled states.

    pool selects which state stream is pooled: "cells" follows the r^X
    equation, "hiddens" follows the surrounding prose.
    """
    if candidate.data.shape[-2] == 0:
        raise ValueError("empty candidate")
    if pool not in ("cells", "hiddens"):
        raise ValueError(f"unknown candidate pool {pool!r}")
    h_cat, c_cat = bilstm_sequence(params.lstm1_f, params.lstm1_b, candidate)
    return T.max_over_positions(c_cat if pool == "cells" else h_cat)


def score(params: RapNetParams, r_c: Tensor, r_x: Tensor) -> Tensor:
    """sigmoid(H1(H2([r^C; r^X; r^C⊙r^X; r^C−r^X])) · w + b), shape [..]."""
    squeeze = r_c.data.ndim == 1
    if squeeze:
        r_c = T.reshape(r_c, (1,) + r_c.data.shape)
        r_x = T.reshape(r_x, (1,) + r_x.data.shape)
    v = T.concat([r_c, r_x, r_c * r_x, r_c - r_x], axis=-1)
    hidden = highway_forward(params.scorer_h1, highway_forward(params.scorer_h2, v))
    logit = T.matmul(hidden, params.scorer_w) + params.scorer_b
    p = T.reshape(T.sigmoid(logit), logit.data.shape[:-1])
    if squeeze:
        p = T.reshape(p, ())
    return p


def bce_loss(probs: Tensor, labels) -> Tensor:
    """Negated Bernoulli log-likelihood, probabilities clamped to (0, 1)."""
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape != probs.data.shape:
        raise ValueError(f"labels shape {labels.shape} vs probs {probs.data.shape}")
    if not np.all((labels == 0.0) | (labels == 1.0)):
        raise ValueError("labels must be binary")
    p = T.clip(probs, 1e-7, 1.0 - 1e-7)
    y = Tensor(labels)
    ll = y * T.log(p) + (T.sub(1.0, y) * T.log(T.sub(1.0, p)))
    total = ll
    for ax in range(ll.data.ndim):
        total = T.sum_axis(total, axis=0)
    return -total


def forward(params: RapNetParams, inst: Instance,
            flags: AblationFlags | None = None,
            candidate_pool: str = "cells") -> Tensor:
    """Probabilities for every candidate of one dialogue, original order.

    The context encoding is recomputed per candidate because the context's
    MCAN features are candidate-conditioned; candidates of equal length
    are batched so the per-dialogue cost stays flat.
    """
    flags = flags or AblationFlags()
    if inst.n_features != params.n_features:
        raise ValueError(
            f"instance has {inst.n_features} knowledge features, "
            f"model expects {params.n_features}")
    k = len(inst.cand_ids)
    if k < 1:
        raise ValueError("empty candidate set")
    ctx_ids = np.concatenate([np.asarray(u, dtype=np.int64) for u in inst.utt_ids])
    ctx_f = np.concatenate(inst.utt_feats, axis=0)
    lengths = [len(u) for u in inst.utt_ids]

    groups: dict = {}
    for j, ids in enumerate(inst.cand_ids):
        groups.setdefault(len(ids), []).append(j)

    parts = [None] * k
    for m, idxs in groups.items():
        kg = len(idxs)
        ctx_emb = T.embed(params.embedding, ctx_ids)
        cand_mat = np.array([inst.cand_ids[j] for j in idxs], dtype=np.int64)
        cand_emb = T.embed(params.embedding, cand_mat)  # [kg, m, e]
        n = ctx_ids.size
        if flags.use_mcan:
            f_d, f_q = mcan_extract(params.mcan, ctx_emb, cand_emb, flags)
        else:
            f_d = Tensor(np.zeros((kg, n, 12)))
            f_q = Tensor(np.zeros((kg, m, 12)))
        ctx_emb_b = T.broadcast_to(ctx_emb, (kg, n, params.e))
        ctx_f_b = Tensor(np.broadcast_to(ctx_f, (kg,) + ctx_f.shape).copy())
        cand_f = Tensor(np.stack([inst.cand_feats[j] for j in idxs]))
        ctx_aug = augment(ctx_emb_b, f_d, ctx_f_b)
        cand_aug = augment(cand_emb, f_q, cand_f)

        enc = encode_context(params, ctx_aug, lengths, flags)
        r_x = encode_candidate(params, cand_aug, candidate_pool)
        p = score(params, enc.r_c, r_x)  # [kg]
        for pos, j in enumerate(idxs):
            parts[j] = T.narrow(p, -1, pos, 1)
    return T.concat(parts, axis=-1)


# ---------------------------------------------------------------------------
# baselines


@dataclass
class DualEncoderParams:
    embedding: Tensor
    lstm: LstmParams  # tied between context and response encoders
    m: Tensor         # [h, h]
    b: Tensor         # [1]

    @classmethod
    def create(cls, rng, vocab_size: int, e: int, h: int) -> "DualEncoderParams":
        return cls(init_matrix(rng, vocab_size, e, "embedding"),
                   LstmParams.create(rng, e, h, "lstm"),
                   init_matrix(rng, h, h, "bilinear_m"),
                   Tensor(np.zeros(1), name="bilinear_b"))

    def named(self) -> dict:
        out = {"embedding": self.embedding, "bilinear_m": self.m, "bilinear_b": self.b}
        out.update(self.lstm.named())
        return out


def _lstm_last_hidden(p: LstmParams, seq: Tensor) -> Tensor:
    return lstm_last_hidden(p, seq)


def _bilinear_probs(m: Tensor, b: Tensor, c: Tensor, r: Tensor) -> Tensor:
    """sigmoid(c^T M r + b) for one context against [kg, h] responses."""
    cm = T.matmul(T.reshape(c, (1, c.data.shape[-1])), m)  # [1, h]
    logits = T.matmul(cm, T.swapaxes(r, -1, -2)) + b       # [1, kg]
    return T.reshape(T.sigmoid(logits), (r.data.shape[0],))


def dual_encoder_forward(params: DualEncoderParams, inst: Instance) -> Tensor:
    """Weight-tied LSTM encodings of flat context and candidate, bilinear score."""
    ctx_ids = np.concatenate([np.asarray(u, dtype=np.int64) for u in inst.utt_ids])
    if ctx_ids.size == 0 or not inst.cand_ids:
        raise ValueError("empty input")
    c = _lstm_last_hidden(params.lstm, T.embed(params.embedding, ctx_ids))
    k = len(inst.cand_ids)
    parts = [None] * k
    groups: dict = {}
    for j, ids in enumerate(inst.cand_ids):
        groups.setdefault(len(ids), []).append(j)
    for m_len, idxs in groups.items():
        mat = np.array([inst.cand_ids[j] for j in idxs], dtype=np.int64)
        r = _lstm_last_hidden(params.lstm, T.embed(params.embedding, mat))
        p = _bilinear_probs(params.m, params.b, c, r)
        for pos, j in enumerate(idxs):
            parts[j] = T.narrow(p, -1, pos, 1)
    return T.concat(parts, axis=-1)


@dataclass
class HredParams:
    embedding: Tensor
    lstm1: LstmParams  # utterance level, also encodes the candidate
    lstm2: LstmParams  # conversation level
    m: Tensor
    b: Tensor

    @classmethod
    def create(cls, rng, vocab_size: int, e: int, h: int) -> "HredParams":
        return cls(init_matrix(rng, vocab_size, e, "embedding"),
                   LstmParams.create(rng, e, h, "lstm1"),
                   LstmParams.create(rng, h, h, "lstm2"),
                   init_matrix(rng, h, h, "bilinear_m"),
                   Tensor(np.zeros(1), name="bilinear_b"))

    def named(self) -> dict:
        out = {"embedding": self.embedding, "bilinear_m": self.m, "bilinear_b": self.b}
        out.update(self.lstm1.named())
        out.update(self.lstm2.named())
        return out


def hred_forward(params: HredParams, inst: Instance) -> Tensor:
    """Hierarchical context encoding; each utterance encoded separately."""
    if not inst.utt_ids or not inst.cand_ids:
        raise ValueError("empty input")
    utt_vecs = []
    for ids in inst.utt_ids:
        emb = T.embed(params.embedding, np.asarray(ids, dtype=np.int64))
        utt_vecs.append(_lstm_last_hidden(params.lstm1, emb))
    c = _lstm_last_hidden(params.lstm2, T.stack(utt_vecs, axis=-2))
    k = len(inst.cand_ids)
    parts = [None] * k
    groups: dict = {}
    for j, ids in enumerate(inst.cand_ids):
        groups.setdefault(len(ids), []).append(j)
    for m_len, idxs in groups.items():
        mat = np.array([inst.cand_ids[j] for j in idxs], dtype=np.int64)
        r = _lstm_last_hidden(params.lstm1, T.embed(params.embedding, mat))
        p = _bilinear_probs(params.m, params.b, c, r)
        for pos, j in enumerate(idxs):
            parts[j] = T.narrow(p, -1, pos, 1)
    return T.concat(parts, axis=-1)


# ---------------------------------------------------------------------------
# model wrapper and checkpoint persistence

_MAGIC = b"RAPNET1"


def save_checkpoint(path, config: dict, named_params: dict):
    """Flat named-parameter binary dump; bit-exact round-trip."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        cfg = "".join(f"{k}={v}\n" for k, v in sorted(config.items())).encode("utf-8")
        fh.write(struct.pack("<I", len(cfg)))
        fh.write(cfg)
        fh.write(struct.pack("<I", len(named_params)))
        for name in sorted(named_params):
            t = named_params[name]
            data = np.ascontiguousarray(t.data, dtype="<f8")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", data.ndim))
            for ext in data.shape:
                fh.write(struct.pack("<I", ext))
            fh.write(data.tobytes())


def load_checkpoint(path):
    """Returns (config dict, name -> ndarray)."""
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path}: not a RAPNET1 checkpoint")
        (cfg_len,) = struct.unpack("<I", fh.read(4))
        config = {}
        for line in fh.read(cfg_len).decode("utf-8").splitlines():
            key, _, value = line.partition("=")
            config[key] = value
        (count,) = struct.unpack("<I", fh.read(4))
        params = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<B", fh.read(1))
            shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(rank))
            n_items = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(8 * n_items), dtype="<f8").reshape(shape)
            params[name] = data.astype(np.float64).copy()
        return config, params


_FLAG_KEYS = ("inter_attention", "intra_attention", "highway_encoder",
              "dynamic_pooling", "use_mcan", "use_knowledge")


class Model:
    """Uniform scoring interface over RAP-Net and the baselines."""

    def __init__(self, kind: str, params, flags: AblationFlags,
                 vocab_size: int, e: int, h: int, n_features: int = 0,
                 candidate_pool: str = "cells"):
        self.kind = kind
        self.params = params
        self.flags = flags
        self.vocab_size = vocab_size
        self.e = e
        self.h = h
        self.n_features = n_features
        self.candidate_pool = candidate_pool
        self.vocab = None  # optional data.Vocab, persisted with checkpoints

    @classmethod
    def create(cls, kind: str, seed: int, vocab_size: int, e: int, h: int,
               n_features: int = 0, flags: AblationFlags | None = None,
               candidate_pool: str = "cells") -> "Model":
        flags = flags or AblationFlags()
        rng = np.random.default_rng(seed)
        if kind == "rapnet":
            params = RapNetParams.create(rng, vocab_size, e, h, n_features)
        elif kind == "dual_encoder":
            params = DualEncoderParams.create(rng, vocab_size, e, h)
            n_features = 0
        elif kind == "hred":
            params = HredParams.create(rng, vocab_size, e, h)
            n_features = 0
        else:
            raise ValueError(f"unknown model kind {kind!r}")
        return cls(kind, params, flags, vocab_size, e, h, n_features, candidate_pool)

    def named(self) -> dict:
        return self.params.named()

    def forward_probs(self, inst: Instance) -> Tensor:
        if self.kind == "rapnet":
            return forward(self.params, inst, self.flags, self.candidate_pool)
        if self.kind == "dual_encoder":
            return dual_encoder_forward(self.params, inst)
        return hred_forward(self.params, inst)

    def score_probs(self, inst: Instance) -> np.ndarray:
        """Forward without recording; for evaluation."""
        return self.forward_probs(inst).data.copy()

    def config(self) -> dict:
        cfg = {"kind": self.kind, "vocab_size": self.vocab_size, "e": self.e,
               "h": self.h, "n_features": self.n_features,
               "candidate_pool": self.candidate_pool}
        for key, val in self.flags.as_dict().items():
            cfg[f"flag_{key}"] = int(val)
        if self.vocab is not None:
            import json
            cfg["vocab"] = json.dumps(self.vocab.id_to_token)
        return cfg

    def save(self, path):
        save_checkpoint(path, self.config(), self.named())

    @classmethod
    def load(cls, path) -> "Model":
        config, arrays = load_checkpoint(path)
        flags = AblationFlags(**{k: bool(int(config[f"flag_{k}"])) for k in _FLAG_KEYS})
        model = cls.create(config["kind"], 0, int(config["vocab_size"]),
                           int(config["e"]), int(config["h"]),
                           int(config["n_features"]), flags,
                           config["candidate_pool"])
        named = model.named()
        if set(named) != set(arrays):
            missing = set(named) ^ set(arrays)
            raise ValueError(f"checkpoint parameter mismatch: {sorted(missing)}")
        for name, t in named.items():
            if t.data.shape != arrays[name].shape:
                raise ValueError(f"shape mismatch for {name}: "
                                 f"{t.data.shape} vs {arrays[name].shape}")
            t.data = arrays[name]
        if "vocab" in config:
            import json

            from .data import Vocab
            tokens = json.loads(config["vocab"])
            model.vocab = Vocab({t: i for i, t in enumerate(tokens)}, tokens)
        return model
