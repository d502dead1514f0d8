"""Acceptance gate: eight checks, one printed verdict line each.

Run with `pytest tests/test_acceptance.py -v -s` to see the verdict lines.
The learning check (criterion 4) trains at the pinned scale and dominates
the runtime (~10 minutes CPU); everything else is seconds.
"""

import math
import time

import numpy as np
import pytest

from rapnet import tensor as T
from rapnet.cli import build_gradcheck_fixture
from rapnet.data import GenConfig, build_vocab, gen_synthetic
from rapnet.layers import HighwayParams, LstmParams, bilstm_sequence, highway_forward, lstm_step
from rapnet.mcan import (AblationFlags, McanParams, alignment_cast, compress,
                         inter_similarity, intra_attention, mcan_extract,
                         pooled_cast)
from rapnet.model import Model, bce_loss
from rapnet.tensor import Tensor, grad_check
from rapnet.traineval import (TrainConfig, evaluate, report_from_scores,
                              train, write_history)


def verdict(n, name, ok, detail=""):
    line = f"[PRIMARY] criterion {n} ({name}): {'PASS' if ok else 'FAIL'} {detail}"
    print("\n" + line)
    assert ok, line


def np_softmax(v, axis=-1):
    z = np.exp(v - v.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def total(x):
    while x.data.ndim:
        x = T.sum_axis(x, 0)
    return x


# ---------------------------------------------------------------------------
# criterion 1: gradient integrity


def test_criterion_1_gradient_integrity():
    start = time.monotonic()
    model, inst = build_gradcheck_fixture(e=4, h=3)

    def loss_fn(_params):
        return bce_loss(model.forward_probs(inst), inst.labels)

    full_err = grad_check(loss_fn, model.named())

    rng = np.random.default_rng(100)
    layer_errs = {}

    hw = HighwayParams(Tensor(rng.uniform(-0.7, 0.7, (3, 3)), "wg"),
                       Tensor(rng.uniform(-0.7, 0.7, (3, 3)), "wh"))
    w = Tensor(rng.uniform(-0.7, 0.7, 3), "w")
    layer_errs["highway"] = grad_check(
        lambda ps: total(highway_forward(hw, w) * highway_forward(hw, w)),
        dict(hw.named(), w=w))

    lp = LstmParams.create(rng, 3, 2, "p")
    for t in (lp.w_x, lp.w_h, lp.b):
        t.data = rng.uniform(-0.5, 0.5, size=t.data.shape)
    x = Tensor(rng.uniform(-0.5, 0.5, 3), "x")
    h0 = Tensor(rng.uniform(-0.5, 0.5, 2), "h0")
    c0 = Tensor(rng.uniform(-0.5, 0.5, 2), "c0")

    def lstm_loss(ps):
        h, c = lstm_step(lp, x, h0, c0)
        return total(h * h + c)

    layer_errs["lstm_step"] = grad_check(lstm_loss, dict(lp.named(), x=x, h0=h0, c0=c0))

    fwd = LstmParams.create(rng, 3, 2, "f")
    bwd = LstmParams.create(rng, 3, 2, "b")
    for p in (fwd, bwd):
        for t in (p.w_x, p.w_h, p.b):
            t.data = rng.uniform(-0.5, 0.5, size=t.data.shape)
    seq = Tensor(rng.uniform(-0.5, 0.5, (4, 3)), "seq")

    def bilstm_loss(ps):
        h, c = bilstm_sequence(fwd, bwd, seq)
        return total(h * h + c)

    layer_errs["bilstm"] = grad_check(bilstm_loss,
                                      dict(fwd.named(), **bwd.named(), seq=seq))

    mrng = np.random.default_rng(50)
    mp = McanParams.create(mrng, 3)
    for t in mp.named().values():
        t.data = mrng.uniform(-0.6, 0.6, size=t.data.shape)
    d = Tensor(mrng.uniform(-0.6, 0.6, (2, 3)), "d")
    q = Tensor(mrng.uniform(-0.6, 0.6, (2, 3)), "q")

    def mcan_loss(ps):
        f_d, f_q = mcan_extract(mp, d, q)
        return total(f_d * f_d) + total(f_q * f_q)

    layer_errs["mcan"] = grad_check(mcan_loss, dict(mp.named(), d=d, q=q))

    elapsed = time.monotonic() - start
    ok = (full_err < 1e-4 and all(e < 1e-6 for e in layer_errs.values())
          and elapsed < 30.0)
    detail = (f"full model {full_err:.2e} (<1e-4), layers "
              + ", ".join(f"{k} {v:.2e}" for k, v in layer_errs.items())
              + f" (<1e-6), {elapsed:.1f}s (<30s)")
    verdict(1, "gradient integrity", ok, detail)


# ---------------------------------------------------------------------------
# criterion 2: oracle equivalence


def reference_metrics(score_sets, label_sets, ks=(1, 2, 5, 10)):
    ranks = []
    for s, y in zip(score_sets, label_sets):
        if not any(y):
            ranks.append(None)
            continue
        order = sorted(range(len(s)), key=lambda j: (-s[j], j))
        ranks.append(float(next(r for r, j in enumerate(order, 1) if y[j])))
    eligible = [r for r in ranks if r is not None]
    recall = {k: sum(1 for r in eligible if r <= k) / len(eligible) for k in ks}
    value = float(np.mean([1.0 / r for r in eligible]))
    return ranks, recall, value, (recall[10] + value) / 2.0


def reference_subtask4(score_sets, label_sets, tau, ks=(1, 2, 5, 10)):
    ranks = []
    for s, y in zip(score_sets, label_sets):
        has_pos = any(y)
        if max(s) < tau:
            ranks.append(1.0 if not has_pos else math.inf)
        elif not has_pos:
            ranks.append(math.inf)
        else:
            order = sorted(range(len(s)), key=lambda j: (-s[j], j))
            ranks.append(float(next(r for r, j in enumerate(order, 1) if y[j])))
    recall = {k: sum(1 for r in ranks if r <= k) / len(ranks) for k in ks}
    value = float(np.mean([0.0 if math.isinf(r) else 1.0 / r for r in ranks]))
    return ranks, recall, value


def test_criterion_2_oracle_equivalence():
    rng = np.random.default_rng(101)
    score_sets, label_sets = [], []
    for i in range(1000):
        k = int(rng.integers(2, 12))
        scores = rng.random(k)
        labels = np.zeros(k, dtype=int)
        if i % 5:  # leave a fifth with no positive for the subtask-4 check
            for j in rng.choice(k, size=int(rng.integers(1, min(4, k) + 1)),
                                replace=False):
                labels[j] = 1
        score_sets.append(scores)
        label_sets.append(labels)

    with_pos = [(s, y) for s, y in zip(score_sets, label_sets) if y.any()]
    report = report_from_scores([s for s, _ in with_pos],
                                [y for _, y in with_pos], subtask=1)
    _, recall, value, avg = reference_metrics([s for s, _ in with_pos],
                                              [y for _, y in with_pos])
    metrics_exact = (all(report.recall_at[k] == recall[k] for k in (1, 2, 5, 10))
                     and report.mrr == value and report.average == avg)

    report4 = report_from_scores(score_sets, label_sets, subtask=4, tau=0.5)
    ranks4, recall4, value4 = reference_subtask4(score_sets, label_sets, 0.5)
    subtask4_exact = (report4.ranks == ranks4
                      and all(report4.recall_at[k] == recall4[k]
                              for k in (1, 2, 5, 10))
                      and report4.mrr == value4)

    worst = 0.0
    for case in range(100):
        crng = np.random.default_rng(1000 + case)
        n = int(crng.integers(1, 5))
        m = int(crng.integers(1, 5))
        e = int(crng.integers(2, 5))

        v = crng.normal(scale=3.0, size=n)
        worst = max(worst, np.abs(T.softmax(Tensor(v)).data
                                  - np.exp(v) / np.exp(v).sum()).max())

        hw = HighwayParams(Tensor(crng.normal(size=(e, e))),
                           Tensor(crng.normal(size=(e, e))))
        w = crng.normal(size=e)
        gate = 1 / (1 + np.exp(-(hw.w_g.data @ w)))
        want = gate * np.maximum(hw.w_h.data @ w, 0.0) + (1 - gate) * w
        worst = max(worst, np.abs(highway_forward(hw, Tensor(w)).data - want).max())

        lp = LstmParams.create(crng, e, 2, "p")
        for t in (lp.w_x, lp.w_h, lp.b):
            t.data = crng.normal(size=t.data.shape)
        x, h0, c0 = crng.normal(size=e), crng.normal(size=2), crng.normal(size=2)
        z = lp.w_x.data @ x + lp.w_h.data @ h0 + lp.b.data
        i_g = 1 / (1 + np.exp(-z[:2]))
        f_g = 1 / (1 + np.exp(-z[2:4]))
        g_g = np.tanh(z[4:6])
        o_g = 1 / (1 + np.exp(-z[6:]))
        c_want = f_g * c0 + i_g * g_g
        h_want = o_g * np.tanh(c_want)
        h_got, c_got = lstm_step(lp, Tensor(x), Tensor(h0), Tensor(c0))
        worst = max(worst, np.abs(h_got.data - h_want).max(),
                    np.abs(c_got.data - c_want).max())

        d = crng.normal(size=(n, e))
        q = crng.normal(size=(m, e))
        mi = crng.normal(size=(e, e))
        got = intra_attention(Tensor(mi), Tensor(d)).data
        s = d @ mi @ d.T
        want = np_softmax(s, axis=0).T @ d
        worst = max(worst, np.abs(got - want).max())

        s = Tensor(crng.normal(size=(n, m)))
        for kind, pool in (("max", np.max), ("mean", np.mean)):
            vec_d, vec_q = pooled_cast(kind, s, Tensor(d), Tensor(q))
            worst = max(worst,
                        np.abs(vec_d.data - np_softmax(pool(s.data, 1)) @ d).max(),
                        np.abs(vec_q.data - np_softmax(pool(s.data, 0)) @ q).max())
        a_d, a_q = alignment_cast(s, Tensor(d), Tensor(q))
        worst = max(worst,
                    np.abs(a_d.data - np_softmax(s.data, -1) @ q).max(),
                    np.abs(a_q.data - np_softmax(s.data, 0).T @ d).max())

        mp = McanParams.create(crng, e)
        for t in mp.compressors:
            t.data = crng.normal(size=t.data.shape)
        casts = [crng.normal(size=(n, e)) for _ in range(5)]
        got = compress(mp, *(Tensor(c) for c in casts)).data
        ws = [t.data[:, 0] for t in mp.compressors]
        wp = casts[0]
        for r in range(n):
            for k, cast in enumerate(casts[1:]):
                want = [np.concatenate([wp[r], cast[r]]) @ ws[3 * k],
                        (cast[r] - wp[r]) @ ws[3 * k + 1],
                        (cast[r] * wp[r]) @ ws[3 * k + 2]]
                worst = max(worst, np.abs(got[r, 3 * k:3 * k + 3] - want).max())

    ok = metrics_exact and subtask4_exact and worst < 1e-10
    verdict(2, "oracle equivalence", ok,
            f"metrics exact over 1000 sets: {metrics_exact}, "
            f"subtask-4 exact: {subtask4_exact}, "
            f"worst formula deviation {worst:.1e} (<1e-10)")


# ---------------------------------------------------------------------------
# criterion 3: attention invariants


def test_criterion_3_attention_invariants():
    rng = np.random.default_rng(102)
    worst_sum = 0.0
    envelope_ok = True
    for _ in range(100):
        n = int(rng.integers(1, 6))
        m = int(rng.integers(1, 6))
        s = rng.normal(scale=4.0, size=(n, m))
        for axis in (0, 1):
            w = T.softmax(Tensor(s), axis=axis).data
            worst_sum = max(worst_sum, np.abs(w.sum(axis=axis) - 1.0).max())
            if (w < 0).any():
                envelope_ok = False
        d = rng.normal(size=(n, 3))
        q = rng.normal(size=(m, 3))
        a_d, a_q = alignment_cast(Tensor(s), Tensor(d), Tensor(q))
        envelope_ok &= bool((a_q.data >= d.min(axis=0) - 1e-12).all()
                            and (a_q.data <= d.max(axis=0) + 1e-12).all()
                            and (a_d.data >= q.min(axis=0) - 1e-12).all()
                            and (a_d.data <= q.max(axis=0) + 1e-12).all())
        for kind in ("max", "mean"):
            vec_d, vec_q = pooled_cast(kind, Tensor(s), Tensor(d), Tensor(q))
            envelope_ok &= bool((vec_d.data >= d.min(axis=0) - 1e-12).all()
                                and (vec_d.data <= d.max(axis=0) + 1e-12).all()
                                and (vec_q.data >= q.min(axis=0) - 1e-12).all()
                                and (vec_q.data <= q.max(axis=0) + 1e-12).all())

    mp = McanParams.create(rng, 3)
    f_d, f_q = mcan_extract(mp, Tensor(rng.normal(size=(3, 3))),
                            Tensor(rng.normal(size=(2, 3))))
    width_ok = f_d.data.shape[-1] == 12 and f_q.data.shape[-1] == 12

    ok = worst_sum < 1e-9 and envelope_ok and width_ok
    verdict(3, "attention invariants", ok,
            f"worst weight-sum deviation {worst_sum:.1e} (<1e-9), "
            f"convex envelope: {envelope_ok}, feature width 12: {width_ok}")


# ---------------------------------------------------------------------------
# criterion 4: learning check at the pinned scale


def test_criterion_4_learning_check():
    start = time.monotonic()
    train_c = gen_synthetic(GenConfig(n_dialogues=2000, vocab_size=200,
                                      k_candidates=10, seed=0))
    dev_c = gen_synthetic(GenConfig(n_dialogues=200, vocab_size=200,
                                    k_candidates=10, seed=1))
    vocab = build_vocab(train_c)

    rap_mrrs = []
    for seed in (0, 1, 2):
        cfg = TrainConfig(model_kind="rapnet", lr=0.001, epochs=10,
                          e=32, h=32, seed=seed)
        result = train(cfg, train_c, dev_c, vocab)
        rap_mrrs.append(max(r["dev_mrr"] for r in result.history))

    de_cfg = TrainConfig(model_kind="dual_encoder", lr=0.001, epochs=10,
                         e=32, h=32, seed=0)
    de_mrr = max(r["dev_mrr"] for r in
                 train(de_cfg, train_c, dev_c, vocab).history)

    elapsed = time.monotonic() - start
    hits = sum(1 for v in rap_mrrs if v >= 0.80)
    ok = hits >= 2 and de_mrr >= 0.35 and elapsed < 600.0
    verdict(4, "learning check", ok,
            f"RAP-Net dev MRR {[round(v, 4) for v in rap_mrrs]} "
            f"(>=0.80 in {hits}/3 seeds, need 2), "
            f"Dual Encoder {de_mrr:.4f} (>=0.35), {elapsed:.0f}s (<600s)")


# ---------------------------------------------------------------------------
# criterion 5: directional ablation


def test_criterion_5_directional_ablation():
    train_c = gen_synthetic(GenConfig(n_dialogues=300, seed=200))
    dev_c = gen_synthetic(GenConfig(n_dialogues=60, seed=201))
    vocab = build_vocab(train_c)

    def mean_avg(flags):
        avgs = []
        for seed in (0, 1, 2):
            cfg = TrainConfig(model_kind="rapnet", flags=flags, epochs=1,
                              e=16, h=16, lr=0.003, seed=seed)
            result = train(cfg, train_c, dev_c, vocab)
            avgs.append(max(r["dev_avg"] for r in result.history))
        return float(np.mean(avgs))

    full = mean_avg(AblationFlags())
    no_inter = mean_avg(AblationFlags(inter_attention=False))
    # the remaining single-removal variants are reported, not asserted
    reported = {name: mean_avg(flags) for name, flags in (
        ("- intra-attention", AblationFlags(intra_attention=False)),
        ("- highway encoder", AblationFlags(highway_encoder=False)),
        ("- dynamic pooling", AblationFlags(dynamic_pooling=False)))}

    ok = no_inter < full
    detail = (f"full {full:.4f} > no-inter-attention {no_inter:.4f}; reported: "
              + ", ".join(f"{k} {v:.4f}" for k, v in reported.items()))
    verdict(5, "directional ablation", ok, detail)


# ---------------------------------------------------------------------------
# criterion 6: knowledge-feature effect


def test_criterion_6_knowledge_features():
    train_c = gen_synthetic(GenConfig(n_dialogues=300, with_knowledge=True,
                                      seed=210))
    dev_c = gen_synthetic(GenConfig(n_dialogues=60, with_knowledge=True,
                                    seed=211))
    vocab = build_vocab(train_c)

    def mean_avg(flags):
        avgs = []
        for seed in (0, 1, 2):
            cfg = TrainConfig(model_kind="rapnet", flags=flags, epochs=3,
                              e=16, h=16, seed=seed)
            result = train(cfg, train_c, dev_c, vocab)
            avgs.append(max(r["dev_avg"] for r in result.history))
        return float(np.mean(avgs))

    with_f = mean_avg(AblationFlags())
    without_f = mean_avg(AblationFlags(use_knowledge=False))
    gain = with_f - without_f
    ok = gain >= 0.05
    verdict(6, "knowledge-feature effect", ok,
            f"with F(w) {with_f:.4f} vs without {without_f:.4f}, "
            f"gain {gain:.4f} (>=0.05)")


# ---------------------------------------------------------------------------
# criterion 7: determinism and persistence


def test_criterion_7_determinism_and_persistence(tmp_path):
    train_c = gen_synthetic(GenConfig(n_dialogues=40, vocab_size=60,
                                      k_candidates=4, seed=230))
    dev_c = gen_synthetic(GenConfig(n_dialogues=12, vocab_size=60,
                                    k_candidates=4, seed=231))
    vocab = build_vocab(train_c)
    cfg = TrainConfig(model_kind="rapnet", epochs=2, e=8, h=6, seed=4)

    a = train(cfg, train_c, dev_c, vocab)
    b = train(cfg, train_c, dev_c, vocab)
    write_history(a.history, tmp_path / "a.jsonl")
    write_history(b.history, tmp_path / "b.jsonl")
    history_identical = ((tmp_path / "a.jsonl").read_bytes()
                         == (tmp_path / "b.jsonl").read_bytes())

    a.model.vocab = vocab
    a.model.save(tmp_path / "model.bin")
    reloaded = Model.load(tmp_path / "model.bin")
    bit_exact = all((p.data == reloaded.named()[name].data).all()
                    for name, p in a.model.named().items())
    before = evaluate(a.model, dev_c, vocab, subtask=1)
    after = evaluate(reloaded, dev_c, reloaded.vocab, subtask=1)
    metrics_identical = (before.mrr == after.mrr
                         and before.recall_at == after.recall_at
                         and before.ranks == after.ranks)

    ok = history_identical and bit_exact and metrics_identical
    verdict(7, "determinism and persistence", ok,
            f"history bitwise-identical: {history_identical}, "
            f"checkpoint bit-exact: {bit_exact}, "
            f"reloaded metrics identical: {metrics_identical}")


# ---------------------------------------------------------------------------
# criterion 8: subtask-4 no-answer protocol


def test_criterion_8_subtask_4_protocol():
    train_c = gen_synthetic(GenConfig(n_dialogues=400, subtask=4, seed=220))
    dev_c = gen_synthetic(GenConfig(n_dialogues=100, subtask=4, seed=221))
    vocab = build_vocab(train_c)
    cfg = TrainConfig(model_kind="rapnet", epochs=4, e=16, h=8, seed=0,
                      subtask=4)
    result = train(cfg, train_c, dev_c, vocab)
    report = evaluate(result.model, dev_c, vocab, subtask=4, tau="auto")
    ok = report.noans_precision >= 0.6 and report.noans_recall >= 0.6
    verdict(8, "subtask-4 protocol", ok,
            f"tau {report.tau:.2f}, no-answer precision "
            f"{report.noans_precision:.3f} / recall {report.noans_recall:.3f} "
            f"(each >=0.6)")
