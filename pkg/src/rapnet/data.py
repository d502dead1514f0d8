"""Corpus model, JSONL ingestion, vocabulary and the synthetic generator.

The corpus file format is JSON Lines, one dialogue per line:

    {"id": str,
     "utterances": [{"speaker": 1, "text": str}, ...],
     "candidates": [str, ...],
     "labels": [0|1, ...],
     "knowledge": {"suggested": [str], "prior": [str]} | null}

Unknown fields are rejected. The synthetic generator stands in for the
DSTC7 Ubuntu/Advising corpora, which are not redistributable.
"""

from __future__ import annotations

import json
import random
import re
from dataclasses import dataclass, field

import numpy as np

PAD, UNK = "<pad>", "<unk>"
_COURSE_RE = re.compile(r"^[A-Za-z]+[0-9]+$")
_DIALOGUE_FIELDS = {"id", "utterances", "candidates", "labels", "knowledge"}


class CorpusError(ValueError):
    pass


def speaker_token(speaker_id: int) -> str:
    return f"<speaker{speaker_id}>"


def tokenize(text: str) -> list:
    """Whitespace split, lowercased except course-pattern tokens.

    Course names (letters followed by digits, e.g. EECS280) are kept
    verbatim so knowledge-set membership stays exact.
    """
    out = []
    for tok in text.split():
        out.append(tok if _COURSE_RE.match(tok) else tok.lower())
    return out


@dataclass
class Dialogue:
    dialogue_id: str
    utterances: list  # [(speaker_id, [token, ...])], speaker token prepended
    candidates: list  # [[token, ...], ...]
    labels: list      # [0|1, ...]
    knowledge: dict | None = None  # {"suggested": set, "prior": set}

    def n_positives(self) -> int:
        return sum(self.labels)


def _validate_labels(d: Dialogue, subtask: int):
    pos = d.n_positives()
    ok = {1: pos == 1, 3: 1 <= pos <= 5, 4: pos in (0, 1)}[subtask]
    if not ok:
        raise CorpusError(
            f"dialogue {d.dialogue_id!r}: {pos} positive labels violates subtask {subtask}")


def _parse_dialogue(obj: dict, lineno: int) -> Dialogue:
    unknown = set(obj) - _DIALOGUE_FIELDS
    if unknown:
        raise CorpusError(f"line {lineno}: unknown fields {sorted(unknown)}")
    try:
        utterances = []
        for u in obj["utterances"]:
            sp = int(u["speaker"])
            if not 1 <= sp <= 9:
                raise CorpusError(f"line {lineno}: speaker id {sp} out of range 1..9")
            toks = [speaker_token(sp)] + tokenize(u["text"])
            utterances.append((sp, toks))
        candidates = [tokenize(c) for c in obj["candidates"]]
        labels = [int(y) for y in obj["labels"]]
        kb = obj.get("knowledge")
        knowledge = None
        if kb is not None:
            knowledge = {"suggested": set(kb["suggested"]), "prior": set(kb["prior"])}
        d = Dialogue(str(obj["id"]), utterances, candidates, labels, knowledge)
    except (KeyError, TypeError) as exc:
        raise CorpusError(f"line {lineno}: malformed dialogue: {exc}") from exc
    if not d.utterances or any(len(t) == 0 for _, t in d.utterances):
        raise CorpusError(f"line {lineno}: empty utterance in dialogue {d.dialogue_id!r}")
    if not d.candidates or any(len(c) == 0 for c in d.candidates):
        raise CorpusError(f"line {lineno}: empty candidate in dialogue {d.dialogue_id!r}")
    if len(d.candidates) != len(d.labels):
        raise CorpusError(f"line {lineno}: {len(d.candidates)} candidates vs "
                          f"{len(d.labels)} labels in dialogue {d.dialogue_id!r}")
    if any(y not in (0, 1) for y in d.labels):
        raise CorpusError(f"line {lineno}: non-binary label in dialogue {d.dialogue_id!r}")
    return d


def load_corpus(path, subtask: int) -> list:
    """Load and validate a JSONL corpus for the given subtask (1, 3 or 4)."""
    if subtask not in (1, 3, 4):
        raise ValueError(f"unsupported subtask {subtask}")
    corpus = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"line {lineno}: invalid JSON: {exc}") from exc
            d = _parse_dialogue(obj, lineno)
            _validate_labels(d, subtask)
            corpus.append(d)
    return corpus


def save_corpus(corpus: list, path):
    """Write dialogues back to JSONL (speaker tokens are stripped again)."""
    with open(path, "w", encoding="utf-8") as fh:
        for d in corpus:
            obj = {
                "id": d.dialogue_id,
                "utterances": [{"speaker": sp, "text": " ".join(toks[1:])}
                               for sp, toks in d.utterances],
                "candidates": [" ".join(c) for c in d.candidates],
                "labels": list(d.labels),
                "knowledge": None if d.knowledge is None else {
                    "suggested": sorted(d.knowledge["suggested"]),
                    "prior": sorted(d.knowledge["prior"]),
                },
            }
            fh.write(json.dumps(obj) + "\n")


def knowledge_features(token: str, kb: dict | None) -> np.ndarray:
    """Binary (suggested, prior) membership pair for one token."""
    if kb is None:
        return np.zeros(2)
    return np.array([float(token in kb["suggested"]), float(token in kb["prior"])])


@dataclass
class Vocab:
    token_to_id: dict = field(default_factory=dict)
    id_to_token: list = field(default_factory=list)

    RESERVED = (PAD, UNK, speaker_token(1), speaker_token(2))

    def __len__(self):
        return len(self.id_to_token)

    def encode(self, token: str) -> int:
        return self.token_to_id.get(token, 1)

    def encode_seq(self, tokens: list) -> list:
        return [self.encode(t) for t in tokens]


def build_vocab(corpus: list, min_count: int = 1) -> Vocab:
    """Frequency-filtered vocabulary, deterministic ordering.

    Reserved ids: 0 <pad>, 1 <unk>, 2 <speaker1>, 3 <speaker2>; speaker
    tokens beyond two are reserved lazily as they occur. Regular tokens
    are ordered by frequency desc, then lexicographically.
    """
    if not corpus:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    counts = {}
    extra_speakers = set()
    for d in corpus:
        for _, toks in d.utterances:
            for t in toks:
                if t.startswith("<speaker") and t.endswith(">"):
                    if t not in Vocab.RESERVED:
                        extra_speakers.add(t)
                    continue
                counts[t] = counts.get(t, 0) + 1
        for c in d.candidates:
            for t in c:
                counts[t] = counts.get(t, 0) + 1
    vocab = Vocab()
    for tok in list(Vocab.RESERVED) + sorted(extra_speakers):
        vocab.token_to_id[tok] = len(vocab.id_to_token)
        vocab.id_to_token.append(tok)
    kept = sorted((t for t, c in counts.items() if c >= min_count),
                  key=lambda t: (-counts[t], t))
    for tok in kept:
        vocab.token_to_id[tok] = len(vocab.id_to_token)
        vocab.id_to_token.append(tok)
    return vocab


@dataclass
class Instance:
    """A dialogue encoded to ids plus per-token knowledge features."""

    utt_ids: list        # [[int, ...]] per utterance
    utt_feats: list      # [np.ndarray [n_i, n_f]] per utterance
    cand_ids: list       # [[int, ...]] per candidate
    cand_feats: list     # [np.ndarray [m_j, n_f]] per candidate
    labels: np.ndarray
    n_features: int


def encode_dialogue(d: Dialogue, vocab: Vocab, use_knowledge: bool,
                    max_utterances: int = 10, max_tokens: int = 50) -> Instance:
    """Truncate, id-encode and attach F(w) features."""
    kb = d.knowledge if use_knowledge else None
    n_f = 2 if kb is not None else 0

    def feats(tokens):
        if n_f == 0:
            return np.zeros((len(tokens), 0))
        return np.stack([knowledge_features(t, kb) for t in tokens])

    utts = d.utterances[-max_utterances:]
    utt_ids, utt_feats = [], []
    for _, toks in utts:
        toks = toks[:max_tokens]
        utt_ids.append(vocab.encode_seq(toks))
        utt_feats.append(feats(toks))
    cand_ids, cand_feats = [], []
    for c in d.candidates:
        c = c[:max_tokens]
        cand_ids.append(vocab.encode_seq(c))
        cand_feats.append(feats(c))
    return Instance(utt_ids, utt_feats, cand_ids, cand_feats,
                    np.array(d.labels, dtype=np.float64), n_f)


# ---------------------------------------------------------------------------
# synthetic corpus generation


@dataclass
class GenConfig:
    n_dialogues: int = 2000
    vocab_size: int = 200
    k_candidates: int = 10
    subtask: int = 1
    with_knowledge: bool = False
    seed: int = 0
    no_answer_fraction: float = 0.2
    paraphrase_drop: float = 0.2


def gen_synthetic(cfg: GenConfig) -> list:
    """Seeded topic-coherent corpus standing in for the DSTC7 data.

    Each dialogue draws a latent topic owning a disjoint token subset; the
    positive candidate shares at least two topic tokens with the context
    and negatives come from other topics. With knowledge enabled, every
    candidate instead comes from the dialogue's own topic and carries a
    course token; only the positive's course is in the suggested set, so
    the discriminative signal lives in the knowledge features.
    """
    if cfg.vocab_size < 50:
        raise ValueError("vocab_size must be at least 50")
    if cfg.k_candidates < 2:
        raise ValueError("need at least 2 candidates")
    if cfg.subtask not in (1, 3, 4):
        raise ValueError(f"unsupported subtask {cfg.subtask}")

    rng = random.Random(cfg.seed)
    n_common = max(6, cfg.vocab_size // 10)
    common = [f"fill{i:03d}" for i in range(n_common)]
    topic_pool = cfg.vocab_size - n_common
    topic_size = 8
    n_topics = max(2, topic_pool // topic_size)
    topics = [[f"top{t:02d}w{j}" for j in range(topic_size)] for t in range(n_topics)]
    courses = [f"CS{100 + i}" for i in range(n_topics)]

    corpus = []
    for idx in range(cfg.n_dialogues):
        t = rng.randrange(n_topics)
        topic = topics[t]
        n_utts = rng.randint(2, 3)
        used_topic_tokens = set()
        utterances = []
        for ui in range(n_utts):
            n_tok = rng.randint(2, 4)
            n_topic_tok = max(2, n_tok - 2)
            toks = rng.sample(topic, n_topic_tok)
            used_topic_tokens.update(toks)
            toks += rng.choices(common, k=n_tok - n_topic_tok)
            rng.shuffle(toks)
            sp = 1 + ui % 2
            utterances.append((sp, [speaker_token(sp)] + toks))

        shared = rng.sample(sorted(used_topic_tokens), min(3, len(used_topic_tokens)))

        def make_positive():
            toks = list(shared) + rng.choices(common, k=4 - len(shared))
            rng.shuffle(toks)
            return toks

        def make_negative():
            o = rng.randrange(n_topics - 1)
            o = o if o < t else o + 1
            toks = rng.sample(topics[o], 2) + rng.choices(common, k=2)
            rng.shuffle(toks)
            return toks

        knowledge = None
        if cfg.with_knowledge:
            # same-topic candidates: only the course token separates them
            suggested = {courses[t]}
            prior = {courses[rng.randrange(n_topics)]}
            knowledge = {"suggested": suggested, "prior": prior}
            for sp, toks in utterances[:1]:
                toks.insert(1, courses[t])

            def make_positive():  # noqa: F811
                toks = rng.sample(topic, 2) + [courses[t]] + rng.choices(common, k=1)
                rng.shuffle(toks)
                return toks

            def make_negative():  # noqa: F811
                o = rng.randrange(n_topics - 1)
                o = o if o < t else o + 1
                toks = rng.sample(topic, 2) + [courses[o]] + rng.choices(common, k=1)
                rng.shuffle(toks)
                return toks

        candidates, labels = [], []
        no_answer = cfg.subtask == 4 and rng.random() < cfg.no_answer_fraction
        n_pos = 0
        if not no_answer:
            positive = make_positive()
            candidates.append(positive)
            labels.append(1)
            n_pos = 1
            if cfg.subtask == 3:
                for _ in range(rng.randint(1, 4)):
                    para = [w for w in positive if rng.random() >= cfg.paraphrase_drop]
                    if not para:
                        para = [positive[0]]
                    candidates.append(para)
                    labels.append(1)
                    n_pos += 1
                n_pos = min(n_pos, 5)
        while len(candidates) < cfg.k_candidates:
            candidates.append(make_negative())
            labels.append(0)

        order = list(range(len(candidates)))
        rng.shuffle(order)
        candidates = [candidates[i] for i in order]
        labels = [labels[i] for i in order]
        corpus.append(Dialogue(f"syn-{cfg.seed}-{idx:05d}", utterances,
                               candidates, labels, knowledge))
    return corpus
