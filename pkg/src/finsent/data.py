"""Dataset ingestion, pretraining example generation and batching.

File formats
------------
labeled (tsv)        ``sentence<TAB>label`` with label in positive/negative/neutral
labeled (at)         ``sentence@label``, split on the last ``@`` (PhraseBank style)
scored               ``sentence<TAB>score`` with score a real in [-1, 1]
corpus               one sentence per line, blank line between documents

Blank lines are skipped in labeled and scored files.  MLM targets use
``IGNORE_INDEX`` (-1) at positions that were not selected for prediction.
NSP labels are 0 for "B follows A" and 1 for "B is random".
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, DataError
from .model import LABELS
from .numerics import make_rng
from .tokenizer import (
    CLS_ID, MASK_ID, PAD_ID, SEP_ID, SPECIAL_TOKENS, InputFeatures, Vocabulary, encode, tokenize, encode_tokens,
)

IGNORE_INDEX = -1
IS_NEXT, NOT_NEXT = 0, 1


@dataclass(frozen=True)
class Example:
    guid: str
    text: str
    label: str | None = None
    score: float | None = None

    def __post_init__(self):
        if self.label is not None and self.score is not None:
            raise DataError(f"example {self.guid} has both a label and a score")
        if self.label is not None and self.label not in LABELS:
            raise DataError(f"example {self.guid}: unknown label {self.label!r}")


@dataclass(frozen=True)
class MaskingConfig:
    mask_percent: float = 15.0
    replace_with_mask: float = 0.8
    replace_with_random: float = 0.1
    keep_original: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.mask_percent <= 100.0:
            raise ConfigError(f"mask_percent must lie in [0, 100], got {self.mask_percent}")
        probs = (self.replace_with_mask, self.replace_with_random, self.keep_original)
        if any(p < 0 for p in probs) or abs(sum(probs) - 1.0) > 1e-9:
            raise ConfigError(f"mask/random/keep probabilities must be non-negative and sum to 1, got {probs}")


def _read_lines(path) -> list[str]:
    path = Path(path)
    try:
        text = path.read_bytes().decode("utf-8")
    except FileNotFoundError:
        raise DataError("file not found", path=path) from None
    except UnicodeDecodeError as exc:
        raise DataError(f"not valid UTF-8 ({exc})", path=path) from None
    if not text.strip():
        raise DataError("file is empty", path=path)
    return text.split("\n")


def load_labeled(path, format: str = "tsv") -> list[Example]:  # noqa: A002
    if format not in ("tsv", "at_separated"):
        raise ConfigError(f"unknown labeled-data format {format!r}")
    sep, layout = ("\t", "sentence<TAB>label") if format == "tsv" else ("@", "sentence@label")
    stem = Path(path).stem
    out = []
    for lineno, raw in enumerate(_read_lines(path), start=1):
        line = raw.rstrip("\r")
        if not line.strip():
            continue
        text, found, label = line.rpartition(sep)
        if not found or not text.strip():
            raise DataError(f"expected '{layout}'", line=lineno, path=path)
        label = label.strip().lower()
        if label not in LABELS:
            raise DataError(f"unknown label {label!r} (expected one of {', '.join(LABELS)})", line=lineno, path=path)
        out.append(Example(guid=f"{stem}-{lineno}", text=text.strip(), label=label))
    if not out:
        raise DataError("no examples found", path=path)
    return out


def load_scored(path) -> list[Example]:
    stem = Path(path).stem
    out = []
    for lineno, raw in enumerate(_read_lines(path), start=1):
        line = raw.rstrip("\r")
        if not line.strip():
            continue
        text, found, value = line.rpartition("\t")
        if not found or not text.strip():
            raise DataError("expected 'sentence<TAB>score'", line=lineno, path=path)
        try:
            score = float(value)
        except ValueError:
            raise DataError(f"score {value!r} is not a number", line=lineno, path=path) from None
        if not math.isfinite(score) or not -1.0 <= score <= 1.0:
            raise DataError(f"score {score} outside [-1, 1]", line=lineno, path=path)
        out.append(Example(guid=f"{stem}-{lineno}", text=text.strip(), score=score))
    if not out:
        raise DataError("no examples found", path=path)
    return out


def load_corpus(path) -> list[list[str]]:
    """Documents as lists of sentences; blank lines separate documents."""
    docs: list[list[str]] = [[]]
    for raw in _read_lines(path):
        line = raw.strip()
        if line:
            docs[-1].append(line)
        elif docs[-1]:
            docs.append([])
    return [d for d in docs if d]


def split_examples(examples: Sequence[Example], fractions=(0.8, 0.1, 0.1)) -> tuple[list[Example], ...]:
    """Deterministic partition by SHA-256 of each guid."""
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be non-negative and sum to 1, got {fractions}")
    edges = np.cumsum(fractions)
    parts: list[list[Example]] = [[] for _ in fractions]
    for ex in examples:
        u = int.from_bytes(hashlib.sha256(ex.guid.encode("utf-8")).digest()[:8], "big") / 2.0**64
        k = int(np.searchsorted(edges, u, side="right"))
        parts[min(k, len(parts) - 1)].append(ex)
    return tuple(parts)


# ---------------------------------------------------------------------------
# Pretraining examples
# ---------------------------------------------------------------------------


def make_mlm_example(ids: Sequence[int], cfg: MaskingConfig, vocab_size: int, rng: np.random.Generator):
    """Corrupt ``ids`` for masked-LM training.

    Returns ``(corrupted, targets)``; targets hold the original id at selected
    positions and ``IGNORE_INDEX`` elsewhere.  [CLS], [SEP] and [PAD]
    positions are never selected.
    """
    ids = np.asarray(ids, dtype=np.int64)
    n = ids.shape[0]
    select_u = rng.random(n)
    action_u = rng.random(n)
    random_ids = rng.integers(len(SPECIAL_TOKENS), max(vocab_size, len(SPECIAL_TOKENS) + 1), size=n)

    maskable = (ids != CLS_ID) & (ids != SEP_ID) & (ids != PAD_ID)
    selected = maskable & (select_u < cfg.mask_percent / 100.0)
    to_mask = selected & (action_u < cfg.replace_with_mask)
    to_random = selected & ~to_mask & (action_u < cfg.replace_with_mask + cfg.replace_with_random)
    if to_random.any() and vocab_size <= len(SPECIAL_TOKENS):
        raise ConfigError("random replacement needs at least one non-special token")

    corrupted = ids.copy()
    corrupted[to_mask] = MASK_ID
    corrupted[to_random] = random_ids[to_random]
    targets = np.where(selected, ids, IGNORE_INDEX)
    return corrupted, targets


@dataclass(frozen=True)
class SentencePair:
    text_a: str
    text_b: str
    is_next: bool


def make_nsp_pairs(documents: Sequence[Sequence[str]], rng: np.random.Generator) -> list[SentencePair]:
    """Consecutive-sentence pairs, half of them with B swapped for a sentence from another document."""
    docs = [list(d) for d in documents if d]
    candidates = [(d, i) for d, doc in enumerate(docs) for i in range(len(doc) - 1)]
    if len(docs) < 2 or not candidates:
        raise DataError(
            "next-sentence pairs need at least two documents and one document with two or more sentences")
    order = rng.permutation(len(candidates))
    negatives = set(order[: len(candidates) // 2].tolist())
    pairs = []
    for k, (d, i) in enumerate(candidates):
        a = docs[d][i]
        if k in negatives:
            other = int(rng.integers(len(docs) - 1))
            other += other >= d
            b = docs[other][int(rng.integers(len(docs[other])))]
            pairs.append(SentencePair(a, b, False))
        else:
            pairs.append(SentencePair(a, docs[d][i + 1], True))
    return pairs


def pretraining_records(
    documents: Sequence[Sequence[str]],
    vocab: Vocabulary,
    masking: MaskingConfig,
    max_seq_len: int,
    seed: int,
) -> list[dict]:
    """Static NSP pairs with one fixed mask realisation each."""
    pair_rng = make_rng(seed, stream=21)
    mask_rng = make_rng(seed, stream=22)
    records = []
    for pair in make_nsp_pairs(documents, pair_rng):
        feats = encode_tokens(tokenize(pair.text_a, vocab), tokenize(pair.text_b, vocab), vocab, max_seq_len)
        corrupted, targets = make_mlm_example(feats.input_ids, masking, len(vocab), mask_rng)
        records.append({
            "input_ids": corrupted,
            "attention_mask": np.asarray(feats.attention_mask, dtype=np.int64),
            "segment_ids": np.asarray(feats.segment_ids, dtype=np.int64),
            "mlm_targets": targets,
            "nsp_labels": IS_NEXT if pair.is_next else NOT_NEXT,
        })
    return records


def mlm_eval_records(sentences: Sequence[str], vocab: Vocabulary, masking: MaskingConfig, max_seq_len: int, seed: int) -> list[dict]:
    """Single-sentence records with a fixed mask realisation, for held-out LM loss."""
    rng = make_rng(seed, stream=31)
    records = []
    for text in sentences:
        feats = encode(text, None, vocab, max_seq_len)
        corrupted, targets = make_mlm_example(feats.input_ids, masking, len(vocab), rng)
        records.append({
            "input_ids": corrupted,
            "attention_mask": np.asarray(feats.attention_mask, dtype=np.int64),
            "segment_ids": np.asarray(feats.segment_ids, dtype=np.int64),
            "mlm_targets": targets,
        })
    return records


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    input_ids: np.ndarray
    attention_mask: np.ndarray
    segment_ids: np.ndarray
    labels: np.ndarray | None = None
    scores: np.ndarray | None = None
    mlm_targets: np.ndarray | None = None
    nsp_labels: np.ndarray | None = None
    guids: tuple[str, ...] = field(default_factory=tuple)

    def __len__(self) -> int:
        return int(self.input_ids.shape[0])


def example_record(ex: Example, vocab: Vocabulary, max_seq_len: int) -> dict:
    feats = encode(ex.text, None, vocab, max_seq_len)
    rec = {
        "input_ids": np.asarray(feats.input_ids, dtype=np.int64),
        "attention_mask": np.asarray(feats.attention_mask, dtype=np.int64),
        "segment_ids": np.asarray(feats.segment_ids, dtype=np.int64),
        "guids": ex.guid,
    }
    if ex.label is not None:
        rec["labels"] = LABELS.index(ex.label)
    if ex.score is not None:
        rec["scores"] = np.float32(ex.score)
    return rec


def collate(records: Sequence[dict]) -> Batch:
    keys = records[0].keys()
    fields = {}
    for key in keys:
        values = [r[key] for r in records]
        fields[key] = tuple(values) if key == "guids" else np.stack([np.asarray(v) for v in values])
    return Batch(**fields)


class DataLoader:
    """Re-iterable batch source.

    Each pass over the loader is one epoch; with ``shuffle`` the order of
    epoch ``e`` is a permutation drawn from a generator keyed by
    ``(seed, e)``, so the whole sequence of epochs is reproducible.  The
    final short batch is kept.
    """

    def __init__(self, records: Sequence[dict], batch_size: int, shuffle: bool = False, seed: int = 42):
        if batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
        self.records = list(records)
        self.batch_size = batch_size
        self.shuffle = shuffle
        self.seed = seed
        self.epoch = 0

    def __len__(self) -> int:
        return math.ceil(len(self.records) / self.batch_size)

    def order(self, epoch: int) -> np.ndarray:
        if self.shuffle:
            return make_rng(self.seed, stream=1000 + epoch).permutation(len(self.records))
        return np.arange(len(self.records))

    def __iter__(self) -> Iterator[Batch]:
        order = self.order(self.epoch)
        self.epoch += 1
        for start in range(0, len(order), self.batch_size):
            yield collate([self.records[i] for i in order[start:start + self.batch_size]])


def make_loader(
    examples: Sequence[Example],
    vocab: Vocabulary,
    max_seq_len: int,
    batch_size: int,
    shuffle: bool = False,
    seed: int = 42,
) -> DataLoader:
    return DataLoader([example_record(ex, vocab, max_seq_len) for ex in examples], batch_size, shuffle, seed)


def features_of(batch: Batch, i: int) -> InputFeatures:
    return InputFeatures(
        tuple(int(x) for x in batch.input_ids[i]),
        tuple(int(x) for x in batch.attention_mask[i]),
        tuple(int(x) for x in batch.segment_ids[i]),
    )
