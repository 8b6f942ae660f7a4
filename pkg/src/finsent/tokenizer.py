"""Uncased basic tokenizer, greedy WordPiece and fixed-length feature encoding.

Punctuation is every Unicode character whose general category starts with
``P`` plus the ASCII symbol ranges ``!``-``/``, ``:``-``@``, ``[``-`````
and ``{``-``~`` (so ``$``, ``+``, ``<``, ``^`` and friends split too).
Control characters (category ``C*`` other than tab/newline/CR) and U+FFFD
are dropped; accents are stripped after lowercasing via NFD decomposition.
"""

from __future__ import annotations

import unicodedata
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ConfigError, DataError

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, MASK)
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(5)


def _is_whitespace(ch: str) -> bool:
    if ch in " \t\n\r":
        return True
    return unicodedata.category(ch) == "Zs"


def _is_control(ch: str) -> bool:
    if ch in "\t\n\r":
        return False
    return unicodedata.category(ch).startswith("C")


def is_punctuation(ch: str) -> bool:
    cp = ord(ch)
    if 33 <= cp <= 47 or 58 <= cp <= 64 or 91 <= cp <= 96 or 123 <= cp <= 126:
        return True
    return unicodedata.category(ch).startswith("P")


def _strip_accents(text: str) -> str:
    return "".join(ch for ch in unicodedata.normalize("NFD", text) if unicodedata.category(ch) != "Mn")


def basic_tokenize(text: str) -> list[str]:
    """Lowercase, strip accents and control chars, split on whitespace and punctuation."""
    cleaned = []
    for ch in text:
        if ch == "\x00" or ch == "\ufffd" or _is_control(ch):
            continue
        cleaned.append(" " if _is_whitespace(ch) else ch)
    text = _strip_accents("".join(cleaned).lower())

    tokens: list[str] = []
    for word in text.split():
        current = []
        for ch in word:
            if is_punctuation(ch):
                if current:
                    tokens.append("".join(current))
                    current = []
                tokens.append(ch)
            elif _is_whitespace(ch):
                # NFD can surface combining spaces; treat them as separators
                if current:
                    tokens.append("".join(current))
                    current = []
            else:
                current.append(ch)
        if current:
            tokens.append("".join(current))
    return tokens


class Vocabulary:
    """Immutable token <-> id bijection with the five reserved specials at ids 0-4."""

    def __init__(self, tokens: Sequence[str]):
        tokens = tuple(tokens)
        if tokens[: len(SPECIAL_TOKENS)] != SPECIAL_TOKENS:
            raise DataError(f"vocabulary must start with {list(SPECIAL_TOKENS)}")
        index = {}
        for i, tok in enumerate(tokens):
            if not tok or any(_is_whitespace(c) for c in tok) or any(c.isspace() for c in tok):
                raise DataError(f"invalid token {tok!r}", line=i + 1)
            if tok in index:
                raise DataError(f"duplicate token {tok!r}", line=i + 1)
            index[tok] = i
        self._tokens = tokens
        self._index = index

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self._tokens == other._tokens

    def __hash__(self) -> int:
        return hash(self._tokens)

    @property
    def tokens(self) -> tuple[str, ...]:
        return self._tokens

    def id(self, token: str) -> int:
        return self._index.get(token, UNK_ID)

    def token(self, idx: int) -> str:
        if not 0 <= idx < len(self._tokens):
            raise IndexError(f"token id {idx} out of range [0, {len(self._tokens)})")
        return self._tokens[idx]

    def ids(self, tokens: Iterable[str]) -> list[int]:
        return [self.id(t) for t in tokens]

    def to_text(self) -> str:
        return "".join(t + "\n" for t in self._tokens)

    @classmethod
    def from_text(cls, text: str) -> "Vocabulary":
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_text().encode("utf-8"))

    @classmethod
    def load(cls, path) -> "Vocabulary":
        try:
            raw = Path(path).read_bytes().decode("utf-8")
        except FileNotFoundError:
            raise DataError("vocabulary file not found", path=path) from None
        except UnicodeDecodeError as exc:
            raise DataError(f"vocabulary is not valid UTF-8: {exc}", path=path) from None
        return cls.from_text(raw)


def wordpiece(word: str, vocab: Vocabulary, max_chars: int = 100) -> list[str]:
    """Greedy longest-match-first split of one basic token."""
    if len(word) > max_chars:
        return [UNK]
    pieces = []
    start = 0
    while start < len(word):
        end = len(word)
        match = None
        while start < end:
            piece = word[start:end] if start == 0 else "##" + word[start:end]
            if piece in vocab:
                match = piece
                break
            end -= 1
        if match is None:
            return [UNK]
        pieces.append(match)
        start = end
    return pieces


def tokenize(text: str, vocab: Vocabulary) -> list[str]:
    out = []
    for word in basic_tokenize(text):
        out.extend(wordpiece(word, vocab))
    return out


@dataclass(frozen=True)
class InputFeatures:
    input_ids: tuple[int, ...]
    attention_mask: tuple[int, ...]
    segment_ids: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.input_ids)


def truncate_pair(a: list, b: list, budget: int) -> None:
    """Pop from the tail of the longer list (``b`` on ties) until both fit ``budget``."""
    while len(a) + len(b) > budget:
        if len(a) > len(b):
            a.pop()
        else:
            b.pop()


def encode_tokens(tokens_a: list[str], tokens_b: list[str] | None, vocab: Vocabulary, max_seq_len: int) -> InputFeatures:
    if tokens_b is None:
        if max_seq_len < 3:
            raise ConfigError(f"max_seq_len must be >= 3 for single sentences, got {max_seq_len}")
        tokens_a = tokens_a[: max_seq_len - 2]
        tokens_b = []
        paired = False
    else:
        if max_seq_len < 5:
            raise ConfigError(f"max_seq_len must be >= 5 for sentence pairs, got {max_seq_len}")
        tokens_a, tokens_b = list(tokens_a), list(tokens_b)
        truncate_pair(tokens_a, tokens_b, max_seq_len - 3)
        paired = True

    ids = [CLS_ID] + vocab.ids(tokens_a) + [SEP_ID]
    segments = [0] * len(ids)
    if paired:
        ids += vocab.ids(tokens_b) + [SEP_ID]
        segments += [1] * (len(tokens_b) + 1)
    live = len(ids)
    pad = max_seq_len - live
    return InputFeatures(
        input_ids=tuple(ids + [PAD_ID] * pad),
        attention_mask=tuple([1] * live + [0] * pad),
        segment_ids=tuple(segments + [0] * pad),
    )


def encode(text_a: str, text_b: str | None, vocab: Vocabulary, max_seq_len: int) -> InputFeatures:
    """``[CLS] A [SEP] (B [SEP])`` padded with ``[PAD]`` to ``max_seq_len``."""
    tokens_b = None if text_b is None else tokenize(text_b, vocab)
    return encode_tokens(tokenize(text_a, vocab), tokens_b, vocab, max_seq_len)


def decode(ids: Iterable[int], vocab: Vocabulary) -> str:
    words: list[str] = []
    for i in ids:
        tok = vocab.token(int(i))
        if tok in SPECIAL_TOKENS:
            continue
        if tok.startswith("##") and words:
            words[-1] += tok[2:]
        else:
            words.append(tok)
    return " ".join(words)


def build_vocab(lines: Iterable[str], target_size: int = 8192, min_freq: int = 1) -> Vocabulary:
    """Frequency-ranked whole words with single-character fallback pieces.

    Layout: the five specials, then words by descending count (ties broken
    lexicographically), then ``c`` / ``##c`` for every character seen,
    ordered by character count.  Room for the character pieces is reserved
    before words are admitted, so truncation to ``target_size`` only drops
    rare words unless the character set alone exceeds the budget.
    """
    if target_size <= len(SPECIAL_TOKENS):
        raise ConfigError(f"target_size must exceed {len(SPECIAL_TOKENS)}, got {target_size}")
    word_counts: Counter[str] = Counter()
    n_lines = 0
    for line in lines:
        n_lines += 1
        word_counts.update(basic_tokenize(line))
    if not word_counts:
        raise DataError("corpus contains no tokens" if n_lines else "corpus is empty")

    char_counts: Counter[str] = Counter()
    for word, n in word_counts.items():
        for ch in word:
            char_counts[ch] += n
    chars = sorted(char_counts, key=lambda c: (-char_counts[c], c))
    char_pieces = []
    for c in chars:
        char_pieces.extend((c, "##" + c))

    words = sorted((w for w, n in word_counts.items() if n >= min_freq), key=lambda w: (-word_counts[w], w))
    budget = target_size - len(SPECIAL_TOKENS)
    char_set = set(char_pieces)
    word_room = max(budget - len(char_pieces), 0)
    chosen_words = [w for w in words if w not in char_set][:word_room]

    tokens = list(SPECIAL_TOKENS) + chosen_words + char_pieces
    return Vocabulary(tokens[:target_size])
