"""Whitespace/punctuation tokenizer and a closed corpus vocabulary.

Reserved ids are fixed: PAD=0, CLS=1, SEP=2, MASK=3, UNK=4. Everything
else is assigned in first-seen order when the vocabulary is built, and
persisted as newline-delimited "token<TAB>id" text.
"""

import re
from dataclasses import dataclass

import numpy as np

from .errors import DataError

PAD_ID, CLS_ID, SEP_ID, MASK_ID, UNK_ID = 0, 1, 2, 3, 4
RESERVED = ("[pad]", "[cls]", "[sep]", "[mask]", "[unk]")

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def split_tokens(text: str) -> list:
    """Lowercase and split on whitespace/punctuation."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class TokenSequence:
    """Fixed-length id sequence; `true_length` counts pre-padding ids."""

    ids: np.ndarray
    true_length: int

    def __post_init__(self):
        object.__setattr__(self, "ids", np.asarray(self.ids, dtype=np.int64))

    def __len__(self):
        return len(self.ids)


class Vocabulary:
    """Bijective token<->id table with the five reserved ids up front."""

    def __init__(self, tokens=()):
        self._token_to_id = {tok: i for i, tok in enumerate(RESERVED)}
        for tok in tokens:
            if tok not in self._token_to_id:
                self._token_to_id[tok] = len(self._token_to_id)
        self._id_to_token = {i: t for t, i in self._token_to_id.items()}

    @classmethod
    def build(cls, reports) -> "Vocabulary":
        """Collect tokens from an iterable of report strings."""
        tokens = []
        for report in reports:
            tokens.extend(split_tokens(report))
        return cls(tokens)

    def __len__(self):
        return len(self._token_to_id)

    def __contains__(self, token: str) -> bool:
        return token in self._token_to_id

    def id_of(self, token: str) -> int:
        return self._token_to_id.get(token, UNK_ID)

    def token_of(self, token_id: int) -> str:
        try:
            return self._id_to_token[int(token_id)]
        except KeyError:
            raise DataError(f"token id {token_id} out of range") from None

    @property
    def n_reserved(self) -> int:
        return len(RESERVED)

    def random_regular_id(self, rng: np.random.Generator) -> int:
        """A uniformly random non-reserved token id (for MLM corruption)."""
        if len(self) <= self.n_reserved:
            raise DataError("vocabulary has no regular tokens")
        return int(rng.integers(self.n_reserved, len(self)))

    # ---- persistence -----------------------------------------------------
    def save(self, path) -> None:
        with open(path, "w") as fh:
            for token, token_id in sorted(self._token_to_id.items(), key=lambda kv: kv[1]):
                fh.write(f"{token}\t{token_id}\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        vocab = cls.__new__(cls)
        vocab._token_to_id = {}
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 2:
                    raise DataError(f"{path}: line {lineno} is not token<TAB>id")
                token, token_id = parts[0], int(parts[1])
                vocab._token_to_id[token] = token_id
        ids = sorted(vocab._token_to_id.values())
        if ids != list(range(len(ids))):
            raise DataError(f"{path}: ids are not a contiguous 0..n-1 range")
        for i, tok in enumerate(RESERVED):
            if vocab._token_to_id.get(tok) != i:
                raise DataError(f"{path}: reserved token {tok!r} must have id {i}")
        vocab._id_to_token = {i: t for t, i in vocab._token_to_id.items()}
        return vocab


def tokenize(report: str, vocab: Vocabulary, max_len: int) -> TokenSequence:
    """Map a report to a fixed-length id sequence (UNK for misses,
    truncated or PAD-padded to `max_len`)."""
    if max_len < 1:
        raise DataError(f"max_len must be >= 1, got {max_len}")
    tokens = split_tokens(report)[:max_len]
    ids = np.full(max_len, PAD_ID, dtype=np.int64)
    for i, tok in enumerate(tokens):
        ids[i] = vocab.id_of(tok)
    return TokenSequence(ids=ids, true_length=len(tokens))


def detokenize(ids, vocab: Vocabulary) -> str:
    """Join regular tokens with single spaces; reserved ids are dropped."""
    words = []
    for token_id in np.asarray(ids).ravel():
        if int(token_id) >= vocab.n_reserved:
            words.append(vocab.token_of(token_id))
    return " ".join(words)
