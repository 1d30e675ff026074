"""Word-level tokenizer over a fixed, versioned vocabulary.

Character descriptions must map to exact token spans so that per-character
cross-attention maps can be read off the text axis; a word-level tokenizer
with a shipped vocabulary keeps those spans stable.
"""

from __future__ import annotations

import re
from functools import lru_cache
from importlib import resources

PAD_ID = 0
UNK_ID = 1
VOCAB_VERSION = 1

_TOKEN_RE = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")


@lru_cache(maxsize=None)
def load_vocab(version: int = VOCAB_VERSION) -> tuple[str, ...]:
    text = resources.files(__package__).joinpath(f"vocab_v{version}.txt").read_text()
    return tuple(line for line in text.splitlines() if line)


@lru_cache(maxsize=None)
def _index(version: int) -> dict[str, int]:
    return {tok: i for i, tok in enumerate(load_vocab(version))}


def split_words(text: str) -> list[str]:
    return _TOKEN_RE.findall(" ".join(text.lower().split()))


def tokenize(text: str, version: int = VOCAB_VERSION) -> list[int]:
    words = split_words(text)
    if not words:
        raise ValueError("cannot tokenize empty text")
    index = _index(version)
    return [index.get(w, UNK_ID) for w in words]


def detokenize(ids, version: int = VOCAB_VERSION) -> str:
    vocab = load_vocab(version)
    return " ".join(vocab[i] for i in ids if i != PAD_ID)


def pad_ids(ids: list[int], length: int) -> list[int]:
    if len(ids) > length:
        raise ValueError(f"prompt has {len(ids)} tokens, more than max_text_len={length}")
    return list(ids) + [PAD_ID] * (length - len(ids))


def vocab_size(version: int = VOCAB_VERSION) -> int:
    return len(load_vocab(version))


def find_span(haystack: list[int], needle: list[int]) -> tuple[int, int] | None:
    """Inclusive (start, end) of the first occurrence of ``needle``, or None."""
    n = len(needle)
    for start in range(len(haystack) - n + 1):
        if haystack[start:start + n] == needle:
            return start, start + n - 1
    return None
