"""Immutable value types: story prompts and frame batches."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Literal

import torch

from .tokenizer import VOCAB_VERSION, pad_ids, split_words, tokenize

_MARKED = re.compile(r"\[([^\[\]]+)\]")


@dataclass(frozen=True)
class CharacterRef:
    description: str
    action: str
    span: tuple[int, int]  # inclusive token range in the frame's full text


@dataclass(frozen=True)
class FramePrompt:
    full_text: str
    characters: tuple[CharacterRef, ...] = ()

    def __post_init__(self):
        n_tokens = len(tokenize(self.full_text))
        spans = sorted(c.span for c in self.characters)
        for start, end in spans:
            if not 0 <= start <= end < n_tokens:
                raise ValueError(f"span {(start, end)} outside prompt of {n_tokens} tokens")
        for (_, e0), (s1, _) in zip(spans, spans[1:]):
            if s1 <= e0:
                raise ValueError(f"overlapping character spans in {self.full_text!r}")

    @classmethod
    def parse(cls, line: str) -> "FramePrompt":
        """Parse a marked line such as ``"[red circle hero] jumping in forest"``.

        Bracketed text is a character description; the text up to the next
        bracket is that character's action.
        """
        pieces, chars, cursor = [], [], 0
        matches = list(_MARKED.finditer(line))
        for k, m in enumerate(matches):
            pieces.append(line[cursor:m.start()])
            before = len(split_words(" ".join(pieces)))
            desc = m.group(1).strip()
            n_desc = len(split_words(desc))
            if n_desc == 0:
                raise ValueError(f"empty character description in {line!r}")
            pieces.append(desc)
            cursor = m.end()
            stop = matches[k + 1].start() if k + 1 < len(matches) else len(line)
            action = line[cursor:stop].strip()
            chars.append(CharacterRef(desc, action, (before, before + n_desc - 1)))
        pieces.append(line[cursor:])
        text = " ".join(" ".join(pieces).split())
        if "[" in text or "]" in text:
            raise ValueError(f"unbalanced character markers in {line!r}")
        return cls(text, tuple(chars))


@dataclass(frozen=True)
class StoryPrompt:
    frames: tuple[FramePrompt, ...]

    def __post_init__(self):
        if len(self.frames) < 1:
            raise ValueError("a story needs at least one frame")

    @classmethod
    def from_lines(cls, lines) -> "StoryPrompt":
        return cls(tuple(FramePrompt.parse(ln) for ln in lines if ln.strip()))

    @property
    def num_frames(self) -> int:
        return len(self.frames)

    @property
    def max_characters(self) -> int:
        return max(len(f.characters) for f in self.frames)

    def encode(self, max_len: int, version: int = VOCAB_VERSION):
        """Token ids (N, L), spans (N, M, 2) and span validity (N, M)."""
        n, m = self.num_frames, self.max_characters
        ids = torch.tensor([pad_ids(tokenize(f.full_text, version), max_len) for f in self.frames])
        spans = torch.zeros(n, m, 2, dtype=torch.long)
        valid = torch.zeros(n, m, dtype=torch.bool)
        for i, f in enumerate(self.frames):
            for j, c in enumerate(f.characters):
                spans[i, j] = torch.tensor(c.span)
                valid[i, j] = True
        return ids, spans, valid


Layout = Literal["per-frame", "concatenated"]


@dataclass(frozen=True)
class FrameBatch:
    """Latents of B stories with N frames each.

    Per-frame layout holds ``(B, N, C, H, W)``; the concatenated layout folds
    the frame axis into the batch axis story-major, ``(B*N, C, H, W)``, so
    the frames of one story occupy a contiguous block in order.
    """

    latents: torch.Tensor
    num_frames: int
    timestep: int | None = None
    layout: Layout = "per-frame"
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.layout == "per-frame":
            if self.latents.ndim != 5 or self.latents.shape[1] != self.num_frames:
                raise ValueError(f"per-frame latents must be (B, {self.num_frames}, C, H, W), "
                                 f"got {tuple(self.latents.shape)}")
        elif self.layout == "concatenated":
            if self.latents.ndim != 4:
                raise ValueError("concatenated latents must be 4-d (B*N, C, H, W)")
        else:
            raise ValueError(f"unknown layout {self.layout!r}")

    @property
    def batch_size(self) -> int:
        if self.layout == "per-frame":
            return self.latents.shape[0]
        return self.latents.shape[0] // self.num_frames


def concat_frames(batch: FrameBatch) -> FrameBatch:
    if batch.layout != "per-frame":
        raise ValueError("batch is already concatenated; refusing to fold the frame axis twice")
    b, n = batch.latents.shape[:2]
    z = batch.latents.reshape(b * n, *batch.latents.shape[2:])
    return FrameBatch(z, n, batch.timestep, "concatenated", batch.meta)


def split_frames(batch: FrameBatch, num_frames: int | None = None) -> FrameBatch:
    if batch.layout != "concatenated":
        raise ValueError("batch is not concatenated")
    n = num_frames or batch.num_frames
    lead = batch.latents.shape[0]
    if lead % n:
        raise ValueError(f"leading size {lead} is not divisible by num_frames={n}")
    z = batch.latents.reshape(lead // n, n, *batch.latents.shape[1:])
    return FrameBatch(z, n, batch.timestep, "per-frame", batch.meta)
