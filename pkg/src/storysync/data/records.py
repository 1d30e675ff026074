"""Story-group records: generation, manifest I/O, validation, ID buckets."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from ..core.tokenizer import split_words
from ..injector import IDBucket
from .synthetic import ACTIONS, IdentitySpec, SyntheticScene, compatible_scenes, render_scene

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"


class GroupLoadError(FileNotFoundError):
    def __init__(self, missing: list[str]):
        self.missing = missing
        super().__init__("missing files: " + ", ".join(missing))


class NonCompliantGroupError(ValueError):
    pass


@dataclass
class StoryGroup:
    group_id: str
    identity_id: str
    descriptions: tuple[str, ...]  # one per character
    prompts: tuple[str, ...]
    spans: tuple[tuple[tuple[int, int], ...], ...]  # [frame][character] inclusive word spans
    images: np.ndarray = field(repr=False)  # (N, H, W, 3) uint8
    masks: np.ndarray = field(repr=False)  # (N, M, H, W) bool
    scenes: tuple[str, ...] = ()
    actions: tuple[str, ...] = ()
    image_files: tuple[str, ...] = ()
    mask_files: tuple[tuple[str, ...], ...] = ()
    missing_masks: tuple[tuple[int, int], ...] = ()  # declared (frame, char) without a mask entry

    @property
    def num_frames(self) -> int:
        return len(self.prompts)

    @property
    def num_characters(self) -> int:
        return len(self.descriptions)


def generate_synthetic_group(identity: IdentitySpec, num_frames: int, seed: int, size: int = 64,
                             group_id: str | None = None) -> StoryGroup:
    if num_frames < 1:
        raise ValueError("num_frames must be >= 1")
    rng = np.random.default_rng(seed)
    scenes = compatible_scenes(identity)
    actions = list(ACTIONS)
    scene_pick = rng.choice(scenes, num_frames, replace=num_frames > len(scenes))
    action_pick = rng.choice(actions, num_frames, replace=num_frames > len(actions))
    rendered: list[SyntheticScene] = [render_scene(identity, str(s), str(a), size, rng)
                                      for s, a in zip(scene_pick, action_pick)]
    n_desc = len(split_words(identity.description))
    return StoryGroup(
        group_id=group_id or f"{identity.identity_id}-{seed}",
        identity_id=identity.identity_id,
        descriptions=(identity.description,),
        prompts=tuple(r.prompt for r in rendered),
        spans=tuple(((0, n_desc - 1),) for _ in rendered),
        images=np.stack([r.image for r in rendered]),
        masks=np.stack([r.mask for r in rendered])[:, None],
        scenes=tuple(r.scene for r in rendered),
        actions=tuple(r.action for r in rendered),
    )


def extract_shared_description(prompts) -> tuple[str, list[tuple[int, int]]]:
    """Longest word sequence occurring contiguously in every prompt.

    Ties between equally long candidates go to the one occurring earliest in
    the first prompt. Returns the shared text and its inclusive word span in
    each prompt (first occurrence).
    """
    if len(prompts) < 2:
        raise ValueError("need at least two prompts to extract a shared description")
    words = [split_words(p) for p in prompts]
    shortest = min(len(w) for w in words)
    for length in range(shortest, 0, -1):
        common = None
        for w in words:
            grams = {tuple(w[i:i + length]) for i in range(len(w) - length + 1)}
            common = grams if common is None else common & grams
            if not common:
                break
        if common:
            first = words[0]
            start = min(i for i in range(len(first) - length + 1) if tuple(first[i:i + length]) in common)
            shared = tuple(first[start:start + length])
            spans = []
            for w in words:
                s = next(i for i in range(len(w) - length + 1) if tuple(w[i:i + length]) == shared)
                spans.append((s, s + length - 1))
            return " ".join(shared), spans
    raise NonCompliantGroupError("prompts share no common word sequence; group is non-compliant")


# -- manifest I/O ---------------------------------------------------------------

def write_story_group(group: StoryGroup, root) -> Path:
    """Write ``root/groups/<group_id>/`` with PNG frames, 1-bit masks and a manifest."""
    gdir = Path(root) / "groups" / group.group_id
    gdir.mkdir(parents=True, exist_ok=True)
    frames = []
    for n in range(group.num_frames):
        img_name = f"frame{n}.png"
        Image.fromarray(group.images[n]).save(gdir / img_name, optimize=False)
        chars = []
        for c in range(group.num_characters):
            mask_name = f"mask_frame{n}_char{c}.png"
            Image.fromarray(group.masks[n, c]).convert("1").save(gdir / mask_name)
            chars.append({"character": c, "span": list(group.spans[n][c]), "mask": mask_name})
        entry = {"image": img_name, "prompt": group.prompts[n], "characters": chars}
        if group.scenes:
            entry["scene"], entry["action"] = group.scenes[n], group.actions[n]
        frames.append(entry)
    manifest = {
        "manifest_version": MANIFEST_VERSION,
        "group_id": group.group_id,
        "identity_id": group.identity_id,
        "characters": [{"character": c, "description": d} for c, d in enumerate(group.descriptions)],
        "frames": frames,
    }
    (gdir / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return gdir


def load_story_group(path) -> StoryGroup:
    gdir = Path(path)
    mpath = gdir / MANIFEST_NAME if gdir.is_dir() else gdir
    gdir = mpath.parent
    if not mpath.exists():
        raise GroupLoadError([str(mpath)])
    manifest = json.loads(mpath.read_text())
    if manifest.get("manifest_version") != MANIFEST_VERSION:
        raise ValueError(f"{mpath}: unsupported manifest version {manifest.get('manifest_version')}")
    frames = manifest["frames"]
    n_chars = len(manifest["characters"])
    missing = [str(gdir / f["image"]) for f in frames if not (gdir / f["image"]).exists()]
    for f in frames:
        missing += [str(gdir / c["mask"]) for c in f["characters"] if c.get("mask") and not (gdir / c["mask"]).exists()]
    if missing:
        raise GroupLoadError(missing)

    images = np.stack([np.asarray(Image.open(gdir / f["image"]).convert("RGB")) for f in frames])
    h, w = images.shape[1:3]
    masks = np.zeros((len(frames), n_chars, h, w), bool)
    spans, mask_files, missing_masks = [], [], []
    for n, f in enumerate(frames):
        by_char = {c["character"]: c for c in f["characters"]}
        frame_spans, frame_masks = [], []
        for c in range(n_chars):
            entry = by_char.get(c, {})
            frame_spans.append(tuple(entry.get("span", (0, -1))))
            if entry.get("mask"):
                masks[n, c] = np.asarray(Image.open(gdir / entry["mask"]).convert("L")) > 127
                frame_masks.append(entry["mask"])
            else:
                frame_masks.append("")
                missing_masks.append((n, c))
        spans.append(tuple(frame_spans))
        mask_files.append(tuple(frame_masks))
    return StoryGroup(
        group_id=manifest["group_id"],
        identity_id=manifest["identity_id"],
        descriptions=tuple(c["description"] for c in sorted(manifest["characters"], key=lambda c: c["character"])),
        prompts=tuple(f["prompt"] for f in frames),
        spans=tuple(spans),
        images=images,
        masks=masks,
        scenes=tuple(f.get("scene", "") for f in frames),
        actions=tuple(f.get("action", "") for f in frames),
        image_files=tuple(f["image"] for f in frames),
        mask_files=tuple(mask_files),
        missing_masks=tuple(missing_masks),
    )


@dataclass
class ValidationReport:
    group_id: str
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __str__(self) -> str:
        if self.ok:
            return f"{self.group_id}: ok"
        return f"{self.group_id}: " + "; ".join(self.violations)


def validate_group(group: StoryGroup, synthetic_frames: int | None = None) -> ValidationReport:
    """Check every record invariant; violations are reported, never repaired."""
    report = ValidationReport(group.group_id)
    v = report.violations
    n = group.num_frames
    if synthetic_frames is not None:
        if n != synthetic_frames:
            v.append(f"group has {n} frames, expected {synthetic_frames}")
    elif not 5 <= n <= 12:
        v.append(f"group has {n} frames, outside the 5-12 range of a story group")
    if group.images.shape[0] != n:
        v.append(f"{group.images.shape[0]} images for {n} prompts")
    if group.masks.shape[-2:] != group.images.shape[1:3]:
        v.append("mask resolution differs from image resolution")
    for f, c in group.missing_masks:
        v.append(f"frame {f}: character {c} has no mask entry")
    for f, prompt in enumerate(group.prompts):
        words = split_words(prompt)
        for c, desc in enumerate(group.descriptions):
            dw = split_words(desc)
            s, e = group.spans[f][c]
            if not 0 <= s <= e < len(words):
                v.append(f"frame {f}: character {c} span {(s, e)} outside prompt")
            elif words[s:e + 1] != dw:
                v.append(f"frame {f}: span {(s, e)} does not cover the description {desc!r}")
            if " ".join(dw) not in " ".join(words):
                v.append(f"frame {f}: prompt is missing the shared description {desc!r}")
    if n >= 2:
        try:
            shared, _ = extract_shared_description(group.prompts)
        except NonCompliantGroupError as exc:
            v.append(str(exc))
        else:
            for desc in group.descriptions:
                if " ".join(split_words(desc)) not in shared:
                    v.append(f"shared description {shared!r} does not contain {desc!r}")
    return report


# -- identity buckets -----------------------------------------------------------

def character_crop(image: np.ndarray, mask: np.ndarray, size: int, margin: int = 2) -> np.ndarray:
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise ValueError("frame has no character pixels")
    h, w = mask.shape
    cy, cx = (ys.min() + ys.max()) / 2, (xs.min() + xs.max()) / 2
    half = max(ys.max() - ys.min(), xs.max() - xs.min()) / 2 + margin
    box = (int(np.floor(cx - half)), int(np.floor(cy - half)), int(np.ceil(cx + half)) + 1,
           int(np.ceil(cy + half)) + 1)
    box = (max(box[0], 0), max(box[1], 0), min(box[2], w), min(box[3], h))
    crop = Image.fromarray(image).crop(box).resize((size, size), Image.BILINEAR)
    return np.asarray(crop)


def to_tensor_image(arr: np.ndarray) -> torch.Tensor:
    """uint8 ``(..., H, W, 3)`` -> float ``(..., 3, H, W)`` in [-1, 1]."""
    t = torch.from_numpy(np.ascontiguousarray(arr)).float() / 127.5 - 1.0
    return t.movedim(-1, -3)


def to_uint8_image(t: torch.Tensor) -> np.ndarray:
    """float ``(..., 3, H, W)`` in [-1, 1] -> uint8 ``(..., H, W, 3)``."""
    x = ((t.detach().clamp(-1, 1) + 1.0) * 127.5).round().to(torch.uint8)
    return x.movedim(-3, -1).cpu().numpy()


def make_id_bucket(group: StoryGroup, ref_size: int = 32, character: int = 0) -> IDBucket:
    crops = []
    for n in range(group.num_frames):
        if not group.masks[n, character].any():
            raise ValueError(f"frame {n} of {group.group_id} has no character {character}")
        crops.append(character_crop(group.images[n], group.masks[n, character], ref_size))
    return IDBucket(group.identity_id, to_tensor_image(np.stack(crops)), tuple(range(group.num_frames)),
                    "synthetic")
