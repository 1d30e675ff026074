from .checkpoint import (Checkpoint, CheckpointError, CheckpointVersionError, load_checkpoint,
                         save_checkpoint)
from .config import ModelConfig, load_config
from .tokenizer import PAD_ID, UNK_ID, detokenize, tokenize
from .types import CharacterRef, FrameBatch, FramePrompt, StoryPrompt, concat_frames, split_frames


def make_generator(seed: int):
    """The single RNG stream every stochastic step of a run draws from."""
    import torch

    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


__all__ = [
    "Checkpoint", "CheckpointError", "CheckpointVersionError", "load_checkpoint", "save_checkpoint",
    "ModelConfig", "load_config", "PAD_ID", "UNK_ID", "detokenize", "tokenize",
    "CharacterRef", "FrameBatch", "FramePrompt", "StoryPrompt", "concat_frames", "split_frames",
    "make_generator",
]
