import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from storysync.core import (Checkpoint, CheckpointVersionError, FrameBatch, FramePrompt, ModelConfig, StoryPrompt,
                            concat_frames, load_checkpoint, make_generator, save_checkpoint, split_frames)
from storysync.core.checkpoint import read_header
from storysync.core.config import load_config
from storysync.core.tokenizer import (PAD_ID, UNK_ID, detokenize, find_span, load_vocab, pad_ids, split_words,
                                      tokenize)


# -- tokenizer -------------------------------------------------------------------------

def test_tokenize_is_deterministic_and_in_vocab():
    a = tokenize("red circle hero")
    assert a == tokenize("red circle hero") == tokenize("  Red   CIRCLE hero ")
    assert len(a) == 3 and UNK_ID not in a
    assert detokenize(a) == "red circle hero"


def test_tokenize_empty_raises():
    with pytest.raises(ValueError):
        tokenize("   \n\t ")


def test_unknown_word_maps_to_unk():
    ids = tokenize("red zyzzyva hero")
    assert ids[1] == UNK_ID
    assert tokenize("€") == [UNK_ID]


def test_shared_description_gives_identical_subsequence():
    desc = tokenize("red circle hero")
    a = tokenize("the red circle hero jumping in forest")
    b = tokenize("a red circle hero resting in the snow")
    sa, sb = find_span(a, desc), find_span(b, desc)
    assert sa == (1, 3) and sb == (1, 3)
    assert a[sa[0]:sa[1] + 1] == b[sb[0]:sb[1] + 1] == desc


def test_vocab_file_layout():
    vocab = load_vocab(1)
    assert vocab[PAD_ID] == "[PAD]" and vocab[UNK_ID] == "[UNK]"
    assert len(set(vocab)) == len(vocab)


def test_pad_ids():
    assert pad_ids([5, 6], 4) == [5, 6, PAD_ID, PAD_ID]
    with pytest.raises(ValueError):
        pad_ids([5] * 5, 4)


@given(st.text(max_size=40))
def test_tokenizer_pure_and_word_aligned(text):
    if not text.split():
        with pytest.raises(ValueError):
            tokenize(text)
        return
    ids = tokenize(text)
    assert ids == tokenize(text)
    assert len(ids) == len(split_words(text))


# -- prompts ---------------------------------------------------------------------------

def test_frame_prompt_parse_spans():
    f = FramePrompt.parse("[red circle hero] jumping in forest")
    assert f.full_text == "red circle hero jumping in forest"
    (c,) = f.characters
    assert c.description == "red circle hero" and c.action == "jumping in forest" and c.span == (0, 2)
    g = FramePrompt.parse("the [blue star hero] meets [green square hero] in city")
    assert [c.span for c in g.characters] == [(1, 3), (5, 7)]


def test_frame_prompt_rejects_bad_spans():
    with pytest.raises(ValueError):
        FramePrompt.parse("[red circle hero jumping")
    with pytest.raises(ValueError):
        FramePrompt.parse("[] jumping")


def test_story_prompt_requires_a_frame():
    with pytest.raises(ValueError):
        StoryPrompt(())
    s = StoryPrompt.from_lines(["[red circle hero] jumping", "", "[red circle hero] sitting in cave"])
    ids, spans, valid = s.encode(16)
    assert ids.shape == (2, 16) and spans.shape == (2, 1, 2) and valid.all()


# -- frame layout ----------------------------------------------------------------------

def test_concat_matches_stacking_frames_in_order():
    x = torch.randn(1, 4, 3, 8, 8)
    c = concat_frames(FrameBatch(x, 4))
    assert c.layout == "concatenated" and c.latents.shape == (4, 3, 8, 8)
    assert torch.equal(c.latents, torch.cat([x[0, n][None] for n in range(4)]))


def test_concat_single_frame_is_relabel():
    x = torch.randn(2, 1, 3, 4, 4)
    c = concat_frames(FrameBatch(x, 1))
    assert torch.equal(c.latents, x[:, 0])


def test_double_fold_and_indivisible_split():
    c = concat_frames(FrameBatch(torch.randn(1, 4, 3, 4, 4), 4))
    with pytest.raises(ValueError, match="twice"):
        concat_frames(c)
    assert split_frames(c).latents.shape == (1, 4, 3, 4, 4)
    assert split_frames(FrameBatch(torch.randn(8, 3, 4, 4), 4, layout="concatenated")).latents.shape[0] == 2
    with pytest.raises(ValueError, match="divisible"):
        split_frames(FrameBatch(torch.randn(6, 3, 4, 4), 4, layout="concatenated"))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 3), st.integers(1, 5), st.integers(1, 4), st.integers(1, 6), st.integers(1, 6))
def test_concat_split_round_trip(b, n, c, h, w):
    x = torch.randn(b, n, c, h, w)
    back = split_frames(concat_frames(FrameBatch(x, n, timestep=3)))
    assert back.layout == "per-frame" and back.timestep == 3
    assert torch.equal(back.latents, x)


# -- config ----------------------------------------------------------------------------

@pytest.mark.parametrize("bad", [dict(mask_weight=-0.1), dict(mask_eps=0.0), dict(mask_eps=1.0),
                                 dict(cond_dropout=1.5), dict(guidance_scale=0.5), dict(num_frames=0)])
def test_config_rejects_invalid(bad):
    with pytest.raises(ValueError):
        ModelConfig(**bad)


def test_config_defaults_and_round_trip(tmp_path):
    cfg = ModelConfig()
    assert cfg.sample_steps == 30 and cfg.guidance_scale == 7.0 and cfg.guidance_enabled
    assert not cfg.replace(guidance_scale=1.0).guidance_enabled
    assert ModelConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    p = tmp_path / "c.yaml"
    p.write_text("num_frames: 3\nmask_weight: 0.0\n")
    assert load_config(p) == cfg.replace(num_frames=3, mask_weight=0.0)
    with pytest.raises(ValueError, match="unknown"):
        ModelConfig.from_dict({"bogus": 1})


# -- checkpoint ------------------------------------------------------------------------

def _params(seed=0):
    g = make_generator(seed)
    return {"unet.a.weight": torch.randn(3, 4, generator=g), "unet.b": torch.arange(5),
            "text.flag": torch.tensor([True, False])}


def test_checkpoint_round_trip_bit_exact(tmp_path):
    g = make_generator(3)
    torch.randn(7, generator=g)
    ck = Checkpoint(_params(), "synchronizer", ModelConfig(), step=12, rng_state=g.get_state(), meta={"k": 1})
    p = tmp_path / "x.ckpt"
    save_checkpoint(ck, p)
    back = load_checkpoint(p)
    assert back.stage == "synchronizer" and back.step == 12 and back.config == ModelConfig()
    for k, v in ck.params.items():
        assert back.params[k].dtype == v.dtype and torch.equal(back.params[k], v)
    g2 = torch.Generator()
    g2.set_state(back.rng_state)
    assert torch.equal(torch.randn(5, generator=g2), torch.randn(5, generator=g))
    p2 = tmp_path / "y.ckpt"
    save_checkpoint(back, p2)
    assert p.read_bytes() == p2.read_bytes()


def test_checkpoint_refuses_structural_mismatch(tmp_path):
    p = tmp_path / "x.ckpt"
    save_checkpoint(Checkpoint(_params(), "injector", ModelConfig(num_frames=4)), p)
    with pytest.raises(CheckpointVersionError, match="num_frames"):
        load_checkpoint(p, expected=ModelConfig(num_frames=3))
    load_checkpoint(p, expected=ModelConfig(num_frames=4, mask_weight=0.0))  # non-structural is fine


def test_checkpoint_bad_magic_and_stage(tmp_path):
    p = tmp_path / "junk.ckpt"
    p.write_bytes(b"not a checkpoint at all")
    with pytest.raises(Exception):
        read_header(p)
    with pytest.raises(ValueError):
        Checkpoint({}, "pretrain", ModelConfig())


def test_generator_seeding():
    a = torch.randn(4, generator=make_generator(5))
    assert torch.equal(a, torch.randn(4, generator=make_generator(5)))
    assert not torch.equal(a, torch.randn(4, generator=make_generator(6)))
    assert np.isfinite(a.numpy()).all()
