import json
import time

import numpy as np
import pytest
from PIL import Image

from conftest import TINY
from storysync.cli import main, read_prompt_file
from storysync.core.config import ModelConfig


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A tiny dataset plus synchronizer and injector checkpoints trained for a couple of steps."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(ModelConfig(**TINY).to_dict()))
    assert main(["gen-data", "--out", str(root / "data"), "--groups", "3", "--frames", "4", "--size", "16"]) == 0
    assert main(["train", "--stage", "synchronizer", "--data", str(root / "data"), "--out", str(root / "s1"),
                 "--config", str(cfg), "--steps", "2"]) == 0
    assert main(["train", "--stage", "injector", "--data", str(root / "data"), "--out", str(root / "s2"),
                 "--config", str(cfg), "--steps", "2", "--sync-checkpoint", str(root / "s1" / "final.ckpt")]) == 0
    prompts = root / "story.txt"
    prompts.write_text("# one story\n[red circle hero] jumping in forest\n[red circle hero] sitting in cave\n"
                       "[red circle hero] running in snow\n[red circle hero] flying in night\n")
    return root


def test_gen_data_counts_and_determinism(tmp_path, capsys):
    assert main(["gen-data", "--out", str(tmp_path / "a"), "--groups", "10", "--frames", "4", "--size", "32"]) == 0
    assert "10 groups, 40 images, 40 masks" in capsys.readouterr().out
    a = tmp_path / "a" / "groups"
    assert len(list(a.glob("*/frame*.png"))) == 40 and len(list(a.glob("*/mask_*.png"))) == 40
    assert len(list(a.glob("*/manifest.json"))) == 10
    assert main(["gen-data", "--out", str(tmp_path / "b"), "--groups", "10", "--frames", "4", "--size", "32"]) == 0
    fa, fb = sorted(a.rglob("*")), sorted((tmp_path / "b" / "groups").rglob("*"))
    assert [p.relative_to(a) for p in fa] == [p.relative_to(tmp_path / "b" / "groups") for p in fb]
    assert all(x.read_bytes() == y.read_bytes() for x, y in zip(fa, fb) if x.is_file())


def test_gen_data_refuses_then_forces(tmp_path):
    out = tmp_path / "d"
    assert main(["gen-data", "--out", str(out), "--groups", "2", "--size", "16"]) == 0
    (out / "stray.txt").write_text("x")
    assert main(["gen-data", "--out", str(out), "--groups", "2", "--size", "16"]) == 1
    assert main(["gen-data", "--out", str(out), "--groups", "3", "--size", "16", "--force"]) == 0
    assert not (out / "stray.txt").exists() and len(list((out / "groups").iterdir())) == 3


def test_usage_errors_exit_one(workspace, tmp_path):
    assert main(["train", "--stage", "injector", "--data", str(workspace / "data"), "--out", str(tmp_path / "x"),
                 "--steps", "1"]) == 1
    assert main(["train", "--stage", "nonsense", "--data", "d", "--out", "o"]) == 1
    assert main(["sample", "--checkpoint", str(tmp_path / "missing.ckpt"), "--prompts",
                 str(workspace / "story.txt"), "--out", str(tmp_path / "s")]) == 1
    bad = tmp_path / "bad.yaml"
    bad.write_text("mask_weight: -1\n")
    assert main(["train", "--stage", "synchronizer", "--data", str(workspace / "data"), "--out",
                 str(tmp_path / "y"), "--config", str(bad)]) == 1
    assert main(["sample", "--checkpoint", str(workspace / "s1" / "final.ckpt"), "--prompts",
                 str(workspace / "story.txt"), "--reference", str(workspace / "data" / "groups" / "g0000"),
                 "--out", str(tmp_path / "z")]) == 1


def test_train_writes_checkpoint_and_log(workspace):
    assert (workspace / "s1" / "final.ckpt").exists()
    assert len((workspace / "s1" / "metrics.log").read_text().splitlines()) == 2


def test_train_quick_run_default_config(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path / "d"), "--groups", "2"]) == 0
    t0 = time.time()
    assert main(["train", "--stage", "synchronizer", "--data", str(tmp_path / "d"), "--out", str(tmp_path / "o"),
                 "--steps", "10"]) == 0
    assert time.time() - t0 < 60


def _sample(workspace, out, *extra):
    args = ["sample", "--checkpoint", str(workspace / "s2" / "final.ckpt"), "--prompts", str(workspace / "story.txt"),
            "--out", str(out), "--steps", "3", "--seed", "7", *extra]
    assert main(args) == 0
    return {p.name: p.read_bytes() for p in sorted(out.glob("*.png"))}


def test_sample_outputs_and_determinism(workspace, tmp_path):
    a = _sample(workspace, tmp_path / "a")
    assert sorted(a) == [f"story0_frame{n}.png" for n in range(4)]
    assert np.asarray(Image.open(tmp_path / "a" / "story0_frame0.png")).shape == (16, 16, 3)
    assert a == _sample(workspace, tmp_path / "b")
    side = json.loads((tmp_path / "a" / "provenance.json").read_text())
    assert side["seed"] == 7 and side["steps"] == 3 and side["guidance"] == 7.0 and len(side["checkpoint_sha256"]) == 64


def test_sample_reference_changes_images(workspace, tmp_path):
    import torch

    from storysync.core.checkpoint import load_checkpoint, save_checkpoint

    # open the zero-initialised gates so the reference can have an effect
    ck = load_checkpoint(workspace / "s2" / "final.ckpt")
    for k in ck.params:
        if k.endswith(".gate"):
            ck.params[k] = torch.ones_like(ck.params[k])
    save_checkpoint(ck, workspace / "open.ckpt")
    base = ["sample", "--checkpoint", str(workspace / "open.ckpt"), "--prompts", str(workspace / "story.txt"),
            "--steps", "3", "--seed", "7"]
    assert main(base + ["--out", str(tmp_path / "plain")]) == 0
    assert main(base + ["--out", str(tmp_path / "ref"), "--reference",
                        str(workspace / "data" / "groups" / "g0001")]) == 0
    plain = [p.read_bytes() for p in sorted((tmp_path / "plain").glob("*.png"))]
    ref = [p.read_bytes() for p in sorted((tmp_path / "ref").glob("*.png"))]
    assert plain != ref


def test_eval_and_inspect(workspace, tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(workspace / "s1" / "final.ckpt"), "--data", str(workspace / "data"),
                 "--out", str(tmp_path / "ev"), "--groups", "1", "--steps", "2", "--metrics", "dice,face_sim",
                 "--run-id", "smoke"]) == 0
    rep = json.loads((tmp_path / "ev" / "smoke.json").read_text())
    assert set(rep["metrics"]) == {"dice", "face_sim"}
    assert main(["eval", "--checkpoint", str(workspace / "s1" / "final.ckpt"), "--data", str(workspace / "data"),
                 "--out", str(tmp_path / "ev"), "--metrics", "clip_i"]) == 1
    out = tmp_path / "masks"
    assert main(["inspect-masks", "--checkpoint", str(workspace / "s1" / "final.ckpt"), "--group",
                 str(workspace / "data" / "groups" / "g0000"), "--out", str(out)]) == 0
    files = sorted(out.glob("*.png"))
    assert [f.name for f in files] == [f"frame{n}_char0.png" for n in range(4)]
    arr = np.asarray(Image.open(files[0]))
    assert arr.shape == (16, 32) and arr[:, :16].min() == 0 and arr[:, :16].max() == 255


def test_prompt_file_parsing(tmp_path):
    p = tmp_path / "p.txt"
    p.write_text("[a b] x\n[a b] y\n\n\n[c] z\n")
    assert read_prompt_file(p) == [["[a b] x", "[a b] y"], ["[c] z"]]
