"""Shared fixtures: a small synthetic dataset and micro-trained checkpoints.

Both are session-scoped; the checkpoints come from real 2-epoch CLI runs so
downstream tests (predict, gradcam, eval) exercise artifacts with initialized
batch-norm statistics and genuine training history.
"""

import os

import pytest

from pneumonet.cli import main


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    rc = main(["synth", "--n", "6", "--side", "32", "--seed", "11",
               "--out", str(root)])
    assert rc == 0
    return str(root)


@pytest.fixture(scope="session")
def synth_manifest(synth_root):
    return os.path.join(synth_root, "manifest.csv")


MICRO_CONFIG = """\
epochs = 2
batch_size = 4
seed = 3
side = 32
base_channels = 4
augment = off
"""


@pytest.fixture(scope="session")
def micro_ckpts(tmp_path_factory, synth_manifest):
    root = tmp_path_factory.mktemp("micro")
    cfg = root / "run.cfg"
    cfg.write_text(MICRO_CONFIG)
    seg = str(root / "seg.ckpt")
    cls = str(root / "cls.ckpt")
    rc = main(["train-seg", "--manifest", synth_manifest,
               "--config", str(cfg), "--out", seg])
    assert rc == 0
    rc = main(["train-cls", "--manifest", synth_manifest,
               "--config", str(cfg), "--encoder-from", seg, "--out", cls])
    assert rc == 0
    return {"seg": seg, "cls": cls, "config": str(cfg), "dir": str(root)}
