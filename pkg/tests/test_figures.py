"""Smoke tests for the grayscale figure renderings: files appear, carry the
PNG signature, and rerender byte-identically."""

import numpy as np
import pytest

from visemeflow import figures, models
from visemeflow import evaluation as ev
from visemeflow.datasets import PROFILES
from visemeflow.errors import DataError

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def test_confusion_figure(tmp_path):
    cm = ev.ConfusionMatrix.from_predictions(
        [0, 0, 1, 1, 2], [0, 1, 1, 1, 2], ["up", "down", "left"]
    )
    path = tmp_path / "confusion.png"
    figures.save_confusion_figure(cm, path)
    assert path.read_bytes().startswith(PNG_MAGIC)
    assert path.stat().st_size > 1000


def test_feature_map_grid(tmp_path):
    desc = models.desk_architecture(PROFILES["desk"], vocab_size=4)
    params = models.init_encoder_params(desc, seed=2)
    frame = np.random.default_rng(1).random((24, 36)).astype(np.float32)
    fm = ev.first_layer_feature_maps(params, desc, frame)
    path = tmp_path / "maps.png"
    figures.save_feature_map_grid(fm, path, cols=4)
    assert path.read_bytes().startswith(PNG_MAGIC)


def test_reconstruction_figure_and_shape_guard(tmp_path):
    rng = np.random.default_rng(5)
    originals = rng.random((6, 1, 24, 36)).astype(np.float32)
    recons = np.clip(originals + rng.normal(0, 0.05, originals.shape), 0, 1)
    path = tmp_path / "recon.png"
    figures.save_reconstruction_figure(originals, recons.astype(np.float32), path)
    assert path.read_bytes().startswith(PNG_MAGIC)
    with pytest.raises(DataError, match="differ"):
        figures.save_reconstruction_figure(originals, recons[:3], tmp_path / "x.png")


def test_loss_curve_and_empty_guard(tmp_path):
    history = [
        {"epoch": i, "train_loss": 1.0 / (i + 1), "val_metric": 0.5 + 0.05 * i}
        for i in range(8)
    ]
    path = tmp_path / "loss.png"
    figures.save_loss_curve(history, path)
    assert path.read_bytes().startswith(PNG_MAGIC)
    with pytest.raises(DataError, match="history"):
        figures.save_loss_curve([], tmp_path / "y.png")


def test_figures_render_deterministically(tmp_path):
    cm = ev.ConfusionMatrix.from_predictions([0, 1, 1], [0, 1, 0], ["a", "b"])
    p1, p2 = tmp_path / "c1.png", tmp_path / "c2.png"
    figures.save_confusion_figure(cm, p1)
    figures.save_confusion_figure(cm, p2)
    assert p1.read_bytes() == p2.read_bytes()
