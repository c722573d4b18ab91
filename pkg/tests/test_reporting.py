"""Tests for figure rendering: files appear, are valid PNGs, and failures
leave no partial artifacts."""

import os

import numpy as np
import pytest

from lipspline.reporting import (
    save_dual_curve,
    save_image_panel,
    save_residual_curve,
    save_spline_plot,
    save_training_curves,
)
from lipspline.spline import init_spline

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def is_png(path):
    with open(path, "rb") as fh:
        return fh.read(8) == PNG_MAGIC


def history_rows(n=4, with_dual=False):
    rows = []
    for epoch in range(1, n + 1):
        row = {"epoch": epoch, "train_mse": 1.0 / epoch,
               "test_mse": 1.3 / epoch, "mean_aelr": 2.0,
               "lipschitz_audit": 0.97}
        if with_dual:
            row["train_dual"] = float(epoch)
        rows.append(row)
    return rows


class TestFigures:
    def test_training_curves(self, tmp_path):
        path = str(tmp_path / "training.png")
        save_training_curves(path, history_rows())
        assert is_png(path)

    def test_training_curves_without_splines(self, tmp_path):
        rows = history_rows()
        for row in rows:
            row["mean_aelr"] = float("nan")
        path = str(tmp_path / "training.png")
        save_training_curves(path, rows)
        assert is_png(path)

    def test_dual_curve(self, tmp_path):
        path = str(tmp_path / "dual.png")
        save_dual_curve(path, history_rows(with_dual=True))
        assert is_png(path)

    def test_residual_curve_with_and_without_psnr(self, tmp_path):
        residuals = [10.0 ** -k for k in range(6)]
        p1 = str(tmp_path / "run1.png")
        save_residual_curve(p1, residuals)
        p2 = str(tmp_path / "run2.png")
        save_residual_curve(p2, residuals, psnrs=[20.0 + k for k in range(6)])
        assert is_png(p1) and is_png(p2)
        assert os.path.getsize(p2) > os.path.getsize(p1) * 0.8

    def test_spline_plot(self, tmp_path):
        path = str(tmp_path / "spline.png")
        save_spline_plot(path, init_spline("relu", 21, (-1.0, 1.0)))
        assert is_png(path)

    def test_image_panel(self, tmp_path):
        rng = np.random.default_rng(0)
        path = str(tmp_path / "panel.png")
        save_image_panel(path, {"truth": rng.random((16, 16)),
                                "recon": rng.random((16, 16))})
        assert is_png(path)

    def test_empty_panel_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            save_image_panel(str(tmp_path / "x.png"), {})

    def test_no_partial_files(self, tmp_path):
        save_training_curves(str(tmp_path / "a.png"), history_rows())
        save_image_panel(str(tmp_path / "b.png"),
                         {"x": np.zeros((4, 4))})
        assert sorted(os.listdir(tmp_path)) == ["a.png", "b.png"]
