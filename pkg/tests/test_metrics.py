import csv
import math

import numpy as np
import pytest

from lpdm.images import write_image
from lpdm.metrics import evaluate_dirs, mae, psnr, ssim
from oracles import mae_scalar, psnr_scalar, ssim_naive


def _pair(seed, shape=(3, 32, 32)):
    rng = np.random.default_rng(seed)
    return rng.uniform(-1, 1, shape), rng.uniform(-1, 1, shape)


def test_psnr_identical_is_inf():
    a, _ = _pair(0)
    assert psnr(a, a) == math.inf


def test_psnr_uniform_difference():
    a = np.full((3, 8, 8), -0.5)
    # 0.1 in [0, 1] units is 0.2 in [-1, 1] units
    assert psnr(a, a + 0.2) == pytest.approx(20.0, abs=1e-9)


def test_mae_values():
    a, _ = _pair(1)
    assert mae(a, a) == 0.0
    b = np.full((3, 8, 8), 0.0)
    assert mae(b, b + 0.5) == pytest.approx(0.25, abs=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_against_scalar_oracles(seed):
    a, b = _pair(seed)
    assert psnr(a, b) == pytest.approx(psnr_scalar(a, b), abs=1e-6)
    assert mae(a, b) == pytest.approx(mae_scalar(a, b), abs=1e-7)
    assert ssim(a, b) == pytest.approx(ssim_naive(a, b), abs=1e-6)


def test_ssim_identical_is_one():
    a, _ = _pair(5)
    assert ssim(a, a) == 1.0


def test_ssim_inverted_binary_is_negative():
    rng = np.random.default_rng(0)
    a = np.where(rng.random((3, 32, 32)) > 0.5, 1.0, -1.0)
    assert ssim(a, -a) < 0


def test_ssim_too_small():
    with pytest.raises(ValueError, match="window"):
        ssim(np.zeros((3, 10, 40)), np.zeros((3, 10, 40)))


def test_symmetry_and_channel_relabeling():
    a, b = _pair(7)
    assert psnr(a, b) == psnr(b, a)
    assert mae(a, b) == mae(b, a)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-15)
    perm = [2, 0, 1]
    assert psnr(a[perm], b[perm]) == pytest.approx(psnr(a, b), abs=1e-12)
    assert ssim(a[perm], b[perm]) == pytest.approx(ssim(a, b), abs=1e-12)
    assert mae(a[perm], b[perm]) == pytest.approx(mae(a, b), abs=1e-15)


def test_psnr_decreases_with_noise():
    rng = np.random.default_rng(0)
    a = rng.uniform(-0.5, 0.5, (3, 32, 32))
    g = rng.standard_normal(a.shape)
    values = [psnr(a, a + s * g) for s in (0.01, 0.02, 0.05, 0.1, 0.2, 0.4)]
    assert all(y < x for x, y in zip(values, values[1:]))


def test_shape_mismatch():
    with pytest.raises(ValueError):
        mae(np.zeros((3, 4, 4)), np.zeros((3, 4, 5)))


# ---------------------------------------------------------------- directories

def _write(dirpath, n, seed):
    rng = np.random.default_rng(seed)
    for i in range(n):
        write_image(dirpath / f"{i:02d}.png", rng.uniform(-1, 1, (3, 16, 16)))


def test_fifteen_pairs(tmp_path):
    _write(tmp_path / "res", 15, 0)
    _write(tmp_path / "gt", 15, 1)
    report = evaluate_dirs(tmp_path / "res", tmp_path / "gt")
    assert len(report.per_image) == 15 and report.problems == []
    assert [r[0] for r in report.per_image] == sorted(r[0] for r in report.per_image)
    agg = report.aggregate
    assert agg["ssim"] == pytest.approx(np.mean([r[2] for r in report.per_image]))
    report.write_csv(tmp_path / "m.csv")
    rows = list(csv.reader(open(tmp_path / "m.csv")))
    assert rows[0] == ["filename", "psnr_db", "ssim", "mae"]
    assert len(rows) == 17 and rows[-1][0] == "__mean__"
    assert float(rows[-1][1]) == agg["psnr_db"]


def test_same_directory(tmp_path):
    _write(tmp_path / "res", 3, 0)
    report = evaluate_dirs(tmp_path / "res", tmp_path / "res")
    assert report.aggregate["ssim"] == 1.0 and report.aggregate["mae"] == 0.0
    assert all(math.isinf(r[1]) for r in report.per_image)


def test_empty_intersection(tmp_path):
    _write(tmp_path / "res", 2, 0)
    (tmp_path / "gt").mkdir()
    write_image(tmp_path / "gt" / "other.png", np.zeros((3, 16, 16)))
    report = evaluate_dirs(tmp_path / "res", tmp_path / "gt")
    assert report.per_image == []
    assert any("no matching" in p for p in report.problems)


def test_unmatched_and_undecodable_continue(tmp_path):
    _write(tmp_path / "res", 3, 0)
    _write(tmp_path / "gt", 2, 1)
    (tmp_path / "res" / "01.png").write_bytes(b"not a png")
    report = evaluate_dirs(tmp_path / "res", tmp_path / "gt")
    assert [r[0] for r in report.per_image] == ["00.png"]
    assert any("unmatched: 02.png" in p for p in report.problems)
    assert any("failed: 01.png" in p for p in report.problems)


def test_threads_match_serial(tmp_path):
    _write(tmp_path / "res", 6, 0)
    _write(tmp_path / "gt", 6, 1)
    a = evaluate_dirs(tmp_path / "res", tmp_path / "gt", threads=1)
    b = evaluate_dirs(tmp_path / "res", tmp_path / "gt", threads=4)
    assert a.per_image == b.per_image
