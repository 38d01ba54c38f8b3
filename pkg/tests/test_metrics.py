import math

import numpy as np
import pytest
import torch
from skimage.metrics import structural_similarity as sk_ssim

from streamfuse.metrics import (
    PSNR_CAP_DB,
    MetricRecord,
    ShapeMismatch,
    composite_loss,
    dice,
    psnr3d,
    read_metric_csv,
    ssim3d,
    write_metric_csv,
)


def _vol(shape=(10, 10, 8), seed=0, lo=0.0, hi=1.0):
    rng = np.random.default_rng(seed)
    return rng.uniform(lo, hi, size=shape)


def _ssim_bruteforce(a, b, win=7, k1=0.01, k2=0.03, rng_=1.0):
    """Direct sliding-window SSIM with sample covariance, independent of the
    torch implementation."""
    c1, c2 = (k1 * rng_) ** 2, (k2 * rng_) ** 2
    h, w, d = a.shape
    vals = []
    n = win**3
    for i in range(h - win + 1):
        for j in range(w - win + 1):
            for k in range(d - win + 1):
                xa = a[i : i + win, j : j + win, k : k + win].ravel()
                xb = b[i : i + win, j : j + win, k : k + win].ravel()
                ua, ub = xa.mean(), xb.mean()
                va = ((xa - ua) ** 2).sum() / (n - 1)
                vb = ((xb - ub) ** 2).sum() / (n - 1)
                vab = ((xa - ua) * (xb - ub)).sum() / (n - 1)
                vals.append(
                    ((2 * ua * ub + c1) * (2 * vab + c2))
                    / ((ua**2 + ub**2 + c1) * (va + vb + c2))
                )
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# psnr


def test_psnr_constant_offset_is_twenty_db():
    target = _vol(seed=1, hi=0.9)
    assert psnr3d(target + 0.1, target) == pytest.approx(20.0, abs=1e-6)


def test_psnr_identical_is_infinite_and_capped_in_records():
    v = _vol(seed=2)
    assert psnr3d(v, v) == math.inf
    rec = MetricRecord.from_volumes("s", "na", "none", "unseen", v, v)
    assert rec.psnr_db == PSNR_CAP_DB
    assert rec.ssim == pytest.approx(1.0, abs=1e-9)


def test_psnr_matches_direct_formula():
    rng = np.random.default_rng(3)
    for _ in range(20):
        a, b = rng.uniform(size=(8, 8, 8)), rng.uniform(size=(8, 8, 8))
        expect = 10.0 * math.log10(1.0 / np.mean((a - b) ** 2))
        assert psnr3d(a, b) == pytest.approx(expect, abs=1e-9)


def test_psnr_decreases_with_noise_amplitude():
    target = _vol(seed=4)
    rng = np.random.default_rng(5)
    noise = rng.normal(size=target.shape)
    values = [psnr3d(np.clip(target + amp * noise, 0, 1), target) for amp in (0.01, 0.05, 0.2)]
    assert values[0] > values[1] > values[2]


def test_psnr_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        psnr3d(np.zeros((4, 4, 4)), np.zeros((4, 4, 5)))


# ---------------------------------------------------------------------------
# ssim


def test_ssim_identical_is_one():
    v = _vol(seed=6)
    assert float(ssim3d(v, v)) == pytest.approx(1.0, abs=1e-9)


def test_ssim_matches_bruteforce_oracle():
    a, b = _vol((9, 9, 8), seed=7), _vol((9, 9, 8), seed=8)
    assert float(ssim3d(a, b)) == pytest.approx(_ssim_bruteforce(a, b), abs=1e-9)


def test_ssim_checkerboard_anticorrelation_negative():
    idx = np.indices((8, 8, 8)).sum(axis=0)
    a = (idx % 2).astype(np.float64)
    b = 1.0 - a
    value = float(ssim3d(a, b))
    assert value < 0
    assert value == pytest.approx(_ssim_bruteforce(a, b), abs=1e-9)


def test_ssim_matches_skimage():
    a, b = _vol((12, 11, 10), seed=9), _vol((12, 11, 10), seed=10)
    ref = sk_ssim(a, b, win_size=7, gaussian_weights=False, data_range=1.0)
    assert float(ssim3d(a, b)) == pytest.approx(ref, abs=1e-9)


def test_ssim_symmetry_and_flip_invariance():
    a, b = _vol(seed=11), _vol(seed=12)
    assert float(ssim3d(a, b)) == pytest.approx(float(ssim3d(b, a)), abs=1e-12)
    # flipping permutes the local-SSIM map; only the reduction order changes
    fa, fb = a[::-1].copy(), b[::-1].copy()
    assert float(ssim3d(fa, fb)) == pytest.approx(float(ssim3d(a, b)), abs=1e-12)


def test_ssim_window_larger_than_volume_errors():
    with pytest.raises(ShapeMismatch):
        ssim3d(np.zeros((6, 6, 6)), np.zeros((6, 6, 6)), window=7)


# ---------------------------------------------------------------------------
# dice


def test_dice_cases():
    a = np.zeros((4, 4, 4))
    b = np.zeros((4, 4, 4))
    assert dice(a, b) == 1.0  # both empty agree perfectly
    a[0, 0, :4] = 1
    assert dice(a, a.copy()) == 1.0
    b[1, 1, :4] = 1
    assert dice(a, b) == 0.0
    c = np.zeros((4, 4, 4))
    c[0, 0, 2:], c[1, 1, :2] = 1, 1  # |A|=|B|=4, overlap 2
    assert dice(a, c) == 0.5
    with pytest.raises(ValueError):
        dice(a, np.full((4, 4, 4), 0.5))
    with pytest.raises(ShapeMismatch):
        dice(a, np.zeros((4, 4, 5)))


# ---------------------------------------------------------------------------
# composite loss


def test_loss_zero_iff_identical():
    t = torch.from_numpy(_vol(seed=13))[None, ..., None]
    assert float(composite_loss(t, t)) == pytest.approx(0.0, abs=1e-6)
    off = torch.clamp(t + 0.05, 0, 1)
    assert float(composite_loss(off, t)) > 1e-4


def test_loss_constant_offset_matches_oracle():
    target = _vol((9, 9, 8), seed=14, hi=0.9)
    pred = target + 0.1
    expect = 0.1**2 + 0.8 * (1.0 - _ssim_bruteforce(pred, target))
    t_pred = torch.from_numpy(pred)[None, ..., None]
    t_tgt = torch.from_numpy(target)[None, ..., None]
    assert float(composite_loss(t_pred, t_tgt)) == pytest.approx(expect, abs=1e-7)


def test_loss_weight_and_pixel_term_configurable():
    t = torch.from_numpy(_vol(seed=15))[None, ..., None]
    p = torch.clamp(t + 0.03, 0, 1)
    mse_loss = float(composite_loss(p, t, ssim_weight=0.0))
    assert mse_loss == pytest.approx(float(((p - t) ** 2).mean()), abs=1e-9)
    mae_loss = float(composite_loss(p, t, ssim_weight=0.0, pixel_term="mae"))
    assert mae_loss == pytest.approx(float((p - t).abs().mean()), abs=1e-9)
    with pytest.raises(ValueError):
        composite_loss(p, t, pixel_term="huber")
    with pytest.raises(ShapeMismatch):
        composite_loss(p, t[:, :-1])


def test_loss_nonnegative_property():
    rng = np.random.default_rng(16)
    for _ in range(10):
        a = torch.from_numpy(rng.uniform(size=(1, 8, 8, 8, 1)))
        b = torch.from_numpy(rng.uniform(size=(1, 8, 8, 8, 1)))
        assert float(composite_loss(a, b)) >= 0.0


def test_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(17)
    pred = torch.from_numpy(rng.uniform(0.2, 0.8, size=(1, 8, 8, 4, 1))).requires_grad_(True)
    target = torch.from_numpy(rng.uniform(0.2, 0.8, size=(1, 8, 8, 4, 1)))
    loss = composite_loss(pred, target, window=3)
    loss.backward()
    eps = 1e-4
    worst = 0.0
    for pos in [(0, i, j, k, 0) for i, j, k in rng.integers(0, (8, 8, 4), size=(10, 3))]:
        pos = tuple(int(v) for v in pos)
        xp, xm = pred.detach().clone(), pred.detach().clone()
        xp[pos] += eps
        xm[pos] -= eps
        with torch.no_grad():
            fd = (composite_loss(xp, target, window=3) - composite_loss(xm, target, window=3)) / (2 * eps)
        g = float(pred.grad[pos])
        worst = max(worst, abs(g - float(fd)) / max(abs(g), abs(float(fd)), 1e-8))
    assert worst < 1e-4


# ---------------------------------------------------------------------------
# metric records


def test_metric_csv_round_trip(tmp_path):
    records = [
        MetricRecord("s1", "na", "none", "unseen", 22.5, 0.7, 0.9),
        MetricRecord("s2", "bd", "rotate", "predefined", PSNR_CAP_DB, 1.0, None),
    ]
    path = tmp_path / "m.csv"
    write_metric_csv(path, records, manifest_digest="abc123")
    text = path.read_text()
    assert text.startswith("# manifest_digest: abc123")
    assert text.splitlines()[1] == "sample_id,method,condition,split,psnr_db,ssim,dice"
    back = read_metric_csv(path)
    assert back == records
