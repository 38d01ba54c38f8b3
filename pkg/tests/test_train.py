import numpy as np
import pytest
import torch

from streamfuse import models, volio
from streamfuse import train as train_mod
from streamfuse.train import (
    PlateauScheduler,
    TrainingDiverged,
    read_history_csv,
    set_global_determinism,
    train,
    write_history_csv,
)

TINY = dict(input_shape=(8, 8, 4), widths=(2, 4, 8), controller_hidden=4)


def _samples(n, offset=0):
    out = []
    for i in range(n):
        rng = np.random.default_rng(offset + i)
        src = volio.Volume(rng.uniform(size=(8, 8, 4)), intensity_units="normalized")
        tgt = volio.Volume(rng.uniform(size=(8, 8, 4)), intensity_units="normalized")
        out.append(volio.PairedSample(source=src, target=tgt, id=f"t{offset + i}"))
    return out


def _run(variant="na", epochs=2, seed=1, out_dir=None, n_train=3, n_val=2):
    cfg = models.ModelConfig(variant=variant, **TINY)
    set_global_determinism(seed)
    model = models.build(cfg)
    return train(
        model,
        _samples(n_train),
        _samples(n_val, offset=100),
        epochs=epochs,
        seed=seed,
        out_dir=out_dir,
        loss_kwargs={"window": 3},
    )


# ---------------------------------------------------------------------------
# plateau scheduler


def test_single_plateau_halves_once():
    sched = PlateauScheduler(1e-4)
    sched.step(1.0)
    lrs = [sched.step(1.0) for _ in range(6)]  # 6 stagnant epochs
    assert lrs[:5] == [1e-4] * 5
    assert lrs[5] == pytest.approx(5e-5)
    assert sched.stale == 0


def test_two_disjoint_plateaus_halve_twice():
    sched = PlateauScheduler(1e-4)
    sched.step(1.0)
    for _ in range(6):
        sched.step(1.0)
    assert sched.lr == pytest.approx(5e-5)
    sched.step(0.5)  # improvement resets the streak
    for _ in range(6):
        sched.step(0.5)
    assert sched.lr == pytest.approx(2.5e-5)


def test_five_stagnant_epochs_do_not_halve():
    sched = PlateauScheduler(1e-4)
    sched.step(1.0)
    for _ in range(5):
        sched.step(1.0)
    assert sched.lr == 1e-4


def test_improvement_below_min_delta_counts_as_stagnant():
    sched = PlateauScheduler(1e-4, min_delta=1e-6)
    sched.step(1.0)
    for i in range(6):
        sched.step(1.0 - 1e-9 * (i + 1))
    assert sched.lr == pytest.approx(5e-5)


def test_lr_never_increases_and_follows_halving_law():
    rng = np.random.default_rng(0)
    sched = PlateauScheduler(1e-4)
    halvings = 0
    prev_lr = sched.lr
    best = float("inf")
    stale = 0
    for _ in range(200):
        val = float(rng.uniform(0.1, 1.0))
        lr = sched.step(val)
        assert lr <= prev_lr
        if lr < prev_lr:
            halvings += 1
        prev_lr = lr
        assert lr == pytest.approx(1e-4 * 0.5**halvings)


# ---------------------------------------------------------------------------
# determinism


def test_same_seed_same_initial_weights():
    cfg = models.ModelConfig(variant="na", **TINY)
    set_global_determinism(7)
    a = models.build(cfg)
    set_global_determinism(7)
    b = models.build(cfg)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)
    set_global_determinism(8)
    c = models.build(cfg)
    assert any(
        not torch.equal(pa, pc) for pa, pc in zip(a.parameters(), c.parameters())
    )


def test_training_is_reproducible():
    _, state_a = _run(seed=3, epochs=2)
    _, state_b = _run(seed=3, epochs=2)
    for ra, rb in zip(state_a.history, state_b.history):
        assert ra == pytest.approx(rb, abs=1e-6)


# ---------------------------------------------------------------------------
# train loop behavior


def test_best_val_loss_is_running_minimum(tmp_path):
    _, state = _run(epochs=3, out_dir=tmp_path)
    vals = [row[2] for row in state.history]
    assert state.best_val_loss == min(vals)
    assert state.best_epoch == int(np.argmin(vals)) + 1


def test_checkpoint_matches_minimum_val_loss(tmp_path):
    model, state = _run(epochs=3, out_dir=tmp_path, seed=5)
    loaded, meta = models.load_checkpoint(tmp_path / "checkpoint.zip")
    assert meta["epoch"] == state.best_epoch
    assert meta["val_loss"] == pytest.approx(state.best_val_loss, abs=1e-9)
    assert meta["seed"] == 5
    recomputed = train_mod.evaluate_loss(loaded, _samples(2, offset=100), {"window": 3})
    assert recomputed == pytest.approx(state.best_val_loss, abs=1e-6)


def test_nan_loss_aborts(monkeypatch, tmp_path):
    def broken_loss(pred, target, **kw):
        return (pred * float("nan")).mean()

    monkeypatch.setattr(train_mod, "composite_loss", broken_loss)
    with pytest.raises(TrainingDiverged):
        _run(epochs=1, out_dir=tmp_path)


def test_empty_dataset_rejected():
    cfg = models.ModelConfig(variant="na", **TINY)
    model = models.build(cfg)
    with pytest.raises(ValueError):
        train(model, [], _samples(2), epochs=1)


def test_all_variants_train_one_epoch():
    for variant in ("ta", "cc", "fl", "bd"):
        _, state = _run(variant=variant, epochs=1)
        assert len(state.history) == 1
        assert np.isfinite(state.history[0][1])


def test_bd_checkpoint_meta_logs_stream_specs(tmp_path):
    _run(variant="bd", epochs=1, out_dir=tmp_path)
    _, meta = models.load_checkpoint(tmp_path / "checkpoint.zip")
    specs = meta["augmentation_specs"]
    assert len(specs) == 3  # one entry per training batch
    assert all(len(step) == 4 for step in specs)


# ---------------------------------------------------------------------------
# history csv


def test_history_csv_round_trip(tmp_path):
    _, state = _run(epochs=2, out_dir=tmp_path)
    rows = read_history_csv(tmp_path / "history.csv")
    assert len(rows) == len(state.batch_rows)
    summaries = [r for r in rows if r[1] == train_mod.EPOCH_SUMMARY_BATCH]
    assert len(summaries) == 2
    for row, (epoch, train_loss, val_loss, lr) in zip(summaries, state.history):
        assert row[0] == epoch
        assert row[2] == pytest.approx(train_loss, abs=1e-8)
        assert row[3] == pytest.approx(val_loss, abs=1e-8)
        batch_rows = [r for r in rows if r[0] == epoch and r[1] >= 0]
        assert all(r[3] is None for r in batch_rows)


def test_history_csv_digest_comment(tmp_path):
    write_history_csv(tmp_path / "h.csv", [(1, 0, 0.5, "", 1e-4)], manifest_digest="deadbeef")
    text = (tmp_path / "h.csv").read_text()
    assert text.startswith("# manifest_digest: deadbeef")
    assert read_history_csv(tmp_path / "h.csv") == [(1, 0, 0.5, None, 1e-4)]
