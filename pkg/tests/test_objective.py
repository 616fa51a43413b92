import numpy as np
import pytest

from omnimae.masking import MaskSpec, from_kept, generate_mask
from omnimae.ndcore import ParameterError, Tape
from omnimae.objective import denormalize, masked_mse, normalize_targets
from omnimae.patchify import PatchConfig, PatchGrid

CFG = PatchConfig(1, 2, 2)  # 12 scalars per patch, 4 per channel


def grid(rows):
    rows = np.asarray(rows, dtype=float)
    return PatchGrid(rows, (1, 1, rows.shape[0]), CFG, "image")


def test_constant_patch_normalizes_to_zero():
    t = normalize_targets(grid(np.full((1, 12), 128.0)))
    assert np.array_equal(t.values, np.zeros((1, 12)))
    assert np.array_equal(t.mean, [[128.0] * 3])


def test_two_value_channel():
    px = np.zeros((4, 3))
    px[:2, 0] = 0.0
    px[2:, 0] = 255.0
    px[:, 1:] = 40.0
    t = normalize_targets(grid(px.reshape(1, 12)))
    ch0 = t.values.reshape(4, 3)[:, 0]
    expected = (np.array([0, 0, 255, 255]) - 127.5) / 127.5
    assert np.abs(ch0 - expected).max() < 1e-4


def test_normalization_stats_and_inverse():
    gen = np.random.default_rng(0)
    raw = gen.integers(0, 256, (1000, 12)).astype(float)
    t = normalize_targets(grid(raw))
    per = t.values.reshape(1000, 4, 3)
    live = t.var > t.eps
    assert np.abs(per.mean(axis=1))[live].max() < 1e-6
    assert np.abs(per.var(axis=1) - 1.0)[live].max() < 1e-5
    back = denormalize(t.values, t, clamp=False)
    assert np.abs(back - raw).max() < 1e-10


def test_denormalize_examples():
    raw = np.tile(np.array([250.0, 100.0, 30.0]), (4, 1))
    raw[0, 0], raw[1, 0], raw[2, 0], raw[3, 0] = 240, 260, 240, 260  # mean 250, sigma 10
    t = normalize_targets(grid(raw.reshape(1, 12)))
    zero = denormalize(np.zeros((1, 12)), t)
    assert np.allclose(zero.reshape(4, 3), np.tile(t.mean, (4, 1)))
    out = denormalize(np.full((1, 12), 10.0), t)
    assert out.reshape(4, 3)[0, 0] == 255.0


def test_masked_mse_examples():
    gen = np.random.default_rng(1)
    t = normalize_targets(grid(gen.integers(0, 256, (6, 12))))
    m = from_kept(6, [0, 2], MaskSpec(ratio=0.5))
    assert masked_mse(t.values, t, m) == 0.0
    assert masked_mse(t.values + 1.0, t, m) == 1.0


def test_masked_mse_vs_loop_and_tape():
    gen = np.random.default_rng(2)
    t = normalize_targets(grid(gen.integers(0, 256, (10, 12))))
    pred = gen.standard_normal((10, 12))
    m = generate_mask((1, 2, 5), MaskSpec("random", 0.6, 3))
    total, count = 0.0, 0
    for i in m.masked:
        for j in range(12):
            total += (pred[i, j] - t.values[i, j]) ** 2
            count += 1
    oracle = total / count
    assert abs(masked_mse(pred, t, m) - oracle) < 1e-12
    tape = Tape()
    loss = masked_mse(tape.param(pred, "pred"), t, m)
    assert abs(float(loss.value) - oracle) < 1e-12
    g = tape.backward(loss)["pred"]
    assert np.array_equal(g[list(m.kept)], np.zeros((m.k, 12)))
    assert np.allclose(g[list(m.masked)], 2 * (pred - t.values)[list(m.masked)] / count)


def test_masked_mse_permutation_invariant():
    gen = np.random.default_rng(3)
    raw = gen.integers(0, 256, (8, 12))
    pred = gen.standard_normal((8, 12))
    m = from_kept(8, [1, 5, 6], MaskSpec(ratio=0.5))
    perm = gen.permutation(8)
    inv = np.argsort(perm)
    t = normalize_targets(grid(raw))
    tp = normalize_targets(grid(raw[perm]))
    mp = from_kept(8, [int(inv[i]) for i in m.kept], MaskSpec(ratio=0.5))
    assert abs(masked_mse(pred, t, m) - masked_mse(pred[perm], tp, mp)) < 1e-12


def test_masked_mse_needs_masked_patches():
    t = normalize_targets(grid(np.zeros((2, 12))))
    with pytest.raises(ParameterError):
        masked_mse(np.zeros((2, 12)), t, from_kept(2, [0, 1], MaskSpec(ratio=0.0)))
