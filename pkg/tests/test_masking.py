import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from omnimae.masking import Mask, MaskSpec, apply_mask, from_kept, generate_mask, kept_count
from omnimae.ndcore import ParameterError, ShapeError
from omnimae.patchify import PatchConfig, PatchGrid


def test_vit_b_kept_counts():
    assert generate_mask((1, 14, 14), MaskSpec("random", 0.90, 0)).k == 19
    assert generate_mask((8, 14, 14), MaskSpec("random", 0.95, 0)).k == 78


@pytest.mark.parametrize("kind", ["random", "tube", "causal", "frame"])
def test_zero_ratio_keeps_everything(kind):
    m = generate_mask((3, 4, 5), MaskSpec(kind, 0.0, 1))
    assert m.kept == tuple(range(60)) and m.masked == ()


def test_tube_and_causal_examples():
    tube = generate_mask((8, 14, 14), MaskSpec("tube", 0.90, 0))
    assert tube.k == 152
    causal = generate_mask((8, 14, 14), MaskSpec("causal", 0.90, 0))
    assert causal.kept == tuple(range(156))


def test_too_high_ratio_names_limit():
    with pytest.raises(ParameterError, match="0.75"):
        generate_mask((1, 2, 2), MaskSpec("random", 0.9, 0))
    with pytest.raises(ParameterError):
        generate_mask((8, 2, 2), MaskSpec("tube", 0.9, 0))


def test_frame_keeps_at_least_one_slot():
    m = generate_mask((8, 14, 14), MaskSpec("frame", 0.90, 4))
    assert m.k == 196


def test_spec_validation():
    with pytest.raises(ParameterError):
        MaskSpec("random", 1.0)
    with pytest.raises(ParameterError):
        MaskSpec("blockwise", 0.5)


def expected_k(kind, grid, r):
    nT, nH, nW = grid
    if kind in ("random", "causal"):
        return kept_count(nT * nH * nW, r)
    if kind == "tube":
        return kept_count(nH * nW, r) * nT
    return max(1, kept_count(nT, r)) * nH * nW


grids = st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6))


@settings(max_examples=300, deadline=None)
@given(kind=st.sampled_from(["random", "tube", "causal", "frame"]), grid=grids,
       r=st.floats(0, 0.99), seed=st.integers(0, 2**31))
def test_mask_laws(kind, grid, r, seed):
    nT, nH, nW = grid
    n, plane = nT * nH * nW, nH * nW
    spec = MaskSpec(kind, r, seed)
    k = expected_k(kind, grid, r)
    if k == 0:
        with pytest.raises(ParameterError):
            generate_mask(grid, spec)
        return
    m = generate_mask(grid, spec)
    assert m.k == k and m.k + m.m == n
    assert set(m.kept).isdisjoint(m.masked) and set(m.kept) | set(m.masked) == set(range(n))
    assert list(m.kept) == sorted(m.kept)
    kept = set(m.kept)
    if kind == "tube":
        for i in range(n):
            column = {i % plane + s * plane for s in range(nT)}
            assert (i in kept) == column.issubset(kept)
    elif kind == "causal":
        assert m.kept == tuple(range(k))
    elif kind == "frame":
        for s in range(nT):
            block = set(range(s * plane, (s + 1) * plane))
            assert block.issubset(kept) or block.isdisjoint(kept)
    assert generate_mask(grid, spec) == m


def test_causal_is_seed_free():
    assert generate_mask((4, 3, 3), MaskSpec("causal", 0.5, 1)).kept == \
        generate_mask((4, 3, 3), MaskSpec("causal", 0.5, 99)).kept


def test_random_uniformity_hypergeometric():
    n, k, seeds = 16, 8, 10_000
    counts = np.zeros(n)
    for s in range(seeds):
        counts[list(generate_mask((1, 4, 4), MaskSpec("random", 0.5, s)).kept)] += 1
    p = k / n
    # per-index inclusion is Bernoulli(K/N) per seed
    sigma = math.sqrt(seeds * p * (1 - p))
    assert np.abs(counts - seeds * p).max() < 5 * sigma


def test_distinct_seeds_distinct_masks():
    seen = set()
    for s in range(1000):
        a = generate_mask((4, 4, 4), MaskSpec("random", 0.75, 2 * s)).kept
        b = generate_mask((4, 4, 4), MaskSpec("random", 0.75, 2 * s + 1)).kept
        assert a != b
        seen.add(a)
    assert len(seen) > 990


def grid_of(n, p=6, seed=0):
    patches = np.random.default_rng(seed).standard_normal((n, p))
    return PatchGrid(patches, (1, 1, n), PatchConfig(1, 1, 1), "video")


def test_apply_mask_examples():
    g = grid_of(4)
    full = from_kept(4, range(4), MaskSpec(ratio=0.0))
    rows, pos = apply_mask(g, full)
    assert np.array_equal(rows, g.patches) and pos == [0, 1, 2, 3]
    rows, pos = apply_mask(g, from_kept(4, [0], MaskSpec(ratio=0.75)))
    assert rows.shape == (1, 6) and np.array_equal(rows[0], g.patches[0]) and pos == [0]


def test_apply_mask_gather_scatter_idempotent():
    g = grid_of(20, seed=4)
    m = generate_mask((1, 4, 5), MaskSpec("random", 0.6, 9))
    rows, pos = apply_mask(g, m)
    scattered = np.zeros_like(g.patches)
    scattered[pos] = rows
    again, pos2 = apply_mask(PatchGrid(scattered, g.dims, g.cfg, g.modality), m)
    assert np.array_equal(again, rows) and pos2 == pos


def test_apply_mask_size_mismatch():
    with pytest.raises(ShapeError):
        apply_mask(grid_of(4), from_kept(5, [0], MaskSpec()))


def test_text_roundtrip():
    m = generate_mask((2, 3, 3), MaskSpec("tube", 0.5, 12))
    text = m.to_text()
    assert text.startswith("tube:0.5:12:18:[")
    assert Mask.from_text(text) == m
