"""Keep/drop partitions over a patch grid.

``ratio`` is always the masked fraction. The kept count is floored, so
Random masking at 0.90 on a 14x14 image keeps 19 patches and at 0.95 on an
8x14x14 video keeps 78.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from .ndcore import ParameterError, ShapeError, rng
from .patchify import PatchGrid

RANDOM, TUBE, CAUSAL, FRAME = "random", "tube", "causal", "frame"
KINDS = (RANDOM, TUBE, CAUSAL, FRAME)

# absorbs representation error, e.g. 10 * (1 - 0.9) == 0.9999999999999998
_FLOOR_SLACK = 1e-9


def kept_count(n: int, ratio: float) -> int:
    return int(math.floor(n * (1.0 - ratio) + _FLOOR_SLACK))


@dataclass(frozen=True)
class MaskSpec:
    kind: str = RANDOM
    ratio: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown mask kind {self.kind!r}; expected one of {KINDS}")
        if not 0.0 <= self.ratio < 1.0:
            raise ParameterError(f"masking ratio must lie in [0, 1), got {self.ratio}")


@dataclass(frozen=True)
class Mask:
    n: int
    kept: tuple[int, ...]
    masked: tuple[int, ...]
    spec: MaskSpec

    @property
    def m(self) -> int:
        return len(self.masked)

    @property
    def k(self) -> int:
        return len(self.kept)

    def to_text(self) -> str:
        s = self.spec
        return f"{s.kind}:{s.ratio!r}:{s.seed}:{self.n}:[{','.join(map(str, self.kept))}]"

    @classmethod
    def from_text(cls, text: str) -> Mask:
        m = re.fullmatch(r"(\w+):([^:]+):(-?\d+):(\d+):\[([\d,]*)\]", text.strip())
        if m is None:
            raise ParameterError(f"malformed mask record {text!r}")
        kind, ratio, seed, n, kept = m.groups()
        kept_idx = tuple(int(i) for i in kept.split(",") if i)
        return from_kept(int(n), kept_idx, MaskSpec(kind, float(ratio), int(seed)))


def from_kept(n: int, kept, spec: MaskSpec) -> Mask:
    kept = tuple(sorted(int(i) for i in kept))
    if not kept:
        raise ParameterError("a mask must keep at least one patch")
    if len(set(kept)) != len(kept) or kept[0] < 0 or kept[-1] >= n:
        raise ParameterError(f"kept indices must be distinct and inside [0, {n})")
    keep = set(kept)
    masked = tuple(i for i in range(n) if i not in keep)
    return Mask(n, kept, masked, spec)


def _too_high(spec: MaskSpec, units: int, what: str) -> ParameterError:
    return ParameterError(
        f"{spec.kind} masking at ratio {spec.ratio} keeps no {what} out of {units}; "
        f"the highest ratio that keeps one is {1 - 1 / units:.6g}")


def generate_mask(grid: tuple[int, int, int], spec: MaskSpec) -> Mask:
    nT, nH, nW = grid
    n = nT * nH * nW
    if n < 1:
        raise ShapeError(f"empty grid {grid}")
    gen = rng(spec.seed, "mask")
    plane = nH * nW

    if spec.kind == RANDOM:
        k = kept_count(n, spec.ratio)
        if k == 0:
            raise _too_high(spec, n, "patch")
        kept = gen.choice(n, size=k, replace=False)
    elif spec.kind == CAUSAL:
        k = kept_count(n, spec.ratio)
        if k == 0:
            raise _too_high(spec, n, "patch")
        kept = np.arange(k)
    elif spec.kind == TUBE:
        ks = kept_count(plane, spec.ratio)
        if ks == 0:
            raise _too_high(spec, plane, "spatial position")
        cols = gen.choice(plane, size=ks, replace=False)
        kept = (np.arange(nT)[:, None] * plane + cols[None, :]).ravel()
    else:
        kt = max(1, kept_count(nT, spec.ratio))
        slots = gen.choice(nT, size=kt, replace=False)
        kept = (slots[:, None] * plane + np.arange(plane)[None, :]).ravel()
    return from_kept(n, kept.tolist(), spec)


def apply_mask(g: PatchGrid, m: Mask) -> tuple[np.ndarray, list[int]]:
    """Rows of ``g`` at the kept indices, plus those indices."""
    if m.n != g.n:
        raise ShapeError(f"mask covers {m.n} patches but the grid has {g.n}")
    positions = list(m.kept)
    return g.patches[positions], positions
