"""Images and videos as grids of spatio-temporal patches.

Every input is a ``T x H x W x 3`` block of pixel values in ``[0, 255]``.
Images are single-frame videos; they are repeated along time to fill a
temporal patch before patchification.

Patch rows are ordered time-slab first, then patch row, then patch column.
Inside a row the pixels are flattened in (time, row, col, channel) order.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ndcore import ShapeError, UsageError, load_omnt, save_omnt

IMAGE = "image"
VIDEO = "video"
MODALITIES = (IMAGE, VIDEO)


@dataclass(frozen=True)
class VisualTensor:
    pixels: np.ndarray  # T x H x W x 3
    modality: str

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise UsageError(f"unknown modality {self.modality!r}")
        if self.pixels.ndim != 4 or self.pixels.shape[-1] != 3:
            raise ShapeError(f"pixels must be T x H x W x 3, got {self.pixels.shape}")

    @property
    def frames(self) -> int:
        return self.pixels.shape[0]

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]

    @classmethod
    def image(cls, pixels: np.ndarray) -> VisualTensor:
        """Wrap an ``H x W x 3`` or ``1 x H x W x 3`` array as an image."""
        pixels = np.asarray(pixels)
        if pixels.ndim == 3:
            pixels = pixels[None]
        if pixels.shape[0] != 1:
            raise ShapeError(f"an image has exactly one frame, got {pixels.shape[0]}")
        return cls(pixels, IMAGE)

    @classmethod
    def video(cls, pixels: np.ndarray) -> VisualTensor:
        return cls(np.asarray(pixels), VIDEO)


@dataclass(frozen=True)
class PatchConfig:
    t: int = 2
    h: int = 16
    w: int = 16

    def __post_init__(self):
        if min(self.t, self.h, self.w) < 1:
            raise ShapeError(f"patch extents must be >= 1, got {(self.t, self.h, self.w)}")

    @property
    def size(self) -> int:
        """Scalars per patch row (t*h*w*3)."""
        return self.t * self.h * self.w * 3


@dataclass(frozen=True)
class PatchGrid:
    patches: np.ndarray  # N x (t*h*w*3)
    dims: tuple[int, int, int]  # (nT, nH, nW)
    cfg: PatchConfig
    modality: str

    @property
    def n(self) -> int:
        return self.patches.shape[0]


def temporal_replicate(x: VisualTensor, target_t: int) -> VisualTensor:
    if x.modality != IMAGE:
        raise UsageError("temporal replication applies to images only")
    if x.frames != 1:
        raise ShapeError(f"image already has {x.frames} frames")
    if target_t == 1:
        return x
    return VisualTensor(np.repeat(x.pixels, target_t, axis=0), IMAGE)


def prepare(x: VisualTensor, cfg: PatchConfig) -> VisualTensor:
    """Replicate single-frame images up to the temporal patch extent."""
    if x.modality == IMAGE and x.frames == 1:
        return temporal_replicate(x, cfg.t)
    return x


def grid_dims(shape: tuple[int, int, int], cfg: PatchConfig) -> tuple[int, int, int]:
    out = []
    for axis, size, step in zip(("T", "H", "W"), shape, (cfg.t, cfg.h, cfg.w)):
        if size % step:
            raise ShapeError(f"axis {axis}: extent {size} is not divisible by patch extent {step}")
        out.append(size // step)
    return tuple(out)


def patchify(x: VisualTensor, cfg: PatchConfig) -> PatchGrid:
    T, H, W, C = x.pixels.shape
    nT, nH, nW = grid_dims((T, H, W), cfg)
    blocks = x.pixels.reshape(nT, cfg.t, nH, cfg.h, nW, cfg.w, C)
    blocks = blocks.transpose(0, 2, 4, 1, 3, 5, 6)
    patches = np.ascontiguousarray(blocks.reshape(nT * nH * nW, cfg.size))
    return PatchGrid(patches, (nT, nH, nW), cfg, x.modality)


def unpatchify(g: PatchGrid) -> VisualTensor:
    return VisualTensor(unpatchify_array(g.patches, g.dims, g.cfg), g.modality)


def unpatchify_array(patches: np.ndarray, dims: tuple[int, int, int], cfg: PatchConfig) -> np.ndarray:
    nT, nH, nW = dims
    if patches.shape != (nT * nH * nW, cfg.size):
        raise ShapeError(f"patches {patches.shape} do not fit grid {dims} with patch size {cfg.size}")
    blocks = patches.reshape(nT, nH, nW, cfg.t, cfg.h, cfg.w, 3)
    blocks = blocks.transpose(0, 3, 1, 4, 2, 5, 6)
    return np.ascontiguousarray(blocks.reshape(nT * cfg.t, nH * cfg.h, nW * cfg.w, 3))


def patch_count(shape: tuple[int, int, int], cfg: PatchConfig) -> int:
    nT, nH, nW = grid_dims(shape, cfg)
    return nT * nH * nW


# ---------------------------------------------------------------------------
# File IO
# ---------------------------------------------------------------------------


def save_visual(path: str | Path, x: VisualTensor) -> None:
    """OMNT file; integral pixel data is stored as u8, anything else as f64."""
    px = x.pixels
    if np.issubdtype(px.dtype, np.floating) and np.array_equal(px, np.round(px)) \
            and px.min(initial=0) >= 0 and px.max(initial=0) <= 255:
        px = px.astype(np.uint8)
    save_omnt(path, px)


def load_visual(path: str | Path, modality: str | None = None) -> VisualTensor:
    """Read an OMNT pixel block; single-frame blocks default to images."""
    px = load_omnt(path).astype(np.float64)
    if modality is None:
        modality = IMAGE if px.shape[0] == 1 else VIDEO
    return VisualTensor(px, modality)


def write_ppm(path: str | Path, frame: np.ndarray) -> None:
    """Binary P6, maxval 255. ``frame`` is ``H x W x 3``; values are rounded and clipped."""
    if frame.ndim != 3 or frame.shape[-1] != 3:
        raise ShapeError(f"PPM frame must be H x W x 3, got {frame.shape}")
    data = np.clip(np.rint(frame), 0, 255).astype(np.uint8)
    h, w, _ = data.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + data.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise UsageError("only binary P6 files with maxval 255 are supported")
    w, h = int(tokens[1]), int(tokens[2])
    body = raw[pos + 1:pos + 1 + w * h * 3]
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy()
