"""Omnivorous ViT encoder and lightweight pixel decoder.

The encoder sees only the kept patches (plus their positional rows). The
decoder projects them to its own width, fills every masked slot with one
shared learnable mask token, adds positional rows for all N slots and
predicts the raw patch pixels of every slot.

Parameters are a flat ``dict`` of named numpy arrays. All compute goes
through a :class:`~omnimae.ndcore.Tape`, so the same code path serves plain
inference, training and MAC metering.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import ndcore
from .masking import Mask, MaskSpec, apply_mask, from_kept, generate_mask
from .ndcore import ParameterError, ShapeError, Tape, UsageError, Var
from .patchify import IMAGE, VIDEO, PatchConfig, PatchGrid, VisualTensor, patchify, prepare

COMMON, SEPARATE = "common", "separate"


@dataclass(frozen=True)
class OmniMaeConfig:
    preset: str
    embed_dim: int
    depth: int
    heads: int
    decoder_dim: int
    decoder_depth: int
    decoder_heads: int
    patch: PatchConfig = field(default_factory=PatchConfig)
    decoder_mode: str = COMMON
    image_size: int = 224
    video_frames: int = 16
    mlp_ratio: int = 4
    ln_eps: float = 1e-6

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ParameterError(f"encoder dim {self.embed_dim} not divisible by {self.heads} heads")
        if self.decoder_dim % self.decoder_heads:
            raise ParameterError(
                f"decoder dim {self.decoder_dim} not divisible by {self.decoder_heads} heads")
        if self.decoder_mode not in (COMMON, SEPARATE):
            raise ParameterError(f"decoder_mode must be common or separate, got {self.decoder_mode!r}")

    def input_shape(self, modality: str) -> tuple[int, int, int]:
        """(T, H, W) of a model input after temporal replication."""
        frames = self.patch.t if modality == IMAGE else self.video_frames
        return frames, self.image_size, self.image_size

    def grid(self, modality: str) -> tuple[int, int, int]:
        T, H, W = self.input_shape(modality)
        return T // self.patch.t, H // self.patch.h, W // self.patch.w


PRESETS = {
    "vit-b": OmniMaeConfig("vit-b", 768, 12, 12, 384, 4, 12, PatchConfig(2, 16, 16)),
    "vit-l": OmniMaeConfig("vit-l", 1024, 24, 16, 512, 4, 16, PatchConfig(2, 16, 16)),
    "vit-h": OmniMaeConfig("vit-h", 1280, 32, 16, 512, 8, 16, PatchConfig(2, 14, 14)),
    "toy": OmniMaeConfig("toy", 16, 2, 2, 64, 2, 4, PatchConfig(2, 16, 16),
                         image_size=32, video_frames=4),
}


def preset(name: str, **overrides) -> OmniMaeConfig:
    key = name.lower().replace("_", "-")
    if key not in PRESETS:
        raise ParameterError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return replace(PRESETS[key], **overrides) if overrides else PRESETS[key]


# ---------------------------------------------------------------------------
# Positional encoding
# ---------------------------------------------------------------------------


def pos_split(dim: int) -> tuple[int, int, int]:
    """Channel widths given to (time, row, col); leftover channels stay zero."""
    if dim < 6 or dim % 2:
        raise ParameterError(f"positional encoding needs an even dim >= 6, got {dim}")
    d_t = max(2, 2 * (dim // 8))
    d_s = 2 * ((dim - d_t) // 4)
    return d_t, d_s, d_s


def _sincos(pos: np.ndarray, width: int) -> np.ndarray:
    freqs = 1.0 / 10000.0 ** (np.arange(width // 2) * 2.0 / width)
    angles = pos[:, None] * freqs[None, :]
    out = np.empty((pos.size, width))
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles)
    return out


@lru_cache(maxsize=64)
def _pos_cached(grid: tuple[int, int, int], dim: int) -> np.ndarray:
    nT, nH, nW = grid
    d_t, d_s, _ = pos_split(dim)
    tau, rho, kappa = np.meshgrid(np.arange(nT), np.arange(nH), np.arange(nW), indexing="ij")
    out = np.zeros((nT * nH * nW, dim))
    out[:, :d_t] = _sincos(tau.ravel().astype(float), d_t)
    out[:, d_t:d_t + d_s] = _sincos(rho.ravel().astype(float), d_s)
    out[:, d_t + d_s:d_t + 2 * d_s] = _sincos(kappa.ravel().astype(float), d_s)
    out.flags.writeable = False
    return out


def positional_encoding(grid: tuple[int, int, int], dim: int) -> np.ndarray:
    """Fixed separable sin/cos rows, one per patch in raster order."""
    return _pos_cached(tuple(int(g) for g in grid), int(dim)).copy()


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


def _block_shapes(prefix: str, m: int, hidden: int) -> dict[str, tuple[int, ...]]:
    return {
        f"{prefix}.norm1.gain": (m,), f"{prefix}.norm1.bias": (m,),
        f"{prefix}.attn.qkv.weight": (m, 3 * m), f"{prefix}.attn.qkv.bias": (3 * m,),
        f"{prefix}.attn.proj.weight": (m, m), f"{prefix}.attn.proj.bias": (m,),
        f"{prefix}.norm2.gain": (m,), f"{prefix}.norm2.bias": (m,),
        f"{prefix}.mlp.fc1.weight": (m, hidden), f"{prefix}.mlp.fc1.bias": (hidden,),
        f"{prefix}.mlp.fc2.weight": (hidden, m), f"{prefix}.mlp.fc2.bias": (m,),
    }


def decoder_prefix(cfg: OmniMaeConfig, modality: str) -> str:
    return "decoder" if cfg.decoder_mode == COMMON else f"decoder.{modality}"


def param_shapes(cfg: OmniMaeConfig) -> dict[str, tuple[int, ...]]:
    D, d, p = cfg.embed_dim, cfg.decoder_dim, cfg.patch.size
    shapes = {"patch_embed.weight": (p, D), "patch_embed.bias": (D,)}
    for i in range(cfg.depth):
        shapes.update(_block_shapes(f"encoder.blocks.{i}", D, cfg.mlp_ratio * D))
    shapes.update({"encoder.norm.gain": (D,), "encoder.norm.bias": (D,)})
    prefixes = ["decoder"] if cfg.decoder_mode == COMMON else ["decoder.image", "decoder.video"]
    for pre in prefixes:
        shapes.update({f"{pre}.embed.weight": (D, d), f"{pre}.embed.bias": (d,),
                       f"{pre}.mask_token": (d,)})
        for i in range(cfg.decoder_depth):
            shapes.update(_block_shapes(f"{pre}.blocks.{i}", d, cfg.mlp_ratio * d))
        shapes.update({f"{pre}.norm.gain": (d,), f"{pre}.norm.bias": (d,),
                       f"{pre}.pred.weight": (d, p), f"{pre}.pred.bias": (p,)})
    return shapes


def param_count(cfg: OmniMaeConfig) -> int:
    return sum(math.prod(s) for s in param_shapes(cfg).values())


def init_params(cfg: OmniMaeConfig, seed: int = 0, dtype=ndcore.DEFAULT_DTYPE) -> dict[str, np.ndarray]:
    """Truncated-normal(0.02) weights, zero biases and mask token, unit norm gains."""
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".weight"):
            params[name] = ndcore.truncated_normal(ndcore.rng(seed, "init:" + name), shape, dtype=dtype)
        elif name.endswith(".gain"):
            params[name] = np.ones(shape, dtype=dtype)
        else:
            params[name] = np.zeros(shape, dtype=dtype)
    return params


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------


class _Params:
    """Registers parameters on the tape the first time they are read."""

    def __init__(self, tape: Tape, params: dict[str, np.ndarray]):
        self.tape, self.params, self.vars = tape, params, {}

    def __getitem__(self, name: str) -> Var:
        if name not in self.vars:
            if name not in self.params:
                raise KeyError(f"missing parameter {name!r}")
            self.vars[name] = self.tape.param(self.params[name], name)
        return self.vars[name]


def _lookup(tape: Tape, params) -> _Params:
    if isinstance(params, _Params):
        return params
    reg = getattr(tape, "_omnimae_params", None)
    if reg is None or reg.params is not params:
        reg = _Params(tape, params)
        tape._omnimae_params = reg
    return reg


def _linear(tape, x, P, prefix):
    return tape.bias_add(tape.matmul(x, P[prefix + ".weight"]), P[prefix + ".bias"])


def _block(tape: Tape, x: Var, P: _Params, prefix: str, heads: int, eps: float) -> Var:
    m = x.shape[1]
    dh = m // heads
    h = tape.layernorm(x, P[prefix + ".norm1.gain"], P[prefix + ".norm1.bias"], eps)
    qkv = _linear(tape, h, P, prefix + ".attn.qkv")
    outs = []
    for i in range(heads):
        q = tape.slice_cols(qkv, i * dh, (i + 1) * dh)
        k = tape.slice_cols(qkv, m + i * dh, m + (i + 1) * dh)
        v = tape.slice_cols(qkv, 2 * m + i * dh, 2 * m + (i + 1) * dh)
        scores = tape.scale(tape.matmul(q, tape.transpose(k)), 1.0 / math.sqrt(dh))
        outs.append(tape.matmul(tape.softmax(scores), v))
    attn = outs[0] if heads == 1 else tape.concat_cols(outs)
    x = tape.add(x, _linear(tape, attn, P, prefix + ".attn.proj"))
    h = tape.layernorm(x, P[prefix + ".norm2.gain"], P[prefix + ".norm2.bias"], eps)
    h = _linear(tape, tape.gelu(_linear(tape, h, P, prefix + ".mlp.fc1")), P, prefix + ".mlp.fc2")
    return tape.add(x, h)


def input_scale(patches: np.ndarray) -> np.ndarray:
    """Map raw [0, 255] pixels to [-1, 1] before the patch embedding."""
    return (patches - 127.5) / 127.5


def encode(kept: np.ndarray, positions, grid: tuple[int, int, int], cfg: OmniMaeConfig,
           params: dict[str, np.ndarray], tape: Tape | None = None):
    """Encoder over kept patches. Returns an array, or a :class:`Var` when ``tape`` is given."""
    own = tape is None
    tape = tape or Tape()
    n = math.prod(grid)
    positions = np.asarray(positions, dtype=np.intp)
    if kept.ndim != 2 or kept.shape[0] < 1 or kept.shape[0] != positions.size:
        raise ShapeError(f"need K >= 1 patch rows matching positions, got {kept.shape} / {positions.size}")
    if positions.min() < 0 or positions.max() >= n:
        raise IndexError(f"patch position outside [0, {n})")
    P = _lookup(tape, params)
    x = tape.constant(input_scale(kept).astype(params["patch_embed.weight"].dtype, copy=False))
    x = _linear(tape, x, P, "patch_embed")
    pos = positional_encoding(grid, cfg.embed_dim)[positions].astype(x.value.dtype, copy=False)
    x = tape.add(x, tape.constant(pos))
    for i in range(cfg.depth):
        x = _block(tape, x, P, f"encoder.blocks.{i}", cfg.heads, cfg.ln_eps)
    x = tape.layernorm(x, P["encoder.norm.gain"], P["encoder.norm.bias"], cfg.ln_eps)
    return x.value if own else x


def decode(encoded, mask: Mask, grid: tuple[int, int, int], cfg: OmniMaeConfig,
           params: dict[str, np.ndarray], tape: Tape | None = None, modality: str = VIDEO):
    """N x p pixel predictions; row i predicts patch i."""
    own = tape is None
    tape = tape or Tape()
    n = math.prod(grid)
    if mask.n != n:
        raise ShapeError(f"mask covers {mask.n} patches, grid {grid} has {n}")
    if not isinstance(encoded, Var):
        encoded = tape.constant(np.asarray(encoded))
    if encoded.shape != (mask.k, cfg.embed_dim):
        raise ShapeError(f"encoded rows {encoded.shape} do not match {mask.k} kept x {cfg.embed_dim}")
    P = _lookup(tape, params)
    pre = decoder_prefix(cfg, modality)
    x = _linear(tape, encoded, P, pre + ".embed")
    x = tape.scatter_rows(x, mask.kept, n, P[pre + ".mask_token"])
    pos = positional_encoding(grid, cfg.decoder_dim).astype(x.value.dtype, copy=False)
    x = tape.add(x, tape.constant(pos))
    for i in range(cfg.decoder_depth):
        x = _block(tape, x, P, f"{pre}.blocks.{i}", cfg.decoder_heads, cfg.ln_eps)
    x = tape.layernorm(x, P[pre + ".norm.gain"], P[pre + ".norm.bias"], cfg.ln_eps)
    x = _linear(tape, x, P, pre + ".pred")
    return x.value if own else x


def forward(x: VisualTensor, spec: MaskSpec | Mask, cfg: OmniMaeConfig,
            params: dict[str, np.ndarray], tape: Tape | None = None):
    """patchify -> mask -> encode kept -> decode all.

    Returns ``(predictions, mask, grid)``; predictions are a :class:`Var`
    when ``tape`` is given. A ready-made :class:`Mask` may be passed in
    place of a spec.
    """
    own = tape is None
    tape = tape or Tape()
    grid = patchify(prepare(x, cfg.patch), cfg.patch)
    if isinstance(spec, Mask):
        mask = spec
    else:
        mask = generate_mask(grid.dims, spec)
    kept, positions = apply_mask(grid, mask)
    enc = encode(kept, positions, grid.dims, cfg, params, tape)
    pred = decode(enc, mask, grid.dims, cfg, params, tape, modality=x.modality)
    return (pred.value if own else pred), mask, grid


def full_mask(n: int) -> Mask:
    return from_kept(n, range(n), MaskSpec(ratio=0.0))


def touched_params(x: VisualTensor, spec: MaskSpec, cfg: OmniMaeConfig,
                   params: dict[str, np.ndarray]) -> set[str]:
    """Names of the parameters read by one forward pass."""
    tape = Tape()
    forward(x, spec, cfg, params, tape)
    return {n.name for n in tape.nodes if n.op == "param"}


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

MANIFEST = "manifest.txt"


def config_to_dict(cfg: OmniMaeConfig) -> dict[str, str]:
    return {
        "preset": cfg.preset, "embed_dim": str(cfg.embed_dim), "depth": str(cfg.depth),
        "heads": str(cfg.heads), "decoder_dim": str(cfg.decoder_dim),
        "decoder_depth": str(cfg.decoder_depth), "decoder_heads": str(cfg.decoder_heads),
        "patch": f"{cfg.patch.t}x{cfg.patch.h}x{cfg.patch.w}", "decoder_mode": cfg.decoder_mode,
        "image_size": str(cfg.image_size), "video_frames": str(cfg.video_frames),
        "mlp_ratio": str(cfg.mlp_ratio), "ln_eps": repr(cfg.ln_eps),
    }


def config_from_dict(d: dict[str, str]) -> OmniMaeConfig:
    t, h, w = (int(v) for v in d["patch"].split("x"))
    return OmniMaeConfig(
        preset=d["preset"], embed_dim=int(d["embed_dim"]), depth=int(d["depth"]),
        heads=int(d["heads"]), decoder_dim=int(d["decoder_dim"]),
        decoder_depth=int(d["decoder_depth"]), decoder_heads=int(d["decoder_heads"]),
        patch=PatchConfig(t, h, w), decoder_mode=d.get("decoder_mode", COMMON),
        image_size=int(d["image_size"]), video_frames=int(d["video_frames"]),
        mlp_ratio=int(d.get("mlp_ratio", 4)), ln_eps=float(d.get("ln_eps", 1e-6)))


def save_checkpoint(directory: str | Path, cfg: OmniMaeConfig, params: dict[str, np.ndarray],
                    **meta) -> Path:
    """Manifest of ``key=value`` lines plus one OMNT file per parameter."""
    directory = Path(directory)
    (directory / "params").mkdir(parents=True, exist_ok=True)
    lines = [f"{k}={v}" for k, v in config_to_dict(cfg).items()]
    lines += [f"{k}={v}" for k, v in meta.items()]
    for name, value in params.items():
        ndcore.save_omnt(directory / "params" / f"{name}.omnt", value)
    lines.append("params=" + ",".join(params))
    (directory / MANIFEST).write_text("\n".join(lines) + "\n")
    return directory


def read_manifest(path: str | Path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_checkpoint(directory: str | Path):
    """Returns ``(cfg, params, manifest)``."""
    directory = Path(directory)
    manifest = read_manifest(directory / MANIFEST)
    cfg = config_from_dict(manifest)
    names = [n for n in manifest.get("params", "").split(",") if n]
    params = {n: ndcore.load_omnt(directory / "params" / f"{n}.omnt") for n in names}
    expected = param_shapes(cfg)
    if set(params) != set(expected):
        raise ShapeError("checkpoint parameter names do not match its config")
    for n, shape in expected.items():
        if params[n].shape != shape:
            raise ShapeError(f"parameter {n}: stored {params[n].shape}, config wants {shape}")
    return cfg, params, manifest
