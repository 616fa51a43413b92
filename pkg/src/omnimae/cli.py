"""Command line entry point: ``omnimae <subcommand> ...``.

Exit codes: 0 success, 1 a check failed, 2 bad usage or input.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import datapipe, flops, model, trainer
from .datapipe import DatasetHandle, IoModel
from .masking import KINDS, MaskSpec
from .ndcore import ParameterError, ShapeError, UsageError
from .objective import denormalize, normalize_targets
from .patchify import IMAGE, VIDEO, VisualTensor, load_visual, save_visual, unpatchify_array, write_ppm

log = logging.getLogger("omnimae")


class ConfigError(UsageError):
    def __init__(self, path, lineno, msg):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.lineno = lineno


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    preset: str = "toy"
    decoder_mode: str = "common"
    seed: int = 0
    out_dir: str = "run"
    data_manifest: str = ""
    image_count: int = 8
    video_count: int = 8
    image_mask: MaskSpec = field(default_factory=lambda: MaskSpec("random", 0.90))
    video_mask: MaskSpec = field(default_factory=lambda: MaskSpec("random", 0.95))
    lr: float = 3e-4
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    warmup_epochs: float = 40
    epochs: int = 800
    batch_size: int = 2048
    image_replication: int = 1
    video_replication: int = 4
    image_ratio: int = 1
    video_ratio: int = 1
    checkpoint_every: int = 0
    precision: str = "double"
    workers: int = 2

    def model_config(self) -> model.OmniMaeConfig:
        return model.preset(self.preset, decoder_mode=self.decoder_mode)

    def optim(self) -> trainer.OptimSpec:
        return trainer.OptimSpec(self.lr, self.weight_decay, self.beta1, self.beta2,
                                 warmup_epochs=self.warmup_epochs, epochs=self.epochs,
                                 batch_size=self.batch_size)

    def masks(self) -> dict[str, MaskSpec]:
        return {IMAGE: self.image_mask, VIDEO: self.video_mask}

    def datasets(self, cfg: model.OmniMaeConfig) -> list[DatasetHandle]:
        if self.data_manifest:
            entries = datapipe.read_manifest(self.data_manifest)
            out = []
            for modality in (IMAGE, VIDEO):
                files = tuple(p for _, p, m, _ in entries if m == modality)
                if files:
                    out.append(DatasetHandle(modality, modality, len(files), self.seed, files=files))
            return out
        out = []
        if self.image_count:
            out.append(DatasetHandle(IMAGE, IMAGE, self.image_count, self.seed,
                                     (1, cfg.image_size, cfg.image_size)))
        if self.video_count:
            out.append(DatasetHandle(VIDEO, VIDEO, self.video_count, self.seed,
                                     cfg.input_shape(VIDEO)))
        return out


def parse_mask(text: str) -> MaskSpec:
    kind, _, ratio = text.partition(":")
    if kind not in KINDS or not ratio:
        raise ValueError(f"expected kind:ratio with kind in {KINDS}, got {text!r}")
    return MaskSpec(kind, float(ratio))


def parse_run_config(text: str, path: str = "<config>") -> RunConfig:
    """``key=value`` per line; ``#`` starts a comment."""
    cfg = RunConfig()
    types = {f: type(getattr(cfg, f)) for f in cfg.__dataclass_fields__}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(path, lineno, f"expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(path, lineno, f"unknown key {key!r}")
        try:
            if types[key] is MaskSpec:
                parsed = parse_mask(value)
            elif types[key] is int:
                parsed = int(value)
            else:
                parsed = types[key](value)
        except (ValueError, ParameterError) as exc:
            raise ConfigError(path, lineno, f"bad value for {key}: {exc}") from None
        setattr(cfg, key, parsed)
    if cfg.precision not in ("double", "single"):
        raise ConfigError(path, 0, "precision must be double or single")
    return cfg


# ---------------------------------------------------------------------------
# Reconstruction compositing
# ---------------------------------------------------------------------------


def reconstruct(cfg: model.OmniMaeConfig, params, x: VisualTensor, spec: MaskSpec) -> tuple[np.ndarray, object]:
    """Kept patches copied from the input, masked patches from de-normalized predictions.

    Returns ``(pixels, mask)``; ``pixels`` has the input's own frame count.
    """
    expected = cfg.input_shape(x.modality)[1:]
    if (x.height, x.width) != expected:
        raise ShapeError(f"input is {x.height}x{x.width}, checkpoint expects {expected[0]}x{expected[1]}")
    pred, mask, grid = model.forward(x, spec, cfg, params)
    pixels = denormalize(pred, normalize_targets(grid))
    masked = list(mask.masked)
    rows = grid.patches.astype(np.float64, copy=True)
    rows[masked] = np.rint(pixels[masked])
    out = unpatchify_array(rows, grid.dims, cfg.patch)
    return out[: x.frames], mask


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _dims(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.lower().split("x"))


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    img = DatasetHandle(IMAGE, IMAGE, max(args.images, 1), args.seed, (1, args.size, args.size))
    vid = DatasetHandle(VIDEO, VIDEO, max(args.videos, 1), args.seed, (args.frames, args.size, args.size))
    entries = []
    for handle, count in ((img, args.images), (vid, args.videos)):
        for i in range(count):
            x = datapipe.generate_synthetic(handle, i)
            sid = len(entries)
            name = f"{handle.modality}_{i:05d}.omnt"
            save_visual(out / name, x)
            entries.append((sid, name, handle.modality, x.pixels.shape))
    datapipe.write_manifest(out / "manifest.txt", entries)
    print(f"wrote {len(entries)} samples to {out}")
    return 0


def cmd_pretrain(args) -> int:
    path = Path(args.config)
    rc = parse_run_config(path.read_text(), str(path))
    cfg = rc.model_config()
    dtype = np.float64 if rc.precision == "double" else np.float32
    out = Path(rc.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    state = trainer.TrainState.create(cfg, rc.seed, dtype)
    result = trainer.fit(
        state, rc.datasets(cfg), rc.optim(), rc.epochs, rc.masks(),
        replication={IMAGE: rc.image_replication, VIDEO: rc.video_replication},
        ratios={IMAGE: rc.image_ratio, VIDEO: rc.video_ratio},
        log_path=out / "log.csv", checkpoint_dir=out / "checkpoints",
        checkpoint_every=rc.checkpoint_every, workers=rc.workers)
    first, last = result.rows[0], result.rows[-1]
    print(f"{len(result.rows)} steps, loss {float(first['loss']):.4f} -> {float(last['loss']):.4f}")
    print(f"checkpoint: {out / 'checkpoints' / 'final'}")
    return 0


def cmd_reconstruct(args) -> int:
    cfg, params, _ = model.load_checkpoint(args.checkpoint)
    x = load_visual(args.input)
    out = Path(args.out)
    ratios = [float(r) for r in args.ratio.split(",")]
    for r in ratios:
        target = out if len(ratios) == 1 else out / f"mask_{round(r * 100):02d}"
        target.mkdir(parents=True, exist_ok=True)
        pixels, mask = reconstruct(cfg, params, x, MaskSpec(args.kind, r, args.seed))
        for k, frame in enumerate(pixels):
            write_ppm(target / f"frame_{k:03d}.ppm", frame)
        save_visual(target / "composite.omnt", VisualTensor(pixels, x.modality))
        (target / "mask.txt").write_text(mask.to_text() + "\n")
        print(f"ratio {r}: kept {mask.k}/{mask.n} patches -> {target}")
    return 0


def cmd_flops(args) -> int:
    cfgs = [model.preset(p) for p in args.preset.split(",")]
    ratios = {}
    if args.ratio is not None:
        for m in ([args.modality] if args.modality else [IMAGE, VIDEO]):
            ratios[m] = args.ratio
    baselines = {}
    if args.baseline is not None:
        for m in ([args.modality] if args.modality else [IMAGE, VIDEO]):
            baselines[m] = args.baseline
    rows = flops.ratio_table(cfgs, ratios, baselines)
    if args.modality:
        rows = [r for r in rows if r["modality"] == args.modality]
    print(flops.table_text(rows))
    if args.csv:
        Path(args.csv).write_text(flops.table_csv(rows))
    return 0


def cmd_simulate_io(args) -> int:
    factors = [int(r) for r in args.replication.split(",")]
    io = IoModel(args.read_ms, args.jitter_ms, args.decode_ms, args.compute_ms, args.workers, args.in_flight)
    ds = DatasetHandle(args.modality, args.modality, args.samples, args.seed)
    rows = datapipe.replication_sweep([ds], args.batch_size, factors, io, seed=args.seed)
    text = datapipe.sweep_csv(rows)
    print(text, end="")
    if args.csv:
        Path(args.csv).write_text(text)
    ordered = sorted(rows, key=lambda r: r["R"])
    if any(b["epoch_ms"] > a["epoch_ms"] for a, b in zip(ordered, ordered[1:])):
        print("FAIL: epoch time increased with replication", file=sys.stderr)
        return 1
    return 0


def cmd_gradcheck(args) -> int:
    cfg = model.preset(args.preset)
    gen = np.random.default_rng(args.seed)
    failed = False
    for modality in ([IMAGE, VIDEO] if args.modality == "both" else [args.modality]):
        T, H, W = cfg.input_shape(modality)
        if modality == IMAGE:
            x = VisualTensor.image(gen.integers(0, 256, (H, W, 3)).astype(np.float64))
        else:
            x = VisualTensor.video(gen.integers(0, 256, (T, H, W, 3)).astype(np.float64))
        err = trainer.grad_check(cfg, x, MaskSpec("random", args.ratio, args.seed), seed=args.seed,
                                 probes=args.probes)
        ok = err < args.tol
        failed |= not ok
        print(f"{modality}: max relative error {err:.3e} ({'ok' if ok else 'FAIL'}, tol {args.tol:g})")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="omnimae", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write synthetic samples and a manifest")
    p.add_argument("--images", type=int, default=8)
    p.add_argument("--videos", type=int, default=8)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--frames", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="train from a key=value run config")
    p.add_argument("config")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("reconstruct", help="composite predictions with the visible patches")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--ratio", default="0.75,0.90,0.95", help="one ratio or a comma list")
    p.add_argument("--kind", default="random", choices=KINDS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("flops", help="analytical MAC savings table")
    p.add_argument("--preset", default="vit-b,vit-l,vit-h")
    p.add_argument("--modality", choices=[IMAGE, VIDEO])
    p.add_argument("--ratio", type=float)
    p.add_argument("--baseline", type=float)
    p.add_argument("--csv")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("simulate-io", help="simulated epoch time vs replication factor")
    p.add_argument("--replication", default="1,2,4,8")
    p.add_argument("--modality", default=VIDEO, choices=[IMAGE, VIDEO])
    p.add_argument("--samples", type=int, default=1024)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--read-ms", type=float, default=40.0)
    p.add_argument("--jitter-ms", type=float, default=0.0)
    p.add_argument("--decode-ms", type=float, default=60.0)
    p.add_argument("--compute-ms", type=float, default=50.0)
    p.add_argument("--workers", type=int, default=8)
    p.add_argument("--in-flight", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv")
    p.set_defaults(func=cmd_simulate_io)

    p = sub.add_parser("gradcheck", help="tape gradients vs central differences")
    p.add_argument("--preset", default="toy")
    p.add_argument("--modality", default="both", choices=[IMAGE, VIDEO, "both"])
    p.add_argument("--ratio", type=float, default=0.5)
    p.add_argument("--probes", type=int, default=64)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ParameterError, ShapeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
