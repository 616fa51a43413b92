"""Omnivorous batch planning, sample replication and an I/O simulator.

A plan is a shuffled list of single-modality mini-batches. With replication
factor ``R`` a batch of ``B`` slots is filled by ``B/R`` loaded samples, each
repeated ``R`` times; every slot carries its own mask seed so replicas are
masked differently. The number of steps per epoch does not depend on ``R``,
only the number of loads does.
"""

from __future__ import annotations

import csv
import heapq
import io
from collections.abc import Iterator, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ndcore import ParameterError, UsageError, derive_seed, rng
from .patchify import IMAGE, VIDEO, VisualTensor, load_visual


@dataclass(frozen=True)
class DatasetHandle:
    name: str
    modality: str
    count: int
    seed: int = 0
    dims: tuple[int, int, int] = (1, 32, 32)  # T, H, W
    files: tuple[str, ...] = ()

    def __post_init__(self):
        if self.count < 1:
            raise ParameterError(f"dataset {self.name!r} needs at least one sample")
        if self.modality not in (IMAGE, VIDEO):
            raise ParameterError(f"unknown modality {self.modality!r}")
        if self.files and len(self.files) != self.count:
            raise ParameterError(f"dataset {self.name!r}: {len(self.files)} files for {self.count} samples")


@dataclass(frozen=True)
class Batch:
    modality: str
    dataset: str
    draws: tuple[int, ...]  # the B/R samples actually loaded
    replication: int
    mask_seeds: tuple[int, ...]  # one per slot

    @property
    def ids(self) -> tuple[int, ...]:
        return tuple(i for i in self.draws for _ in range(self.replication))

    @property
    def size(self) -> int:
        return len(self.draws) * self.replication


@dataclass
class BatchPlan:
    batches: list[Batch]
    batch_size: int
    replication: dict[str, int]
    ratios: dict[str, int]
    epoch: int = 0

    @property
    def steps(self) -> int:
        return len(self.batches)

    @property
    def distinct_loads(self) -> int:
        return sum(len(b.draws) for b in self.batches)

    def steps_by_modality(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for b in self.batches:
            out[b.modality] = out.get(b.modality, 0) + 1
        return out

    def to_text(self) -> str:
        lines = [f"# batch_size={self.batch_size} epoch={self.epoch}",
                 "# replication=" + ",".join(f"{k}:{v}" for k, v in sorted(self.replication.items())),
                 "# ratios=" + ",".join(f"{k}:{v}" for k, v in sorted(self.ratios.items()))]
        for b in self.batches:
            lines.append(f"{b.modality} {b.dataset} {b.replication} "
                         f"{','.join(map(str, b.draws))} {','.join(map(str, b.mask_seeds))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> BatchPlan:
        header: dict[str, str] = {}
        batches = []
        for line in text.splitlines():
            if line.startswith("#"):
                for part in line[1:].split():
                    k, _, v = part.partition("=")
                    header[k] = v
                continue
            if not line.strip():
                continue
            modality, name, rep, draws, seeds = line.split()
            batches.append(Batch(modality, name, tuple(map(int, draws.split(","))), int(rep),
                                 tuple(map(int, seeds.split(",")))))

        def pairs(s):
            return {k: int(v) for k, v in (p.split(":") for p in s.split(",") if p)}

        return cls(batches, int(header["batch_size"]), pairs(header.get("replication", "")),
                   pairs(header.get("ratios", "")), int(header.get("epoch", 0)))


def _factor(table: Mapping[str, int] | None, ds: DatasetHandle, default: int = 1) -> int:
    if not table:
        return default
    return int(table.get(ds.name, table.get(ds.modality, default)))


def build_epoch_plan(datasets: Sequence[DatasetHandle], batch_size: int,
                     replication: Mapping[str, int] | None = None,
                     ratios: Mapping[str, int] | None = None,
                     seed: int = 0, epoch: int = 0) -> BatchPlan:
    """One epoch of single-modality mini-batches.

    ``replication`` and ``ratios`` are keyed by dataset name or modality.
    Each dataset contributes ``count * ratio`` slots (incomplete trailing
    batches are dropped); with replication ``R`` only ``slots / R`` of them
    are distinct loads, drawn from ``ratio`` fresh shuffles of the ids.
    """
    batches: list[Batch] = []
    reps, rats = {}, {}
    for ds in datasets:
        r = _factor(replication, ds)
        ratio = _factor(ratios, ds)
        if r < 1 or batch_size % r:
            raise ParameterError(f"replication {r} must divide batch size {batch_size} ({ds.name})")
        if ratio < 1:
            raise ParameterError(f"dataset ratio must be a positive integer, got {ratio} ({ds.name})")
        reps[ds.name], rats[ds.name] = r, ratio
        gen = rng(seed, f"plan:{ds.name}", epoch)
        order = np.concatenate([gen.permutation(ds.count) for _ in range(ratio)])
        steps = ds.count * ratio // batch_size
        per_batch = batch_size // r
        for b in range(steps):
            draws = tuple(int(i) for i in order[b * per_batch:(b + 1) * per_batch])
            seeds = tuple(derive_seed(seed, "mask", epoch, ds.name, b, s) for s in range(batch_size))
            batches.append(Batch(ds.modality, ds.name, draws, r, seeds))
    perm = rng(seed, "order", epoch).permutation(len(batches))
    return BatchPlan([batches[i] for i in perm], batch_size, reps, rats, epoch)


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------


def _gradient(gen, h, w) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    base = gen.uniform(60, 190, size=3)
    slope_x = gen.uniform(-60, 60, size=3)
    slope_y = gen.uniform(-60, 60, size=3)
    return base + slope_x * xx[..., None] + slope_y * yy[..., None]


def _texture(gen, h, w) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    color = gen.uniform(30, 225, size=3)
    return color + 8.0 * np.sin(xx[..., None] * 0.7 + yy[..., None] * 0.4 + gen.uniform(0, 6, size=3))


def moving_rect(handle: DatasetHandle, sample_id: int) -> tuple[int, int, int, int, int, int]:
    """(y0, x0, height, width, vy, vx) of the moving rectangle in a synthetic video."""
    T, H, W = handle.dims
    gen = rng(handle.seed, f"synthetic:{handle.name}:motion", sample_id)
    vy, vx = (int(v) for v in gen.integers(-2, 3, size=2))
    span_y, span_x = abs(vy) * (T - 1), abs(vx) * (T - 1)
    rh = int(gen.integers(max(2, H // 6), max(3, min(H // 2, H - span_y) + 1)))
    rw = int(gen.integers(max(2, W // 6), max(3, min(W // 2, W - span_x) + 1)))
    rh, rw = min(rh, H - span_y), min(rw, W - span_x)
    y_lo, x_lo = max(0, -vy * (T - 1)), max(0, -vx * (T - 1))
    y_hi, x_hi = H - rh - max(0, vy * (T - 1)), W - rw - max(0, vx * (T - 1))
    y0 = int(gen.integers(y_lo, y_hi + 1))
    x0 = int(gen.integers(x_lo, x_hi + 1))
    return y0, x0, rh, rw, vy, vx


def generate_synthetic(handle: DatasetHandle, sample_id: int) -> VisualTensor:
    """Deterministic stand-in sample for ``(handle.seed, handle.name, sample_id)``.

    Images: a smooth colour gradient with a few textured rectangles.
    Videos: a static gradient with one textured rectangle translating by a
    constant integer velocity, fully inside the frame at every step.
    """
    if not 0 <= sample_id < handle.count:
        raise IndexError(f"sample {sample_id} outside dataset {handle.name!r} of {handle.count}")
    T, H, W = handle.dims
    gen = rng(handle.seed, f"synthetic:{handle.name}", sample_id)
    if handle.modality == IMAGE:
        img = _gradient(gen, H, W)
        for _ in range(int(gen.integers(1, 4))):
            rh, rw = int(gen.integers(H // 8 + 1, H // 2 + 1)), int(gen.integers(W // 8 + 1, W // 2 + 1))
            y0, x0 = int(gen.integers(0, H - rh + 1)), int(gen.integers(0, W - rw + 1))
            img[y0:y0 + rh, x0:x0 + rw] = _texture(gen, rh, rw)
        pixels = np.clip(np.rint(img), 0, 255)[None]
        return VisualTensor(pixels.astype(np.float64), IMAGE)

    background = _gradient(gen, H, W)
    y0, x0, rh, rw, vy, vx = moving_rect(handle, sample_id)
    patch = _texture(gen, rh, rw)
    frames = np.empty((T, H, W, 3))
    for k in range(T):
        frames[k] = background
        frames[k, y0 + k * vy:y0 + k * vy + rh, x0 + k * vx:x0 + k * vx + rw] = patch
    return VisualTensor(np.clip(np.rint(frames), 0, 255), VIDEO)


def load_sample(handle: DatasetHandle, sample_id: int) -> VisualTensor:
    if handle.files:
        return load_visual(handle.files[sample_id], handle.modality)
    return generate_synthetic(handle, sample_id)


def iter_batches(plan: BatchPlan, datasets: Sequence[DatasetHandle], workers: int = 4,
                 prefetch: int = 2) -> Iterator[tuple[Batch, list[VisualTensor]]]:
    """Load samples concurrently and deliver batches in plan order.

    Each draw is loaded once; its replicas share the same tensor.
    """
    by_name = {d.name: d for d in datasets}
    for b in plan.batches:
        if b.dataset not in by_name:
            raise UsageError(f"plan refers to unknown dataset {b.dataset!r}")
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        pending = []

        def submit(batch):
            ds = by_name[batch.dataset]
            return batch, [pool.submit(load_sample, ds, i) for i in batch.draws]

        it = iter(plan.batches)
        for batch in it:
            pending.append(submit(batch))
            if len(pending) > prefetch:
                break
        while pending:
            batch, futures = pending.pop(0)
            nxt = next(it, None)
            if nxt is not None:
                pending.append(submit(nxt))
            samples = [f.result() for f in futures]
            yield batch, [s for s in samples for _ in range(batch.replication)]


# ---------------------------------------------------------------------------
# I/O simulator
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IoModel:
    read_ms: float = 40.0
    jitter_ms: float = 0.0
    decode_ms: float = 60.0
    compute_ms: float = 50.0
    workers: int = 8
    in_flight: int = 32

    def __post_init__(self):
        if min(self.read_ms, self.jitter_ms, self.decode_ms, self.compute_ms) < 0:
            raise ParameterError("I/O model costs must be non-negative")
        if self.workers < 1 or self.in_flight < 1:
            raise ParameterError("need at least one worker and one in-flight request")


@dataclass(frozen=True)
class BatchTrace:
    index: int
    loads: int
    ready_ms: float
    start_ms: float
    end_ms: float


@dataclass
class SimResult:
    epoch_ms: float
    trace: list[BatchTrace] = field(default_factory=list)

    @property
    def distinct_loads(self) -> int:
        return sum(t.loads for t in self.trace)


def simulate_epoch(plan: BatchPlan, io: IoModel, seed: int = 0) -> SimResult:
    """Discrete-event makespan of loading and training through one plan.

    Loads are issued in plan order. A request holds one of ``in_flight``
    slots from issue until decoded; reads overlap freely, decoding occupies
    one of ``workers``. A step starts once its batch's draws are all
    decoded and the previous step has finished. Replicas cost nothing.
    """
    n_loads = plan.distinct_loads
    jitter = rng(seed, "io").uniform(-1.0, 1.0, size=n_loads) * io.jitter_ms
    slots = [0.0] * io.in_flight
    workers = [0.0] * io.workers
    done: list[float] = []
    for i in range(n_loads):
        start = heapq.heappop(slots)
        read_end = start + max(0.0, io.read_ms + jitter[i])
        decode_start = max(read_end, heapq.heappop(workers))
        end = decode_start + io.decode_ms
        heapq.heappush(workers, end)
        heapq.heappush(slots, end)
        done.append(end)

    trace = []
    clock = 0.0
    cursor = 0
    ready_so_far = 0.0
    for idx, b in enumerate(plan.batches):
        k = len(b.draws)
        if k:
            ready_so_far = max(ready_so_far, max(done[cursor:cursor + k]))
        cursor += k
        start = max(clock, ready_so_far)
        clock = start + io.compute_ms
        trace.append(BatchTrace(idx, k, ready_so_far, start, clock))
    epoch = max([clock, *done[-1:]])
    return SimResult(epoch, trace)


def replication_sweep(datasets: Sequence[DatasetHandle], batch_size: int, factors: Sequence[int],
                      io: IoModel, ratios: Mapping[str, int] | None = None,
                      seed: int = 0) -> list[dict]:
    """One simulated epoch per replication factor (applied to every dataset)."""
    rows = []
    for r in factors:
        plan = build_epoch_plan(datasets, batch_size, {d.name: r for d in datasets}, ratios, seed)
        res = simulate_epoch(plan, io, seed)
        rows.append({"R": r, "epoch_ms": res.epoch_ms, "distinct_loads": plan.distinct_loads,
                     "steps": plan.steps})
    return rows


def sweep_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=["R", "epoch_ms", "distinct_loads", "steps"],
                            lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({**row, "epoch_ms": f"{row['epoch_ms']:.3f}"})
    return buf.getvalue()


def write_manifest(path: str | Path, entries: Sequence[tuple[int, str, str, tuple[int, ...]]]) -> None:
    """One line per sample: ``id path modality TxHxWxC``."""
    lines = [f"{i} {p} {m} {'x'.join(map(str, dims))}" for i, p, m, dims in entries]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path: str | Path) -> list[tuple[int, str, str, tuple[int, ...]]]:
    out = []
    base = Path(path).parent
    for line in Path(path).read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        i, p, m, dims = line.split()
        full = Path(p) if Path(p).is_absolute() else base / p
        out.append((int(i), str(full), m, tuple(int(d) for d in dims.split("x"))))
    return out
