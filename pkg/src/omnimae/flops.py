"""Analytical multiply-accumulate counts for patch-dropping MAE training.

One MAC is one multiply-add. Only matrix products are counted; softmax,
layernorm, bias and activation element-ops are left out, which is what
lets the analytical subtotal match the instrumented forward exactly.

Per transformer layer on ``n`` tokens of width ``m`` with MLP ratio ``a``:

    qkv + output projections   4 n m^2
    scores + weighted values   2 n^2 m
    MLP                        2 a n m^2
"""

from __future__ import annotations

import csv
import io
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from .masking import CAUSAL, RANDOM, MaskSpec, generate_mask, kept_count
from .model import OmniMaeConfig, forward, init_params
from .ndcore import MacMeter, Tape
from .patchify import IMAGE, VIDEO, VisualTensor

DEFAULT_RATIOS = {IMAGE: 0.90, VIDEO: 0.95}
# MAE's image default and VideoMAE's video default, on the same architecture
REFERENCE_RATIOS = {IMAGE: 0.75, VIDEO: 0.90}

ENCODER_STAGES = ("patch_embed", "enc_attn_proj", "enc_attn_scores", "enc_mlp", "adapter")
DECODER_STAGES = ("dec_attn_proj", "dec_attn_scores", "dec_mlp", "output_proj")


def layer_macs(n: int, m: int, mlp_ratio: int = 4) -> dict[str, int]:
    return {"attn_proj": 4 * n * m * m, "attn_scores": 2 * n * n * m, "mlp": 2 * mlp_ratio * n * m * m}


@dataclass(frozen=True)
class FlopsReport:
    preset: str
    modality: str
    ratio: float
    n: int
    k: int
    stages: dict[str, int] = field(default_factory=dict)

    @property
    def encoder(self) -> int:
        return sum(self.stages[s] for s in ENCODER_STAGES)

    @property
    def encoder_blocks(self) -> int:
        return sum(self.stages[s] for s in ("enc_attn_proj", "enc_attn_scores", "enc_mlp"))

    @property
    def decoder(self) -> int:
        return sum(self.stages[s] for s in DECODER_STAGES)

    @property
    def total(self) -> int:
        return sum(self.stages.values())

    @property
    def matmul_total(self) -> int:
        # every counted stage is a matrix product
        return self.total


def count_macs(cfg: OmniMaeConfig, modality: str, ratio: float, kind: str = RANDOM) -> FlopsReport:
    """Per-stage MACs; ``kind`` only matters through the kept count it implies."""
    grid = cfg.grid(modality)
    n = grid[0] * grid[1] * grid[2]
    k = kept_count(n, ratio) if kind in (RANDOM, CAUSAL) else generate_mask(grid, MaskSpec(kind, ratio)).k
    D, d, p = cfg.embed_dim, cfg.decoder_dim, cfg.patch.size
    enc = layer_macs(k, D, cfg.mlp_ratio)
    dec = layer_macs(n, d, cfg.mlp_ratio)
    stages = {
        "patch_embed": k * p * D,
        "enc_attn_proj": cfg.depth * enc["attn_proj"],
        "enc_attn_scores": cfg.depth * enc["attn_scores"],
        "enc_mlp": cfg.depth * enc["mlp"],
        "adapter": k * D * d,
        "dec_attn_proj": cfg.decoder_depth * dec["attn_proj"],
        "dec_attn_scores": cfg.decoder_depth * dec["attn_scores"],
        "dec_mlp": cfg.decoder_depth * dec["mlp"],
        "output_proj": n * d * p,
    }
    return FlopsReport(cfg.preset, modality, ratio, n, k, stages)


def ratio_table(cfgs: Sequence[OmniMaeConfig], ratios: Mapping[str, float] | None = None,
                baselines: Mapping[str, float] | None = None) -> list[dict]:
    """Savings of each (config, modality) at its ratio vs no masking and vs a reference ratio."""
    ratios = {**DEFAULT_RATIOS, **(ratios or {})}
    baselines = {**REFERENCE_RATIOS, **(baselines or {})}
    rows = []
    for cfg in cfgs:
        for modality in (IMAGE, VIDEO):
            rep = count_macs(cfg, modality, ratios[modality])
            full = count_macs(cfg, modality, 0.0)
            ref = count_macs(cfg, modality, baselines[modality])
            rows.append({
                "preset": cfg.preset, "modality": modality, "ratio": ratios[modality],
                "macs_encoder": rep.encoder, "macs_decoder": rep.decoder, "macs_total": rep.total,
                "vs_full": full.total / rep.total, "vs_reference": ref.total / rep.total,
            })
    return rows


CSV_FIELDS = ["preset", "modality", "ratio", "macs_encoder", "macs_decoder", "macs_total",
              "vs_full", "vs_reference"]


def table_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({**r, "vs_full": f"{r['vs_full']:.4f}", "vs_reference": f"{r['vs_reference']:.4f}"})
    return buf.getvalue()


def table_text(rows: Sequence[dict]) -> str:
    head = f"{'preset':<7}{'modality':<9}{'ratio':>6}{'enc GMAC':>11}{'dec GMAC':>11}" \
           f"{'total GMAC':>12}{'vs full':>9}{'vs ref':>8}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{r['preset']:<7}{r['modality']:<9}{r['ratio']:>6.2f}"
                     f"{r['macs_encoder'] / 1e9:>11.3f}{r['macs_decoder'] / 1e9:>11.3f}"
                     f"{r['macs_total'] / 1e9:>12.3f}{r['vs_full']:>8.2f}x{r['vs_reference']:>7.2f}x")
    return "\n".join(lines)


def measure_macs(cfg: OmniMaeConfig, modality: str, ratio: float, seed: int = 0, kind: str = RANDOM) -> int:
    """MACs metered from a real forward pass on a random input of the config's shape."""
    T, H, W = cfg.input_shape(modality)
    gen = np.random.default_rng(seed)
    if modality == IMAGE:
        x = VisualTensor.image(gen.integers(0, 256, size=(H, W, 3)).astype(np.float64))
    else:
        x = VisualTensor.video(gen.integers(0, 256, size=(T, H, W, 3)).astype(np.float64))
    meter = MacMeter()
    forward(x, MaskSpec(kind, ratio, seed), cfg, init_params(cfg, seed), Tape(meter))
    return meter.total
