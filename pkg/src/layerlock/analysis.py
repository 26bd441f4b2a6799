"""Experimental instruments: the layer-convergence grid, collapse
diagnostics, and CSV emission for the cost model.

The convergence grid isolates freezing: every cell trains with pixel
targets throughout and differs from the shared baseline only by a single
hard freeze of prefix L at step T. All runs share the same seed, so the
data order, masks, and initialization are identical, and the L=0 /
never-freeze arms reproduce the baseline bitwise.
"""

from __future__ import annotations

import csv
import multiprocessing
from dataclasses import dataclass, field, replace

import numpy as np

from .costmodel import CostReport, flops_estimate  # re-exported for callers
from .engine import DivergenceError, FreezeSchedule, RunConfig, TargetSpec, run_training


def final_loss_window(loss_trace, window: int) -> float:
    """Mean of the final `window` loss values."""
    trace = np.asarray(loss_trace, dtype=np.float64)
    if window < 1 or trace.size < window:
        raise ValueError(f"trace of length {trace.size} too short for window {window}")
    return float(trace[-window:].mean())


@dataclass
class ConvergenceGrid:
    base_loss: float
    window: int
    entries: dict = field(default_factory=dict)  # (layer, freeze_step) -> dict

    def deviation(self, layer, freeze_step):
        return self.entries[(layer, freeze_step)]["percent_deviation"]

    def monotonicity_violations(self, tolerance_pct: float):
        """Cells violating nonincreasing-in-T / nondecreasing-in-L beyond
        the tolerance (in absolute percent deviation)."""
        layers = sorted({l for l, _ in self.entries})
        steps = sorted({t for _, t in self.entries})
        bad = []
        for l in layers:
            for t0, t1 in zip(steps, steps[1:]):
                d0, d1 = self.deviation(l, t0), self.deviation(l, t1)
                if d1 > d0 + tolerance_pct:
                    bad.append(("T", l, t0, t1, d0, d1))
        for t in steps:
            for l0, l1 in zip(layers, layers[1:]):
                d0, d1 = self.deviation(l0, t), self.deviation(l1, t)
                if d1 < d0 - tolerance_pct:
                    bad.append(("L", t, l0, l1, d0, d1))
        return bad


def grid_cell_config(base: RunConfig, layer: int, freeze_step: int,
                     total_steps: int) -> RunConfig:
    """Baseline config with one hard freeze of prefix `layer` at
    `freeze_step`; targets stay pixels."""
    sched = FreezeSchedule(start=freeze_step, interval=10 * total_steps,
                          jump=layer, max_frozen=layer)
    return replace(
        base,
        mode="mae" if layer > 0 else "mae_baseline",
        schedule=sched if layer > 0 else base.schedule,
        target=TargetSpec(kind="pixels_only"),
        steps=total_steps,
    )


def _run_cell(args):
    cfg, layer, freeze_step = args
    try:
        _, losses = run_training(cfg)
        return layer, freeze_step, losses, False
    except DivergenceError:
        return layer, freeze_step, None, True


def convergence_grid(base_cfg: RunConfig, layers, freeze_steps, total_steps: int,
                     window: int = 250, n_jobs: int = 1) -> ConvergenceGrid:
    baseline_cfg = grid_cell_config(base_cfg, 0, total_steps, total_steps)
    jobs = [(baseline_cfg, 0, total_steps)]
    for l in layers:
        for t in freeze_steps:
            jobs.append((grid_cell_config(base_cfg, l, t, total_steps), l, t))
    if n_jobs > 1:
        with multiprocessing.Pool(n_jobs) as pool:
            results = pool.map(_run_cell, jobs)
    else:
        results = [_run_cell(j) for j in jobs]

    base_losses = next(r[2] for r in results if r[0] == 0)
    base_loss = final_loss_window(base_losses, window)
    grid = ConvergenceGrid(base_loss=base_loss, window=window)
    for layer, t, losses, diverged in results:
        if layer == 0:
            continue
        if diverged:
            grid.entries[(layer, t)] = {
                "final_loss": float("nan"), "percent_deviation": float("nan"),
                "diverged": True,
            }
            continue
        final = final_loss_window(losses, window)
        grid.entries[(layer, t)] = {
            "final_loss": final,
            "percent_deviation": 100.0 * (final - base_loss) / base_loss,
            "diverged": False,
        }
    return grid


def write_grid_csv(grid: ConvergenceGrid, path: str):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["layer", "freeze_step", "final_loss", "percent_deviation", "diverged"])
        w.writerow([0, "", repr(float(grid.base_loss)), repr(0.0), False])
        for (layer, t), e in sorted(grid.entries.items()):
            w.writerow([layer, t, repr(float(e["final_loss"])),
                        repr(float(e["percent_deviation"])), e["diverged"]])


def write_cost_csv(report: CostReport, path: str):
    events = set(report.event_steps)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([
            "step", "flops_step", "flops_cum", "peak_memory",
            "baseline_flops_step", "baseline_flops_cum", "baseline_peak_memory",
            "freeze_event",
        ])
        for s in range(report.steps):
            w.writerow([
                s,
                repr(float(report.flops_step[s])),
                repr(float(report.flops_cum[s])),
                repr(float(report.peak_memory[s])),
                repr(float(report.baseline_flops_step[s])),
                repr(float(report.baseline_flops_cum[s])),
                repr(float(report.baseline_peak_memory[s])),
                int(s in events),
            ])


def collapse_metrics(features) -> dict:
    """Variance and effective-rank diagnostics over (B, N, D) features.

    token_variance: mean over channels of the variance across all B*N
    tokens. batch_variance: variance of per-clip mean features across the
    batch. effective_rank: exp of the entropy of the normalized singular
    values of the flattened (B*N, D) matrix.
    """
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 3 or feats.shape[0] < 2:
        raise ValueError("collapse metrics need (B, N, D) features with B >= 2")
    b, n, d = feats.shape
    flat = feats.reshape(b * n, d)
    token_variance = float(flat.var(axis=0).mean())
    clip_means = feats.mean(axis=1)  # (B, D)
    batch_variance = float(clip_means.var(axis=0).mean())
    sv = np.linalg.svd(flat, compute_uv=False)
    total = sv.sum()
    if total == 0.0:
        effective_rank = 1.0
    else:
        p = sv / total
        p = p[p > 0]
        effective_rank = float(np.exp(-(p * np.log(p)).sum()))
    return {
        "token_variance": token_variance,
        "batch_variance": batch_variance,
        "effective_rank": effective_rank,
    }
