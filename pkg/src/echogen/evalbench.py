"""Adherence statistics, rejection sampling, image quality metrics, and the
sampling-throughput benchmark."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field

import numpy as np
from skimage.metrics import structural_similarity

from .samplers import SampleRequest, sample_one_step
from .seqcond import ConditioningSet, PaddedVideo

__all__ = [
    "AdherenceRecord",
    "MetricReport",
    "ef_adherence",
    "rejection_sample",
    "ssim",
    "psnr",
    "throughput_bench",
]

MIN_EF_GAP = 0.05  # generation task: requested EF must differ this much


@dataclass(frozen=True)
class AdherenceRecord:
    """One requested-vs-observed EF pair (fractions in [0,1])."""

    requested_ef: float
    observed_ef: float
    task: str  # "rec" or "gen"
    item_id: str = ""
    source_ef: float | None = None

    def __post_init__(self):
        if not np.isfinite(self.requested_ef) or not np.isfinite(self.observed_ef):
            raise ValueError("EF values must be finite")
        if self.task not in ("rec", "gen"):
            raise ValueError(f"task must be 'rec' or 'gen', got {self.task!r}")
        if self.task == "gen" and self.source_ef is not None:
            if abs(self.requested_ef - self.source_ef) < MIN_EF_GAP:
                raise ValueError(
                    "gen-task requested EF must differ from the source EF "
                    f"by at least {MIN_EF_GAP}"
                )


def ef_adherence(records) -> tuple[float | None, float, float]:
    """R^2, MAE, RMSE between requested and observed EF.

    R^2 = 1 - SS_res / SS_tot with requested values as the target. It is
    undefined (returned as None) for fewer than two records or when all
    requested values coincide.
    """
    records = list(records)
    if not records:
        raise ValueError("need at least one record")
    req = np.array([r.requested_ef for r in records])
    obs = np.array([r.observed_ef for r in records])
    err = obs - req
    mae = float(np.abs(err).mean())
    rmse = float(np.sqrt((err**2).mean()))
    r2 = None
    if len(records) >= 2:
        ss_tot = float(((req - req.mean()) ** 2).sum())
        if ss_tot > 0:
            r2 = float(1.0 - (err**2).sum() / ss_tot)
    return r2, mae, rmse


def rejection_sample(
    velocity_fn, params, c: ConditioningSet, k: int, estimator, seed: int, sampler=None
) -> tuple[PaddedVideo, float]:
    """Draw k candidates on seeds seed..seed+k-1 and keep the one whose
    estimated EF best matches c.phi.

    `estimator` maps a PaddedVideo to an observed EF and may raise; a
    candidate whose estimate fails is skipped. All k failing is an error.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if c.phi is None:
        raise ValueError("rejection sampling needs a requested EF")
    if sampler is None:
        def sampler(fn, p, cond, s):
            return sample_one_step(fn, p, SampleRequest(c=cond, seed=s))
    best, best_err = None, np.inf
    failures = []
    for j in range(k):
        video = sampler(velocity_fn, params, c, seed + j)
        try:
            observed = estimator(video)
        except Exception as exc:  # estimator owns its failure modes
            failures.append(exc)
            continue
        err = abs(observed - c.phi)
        if err < best_err:
            best, best_err = video, err
    if best is None:
        raise RuntimeError(f"estimator failed on all {k} candidates: {failures[-1]}")
    return best, float(best_err)


def _frame_stack(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 2:
        return a[None]
    if a.ndim == 4:  # (F, C, H, W) single channel
        return a[:, 0]
    if a.ndim == 3:
        return a
    raise ValueError(f"expected a frame or frame stack, got shape {a.shape}")


def ssim(a, b, data_range: float = 1.0) -> float:
    """Windowed structural similarity with the standard constants, averaged
    over frames when given videos."""
    fa, fb = _frame_stack(a), _frame_stack(b)
    if fa.shape != fb.shape:
        raise ValueError(f"shape mismatch: {fa.shape} vs {fb.shape}")
    vals = [
        structural_similarity(x, y, data_range=data_range, win_size=7)
        for x, y in zip(fa, fb)
    ]
    return float(np.mean(vals))


def psnr(a, b, data_range: float = 1.0) -> float:
    fa, fb = _frame_stack(a), _frame_stack(b)
    if fa.shape != fb.shape:
        raise ValueError(f"shape mismatch: {fa.shape} vs {fb.shape}")
    mse = float(((fa - fb) ** 2).mean())
    if mse == 0:
        return float("inf")
    return float(10.0 * np.log10(data_range**2 / mse))


def throughput_bench(sampler_closure, n_iter: int = 100, warmup: int = 5) -> float:
    """Videos per second over n_iter timed calls after a fixed warmup."""
    if n_iter < 1:
        raise ValueError("n_iter must be >= 1")
    for _ in range(warmup):
        sampler_closure()
    t0 = time.perf_counter()
    for _ in range(n_iter):
        sampler_closure()
    elapsed = time.perf_counter() - t0
    return n_iter / elapsed


@dataclass
class MetricReport:
    """Aggregated evaluation results; serializes to JSON and CSV.

    EF values are fractions internally; the rendered table shows percent.
    Throughput stays None for evaluation reports (timing would break
    byte-level reproducibility) and is filled only by the benchmark command.
    """

    task: str
    records: list = field(default_factory=list)
    r2: float | None = None
    mae: float | None = None
    rmse: float | None = None
    quality: dict = field(default_factory=dict)
    throughput: float | None = None
    n_failures: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mae is not None and self.rmse is not None:
            if not (self.rmse >= self.mae >= 0):
                raise ValueError("need rmse >= mae >= 0")
        if self.r2 is not None and self.r2 > 1.0:
            raise ValueError("r2 cannot exceed 1")

    @classmethod
    def from_records(cls, task: str, records, quality=None, n_failures=0, extra=None):
        r2, mae, rmse = ef_adherence(records)
        return cls(
            task=task,
            records=list(records),
            r2=r2,
            mae=mae,
            rmse=rmse,
            quality=dict(quality or {}),
            n_failures=n_failures,
            extra=dict(extra or {}),
        )

    def to_json(self) -> str:
        payload = {
            "task": self.task,
            "summary": {
                "r2": self.r2,
                "mae": self.mae,
                "rmse": self.rmse,
                "n_records": len(self.records),
                "n_failures": self.n_failures,
            },
            "quality": self.quality,
            "throughput_vid_per_s": self.throughput,
            "extra": self.extra,
            "records": [
                {
                    "item_id": r.item_id,
                    "task": r.task,
                    "requested_ef": r.requested_ef,
                    "observed_ef": r.observed_ef,
                    "abs_error": abs(r.observed_ef - r.requested_ef),
                    "source_ef": r.source_ef,
                }
                for r in self.records
            ],
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["item_id", "task", "requested_ef", "observed_ef", "abs_error", "source_ef"]
            )
            for r in self.records:
                writer.writerow(
                    [
                        r.item_id,
                        r.task,
                        repr(r.requested_ef),
                        repr(r.observed_ef),
                        repr(abs(r.observed_ef - r.requested_ef)),
                        "" if r.source_ef is None else repr(r.source_ef),
                    ]
                )

    def render_table(self) -> str:
        def pct(v):
            return "undef" if v is None else f"{100.0 * v:.1f}"

        lines = [
            f"task={self.task}  records={len(self.records)}  failures={self.n_failures}",
            f"R2: {'undef' if self.r2 is None else f'{self.r2:.3f}'}  "
            f"MAE: {pct(self.mae)}%  RMSE: {pct(self.rmse)}%",
        ]
        if self.quality:
            q = "  ".join(f"{k}={v:.4f}" for k, v in sorted(self.quality.items()))
            lines.append(f"quality: {q}")
        if self.throughput is not None:
            lines.append(f"throughput: {self.throughput:.2f} vid/s")
        return "\n".join(lines)
