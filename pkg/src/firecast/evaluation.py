"""Temporal-validation metrics: streaming BCE / AUROC and model comparison.

Evaluation walks the held-out future weeks in order with frozen parameters.
At each state index k the fire decoder's output is scored against the ground
truth at week k + horizon; per-frame scores are pixel means, AUROC pools
every (risk, occupancy) pixel pair across the stream.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import model as mdl
from .data import SequenceData
from .errors import (
    ComparisonError,
    ConfigurationError,
    DomainError,
    MetricUndefinedError,
)
from .model import ModelVariant
from .numerics import BCE_CLAMP, Tensor

WARM_MODES = ("carried", "cold")


def auroc(scores, labels) -> float:
    """Probability a random positive outranks a random negative (ties 0.5).

    Computed from average ranks, which matches the pairwise definition
    exactly. Raises when only one class is present.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise DomainError(f"auroc: {s.shape} scores vs {y.shape} labels")
    if not np.isin(y, (0, 1)).all():
        raise DomainError("auroc: labels must be 0/1")
    pos = int(y.sum())
    neg = y.size - pos
    if pos == 0 or neg == 0:
        raise MetricUndefinedError("auroc undefined: labels contain a single class")
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    boundaries = np.flatnonzero(np.r_[True, sorted_s[1:] != sorted_s[:-1]])
    counts = np.diff(np.r_[boundaries, s.size])
    group_rank = boundaries + (counts + 1) / 2.0  # 1-based average rank per tie group
    ranks = np.empty(s.size)
    ranks[order] = np.repeat(group_rank, counts)
    u = ranks[y == 1].sum() - pos * (pos + 1) / 2.0
    return float(u / (pos * neg))


def pixel_mean_bce(pred: np.ndarray, target: np.ndarray) -> float:
    """Pixel-mean binary cross-entropy of one frame, in float64."""
    p = np.clip(pred.astype(np.float64), BCE_CLAMP, 1.0 - BCE_CLAMP)
    t = target.astype(np.float64)
    return float(-(t * np.log(p) + (1.0 - t) * np.log1p(-p)).mean())


@dataclass
class EvalReport:
    variant: str
    frames: int
    total_bce: float       # sum over frames of per-frame pixel-mean BCE
    mean_pixel_bce: float  # total_bce / frames
    auroc: float | None    # None when undefined (single-class labels)
    positive_rate: float
    best: bool = False
    note: str = ""


def evaluate_stream(
    model: ModelVariant,
    data: SequenceData,
    warm: str = "carried",
    warm_frames: np.ndarray | None = None,
) -> EvalReport:
    """Walk the validation weeks once and score every reachable target.

    ``warm="carried"`` first advances the state over ``warm_frames`` (the
    training-period observations, frozen parameters), so validation starts
    from the estimate at the end of the training timeline; ``warm="cold"``
    starts from the zero state.
    """
    if warm not in WARM_MODES:
        raise ConfigurationError(f"warm mode must be one of {WARM_MODES}, got '{warm}'")
    dims = model.dims
    if data.obs.shape[1:] != (dims.channels, dims.height, dims.width):
        raise ConfigurationError(
            f"validation frames {data.obs.shape[1:]} do not match model dims "
            f"(C={dims.channels}, H={dims.height}, W={dims.width})"
        )
    n = len(data)
    horizon = dims.horizon
    if n < horizon + 1:
        raise ConfigurationError(
            f"validation span of {n} weeks is shorter than horizon + 1 = {horizon + 1}"
        )

    h = Tensor(np.zeros((1, dims.state), dtype=np.float32))
    if warm == "carried":
        if warm_frames is None:
            raise ConfigurationError("carried warm start requires the training-period frames")
        warm_frames = np.asarray(warm_frames, dtype=np.float32)
        for k in range(warm_frames.shape[0]):
            h = mdl.state_update_t(model, h, Tensor(warm_frames[k][None]))

    # state index k (frames < k consumed) is scored against week k + horizon
    last_k = n - horizon - 1
    total = 0.0
    scores = []
    labels = []
    for k in range(n - horizon):
        risk = mdl.decode_fire_t(h, model.params, dims).data[0]
        target = data.fire[k + horizon]
        total += pixel_mean_bce(risk, target)
        scores.append(risk.astype(np.float64).ravel())
        labels.append(target.astype(np.int8).ravel())
        if k < last_k:
            h = mdl.state_update_t(model, h, Tensor(data.obs[k][None]))

    return _finish_report(model.tag, total, scores, labels)


def _finish_report(tag: str, total: float, scores: list, labels: list) -> EvalReport:
    pooled_scores = np.concatenate(scores)
    pooled_labels = np.concatenate(labels)
    try:
        area = auroc(pooled_scores, pooled_labels)
    except MetricUndefinedError:
        area = None
    return EvalReport(
        variant=tag,
        frames=len(scores),
        total_bce=total,
        mean_pixel_bce=total / len(scores),
        auroc=area,
        positive_rate=float(pooled_labels.mean()),
    )


def evaluate_offline(
    model: ModelVariant,
    data: SequenceData,
    warm: str = "carried",
    warm_frames: np.ndarray | None = None,
) -> EvalReport:
    """Full-unroll counterpart of ``evaluate_stream``.

    Computes every state with ``forward_trajectory`` and decodes all fire
    maps in one batch; scores the same targets as the streaming walk.
    """
    if warm not in WARM_MODES:
        raise ConfigurationError(f"warm mode must be one of {WARM_MODES}, got '{warm}'")
    dims = model.dims
    n = len(data)
    if n < dims.horizon + 1:
        raise ConfigurationError(
            f"validation span of {n} weeks is shorter than horizon + 1 = {dims.horizon + 1}"
        )
    h0 = model.initial_state()
    if warm == "carried":
        if warm_frames is None:
            raise ConfigurationError("carried warm start requires the training-period frames")
        out = mdl.forward_trajectory(model, warm_frames, h0)
        h0 = mdl.HiddenState(out.states[-1], out.week_indices[-1])
    n_states = n - dims.horizon
    if n_states > 1:
        unrolled = mdl.forward_trajectory(model, data.obs[: n_states - 1], h0)
        states = np.concatenate([h0.vector[None], unrolled.states])
    else:
        states = h0.vector[None]
    risks = mdl.decode_fire_t(Tensor(states), model.params, dims).data

    total = 0.0
    scores = []
    labels = []
    for k in range(n_states):
        target = data.fire[k + dims.horizon]
        total += pixel_mean_bce(risks[k], target)
        scores.append(risks[k].astype(np.float64).ravel())
        labels.append(target.astype(np.int8).ravel())
    return _finish_report(model.tag, total, scores, labels)


REPORT_COLUMNS = (
    "variant", "frames", "total_bce", "mean_pixel_bce", "auroc", "positive_rate", "best_flag"
)


def report_csv(reports: list[EvalReport]) -> str:
    lines = [",".join(REPORT_COLUMNS)]
    for r in reports:
        area = "NA" if r.auroc is None else repr(r.auroc)
        lines.append(
            f"{r.variant},{r.frames},{r.total_bce!r},{r.mean_pixel_bce!r},"
            f"{area},{r.positive_rate!r},{int(r.best)}"
        )
    return "\n".join(lines) + "\n"


def render_table(reports: list[EvalReport]) -> str:
    header = f"{'variant':<20} {'total BCE':>12} {'mean BCE':>10} {'AUROC':>8} {'pos rate':>9} best"
    lines = [header, "-" * len(header)]
    for r in reports:
        area = "   NA" if r.auroc is None else f"{r.auroc:.3f}"
        flag = "  *" if r.best else ""
        lines.append(
            f"{r.variant:<20} {r.total_bce:>12.4f} {r.mean_pixel_bce:>10.4f} "
            f"{area:>8} {r.positive_rate:>9.4f}{flag}"
        )
        if r.note:
            lines.append(f"  note: {r.note}")
    return "\n".join(lines) + "\n"


def compare_models(reports: list[EvalReport]) -> list[EvalReport]:
    """Rank reports over the same validation stream; lowest total BCE wins.

    Ties break by variant-name order and are annotated. Returns new report
    objects sorted by variant name with exactly one best flag set.
    """
    if len(reports) < 2:
        raise ComparisonError(f"need at least two reports to compare, got {len(reports)}")
    first = reports[0]
    for r in reports[1:]:
        if r.frames != first.frames or abs(r.positive_rate - first.positive_rate) > 1e-12:
            raise ComparisonError(
                f"report for '{r.variant}' covers a different validation stream "
                f"than '{first.variant}'"
            )
    ordered = sorted(reports, key=lambda r: r.variant)
    best_bce = min(r.total_bce for r in ordered)
    winners = [r.variant for r in ordered if r.total_bce == best_bce]
    note = f"tie on total BCE between {', '.join(winners)}" if len(winners) > 1 else ""
    out = []
    for r in ordered:
        is_best = r.variant == winners[0]
        out.append(replace(r, best=is_best, note=note if is_best else ""))
    return out


def write_risk_png(path, grid: np.ndarray):
    """Save one risk map as an 8-bit grayscale PNG."""
    from PIL import Image

    arr = np.clip(np.asarray(grid, dtype=np.float64), 0.0, 1.0)
    img = Image.fromarray(np.round(arr * 255.0).astype(np.uint8), mode="L")
    img.save(path)
