"""Post-hoc analyses: loss-variation histograms, gradient-trap detection,
and the 3-class toy demonstration of surrogate / 0-1 loss inconsistency."""

from dataclasses import dataclass

import numpy as np

# fixed single-layer softmax toy classifier over [-1,1]^2
TOY_WEIGHTS = np.array([[0.2, 0.8], [0.9, 0.4], [0.3, 0.9]])


def histogram_delta_ell(outcomes, bin_count=20):
    """Equal-width histograms of delta-ell, split by attack success.

    Also reports the overlap mass: the number of failed outcomes whose
    delta-ell exceeds the smallest successful one.
    """
    outcomes = list(outcomes)
    if not outcomes:
        raise ValueError("no outcomes to histogram")
    values = np.array([o.delta_ell for o in outcomes])
    success = np.array([bool(o.success) for o in outcomes])
    lo, hi = float(values.min()), float(values.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    failed_counts, edges = np.histogram(values[~success], bins=bin_count, range=(lo, hi))
    success_counts, _ = np.histogram(values[success], bins=bin_count, range=(lo, hi))
    if success.any():
        overlap = int(np.sum(values[~success] > values[success].min()))
    else:
        overlap = 0
    return {
        "bin_edges": edges.tolist(),
        "failed": failed_counts.tolist(),
        "successful": success_counts.tolist(),
        "overlap_mass": overlap,
    }


@dataclass
class TrapReport:
    sample_id: int
    delta_ell: float
    trace: np.ndarray
    dominance: float
    flagged: bool


def trace_dominance(trace, label):
    """Max over wrong classes of the mean confidence across the trailing
    half of the trace."""
    trace = np.asarray(trace)
    tail = trace[trace.shape[0] // 2 :]
    means = tail.mean(axis=0)
    wrong = np.delete(means, label)
    return float(wrong.max())


def detect_traps(outcomes, top_n=10, dominance_threshold=0.5):
    """Rank failed outcomes by delta-ell and flag those whose confidence
    scatters across wrong classes instead of settling on one.

    An empty result (no failed outcomes) is not an error.
    """
    failed = [
        (i, o) for i, o in enumerate(outcomes) if not o.success
    ]
    failed.sort(key=lambda pair: -pair[1].delta_ell)
    reports = []
    for sample_id, outcome in failed[:top_n]:
        dom = trace_dominance(outcome.trace, outcome.label)
        reports.append(
            TrapReport(
                sample_id=sample_id,
                delta_ell=float(outcome.delta_ell),
                trace=np.asarray(outcome.trace),
                dominance=dom,
                flagged=dom < dominance_threshold,
            )
        )
    return reports


@dataclass
class InconsistencyReport:
    x: tuple
    y: int
    eps: float
    grid_resolution: int
    ce_argmax_point: tuple
    ce_argmax_value: float
    ce_argmax_zero_one: int
    misclassified_exists: bool
    misclassified_example: tuple
    inconsistency: bool


def _toy_cross_entropy(points, y):
    # independent of the autodiff engine on purpose: plain logsumexp path
    z = points @ TOY_WEIGHTS.T
    m = z.max(axis=1)
    lse = m + np.log(np.sum(np.exp(z - m[:, None]), axis=1))
    return lse - z[:, y], z


def toy_inconsistency_demo(x, y, eps, grid_resolution=201):
    """Exhaustively compare the CE maximizer with the 0-1 loss over the
    linf ball around x intersected with [-1,1]^2."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (2,) or np.any(np.abs(x) > 1.0):
        raise ValueError("x must lie in [-1,1]^2")
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    if grid_resolution < 11:
        raise ValueError("grid resolution must be at least 11")
    y = int(y)
    if not 0 <= y < 3:
        raise ValueError("y must be one of the 3 toy classes")
    axes = [
        np.linspace(max(-1.0, x[i] - eps), min(1.0, x[i] + eps), grid_resolution)
        for i in range(2)
    ]
    g0, g1 = np.meshgrid(axes[0], axes[1], indexing="ij")
    points = np.column_stack([g0.ravel(), g1.ravel()])
    ce, z = _toy_cross_entropy(points, y)
    preds = np.argmax(z, axis=1)
    best = int(np.argmax(ce))
    mis = preds != y
    example = tuple(points[int(np.argmax(mis))]) if mis.any() else None
    ce_l01 = int(preds[best] != y)
    return InconsistencyReport(
        x=tuple(x),
        y=y,
        eps=float(eps),
        grid_resolution=grid_resolution,
        ce_argmax_point=tuple(points[best]),
        ce_argmax_value=float(ce[best]),
        ce_argmax_zero_one=ce_l01,
        misclassified_exists=bool(mis.any()),
        misclassified_example=example,
        inconsistency=bool(ce_l01 == 0 and mis.any()),
    )
