"""Allowed perturbation sets: lp-ball projections, image warping by flow
fields, and budget calibration.

Flow fields displace pixels in normalized coordinates (the image spans
[0,1] per axis); their norms are measured on the flattened 2*H*W
displacement vector. That convention is echoed into report metadata so
location-budget numbers are self-describing.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import engine

INTENSITY = "intensity"
LOCATION = "location"
FAMILIES = (INTENSITY, LOCATION)

LINF = "linf"
L1 = "l1"
L2 = "l2"
NORMS = (LINF, L1, L2)


class CalibrationError(RuntimeError):
    def __init__(self, message, residual_accuracy=None):
        super().__init__(message)
        self.residual_accuracy = residual_accuracy


@dataclass(frozen=True)
class PerturbationSet:
    """One element of the allowed-set grid: family x norm x budget."""

    family: str
    norm: str
    epsilon: float

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if self.norm not in NORMS:
            raise ValueError(f"unknown norm {self.norm!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")

    @property
    def ident(self):
        tag = "I" if self.family == INTENSITY else "L"
        return f"{tag}-{self.norm}"


# CIFAR-scale reference budgets, shipped as documented defaults for image
# data; desk-scale runs calibrate their own.
REFERENCE_BUDGETS = {
    (INTENSITY, LINF): 0.024,
    (INTENSITY, L1): 30.5,
    (INTENSITY, L2): 0.78,
    (LOCATION, LINF): 0.019,
    (LOCATION, L1): 8.55,
    (LOCATION, L2): 0.38,
}


def default_set_grid(budgets=None):
    """The six-set grid (intensity then location, linf/l1/l2 each)."""
    budgets = REFERENCE_BUDGETS if budgets is None else budgets
    return [
        PerturbationSet(family, norm, budgets[(family, norm)])
        for family in FAMILIES
        for norm in NORMS
    ]


def lp_norm(v, norm):
    v = np.asarray(v, dtype=np.float64).ravel()
    if norm == LINF:
        return float(np.max(np.abs(v))) if v.size else 0.0
    if norm == L1:
        return float(np.sum(np.abs(v)))
    return float(np.sqrt(np.sum(v * v)))


def _project_l1_flat(v, eps):
    a = np.abs(v)
    if np.sum(a) <= eps:
        return v
    # sort-based soft thresholding (Duchi et al. simplex projection)
    u = np.sort(a)[::-1]
    cum = np.cumsum(u)
    ks = np.arange(1, a.size + 1)
    rho = np.nonzero(u * ks > cum - eps)[0][-1]
    theta = (cum[rho] - eps) / (rho + 1.0)
    return np.sign(v) * np.maximum(a - theta, 0.0)


def project_intensity(delta, norm, eps):
    """Euclidean-nearest point of the {lp norm <= eps} ball."""
    if eps < 0:
        raise ValueError("epsilon must be nonnegative")
    delta = np.asarray(delta, dtype=np.float64)
    if eps == 0:
        return np.zeros_like(delta)
    if norm == LINF:
        return np.clip(delta, -eps, eps)
    if norm == L2:
        n = np.sqrt(np.sum(delta * delta))
        if n <= eps:
            return delta
        return delta * (eps / n)
    if norm == L1:
        return _project_l1_flat(delta.ravel(), eps).reshape(delta.shape)
    raise ValueError(f"unknown norm {norm!r}")


def project_flow(flow, norm, eps):
    """Project a flow field's flattened displacement vector onto the ball."""
    return project_intensity(flow, norm, eps)


def clamp_valid(x):
    """Clamp pixels to the valid [0,1] intensity range."""
    return np.clip(x, 0.0, 1.0)


@lru_cache(maxsize=8)
def _base_grid(height, width):
    rows, cols = np.meshgrid(
        np.arange(height, dtype=np.float64),
        np.arange(width, dtype=np.float64),
        indexing="ij",
    )
    grid = np.stack([rows, cols], axis=-1)
    grid.flags.writeable = False
    return grid


def flow_to_coords(shape, flow):
    """Pixel-space sampling coordinates for a normalized flow field."""
    height, width = shape
    scale = np.array([height - 1.0, width - 1.0])
    return _base_grid(height, width) + flow * scale


def warp(image, flow):
    """Warp an image by a flow field via bilinear resampling.

    Zero flow is the identity, bit-exact; outputs stay in [0,1] because
    each pixel is a convex combination of valid pixels.
    """
    image = np.asarray(image, dtype=np.float64)
    flow = np.asarray(flow, dtype=np.float64)
    if flow.shape != image.shape + (2,):
        raise engine.DimensionError(
            f"flow shape {flow.shape} does not match image {image.shape}"
        )
    graph = engine.Graph()
    coords = graph.input(flow_to_coords(image.shape, flow))
    return engine.bilinear_sample(image, coords).value


def calibrate_from_accuracy(accuracy_fn, threshold, eps_seed=1e-4,
                            rel_tol=1e-3, max_sweeps=40):
    """Smallest eps (to relative tolerance) with accuracy_fn(eps) < threshold.

    Geometric bracketing upward from eps_seed, then bisection. Raises
    CalibrationError (with the residual accuracy) if the upper bracket
    bound is reached without crossing the threshold.
    """
    if not 0 < threshold <= 1:
        raise ValueError("threshold must be in (0, 1]")
    sweeps = 0

    def measure(eps):
        nonlocal sweeps
        sweeps += 1
        return accuracy_fn(eps)

    hi = eps_seed
    acc = measure(hi)
    if acc < threshold:
        return hi
    lo = hi
    while acc >= threshold:
        if sweeps >= max_sweeps // 2:
            raise CalibrationError(
                f"accuracy {acc:.4f} still >= {threshold} at eps={hi:g}",
                residual_accuracy=acc,
            )
        lo, hi = hi, hi * 2.0
        acc = measure(hi)
    while hi - lo > rel_tol * hi and sweeps < max_sweeps:
        mid = 0.5 * (lo + hi)
        if measure(mid) < threshold:
            hi = mid
        else:
            lo = mid
    return hi


def calibrate_epsilon(standard_model, family, norm, dataset, threshold=0.01,
                      attack_steps=20, eps_seed=1e-4, rel_tol=1e-3):
    """Calibrate a budget so the reference attack (white-box PGD with CE,
    K=20) drives the undefended model's adversarial accuracy below the
    threshold."""
    from . import attacks  # deferred: attacks builds on this module
    from .losses import SurrogateLoss

    ce = SurrogateLoss("ce")

    def accuracy_at(eps):
        pset = PerturbationSet(family, norm, eps)
        cfg = attacks.AttackConfig(pset, ce, attacks.WHITE_BOX, steps=attack_steps)
        hits = 0
        for x, y in zip(dataset.inputs, dataset.labels):
            outcome = attacks.pgd(standard_model, standard_model, x, y, cfg)
            hits += outcome.success
        return 1.0 - hits / len(dataset)

    return calibrate_from_accuracy(
        accuracy_at, threshold, eps_seed=eps_seed, rel_tol=rel_tol
    )
