"""Surrogate losses maximized by attacks, plus the 0-1 loss.

Every family member is phrased so the attacker maximizes it: the targeted
cross-entropy variant is log softmax(z)[t] (the negative of the usual
targeted CE), which lets one ascent loop drive the whole family.

Report identifiers: "ce", "tce:<t>", "margin", "tmargin:<t>".
"""

from dataclasses import dataclass

import numpy as np

CE = "ce"
TARGETED_CE = "tce"
MARGIN = "margin"
TARGETED_MARGIN = "tmargin"


@dataclass(frozen=True)
class SurrogateLoss:
    kind: str
    target: int = None

    def __post_init__(self):
        if self.kind in (CE, MARGIN):
            if self.target is not None:
                raise ValueError(f"{self.kind} takes no target")
        elif self.kind in (TARGETED_CE, TARGETED_MARGIN):
            if self.target is None or self.target < 0:
                raise ValueError(f"{self.kind} needs a class target")
        else:
            raise ValueError(f"unknown loss kind {self.kind!r}")

    @property
    def ident(self):
        if self.target is None:
            return self.kind
        return f"{self.kind}:{self.target}"


def loss_from_ident(ident):
    """Inverse of SurrogateLoss.ident."""
    kind, _, t = ident.partition(":")
    return SurrogateLoss(kind, int(t) if t else None)


def build_family(n_classes):
    """The 2C+2 family: untargeted CE and margin, then per-class targeted
    variants in ascending target order (t = y members included; they are
    structural no-ops counted as failed attacks)."""
    if n_classes < 2:
        raise ValueError("need at least 2 classes")
    family = [SurrogateLoss(CE), SurrogateLoss(MARGIN)]
    family += [SurrogateLoss(TARGETED_CE, t) for t in range(n_classes)]
    family += [SurrogateLoss(TARGETED_MARGIN, t) for t in range(n_classes)]
    return family


def _check_label(label, n_classes, what):
    label = int(label)
    if not 0 <= label < n_classes:
        raise ValueError(f"{what} {label} out of range for {n_classes} classes")
    return label


def _log_softmax_parts(z):
    with np.errstate(over="ignore", invalid="ignore"):
        m = np.max(z)
        lse = m + np.log(np.sum(np.exp(z - m)))
        p = np.exp(z - lse)
    return lse, p


def eval_surrogate(loss, logits, y):
    """Loss value and its exact gradient with respect to the logits."""
    z = np.asarray(logits, dtype=np.float64)
    n = z.shape[0]
    y = _check_label(y, n, "label")
    onehot_y = np.zeros(n)
    onehot_y[y] = 1.0

    if loss.kind == CE:
        lse, p = _log_softmax_parts(z)
        return lse - z[y], p - onehot_y

    if loss.kind == TARGETED_CE:
        t = _check_label(loss.target, n, "target")
        lse, p = _log_softmax_parts(z)
        grad = -p
        grad[t] += 1.0
        return z[t] - lse, grad

    if loss.kind == MARGIN:
        masked = z.copy()
        masked[y] = -np.inf
        rival = int(np.argmax(masked))
        grad = -onehot_y
        grad[rival] += 1.0
        return z[rival] - z[y], grad

    t = _check_label(loss.target, n, "target")  # TARGETED_MARGIN
    grad = -onehot_y
    grad[t] += 1.0
    return z[t] - z[y], grad


def zero_one(predicted_label, y):
    """0 iff the prediction equals the label, else 1."""
    return 0 if int(predicted_label) == int(y) else 1
