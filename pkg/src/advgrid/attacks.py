"""PGD attack driver over any (perturbation set, surrogate loss) pair.

The iterate is the intensity delta for intensity sets and the flow field
for location sets; either way the update is: step along the norm-adapted
gradient direction, project back into the ball, clamp the image to [0,1].
Success, the loss variation delta-ell, and the per-iteration confidence
trace are always measured on the target model; only `grad_model` is ever
differentiated, which is what makes transfer attacks black-box.
"""

from dataclasses import dataclass, field

import numpy as np

from . import engine, losses, sets


@dataclass(frozen=True)
class AttackMethod:
    kind: str  # "whitebox" | "transfer"
    surrogate_id: str = None

    def __post_init__(self):
        if self.kind not in ("whitebox", "transfer"):
            raise ValueError(f"unknown attack method {self.kind!r}")
        if self.kind == "transfer" and not self.surrogate_id:
            raise ValueError("transfer attacks need a surrogate id")

    @property
    def ident(self):
        return self.kind if self.kind == "whitebox" else f"transfer:{self.surrogate_id}"


WHITE_BOX = AttackMethod("whitebox")


@dataclass(frozen=True)
class AttackConfig:
    pset: sets.PerturbationSet
    loss: losses.SurrogateLoss
    method: AttackMethod = WHITE_BOX
    steps: int = 20
    random_start: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")

    @property
    def alpha(self):
        # alpha = epsilon / K, the fixed-step schedule
        return self.pset.epsilon / self.steps

    def describe(self):
        return {
            "set": {
                "family": self.pset.family,
                "norm": self.pset.norm,
                "epsilon": self.pset.epsilon,
            },
            "loss": self.loss.ident,
            "method": self.method.ident,
            "steps": self.steps,
            "random_start": self.random_start,
            "seed": self.seed,
        }


@dataclass
class AttackOutcome:
    adversary: np.ndarray          # same shape as the clean input
    success: bool                  # 0-1 loss on the target model
    delta_ell: float               # CE(target(x'), y) - CE(target(x), y)
    trace: np.ndarray              # (K+1, C) target probabilities per iterate
    iterations_run: int
    perturbation: np.ndarray       # intensity delta or flow field
    error: str = None              # set when the attack aborted mid-run
    label: int = field(default=-1)


# fraction of coordinates carrying the l1 step; top-1 alone stalls on
# piecewise-linear landscapes, so the unit mass is spread over the top
# tenth of coordinates by |grad| (at least one)
L1_SUPPORT_FRACTION = 0.1


def step_direction(grad, norm, movable=None):
    """Norm-adapted ascent direction; zero gradient gives a zero step.

    The l1 step is a unit-l1-norm vector concentrated on the largest-|grad|
    coordinates (the top L1_SUPPORT_FRACTION of them, mass split equally;
    ties at the cut are broken toward lower flat index). `movable`, when
    given, masks out coordinates whose ascent direction is blocked (e.g.
    saturated against the [0,1] pixel clamp) so the sparse step is not
    wasted on them.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if norm == sets.LINF:
        return np.sign(grad)
    if norm == sets.L2:
        n = np.sqrt(np.sum(grad * grad))
        return grad / n if n > 0 else np.zeros_like(grad)
    if norm == sets.L1:
        a = np.abs(grad).ravel()
        if movable is not None:
            a = a * np.asarray(movable).ravel()
        k = max(1, int(np.ceil(L1_SUPPORT_FRACTION * a.size)))
        order = np.argsort(-a, kind="stable")[:k]
        chosen = order[a[order] > 0.0]
        direction = np.zeros(a.size)
        if chosen.size:
            direction[chosen] = np.sign(grad.ravel()[chosen]) / chosen.size
        return direction.reshape(grad.shape)
    raise ValueError(f"unknown norm {norm!r}")


def delta_ell(target_model, x, x_adv, y):
    """Cross-entropy variation on the target model (CE regardless of the
    attack's surrogate)."""
    ce = losses.SurrogateLoss(losses.CE)
    after, _ = losses.eval_surrogate(ce, target_model.logits(x_adv), y)
    before, _ = losses.eval_surrogate(ce, target_model.logits(x), y)
    return after - before


def _random_in_ball(rng, shape, norm, eps):
    draw = rng.uniform(-eps, eps, size=shape) if eps > 0 else np.zeros(shape)
    return sets.project_intensity(draw, norm, eps)


def _flow_gradient(grad_model, image, flow, loss, y):
    """(warped image, grad-model logits, dloss/dflow) at the current flow."""
    graph = engine.Graph()
    flow_node = graph.input(flow)
    scale = np.broadcast_to(
        np.array([image.shape[0] - 1.0, image.shape[1] - 1.0]), flow.shape
    )
    coords = engine.add(engine.mul(flow_node, scale), sets._base_grid(*image.shape))
    warped = engine.bilinear_sample(image, coords)
    z = grad_model.logits_node(graph, engine.reshape(warped, (image.size,)))
    _, gz = losses.eval_surrogate(loss, z.value, y)
    adj = graph.backward(z, gz)[flow_node.idx]
    return warped.value, z.value, adj if adj is not None else np.zeros_like(flow)


def _outcome(target_model, x, x_adv, y, trace, iterations, perturbation, error=None):
    success = losses.zero_one(target_model.predict(x_adv), y) == 1
    if error is not None:
        success = False
    return AttackOutcome(
        adversary=x_adv,
        success=success,
        delta_ell=delta_ell(target_model, x, x_adv, y),
        trace=np.asarray(trace),
        iterations_run=iterations,
        perturbation=perturbation,
        error=error,
        label=int(y),
    )


def pgd(grad_model, target_model, x, y, cfg):
    """Projected gradient ascent for all K steps (no early exit).

    `grad_model` is the target itself for white-box attacks and the
    surrogate for transfer attacks; it is the only model differentiated.
    A non-finite loss mid-attack is recorded in the outcome and counted
    as a failure rather than raised.
    """
    x = np.asarray(x, dtype=np.float64)
    y = int(y)
    eps = cfg.pset.epsilon
    alpha = cfg.alpha
    norm = cfg.pset.norm
    rng = np.random.default_rng(cfg.seed) if cfg.random_start else None

    if cfg.pset.family == sets.INTENSITY:
        xf = x.ravel()
        delta = (
            _random_in_ball(rng, xf.shape, norm, eps)
            if rng is not None
            else np.zeros_like(xf)
        )
        x_adv = sets.clamp_valid(xf + delta)
        white_box = grad_model is target_model
        trace = []
        for k in range(cfg.steps):
            try:
                graph = engine.Graph()
                x_node = graph.input(x_adv)
                z = grad_model.logits_node(graph, x_node)
                trace.append(
                    engine.softmax_values(z.value)
                    if white_box
                    else target_model.probs(x_adv)
                )
                _, gz = losses.eval_surrogate(cfg.loss, z.value, y)
                adj = graph.backward(z, gz)[x_node.idx]
                grad = adj if adj is not None else np.zeros_like(x_adv)
            except engine.NumericError as exc:
                return _outcome(
                    target_model, x, x_adv.reshape(x.shape), y, trace, k,
                    delta.reshape(x.shape), error=str(exc),
                )
            movable = ((grad > 0) & (x_adv < 1.0)) | ((grad < 0) & (x_adv > 0.0))
            direction = step_direction(grad, norm, movable=movable)
            delta = sets.project_intensity(x_adv + alpha * direction - xf, norm, eps)
            x_adv = sets.clamp_valid(xf + delta)
        trace.append(target_model.probs(x_adv))
        return _outcome(
            target_model, x, x_adv.reshape(x.shape), y, trace, cfg.steps,
            delta.reshape(x.shape),
        )

    # location family: the iterate is the flow field
    flow_shape = x.shape + (2,)
    flow = (
        _random_in_ball(rng, flow_shape, norm, eps)
        if rng is not None
        else np.zeros(flow_shape)
    )
    white_box = grad_model is target_model
    x_adv = sets.warp(x, flow)
    trace = []
    for k in range(cfg.steps):
        try:
            x_adv, z, grad = _flow_gradient(grad_model, x, flow, cfg.loss, y)
            trace.append(
                engine.softmax_values(z) if white_box else target_model.probs(x_adv)
            )
        except engine.NumericError as exc:
            return _outcome(target_model, x, x_adv, y, trace, k, flow, error=str(exc))
        direction = step_direction(grad, norm)
        flow = sets.project_flow(flow + alpha * direction, norm, eps)
    x_adv = sets.warp(x, flow)
    trace.append(target_model.probs(x_adv))
    return _outcome(target_model, x, x_adv, y, trace, cfg.steps, flow)
