import numpy as np
import pytest

from advgrid import attacks, engine, losses, models, sets

CE = losses.SurrogateLoss("ce")


def cfg_for(family, norm, eps, **kw):
    return attacks.AttackConfig(
        sets.PerturbationSet(family, norm, eps), CE, **kw
    )


class TestStepDirection:
    def test_linf_sign(self):
        out = attacks.step_direction(np.array([0.5, -2.0]), "linf")
        assert np.array_equal(out, [1.0, -1.0])

    def test_l2_normalize(self):
        out = attacks.step_direction(np.array([3.0, 4.0]), "l2")
        assert np.allclose(out, [0.6, 0.8], atol=1e-12)

    def test_l1_top_coordinate(self):
        out = attacks.step_direction(np.array([0.5, -2.0]), "l1")
        assert np.array_equal(out, [0.0, -1.0])

    def test_l1_unit_norm_and_sparsity(self, rng):
        grad = rng.normal(size=100)
        out = attacks.step_direction(grad, "l1")
        assert abs(np.sum(np.abs(out)) - 1.0) < 1e-12
        assert np.count_nonzero(out) == 10  # ceil(0.1 * 100)
        # support carries the largest |grad| entries
        support = np.abs(grad)[out != 0].min()
        rest = np.abs(grad)[out == 0].max()
        assert support >= rest

    def test_l1_movable_mask(self):
        grad = np.array([5.0, 1.0])
        out = attacks.step_direction(grad, "l1", movable=np.array([False, True]))
        assert np.array_equal(out, [0.0, 1.0])

    def test_zero_gradient(self):
        for norm in sets.NORMS:
            out = attacks.step_direction(np.zeros(4), norm)
            assert np.array_equal(out, np.zeros(4))

    def test_l1_steepest_over_unit_ball(self, rng):
        # the step maximizes g . d over unit-l1 vectors on its support
        grad = rng.normal(size=20)
        d = attacks.step_direction(grad, "l1")
        assert np.dot(grad, d) > 0
        top = np.argmax(np.abs(grad))
        vertex = np.zeros(20)
        vertex[top] = np.sign(grad[top])
        # top-k averaging gives at most the single-vertex value
        assert np.dot(grad, d) <= np.dot(grad, vertex) + 1e-12


class TestDeltaEll:
    def test_zero_at_same_point(self, tiny_model, tiny_test):
        x = tiny_test.inputs[0]
        assert attacks.delta_ell(tiny_model, x, x, 0) == 0.0

    def test_antisymmetric(self, tiny_model, tiny_test, rng):
        x = tiny_test.inputs[0]
        x2 = np.clip(x + rng.normal(scale=0.05, size=x.shape), 0, 1)
        a = attacks.delta_ell(tiny_model, x, x2, 1)
        b = attacks.delta_ell(tiny_model, x2, x, 1)
        assert abs(a + b) < 1e-12


@pytest.fixture(scope="module")
def sample(tiny_test):
    return tiny_test.inputs[0], int(tiny_test.labels[0])


ALL_SETS = [(f, n) for f in sets.FAMILIES for n in sets.NORMS]


class TestPGD:
    def test_zero_budget_identity(self, tiny_model, sample):
        x, y = sample
        out = attacks.pgd(tiny_model, tiny_model, x, y, cfg_for("intensity", "linf", 0.0, steps=3))
        assert np.array_equal(out.adversary, x)
        clean_wrong = tiny_model.predict(x) != y
        assert out.success == clean_wrong
        assert out.delta_ell == 0.0

    def test_zero_budget_never_flips(self, tiny_model, tiny_test):
        for x, y in zip(tiny_test.inputs[:6], tiny_test.labels[:6]):
            out = attacks.pgd(
                tiny_model, tiny_model, x, int(y),
                cfg_for("intensity", "linf", 0.0, steps=2),
            )
            assert tiny_model.predict(out.adversary) == tiny_model.predict(x)

    @pytest.mark.parametrize("family,norm", ALL_SETS)
    def test_ball_containment(self, tiny_model, sample, family, norm):
        x, y = sample
        out = attacks.pgd(tiny_model, tiny_model, x, y, cfg_for(family, norm, 0.3, steps=5))
        assert sets.lp_norm(out.perturbation, norm) <= 0.3 + 1e-9
        assert np.all(out.adversary >= 0.0) and np.all(out.adversary <= 1.0)
        if family == "intensity":
            assert out.perturbation.shape == x.shape
        else:
            assert out.perturbation.shape == x.shape + (2,)

    @pytest.mark.parametrize("family,norm", ALL_SETS)
    def test_trace_shape_and_iterations(self, tiny_model, sample, family, norm):
        x, y = sample
        steps = 4
        out = attacks.pgd(tiny_model, tiny_model, x, y, cfg_for(family, norm, 0.1, steps=steps))
        assert out.trace.shape == (steps + 1, 3)
        assert out.iterations_run == steps
        assert np.allclose(out.trace.sum(axis=1), 1.0, atol=1e-9)

    def test_success_flag_recomputed(self, tiny_model, tiny_test):
        cfg = cfg_for("intensity", "linf", 0.3, steps=5)
        for x, y in zip(tiny_test.inputs[:8], tiny_test.labels[:8]):
            out = attacks.pgd(tiny_model, tiny_model, x, int(y), cfg)
            expected = losses.zero_one(tiny_model.predict(out.adversary), int(y)) == 1
            assert out.success == expected

    def test_determinism(self, tiny_model, sample):
        x, y = sample
        cfg = cfg_for("intensity", "l2", 0.5, steps=5, random_start=True, seed=11)
        a = attacks.pgd(tiny_model, tiny_model, x, y, cfg)
        b = attacks.pgd(tiny_model, tiny_model, x, y, cfg)
        assert a.adversary.tobytes() == b.adversary.tobytes()
        assert a.trace.tobytes() == b.trace.tobytes()
        assert a.delta_ell == b.delta_ell

    def test_transfer_never_differentiates_target(self, tiny_model, tiny_train, sample):
        spec = models.ModelSpec(8, 8, init_seed=5)
        surrogate = models.train_standard(spec, tiny_train, epochs=3, lr=0.5, seed=5).model()
        x, y = sample
        calls = []
        original = tiny_model.logits_node
        tiny_model.logits_node = lambda *a, **k: calls.append(1) or original(*a, **k)
        try:
            for family, norm in ALL_SETS:
                attacks.pgd(surrogate, tiny_model, x, y, cfg_for(family, norm, 0.2, steps=3))
        finally:
            tiny_model.logits_node = original
        assert calls == []

    def test_whitebox_calibrated_attack_succeeds(self, tiny_model, tiny_test):
        # generous budget: the undefended tiny model should fall on most samples
        cfg = cfg_for("intensity", "linf", 0.5, steps=20)
        wins = sum(
            attacks.pgd(tiny_model, tiny_model, x, int(y), cfg).success
            for x, y in zip(tiny_test.inputs, tiny_test.labels)
        )
        assert wins / len(tiny_test) > 0.7

    def test_numeric_error_recorded(self, sample):
        spec = models.ModelSpec(8, 8, hidden=(4,))
        broken = models.MLPClassifier(spec)
        broken.layers = [
            (np.full((4, 64), 1e200), np.zeros(4)),
            (np.full((3, 4), 1e200), np.zeros(3)),
        ]
        x, y = sample
        out = attacks.pgd(broken, broken, x, y, cfg_for("intensity", "linf", 0.1, steps=3))
        assert out.error is not None
        assert out.success is False

    def test_random_start_inside_ball(self, tiny_model, sample):
        x, y = sample
        for norm in sets.NORMS:
            cfg = cfg_for("intensity", norm, 0.2, steps=1, random_start=True, seed=3)
            out = attacks.pgd(tiny_model, tiny_model, x, y, cfg)
            assert sets.lp_norm(out.perturbation, norm) <= 0.2 + 1e-9


class TestAttackConfig:
    def test_alpha_is_eps_over_k(self):
        cfg = cfg_for("intensity", "linf", 0.25, steps=20)
        assert cfg.alpha * cfg.steps == 0.25

    def test_steps_positive(self):
        with pytest.raises(ValueError):
            cfg_for("intensity", "linf", 0.1, steps=0)

    def test_describe(self):
        cfg = cfg_for("location", "l1", 0.5, steps=7)
        d = cfg.describe()
        assert d["set"] == {"family": "location", "norm": "l1", "epsilon": 0.5}
        assert d["loss"] == "ce" and d["steps"] == 7
        assert d["method"] == "whitebox"


class TestAttackMethod:
    def test_idents(self):
        assert attacks.WHITE_BOX.ident == "whitebox"
        assert attacks.AttackMethod("transfer", "s2").ident == "transfer:s2"

    def test_transfer_requires_surrogate(self):
        with pytest.raises(ValueError):
            attacks.AttackMethod("transfer")

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            attacks.AttackMethod("graybox")


def test_toy_single_step_geometry():
    """One sign-step on the 3-class toy weights keeps the point in class 0
    while the linf ball still contains class-2 points."""
    W = np.array([[0.2, 0.8], [0.9, 0.4], [0.3, 0.9]])
    x = np.array([-0.5, 0.45])
    z = W @ x
    assert int(np.argmax(z)) == 0
    _, gz = losses.eval_surrogate(CE, z, 0)
    grad_x = W.T @ gz
    step = attacks.step_direction(grad_x, "linf")
    x1 = x + 0.2 * step
    assert step[0] > 0 and step[1] < 0  # ascent moves toward (+, -)
    assert int(np.argmax(W @ x1)) == 0  # CE ascent stays correctly classified
    assert int(np.argmax(W @ (x + np.array([0.2, 0.2])))) == 2  # but the ball is unsafe
