import numpy as np
import pytest

from protoreg.gradients import (
    TERM_CHECKS,
    ObjectiveState,
    breakdown_evaluator,
    build_state,
    chamfer_tie_margin,
    evaluate_objective,
    finite_diff_check,
    grad_total,
    term_evaluator,
)
from protoreg.grids import LabelVolume, OneHotMask, Volume, one_hot
from protoreg.losses import LossWeights, total_loss
from protoreg.warp import DisplacementField

DIMS = (6, 6, 6)


def rand_volume(seed, dims=DIMS):
    rng = np.random.default_rng(seed)
    return Volume(dims, (1, 1, 1), rng.normal(size=dims))


def soft_mask(seed, k=3, dims=DIMS):
    rng = np.random.default_rng(seed)
    ch = rng.uniform(0.05, 0.95, size=(k,) + dims)
    ch /= np.maximum(ch.sum(axis=0), 1.0)[None]
    return OneHotMask(dims, (1, 1, 1), ch)


def rand_field(seed, scale=0.3, offset=0.13, dims=DIMS):
    # offset keeps sample positions off the lattice planes where trilinear
    # interpolation is non-smooth
    rng = np.random.default_rng(seed)
    return DisplacementField(
        dims, (1, 1, 1), rng.uniform(-scale, scale, size=(3,) + dims) + offset
    )


@pytest.fixture(scope="module")
def state():
    return build_state(
        rand_volume(42), rand_volume(43), LossWeights(1, 4, 1, 1, 0.1),
        soft_mask(1), soft_mask(2), window=3, temperature=0.1, max_points=64, seed=3,
    )


def test_quadratic_loss_fd_exact():
    def quad(field, with_grad=True):
        value = float((field.u ** 2).sum())
        return value, (2.0 * field.u if with_grad else None)

    field = rand_field(1, scale=1.0)
    max_abs, max_rel = finite_diff_check(quad, field, probe_count=32, eps=1e-3, seed=0)
    assert max_rel < 1e-9     # FD of a quadratic is exact up to rounding


def tie_free_field(state, eps=1e-3, seeds=range(50)):
    """First seeded random field whose Chamfer nearest-neighbor margins stay
    clear of the probe step (documented non-smooth points are resampled)."""
    for seed in seeds:
        field = rand_field(seed)
        if chamfer_tie_margin(state, field) > 10 * eps:
            return field
    raise AssertionError("no tie-free field found")


@pytest.mark.parametrize("term", TERM_CHECKS)
def test_each_term_matches_finite_differences(state, term):
    field = tie_free_field(state) if term == "contour" else rand_field(7)
    ev = term_evaluator(state, term)
    _, max_rel = finite_diff_check(ev, field, probe_count=64, eps=1e-3, seed=11)
    assert max_rel < 1e-3


def test_smoothness_alone_tight():
    st = build_state(rand_volume(1, (5, 5, 5)), rand_volume(2, (5, 5, 5)),
                     LossWeights(0, 1, 0, 0, 0), window=3)
    ev = term_evaluator(st, "smooth")
    _, max_rel = finite_diff_check(ev, rand_field(5, dims=(5, 5, 5)),
                                   probe_count=64, eps=1e-3, seed=3)
    assert max_rel < 1e-5


def test_chamfer_alone_with_fixed_seeds(state):
    ev = term_evaluator(state, "contour")
    field = tie_free_field(state)
    _, max_rel = finite_diff_check(ev, field, probe_count=64, eps=1e-3, seed=13)
    assert max_rel < 1e-3


def test_chamfer_tie_detection_matches_fd_blowup(state):
    # seed 7 is a known near-tie instance: the margin detector flags it and
    # shrinking the probe below the margin restores quadratic convergence
    field = rand_field(7)
    assert chamfer_tie_margin(state, field) < 1e-2
    ev = term_evaluator(state, "contour")
    _, max_rel = finite_diff_check(ev, field, probe_count=64, eps=1e-5, seed=11)
    assert max_rel < 1e-3


def test_full_objective_matches_fd(state):
    field = rand_field(21)
    ev = breakdown_evaluator(state)
    _, max_rel = finite_diff_check(ev, field, probe_count=64, eps=1e-3, seed=17)
    assert max_rel < 1e-3


def test_gradient_linear_in_weights(state):
    field = rand_field(23)
    _, g_all = grad_total(state, field, LossWeights(1, 4, 1, 1, 0.1))
    combo = np.zeros_like(g_all)
    for name, w in (("sim", 1.0), ("smooth", 4.0), ("seg", 1.0),
                    ("prototype", 1.0), ("contour", 0.1)):
        single = LossWeights(**{n: 0.0 for n in ("sim", "smooth", "seg", "prototype", "contour")}
                             | {name: 1.0})
        _, g = grad_total(state, field, single)
        combo += w * g
    assert np.allclose(g_all, combo, atol=1e-10)


def test_zero_weights_zero_gradient(state):
    _, g = grad_total(state, rand_field(29), LossWeights(0, 0, 0, 0, 0))
    assert not g.any()


def test_gradient_zero_at_similarity_optimum():
    fixed = rand_volume(31)
    moving = Volume(DIMS, (1, 1, 1), fixed.data.copy())
    st = build_state(fixed, moving, LossWeights(1, 0, 0, 0, 0), window=3)
    bd, g = evaluate_objective(st, DisplacementField.zeros(DIMS))
    assert bd.values["sim"] == pytest.approx(-1.0, abs=1e-6)
    assert np.linalg.norm(g) < 1e-6


def test_smooth_terms_stationary_at_identity():
    # smooth-at-optimum terms: similarity, smoothness, alignment, contour.
    # The Dice term sits at a one-sided kink for exactly-hard masks and the
    # contrast term is not optimized by the identity, so neither is included.
    fixed = rand_volume(33, (8, 8, 8))
    moving = Volume((8, 8, 8), (1, 1, 1), fixed.data.copy())
    labels = np.zeros((8, 8, 8), np.int32)
    labels[1:4, 1:4, 1:4] = 1
    labels[5:7, 4:7, 2:5] = 2
    oh = one_hot(LabelVolume((8, 8, 8), (1, 1, 1), labels, 2))
    st = build_state(fixed, moving, LossWeights(1, 1, 1, 1, 1), oh, oh,
                     window=5, max_points=512, seed=0)
    zero = DisplacementField.zeros((8, 8, 8))
    for term in ("sim", "smooth", "align", "contour"):
        _, g = term_evaluator(st, term)(zero, True)
        assert np.linalg.norm(g) < 1e-6, term


def test_values_match_total_loss(state):
    field = rand_field(37)
    bd_grad, _ = evaluate_objective(state, field)
    bd_fwd = total_loss(
        state.fixed, state.moving, field, state.weights,
        state.fixed_onehot, state.moving_onehot,
        window=state.window, temperature=state.temperature,
        max_points=state.max_points, seed=state.seed,
    )
    for name in bd_fwd.values:
        assert bd_grad.values[name] == pytest.approx(bd_fwd.values[name], rel=1e-12, abs=1e-15)
    assert bd_grad.total == pytest.approx(bd_fwd.total, rel=1e-12)


def test_gradient_finite_everywhere(state):
    _, g = grad_total(state, rand_field(41, scale=3.0))
    assert np.isfinite(g).all()
    assert g.shape == (3,) + DIMS
