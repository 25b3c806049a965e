import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ptsg import model
from ptsg import tensorcore as tc
from ptsg.dataio import Corpus, GenConfig, generate_synthetic, simulate_partial_labels
from ptsg.losses import (
    ABLATIONS, LOSS_NAMES, ContrastSets, LossWeights, build_contrast_sets, l_erml, l_erun, l_grnd,
    l_raml, l_raun, total_implicit_loss,
)
from ptsg.tensorcore import constant
from ptsg.trainer import TrainConfig, implicit_loss_parts, init_implicit


def unit_at(cos, dim=2):
    """Vector whose cosine with e_0 is ``cos``."""
    v = np.zeros(dim)
    v[0], v[1] = cos, math.sqrt(1 - cos * cos)
    return v


E0 = np.array([1.0, 0.0])


# intra-sample hinges ----------------------------------------------------------


def test_raml_examples():
    assert l_raml(unit_at(0.9), unit_at(0.5), E0, 0.2).item() == pytest.approx(0.0, abs=1e-6)
    assert l_raml(unit_at(0.7), unit_at(0.8), E0, 0.2).item() == pytest.approx(0.3, abs=1e-6)
    v = np.array([0.3, -2.0, 1.0])
    for q in (np.array([1.0, 2.0, 3.0]), np.array([-5.0, 0.1, 0.0])):
        assert l_raml(v, v, q, 0.2).item() == pytest.approx(0.2, abs=1e-12)


def test_raun_examples():
    # S(ev, bg) and S(ev, vd) set by putting v_ev on e_0
    assert l_raun(E0, unit_at(0.1), unit_at(0.9), 0.2).item() == pytest.approx(0.0, abs=1e-6)
    assert l_raun(E0, unit_at(0.6), unit_at(0.5), 0.2).item() == pytest.approx(0.3, abs=1e-6)
    w = np.array([1.0, 4.0])
    assert l_raun(np.array([2.0, -1.0]), w, w, 0.2).item() == pytest.approx(0.2, abs=1e-12)


def test_hinges_inactive_gradient_is_exactly_zero():
    assert tc.grad_check(lambda v: l_raml(v, unit_at(0.5), E0, 0.2), [unit_at(0.9)]) == 0.0


# contrast sets ----------------------------------------------------------------


def test_contrast_sets_definition():
    sets = build_contrast_sets(["a", "a", "b", "b"])
    assert sets.positives(0) == {0, 1} and sets.negatives(0) == {2, 3}
    assert sets.positives(0, uni=True) == {1}
    for i in range(4):
        for uni in (False, True):
            assert not sets.positives(i, uni) & sets.negatives(i, uni)


def test_contrast_sets_need_a_peer_for_uni():
    with pytest.raises(ValueError):
        build_contrast_sets([0, 0, 1])
    build_contrast_sets([0, 0, 1], require_uni=False)


# inter-sample InfoNCE -----------------------------------------------------------


def test_erml_symmetric_logits():
    v = np.array([[1.0, 1.0, 0.0], [1.0, 1.0, 0.0]])
    q = np.eye(3)[:2]
    sets = build_contrast_sets([0, 1], require_uni=False)
    assert l_erml(v, q, sets, 0.1).item() == pytest.approx(math.log(2), abs=1e-6)
    assert l_erml(v, q, sets, 0.1).item() == pytest.approx(0.693147, abs=1e-6)


def test_erml_worked_example():
    c = math.sqrt(1 - 0.68)
    v = np.array([[0.8, 0.2, c], [0.2, 0.8, c]])
    q = np.eye(3)[:2]
    sets = build_contrast_sets([0, 1], require_uni=False)
    assert l_erml(v, q, sets, 0.1).item() == pytest.approx(0.002476, abs=1e-6)


def test_erun_worked_example():
    x, y = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    ev = np.stack([x, x, y, y])
    # each event: one identical positive, one orthogonal negative
    pos = np.zeros((4, 4), bool)
    neg = np.zeros((4, 4), bool)
    for i, (p, n) in enumerate([(1, 2), (0, 3), (3, 0), (2, 1)]):
        pos[i, p], neg[i, n] = True, True
    sets = ContrastSets(pos | np.eye(4, dtype=bool), neg, pos, neg)
    assert l_erun(ev, sets, 1.0).item() == pytest.approx(0.313262, abs=1e-6)


def test_no_negatives_gives_zero():
    rng = np.random.default_rng(0)
    v, q = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    sets = build_contrast_sets([7, 7, 7, 7])
    assert l_erml(v, q, sets, 0.1).item() == pytest.approx(0.0, abs=1e-12)
    assert l_erun(v, sets, 0.1).item() == pytest.approx(0.0, abs=1e-12)


def test_erun_permutation_invariant():
    rng = np.random.default_rng(1)
    ev = rng.normal(size=(6, 4))
    tags = np.array([0, 1, 0, 2, 1, 2])
    perm = rng.permutation(6)
    a = l_erun(ev, build_contrast_sets(tags), 0.3).item()
    b = l_erun(ev[perm], build_contrast_sets(tags[perm]), 0.3).item()
    assert a == pytest.approx(b, abs=1e-12)


@pytest.mark.parametrize("c", [0.5, 3.0])
def test_infonce_scale_invariance(c):
    rng = np.random.default_rng(2)
    v, q = rng.normal(size=(6, 5)), rng.normal(size=(6, 5))
    sets = build_contrast_sets([0, 0, 1, 1, 2, 2])
    scaled = v.copy()
    scaled[3] *= c
    assert abs(l_erml(scaled, q, sets, 0.1).item() - l_erml(v, q, sets, 0.1).item()) <= 1e-10
    assert abs(l_erun(scaled, sets, 0.1).item() - l_erun(v, sets, 0.1).item()) <= 1e-10
    assert abs(l_erml(v * c, q * c, sets, 0.1).item() - l_erml(v, q, sets, 0.1).item()) <= 1e-10


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.05, 2.0))
def test_losses_non_negative(seed, tau):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(4, 3))
    q = rng.normal(size=(4, 3))
    sets = build_contrast_sets(rng.permutation([0, 0, 1, 1]))
    assert l_erml(v, q, sets, tau).item() >= -1e-12
    assert l_erun(v, sets, tau).item() >= -1e-12
    assert l_raml(v, v[::-1], q, 0.2).item() >= 0
    assert l_raun(v, q, v[::-1], 0.2).item() >= 0


# grounding hinge ----------------------------------------------------------------


def test_grnd_examples():
    assert l_grnd([2.0], [7.0], [3.0], [5.0]).item() == 0.0
    assert l_grnd([4.0], [6.0], [3.0], [5.0]).item() == pytest.approx(1.0, abs=1e-6)
    assert l_grnd([5.0], [9.0], [5.0], [5.0]).item() == 0.0


def test_grnd_zero_iff_contained():
    rng = np.random.default_rng(0)
    n = 10_000
    # a coarse grid makes exact boundary coincidences common
    pts = rng.integers(0, 12, size=(n, 4)) / 2.0
    pred, clip = np.sort(pts[:, :2], axis=1), np.sort(pts[:, 2:], axis=1)
    vals = np.array([l_grnd(p[:1], p[1:], c[:1], c[1:]).item() for p, c in zip(pred, clip)])
    contained = (pred[:, 0] <= clip[:, 0]) & (clip[:, 1] <= pred[:, 1])
    assert np.array_equal(vals == 0.0, contained)
    assert np.all(vals >= 0)
    assert 0.05 < contained.mean() < 0.95


# aggregation -------------------------------------------------------------------


def test_total_examples():
    w = LossWeights(lam=2.0, gamma=3.0)
    parts = {k: constant(1.0) for k in (*LOSS_NAMES, "grnd")}
    assert total_implicit_loss(parts, w).item() == pytest.approx(9.0)
    zero = {k: constant(0.0) for k in parts}
    assert total_implicit_loss(zero, LossWeights()).item() == 0.0
    a2 = LossWeights(lam=0.0, gamma=0.0)
    assert total_implicit_loss(parts, a2).item() == pytest.approx(2.0)


def test_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(tau=0.0)
    with pytest.raises(ValueError):
        LossWeights(alpha=-0.1)


# full objective gradient and ablation wiring ------------------------------------------


@pytest.fixture(scope="module")
def tiny():
    c = generate_synthetic(GenConfig(num_samples=4, T=8, dim_video=4, dim_query=3, dim_sentence=0,
                                     n_clusters=2, event_len=(2, 5), num_tokens=2, seed=5))
    return simulate_partial_labels(c, "uniform", 1.0, seed=0)


CFG = TrainConfig(dim=4, hidden=5, bins=3, weights=LossWeights(tau=0.5))
TAGS = [0, 0, 1, 1]


def _objective(corpus: Corpus, cfg: TrainConfig):
    names = sorted(init_implicit(corpus, cfg))

    def fn(*leaves):
        parts = implicit_loss_parts(dict(zip(names, leaves)), list(corpus), TAGS, cfg)
        return total_implicit_loss(parts, cfg.weights)

    return names, fn


def test_full_objective_grad_check(tiny):
    names, fn = _objective(tiny, CFG)
    worst, checked = 0.0, 0
    for seed in range(40):
        params = init_implicit(tiny, TrainConfig(**{**CFG.__dict__, "seed": seed}))
        try:
            worst = max(worst, tc.grad_check(fn, [params[k] for k in names]))
        except tc.KinkError:
            continue
        checked += 1
        if checked == 20:
            break
    assert checked == 20
    assert worst < 1e-4


def _live_parts(tiny, losses_on):
    """Contrastive parts whose own gradient reaches the parameters."""
    cfg = TrainConfig(**{**CFG.__dict__, "losses": losses_on})
    params = init_implicit(tiny, cfg)
    tape = tc.Tape()
    P = model.on_tape(tape, params)
    parts = implicit_loss_parts(P, list(tiny), TAGS, cfg)

    def flat(root):
        g = tape.backward(root)
        return np.concatenate([tc.grad_of(g, P[k]).ravel() for k in sorted(P)])

    per_part = {n: flat(t) for n, t in parts.items()}
    w = cfg.weights
    scale = {"raml": 1.0, "raun": 1.0, "erml": w.lam, "erun": w.lam, "grnd": w.gamma}
    expected = sum(scale[n] * g for n, g in per_part.items())
    np.testing.assert_allclose(flat(total_implicit_loss(parts, w)), expected, atol=1e-12)
    return {n for n, g in per_part.items() if n != "grnd" and np.any(g != 0)}


@pytest.mark.parametrize("row", sorted(ABLATIONS))
def test_ablation_wiring(tiny, row):
    assert _live_parts(tiny, ABLATIONS[row]) == set(ABLATIONS[row])


def test_ablation_rows_match_table():
    assert ABLATIONS == {
        "A1": ("raml",), "A2": ("raml", "raun"), "A3": ("raml", "erml"),
        "A4": ("raml", "raun", "erml"), "A5": ("raml", "erml", "erun"),
        "A6": ("raml", "raun", "erml", "erun"),
    }
