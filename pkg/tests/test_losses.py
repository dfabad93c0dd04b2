"""SI-SNR hand values, invariances, assignment cross-checks, loss wiring."""

import numpy as np
import pytest
from itertools import permutations
from scipy.optimize import linear_sum_assignment

import voicesep.autodiff as ad
from voicesep import losses
from voicesep.embedder import EmbedderConfig, init_embedder
from voicesep.errors import DegenerateTargetError, DimensionError, InputError


def test_si_snr_hand_value():
    # zero-mean version of the classic ([1,0], [1,1]) pair: the estimate's
    # projection onto the target leaves an error of equal energy -> 0 dB
    s2 = np.array([1.0, 0.0, -1.0, 0.0])
    e2 = np.array([1.0, 1.0, -1.0, -1.0])
    assert losses.si_snr(s2, e2).item() == pytest.approx(0.0, abs=1e-9)


def test_si_snr_orthogonal_minus_20db():
    rng = np.random.default_rng(0)
    s = rng.standard_normal(1024)
    s -= s.mean()
    noise = rng.standard_normal(1024)
    noise -= noise.mean()
    noise -= (noise @ s) / (s @ s) * s  # exactly orthogonal
    noise *= np.linalg.norm(s) * 10 / np.linalg.norm(noise)
    est = s + noise  # error energy = 100x target energy
    assert losses.si_snr(s, est).item() == pytest.approx(-20.0, abs=1e-6)


def test_si_snr_scale_invariance():
    rng = np.random.default_rng(1)
    s = rng.standard_normal(500)
    est = s + 0.1 * rng.standard_normal(500)
    base = losses.si_snr(s, est).item()
    for a in (1e-3, 0.5, 2.0, 1e3):
        assert abs(losses.si_snr(s, a * est).item() - base) <= 1e-6


def test_si_snr_mean_subtraction():
    rng = np.random.default_rng(2)
    s = rng.standard_normal(300)
    est = s + 0.2 * rng.standard_normal(300)
    with_dc = losses.si_snr(s + 5.0, est - 3.0).item()
    without = losses.si_snr(s, est).item()
    assert with_dc == pytest.approx(without, abs=1e-8)


def test_si_snr_perfect_estimate_is_floor_capped():
    s = np.sin(np.arange(100) * 0.1)
    v = losses.si_snr(s, s.copy()).item()
    assert np.isfinite(v) and v > 50


def test_si_snr_errors():
    with pytest.raises(DegenerateTargetError):
        losses.si_snr(np.zeros(10), np.ones(10))
    with pytest.raises(DimensionError):
        losses.si_snr(np.ones(10), np.ones(11))


def test_pairwise_matrix_matches_direct_calls():
    rng = np.random.default_rng(3)
    s = [rng.standard_normal(200) for _ in range(3)]
    est = [rng.standard_normal(200) for _ in range(3)]
    mat = losses.pairwise_matrix(s, est)
    for i in range(3):
        for j in range(3):
            assert mat[i, j] == losses.si_snr(s[i], est[j]).item()


def test_pairwise_matrix_identity_diagonal_dominates():
    rng = np.random.default_rng(4)
    s = [rng.standard_normal(100) for _ in range(3)]
    mat = losses.pairwise_matrix(s, s)
    for i in range(3):
        assert mat[i, i] == max(mat[i])


def test_upit_picks_swap():
    rng = np.random.default_rng(5)
    s = [rng.standard_normal(150) for _ in range(2)]
    loss, assign = losses.upit(s, [s[1], s[0]])
    assert assign.perm == (1, 0)
    assert assign.score == pytest.approx(-loss.item(), abs=1e-9)


def test_upit_invariant_to_estimate_shuffle():
    rng = np.random.default_rng(6)
    s = [rng.standard_normal(120) for _ in range(3)]
    est = [si + 0.3 * rng.standard_normal(120) for si in s]
    base = losses.upit(s, est)[0].item()
    for perm in permutations(range(3)):
        val = losses.upit(s, [est[p] for p in perm])[0].item()
        assert abs(val - base) <= 1e-9


def test_upit_matches_linear_sum_assignment():
    """Brute force against an independent assignment algorithm on 50
    random 4x4 score matrices: same argmax and value."""
    rng = np.random.default_rng(7)
    for _ in range(50):
        mat = rng.standard_normal((4, 4)) * 10
        perm = losses.best_permutation(mat)
        rows, cols = linear_sum_assignment(-mat)
        assert mat[np.arange(4), list(perm)].sum() == pytest.approx(
            mat[rows, cols].sum(), abs=1e-9)


def test_upit_refuses_large_c():
    s = [np.ones(10) for _ in range(9)]
    with pytest.raises(InputError):
        losses.upit(s, s)


def test_best_permutation_lexicographic_tiebreak():
    mat = np.zeros((2, 2))  # all permutations tie
    assert losses.best_permutation(mat) == (0, 1)


def test_multiscale_loss_scales_by_group_count():
    rng = np.random.default_rng(8)
    s = [rng.standard_normal(100) for _ in range(2)]
    est = [si + 0.5 * rng.standard_normal(100) for si in s]
    one, _ = losses.multiscale_loss(s, [est])
    two, assigns = losses.multiscale_loss(s, [est, est])
    # b = 2 * groups; two identical groups give the same per-group mean
    assert one.item() == pytest.approx(losses.upit(s, est)[0].item() / 2)
    assert two.item() == pytest.approx(one.item(), abs=1e-9)
    assert len(assigns) == 2


def test_multiscale_loss_independent_permutations():
    rng = np.random.default_rng(9)
    s = [rng.standard_normal(100) for _ in range(2)]
    est = [si + 0.2 * rng.standard_normal(100) for si in s]
    _, assigns = losses.multiscale_loss(s, [[est[1], est[0]], est])
    assert assigns[0].perm == (1, 0)
    assert assigns[1].perm == (0, 1)


def test_multiscale_loss_validates_channels():
    s = [np.ones(10), np.ones(10) * 2]
    with pytest.raises(InputError):
        losses.multiscale_loss(s, [[np.ones(10)]])


@pytest.fixture(scope="module")
def embedder():
    return init_embedder(EmbedderConfig(n_classes=4), seed=0)


def test_id_loss_zero_for_identical(embedder):
    rng = np.random.default_rng(10)
    s = [rng.standard_normal(4000).astype(np.float32) for _ in range(2)]
    perm = losses.PermutationAssignment(perm=(0, 1), score=0.0)
    val = losses.id_loss(s, [ad.Tensor(si.copy()) for si in s], perm,
                         embedder)
    assert val.item() == pytest.approx(0.0, abs=1e-10)


def test_id_loss_positive_and_differentiable(embedder):
    rng = np.random.default_rng(11)
    s = [rng.standard_normal(4000).astype(np.float32) * 0.3
         for _ in range(2)]
    ests = [ad.Tensor(si + 0.2 * rng.standard_normal(4000).astype(
        np.float32)) for si in s]
    for e in ests:
        e.requires_grad = True
    perm = losses.PermutationAssignment(perm=(0, 1), score=0.0)
    with ad.Tape() as tape:
        val = losses.id_loss(s, ests, perm, embedder)
        assert val.item() > 0
        tape.backward(val)
    assert ests[0].grad is not None and np.any(ests[0].grad != 0)


def test_id_loss_short_clip_warns_and_is_zero(embedder):
    s = [np.ones(1000, dtype=np.float32) for _ in range(2)]
    perm = losses.PermutationAssignment(perm=(0, 1), score=0.0)
    with pytest.warns(UserWarning):
        val = losses.id_loss(s, [ad.Tensor(si.copy()) for si in s], perm,
                             embedder)
    assert val.item() == 0.0


def test_id_loss_respects_permutation(embedder):
    rng = np.random.default_rng(12)
    s = [rng.standard_normal(4000).astype(np.float32) for _ in range(2)]
    swapped = [ad.Tensor(s[1].copy()), ad.Tensor(s[0].copy())]
    perm = losses.PermutationAssignment(perm=(1, 0), score=0.0)
    val = losses.id_loss(s, swapped, perm, embedder)
    assert val.item() == pytest.approx(0.0, abs=1e-10)
