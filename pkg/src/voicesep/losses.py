"""SI-SNR, permutation-invariant assignment, multi-scale and identity losses.

All losses are differentiable tensor functions; numpy arrays are accepted
and treated as constants. Both signals are mean-subtracted before SI-SNR,
and log arguments are floored at 1e-8 so a perfect estimate stays finite.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations
import warnings

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DegenerateTargetError, DimensionError, InputError

SNR_FLOOR = 1e-8


@dataclass
class PermutationAssignment:
    """Best channel-to-target mapping and its mean SI-SNR in dB."""
    perm: tuple          # estimate index for each target i: est[perm[i]]
    score: float         # mean SI-SNR over channels at this permutation

    def validate(self) -> None:
        if sorted(self.perm) != list(range(len(self.perm))):
            raise InputError(f"perm {self.perm} is not a bijection")


def si_snr(target, estimate) -> Tensor:
    """Scale-invariant SNR in dB (scalar tensor, differentiable).

    Projects the (mean-subtracted) estimate onto the target; the ratio of
    projection energy to residual energy gives the score. Invariant to any
    positive rescaling of the estimate.
    """
    s = ad.as_tensor(target)
    est = ad.as_tensor(estimate)
    if s.data.ndim != 1 or est.data.ndim != 1:
        raise DimensionError("si_snr: inputs must be 1-D waveforms")
    if s.shape != est.shape:
        raise DimensionError(
            f"si_snr: axis 0 mismatch ({s.shape[0]} vs {est.shape[0]})")
    s = ad.center(s)
    est = ad.center(est)
    s_energy = ad.dot(s, s)
    if s_energy.item() <= 0.0:
        raise DegenerateTargetError(
            "si_snr: zero-energy target; filter silent references upstream")
    coeff = ad.div(ad.dot(s, est), s_energy)
    s_proj = ad.smul(s, coeff)
    err = ad.sub(est, s_proj)
    num = ad.dot(s_proj, s_proj)
    den = ad.clamp_min(ad.dot(err, err), SNR_FLOOR)
    ratio = ad.clamp_min(ad.div(num, den), SNR_FLOOR)
    return ad.scale(ad.log10(ratio), 10.0)


def pairwise_matrix_tensors(targets, estimates) -> list:
    """C x C nested list of scalar tensors; entry [i][j] = si_snr(s_i, e_j)."""
    if len(targets) != len(estimates):
        raise InputError(
            f"pairwise matrix needs equal channel counts, got "
            f"{len(targets)} vs {len(estimates)}")
    return [[si_snr(s, e) for e in estimates] for s in targets]


def pairwise_matrix(targets, estimates) -> np.ndarray:
    """C x C dB matrix as plain floats."""
    m = pairwise_matrix_tensors(targets, estimates)
    return np.array([[cell.item() for cell in row] for row in m])


def best_permutation(score_matrix: np.ndarray) -> tuple:
    """Exhaustive search over C! permutations; ties broken toward the
    lexicographically smallest permutation."""
    c = score_matrix.shape[0]
    best, best_score = None, -np.inf
    for perm in permutations(range(c)):
        score = sum(score_matrix[i][perm[i]] for i in range(c)) / c
        if score > best_score:
            best, best_score = perm, score
    return best


def upit(targets, estimates, max_channels: int = 8):
    """Utterance-level permutation-invariant loss.

    Returns (loss tensor, PermutationAssignment). loss = -mean SI-SNR at
    the best permutation; gradients flow through the selected entries only.
    """
    c = len(targets)
    if c != len(estimates):
        raise InputError(f"upit: channel count mismatch ({c} vs "
                         f"{len(estimates)})")
    if c > max_channels:
        raise InputError(
            f"upit: brute force over {c}! permutations refused (C > "
            f"{max_channels})")
    cells = pairwise_matrix_tensors(targets, estimates)
    values = np.array([[cell.item() for cell in row] for row in cells])
    perm = best_permutation(values)
    picked = [cells[i][perm[i]] for i in range(c)]
    total = picked[0]
    for cell in picked[1:]:
        total = ad.add(total, cell)
    mean_score = ad.scale(total, 1.0 / c)
    loss = ad.scale(mean_score, -1.0)
    return loss, PermutationAssignment(perm=perm, score=mean_score.item())


def multiscale_loss(targets, output_groups):
    """Mean of per-group uPIT losses scaled by 1/b, b = 2 * group count.

    Each group picks its own optimal permutation. Returns
    (loss tensor, list of per-group PermutationAssignment).
    """
    if not output_groups:
        raise InputError("multiscale_loss: no output groups")
    n_groups = len(output_groups)
    b = 2 * n_groups
    total = None
    assignments = []
    for group in output_groups:
        if len(group) != len(targets):
            raise InputError(
                f"multiscale_loss: group has {len(group)} channels, "
                f"expected {len(targets)}")
        loss, assign = upit(targets, group)
        assignments.append(assign)
        total = loss if total is None else ad.add(total, loss)
    return ad.scale(total, 1.0 / b), assignments


def id_loss(targets, estimates, perm: PermutationAssignment, embedder,
            segment_s: float = 0.5):
    """Speaker-identity loss: MSE between embeddings of matched segments.

    Both signals are cut into non-overlapping `segment_s` windows from the
    start (remainder dropped); channel i of the targets is compared against
    estimate perm[i]. The embedder stays frozen; gradients reach the
    estimates through the differentiable spectrogram features.
    """
    c = len(targets)
    if c != len(estimates):
        raise InputError("id_loss: channel count mismatch")
    perm.validate()
    n = ad.as_tensor(targets[0]).shape[0]
    sr = embedder.config.sample_rate
    seg = int(round(segment_s * sr))
    n_seg = n // seg
    if n_seg == 0:
        warnings.warn("id_loss: utterance shorter than one segment; loss 0")
        return Tensor(np.zeros((), dtype=np.float32))
    total = None
    for i in range(c):
        s = ad.as_tensor(targets[i])
        e = ad.as_tensor(estimates[perm.perm[i]])
        for j in range(n_seg):
            lo, hi = j * seg, (j + 1) * seg
            g_ref = embedder.embed_tensor(ad.slice_rows(s, lo, hi))
            g_est = embedder.embed_tensor(ad.slice_rows(e, lo, hi))
            diff = ad.sub(g_est, g_ref.detach())
            mse = ad.tmean(ad.mul(diff, diff))
            total = mse if total is None else ad.add(total, mse)
    return ad.scale(total, 1.0 / (c * n_seg))
