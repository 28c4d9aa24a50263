"""SI-SNR, utterance-level PIT loss and the SI-SNRi metric."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor

EPSILON = 1e-8
MAX_SOURCES = 6


class ZeroPowerReference(ValueError):
    pass


def _samples(x):
    return x.samples if hasattr(x, "samples") else x


def si_snr(estimate, reference, epsilon: float = EPSILON, zero_mean: bool = False) -> Tensor:
    """Scale-invariant SNR in dB along the last axis (broadcasts over leading axes).

    Follows the projection form without mean removal unless ``zero_mean`` is set.
    ``epsilon`` is added to both powers, so a perfect estimate gives a large
    finite value rather than +inf.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    est = ag.as_tensor(_samples(estimate))
    ref = ag.as_tensor(_samples(reference))
    if est.shape[-1] != ref.shape[-1]:
        raise ag.ShapeError(f"length mismatch: estimate {est.shape} vs reference {ref.shape}")
    if zero_mean:
        est = est - est.mean(axis=-1, keepdims=True)
        ref = ref - ref.mean(axis=-1, keepdims=True)
    ref_power = (ref * ref).sum(axis=-1, keepdims=True)
    if np.any(ref_power.data == 0):
        raise ZeroPowerReference("reference has zero power; the projection is undefined")
    target = (est * ref).sum(axis=-1, keepdims=True) / ref_power * ref
    noise = est - target
    ratio = ((target * target).sum(axis=-1) + epsilon) / ((noise * noise).sum(axis=-1) + epsilon)
    return ag.log10(ratio) * 10.0


@dataclass
class LossValue:
    value: Tensor
    chosen_permutation: tuple[int, ...] | list[tuple[int, ...]]

    def item(self) -> float:
        return self.value.item()


def pairwise_si_snr(estimates, references, epsilon: float = EPSILON, zero_mean: bool = False) -> Tensor:
    """``[..., i, j] = si_snr(estimate_i, reference_j)`` for ``(..., C, T)`` inputs."""
    est = ag.as_tensor(_samples(estimates))
    ref = ag.as_tensor(_samples(references))
    e = est.reshape(est.shape[:-1] + (1, est.shape[-1]))
    r = ref.reshape(ref.shape[:-2] + (1,) + ref.shape[-2:])
    return si_snr(e, r, epsilon, zero_mean)


def best_permutation(scores: np.ndarray) -> tuple[tuple[int, ...], float]:
    """Permutation maximising mean ``scores[i, perm[i]]``; ties keep the lexicographically first."""
    c = scores.shape[-1]
    rows = np.arange(c)
    best, best_score = None, -np.inf
    for perm in itertools.permutations(range(c)):
        s = scores[rows, list(perm)].mean()
        if s > best_score:
            best, best_score = perm, s
    return best, float(best_score)


def upit_loss(estimates, references, epsilon: float = EPSILON, zero_mean: bool = False) -> LossValue:
    """Negative SI-SNR under the best source assignment, one permutation per utterance.

    ``(C, T)`` inputs give one permutation; ``(N, C, T)`` inputs give the mean
    loss over the N utterances and a list of permutations. Gradients flow only
    through the chosen pairing.
    """
    est = ag.as_tensor(_samples(estimates))
    ref = np.asarray(_samples(references), dtype=np.float64) if not isinstance(references, Tensor) else references
    c = est.shape[-2]
    if c > MAX_SOURCES:
        raise ValueError(f"{c} sources: exhaustive permutation search refused above {MAX_SOURCES}")
    if ag.as_tensor(ref).shape != est.shape:
        raise ag.ShapeError(f"estimates {est.shape} vs references {ag.as_tensor(ref).shape}")
    scores = pairwise_si_snr(est, ref, epsilon, zero_mean)
    if est.ndim == 2:
        perm, _ = best_permutation(scores.data)
        picked = scores[np.arange(c), list(perm)]
        return LossValue(-picked.mean(), perm)
    perms = [best_permutation(s)[0] for s in scores.data]
    n = est.shape[0]
    rows = np.repeat(np.arange(n), c)
    cols_i = np.tile(np.arange(c), n)
    cols_j = np.array([j for p in perms for j in p])
    picked = scores[rows, cols_i, cols_j]
    return LossValue(-picked.mean(), perms)


def si_snri(estimate, reference, mixture, epsilon: float = EPSILON, zero_mean: bool = False) -> Tensor:
    """SI-SNR of the estimate minus SI-SNR of the unprocessed mixture."""
    return si_snr(estimate, reference, epsilon, zero_mean) - si_snr(mixture, reference, epsilon, zero_mean)


def permuted_si_snri(estimates, references, mixture, epsilon: float = EPSILON, zero_mean: bool = False) -> float:
    """Mean SI-SNRi over sources after uPIT alignment of ``(C, T)`` estimates (no gradient)."""
    est = np.asarray(ag.as_tensor(_samples(estimates)).data)
    ref = np.asarray(_samples(references), dtype=np.float64)
    mix = np.asarray(_samples(mixture), dtype=np.float64)
    perm, _ = best_permutation(pairwise_si_snr(est, ref, epsilon, zero_mean).data)
    improvements = si_snri(est, ref[list(perm)], mix[None, :], epsilon, zero_mean).data
    return float(improvements.mean())
