"""Perturbation generators: random directions of fixed magnitude and DeepFool."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGradientError, InvalidArgumentError
from .network import Network, classify, logits_and_jacobian
from .tensor import Rng, l2_norm, random_unit_direction

DEFAULT_OVERSHOOT = 0.02
DEFAULT_MAX_ITER = 50

# Floor on |f_l| relative to the logit scale; lets a point sitting exactly on
# a decision boundary take a nonzero step.
_BOUNDARY_FLOOR = 1e-12


def random_perturbation(x, magnitude: float, rng: Rng) -> np.ndarray:
    if not magnitude > 0:
        raise InvalidArgumentError(f"magnitude must be positive, got {magnitude!r}")
    return magnitude * random_unit_direction(np.shape(x), rng)


@dataclass(frozen=True)
class PerturbationResult:
    input_id: int
    r: np.ndarray
    norm_r: float
    norm_x: float
    original_class: int
    perturbed_class: int
    iterations: int
    success: bool


def deepfool(net: Network, x, overshoot: float = DEFAULT_OVERSHOOT,
             max_iter: int = DEFAULT_MAX_ITER, clamp01: bool = False,
             input_id: int = 0) -> PerturbationResult:
    """Multiclass DeepFool in the Euclidean norm.

    Each step linearizes the classifier at ``x + (1 + overshoot) * r_total`` and
    moves to the nearest linearized boundary against the original class. Runs
    out of iterations return ``success=False`` rather than raising.
    """
    if overshoot < 0:
        raise InvalidArgumentError("overshoot must be >= 0")
    if max_iter < 1:
        raise InvalidArgumentError("max_iter must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    scale = 1.0 + overshoot

    def perturbed(r_tot):
        xp = x + scale * r_tot
        if clamp01:
            xp = np.clip(xp, 0.0, 1.0)
        return xp

    k0 = classify(net, x)
    r_tot = np.zeros_like(x)
    label = k0
    it = 0
    while label == k0 and it < max_iter:
        logits, jac = logits_and_jacobian(net, perturbed(r_tot))
        floor = _BOUNDARY_FLOOR * max(1.0, abs(float(logits[k0])))
        best = None
        for l in range(net.class_count):
            if l == k0:
                continue
            w = jac[l] - jac[k0]
            wn = l2_norm(w)
            if wn == 0.0:
                continue
            f = max(abs(float(logits[l] - logits[k0])), floor)
            dist = f / wn
            if best is None or dist < best[0]:
                best = (dist, f, wn, w)
        if best is None:
            raise DegenerateGradientError(
                f"input {input_id}: all class-difference gradients vanish")
        _, f, wn, w = best
        r_tot = r_tot + (f / (wn * wn)) * w
        it += 1
        label = classify(net, perturbed(r_tot))

    r = perturbed(r_tot) - x
    return PerturbationResult(
        input_id=input_id, r=r, norm_r=l2_norm(r), norm_x=l2_norm(x),
        original_class=k0, perturbed_class=label, iterations=it, success=label != k0)


@dataclass(frozen=True)
class MagnitudeProfile:
    """Per-input log10(||x|| / ||r||) with summary statistics."""

    values: dict
    minimum: float
    mean: float
    maximum: float
    excluded: int


def magnitude_profile(results) -> MagnitudeProfile:
    values = {}
    excluded = 0
    for res in results:
        if res.norm_r == 0.0 or res.norm_x == 0.0:
            excluded += 1
            continue
        values[res.input_id] = math.log10(res.norm_x / res.norm_r)
    if not values:
        raise InvalidArgumentError("no result has a nonzero perturbation")
    v = list(values.values())
    return MagnitudeProfile(values, min(v), math.fsum(v) / len(v), max(v), excluded)
