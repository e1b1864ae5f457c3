"""Uniform fixed-point quantization of network inputs and bit-width sweeps."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .conditioning import parallel_map, product_bound
from .errors import InvalidArgumentError
from .network import Network, classify, forward
from .tensor import l2_norm

# Relative slack on the kappa comparison: kappa * (||dx||/||x||) recomputes
# ||dy||/||y|| only up to rounding.
KAPPA_SLACK = 1e-12
# Relative slack on the product-bound chain; covers power-iteration error.
CHAIN_SLACK = 1e-9


@dataclass(frozen=True)
class QuantSpec:
    """``2**bits`` evenly spaced levels from ``range_lo`` to ``range_hi`` inclusive;
    rounding is half-to-even on the level index."""

    bits: int
    range_lo: float
    range_hi: float

    def __post_init__(self):
        if not isinstance(self.bits, (int, np.integer)) or self.bits < 1:
            raise InvalidArgumentError(f"bits must be an integer >= 1, got {self.bits!r}")
        if not (math.isfinite(self.range_lo) and math.isfinite(self.range_hi)
                and self.range_lo < self.range_hi):
            raise InvalidArgumentError(
                f"need finite range_lo < range_hi, got [{self.range_lo}, {self.range_hi}]")

    @property
    def steps(self) -> float:
        return float(2 ** int(self.bits) - 1)

    @property
    def step(self) -> float:
        return (self.range_hi - self.range_lo) / self.steps

    @classmethod
    def from_data(cls, inputs, bits: int) -> "QuantSpec":
        """Range spanning the min and max over a whole corpus."""
        arr = np.concatenate([np.ravel(x) for x in inputs])
        lo, hi = float(arr.min()), float(arr.max())
        if lo == hi:
            lo, hi = lo - 0.5, hi + 0.5
        return cls(int(bits), lo, hi)


def quantize_input(x, spec: QuantSpec) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    lo, hi = spec.range_lo, spec.range_hi
    xc = np.clip(x, lo, hi)
    # Scale by the level count before dividing so dyadic midpoints stay exact.
    idx = np.rint((xc - lo) * spec.steps / (hi - lo))
    return np.clip(lo + idx * spec.step, lo, hi)


@dataclass
class SweepRow:
    bits: int
    step: float
    max_abs_error: float            # max over inputs of ||x_q - x||_inf
    step_bound: float               # step / 2
    mean_rel_input_error: float     # mean of ||dx|| / ||x||
    mean_rel_output_error: float    # mean of ||dy|| / ||y||
    misclassification_rate: float
    epsilon: float                  # 2**-bits, relative resolution of the format
    predicted_error: float          # epsilon * kappa_tilde
    kappa_within: int               # inputs with observed <= kappa_tilde * rel input error
    kappa_violations: int
    chain_violations: int           # inputs breaking the rigorous product-bound chain
    evaluated: int
    skipped: int
    per_input: list = field(default_factory=list, repr=False)


def _sweep_one(net, spec, pbound, kt, item):
    input_id, x = item
    nx = l2_norm(x)
    y = forward(net, x)
    ny = l2_norm(y)
    if nx == 0.0 or ny == 0.0:
        return None
    xq = quantize_input(x, spec)
    dx = xq - x
    ndx = l2_norm(dx)
    ndy = l2_norm(forward(net, xq) - y)
    rel_in = ndx / nx
    rel_out = ndy / ny
    predicted = kt[input_id] * rel_in
    chain = pbound * rel_in * (nx / ny)
    return {
        "input_id": input_id,
        "rel_input_error": rel_in,
        "rel_output_error": rel_out,
        "inf_error": float(np.max(np.abs(dx))),
        "misclassified": classify(net, xq) != classify(net, x),
        "kappa_prediction": predicted,
        "kappa_ok": rel_out <= predicted * (1.0 + KAPPA_SLACK),
        "chain_bound": chain,
        "chain_ok": rel_out <= chain * (1.0 + CHAIN_SLACK),
    }


def bit_sweep(net: Network, inputs, bits_list: Sequence[int], kappa_tilde,
              range_lo: float | None = None, range_hi: float | None = None,
              workers: int = 1, input_ids=None) -> list[SweepRow]:
    """Quantize every input at each bit width and compare observed output error
    with the kappa-based prediction and the product-bound chain.

    ``kappa_tilde`` is a scalar or one value per input. The range defaults to
    the corpus min/max.
    """
    xs = [np.asarray(x, dtype=np.float64) for x in inputs]
    if not xs:
        raise InvalidArgumentError("bit_sweep needs at least one input")
    ids = list(range(len(xs))) if input_ids is None else [int(i) for i in input_ids]
    if np.ndim(kappa_tilde) == 0:
        kt = {i: float(kappa_tilde) for i in ids}
        kt_global = float(kappa_tilde)
    else:
        vals = [float(k) for k in kappa_tilde]
        if len(vals) != len(xs):
            raise InvalidArgumentError("need one kappa_tilde per input")
        kt = dict(zip(ids, vals))
        kt_global = max(vals)
    pbound = product_bound(net).value
    rows = []
    for b in bits_list:
        if range_lo is None or range_hi is None:
            spec = QuantSpec.from_data(xs, int(b))
        else:
            spec = QuantSpec(int(b), float(range_lo), float(range_hi))
        res = parallel_map(lambda it: _sweep_one(net, spec, pbound, kt, it),
                           list(zip(ids, xs)), workers)
        done = [r for r in res if r is not None]
        n = len(done)

        def mean(key):
            return math.fsum(r[key] for r in done) / n if n else float("nan")

        eps = 2.0 ** -int(b)
        rows.append(SweepRow(
            bits=int(b), step=spec.step,
            max_abs_error=max((r["inf_error"] for r in done), default=0.0),
            step_bound=spec.step / 2,
            mean_rel_input_error=mean("rel_input_error"),
            mean_rel_output_error=mean("rel_output_error"),
            misclassification_rate=(sum(r["misclassified"] for r in done) / n) if n else float("nan"),
            epsilon=eps, predicted_error=eps * kt_global,
            kappa_within=sum(r["kappa_ok"] for r in done),
            kappa_violations=sum(not r["kappa_ok"] for r in done),
            chain_violations=sum(not r["chain_ok"] for r in done),
            evaluated=n, skipped=len(res) - n, per_input=done,
        ))
    return rows
