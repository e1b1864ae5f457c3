"""Perturbation-amplification bounds and the empirical condition number.

For an input ``x`` and perturbation ``dx``::

    kappa = (||dy|| / ||y||) / (||dx|| / ||x||),   dy = F(x + dx) - F(x)

where ``F`` maps to pre-softmax logits. Every elementwise activation used here
is 1-Lipschitz, so each weight layer amplifies ``||dx||`` by at most its
operator norm and the whole network by at most the product of those norms.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DegenerateOutputError, EmptyResultError, InvalidArgumentError
from .network import Conv2D, Dense, Network, forward
from .tensor import DEFAULT_MAX_ITER, DEFAULT_TOL, l2_norm, operator_norm_of_map, spectral_norm

FLOAT32_EPS = 2.0 ** -23


def parallel_map(fn, items, workers: int = 1) -> list:
    """Ordered map; ``workers > 1`` uses a thread pool. Output order never depends on it."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


@dataclass(frozen=True)
class LayerBound:
    layer_index: int
    kind: str
    operator_norm: float
    converged: bool = True


@dataclass(frozen=True)
class NetworkBound:
    value: float
    converged: bool

    def __float__(self):
        return self.value


def layer_bounds(net: Network, tol: float = DEFAULT_TOL,
                 max_iter: int = DEFAULT_MAX_ITER) -> list[LayerBound]:
    """Operator 2-norm of every layer's linear part.

    Dense and conv2d layers get a power-iteration estimate (bias excluded).
    Activations, flatten and pooling layers are recorded as 1.
    """
    out = []
    for i, layer in enumerate(net.layers):
        if isinstance(layer, Dense):
            est = spectral_norm(layer.weight, tol, max_iter)
        elif isinstance(layer, Conv2D):
            in_shape = net.shapes[i]
            est = operator_norm_of_map(layer.linear,
                                       lambda g, s=in_shape, c=layer: c.linear_adjoint(g, s),
                                       in_shape, tol, max_iter)
        else:
            out.append(LayerBound(i, layer.kind, 1.0, True))
            continue
        out.append(LayerBound(i, layer.kind, est.value, est.converged))
    return out


def _as_bounds(source) -> list[LayerBound]:
    if isinstance(source, Network):
        return layer_bounds(source)
    bounds = list(source)
    if not bounds:
        raise InvalidArgumentError("no layer bounds given")
    if not isinstance(bounds[0], LayerBound):
        bounds = [LayerBound(i, "dense", float(v)) for i, v in enumerate(bounds)]
    return bounds


def stage_norms(source) -> tuple[list[float], bool]:
    """Collapse layer bounds into one factor per weight layer.

    Each dense/conv2d layer opens a stage; the activations, pools and flattens
    that follow it multiply into that stage. Leading parameter-free layers fold
    into the first stage. A network without weight layers is a single stage.
    """
    bounds = _as_bounds(source)
    stages: list[float] = []
    pending = 1.0
    for b in bounds:
        if b.kind in ("dense", "conv2d"):
            stages.append(pending * b.operator_norm)
            pending = 1.0
        elif stages:
            stages[-1] *= b.operator_norm
        else:
            pending *= b.operator_norm
    if not stages:
        stages = [pending]
    return stages, all(b.converged for b in bounds)


def product_bound(source) -> NetworkBound:
    """Upper bound on ||dy|| / ||dx||: the product of all layer norms.

    ``source`` is a :class:`Network`, a list of :class:`LayerBound`, or a plain
    list of per-layer norms ordered from the input side.
    """
    stages, ok = stage_norms(source)
    return NetworkBound(math.prod(stages), ok)


def cumulative_bound(source) -> NetworkBound:
    """Sum over layers i of the product of norms from layer i to the output.

    Models a fresh perturbation entering at every layer: the perturbation after
    the last layer is scaled only by that layer, the one after the first layer
    by all of them.
    """
    stages, ok = stage_norms(source)
    total = 0.0
    suffix = 1.0
    for s in reversed(stages):
        suffix *= s
        total += suffix
    return NetworkBound(total, ok)


@dataclass(frozen=True)
class KappaRecord:
    input_id: int
    norm_x: float
    norm_dx: float
    norm_y: float
    norm_dy: float
    kappa: float
    trial: int = 0


def kappa(net: Network, x, dx, input_id: int = 0, trial: int = 0) -> KappaRecord:
    x = np.asarray(x, dtype=np.float64)
    dx = np.asarray(dx, dtype=np.float64)
    nx, ndx = l2_norm(x), l2_norm(dx)
    if nx == 0.0 or ndx == 0.0:
        raise InvalidArgumentError("kappa needs nonzero x and dx")
    y = forward(net, x)
    dy = forward(net, x + dx) - y
    ny, ndy = l2_norm(y), l2_norm(dy)
    if ny == 0.0:
        raise DegenerateOutputError(f"input {input_id}: output has zero norm")
    k = (ndy / ny) / (ndx / nx)
    return KappaRecord(input_id, nx, ndx, ny, ndy, k, trial)


# (input_id, x, trial) -> dx, or None to skip that trial
PerturbationSource = Callable[[int, np.ndarray, int], "np.ndarray | None"]


@dataclass
class KappaMaxResult:
    records: list[KappaRecord]          # per-input maximum, sorted by input_id
    trials: dict = field(default_factory=dict)  # input_id -> every KappaRecord
    skipped: list[int] = field(default_factory=list)
    sample_count: int = 0

    @property
    def global_max(self) -> KappaRecord:
        return max(self.records, key=lambda r: r.kappa)

    @property
    def kappas(self) -> list[float]:
        return [r.kappa for r in self.records]


def _kappa_one_input(net, source, trials_per_input, item):
    input_id, x = item
    recs = []
    if l2_norm(x) == 0.0:
        return input_id, []
    try:
        for t in range(trials_per_input):
            dx = source(input_id, x, t)
            if dx is None or l2_norm(dx) == 0.0:
                continue
            recs.append(kappa(net, x, dx, input_id, t))
    except DegenerateOutputError:
        return input_id, []
    return input_id, recs


def kappa_max(net: Network, inputs: Iterable, perturbation_source: PerturbationSource,
              trials_per_input: int = 1, workers: int = 1,
              input_ids: Sequence[int] | None = None) -> KappaMaxResult:
    """Sampled maximum of kappa per input over ``trials_per_input`` perturbations.

    Inputs with zero output (or no usable perturbation) are skipped and listed
    in ``skipped``; if all are skipped, :class:`EmptyResultError` is raised.
    """
    if trials_per_input < 1:
        raise InvalidArgumentError("trials_per_input must be >= 1")
    xs = [np.asarray(x, dtype=np.float64) for x in inputs]
    ids = list(range(len(xs))) if input_ids is None else [int(i) for i in input_ids]
    items = list(zip(ids, xs))
    results = parallel_map(lambda it: _kappa_one_input(net, perturbation_source,
                                                       trials_per_input, it),
                           items, workers)
    out = KappaMaxResult(records=[])
    for input_id, recs in sorted(results, key=lambda r: r[0]):
        if not recs:
            out.skipped.append(input_id)
            continue
        out.trials[input_id] = recs
        out.sample_count += len(recs)
        # max() keeps the first maximal trial on ties.
        out.records.append(max(recs, key=lambda r: r.kappa))
    if not out.records:
        raise EmptyResultError(f"all {len(items)} inputs were degenerate or skipped")
    return out


@dataclass(frozen=True)
class PrecisionStat:
    kappa: float
    minimum_digits: float
    minimum_bits: int
    expected_output_error: float


@dataclass(frozen=True)
class PrecisionReport:
    mean: PrecisionStat
    max: PrecisionStat
    min: PrecisionStat
    sample_count: int
    machine_epsilon_used: float

    @property
    def mean_kappa(self):
        return self.mean.kappa

    @property
    def max_kappa(self):
        return self.max.kappa

    @property
    def min_kappa(self):
        return self.min.kappa


def minimum_digits(k: float) -> float:
    return math.log10(k)


def minimum_bits(k: float) -> int:
    return math.ceil(math.log2(k)) + 1


def precision_stat(k: float, epsilon: float = FLOAT32_EPS) -> PrecisionStat:
    if not k > 0:
        raise InvalidArgumentError(f"kappa must be positive, got {k!r}")
    return PrecisionStat(k, minimum_digits(k), minimum_bits(k), epsilon * k)


def precision_report(kappas: Sequence[float], epsilon: float = FLOAT32_EPS) -> PrecisionReport:
    """Digits and bits needed on the input for the mean, max and min kappa."""
    ks = [float(k) for k in kappas]
    if not ks:
        raise InvalidArgumentError("precision_report needs at least one kappa")
    bad = [k for k in ks if not k > 0]
    if bad:
        raise InvalidArgumentError(f"kappa values must be positive, got {bad[0]!r}")
    mean = math.fsum(ks) / len(ks)
    # fsum mean can land an ulp outside [min, max] for near-constant lists.
    mean = min(max(mean, min(ks)), max(ks))
    return PrecisionReport(precision_stat(mean, epsilon), precision_stat(max(ks), epsilon),
                           precision_stat(min(ks), epsilon), len(ks), epsilon)
