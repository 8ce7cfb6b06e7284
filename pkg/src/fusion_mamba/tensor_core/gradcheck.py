"""Central finite-difference validation of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad, precision


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    n_checked: int
    worst: tuple | None = None
    per_param: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error <= self.tolerance)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 0.0) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor), elementwise."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    with np.errstate(invalid="ignore", divide="ignore"):
        err = np.abs(analytic - numeric) / denom
    return np.where(denom == 0, 0.0, err)


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor] | Sequence[Tensor],
    epsilon: float = 1e-3,
    tolerance: float = 1e-3,
    max_coords: int | None = 64,
    seed: int = 0,
    floor_ratio: float = 1e-3,
    oracle_dtype=np.float64,
) -> GradCheckReport:
    """Compare ``backward`` against central differences of ``f``.

    ``f`` rebuilds the scalar loss from the current parameter values. The
    analytic gradient is taken at the parameters' own precision; the finite
    differences are evaluated with parameters promoted to ``oracle_dtype``
    so that the oracle's truncation error, not rounding, dominates.

    The relative error of each coordinate uses a floor of
    ``floor_ratio * max|numeric|`` within the same parameter, so coordinates
    whose true gradient is ~0 are judged on the parameter's gradient scale.
    At most ``max_coords`` coordinates per parameter are sampled.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if isinstance(params, Mapping):
        named = list(params.items())
    else:
        named = [(p.name or f"param{i}", p) for i, p in enumerate(params)]

    for _, p in named:
        p.zero_grad()
    loss = f()
    analytic = backward(loss, [p for _, p in named])

    rng = np.random.default_rng(seed)
    originals = [p.data for _, p in named]
    worst = None
    max_err = 0.0
    n_checked = 0
    per_param = {}
    try:
        for _, p in named:
            p.data = p.data.astype(oracle_dtype)
        with precision(oracle_dtype), no_grad():
            for (name, p), g in zip(named, analytic):
                flat = p.data.reshape(-1)
                coords = np.arange(flat.size)
                if max_coords is not None and flat.size > max_coords:
                    coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
                numeric = np.empty(coords.size)
                for j, c in enumerate(coords):
                    orig = flat[c]
                    flat[c] = orig + epsilon
                    f_plus = float(f().data)
                    flat[c] = orig - epsilon
                    f_minus = float(f().data)
                    flat[c] = orig
                    numeric[j] = (f_plus - f_minus) / (2 * epsilon)
                ana = np.asarray(g, dtype=np.float64).reshape(-1)[coords]
                floor = floor_ratio * float(np.max(np.abs(numeric), initial=0.0))
                err = relative_error(ana, numeric, floor=max(floor, 1e-12))
                n_checked += coords.size
                per_param[name] = float(err.max(initial=0.0))
                if err.size and err.max() > max_err:
                    k = int(err.argmax())
                    max_err = float(err[k])
                    worst = (name, int(coords[k]), float(ana[k]), float(numeric[k]))
    finally:
        for (_, p), orig in zip(named, originals):
            p.data = orig
    return GradCheckReport(max_err, tolerance, n_checked, worst, per_param)
