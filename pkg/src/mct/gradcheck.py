"""Central finite-difference checks against the tape's analytic gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, no_grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """``||a - n|| / max(||a|| + ||n||, floor)``.

    The floor turns the measure absolute for gradients that are zero up to
    finite-difference round-off.
    """
    num = np.linalg.norm(analytic - numeric)
    den = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    return float(num / max(den, floor))


def numeric_grad(fn: Callable[[], Tensor], t: Tensor, h: float = 1e-5,
                 coords: np.ndarray | None = None) -> np.ndarray:
    """Central differences of the scalar ``fn()`` w.r.t. ``t`` at ``coords`` (flat indices)."""
    flat = t.data.reshape(-1)
    if coords is None:
        coords = np.arange(flat.size)
    out = np.zeros(len(coords))
    with no_grad():
        for k, i in enumerate(coords):
            keep = flat[i]
            flat[i] = keep + h
            fp = fn().item()
            flat[i] = keep - h
            fm = fn().item()
            flat[i] = keep
            out[k] = (fp - fm) / (2.0 * h)
    return out


def check_gradients(fn: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = 1e-5,
                    max_coords: int | None = None, seed: int = 0) -> dict[str, float]:
    """Relative error per tensor between analytic and central-difference gradients.

    ``fn`` must rebuild the scalar from the current values of ``tensors``.
    ``max_coords`` samples that many coordinates per tensor (all when None).
    """
    for t in tensors:
        if t.dtype != np.float64:
            raise TypeError("gradient checks need float64 tensors")
        t.zero_grad()
    with Tape() as tape:
        loss = fn()
    tape.backward(loss)
    rng = np.random.default_rng(seed)
    errors = {}
    for idx, t in enumerate(tensors):
        n = t.data.size
        if max_coords is None or n <= max_coords:
            coords = np.arange(n)
        else:
            coords = np.sort(rng.choice(n, max_coords, replace=False))
        analytic = t.grad.reshape(-1)[coords].copy()
        numeric = numeric_grad(fn, t, h, coords)
        errors[getattr(t, "name", "") or f"input{idx}"] = relative_error(analytic, numeric)
    return errors
