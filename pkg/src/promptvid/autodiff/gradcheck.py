"""Central finite-difference checks against the tape gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .rng import RngStream
from .tensor import Tensor, backward


def relative_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def sample_coordinates(tensors: Sequence[Tensor], count: int, rng: RngStream) -> list[tuple[int, int]]:
    """``count`` (tensor index, flat index) pairs spread across ``tensors`` round-robin."""
    coords = []
    for k in range(count):
        ti = k % len(tensors)
        coords.append((ti, int(rng.integers(0, tensors[ti].size))))
    return coords


def check_gradients(
    loss_fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    coords: Sequence[tuple[int, int]],
    h: float = 1e-3,
) -> list[dict]:
    """Compare analytic and central-difference derivatives at ``coords``.

    ``loss_fn`` must rebuild the graph from the current tensor values on every
    call. Returns one record per coordinate with both values and the
    relative error.
    """
    for t in tensors:
        t.grad = None
    backward(loss_fn())
    analytic = [t.grad.copy() if t.grad is not None else np.zeros(t.shape, t.dtype) for t in tensors]
    rows = []
    for ti, flat in coords:
        t = tensors[ti]
        view = t.data.reshape(-1)
        orig = view[flat]
        view[flat] = orig + h
        up = loss_fn().item()
        view[flat] = orig - h
        down = loss_fn().item()
        view[flat] = orig
        numeric = (up - down) / (2 * h)
        a = float(analytic[ti].reshape(-1)[flat])
        rows.append({"tensor": ti, "index": flat, "analytic": a, "numeric": numeric,
                     "rel_err": relative_error(a, numeric)})
    return rows
