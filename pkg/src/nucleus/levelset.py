"""Signed-distance numerics: smoothed sign, Godunov gradients, Sussman redistancing.

All grid operators are written with tensorcore primitives so they are
differentiable when handed a Tensor; numpy input gives numpy output.
Arrays are indexed ``[..., row, col]`` and ``dx`` is the cell size.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .tensorcore import Tensor

# keeps sqrt differentiable where the gradient vanishes
_SQRT_FLOOR = 1e-12


class ReinitError(ValueError):
    pass


@dataclass(frozen=True)
class ReinitConfig:
    iterations: int = 5
    dtau: float | None = None          # defaults to 0.5 * dx
    eps: float | None = None           # sign smoothing width, defaults to dx
    band_freeze: float | None = None   # half-width in cells held at phi0
    order: int = 2                     # ENO order of the one-sided differences

    def resolved(self, dx: float) -> tuple[float, float]:
        dtau = 0.5 * dx if self.dtau is None else self.dtau
        eps = dx if self.eps is None else self.eps
        if self.iterations < 0:
            raise ReinitError("iterations must be >= 0")
        if dtau > 0.5 * dx * (1 + 1e-12):
            raise ReinitError(f"CFL violation: dtau={dtau} exceeds 0.5*dx={0.5 * dx}")
        if dtau <= 0 or eps <= 0:
            raise ReinitError("dtau and eps must be positive")
        return dtau, eps


ROLLOUT_REINIT = ReinitConfig(iterations=5, band_freeze=3.0)


def _wrap(phi):
    return (phi, False) if isinstance(phi, Tensor) else (Tensor(phi), True)


def _unwrap(t: Tensor, was_numpy: bool):
    return t.data if was_numpy else t


def _numpy_precision(fn):
    """Array inputs are evaluated at their own float precision, outside any tape."""

    @functools.wraps(fn)
    def inner(phi, *args, **kwargs):
        if isinstance(phi, Tensor):
            return fn(phi, *args, **kwargs)
        arr = np.asarray(phi)
        dtype = np.result_type(arr.dtype, np.float32) if arr.dtype.kind == "f" else np.float64
        with tc.no_grad(), tc.default_dtype(dtype):
            return fn(arr, *args, **kwargs)

    return inner


@_numpy_precision
def smoothed_sign(phi0, eps: float):
    if eps <= 0:
        raise ReinitError("eps must be positive")
    t, was_np = _wrap(phi0)
    return _unwrap(t / tc.sqrt(t * t + eps * eps), was_np)


def _shift(t: Tensor, axis: int, step: int) -> Tensor:
    """t[i - step] along axis, repeating the edge value."""
    n = t.shape[axis]

    def cut(lo, hi):
        sl = [slice(None)] * t.ndim
        sl[axis] = slice(lo, hi)
        return t[tuple(sl)]

    if step > 0:
        return tc.concat([cut(0, 1), cut(0, n - 1)], axis=axis)
    return tc.concat([cut(1, n), cut(n - 1, n)], axis=axis)


def _edge(t: Tensor, axis: int, lo: int, hi: int) -> Tensor:
    sl = [slice(None)] * t.ndim
    sl[axis] = slice(lo, hi)
    return t[tuple(sl)]


def _minmod(a: Tensor, b: Tensor) -> Tensor:
    da, db = a.data, b.data
    pick_a = np.abs(da) <= np.abs(db)
    same = (da * db) > 0
    return tc.where(same, tc.where(pick_a, a, b), 0.0)


def _one_sided(phi: Tensor, axis: int, dx: float, order: int = 1) -> tuple[Tensor, Tensor]:
    """Backward and forward differences; boundary cells reuse the one available.

    ``order=2`` adds the ENO minmod correction of the second difference.
    """
    n = phi.shape[axis]

    def cut(lo, hi):
        sl = [slice(None)] * phi.ndim
        sl[axis] = slice(lo, hi)
        return phi[tuple(sl)]

    d = cut(1, n) - cut(0, n - 1)
    sl_first = [slice(None)] * phi.ndim
    sl_first[axis] = slice(0, 1)
    sl_last = [slice(None)] * phi.ndim
    sl_last[axis] = slice(n - 2, n - 1)
    back = tc.concat([d[tuple(sl_first)], d], axis=axis)
    fwd = tc.concat([d, d[tuple(sl_last)]], axis=axis)
    if order == 2:
        if n < 3:
            raise ReinitError("second-order differences need at least 3 cells per axis")
        inner = cut(2, n) - 2.0 * cut(1, n - 1) + cut(0, n - 2)
        first = [slice(None)] * phi.ndim
        first[axis] = slice(0, 1)
        last = [slice(None)] * phi.ndim
        last[axis] = slice(n - 3, n - 2)
        dd = tc.concat([inner[tuple(first)], inner, inner[tuple(last)]], axis=axis)
        back = back + 0.5 * _minmod(_shift(dd, axis, 1), dd)
        fwd = fwd - 0.5 * _minmod(dd, _shift(dd, axis, -1))
        # edge cells have a single one-sided stencil; use it for both
        back = tc.concat([_edge(fwd, axis, 0, 1), _edge(back, axis, 1, n)], axis=axis)
        fwd = tc.concat([_edge(fwd, axis, 0, n - 1), _edge(back, axis, n - 1, n)], axis=axis)
    elif order != 1:
        raise ReinitError(f"unsupported difference order {order}")
    return back / dx, fwd / dx


@_numpy_precision
def upwind_grad_norm(phi, sign_field, dx: float = 1.0, order: int = 1):
    """Godunov upwind |grad phi| for the redistancing equation.

    Where sign >= 0: per axis max(max(a,0)^2, min(b,0)^2) with a, b the backward
    and forward differences; where sign < 0 the roles of the clamps swap.
    """
    t, was_np = _wrap(phi)
    s = tc._data(sign_field) if isinstance(sign_field, Tensor) else np.asarray(sign_field)
    if s.shape != t.shape:
        raise tc.ShapeError("upwind_grad_norm", t.shape, s.shape)
    positive = s >= 0
    total = None
    for axis in (-1, -2):
        a, b = _one_sided(t, axis, dx, order)
        ap, am = tc.maximum(a, 0.0), tc.minimum(a, 0.0)
        bp, bm = tc.maximum(b, 0.0), tc.minimum(b, 0.0)
        pos = tc.maximum(ap * ap, bm * bm)
        neg = tc.maximum(am * am, bp * bp)
        term = tc.where(positive, pos, neg)
        total = term if total is None else total + term
    return _unwrap(tc.sqrt(total + _SQRT_FLOOR), was_np)


@_numpy_precision
def central_gradient(phi, dx: float = 1.0):
    """(d/drow, d/dcol): central differences inside, one-sided on the boundary."""
    t, was_np = _wrap(phi)
    out = []
    for axis in (-2, -1):
        n = t.shape[axis]
        sl = [slice(None)] * t.ndim

        def cut(s):
            sl2 = list(sl)
            sl2[axis] = s
            return t[tuple(sl2)]

        inner = (cut(slice(2, n)) - cut(slice(0, n - 2))) / (2 * dx)
        first = (cut(slice(1, 2)) - cut(slice(0, 1))) / dx
        last = (cut(slice(n - 1, n)) - cut(slice(n - 2, n - 1))) / dx
        out.append(_unwrap(tc.concat([first, inner, last], axis=axis), was_np))
    return tuple(out)


@_numpy_precision
def central_grad_norm(phi, dx: float = 1.0):
    t, was_np = _wrap(phi)
    gy, gx = central_gradient(t, dx)
    return _unwrap(tc.sqrt(gy * gy + gx * gx + _SQRT_FLOOR), was_np)


def eikonal_residual(phi, dx: float = 1.0) -> dict:
    """Map of | |grad phi| - 1 | with its mean and max."""
    with tc.no_grad(), tc.default_dtype(np.float64):
        norm = central_grad_norm(np.asarray(tc._data(phi), dtype=np.float64), dx)
    res = np.abs(norm - 1.0)
    return {"field": res, "mean": float(res.mean()), "max": float(res.max())}


@_numpy_precision
def sussman_reinit(phi0, cfg: ReinitConfig = ReinitConfig(), dx: float = 1.0):
    """Relax phi toward a signed distance function with its zero set pinned.

    Iterates ``phi <- phi - dtau * S(phi0) * (|grad phi| - 1)`` with the smoothed
    sign frozen at phi0; cells are clamped at zero so none changes sign.
    With ``band_freeze`` cells with |phi0| < b*dx are reset to phi0 after
    every sweep, so only the far field is corrected.
    """
    dtau, eps = cfg.resolved(dx)
    t0, was_np = _wrap(phi0)
    if cfg.iterations == 0:
        return np.array(phi0, copy=True) if was_np else t0 * 1.0
    # frozen in the sense of fixed across sweeps; it still carries gradient to phi0
    sign = smoothed_sign(t0, eps)
    frozen = None
    if cfg.band_freeze is not None:
        frozen = np.abs(t0.data) < cfg.band_freeze * dx
    # no cell may cross zero against its initial sign: this pins the interface and stops
    # runaway growth where a boundary cell's extrapolated neighbor becomes its upwind side
    above = t0.data > 0
    below = t0.data < 0
    phi = t0
    for _ in range(cfg.iterations):
        norm = upwind_grad_norm(phi, sign, dx, cfg.order)
        phi = phi - dtau * sign * (norm - 1.0)
        phi = tc.where(above, tc.maximum(phi, 0.0), tc.where(below, tc.minimum(phi, 0.0), phi))
        if frozen is not None:
            phi = tc.where(frozen, t0, phi)
    return _unwrap(phi, was_np)


def interface_points(phi: np.ndarray, dx: float = 1.0) -> np.ndarray:
    """Zero crossings along grid lines by linear interpolation, as (row, col) points."""
    phi = np.asarray(phi, dtype=np.float64)
    pts = []
    a, b = phi[:, :-1], phi[:, 1:]
    r, c = np.nonzero((a * b < 0) | ((a == 0) & (b != 0)))
    frac = a[r, c] / (a[r, c] - b[r, c])
    pts.append(np.stack([r.astype(float), c + frac], axis=1))
    a, b = phi[:-1, :], phi[1:, :]
    r, c = np.nonzero((a * b < 0) | ((a == 0) & (b != 0)))
    frac = a[r, c] / (a[r, c] - b[r, c])
    pts.append(np.stack([r + frac, c.astype(float)], axis=1))
    return np.concatenate(pts, axis=0) * dx


def circle_sdf(shape: tuple[int, int], center: tuple[float, float], radius: float,
               dx: float = 1.0) -> np.ndarray:
    """Exact SDF of a disk (positive inside), sampled at cell indices times dx."""
    rows, cols = np.meshgrid(np.arange(shape[0]), np.arange(shape[1]), indexing="ij")
    d = np.hypot(rows * dx - center[0], cols * dx - center[1])
    return radius - d
