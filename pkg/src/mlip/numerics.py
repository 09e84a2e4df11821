"""Dense numeric primitives shared by every loss.

Everything here is a pure numpy function over ``float64``/``float32`` arrays.
The differentiable counterparts live in :mod:`mlip.autograd` and reuse these
forward passes.  Finite-difference gradient checking is also here since it is
the contract every loss is held to.
"""

from __future__ import annotations

import contextlib
import warnings
from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Optional

import numpy as np

_PRECISIONS = {"f64": np.float64, "f32": np.float32}
_dtype = np.float64


def set_precision(mode: str) -> None:
    """Select the global floating point mode (``"f64"`` or ``"f32"``)."""
    global _dtype
    if mode not in _PRECISIONS:
        raise ValueError(f"unknown precision {mode!r}; expected one of {sorted(_PRECISIONS)}")
    _dtype = _PRECISIONS[mode]


def get_dtype():
    return _dtype


def precision_name() -> str:
    return "f64" if _dtype == np.float64 else "f32"


@contextlib.contextmanager
def precision(mode: str):
    previous = precision_name()
    set_precision(mode)
    try:
        yield
    finally:
        set_precision(previous)


def as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=_dtype)


class NonFiniteError(ValueError):
    pass


def check_finite(x: np.ndarray, what: str = "array") -> None:
    if not np.all(np.isfinite(x)):
        bad = np.argwhere(~np.isfinite(np.asarray(x)))
        raise NonFiniteError(f"{what} contains non-finite values (first at index {tuple(bad[0])})")


def logsumexp(x: np.ndarray, axis: int = -1, keepdims: bool = False) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))
    if not keepdims:
        out = np.squeeze(out, axis=axis)
    return out


def softmax(x, temperature: float = 1.0, axis: int = -1) -> np.ndarray:
    """Temperature softmax along ``axis`` in max-shifted form."""
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(_dtype)
    if not temperature > 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    check_finite(x, "softmax input")
    z = x / temperature
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    return x - logsumexp(x, axis=axis, keepdims=True)


def layer_norm(x, epsilon: float = 1e-5) -> np.ndarray:
    """Normalize the last axis to zero mean and unit variance (no affine)."""
    x = np.asarray(x)
    if x.size == 0 or x.shape[-1] == 0:
        raise ValueError("layer_norm of an empty vector")
    if not epsilon > 0:
        raise ValueError("epsilon must be > 0")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    return xc / np.sqrt(var + epsilon)


def l2_normalize(x: np.ndarray, axis: int = -1, eps: float = 1e-12) -> np.ndarray:
    n = np.sqrt(np.sum(x * x, axis=axis, keepdims=True))
    return x / np.maximum(n, eps)


def self_attention(X, Wq, Wk, Wv, scale: Optional[float] = None, return_attention: bool = False):
    """Single-head scaled dot-product self-attention over the rows of ``X``.

    ``scale`` defaults to ``1/sqrt(d)``.  Returns ``attention @ (X @ Wv)`` and,
    when asked, the row-stochastic attention matrix.
    """
    X = np.asarray(X)
    if X.ndim != 2:
        raise ValueError(f"X must be 2-D, got shape {X.shape}")
    d = X.shape[1]
    for name, W in (("Wq", Wq), ("Wk", Wk), ("Wv", Wv)):
        if np.shape(W)[0] != d:
            raise ValueError(f"{name} has {np.shape(W)[0]} rows, X has {d} columns")
    if np.shape(Wq)[1] != np.shape(Wk)[1]:
        raise ValueError("Wq and Wk disagree on the key dimension")
    if scale is None:
        scale = 1.0 / np.sqrt(np.shape(Wq)[1])
    scores = (X @ Wq) @ (X @ Wk).T * scale
    attn = softmax(scores, axis=-1)
    out = attn @ (X @ Wv)
    return (out, attn) if return_attention else out


def cosine(a, b) -> float:
    """Cosine similarity clamped to [-1, 1]; 0 (with a warning) for zero vectors."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        warnings.warn("cosine of a zero-norm vector; returning 0", RuntimeWarning, stacklevel=2)
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def cosine_rows(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Row-wise cosine with the same zero-vector convention as :func:`cosine`."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    na = np.linalg.norm(A, axis=-1)
    nb = np.linalg.norm(B, axis=-1)
    denom = na * nb
    out = np.zeros(denom.shape)
    ok = denom > 0
    out[ok] = np.sum(A * B, axis=-1)[ok] / denom[ok]
    return np.clip(out, -1.0, 1.0)


# --------------------------------------------------------------------------
# finite-difference gradient checking
# --------------------------------------------------------------------------


@dataclass
class GradReport:
    """Per-parameter comparison of analytic and central-difference gradients."""

    max_rel: Dict[str, float] = field(default_factory=dict)
    max_abs: Dict[str, float] = field(default_factory=dict)
    passed_params: Dict[str, bool] = field(default_factory=dict)
    tolerance: float = 1e-4
    abs_floor: float = 1e-7
    checked: int = 0
    failure: Optional[str] = None

    @property
    def passed(self) -> bool:
        return self.failure is None and all(self.passed_params.values())

    def worst(self) -> tuple:
        if not self.max_rel:
            return ("", 0.0)
        name = max(self.max_rel, key=lambda k: self.max_rel[k])
        return name, self.max_rel[name]

    def summary(self) -> str:
        if self.failure:
            return f"FAIL ({self.failure})"
        name, rel = self.worst()
        status = "PASS" if self.passed else "FAIL"
        return f"{status} entries={self.checked} worst={name} rel={rel:.2e}"


def finite_diff_gradcheck(
    loss: Callable[[Mapping[str, np.ndarray]], float],
    params: Mapping[str, np.ndarray],
    analytic: Mapping[str, np.ndarray],
    step: float = 1e-5,
    tolerance: float = 1e-4,
    abs_floor: float = 1e-7,
    max_entries: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> GradReport:
    """Compare ``analytic`` gradients against central differences of ``loss``.

    ``step`` is relative: entry ``k`` is probed at ``theta_k +- step*max(1,|theta_k|)``.
    With ``max_entries`` set, at most that many entries per tensor are probed,
    drawn without replacement from ``rng``.  An entry passes when its relative
    error is below ``tolerance`` or its absolute error is below ``abs_floor``.
    """
    reports = finite_diff_gradcheck_multi(
        lambda p: {"loss": loss(p)}, params, {"loss": analytic}, step, tolerance, abs_floor, max_entries, rng
    )
    return reports["loss"]


def finite_diff_gradcheck_multi(
    losses: Callable[[Mapping[str, np.ndarray]], Mapping[str, float]],
    params: Mapping[str, np.ndarray],
    analytic: Mapping[str, Mapping[str, np.ndarray]],
    step: float = 1e-5,
    tolerance: float = 1e-4,
    abs_floor: float = 1e-7,
    max_entries: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> Dict[str, GradReport]:
    """Several scalar losses checked from one set of perturbed evaluations.

    ``losses`` returns a value per loss name; ``analytic[name][param]`` holds
    that loss's gradient.  All losses must list the same parameters.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    names = list(analytic)
    reports = {n: GradReport(tolerance=tolerance, abs_floor=abs_floor) for n in names}
    pnames = sorted(analytic[names[0]])
    for pname in pnames:
        theta = work[pname]
        grads = {}
        for n in names:
            g = np.asarray(analytic[n][pname], dtype=np.float64)
            if g.shape != theta.shape:
                raise ValueError(f"gradient for {pname} has shape {g.shape}, parameter {theta.shape}")
            grads[n] = g.reshape(-1)
        flat = theta.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        worst_rel = dict.fromkeys(names, 0.0)
        worst_abs = dict.fromkeys(names, 0.0)
        ok = dict.fromkeys(names, True)
        for k in idx:
            orig = flat[k]
            h = step * max(1.0, abs(orig))
            flat[k] = orig + h
            f_plus = losses(work)
            flat[k] = orig - h
            f_minus = losses(work)
            flat[k] = orig
            for n in names:
                fp, fm = float(f_plus[n]), float(f_minus[n])
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    reports[n].failure = f"non-finite loss probing {pname}[{k}]"
                    continue
                num = (fp - fm) / (2.0 * h)
                ana = grads[n][k]
                abs_err = abs(num - ana)
                scale = max(abs(num), abs(ana))
                rel_err = abs_err / scale if scale > 0 else 0.0
                if not (rel_err < tolerance or abs_err < abs_floor):
                    ok[n] = False
                # relative error of a vanishing gradient carries no information
                if scale >= abs_floor:
                    worst_rel[n] = max(worst_rel[n], rel_err)
                worst_abs[n] = max(worst_abs[n], abs_err)
                reports[n].checked += 1
        for n in names:
            reports[n].max_rel[pname] = worst_rel[n]
            reports[n].max_abs[pname] = worst_abs[n]
            reports[n].passed_params[pname] = ok[n]
    return reports
