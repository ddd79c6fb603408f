"""
Generator and Carre du Champ

Test functions f(x, u) with analytic gradients and Hessians, the generator of
the (X, u) diffusion applied to them, the carre du champ operator, and two
small closed-form helpers (the surrogate moment E_p and the Gamma-type
integral).

All evaluators are batched: x has shape (..., d_x), u has shape (..., d_u).
Functions of u alone use d_x = 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import gammaln

from ..errors import ModelSpecError
from ..model import DriftSpec, Model, ScalarModel, log_gaussian_moment

Evaluator = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class GeneratorFn:
    name: str
    d_x: int
    d_u: int
    value: Evaluator
    grad_x: Evaluator
    grad_u: Evaluator
    hess_x: Evaluator
    hess_u: Evaluator

    def _check(self, x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        if x.shape[-1:] != (self.d_x,) or u.shape[-1:] != (self.d_u,):
            raise ModelSpecError(
                f"{self.name} expects x of size {self.d_x} and u of size {self.d_u}, "
                f"got {x.shape} and {u.shape}")
        return x, u

    def __call__(self, x, u):
        return self.value(*self._check(x, u))

    def gradients(self, x, u):
        x, u = self._check(x, u)
        return self.grad_x(x, u), self.grad_u(x, u)

    def hessians(self, x, u):
        x, u = self._check(x, u)
        return self.hess_x(x, u), self.hess_u(x, u)


def _zeros_vec(block: np.ndarray, dim: int) -> np.ndarray:
    return np.zeros(block.shape[:-1] + (dim,))


def _zeros_mat(block: np.ndarray, dim: int) -> np.ndarray:
    return np.zeros(block.shape[:-1] + (dim, dim))


def _in_block(block: str, d_x: int, d_u: int, value, grad, hess, name: str) -> GeneratorFn:
    """Build a GeneratorFn that depends on one block only."""
    if block == "x":
        return GeneratorFn(name, d_x, d_u,
                           lambda x, u: value(x), lambda x, u: grad(x), lambda x, u: _zeros_vec(u, d_u),
                           lambda x, u: hess(x), lambda x, u: _zeros_mat(u, d_u))
    if block == "u":
        return GeneratorFn(name, d_x, d_u,
                           lambda x, u: value(u), lambda x, u: _zeros_vec(x, d_x), lambda x, u: grad(u),
                           lambda x, u: _zeros_mat(x, d_x), lambda x, u: hess(u))
    raise ModelSpecError(f"block must be 'x' or 'u', got {block!r}")


def coordinate(block: str, index: int, d_x: int = 1, d_u: int = 1) -> GeneratorFn:
    """f = x_i or u_i."""
    dim = d_x if block == "x" else d_u
    if not 0 <= index < dim:
        raise ModelSpecError(f"coordinate {index} out of range for a {dim}-dim block")
    unit = np.eye(dim)[index]
    return _in_block(block, d_x, d_u,
                     lambda v: v[..., index],
                     lambda v: np.broadcast_to(unit, v.shape).copy(),
                     lambda v: np.zeros(v.shape[:-1] + (dim, dim)),
                     f"{block}[{index}]")


def squared_norm(block: str, d_x: int = 1, d_u: int = 1, scale: float = 1.0,
                 center: Optional[Sequence[float]] = None) -> GeneratorFn:
    """f = scale * |v - center|^2 on one block."""
    dim = d_x if block == "x" else d_u
    c = np.zeros(dim) if center is None else np.asarray(center, dtype=float)
    return _in_block(block, d_x, d_u,
                     lambda v: scale * np.sum((v - c) ** 2, axis=-1),
                     lambda v: 2.0 * scale * (v - c),
                     lambda v: np.broadcast_to(2.0 * scale * np.eye(dim), v.shape[:-1] + (dim, dim)).copy(),
                     f"{scale}*|{block}|^2")


def power_norm(c: float, n: float, center: Sequence[float], d_x: int = 0) -> GeneratorFn:
    """f(u) = -c |u - center|^n for n >= 2."""
    if n < 2:
        raise ModelSpecError(f"power_norm needs n >= 2 for a bounded Hessian, got {n}")
    center = np.atleast_1d(np.asarray(center, dtype=float))
    dim = center.size

    def value(u):
        return -c * np.linalg.norm(u - center, axis=-1) ** n

    def grad(u):
        v = u - center
        r = np.linalg.norm(v, axis=-1, keepdims=True)
        return -c * n * r ** (n - 2) * v

    def hess(u):
        v = u - center
        r = np.linalg.norm(v, axis=-1)[..., None, None]
        outer = v[..., :, None] * v[..., None, :]
        with np.errstate(divide="ignore", invalid="ignore"):
            second = np.where(r > 0, (n - 2) * r ** (n - 4) * outer, 0.0)
        return -c * n * (r ** (n - 2) * np.eye(dim) + second)

    return _in_block("u", d_x, dim, value, grad, hess, f"-{c}|u-u*|^{n}")


def linear(coeff_x: Sequence[float], coeff_u: Sequence[float], constant: float = 0.0) -> GeneratorFn:
    """f = <a, x> + <b, u> + constant."""
    a = np.atleast_1d(np.asarray(coeff_x, dtype=float)) if len(coeff_x) else np.zeros(0)
    b = np.atleast_1d(np.asarray(coeff_u, dtype=float))
    d_x, d_u = a.size, b.size
    return GeneratorFn(
        f"linear({a.tolist()}, {b.tolist()})", d_x, d_u,
        lambda x, u: x @ a + u @ b + constant,
        lambda x, u: np.broadcast_to(a, x.shape).copy(),
        lambda x, u: np.broadcast_to(b, u.shape).copy(),
        lambda x, u: _zeros_mat(x, d_x),
        lambda x, u: _zeros_mat(u, d_u),
    )


def surrogate_moment(x, p: float):
    """E_p(x) = |x|^{p+2} / (1 + |x|^2) + 1, comparable to |x|^p + 1."""
    if not p > 0:
        raise ModelSpecError(f"p must be positive, got {p}")
    x = np.asarray(x, dtype=float)
    s = np.sum(x * x, axis=-1) if x.ndim else x * x
    return s ** ((p + 2) / 2.0) / (1.0 + s) + 1.0


def surrogate_moment_fn(p: float, d_x: int = 1, d_u: int = 1) -> GeneratorFn:
    """E_p as a function of x, with gradient 2 f'(s) x and Hessian 2 f'(s) I + 4 f''(s) x x^T."""
    if not p > 0:
        raise ModelSpecError(f"p must be positive, got {p}")

    def f_s(s):
        with np.errstate(divide="ignore", invalid="ignore"):
            out = s ** (p / 2.0) * ((p + 2) / 2.0 + (p / 2.0) * s) / (1.0 + s) ** 2
        return np.where(s > 0, out, 0.0)

    def f_ss(s):
        # derivative of s^{p/2} (A + B s) / (1 + s)^2 with A = (p+2)/2, B = p/2
        A, B = (p + 2) / 2.0, p / 2.0
        with np.errstate(divide="ignore", invalid="ignore"):
            num = ((p / 2.0) * s ** (p / 2.0 - 1) * (A + B * s) + s ** (p / 2.0) * B) * (1.0 + s) \
                - 2.0 * s ** (p / 2.0) * (A + B * s)
            out = num / (1.0 + s) ** 3
        return np.where(s > 0, out, 0.0)

    def grad(x):
        s = np.sum(x * x, axis=-1, keepdims=True)
        return 2.0 * f_s(s) * x

    def hess(x):
        s = np.sum(x * x, axis=-1)[..., None, None]
        outer = x[..., :, None] * x[..., None, :]
        return 2.0 * f_s(s) * np.eye(d_x) + 4.0 * f_ss(s) * outer

    return _in_block("x", d_x, d_u, lambda x: surrogate_moment(x, p), grad, hess, f"E_{p}")


def compose(phi: str, f: GeneratorFn, power: float = 2.0) -> GeneratorFn:
    """phi(f) for phi = exp or phi(y) = y^power, with chain-rule derivatives."""
    if phi == "exp":
        d0, d1, d2 = np.exp, np.exp, np.exp
    elif phi == "power":
        d0 = lambda y: y ** power
        d1 = lambda y: power * y ** (power - 1)
        d2 = lambda y: power * (power - 1) * y ** (power - 2)
    else:
        raise ModelSpecError(f"unknown outer function {phi!r}; expected 'exp' or 'power'")

    def grad_block(grad):
        return lambda x, u: d1(f.value(x, u))[..., None] * grad(x, u)

    def hess_block(grad, hess):
        def inner(x, u):
            y = f.value(x, u)[..., None, None]
            g = grad(x, u)
            return d1(y) * hess(x, u) + d2(y) * g[..., :, None] * g[..., None, :]
        return inner

    return GeneratorFn(
        f"{phi}({f.name})", f.d_x, f.d_u,
        lambda x, u: d0(f.value(x, u)),
        grad_block(f.grad_x), grad_block(f.grad_u),
        hess_block(f.grad_x, f.hess_x), hess_block(f.grad_u, f.hess_u),
    )


def _diffusion(sigma) -> np.ndarray:
    sigma = np.asarray(sigma, dtype=float)
    return sigma @ sigma.T if sigma.ndim == 2 else sigma ** 2


def carre_du_champ(f: GeneratorFn, g: GeneratorFn, x, u, sigma_x=1.0):
    """Gamma(f, g) = 1/2 <Sigma Sigma^T grad_x f, grad_x g> + 1/2 <grad_u f, grad_u g>."""
    if (f.d_x, f.d_u) != (g.d_x, g.d_u):
        raise ModelSpecError(f"{f.name} and {g.name} live on different spaces")
    fx, fu = f.gradients(x, u)
    gx, gu = g.gradients(x, u)
    diff = _diffusion(sigma_x)
    if np.ndim(diff) == 2:
        x_part = np.einsum("...i,ij,...j->...", fx, diff, gx)
    else:
        x_part = diff * np.sum(fx * gx, axis=-1)
    return 0.5 * x_part + 0.5 * np.sum(fu * gu, axis=-1)


def apply_generator(f: GeneratorFn, model: Model, x, u):
    """Lf = -<B(u) x, grad_x f> + <h, grad_u f> + 1/2 tr(Sigma Sigma^T hess_x f) + 1/2 tr hess_u f."""
    x, u = f._check(x, u)
    if f.d_x != model.d_x or f.d_u != model.d_u:
        raise ModelSpecError(
            f"{f.name} has dimensions ({f.d_x}, {f.d_u}), model has ({model.d_x}, {model.d_u})")
    gx, gu = f.grad_x(x, u), f.grad_u(x, u)
    hx, hu = f.hess_x(x, u), f.hess_u(x, u)
    B = model.damping_matrix(u)
    damping = np.einsum("...ij,...j,...i->...", B, x, gx)
    drift = np.sum(model.drift.drift(u) * gu, axis=-1)
    sigma = model.sigma_x if isinstance(model, ScalarModel) else model.sigma_matrix()
    diff = _diffusion(sigma)
    if np.ndim(diff) == 2:
        noise_x = np.einsum("ij,...ji->...", diff, hx)
    else:
        noise_x = diff * np.trace(hx, axis1=-2, axis2=-1)
    return -damping + drift + 0.5 * noise_x + 0.5 * np.trace(hu, axis1=-2, axis2=-1)


def hidden_generator(f: GeneratorFn, drift: DriftSpec, u):
    """Generator of u alone applied to a function of u: <h, grad f> + 1/2 tr hess f."""
    u = np.asarray(u, dtype=float)
    x = np.zeros(u.shape[:-1] + (f.d_x,))
    x, u = f._check(x, u)
    return (np.sum(drift.drift(u) * f.grad_u(x, u), axis=-1)
            + 0.5 * np.trace(f.hess_u(x, u), axis1=-2, axis2=-1))


def gamma_integral_oracle(p: float, r: float, c: float) -> float:
    """log of int_0^inf exp(-c x^r) x^p dx, via y = c x^r and log-gamma."""
    if p < 0 or r <= 0 or c <= 0:
        raise ModelSpecError(f"need p >= 0, r > 0, c > 0; got p={p}, r={r}, c={c}")
    a = (p + 1.0) / r
    return float(gammaln(a) - a * math.log(c) - math.log(r))


def gaussian_moment(p: float, mean, variance):
    """log E|N(mean, variance)|^{2p}."""
    return log_gaussian_moment(p, mean, variance)
