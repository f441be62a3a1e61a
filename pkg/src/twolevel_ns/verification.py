"""Manufactured solutions, error norms and convergence tables."""
from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .assembly import SeparableForcing
from .femspace import FieldPair, MixedSpace, refined_quadrature
from .mesh import barycentric_coordinates

ERROR_DEGREE = 5


class Regularity(enum.Enum):
    SMOOTH = "SMOOTH"
    H1_ONLY = "H1_ONLY"


class NoClosedFormError(ValueError):
    """The fixture has no closed-form solution for t > 0."""


@dataclass(frozen=True)
class ExactSolution:
    """Analytic velocity/pressure pair on the unit square.

    Callbacks take points ``(n, 2)`` and a time. ``forcing`` is the
    right-hand side that drives the system; for closed-form fixtures it is
    synthesized from the other callbacks.
    """

    u: Callable
    grad_u: Callable
    laplace_u: Callable
    u_t: Callable
    p: Callable
    grad_p: Callable
    regularity_tag: Regularity
    description: str
    nu: float
    forcing: Callable | None = None

    def initial(self, x):
        return self.u(x, 0.0)

    def strong_residual(self, x, t):
        """``u_t + (u.grad)u - nu lap u + grad p - f`` pointwise."""
        u = self.u(x, t)
        gu = self.grad_u(x, t)
        adv = np.einsum("nd,ncd->nc", u, gu)
        return (self.u_t(x, t) + adv - self.nu * self.laplace_u(x, t)
                + self.grad_p(x, t) - self.forcing(x, t))

    def divergence(self, x, t):
        gu = self.grad_u(x, t)
        return gu[:, 0, 0] + gu[:, 1, 1]


def _synthesize_forcing(u, grad_u, laplace_u, u_t, grad_p, nu):
    def f(x, t):
        uu = u(x, t)
        adv = np.einsum("nd,ncd->nc", uu, grad_u(x, t))
        return u_t(x, t) + adv - nu * laplace_u(x, t) + grad_p(x, t)
    return f


# ---------------------------------------------------------------------------
# smooth fixture: u = curl(sin^2(pi x) sin^2(pi y) g(t))

def _s(x):
    return np.sin(np.pi * x) ** 2


def _s1(x):
    return np.pi * np.sin(2 * np.pi * x)


def _s2(x):
    return 2 * np.pi ** 2 * np.cos(2 * np.pi * x)


def _s3(x):
    return -4 * np.pi ** 3 * np.sin(2 * np.pi * x)


def _curl_fixture(S, S1, S2, S3, g, dg):
    """Velocity ``curl(S(x) S(y) g(t)) = g (S(x) S'(y), -S'(x) S(y))`` and derivatives."""

    def u(x, t):
        X, Y = x[:, 0], x[:, 1]
        return g(t) * np.column_stack([S(X) * S1(Y), -S1(X) * S(Y)])

    def grad_u(x, t):
        X, Y = x[:, 0], x[:, 1]
        out = np.empty((len(x), 2, 2))
        out[:, 0, 0] = S1(X) * S1(Y)
        out[:, 0, 1] = S(X) * S2(Y)
        out[:, 1, 0] = -S2(X) * S(Y)
        out[:, 1, 1] = -S1(X) * S1(Y)
        return g(t) * out

    def laplace_u(x, t):
        X, Y = x[:, 0], x[:, 1]
        return g(t) * np.column_stack([S2(X) * S1(Y) + S(X) * S3(Y),
                                       -S3(X) * S(Y) - S1(X) * S2(Y)])

    def u_t(x, t):
        X, Y = x[:, 0], x[:, 1]
        return dg(t) * np.column_stack([S(X) * S1(Y), -S1(X) * S(Y)])

    return u, grad_u, laplace_u, u_t


def make_smooth_solution(nu: float = 1.0) -> ExactSolution:
    """``psi = sin^2(pi x) sin^2(pi y) g(t)``, ``g = 1 + sin(t)/2``, ``u = curl psi``,
    ``p = (x - 1/2)(y - 1/2) g(t)``."""
    if not nu > 0:
        raise ValueError(f"nu must be positive, got {nu}")
    g = lambda t: 1.0 + 0.5 * math.sin(t)
    dg = lambda t: 0.5 * math.cos(t)
    u, grad_u, laplace_u, u_t = _curl_fixture(_s, _s1, _s2, _s3, g, dg)

    def p(x, t):
        return g(t) * (x[:, 0] - 0.5) * (x[:, 1] - 0.5)

    def grad_p(x, t):
        return g(t) * np.column_stack([x[:, 1] - 0.5, x[:, 0] - 0.5])

    # every term is a power of g or dg times a fixed field, so the forcing
    # u_t + (u.grad)u - nu lap u + grad p separates in x and t
    u1, grad_u1, laplace_u1, _ = _curl_fixture(_s, _s1, _s2, _s3, lambda t: 1.0, None)
    adv1 = lambda x: np.einsum("nd,ncd->nc", u1(x, 0.0), grad_u1(x, 0.0))
    rest1 = lambda x: -nu * laplace_u1(x, 0.0) + grad_p(x, 0.0)
    f = SeparableForcing([(dg, lambda x: u1(x, 0.0)), (lambda t: g(t) ** 2, adv1), (g, rest1)])
    return ExactSolution(u, grad_u, laplace_u, u_t, p, grad_p, Regularity.SMOOTH,
                         "curl(sin^2(pi x) sin^2(pi y) (1 + sin(t)/2)), "
                         "p = (x-1/2)(y-1/2)(1 + sin(t)/2)", nu, f)


def steady_stokes_forcing(nu: float = 1.0):
    """Forcing whose steady Stokes solution is ``curl(sin^2(pi x) sin^2(pi y))``."""
    u, grad_u, laplace_u, _ = _curl_fixture(_s, _s1, _s2, _s3, lambda t: 1.0, lambda t: 0.0)
    return lambda x, t: -nu * laplace_u(x, t)


# ---------------------------------------------------------------------------
# rough initial data

@dataclass(frozen=True)
class SineSeries:
    """``S(x) = sin(pi x) * sum_k a_k sin(k pi x)`` over odd ``k <= modes`` with
    ``a_k = (-1)^((k-1)/2) k^(delta - 3)``.

    Both ``S`` and ``S'`` vanish at 0 and 1, so ``curl(S(x) S(y))`` has zero
    trace on the boundary of the unit square. The envelope turns the product
    into cosine modes with coefficients ``(a_{m+1} - a_{m-1}) / 2``; the
    alternating signs keep those at size ``|a_m|`` instead of letting
    neighbouring modes cancel, so the decay rate is not smoothed by one order.
    """

    modes: int = 64
    delta: float = 0.5

    @property
    def k(self):
        return np.arange(1, self.modes + 1, dtype=float)

    @property
    def a(self):
        k = self.k
        sign = np.where((k - 1) % 4 == 0, 1.0, -1.0)
        return np.where(k % 2 == 1, sign * k ** (self.delta - 3.0), 0.0)

    def derivative(self, x, order: int):
        x = np.asarray(x, dtype=float)
        shape = x.shape
        x = x.ravel()
        k, a = self.k, self.a
        out = np.zeros_like(x)
        # Leibniz rule for sin(pi x) * sin(k pi x)
        for j in range(order + 1):
            c = math.comb(order, j)
            d_env = np.pi ** j * np.sin(np.pi * x + j * np.pi / 2)
            kk = (k * np.pi) ** (order - j)
            d_ser = (a * kk * np.sin(np.outer(x, k) * np.pi + (order - j) * np.pi / 2)).sum(-1)
            out = out + c * d_env * d_ser
        return out.reshape(shape)

    def __call__(self, x):
        return self.derivative(x, 0)


def make_nonsmooth_initial_solution(nu: float = 1.0, modes: int = 64, delta: float = 0.5,
                                    forcing="zero") -> ExactSolution:
    """Initial velocity ``curl(S(x) S(y))`` with slowly decaying sine modes.

    Only the initial field has a closed form; use self-convergence against a
    finer reference. ``forcing`` is ``"zero"`` or ``"steady"`` (the steady
    Stokes forcing of the smooth fixture's profile).
    """
    if not nu > 0:
        raise ValueError(f"nu must be positive, got {nu}")
    ser = SineSeries(modes, delta)
    S = lambda x: ser.derivative(x, 0)
    S1 = lambda x: ser.derivative(x, 1)
    S2 = lambda x: ser.derivative(x, 2)
    S3 = lambda x: ser.derivative(x, 3)
    u0, grad_u0, lap_u0, _ = _curl_fixture(S, S1, S2, S3, lambda t: 1.0, lambda t: 0.0)

    def only_initial(fn):
        def wrapped(x, t):
            if t != 0:
                raise NoClosedFormError("rough fixture is known only at t = 0")
            return fn(x, t)
        return wrapped

    def no_closed_form(*_):
        raise NoClosedFormError("rough fixture has no closed-form pressure")

    if forcing == "steady":
        f = steady_stokes_forcing(nu)
    elif forcing == "zero":
        f = lambda x, t: np.zeros((len(x), 2))
    else:
        raise ValueError(f"unknown forcing {forcing!r}")
    return ExactSolution(only_initial(u0), only_initial(grad_u0), only_initial(lap_u0),
                         no_closed_form, no_closed_form, no_closed_form, Regularity.H1_ONLY,
                         f"curl(S(x) S(y)), odd sine modes k <= {modes} with alternating "
                         f"k^({delta}-3) decay (finite-mode proxy for H1-only data), forcing={forcing}", nu, f)


def h2_seminorm(series: SineSeries, n_gauss: int = 400) -> float:
    """``|curl(S(x) S(y))|_{H^2}`` by tensor Gauss-Legendre quadrature."""
    xg, wg = np.polynomial.legendre.leggauss(n_gauss)
    x = 0.5 * (xg + 1.0)
    w = 0.5 * wg
    d = [series.derivative(x, k) for k in range(4)]
    W = np.outer(w, w)
    total = 0.0
    # u1 = S(x) S'(y), u2 = -S'(x) S(y); sum of squared second derivatives
    for i, j in ((2, 0), (1, 1), (0, 2)):
        mult = 2 if i == j == 1 else 1
        total += mult * np.sum(W * np.outer(d[i], d[j + 1]) ** 2)
        total += mult * np.sum(W * np.outer(d[i + 1], d[j]) ** 2)
    return math.sqrt(total)


# ---------------------------------------------------------------------------
# error norms

def _error_points(space: MixedSpace):
    rule = refined_quadrature(ERROR_DEGREE)
    tab = space.tabulate(rule, key=("refined", ERROR_DEGREE))
    ne, nq = tab.jxw.shape
    elems = np.repeat(np.arange(ne), nq)
    lam = np.tile(rule.points, (ne, 1))
    return tab.jxw.ravel(), elems, lam, tab.points.reshape(-1, 2)


def compute_errors(field: FieldPair, exact: ExactSolution, t: float | None = None):
    """``(|u - u_h|, |grad(u - u_h)|, |p - p_h|)`` at time ``t``.

    Both pressures are shifted to zero mean before differencing. A NaN
    discrete pressure gives a NaN pressure error.
    """
    if exact.regularity_tag is not Regularity.SMOOTH:
        raise NoClosedFormError("compute_errors needs a closed-form (SMOOTH) fixture")
    t = field.time_stamp if t is None else t
    space = field.space
    w, elems, lam, x = _error_points(space)
    uh, guh = space.evaluate_velocity(field.velocity_coeffs, elems, lam)
    eu = exact.u(x, t) - uh
    egu = exact.grad_u(x, t) - guh
    l2 = math.sqrt(np.dot(w, (eu ** 2).sum(1)))
    h1 = math.sqrt(np.dot(w, (egu ** 2).sum((1, 2))))
    ph = space.evaluate_pressure(field.pressure_coeffs, elems, lam)
    pe = exact.p(x, t)
    area = w.sum()
    ep = (pe - np.dot(w, pe) / area) - (ph - np.dot(w, ph) / area)
    pl2 = math.sqrt(np.dot(w, ep ** 2))
    return l2, h1, pl2


def compute_self_errors(field: FieldPair, reference: FieldPair, t: float | None = None):
    """Error triple of ``field`` against a reference on a nested finer space.

    ``field`` is evaluated exactly at the reference quadrature points through
    the refinement ancestry (so MINI bubbles are not interpolated).
    """
    rs, fs = reference.space, field.space
    anc = rs.mesh.ancestors_in(fs.mesh)
    w, elems, lam, x = _error_points(rs)
    ur, gur = rs.evaluate_velocity(reference.velocity_coeffs, elems, lam)
    T = anc[elems]
    flam = barycentric_coordinates(fs.mesh, T, x)
    uf, guf = fs.evaluate_velocity(field.velocity_coeffs, T, flam)
    l2 = math.sqrt(np.dot(w, ((ur - uf) ** 2).sum(1)))
    h1 = math.sqrt(np.dot(w, ((gur - guf) ** 2).sum((1, 2))))
    pr = rs.evaluate_pressure(reference.pressure_coeffs, elems, lam)
    pf = fs.evaluate_pressure(field.pressure_coeffs, T, flam)
    area = w.sum()
    ep = (pr - np.dot(w, pr) / area) - (pf - np.dot(w, pf) / area)
    return l2, h1, math.sqrt(np.dot(w, ep ** 2))


def velocity_norms(field: FieldPair):
    """``(|u_h|, |grad u_h|)``."""
    space = field.space
    w, elems, lam, _ = _error_points(space)
    uh, guh = space.evaluate_velocity(field.velocity_coeffs, elems, lam)
    return math.sqrt(np.dot(w, (uh ** 2).sum(1))), math.sqrt(np.dot(w, (guh ** 2).sum((1, 2))))


# ---------------------------------------------------------------------------
# rates and weights

def eoc(errors, sizes) -> list:
    """Orders ``log2(e_i / e_{i+1})`` for mesh sizes that halve each time."""
    errors = [float(e) for e in errors]
    sizes = [float(h) for h in sizes]
    if len(errors) != len(sizes) or len(errors) < 2:
        raise ValueError("need at least two errors and one size per error")
    if any(not (e > 0) for e in errors):
        raise ValueError(f"errors must be positive, got {errors}")
    for a, b in zip(sizes, sizes[1:]):
        if abs(a / b - 2.0) > 1e-9:
            raise ValueError(f"sizes must halve at each step, got {sizes}")
    return [math.log2(a / b) for a, b in zip(errors, errors[1:])]


def tau_star(t):
    return np.minimum(1.0, np.asarray(t, dtype=float))


def weighted_error_trace(times, errors, weight_power: float) -> np.ndarray:
    """``errors * min(1, t)**weight_power``; every time must be positive."""
    times = np.asarray(times, dtype=float)
    if np.any(times <= 0):
        raise ValueError("weighted traces exclude t <= 0")
    return np.asarray(errors, dtype=float) * tau_star(times) ** weight_power


# ---------------------------------------------------------------------------
# reports

CSV_COLUMNS = ["t", "h", "H", "err_u_L2", "err_u_H1", "err_p_L2",
               "w_err_u_L2", "w_err_u_H1", "w_err_p_L2"]

# powers of tau* matching t^{-1/2} in the velocity and pressure bounds
DEFAULT_WEIGHTS = {"u_L2": 0.5, "u_H1": 0.5, "p_L2": 0.5}


@dataclass
class ErrorReport:
    """Error norms per (mesh, sample time) row."""

    sample_times: list = field(default_factory=list)
    mesh_sizes: list = field(default_factory=list)
    coarse_sizes: list = field(default_factory=list)
    velocity_L2_errors: list = field(default_factory=list)
    velocity_H1_errors: list = field(default_factory=list)
    pressure_L2_errors: list = field(default_factory=list)
    weights: dict = field(default_factory=lambda: dict(DEFAULT_WEIGHTS))
    label: str = ""

    def add(self, t, h, H, errs):
        self.sample_times.append(float(t))
        self.mesh_sizes.append(float(h))
        self.coarse_sizes.append(float("nan") if H is None else float(H))
        self.velocity_L2_errors.append(float(errs[0]))
        self.velocity_H1_errors.append(float(errs[1]))
        self.pressure_L2_errors.append(float(errs[2]))

    def _weighted(self, errors, key):
        t = np.asarray(self.sample_times)
        w = np.where(t > 0, tau_star(np.where(t > 0, t, 1.0)) ** self.weights[key], np.nan)
        return list(np.asarray(errors) * w)

    @property
    def weighted_errors(self):
        return {
            "u_L2": self._weighted(self.velocity_L2_errors, "u_L2"),
            "u_H1": self._weighted(self.velocity_H1_errors, "u_H1"),
            "p_L2": self._weighted(self.pressure_L2_errors, "p_L2"),
        }

    def rows(self):
        w = self.weighted_errors
        for i in range(len(self.sample_times)):
            yield [self.sample_times[i], self.mesh_sizes[i], self.coarse_sizes[i],
                   self.velocity_L2_errors[i], self.velocity_H1_errors[i],
                   self.pressure_L2_errors[i], w["u_L2"][i], w["u_H1"][i], w["p_L2"][i]]

    def at_time(self, t):
        idx = [i for i, s in enumerate(self.sample_times) if abs(s - t) <= 1e-9 * max(1, t)]
        return sorted(idx, key=lambda i: -self.mesh_sizes[i])

    def eoc_table(self, t) -> dict:
        """Orders between successive mesh halvings at sample time ``t``."""
        idx = self.at_time(t)
        if len(idx) < 2:
            return {}
        hs = [self.mesh_sizes[i] for i in idx]
        out = {}
        for key, errs in (("u_L2", self.velocity_L2_errors), ("u_H1", self.velocity_H1_errors),
                          ("p_L2", self.pressure_L2_errors)):
            vals = [errs[i] for i in idx]
            out[key] = eoc(vals, hs) if all(v > 0 for v in vals) else []
        return out

    def write_csv(self, path, eoc_times=()):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(CSV_COLUMNS)
            for row in self.rows():
                wr.writerow([_fmt(v) for v in row])
            for t in eoc_times:
                table = self.eoc_table(t)
                if not table:
                    continue
                fh.write(f"# EOC t={_fmt(t)}\n")
                for key, orders in table.items():
                    fh.write(f"# {key}," + ",".join(_fmt(o) for o in orders) + "\n")


def _fmt(v) -> str:
    v = float(v)
    if math.isnan(v):
        return "nan"
    return f"{v:.16e}"


def read_csv(path) -> list:
    rows = []
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rd = csv.DictReader(lines)
    for r in rd:
        rows.append({k: float(v) for k, v in r.items()})
    return rows
