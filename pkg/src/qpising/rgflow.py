"""Multiscale flow of the slow fermion block.

Momentum space is sliced into shells |k|_T ~ (pi/2) * gamma**h by a smooth
radial cutoff, and the quadratic effective action is integrated one shell at
a time.  Each step produces localized corrections to a mass-like coupling
nu_h and two complex velocities a_j^(h); the remainder feeds the next scale
through renormalized chain graphs whose vertices are the effective kernels
of :mod:`qpising.chains`.  The mass counterterm is fixed by a contraction
fixed point (the bounded trajectory of the nu flow), and criticality is the
root of the renormalized mass in beta.

Shell kinematics run at the true irrational frequencies; vertex amplitudes
come from a commensurate reference box, whose phase drift across the box is
far below every tolerance used here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline, RectBivariateSpline
from scipy.optimize import brentq

from .chains import ChainEvaluator
from .kernels import g_psi_inverse, mass_psi_effective, velocity_coefficients
from .qpcore import CouplingField, Frequency, golden, torus_norm

SIGMA2 = ((0.0 + 0.0j, -1.0j), (1.0j, 0.0 + 0.0j))


def torus_norm2(k0, k1):
    """Euclidean torus norm of a momentum pair (componentwise 2*pi reduction)."""
    t0 = torus_norm(k0)
    t1 = torus_norm(k1)
    return np.hypot(t0, t1)


# ---------------------------------------------------------------------------
# cutoff family


@dataclass(frozen=True)
class CutoffFamily:
    """Smooth radial cutoff chi and its shell decomposition.

    chi == 1 below pi/(2*gamma) and == 0 above pi/2; in between it is the
    integral-normalized classical bump exp(-1/((x-a)(b-x))), which is smooth
    with all derivatives vanishing at both edges.  chi_h(k) = chi(|k|_T /
    gamma**h), with the top scale clamped to chi_1 == 1 so the first shell
    absorbs everything above the plateau.  f_h = chi_h - chi_{h-1} and
    f~_h = chi_h (1 - chi_{h-1}).
    """

    gamma: float = 5.0
    points: int = 4097

    def __post_init__(self) -> None:
        if self.gamma <= 1.0:
            raise ValueError("scale ratio must exceed 1")
        a = 0.5 * math.pi / self.gamma
        b = 0.5 * math.pi
        x = np.linspace(a, b, self.points)
        inner = (x - a) * (b - x)
        bump = np.zeros_like(x)
        pos = inner > 0
        bump[pos] = np.exp(-1.0 / inner[pos])
        cum = np.concatenate(([0.0], np.cumsum(0.5 * (bump[1:] + bump[:-1]) * np.diff(x))))
        profile = 1.0 - cum / cum[-1]
        object.__setattr__(self, "_edges", (a, b))
        object.__setattr__(self, "_spline", CubicSpline(x, profile, bc_type="clamped"))

    def chi(self, r):
        """Radial profile at |k|_T = r (reference scale h = 0)."""
        r = np.asarray(r, dtype=float)
        a, b = self._edges
        mid = (r > a) & (r < b)
        out = np.where(r <= a, 1.0, 0.0)
        if np.any(mid):
            out = np.where(mid, np.clip(self._spline(r), 0.0, 1.0), out)
        return out if out.ndim else float(out)

    def chi_h(self, r, h: int):
        if h >= 1:
            return np.ones_like(np.asarray(r, dtype=float)) if np.ndim(r) else 1.0
        return self.chi(np.asarray(r, dtype=float) / self.gamma**h)

    def f_h(self, r, h: int):
        return self.chi_h(r, h) - self.chi_h(r, h - 1)

    def f_tilde(self, r, h: int):
        return self.chi_h(r, h) * (1.0 - self.chi_h(r, h - 1))

    def support(self, h: int) -> tuple[float, float]:
        """Annulus [pi/2 gamma^(h-2), pi/2 gamma^h] containing shell h."""
        return (0.5 * math.pi * self.gamma ** (h - 2), 0.5 * math.pi * self.gamma**h)

    def shells(self, r: float, h_top: int = 1) -> list[int]:
        """Scales h' <= h_top whose f_h' does not vanish at radius r.

        At most two adjacent shells meet any radius; the top shell absorbs
        everything above its plateau because chi there is clamped to one.
        """
        if r <= 0.0:
            return []
        x = math.log(2.0 * r / math.pi, self.gamma)  # support of f_h: h-2 < x < h
        out = set()
        for h in (math.floor(x) + 1, math.floor(x) + 2):
            hc = min(h, h_top)
            if float(self.f_h(r, hc)) > 0.0:
                out.add(hc)
        return sorted(out)


# ---------------------------------------------------------------------------
# running quadratic form


def _reduce(k):
    """Momentum to its torus representative in [-pi, pi].

    Round-to-nearest form: arguments already inside pass through exactly
    (a shifted mod would quantise them at ulp(pi); see torus_norm).
    """
    k = np.asarray(k, float)
    two_pi = 2.0 * math.pi
    return np.clip(k - two_pi * np.round(k / two_pi), -math.pi, math.pi)


def _pack(m00, m01, m10, m11):
    m00, m01, m10, m11 = np.broadcast_arrays(m00, m01, m10, m11)
    out = np.empty(m00.shape + (2, 2), dtype=complex)
    out[..., 0, 0] = m00
    out[..., 0, 1] = m01
    out[..., 1, 0] = m10
    out[..., 1, 1] = m11
    return out


def _inv2(m):
    det = m[..., 0, 0] * m[..., 1, 1] - m[..., 0, 1] * m[..., 1, 0]
    return _pack(m[..., 1, 1], -m[..., 0, 1], -m[..., 1, 0], m[..., 0, 0]) / det[..., None, None]


@dataclass
class FlowContext:
    """Scale-independent data for one (modulation, beta) point.

    The remainder kernels b1, b2 are the quadratic leftovers of the exact
    critical bracket after the linear velocities and the mass are removed;
    per the build contract they are carried on a fixed 64-cell momentum grid
    with cubic interpolation rather than re-evaluated in closed form.
    """

    fam: CutoffFamily
    ev: ChainEvaluator
    t0: float
    t1: float
    nu_top: float = 0.0
    q_max: int = 4
    chain_q: int = 4
    vertex_floor: float = 1e-13
    vertex_cap: int = 6
    mu_override: float | None = None

    def __post_init__(self) -> None:
        self.m_psi = mass_psi_effective(self.t0, self.t1)
        self.a2 = velocity_coefficients(self.t0, self.t1)
        # 64 cells across the zone, padded by 4 cells of genuine kernel data
        # on each side so the fit has interior accuracy at the seam.
        step = 2.0 * math.pi / 64.0
        ks = np.arange(-36, 37) * step
        k0g, k1g = np.meshgrid(ks, ks, indexing="ij")
        K = g_psi_inverse(k0g, k1g, self.t0, self.t1)
        b1 = -K[..., 0, 0] - 1j * self.a2[1] * k1g - self.a2[0] * k0g
        b2 = 1j * K[..., 0, 1] - self.m_psi
        if np.max(np.abs(b2.imag)) > 1e-10:
            raise ArithmeticError("mass remainder kernel acquired an imaginary part")
        self._b1_re = RectBivariateSpline(ks, ks, b1.real)
        self._b1_im = RectBivariateSpline(ks, ks, b1.imag)
        self._b2 = RectBivariateSpline(ks, ks, b2.real)
        self._kernel_cache: dict[tuple[float, float], dict] = {}
        self._alphabet: list[tuple[int, int]] | None = None

    @property
    def gamma(self) -> float:
        return self.fam.gamma

    @property
    def mu(self) -> float:
        if self.mu_override is not None:
            return self.mu_override
        return self.m_psi + self.gamma**2 * self.nu_top

    def remainders(self, k0, k1):
        """(b1, b2) at torus-reduced momenta.

        Round-to-nearest reduction keeps sub-ulp(pi) momenta exact; see
        torus_norm for why a shifted mod would quantise them.
        """
        r0, r1 = _reduce(k0), _reduce(k1)
        b1 = self._b1_re.ev(r0, r1) + 1j * self._b1_im.ev(r0, r1)
        return b1, self._b2.ev(r0, r1)

    def bracket(self, k0, k1, a0, a1):
        """Inverse-propagator 2x2 for velocities (a0, a1) and current mass.

        Linear terms take the reduced momenta as well: the bracket lives on
        the torus, and at the bare velocities this makes it exactly the
        periodic kernel, smooth across the zone seam.
        """
        b1, b2 = self.remainders(k0, k1)
        k0 = _reduce(k0)
        k1 = _reduce(k1)
        e00 = -1j * a1 * k1 - a0 * k0 - b1
        e01 = -1j * (self.mu + b2)
        e11 = -1j * np.conj(a1) * k1 + np.conj(a0) * k0 + np.conj(b1)
        return _pack(e00, e01, -e01, e11)

    # -- effective-kernel vertices -----------------------------------------

    def kernels_at(self, k0: float, k1: float) -> dict:
        key = (round(float(k0), 12), round(float(k1), 12))
        hit = self._kernel_cache.get(key)
        if hit is None:
            table = self.ev.kernels_through(np.array([k0]), np.array([k1]), self.chain_q)
            hit = {n: v[0] for n, v in table.items()}
            self._kernel_cache[key] = hit
        return hit

    def vertex(self, n: tuple[int, int], k0: float, k1: float) -> np.ndarray:
        table = self.kernels_at(k0, k1)
        got = table.get(n)
        if got is None:
            return np.zeros((2, 2), dtype=complex)
        return got

    def vertex_alphabet(self) -> list[tuple[int, int]]:
        """Nonzero harmonics whose kernels are large enough to matter."""
        if self._alphabet is None:
            table = self.kernels_at(0.0, 0.0)
            keep = []
            for n, v in table.items():
                if n == (0, 0):
                    continue
                if abs(n[0]) + abs(n[1]) > self.vertex_cap:
                    continue
                if float(np.max(np.abs(v))) >= self.vertex_floor:
                    keep.append(n)
            self._alphabet = sorted(keep)
        return self._alphabet

    def zero_kernel_jet(self, step: float = 1e-5):
        """(V0(0), d0 V0(0), d1 V0(0)) of the chain potential, central FD."""
        v0 = self.vertex((0, 0), 0.0, 0.0)
        d0 = (self.vertex((0, 0), step, 0.0) - self.vertex((0, 0), -step, 0.0)) / (2 * step)
        d1 = (self.vertex((0, 0), 0.0, step) - self.vertex((0, 0), 0.0, -step)) / (2 * step)
        return v0, d0, d1


# ---------------------------------------------------------------------------
# localization


@dataclass(frozen=True)
class LocalPart:
    nu: float
    da0: complex
    da1: complex
    sigma2_error: float


def localize(v0: np.ndarray, d0: np.ndarray, d1: np.ndarray, h: int,
             gamma: float, tol: float = 1e-10) -> LocalPart:
    """Split a zero-harmonic kernel jet at k=0 into coupling updates.

    The constant part must be of sigma_2 form (that is the structure the
    symmetry checks of the chain module guarantee); its coefficient feeds
    nu_h, while the gradients shift the velocities.
    """
    err = max(abs(v0[0, 0]), abs(v0[1, 1]), abs(v0[0, 1] + v0[1, 0]))
    nu_c = 1j * gamma ** (-h) * v0[0, 1]
    err = max(err, abs(nu_c.imag) * gamma**h)
    if err > tol * max(1.0, abs(v0[0, 1])):
        raise ArithmeticError(
            f"local part at scale {h} is not of sigma_2 form (deviation {err:.3e})")
    return LocalPart(nu=float(nu_c.real),
                     da0=complex(d0[0, 0]),
                     da1=complex(-1j * d1[0, 0]),
                     sigma2_error=float(err))


def taylor_remainder(value, value0, grad0, k0: float, k1: float):
    """R operation: subtract value and gradient at zero momentum."""
    return value - value0 - k0 * grad0[0] - k1 * grad0[1]


# ---------------------------------------------------------------------------
# single-scale propagators


@dataclass(frozen=True)
class ScaleCouplings:
    """Velocities at one scale plus the increments acquired entering it."""

    h: int
    a0: complex
    a1: complex
    d0: complex = 0.0 + 0.0j
    d1: complex = 0.0 + 0.0j


def single_scale_propagator(k0, k1, sc: ScaleCouplings, ctx: FlowContext) -> np.ndarray:
    """g^(h)(k): the shell-h slice of the running propagator.

    Off the top scale it is f_h A_h + f~_h (Abar_h - A_h), where Abar uses
    velocities rolled back toward the previous scale by (1 - chi_h); the
    difference is supported where chi_h < 1, so the f~ factor is free.  At
    h = 1 the clamped chi_1 makes Abar and A coincide.  Brackets are only
    inverted inside the shell, where the determinant guard applies.
    """
    k0 = np.atleast_1d(np.asarray(k0, dtype=float))
    k1 = np.atleast_1d(np.asarray(k1, dtype=float))
    k0, k1 = np.broadcast_arrays(k0, k1)
    r = torus_norm2(k0, k1)
    fh = np.asarray(ctx.fam.f_h(r, sc.h), dtype=float)
    out = np.zeros(k0.shape + (2, 2), dtype=complex)
    if sc.h >= 1:
        live = fh > 0.0
        if np.any(live):
            br = ctx.bracket(k0[live], k1[live], sc.a0, sc.a1)
            _det_guard(br, sc.h, ctx)
            out[live] = fh[live, None, None] * _inv2(br)
        return out
    ft = np.asarray(ctx.fam.f_tilde(r, sc.h), dtype=float)
    live = (fh > 0.0) | (ft > 0.0)
    if not np.any(live):
        return out
    br = ctx.bracket(k0[live], k1[live], sc.a0, sc.a1)
    _det_guard(br, sc.h, ctx)
    a_h = _inv2(br)
    rollback = 1.0 - np.asarray(ctx.fam.chi_h(r[live], sc.h), dtype=float)
    bar = ctx.bracket(k0[live], k1[live],
                      sc.a0 - sc.d0 * rollback, sc.a1 - sc.d1 * rollback)
    _det_guard(bar, sc.h, ctx)
    out[live] = (fh[live, None, None] * a_h
                 + ft[live, None, None] * (_inv2(bar) - a_h))
    return out


def _det_guard(bracket: np.ndarray, h: int, ctx: FlowContext) -> None:
    """The bracket determinant on shell h should sit near its velocity/mass
    scale; anything far below signals a corridor or mass bookkeeping bug."""
    det = bracket[..., 0, 0] * bracket[..., 1, 1] - bracket[..., 0, 1] * bracket[..., 1, 0]
    scale = (0.02 * ctx.gamma**h) ** 2 + ctx.mu**2
    if np.any(np.abs(det) < 1e-8 * scale):
        raise ArithmeticError(f"singular running bracket inside the scale-{h} shell")


def propagator_bound_scan(ctx: FlowContext, sc_of_h, h_values, s_max: int = 2,
                          radial: int = 24, angular: int = 32) -> dict[int, list[float]]:
    """sup |d^s g^(h)| over the shell, rescaled by gamma^(h(1+s)).

    sc_of_h maps a scale to its ScaleCouplings (constant couplings suffice
    for the bound scans).  Derivatives are pure-axis central differences.
    """
    out = {}
    for h in h_values:
        lo, hi = ctx.fam.support(h)
        hi = min(hi, math.pi)
        rs = np.linspace(lo, hi, radial)
        phis = np.linspace(0.0, 2.0 * math.pi, angular, endpoint=False)
        k0 = np.outer(rs, np.cos(phis)).ravel()
        k1 = np.outer(rs, np.sin(phis)).ravel()
        sc = sc_of_h(h)
        step = 1e-3 * ctx.gamma**h
        sups = []
        for s in range(s_max + 1):
            best = 0.0
            for axis in (0, 1):
                acc = np.zeros(k0.shape + (2, 2), dtype=complex)
                for j, w in _fd_stencil(s):
                    o0 = k0 + (step * j if axis == 0 else 0.0)
                    o1 = k1 + (step * j if axis == 1 else 0.0)
                    acc += w * single_scale_propagator(o0, o1, sc, ctx)
                best = max(best, float(np.max(np.abs(acc))) / step**s)
                if s == 0:
                    break
            sups.append(best * ctx.gamma ** (h * (1 + s)))
        out[h] = sups
    return out


def _fd_stencil(order: int) -> list[tuple[int, float]]:
    if order == 0:
        return [(0, 1.0)]
    if order == 1:
        return [(-1, -0.5), (1, 0.5)]
    if order == 2:
        return [(-1, 1.0), (0, -2.0), (1, 1.0)]
    raise ValueError("stencils provided up to second order only")


# ---------------------------------------------------------------------------
# renormalized graph sums


_CHAIN = "chain"
_REMAINDER = "remainder"
_MASS = "mass"


@dataclass(frozen=True)
class BetaValues:
    nu: float = 0.0
    a0: complex = 0.0 + 0.0j
    a1: complex = 0.0 + 0.0j
    graphs: int = 0


def _as_tuple(m: np.ndarray):
    return (complex(m[0, 0]), complex(m[0, 1]), complex(m[1, 0]), complex(m[1, 1]))


def _mul(a, b):
    return (a[0] * b[0] + a[1] * b[2], a[0] * b[1] + a[1] * b[3],
            a[2] * b[0] + a[3] * b[2], a[2] * b[1] + a[3] * b[3])


def _axpy(alpha, a, out):
    return (out[0] + alpha * a[0], out[1] + alpha * a[1],
            out[2] + alpha * a[2], out[3] + alpha * a[3])


class _GraphEngine:
    """Evaluates the scale-h renormalized chain graphs at external momenta
    near zero.  Vertices are effective-kernel harmonics, the Taylor
    remainder of the zero harmonic, or mass insertions gamma^h' nu_h'
    sigma_2; lines carry single-scale propagators on shells between h and
    the top, with the minimum over lines pinned to h.
    """

    def __init__(self, ctx: FlowContext, h: int, couplings: dict[int, ScaleCouplings],
                 nu_traj: dict[int, float]):
        self.ctx = ctx
        self.h = h
        self.couplings = couplings
        self.nu_traj = nu_traj
        self.omega = ctx.ev.omega
        self._gcache: dict[tuple[int, float, float], tuple] = {}
        self._vcache: dict[tuple, tuple] = {}
        v0, d0, d1 = ctx.zero_kernel_jet()
        self._jet = (v0, (d0, d1))
        self._shell_of: dict[tuple[int, int], list[int]] = {}

    def shells_of(self, s: tuple[int, int]) -> list[int]:
        got = self._shell_of.get(s)
        if got is None:
            r = float(torus_norm2(2 * math.pi * self.omega[0] * s[0],
                                  2 * math.pi * self.omega[1] * s[1]))
            got = [hp for hp in self.ctx.fam.shells(r) if hp >= self.h]
            self._shell_of[s] = got
        return got

    def line(self, hp: int, p0: float, p1: float) -> tuple:
        key = (hp, round(p0, 12), round(p1, 12))
        got = self._gcache.get(key)
        if got is None:
            g = single_scale_propagator(np.array([p0]), np.array([p1]),
                                        self.couplings[hp], self.ctx)[0]
            got = _as_tuple(g)
            self._gcache[key] = got
        return got

    def vertex_value(self, kind: str, n: tuple[int, int], hv: int,
                     p0: float, p1: float) -> tuple:
        key = (kind, n, hv, round(p0, 12), round(p1, 12))
        got = self._vcache.get(key)
        if got is not None:
            return got
        if kind == _CHAIN:
            got = _as_tuple(self.ctx.vertex(n, p0, p1))
        elif kind == _REMAINDER:
            v0, grads = self._jet
            got = _as_tuple(taylor_remainder(self.ctx.vertex((0, 0), p0, p1),
                                             v0, grads, p0, p1))
        else:
            amp = self.ctx.gamma**hv * self.nu_traj.get(hv, 0.0)
            got = tuple(amp * x for sig in SIGMA2 for x in sig)
        self._vcache[key] = got
        return got

    def total(self, k0: float, k1: float) -> tuple:
        """Sum of all admissible graphs with 2..q_max vertices at (k0, k1)."""
        alphabet = self.ctx.vertex_alphabet()
        total = (0j, 0j, 0j, 0j)
        for q in range(2, self.ctx.q_max + 1):
            total = self._sum_order(q, alphabet, k0, k1, total)
        return total

    def _sum_order(self, q: int, alphabet, k0: float, k1: float, total: tuple) -> tuple:
        middles = ([(_CHAIN, n) for n in alphabet]
                   + [(_REMAINDER, (0, 0)), (_MASS, (0, 0))])
        ends = [(_CHAIN, n) for n in alphabet]
        alpha_set = set(alphabet)

        def rec(pos: int, prefix: tuple[int, int], verts: list):
            nonlocal total
            if pos == q - 1:
                last_n = (-prefix[0], -prefix[1])
                if last_n == (0, 0) or last_n not in alpha_set:
                    return
                total = self._assignments(verts + [(_CHAIN, last_n)], k0, k1, total)
                return
            options = ends if pos == 0 else middles
            for kind, n in options:
                s = (prefix[0] + n[0], prefix[1] + n[1])
                if s == (0, 0):
                    continue
                if not self.shells_of(s):
                    continue
                rec(pos + 1, s, verts + [(kind, n)])

        rec(0, (0, 0), [])
        return total

    def _assignments(self, verts: list, k0: float, k1: float, total: tuple) -> tuple:
        q = len(verts)
        prefixes = []
        run = (0, 0)
        for kind, n in verts[:-1]:
            run = (run[0] + n[0], run[1] + n[1])
            prefixes.append(run)
        choices = [self.shells_of(s) for s in prefixes]
        if any(not c for c in choices):
            return total
        momenta = [(k0 - 2 * math.pi * self.omega[0] * s[0],
                    k1 - 2 * math.pi * self.omega[1] * s[1]) for s in prefixes]
        for assign in _product(choices):
            if min(assign) != self.h:
                continue
            total = _axpy(1.0, self._value(verts, momenta, assign, k0, k1), total)
        return total

    def _value(self, verts, momenta, assign, k0: float, k1: float) -> tuple:
        q = len(verts)
        # resonant middle pair with a protected inner line gets the R operation
        if (q == 4 and verts[1][0] == _CHAIN and verts[2][0] == _CHAIN
                and verts[1][1] == (-verts[2][1][0], -verts[2][1][1])
                and assign[1] > max(assign[0], assign[2])):
            left = self.vertex_value(_CHAIN, verts[0][1], 0, k0, k1)
            out = _mul(left, self.line(assign[0], *momenta[0]))
            out = _mul(out, self._cluster_remainder(verts[1][1], assign[1], momenta[0]))
            out = _mul(out, self.line(assign[2], *momenta[2]))
            out = _mul(out, self.vertex_value(_CHAIN, verts[3][1], 0, *momenta[2]))
            return out
        out = self._vertex_at(verts[0], assign, 0, k0, k1)
        for i in range(1, q):
            out = _mul(out, self.line(assign[i - 1], *momenta[i - 1]))
            out = _mul(out, self._vertex_at(verts[i], assign, i, *momenta[i - 1]))
        return out

    def _vertex_at(self, vert, assign, pos: int, p0: float, p1: float) -> tuple:
        kind, n = vert
        if kind == _MASS:
            left = assign[pos - 1] if pos > 0 else max(assign)
            right = assign[pos] if pos < len(assign) else max(assign)
            return self.vertex_value(_MASS, n, min(left, right), p0, p1)
        return self.vertex_value(kind, n, 0, p0, p1)

    def _cluster_remainder(self, m: tuple[int, int], hp: int,
                           entering: tuple[float, float]) -> tuple:
        """Taylor remainder of the two-vertex resonant block in its external
        momentum, finite differences at scale-h resolution."""
        step = 1e-3 * self.ctx.gamma**self.h

        def block(p0: float, p1: float) -> tuple:
            v1 = self.vertex_value(_CHAIN, m, 0, p0, p1)
            q0 = p0 - 2 * math.pi * self.omega[0] * m[0]
            q1 = p1 - 2 * math.pi * self.omega[1] * m[1]
            inner = self.line(hp, q0, q1)
            v2 = self.vertex_value(_CHAIN, (-m[0], -m[1]), 0, q0, q1)
            return _mul(_mul(v1, inner), v2)

        val = block(*entering)
        at0 = block(0.0, 0.0)
        g0 = tuple((a - b) / (2 * step) for a, b in zip(block(step, 0.0), block(-step, 0.0)))
        g1 = tuple((a - b) / (2 * step) for a, b in zip(block(0.0, step), block(0.0, -step)))
        return tuple(v - z - entering[0] * x - entering[1] * y
                     for v, z, x, y in zip(val, at0, g0, g1))


def _product(choices):
    if not choices:
        yield ()
        return
    head, *rest = choices
    for h in head:
        for tail in _product(rest):
            yield (h,) + tail


def beta_functions(ctx: FlowContext, h: int, couplings: dict[int, ScaleCouplings],
                   nu_traj: dict[int, float]) -> BetaValues:
    """Localized graph sums entering the scale-h flow step.

    Returns zeros quickly when no reachable transfer momentum lives on a
    shell as deep as h (with narrow harmonic content that happens for every
    h below a small threshold, which is what makes the truncated flow
    finite).
    """
    engine = _GraphEngine(ctx, h, couplings, nu_traj)
    if not any(h in engine.shells_of(s) for s in _reachable_prefixes(ctx)):
        return BetaValues()
    step = 1e-3 * ctx.gamma**h
    w0 = engine.total(0.0, 0.0)
    wp0 = engine.total(step, 0.0)
    wm0 = engine.total(-step, 0.0)
    wp1 = engine.total(0.0, step)
    wm1 = engine.total(0.0, -step)
    beta_nu = (1j * ctx.gamma ** (-h + 1) * w0[1]).real
    beta_a0 = (wp0[0] - wm0[0]) / (2 * step)
    beta_a1 = -1j * (wp1[0] - wm1[0]) / (2 * step)
    return BetaValues(nu=float(beta_nu), a0=complex(beta_a0), a1=complex(beta_a1),
                      graphs=len(engine._vcache))


def _reachable_prefixes(ctx: FlowContext) -> list[tuple[int, int]]:
    alphabet = ctx.vertex_alphabet()
    seen = {(0, 0)}
    frontier = {(0, 0)}
    for _ in range(max(ctx.q_max - 1, 1)):
        nxt = set()
        for s in frontier:
            for n in alphabet:
                t = (s[0] + n[0], s[1] + n[1])
                if t not in seen:
                    nxt.add(t)
        seen |= nxt
        frontier = nxt
    seen.discard((0, 0))
    return sorted(seen)


# ---------------------------------------------------------------------------
# the flow


@dataclass(frozen=True)
class FlowRecord:
    h: int
    nu: float
    a0: complex
    a1: complex
    beta_nu: float
    beta_a0: complex
    beta_a1: complex


@dataclass
class FlowResult:
    records: list[FlowRecord]
    h_min: int
    corridor_ok: bool

    def nu_trajectory(self) -> dict[int, float]:
        return {r.h: r.nu for r in self.records}

    def betas(self) -> dict[int, float]:
        return {r.h: r.beta_nu for r in self.records}


def flow_step(nu: float, a0: complex, a1: complex, beta: BetaValues,
              gamma: float) -> tuple[float, complex, complex]:
    """One step of the coupling recursion: the mass direction is relevant
    (factor gamma), the velocities are marginal."""
    return gamma * nu + beta.nu, a0 + beta.a0, a1 + beta.a1


def default_h_min(mu: float, gamma: float, floor: int = -18) -> int:
    """Flow depth: the mass scale cuts the flow off, with a hard floor."""
    if abs(mu) <= gamma**floor:
        return floor
    return max(int(math.ceil(math.log(abs(mu), gamma))), floor)


def _corridor_ok(a: complex, ref: complex) -> bool:
    return 0.875 * abs(ref) - 1e-12 <= abs(a) <= 1.125 * abs(ref) + 1e-12


def run_flow(ctx: FlowContext, h_min: int | None = None,
             nu_traj: dict[int, float] | None = None) -> FlowResult:
    """One sweep down the scales.

    Velocities advance by their (absolutely summable) increments; the nu
    column is evaluated from the betas by the backward sums that select the
    bounded trajectory -- iterating nu forward would amplify rounding by
    gamma per scale and is numerically meaningless at depth.
    """
    if h_min is None:
        h_min = default_h_min(ctx.mu, ctx.gamma)
    nu_traj = nu_traj or {}

    v0, d0, d1 = ctx.zero_kernel_jet()
    top = localize(v0, d0, d1, 1, ctx.gamma)
    a0_2, a1_2 = ctx.a2
    beta_by_h: dict[int, BetaValues] = {
        2: BetaValues(nu=top.nu, a0=top.da0, a1=top.da1)}
    couplings: dict[int, ScaleCouplings] = {}
    a0, a1 = a0_2 + top.da0, a1_2 + top.da1
    couplings[1] = ScaleCouplings(1, a0, a1, top.da0, top.da1)
    corridor = _corridor_ok(a0, a0_2) and _corridor_ok(a1, a1_2)

    for h in range(1, h_min - 1, -1):
        beta = beta_functions(ctx, h, couplings, nu_traj)
        beta_by_h[h] = beta
        a0, a1 = a0 + beta.a0, a1 + beta.a1
        if not (_corridor_ok(a0, a0_2) and _corridor_ok(a1, a1_2)):
            corridor = False
            raise ArithmeticError(
                f"velocity left the 7/8..9/8 corridor entering scale {h - 1}; "
                "the modulation strength is too large for this flow")
        couplings[h - 1] = ScaleCouplings(h - 1, a0, a1, beta.a0, beta.a1)

    nu_solved = _backward_nu(beta_by_h, ctx.gamma, h_min)
    records = []
    for h in range(2, h_min - 1, -1):
        sc = couplings.get(h)
        if sc is None:
            sc = ScaleCouplings(2, a0_2, a1_2)
        b = beta_by_h.get(h, BetaValues())
        records.append(FlowRecord(h=h, nu=nu_solved.get(h, 0.0), a0=sc.a0, a1=sc.a1,
                                  beta_nu=b.nu, beta_a0=b.a0, beta_a1=b.a1))
    return FlowResult(records=records, h_min=h_min, corridor_ok=corridor)


def _backward_nu(beta_by_h: dict[int, BetaValues], gamma: float, h_min: int) -> dict[int, float]:
    """nu_h = -sum_{k<=h} gamma^(k-h-1) beta_k: the unique trajectory that
    stays bounded as the scale decreases."""
    out = {}
    for h in range(2, h_min - 2, -1):
        acc = 0.0
        for k in range(h_min - 1, h + 1):
            b = beta_by_h.get(k)
            if b is not None and b.nu != 0.0:
                acc += gamma ** (k - h - 1) * b.nu
        out[h] = -acc
    return out


def trajectory_norm(nu_traj: dict[int, float], gamma: float) -> float:
    return math.sqrt(gamma) * sum(abs(v) * gamma ** (-h / 4.0) for h, v in nu_traj.items())


@dataclass
class CountertermSolution:
    nu_top: float
    trajectory: dict[int, float]
    flow: FlowResult
    sweeps: int
    contraction_ratio: float


def solve_counterterm(ctx: FlowContext, h_min: int | None = None,
                      tol: float = 1e-13, max_sweeps: int = 12) -> CountertermSolution:
    """Fixed point of the backward-summed nu trajectory.

    Plain Picard iteration: each sweep recomputes the betas with the
    previous trajectory's mass insertions (and the previous nu_top in mu),
    then re-sums.  The contraction ratio of successive updates in the
    weighted norm is reported; failure to contract means the modulation is
    too strong for this flow.
    """
    traj: dict[int, float] = {}
    last_delta = None
    ratio = 0.0
    flow = None
    for sweep in range(1, max_sweeps + 1):
        ctx.nu_top = traj.get(2, 0.0)
        flow = run_flow(ctx, h_min=h_min, nu_traj=traj)
        new_traj = flow.nu_trajectory()
        delta = trajectory_norm({h: new_traj.get(h, 0.0) - traj.get(h, 0.0)
                                 for h in set(new_traj) | set(traj)}, ctx.gamma)
        if last_delta is not None and last_delta > 0.0:
            ratio = max(ratio, delta / last_delta)
        traj = new_traj
        if delta <= tol * max(1.0, trajectory_norm(traj, ctx.gamma)):
            break
        if last_delta is not None and delta > last_delta and delta > 1e-10:
            raise ArithmeticError(
                "counterterm iteration is not contracting; reduce the modulation strength")
        last_delta = delta
    ctx.nu_top = traj.get(2, 0.0)
    return CountertermSolution(nu_top=ctx.nu_top, trajectory=traj, flow=flow,
                               sweeps=sweep, contraction_ratio=ratio)


# ---------------------------------------------------------------------------
# criticality


@dataclass
class CriticalBetaResult:
    beta_c: float
    b_lambda: float
    iterations: int
    contraction_ratio: float
    scan: list[tuple[float, float]]


def _context_at(beta: float, lam: float, mod_name: str, theta, J, generation: int,
                fam: CutoffFamily, freq: Frequency, chain_q: int, q_max: int) -> FlowContext:
    from .qpcore import BoxSpec, build_couplings, preset_modulation

    box = BoxSpec.from_generation(generation, freq, freq)
    field = build_couplings(box, preset_modulation(mod_name, lam, theta=theta),
                            J=J, beta=beta)
    ev = ChainEvaluator.from_field(field, omega=(freq.omega, freq.omega))
    return FlowContext(fam=fam, ev=ev, t0=field.t_mean[0], t1=field.t_mean[1],
                       chain_q=chain_q, q_max=q_max)


def critical_beta(lam: float, mod_name: str = "single", theta=None,
                  J: tuple[float, float] = (1.0, 1.0), generation: int = 9,
                  fam: CutoffFamily | None = None, freq: Frequency | None = None,
                  bracket: tuple[float, float] = (0.38, 0.50),
                  chain_q: int = 4, q_max: int = 4, h_min: int | None = None,
                  xtol: float = 1e-10) -> CriticalBetaResult:
    """Temperature at which the renormalized mass vanishes.

    The counterterm is re-solved at every probed beta; lam = 0 short-cuts to
    the bare mass root.  The reported shift is relative to the lam = 0 root
    of the same equation.
    """
    fam = fam or CutoffFamily()
    freq = freq or golden()
    stats = {"calls": 0, "ratio": 0.0}
    scan: list[tuple[float, float]] = []

    def bare_mass(beta: float) -> float:
        return mass_psi_effective(math.tanh(beta * J[0]), math.tanh(beta * J[1]))

    def renormalized_mass(beta: float) -> float:
        stats["calls"] += 1
        if lam == 0.0:
            val = bare_mass(beta)
        else:
            ctx = _context_at(beta, lam, mod_name, theta, J, generation, fam, freq,
                              chain_q, q_max)
            sol = solve_counterterm(ctx, h_min=h_min)
            stats["ratio"] = max(stats["ratio"], sol.contraction_ratio)
            val = ctx.m_psi + fam.gamma**2 * sol.nu_top
        scan.append((beta, val))
        return val

    lo, hi = bracket
    f_lo, f_hi = renormalized_mass(lo), renormalized_mass(hi)
    if f_lo * f_hi > 0.0:
        raise ValueError(f"no sign change of the renormalized mass on [{lo}, {hi}]; "
                         f"scan trace: {scan}")
    root = float(brentq(renormalized_mass, lo, hi, xtol=xtol))
    base = float(brentq(bare_mass, lo, hi, xtol=xtol))
    return CriticalBetaResult(beta_c=root, b_lambda=root - base,
                              iterations=stats["calls"],
                              contraction_ratio=stats["ratio"], scan=sorted(scan))


# ---------------------------------------------------------------------------
# Diophantine gain


@dataclass(frozen=True)
class ClusterNode:
    """A (sub)diagram summary: total transfer index and external scale."""

    n_total: tuple[int, int]
    h_ext: int

    @property
    def resonant(self) -> bool:
        return self.n_total == (0, 0)


def deepest_external_scale(n: tuple[int, int], freq0: Frequency, freq1: Frequency,
                           gamma: float) -> int:
    """Deepest h at which both external lines of a transfer-n block can live:
    the two shell constraints force |2 pi Omega n|_T <= pi gamma^h."""
    r = float(torus_norm2(2 * math.pi * freq0.omega * n[0],
                          2 * math.pi * freq1.omega * n[1]))
    if r == 0.0:
        return -(10**6)
    return int(math.ceil(math.log(r / math.pi, gamma)))


def diophantine_gain_check(clusters, fam: CutoffFamily, freq0: Frequency,
                           freq1: Frequency | None = None,
                           c_values: tuple[float, float] | None = None) -> list[dict]:
    """Small divisors force large transfer indices: |n_T| >= C0 gamma^(-h/tau).

    C0 is max(c0, c1)/(2 pi) from the measured torus-distance constants and
    tau the larger approximation exponent; resonant clusters are exempt.
    Returns one record per cluster with the bound and the verdict.
    """
    freq1 = freq1 or freq0
    if c_values is None:
        c_values = (freq0.c_lower or freq0.estimate_c(),
                    freq1.c_lower or freq1.estimate_c())
    c0 = max(c_values) / (2.0 * math.pi)
    tau = max(freq0.rho, freq1.rho)
    out = []
    for cl in clusters:
        if cl.resonant:
            out.append({"cluster": cl, "exempt": True, "ok": True,
                        "bound": 0.0, "size": 0.0})
            continue
        size = float(abs(cl.n_total[0]) + abs(cl.n_total[1]))
        bound = c0 * fam.gamma ** (-cl.h_ext / tau)
        out.append({"cluster": cl, "exempt": False, "ok": size >= bound,
                    "bound": bound, "size": size})
    return out


def sample_clusters(freq0: Frequency, freq1: Frequency, fam: CutoffFamily,
                    count: int = 200, n_max: int = 400, seed: int = 7) -> list[ClusterNode]:
    """Random transfer indices, each annotated with its deepest admissible
    external scale; |n| is capped so the scan stays desk sized."""
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < count:
        n = (int(rng.integers(-n_max, n_max + 1)), int(rng.integers(-n_max, n_max + 1)))
        if n == (0, 0):
            continue
        h = deepest_external_scale(n, freq0, freq1, fam.gamma)
        if h > 1:
            continue
        out.append(ClusterNode(n_total=n, h_ext=h))
    return out


# ---------------------------------------------------------------------------
# position-space propagator tails


_ENVELOPE_BINS = np.linspace(1.0, 10.0, 37)
_ENVELOPE_SPLIT = 4.0  # boundary between the near and far fit windows


def stretched_exp_check(ctx: FlowContext, h_values=tuple(range(-8, 1)),
                        n_grid: int = 512, kappa_box: float = 5.0,
                        rectangular: bool = False) -> dict:
    """Position-space test of the propagator tails.

    Samples g^(h) on the rescaled momentum box [-kappa_box, kappa_box)^2,
    transforms each matrix entry to position space, and fits the log of the
    radial envelope against sqrt(gamma^h |x|) on a near and a far window.
    A smooth cutoff must give the same positive stretched rate kappa on
    both, stable in h; a sharp annulus indicator (rectangular=True) is the
    negative control -- its tails are algebraic, so the apparent rate falls
    off on the far window.  Envelopes share a fixed bin grid in the rescaled
    coordinate so curves for different h overlay directly.
    """
    gamma = ctx.gamma
    a0, a1 = ctx.a2
    report: dict = {"kappa": {}, "kappa_near": {}, "envelopes": {}}
    centers = 0.5 * (_ENVELOPE_BINS[:-1] + _ENVELOPE_BINS[1:])
    for h in h_values:
        # keep the sampled momenta clear of the 2 pi wrap, which would fold
        # periodic copies of the shell into the box at the top scales
        box = min(kappa_box, 0.55 * 2.0 * math.pi * gamma ** (-h))
        kap = np.fft.fftfreq(n_grid, d=1.0 / (2.0 * box))
        kx, ky = np.meshgrid(kap, kap, indexing="ij")
        sc = ScaleCouplings(h, a0, a1)
        if rectangular:
            g = _rectangular_propagator(gamma**h * kx, gamma**h * ky, sc, ctx)
        else:
            g = single_scale_propagator(gamma**h * kx, gamma**h * ky, sc, ctx)
        mag = np.zeros((n_grid, n_grid))
        for i in (0, 1):
            for j in (0, 1):
                mag = np.maximum(mag, np.abs(np.fft.ifft2(g[..., i, j])))
        mag *= gamma**h
        dx = 2.0 * math.pi / (2.0 * box)
        ix = np.fft.fftfreq(n_grid, d=1.0 / n_grid)
        X = np.hypot(*np.meshgrid(ix * dx, ix * dx, indexing="ij"))
        u = np.sqrt(X).ravel()
        y = mag.ravel()
        env = np.full(centers.shape, np.nan)
        for b, (lo, hi) in enumerate(zip(_ENVELOPE_BINS[:-1], _ENVELOPE_BINS[1:])):
            m = (u >= lo) & (u < hi)
            if np.any(m):
                env[b] = math.log(max(float(np.max(y[m])), 1e-300))
        good = ~np.isnan(env)
        good &= env > np.nanmax(env) - 34.0  # stay above the rounding floor
        far = good & (centers >= _ENVELOPE_SPLIT)
        near = good & (centers < _ENVELOPE_SPLIT)
        slope, _ = np.polyfit(centers[far], env[far], 1)
        report["kappa"][h] = float(-slope)
        slope_n, _ = np.polyfit(centers[near], env[near], 1)
        report["kappa_near"][h] = float(-slope_n)
        report["envelopes"][h] = env
    ks = list(report["kappa"].values())
    mean = float(np.mean(ks))
    report["kappa_spread"] = (max(ks) - min(ks)) / abs(mean) if ks else math.nan
    overlaps = []
    hs = sorted(report["envelopes"])
    for h1, h2 in zip(hs, hs[1:]):
        e1, e2 = report["envelopes"][h1], report["envelopes"][h2]
        both = ~np.isnan(e1) & ~np.isnan(e2)
        both &= (e1 > np.nanmax(e1) - 34.0) & (e2 > np.nanmax(e2) - 34.0)
        if np.any(both):
            # absolute log-envelope mismatch; the curves are in log scale so
            # a ratio would explode wherever an envelope crosses zero
            overlaps.append(float(np.max(np.abs(e1[both] - e2[both]))))
    report["collapse"] = max(overlaps) if overlaps else math.nan
    return report


def _rectangular_propagator(k0, k1, sc: ScaleCouplings, ctx: FlowContext) -> np.ndarray:
    r = torus_norm2(np.asarray(k0, float), np.asarray(k1, float))
    lo, hi = ctx.fam.support(sc.h)
    ind = ((r > lo) & (r <= hi)).astype(float)
    k0, k1 = np.broadcast_arrays(np.asarray(k0, float), np.asarray(k1, float))
    out = np.zeros(k0.shape + (2, 2), dtype=complex)
    live = ind > 0.0
    if np.any(live):
        br = ctx.bracket(k0[live], k1[live], sc.a0, sc.a1)
        _det_guard(br, sc.h, ctx)
        out[live] = _inv2(br)
    return out


# ---------------------------------------------------------------------------
# response-coupling flow


@dataclass
class SourceFlowResult:
    couplings: dict[tuple[int, tuple[int, int]], dict[int, complex]]
    increments: list[tuple[int, tuple[int, tuple[int, int]], float]]
    envelope_constant: float


def source_flow(ctx: FlowContext, field: CouplingField, h_min: int | None = None,
                n_cap: int = 8) -> SourceFlowResult:
    """Flow of the energy-source amplitudes Z_(h,n) per bond direction.

    Initialized from the dressed single-insertion kernels at zero momentum;
    each step adds the one-insertion graphs with a scale-h line and one
    effective vertex, on both sides of the insertion.  The increments obey
    a Cauchy envelope C |lambda| gamma^h exp(-eta |n|/4), whose fitted
    constant is returned.
    """
    from .chains import dressed_source_kernel, source_amplitudes

    if h_min is None:
        h_min = default_h_min(ctx.mu, ctx.gamma)
    eta = field.mod.decay_eta
    lam = field.lam
    tables = source_amplitudes(field)
    z: dict[tuple[int, tuple[int, int]], complex] = {}
    for j in (0, 1):
        for n in tables[j]:
            if abs(n[0]) + abs(n[1]) > n_cap:
                continue
            kern = dressed_source_kernel(field, j, n, 0.0, 0.0,
                                         omega=ctx.ev.omega)
            z[(j, n)] = complex(1j * kern[0, 1])
    history = {key: {2: val} for key, val in z.items()}
    increments = []
    a0, a1 = ctx.a2
    om = ctx.ev.omega
    for h in range(1, h_min - 1, -1):
        sc = ScaleCouplings(h, a0, a1)
        new = dict(z)
        for (j, n), zval in z.items():
            beta_z = 0j
            for (jm, m), zm in z.items():
                if jm != j or m == n:
                    continue
                d = (n[0] - m[0], n[1] - m[1])
                p = (-2 * math.pi * om[0] * m[0], -2 * math.pi * om[1] * m[1])
                r = float(torus_norm2(*p))
                if r > 0.0 and float(ctx.fam.f_h(r, h)) > 0.0:
                    g = single_scale_propagator(np.array([p[0]]), np.array([p[1]]), sc, ctx)[0]
                    v = ctx.vertex(d, p[0], p[1])
                    zmat = np.array([[0.0, -1j * zm], [1j * zm, 0.0]])
                    w = zmat @ g @ v + v @ g @ zmat
                    beta_z += 1j * w[0, 1]
            if beta_z != 0j:
                new[(j, n)] = new[(j, n)] + beta_z
                increments.append((h, (j, n), abs(beta_z)))
        z = new
        for key, val in z.items():
            history[key][h - 1] = val
    env = 0.0
    for h, (j, n), mag in increments:
        denom = max(abs(lam), 1e-300) * ctx.gamma**h * math.exp(-eta * (abs(n[0]) + abs(n[1])) / 4.0)
        env = max(env, mag / denom)
    return SourceFlowResult(couplings=history, increments=increments,
                            envelope_constant=env)
