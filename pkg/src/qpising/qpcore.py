"""Quasi-periodic coupling fields on rational-approximant boxes.

Number-theoretic helpers (continued fractions, best approximants, torus
distances, empirical Diophantine constants) plus construction of the
modulated bond couplings and their exact lattice Fourier data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

GOLDEN_MEAN = (math.sqrt(5.0) - 1.0) / 2.0
SILVER_MEAN = math.sqrt(2.0) - 1.0

# Continued-fraction remainders below this are treated as exact zeros
# (rational input).
_RATIONAL_EPS = 1e-12

# Default expansion depth.  Float64 runs out of precision near depth ~20 for
# quadratic irrationals (convergent error ~ q_i^-2 hits machine eps), so we
# stay comfortably below that.
_CF_DEPTH = 18


def continued_fraction(omega: float, depth: int) -> tuple[list[int], bool]:
    """Continued-fraction coefficients [a_0, a_1, ..., a_depth] of omega.

    omega must lie in (0, 1), so a_0 = 0 always.  Returns (coefficients,
    terminated); terminated=True means a remainder hit zero before the
    requested depth (rational input) and the list is shorter.
    """
    if not 0.0 < omega < 1.0:
        raise ValueError(f"omega must lie in (0,1), got {omega}")
    if depth < 1:
        raise ValueError("depth must be >= 1")
    coeffs = [0]
    x = omega
    for _ in range(depth):
        inv = 1.0 / x
        a = int(math.floor(inv))
        frac = inv - a
        if frac > 1.0 - _RATIONAL_EPS:
            # floor landed one below an integer within rounding noise
            a += 1
            frac = 0.0
        coeffs.append(a)
        if frac < _RATIONAL_EPS:
            return coeffs, True
        x = frac
    return coeffs, False


def best_approximants(omega: float, depth: int) -> tuple[list[tuple[int, int]], bool]:
    """Convergents p_i/q_i of omega with q_i >= 2, by the standard recursion.

    Returns (pairs, terminated).  Each pair satisfies |omega - p/q| <= 1/q^2;
    denominators are strictly increasing.  terminated=True means the expansion
    ended early (rational omega) and the list is truncated.
    """
    coeffs, terminated = continued_fraction(omega, depth)
    p_prev, q_prev = 1, 0
    p_cur, q_cur = coeffs[0], 1
    pairs: list[tuple[int, int]] = []
    for a in coeffs[1:]:
        p_cur, p_prev = a * p_cur + p_prev, p_cur
        q_cur, q_prev = a * q_cur + q_prev, q_cur
        if q_cur >= 2:
            pairs.append((p_cur, q_cur))
    return pairs, terminated


def torus_norm(x):
    """Distance from x to the nearest multiple of 2*pi; values in [0, pi].

    Reduced as x - 2*pi*round(x/(2*pi)) rather than through a shifted mod,
    so arguments already in (-pi, pi) pass through exactly; the mod form
    quantises momenta below ~1e-13 to multiples of ulp(pi), which is fatal
    for finite differences on deep renormalization scales.
    """
    x = np.asarray(x, dtype=float)
    two_pi = 2.0 * math.pi
    r = np.abs(x - two_pi * np.round(x / two_pi))
    r = np.minimum(r, math.pi)
    return float(r) if r.ndim == 0 else r


@dataclass
class Frequency:
    """A frequency in (0,1) with its continued-fraction and Diophantine data.

    rho is the Diophantine exponent in |2*pi*omega*n|_T >= c / |n|^rho;
    c_lower holds the empirical constant once estimate_c has run.
    """

    omega: float
    rho: float = 1.0
    depth: int = _CF_DEPTH
    cf_coefficients: list[int] = dc_field(default_factory=list)
    terminated: bool = False
    c_lower: float | None = None

    def __post_init__(self) -> None:
        if not self.cf_coefficients:
            self.cf_coefficients, self.terminated = continued_fraction(self.omega, self.depth)

    def approximants(self) -> list[tuple[int, int]]:
        pairs, _ = best_approximants(self.omega, self.depth)
        return pairs

    def estimate_c(self, n_max: int = 100_000) -> float:
        self.c_lower = diophantine_constant(self, n_max)
        return self.c_lower


def golden() -> Frequency:
    return Frequency(GOLDEN_MEAN)


def silver() -> Frequency:
    return Frequency(SILVER_MEAN)


def diophantine_constant(freq: Frequency, n_max: int) -> float:
    """min over 1 <= n <= n_max of |2*pi*omega*n|_T * n^rho.

    Positive for irrational omega; collapses to ~0 at n = q for rational p/q.
    """
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    best = math.inf
    chunk = 1 << 20
    for lo in range(1, n_max + 1, chunk):
        hi = min(lo + chunk - 1, n_max)
        n = np.arange(lo, hi + 1, dtype=np.float64)
        frac = np.remainder(n * freq.omega, 1.0)
        dist = 2.0 * math.pi * np.minimum(frac, 1.0 - frac)
        best = min(best, float(np.min(dist * n**freq.rho)))
    return best


# ---------------------------------------------------------------------------
# boxes


@dataclass(frozen=True)
class BoxSpec:
    """A finite torus whose side lengths are approximant denominators.

    The box frequencies are the rationals p0/L0 and p1/L1; numerators are kept
    coprime to the sides so harmonic indices map bijectively onto DFT bins.
    """

    L0: int
    L1: int
    p0: int
    p1: int
    generation: int | None = None

    def __post_init__(self) -> None:
        for L, p in ((self.L0, self.p0), (self.L1, self.p1)):
            if L < 3:
                raise ValueError(f"degenerate box side {L}; smallest supported is 3")
            if not (1 <= p < L):
                raise ValueError(f"box numerator {p} outside [1, {L})")
            if math.gcd(p, L) != 1:
                raise ValueError(f"box numerator {p} not coprime to side {L}")

    @property
    def n_sites(self) -> int:
        return self.L0 * self.L1

    @property
    def omega_box(self) -> tuple[float, float]:
        return (self.p0 / self.L0, self.p1 / self.L1)

    def fourier_window(self) -> tuple[int, int]:
        """Largest representable |n_j| per axis (floor(L/2))."""
        return (self.L0 // 2, self.L1 // 2)

    @classmethod
    def from_generation(cls, generation: int, freq0: Frequency | None = None,
                        freq1: Frequency | None = None) -> "BoxSpec":
        """Box sides from the generation-th best approximant (1-based)."""
        freq0 = freq0 or golden()
        freq1 = freq1 or freq0
        pairs0 = freq0.approximants()
        pairs1 = freq1.approximants()
        if not 1 <= generation <= min(len(pairs0), len(pairs1)):
            raise ValueError(f"generation {generation} outside the available ladder "
                             f"(1..{min(len(pairs0), len(pairs1))})")
        p0, L0 = pairs0[generation - 1]
        p1, L1 = pairs1[generation - 1]
        return cls(L0=L0, L1=L1, p0=p0, p1=p1, generation=generation)

    @classmethod
    def commensurate(cls, L0: int, L1: int, freq0: Frequency | None = None,
                     freq1: Frequency | None = None) -> "BoxSpec":
        """Arbitrary-side box; numerators are the closest coprime rationals."""
        freq0 = freq0 or golden()
        freq1 = freq1 or freq0

        def nearest(L: int, omega: float) -> int:
            cands = [p for p in range(1, L) if math.gcd(p, L) == 1]
            return min(cands, key=lambda p: abs(omega - p / L))

        return cls(L0=L0, L1=L1, p0=nearest(L0, freq0.omega), p1=nearest(L1, freq1.omega))


# ---------------------------------------------------------------------------
# modulation


def _check_harmonics(table: dict[tuple[int, int], complex], A: float, eta: float) -> None:
    for n, amp in table.items():
        n0, n1 = n
        conj_key = (-n0, -n1)
        if conj_key not in table or abs(np.conj(table[conj_key]) - amp) > 1e-12:
            raise ValueError(f"harmonic table not Hermitian at n={n}")
        if abs(amp) > A * math.exp(-eta * (abs(n0) + abs(n1))) + 1e-12:
            raise ValueError(f"harmonic {n} violates the decay envelope A*exp(-eta|n|)")


@dataclass(frozen=True)
class ModulationSpec:
    """Quasi-periodic modulation profile: one harmonic table per bond direction.

    theta[j] = (theta_{j,0}, theta_{j,1}) are the phase offsets entering the
    arguments 2*pi*omega_i*x_i + theta_{j,i}.
    """

    lam: float
    harmonics: tuple[dict[tuple[int, int], complex], dict[tuple[int, int], complex]]
    decay_A: float = 2.0
    decay_eta: float = 1.0
    theta: tuple[tuple[float, float], tuple[float, float]] = ((0.0, 0.0), (0.0, 0.0))

    def __post_init__(self) -> None:
        if self.decay_A <= 0 or self.decay_eta <= 0:
            raise ValueError("decay constants must be positive")
        for j in (0, 1):
            _check_harmonics(self.harmonics[j], self.decay_A, self.decay_eta)

    def phi(self, j: int, y0: np.ndarray, y1: np.ndarray) -> np.ndarray:
        """Evaluate phi^(j) at angle arrays y0, y1 (already phase-shifted)."""
        out = np.zeros(np.broadcast(y0, y1).shape, dtype=complex)
        for (n0, n1), amp in self.harmonics[j].items():
            out += amp * np.exp(1j * (n0 * y0 + n1 * y1))
        if np.max(np.abs(out.imag)) > 1e-10:
            raise ValueError("harmonic table produced a non-real modulation")
        return out.real

    def max_abs(self, j: int) -> float:
        return float(sum(abs(a) for a in self.harmonics[j].values()))


def preset_modulation(name: str, lam: float,
                      theta: tuple[tuple[float, float], tuple[float, float]] | None = None,
                      ) -> ModulationSpec:
    """Named modulation profiles used throughout the test battery.

    single   cos(y_1) on both bond directions
    layered  direction 0 unmodulated, cos(y_1) on direction 1
    double   cos(y_1) + 0.5 cos(y_0 + y_1) on both directions
    """
    cos1 = {(0, 1): 0.5 + 0j, (0, -1): 0.5 + 0j}
    if name == "single":
        tables = (dict(cos1), dict(cos1))
    elif name == "layered":
        tables = ({}, dict(cos1))
    elif name == "double":
        mixed = dict(cos1)
        mixed[(1, 1)] = 0.25 + 0j
        mixed[(-1, -1)] = 0.25 + 0j
        tables = (dict(mixed), dict(mixed))
    else:
        raise ValueError(f"unknown modulation preset {name!r}")
    kwargs = {} if theta is None else {"theta": theta}
    return ModulationSpec(lam=lam, harmonics=tables, **kwargs)


# ---------------------------------------------------------------------------
# coupling fields


@dataclass
class CouplingField:
    """Bond couplings J_x^(j), their tanh images, and exact Fourier data."""

    box: BoxSpec
    J: tuple[float, float]
    beta: float
    mod: ModulationSpec
    J_bonds: np.ndarray          # (2, L0, L1)
    t_bonds: np.ndarray          # (2, L0, L1)
    t_mean: tuple[float, float]
    V: np.ndarray                # (2, L0, L1), zero-mean fluctuation of t
    vhat: tuple[dict[tuple[int, int], complex], dict[tuple[int, int], complex]]
    ahat: tuple[dict[tuple[int, int], complex], dict[tuple[int, int], complex]]

    @property
    def lam(self) -> float:
        return self.mod.lam

    def signature(self, include_beta: bool = True):
        """Hashable identity of this field (for caches)."""
        tables = tuple(
            tuple(sorted((n, complex(a)) for n, a in self.mod.harmonics[j].items()))
            for j in (0, 1)
        )
        key = (self.box.L0, self.box.L1, self.box.p0, self.box.p1,
               self.J, self.mod.lam, tables, self.mod.theta)
        return key + (self.beta,) if include_beta else key


def build_couplings(box: BoxSpec, mod: ModulationSpec, J: tuple[float, float],
                    beta: float) -> CouplingField:
    """Fill a CouplingField: J_x^(j) = (1 + lam*phi^(j)(...)) * J^(j)."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    if J[0] <= 0 or J[1] <= 0:
        raise ValueError("base couplings must be positive")
    w0, w1 = box.fourier_window()
    for j in (0, 1):
        for (n0, n1) in mod.harmonics[j]:
            if abs(n0) > w0 or abs(n1) > w1:
                raise ValueError(
                    f"harmonic {(n0, n1)} outside the box Fourier window "
                    f"(|n0|<={w0}, |n1|<={w1})")

    x0 = np.arange(box.L0)[:, None]
    x1 = np.arange(box.L1)[None, :]
    om0, om1 = box.omega_box

    J_bonds = np.empty((2, box.L0, box.L1))
    for j in (0, 1):
        th0, th1 = mod.theta[j]
        y0 = 2.0 * math.pi * om0 * x0 + th0
        y1 = 2.0 * math.pi * om1 * x1 + th1
        phi = mod.phi(j, y0, y1) if mod.harmonics[j] else np.zeros((box.L0, box.L1))
        J_bonds[j] = (1.0 + mod.lam * phi) * J[j]

    if np.min(J_bonds) <= 0.0:
        raise ValueError(
            f"modulation drives some couplings non-positive "
            f"(min J_x = {np.min(J_bonds):.6g}); reduce lambda")

    t_bonds = np.tanh(beta * J_bonds)
    t_mean = (float(np.mean(t_bonds[0])), float(np.mean(t_bonds[1])))
    V = t_bonds - np.array(t_mean)[:, None, None]

    vhat, ahat = _fourier_tables(box, mod, V)
    field = CouplingField(box=box, J=J, beta=beta, mod=mod, J_bonds=J_bonds,
                          t_bonds=t_bonds, t_mean=t_mean, V=V, vhat=vhat, ahat=ahat)
    for arr in (field.J_bonds, field.t_bonds, field.V):
        arr.setflags(write=False)
    return field


def _fourier_tables(box: BoxSpec, mod: ModulationSpec, V: np.ndarray):
    """Exact DFT harmonic tables of the fluctuations.

    u_n is the raw DFT bin at (n0*p0 mod L0, n1*p1 mod L1); the two stored
    tables differ by phase conventions only:
        vhat_n = u_n * exp(-i n.theta_j)
        ahat_n = u_n * exp(-i pi omega_j n_j)   (the bond-midpoint half-phase)
    """
    L0, L1 = box.L0, box.L1
    om = box.omega_box
    n0_vals = list(range(-((L0 - 1) // 2), L0 // 2 + 1))
    n1_vals = list(range(-((L1 - 1) // 2), L1 // 2 + 1))
    vhat: tuple[dict, dict] = ({}, {})
    ahat: tuple[dict, dict] = ({}, {})
    for j in (0, 1):
        F = np.fft.fft2(V[j]) / (L0 * L1)
        scale = max(1.0, float(np.max(np.abs(F))))
        th0, th1 = mod.theta[j]
        for n0 in n0_vals:
            m0 = (n0 * box.p0) % L0
            for n1 in n1_vals:
                m1 = (n1 * box.p1) % L1
                u = F[m0, m1]
                if abs(u) <= 1e-15 * scale:
                    continue  # below FFT rounding dust
                if n0 == 0 and n1 == 0:
                    continue  # zero-mean by construction; drop rounding dust
                vhat[j][(n0, n1)] = u * np.exp(-1j * (n0 * th0 + n1 * th1))
                half = om[1] * n1 if j == 1 else om[0] * n0
                ahat[j][(n0, n1)] = u * np.exp(-1j * math.pi * half)
    return vhat, ahat


def fourier_coefficients(field: CouplingField):
    """Recompute (vhat, ahat) from the stored fluctuation arrays."""
    return _fourier_tables(field.box, field.mod, field.V)
