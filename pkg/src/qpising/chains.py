"""Perturbative expansion of the effective light-fermion potential.

After the massive species is integrated out, the quadratic potential left
behind organises into chain graphs: an ordered string of harmonic-transfer
vertices joined by massive propagators, each chain carrying the total
harmonic of its vertices.  This module evaluates those chains to any order
and cross-checks them against a direct Schur-complement elimination of the
massive block on a finite sector grid, which involves no graph expansion at
all and therefore arbitrates every sign and endpoint convention.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from .kernels import (
    MomentumGrid,
    c_matrix,
    dressed_vertices,
    g_psi_inverse,
    g_xi,
    q_matrix,
    source_vertex_matrices,
    vertex_matrices,
)
from .qpcore import CouplingField

Vertex = tuple[int, tuple[int, int]]  # (direction j, harmonic n)


def harmonic_support(field: CouplingField) -> list[tuple[int, tuple[int, int], complex]]:
    """Flatten the amplitude tables into (j, n, amplitude) triples."""
    out = []
    for j in (0, 1):
        for n, amp in sorted(field.ahat[j].items()):
            out.append((j, n, complex(amp)))
    return out


def enumerate_graphs(n: tuple[int, int], q: int,
                     support: list[Vertex]) -> list[tuple[Vertex, ...]]:
    """All ordered vertex strings of length q whose harmonics sum to n."""
    if q < 1:
        raise ValueError("chain order must be >= 1")
    hits = []
    for combo in itertools.product(support, repeat=q):
        s0 = sum(v[1][0] for v in combo)
        s1 = sum(v[1][1] for v in combo)
        if (s0, s1) == n:
            hits.append(combo)
    return hits


class _EvalContext:
    """Per-momentum-set caches shared across chain orders.

    Distinct (prefix harmonic, vertex harmonic) pairs are few even when the
    number of chains is large, so vertex and propagator matrices are built
    once per pair.
    """

    def __init__(self, ev: "ChainEvaluator", k0: np.ndarray, k1: np.ndarray):
        self.ev = ev
        self.k0 = k0
        self.k1 = k1
        self.shape = np.broadcast(k0, k1).shape
        self._gxi: dict[tuple[int, int], np.ndarray] = {}
        self._bare: dict[tuple, dict] = {}
        self._dressed: dict[tuple, dict] = {}

    def gxi(self, nsum: tuple[int, int]) -> np.ndarray:
        if nsum not in self._gxi:
            s0, s1 = self.ev._shifted(self.k0, self.k1, nsum)
            self._gxi[nsum] = g_xi(s0, s1, self.ev.t0, self.ev.t1)
        return self._gxi[nsum]

    def bare(self, nsum: tuple[int, int], n: tuple[int, int]) -> dict:
        key = (nsum, n)
        if key not in self._bare:
            s0, s1 = self.ev._shifted(self.k0, self.k1, nsum)
            self._bare[key] = vertex_matrices(s0, s1, n, self.ev.omega)
        return self._bare[key]

    def dressed(self, nsum: tuple[int, int], n: tuple[int, int]) -> dict:
        key = (nsum, n)
        if key not in self._dressed:
            s0, s1 = self.ev._shifted(self.k0, self.k1, nsum)
            self._dressed[key] = dressed_vertices(
                s0, s1, n, self.ev.omega, self.ev.t0, self.ev.t1,
                bare=self.bare(nsum, n))
        return self._dressed[key]


@dataclass
class ChainEvaluator:
    """Evaluates chain-graph sums for one coupling field.

    endpoint: how the outgoing end of a chain with two or more vertices is
    dressed.  "entering" reuses the mixed vertex of the incoming side
    evaluated at the last internal momentum; "reflected" attaches the
    massive dressing on the shifted (outgoing) side instead.  The reflected
    form is the one the exact elimination validates; "entering" is kept as a
    deliberately falsifiable alternative.
    """

    t0: float
    t1: float
    omega: tuple[float, float]
    amplitudes: dict[Vertex, complex]
    endpoint: str = "reflected"

    def __post_init__(self):
        if self.endpoint not in ("entering", "reflected"):
            raise ValueError(f"unknown endpoint convention {self.endpoint!r}")
        self.support = sorted(self.amplitudes)

    @classmethod
    def from_field(cls, field: CouplingField, omega: tuple[float, float] | None = None,
                   endpoint: str = "reflected") -> "ChainEvaluator":
        amps = {(j, n): a for j, n, a in harmonic_support(field)}
        om = field.box.omega_box if omega is None else omega
        t0, t1 = field.t_mean
        return cls(t0=float(t0), t1=float(t1), omega=om, amplitudes=amps,
                   endpoint=endpoint)

    # -- single-order kernels ------------------------------------------------

    def _shifted(self, k0, k1, nsum: tuple[int, int]):
        return (k0 - 2.0 * math.pi * self.omega[0] * nsum[0],
                k1 - 2.0 * math.pi * self.omega[1] * nsum[1])

    def _context(self, k0, k1) -> "_EvalContext":
        return _EvalContext(self, np.asarray(k0, dtype=float),
                            np.asarray(k1, dtype=float))

    def _steps(self) -> dict[tuple[int, int], list[tuple[int, complex]]]:
        """Support regrouped by harmonic: n -> [(j, amp), ...]."""
        by_n: dict[tuple[int, int], list[tuple[int, complex]]] = {}
        for (j, n), amp in self.amplitudes.items():
            by_n.setdefault(n, []).append((j, amp))
        return by_n

    def order_kernels(self, k0, k1, q: int,
                      ctx: "_EvalContext | None" = None) -> dict[tuple[int, int], np.ndarray]:
        """All chain kernels of exactly q vertices, keyed by total harmonic.

        k0, k1 broadcast; values have shape broadcast(k0,k1) + (2, 2).
        Each vertex couples through minus its harmonic amplitude; this sign,
        like the endpoint dressing, is pinned by the exact elimination.

        Although the number of chains grows like |support|^q, the value of a
        prefix depends only on its running harmonic, so the sum over chains
        is a banded transfer-operator power: cost per order is (number of
        reachable prefixes) x (support harmonics), not exponential.
        """
        if ctx is None:
            ctx = self._context(k0, k1)
        steps = self._steps()

        if q == 1:
            out = {}
            for n, jamps in steps.items():
                acc = 0
                D = ctx.dressed((0, 0), n)
                for j, amp in jamps:
                    acc = acc + (-amp) * D[f"Ppsi_{j}"]
                out[n] = acc
            return out

        which = "Qpsi" if self.endpoint == "entering" else "Rpsi"
        # prefix sums over all chains of d vertices, keyed by running harmonic
        A: dict[tuple[int, int], np.ndarray] = {}
        for n, jamps in steps.items():
            D = ctx.dressed((0, 0), n)
            acc = 0
            for j, amp in jamps:
                acc = acc + (-amp) * D[f"Qpsi_{j}"]
            A[n] = A[n] + acc if n in A else acc
        for _ in range(q - 2):
            B: dict[tuple[int, int], np.ndarray] = {}
            for nsum, prefix in A.items():
                carried = prefix @ ctx.gxi(nsum)
                for n, jamps in steps.items():
                    V = ctx.bare(nsum, n)
                    step = 0
                    for j, amp in jamps:
                        step = step + (-amp) * V[f"P{j}"]
                    n2 = (nsum[0] + n[0], nsum[1] + n[1])
                    val = carried @ step
                    B[n2] = B[n2] + val if n2 in B else val
            A = B
        out: dict[tuple[int, int], np.ndarray] = {}
        for nsum, prefix in A.items():
            carried = prefix @ ctx.gxi(nsum)
            for n, jamps in steps.items():
                D = ctx.dressed(nsum, n)
                step = 0
                for j, amp in jamps:
                    step = step + (-amp) * D[f"{which}_{j}"]
                n2 = (nsum[0] + n[0], nsum[1] + n[1])
                val = carried @ step
                out[n2] = out[n2] + val if n2 in out else val
        return out

    def order_kernels_reference(self, k0, k1, q: int) -> dict[tuple[int, int], np.ndarray]:
        """Literal chain-by-chain evaluation (exponential; for cross-checks)."""
        ctx = self._context(k0, k1)
        shape = ctx.shape
        out: dict[tuple[int, int], np.ndarray] = {}

        if q == 1:
            for (j, n), amp in self.amplitudes.items():
                out.setdefault(n, np.zeros(shape + (2, 2), complex))
                out[n] += (-amp) * ctx.dressed((0, 0), n)[f"Ppsi_{j}"]
            return out

        which = "Qpsi" if self.endpoint == "entering" else "Rpsi"

        def descend(depth: int, nsum: tuple[int, int], prefix: np.ndarray):
            for (j, n), amp in self.amplitudes.items():
                nsum2 = (nsum[0] + n[0], nsum[1] + n[1])
                if depth == q:
                    last = ctx.dressed(nsum, n)[f"{which}_{j}"]
                    val = prefix @ (ctx.gxi(nsum) @ ((-amp) * last))
                    out.setdefault(nsum2, np.zeros(shape + (2, 2), complex))
                    out[nsum2] += val
                else:
                    nxt = prefix @ (ctx.gxi(nsum) @ ((-amp) * ctx.bare(nsum, n)[f"P{j}"]))
                    descend(depth + 1, nsum2, nxt)

        for (j, n), amp in self.amplitudes.items():
            head = (-amp) * ctx.dressed((0, 0), n)[f"Qpsi_{j}"]
            descend(2, n, head)
        return out

    def kernels_through(self, k0, k1, q_max: int,
                        q_min: int = 1) -> dict[tuple[int, int], np.ndarray]:
        """Chain kernels summed over orders q_min..q_max."""
        ctx = self._context(k0, k1)
        total: dict[tuple[int, int], np.ndarray] = {}
        for q in range(q_min, q_max + 1):
            for n, val in self.order_kernels(k0, k1, q, ctx=ctx).items():
                if n in total:
                    total[n] = total[n] + val
                else:
                    total[n] = val
        return total

    def reachable(self, q_max: int) -> set[tuple[int, int]]:
        steps = sorted({n for (_, n) in self.support})
        reach = {(0, 0)}
        frontier = {(0, 0)}
        out: set[tuple[int, int]] = set()
        for _ in range(q_max):
            frontier = {(a + d0, b + d1) for (a, b) in frontier for (d0, d1) in steps}
            out |= frontier
            reach |= frontier
        return out

    def tail_bound(self, q: int, gxi_norm: float, c1: float = 4.0) -> float:
        """Crude geometric bound on the dropped orders > q."""
        a = max((abs(v) for v in self.amplitudes.values()), default=0.0)
        m = len(self.support)
        r = m * a * c1 * gxi_norm
        if r >= 1.0:
            return math.inf
        lead = (m * a * c1) * (m * a * c1 * gxi_norm) ** q / gxi_norm
        return lead / (1.0 - r)


def max_gxi_norm(t0: float, t1: float, samples: int = 64) -> float:
    """Spectral-norm sup of the massive propagator over the torus."""
    ks = np.linspace(-math.pi, math.pi, samples, endpoint=False)
    G = g_xi(ks[:, None], ks[None, :], t0, t1)
    return float(np.linalg.norm(G, ord=2, axis=(-2, -1)).max())


# ---------------------------------------------------------------------------
# direct elimination of the massive block on a sector grid


@dataclass
class SchurOracle:
    """Effective light-species kernels obtained with no graph expansion.

    The full quadratic action of both species is assembled as one
    antisymmetric matrix over (species, grid momentum, spinor); eliminating
    the massive block by a Schur complement leaves the exact effective
    kernels, read back blockwise.
    """

    grid: MomentumGrid
    kernels: dict[tuple[int, int], np.ndarray]  # n -> (L0, L1, 2, 2), NaN where unreadable
    n_sites: int

    def kernel(self, n: tuple[int, int]) -> np.ndarray:
        return self.kernels[n]

    def potential(self, n: tuple[int, int], gpsi_ref=None) -> np.ndarray:
        """delta_{n,0} gpsi_inverse - K_n; the chain series target."""
        K = self.kernels[n]
        if n == (0, 0):
            if gpsi_ref is None:
                raise ValueError("need the free inverse propagator for n = 0")
            return gpsi_ref - K
        return -K


def _assemble_species_matrix(field: CouplingField, grid: MomentumGrid) -> np.ndarray:
    """Antisymmetric action matrix of both species on one sector grid."""
    box = field.box
    L0, L1 = box.L0, box.L1
    nsites = L0 * L1
    dim = 2 * nsites * 2  # species x momenta x spinor
    M = np.zeros((dim, dim), dtype=complex)
    t0, t1 = (float(x) for x in field.t_mean)
    om = box.omega_box

    k0g, k1g = grid.mesh()
    m0g, m1g = np.meshgrid(np.arange(L0), np.arange(L1), indexing="ij")
    flat = (m0g * L1 + m1g).ravel()
    neg0, neg1 = np.vectorize(grid.negate)(m0g, m1g)
    negflat = (neg0 * L1 + neg1).ravel()

    def idx(species: int, flat_idx, s: int):
        return (species * nsites + flat_idx) * 2 + s

    def add_term(coef: float, species_a: int, species_b: int,
                 X: np.ndarray, n: tuple[int, int]):
        # coef/(4|Lambda|) * sum_k zeta_{-k} X(k) zeta'_{k - 2 pi Omega n}
        if n == (0, 0):
            shiftflat = flat
        else:
            s0 = (m0g - box.p0 * n[0]) % L0
            s1 = (m1g - box.p1 * n[1]) % L1
            shiftflat = (s0 * L1 + s1).ravel()
        Xf = X.reshape(-1, 2, 2)
        for s in (0, 1):
            for sp in (0, 1):
                rows = idx(species_a, negflat, s)
                cols = idx(species_b, shiftflat, sp)
                vals = coef * Xf[:, s, sp] / (4.0 * nsites)
                np.add.at(M, (rows, cols), vals)
                np.add.at(M, (cols, rows), -vals)

    # free kernels and the species-mixing term
    add_term(-1.0, 0, 0, c_matrix(k0g, k1g, t0, t1, "psi"), (0, 0))
    add_term(-1.0, 1, 1, c_matrix(k0g, k1g, t0, t1, "chi"), (0, 0))
    Q = q_matrix(k0g, k1g, t0, t1)
    add_term(+1.0, 0, 1, Q, (0, 0))
    add_term(+1.0, 1, 0, Q, (0, 0))

    # harmonic-transfer terms
    for j, n, amp in harmonic_support(field):
        V = vertex_matrices(k0g, k1g, n, om)
        add_term(-1.0, 0, 0, amp * V[f"P{j}"], n)
        add_term(-1.0, 1, 1, amp * V[f"P{j}"], n)
        add_term(+1.0, 0, 1, amp * V[f"Q{j}"], n)
        add_term(+1.0, 1, 0, amp * V[f"Q{j}"], n)
    return M


def schur_oracle(field: CouplingField, sector: str = "--",
                 harmonics: list[tuple[int, int]] | None = None) -> SchurOracle:
    """Eliminate the massive species exactly and read back the effective
    kernels K_n(k) on the sector grid.  Entries whose row and column blocks
    coincide (self-paired momenta) are returned as NaN."""
    box = field.box
    grid = MomentumGrid(box.L0, box.L1, box.p0, box.p1, sector)
    L0, L1 = box.L0, box.L1
    nsites = L0 * L1
    M = _assemble_species_matrix(field, grid)

    asym = np.max(np.abs(M + M.T))
    if asym > 1e-12 * max(1.0, np.max(np.abs(M))):
        raise ArithmeticError(f"assembled action lost antisymmetry ({asym:.3e})")

    Mpp = M[: 2 * nsites, : 2 * nsites]
    Mpc = M[: 2 * nsites, 2 * nsites:]
    Mcp = M[2 * nsites:, : 2 * nsites]
    Mcc = M[2 * nsites:, 2 * nsites:]
    Meff = Mpp - Mpc @ np.linalg.solve(Mcc, Mcp)

    if harmonics is None:
        seen = {n for j in (0, 1) for n in field.ahat[j]}
        harmonics = [(0, 0)] + sorted(seen)

    out: dict[tuple[int, int], np.ndarray] = {}
    for n in harmonics:
        K = np.full((L0, L1, 2, 2), np.nan, dtype=complex)
        for m0 in range(L0):
            for m1 in range(L1):
                a = grid.negate(m0, m1)
                b = grid.shift(m0, m1, n)
                if a == b:
                    continue  # self-paired block: only its antisymmetric part exists
                af = (a[0] * L1 + a[1]) * 2
                bf = (b[0] * L1 + b[1]) * 2
                K[m0, m1] = -2.0 * nsites * Meff[af:af + 2, bf:bf + 2]
        out[n] = K
    return SchurOracle(grid=grid, kernels=out, n_sites=nsites)


def oracle_comparison(field: CouplingField, q_max: int, sector: str = "--",
                      endpoint: str = "reflected",
                      harmonics: list[tuple[int, int]] | None = None):
    """Max deviation between the chain series through q_max and the exact
    elimination, per harmonic and per order (cumulative)."""
    oracle = schur_oracle(field, sector=sector, harmonics=harmonics)
    grid = oracle.grid
    k0g, k1g = grid.mesh()
    t0, t1 = (float(x) for x in field.t_mean)
    gref = g_psi_inverse(k0g, k1g, t0, t1)
    ev = ChainEvaluator.from_field(field, endpoint=endpoint)
    ctx = ev._context(k0g, k1g)

    targets = {}
    for n in oracle.kernels:
        tgt = oracle.potential(n, gpsi_ref=gref if n == (0, 0) else None)
        targets[n] = tgt

    deviations: list[dict] = []
    running: dict[tuple[int, int], np.ndarray] = {}
    for q in range(1, q_max + 1):
        for n, val in ev.order_kernels(k0g, k1g, q, ctx=ctx).items():
            running[n] = running.get(n, 0) + val
        per_n = {}
        for n, tgt in targets.items():
            have = running.get(n)
            if have is None:
                have = np.zeros_like(tgt)
            diff = have - tgt
            good = ~np.isnan(tgt[..., 0, 0])
            per_n[n] = float(np.max(np.abs(diff[good]))) if good.any() else 0.0
        deviations.append({"q": q, "per_harmonic": per_n,
                           "max": max(per_n.values())})
    return deviations


# ---------------------------------------------------------------------------
# structure and decay diagnostics


def structure_errors(V0: np.ndarray, k0, k1) -> dict[str, float]:
    """How far a zero-harmonic kernel sits from its expected algebra:
    [[a, ib], [-ib, -conj(a)]] with a odd and b even real under k -> -k.

    V0 must be sampled on a grid closed under negation; k0, k1 are the
    sampled momenta and the check pairs each k with -k by lookup.
    """
    a = V0[..., 0, 0]
    b = -1j * V0[..., 0, 1]
    errs = {
        "corner": float(np.max(np.abs(V0[..., 1, 1] + np.conj(a)))),
        "offdiag": float(np.max(np.abs(V0[..., 1, 0] + V0[..., 0, 1]))),
        "b_real": float(np.max(np.abs(b.imag))),
    }
    # pair k with -k via a tolerant dictionary on rounded momenta
    key = lambda u, v: (round(float(u) % (2 * math.pi), 9) % round(2 * math.pi, 9),
                        round(float(v) % (2 * math.pi), 9) % round(2 * math.pi, 9))
    flat_a = a.ravel()
    flat_b = b.ravel()
    k0f = np.asarray(np.broadcast_to(k0, a.shape), float).ravel()
    k1f = np.asarray(np.broadcast_to(k1, a.shape), float).ravel()
    lut = {key(u, v): i for i, (u, v) in enumerate(zip(k0f, k1f))}
    aodd = beven = 0.0
    for i, (u, v) in enumerate(zip(k0f, k1f)):
        jdx = lut.get(key(-u, -v))
        if jdx is None:
            continue
        aodd = max(aodd, abs(flat_a[i] + flat_a[jdx]))
        beven = max(beven, abs(flat_b[i] - flat_b[jdx]))
    errs["a_odd"] = float(aodd)
    errs["b_even"] = float(beven)
    return errs


def mirror_conjugation_error(ev: ChainEvaluator, q_max: int, k0, k1) -> float:
    """Worst deviation from V_n(k) = S conj(V_{-n}(-k)) S with S the spinor
    swap [[0,1],[1,0]].

    Relabeling k -> -k in the antisymmetric pairing reverses the spinor
    order, so conjugation invariance of the action pins this swapped form
    rather than the entrywise one (which fails already for the free
    bracket).  Momenta need not form a grid: each (k, n) is paired with a
    fresh evaluation at (-k, -n).
    """
    swap = np.array([[0.0, 1.0], [1.0, 0.0]])
    kp = ev.kernels_through(k0, k1, q_max)
    km = ev.kernels_through(-np.asarray(k0, float), -np.asarray(k1, float), q_max)
    worst = 0.0
    for n, val in kp.items():
        mirror = km.get((-n[0], -n[1]))
        if mirror is None:
            continue
        dev = np.max(np.abs(val - swap @ np.conj(mirror) @ swap))
        worst = max(worst, float(dev))
    return worst


def layered_line_errors(ev: ChainEvaluator, q_max: int,
                        samples: int = 41, step: float = 1e-5) -> dict[str, float]:
    """Checks special to modulations that are constant along axis 0.

    On the k0 = 0 line every chain is a product of axis-1 vertices and
    propagator entries that are all purely imaginary, so the zero-harmonic
    kernel entries must be too; away from that line the property degrades
    at second order in the modulation strength and is not asserted.  The
    payoff is that both localized velocity corrections come out real:
    d/dk0 of the (0,0) entry at k = 0 is real, d/dk1 is purely imaginary.
    """
    k1 = np.linspace(-math.pi, math.pi, samples)
    k0 = np.zeros_like(k1)
    on_line = ev.kernels_through(k0, k1, q_max)[(0, 0)]
    errs = {"line_real": float(np.max(np.abs(on_line.real)))}

    pts0 = ev.kernels_through(np.array([-step, step]), np.zeros(2), q_max)[(0, 0)]
    pts1 = ev.kernels_through(np.zeros(2), np.array([-step, step]), q_max)[(0, 0)]
    d0 = (pts0[1, 0, 0] - pts0[0, 0, 0]) / (2 * step)
    d1 = (pts1[1, 0, 0] - pts1[0, 0, 0]) / (2 * step)
    errs["velocity0_imag"] = float(abs(d0.imag))
    errs["velocity1_real"] = float(abs(d1.real))
    return errs


def decay_profile(ev: ChainEvaluator, q_max: int, k0=0.0, k1=0.0):
    """(|n|_1, log max-abs) samples of the effective kernels at one momentum,
    with a least-squares slope over the nonzero harmonics."""
    kern = ev.kernels_through(np.atleast_1d(k0), np.atleast_1d(k1), q_max)
    pts = []
    for n, val in sorted(kern.items()):
        r = abs(n[0]) + abs(n[1])
        mag = float(np.max(np.abs(val)))
        if r > 0 and mag > 0.0:
            pts.append((r, math.log(mag)))
    if len({r for r, _ in pts}) >= 2:
        rs = np.array([p[0] for p in pts], float)
        ls = np.array([p[1] for p in pts], float)
        slope = float(np.polyfit(rs, ls, 1)[0])
    else:
        slope = math.nan
    return pts, slope


# ---------------------------------------------------------------------------
# energy-source amplitudes (for the response-coefficient flow)


def source_amplitudes(field: CouplingField):
    """Harmonic tables of 1 - t_x^2 per direction, bond-midpoint phased.

    Unlike the coupling fluctuations these keep their zero harmonic: the
    uniform part of the source bilinear is the plain energy operator.
    """
    box = field.box
    L0, L1 = box.L0, box.L1
    om = box.omega_box
    w0, w1 = box.fourier_window()
    out: tuple[dict, dict] = ({}, {})
    D = 1.0 - field.t_bonds ** 2
    for j in (0, 1):
        F = np.fft.fft2(D[j]) / (L0 * L1)
        scale = max(1.0, float(np.max(np.abs(F))))
        for n0 in range(-w0, w0 + 1):
            for n1 in range(-w1, w1 + 1):
                u = F[(n0 * box.p0) % L0, (n1 * box.p1) % L1]
                if abs(u) <= 1e-15 * scale:
                    continue
                half = om[1] * n1 if j == 1 else om[0] * n0
                out[j][(n0, n1)] = u * np.exp(-1j * math.pi * half)
    return out


def dressed_source_kernel(field: CouplingField, j: int, n: tuple[int, int],
                          k0, k1, omega: tuple[float, float] | None = None) -> np.ndarray:
    """Single-insertion dressed kernel of the direction-j energy source at
    harmonic n (no zero-harmonic cutoffs on the vertex trigonometry)."""
    om = field.box.omega_box if omega is None else omega
    t0, t1 = (float(x) for x in field.t_mean)
    amps = source_amplitudes(field)
    amp = amps[j].get(n)
    if amp is None:
        return np.zeros(np.broadcast(np.asarray(k0), np.asarray(k1)).shape + (2, 2), complex)
    bare = source_vertex_matrices(k0, k1, n, om)
    D = dressed_vertices(k0, k1, n, om, t0, t1, bare=bare)
    return amp * D[f"Ppsi_{j}"]
