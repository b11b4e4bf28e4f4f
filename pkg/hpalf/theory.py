"""Numeric verification of the optimal-discriminator and generator-optimality results.

Everything here works on small discrete sample spaces with float64 numpy and
is independent of the networks.
"""

from __future__ import annotations

import csv
import itertools
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Literal

import numpy as np

from .errors import ConfigurationError, ConvergenceError, DivergenceError, UndefinedPointError
from .objectives import kl_divergence

logger = logging.getLogger("hpalf")

Variant = Literal["kl_only", "kl_plus_scalar"]
Solver = Literal["newton", "projected"]

SUM_TOLERANCE = 1e-12


def _check_distribution(values: np.ndarray, name: str) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 1 or np.any(values < 0) or abs(values.sum() - 1.0) > SUM_TOLERANCE:
        raise ConfigurationError(f"{name} must be a non-negative vector summing to 1")
    return values


@dataclass
class DiscreteWorld:
    """Data and generator distributions over a few sample points plus the two anchors."""

    p_data: np.ndarray
    p_g: np.ndarray
    r1: np.ndarray
    r0: np.ndarray
    allow_degenerate: bool = False

    def __post_init__(self) -> None:
        self.p_data = _check_distribution(self.p_data, "p_data")
        self.p_g = _check_distribution(self.p_g, "p_g")
        self.r1 = _check_distribution(self.r1, "R1")
        self.r0 = _check_distribution(self.r0, "R0")
        if self.p_data.shape != self.p_g.shape or self.r1.shape != self.r0.shape:
            raise ConfigurationError("p_data/p_g and R1/R0 must have matching lengths")
        if not self.anchors_distinct and not self.allow_degenerate:
            raise ConfigurationError("anchors must differ on at least one outcome")

    @property
    def n_x(self) -> int:
        return self.p_data.size

    @property
    def outcomes(self) -> int:
        return self.r1.size

    @property
    def anchors_distinct(self) -> bool:
        return bool(np.any(self.r1 != self.r0))

    def with_generator(self, p_g: np.ndarray) -> "DiscreteWorld":
        return DiscreteWorld(self.p_data, p_g, self.r1, self.r0, allow_degenerate=self.allow_degenerate)


@dataclass(frozen=True)
class ClosedForm:
    """The printed optimum, the anchor mixture, and the normalised proof distribution."""

    printed: np.ndarray
    mixture: np.ndarray
    proof: np.ndarray


def _masses(world: DiscreteWorld, x: int) -> tuple[float, float]:
    p_data, p_g = float(world.p_data[x]), float(world.p_g[x])
    if p_data + p_g <= 0:
        raise UndefinedPointError(f"both p_data and p_g vanish at x={x}")
    return p_data, p_g


def optimal_D_closed_form(world: DiscreteWorld, x: int) -> ClosedForm:
    p_data, p_g = _masses(world, x)
    total = p_data + p_g
    mixture = (world.r1 * p_data + world.r0 * p_g) / total
    proof = p_data * (world.r1 + 1.0) + p_g * world.r0
    return ClosedForm(printed=p_data / total + mixture, mixture=mixture, proof=proof / proof.sum())


def _variant_weights(world: DiscreteWorld, x: int, variant: Variant) -> np.ndarray:
    p_data, p_g = _masses(world, x)
    if variant == "kl_only":
        return p_data * world.r1 + p_g * world.r0
    if variant == "kl_plus_scalar":
        return p_data * (world.r1 + 1.0) + p_g * world.r0
    raise ConfigurationError(f"unknown objective variant {variant!r}")


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort and threshold)."""
    u = np.sort(v)[::-1]
    cssv = np.cumsum(u) - 1.0
    index = np.arange(1, v.size + 1)
    rho = np.nonzero(u - cssv / index > 0)[0][-1]
    theta = cssv[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


@dataclass
class SimplexSolution:
    point: np.ndarray
    iterations: int
    gradient_norm: float


def _cross_entropy(weights: np.ndarray, d: np.ndarray) -> float:
    return float(-np.sum(weights * np.log(d)))


def _tangent_norm(gradient: np.ndarray) -> float:
    return float(np.linalg.norm(gradient - gradient.mean()))


def _newton(weights: np.ndarray, tol: float, max_iter: int) -> SimplexSolution:
    d = np.full(weights.size, 1.0 / weights.size)
    norm = np.inf
    for iteration in range(max_iter):
        gradient = -weights / d
        norm = _tangent_norm(gradient)
        if norm < tol:
            return SimplexSolution(d, iteration, norm)
        curvature = weights / d**2
        lam = np.sum(gradient / curvature) / np.sum(1.0 / curvature)
        step = -(gradient - lam) / curvature
        f0, slope, t = _cross_entropy(weights, d), float(gradient @ step), 1.0
        while True:
            candidate = d + t * step
            if np.all(candidate > 0) and _cross_entropy(weights, candidate) <= f0 + 1e-4 * t * slope:
                break
            t *= 0.5
            if t < 1e-30:
                # no further decrease is representable
                return SimplexSolution(d, iteration, norm)
        d = candidate / candidate.sum()
    raise ConvergenceError("simplex Newton solver did not converge", gradient_norm=norm)


def _projected_gradient(weights: np.ndarray, tol: float, max_iter: int, step: float) -> SimplexSolution:
    d = np.full(weights.size, 1.0 / weights.size)
    norm = np.inf
    for iteration in range(max_iter):
        gradient = -weights / d
        norm = _tangent_norm(gradient)
        if norm < tol:
            return SimplexSolution(d, iteration, norm)
        d = np.maximum(project_simplex(d - step * gradient), 1e-12)
        d /= d.sum()
    raise ConvergenceError("projected gradient did not converge", gradient_norm=norm)


def minimize_on_simplex(
    weights: np.ndarray,
    *,
    solver: Solver = "newton",
    tol: float = 1e-10,
    max_iter: int | None = None,
    step: float = 1e-2,
) -> SimplexSolution:
    """Minimise ``-sum(w * log d)`` over the probability simplex."""
    if np.any(weights < 0) or weights.sum() <= 0:
        raise ConfigurationError("weights must be non-negative and not all zero")
    if solver == "newton":
        return _newton(weights, tol, max_iter or 500)
    if solver == "projected":
        return _projected_gradient(weights, tol, max_iter or 100_000, step)
    raise ConfigurationError(f"unknown solver {solver!r}")


def optimal_D_numeric(
    world: DiscreteWorld, x: int, variant: Variant = "kl_only", *, solver: Solver = "newton"
) -> np.ndarray:
    """Numerically optimal perspective at ``x`` for one well-posed reading of the value function."""
    return minimize_on_simplex(_variant_weights(world, x, variant), solver=solver).point


def value_function_eval(world: DiscreteWorld, perspectives: np.ndarray, scalars: np.ndarray) -> float:
    """Value function for per-point perspectives (n_x, K) and scalars (n_x,)."""
    perspectives = np.asarray(perspectives, dtype=np.float64)
    scalars = np.asarray(scalars, dtype=np.float64)
    if np.any(perspectives <= 0):
        raise DivergenceError("perspectives must be strictly positive")
    if np.any(scalars <= 0) or np.any(scalars >= 1):
        raise DivergenceError("scalar outputs must lie strictly inside (0, 1)")
    kl_real = kl_divergence(world.r1, perspectives)
    kl_fake = kl_divergence(world.r0, perspectives)
    real_part = world.p_data * (kl_real + np.log(scalars))
    fake_part = world.p_g * (kl_fake + np.log(1.0 - scalars))
    return float(real_part.sum() + fake_part.sum())


def generator_criterion(world: DiscreteWorld) -> float:
    """sum_x (p_data + p_g) KL(M(x, .) || (R1 + R0) / 2) with the optimal kl_only discriminator."""
    midpoint = 0.5 * (world.r1 + world.r0)
    total = 0.0
    for x in range(world.n_x):
        mass = world.p_data[x] + world.p_g[x]
        if mass <= 0:
            continue
        mixture = (world.r1 * world.p_data[x] + world.r0 * world.p_g[x]) / mass
        total += mass * kl_divergence(mixture, midpoint)
    return float(total)


def printed_v_prime(world: DiscreteWorld) -> float:
    """Closed-form V' expression taken at face value; NaN where its second argument is not a distribution."""
    total = 0.0
    for x in range(world.n_x):
        p = (world.p_data[x] * world.r1 + world.p_g[x] * world.r0) / 2.0
        q = (world.p_data[x] + world.p_g[x]) * (world.r1 + world.r0 - 1.0) * 0.5 / 4.0
        support = p > 0
        if np.any(q[support] <= 0):
            return float("nan")
        total += float(np.sum(p[support] * np.log(p[support] / q[support])))
    return -2.0 * total


def simplex_grid(n_x: int, step: float) -> np.ndarray:
    """All distributions over ``n_x`` points whose entries are multiples of ``step``."""
    if not 1 <= n_x <= 4:
        raise ConfigurationError(f"grid sweeps support 1..4 sample points, got {n_x}")
    parts = int(round(1.0 / step))
    if parts < 1 or abs(parts * step - 1.0) > 1e-9:
        raise ConfigurationError(f"grid step {step} must divide 1")
    rows = [
        (*head, parts - sum(head))
        for head in itertools.product(range(parts + 1), repeat=n_x - 1)
        if sum(head) <= parts
    ]
    return np.asarray(rows, dtype=np.float64) / parts


@dataclass
class GeneratorSweepReport:
    grid: np.ndarray
    criterion: np.ndarray
    printed: np.ndarray
    data_index: int
    minimizer: np.ndarray
    minimum: float
    unique_minimum: bool
    zero_iff_data: bool
    separation: list[tuple[float, float]] = field(default_factory=list)

    @property
    def separation_monotone(self) -> bool:
        strengths = [s for _, s in self.separation]
        return all(b >= a - 1e-15 for a, b in zip(strengths, strengths[1:]))


def generator_optimality_sweep(
    world: DiscreteWorld, *, step: float = 0.02, separations: Iterable[float] = (0.0, 0.25, 0.5, 0.75, 1.0)
) -> GeneratorSweepReport:
    """Evaluate the generator criterion over a grid of p_g that contains p_data itself."""
    grid = simplex_grid(world.n_x, step)
    matches = np.nonzero(np.all(np.abs(grid - world.p_data) < 1e-12, axis=1))[0]
    if matches.size:
        data_index = int(matches[0])
    else:
        grid = np.vstack([grid, world.p_data])
        data_index = grid.shape[0] - 1

    criterion = np.array([generator_criterion(world.with_generator(p_g)) for p_g in grid])
    printed = np.array([printed_v_prime(world.with_generator(p_g)) for p_g in grid])
    best = int(np.argmin(criterion))
    minimum = float(criterion[best])
    zeros = np.nonzero(criterion <= 1e-15)[0]
    unique = best == data_index and int(np.sum(criterion <= minimum + 1e-12)) == 1
    report = GeneratorSweepReport(
        grid=grid,
        criterion=criterion,
        printed=printed,
        data_index=data_index,
        minimizer=grid[best],
        minimum=minimum,
        unique_minimum=unique,
        zero_iff_data=zeros.tolist() == [data_index],
    )

    midpoint = 0.5 * (world.r1 + world.r0)
    for s in separations:
        scaled = DiscreteWorld(
            world.p_data,
            world.p_g,
            midpoint + s * (world.r1 - midpoint),
            midpoint + s * (world.r0 - midpoint),
            allow_degenerate=True,
        )
        strength = float(np.mean([generator_criterion(scaled.with_generator(p_g)) for p_g in grid]))
        gap = float(np.max(np.abs(scaled.r1 - scaled.r0)))
        report.separation.append((gap, strength))
    return report


def random_world(rng: np.random.Generator, n_x: int = 3, outcomes: int = 10, step: float = 0.02) -> DiscreteWorld:
    """A world whose p_data lies on the sweep grid and covers every sample point."""
    parts = int(round(1.0 / step))
    cuts = np.sort(rng.choice(np.arange(1, parts), size=n_x - 1, replace=False))
    counts = np.diff(np.concatenate([[0], cuts, [parts]]))
    p_data = counts / parts
    p_data[-1] = 1.0 - p_data[:-1].sum()
    p_g = rng.dirichlet(np.ones(n_x))
    p_g[-1] = 1.0 - p_g[:-1].sum()
    r1 = rng.dirichlet(np.full(outcomes, 2.0))
    r0 = rng.dirichlet(np.full(outcomes, 2.0))
    r1[-1] = 1.0 - r1[:-1].sum()
    r0[-1] = 1.0 - r0[:-1].sum()
    return DiscreteWorld(p_data, p_g, r1, r0)


@dataclass(frozen=True)
class TheoryRow:
    world_id: int
    variant: str
    sup_gap: float
    c_minimizer: str
    passed: str


def verify_theory(n_worlds: int = 100, *, seed: int = 0, n_x: int = 3, outcomes: int = 10, step: float = 0.02) -> list[TheoryRow]:
    """Compare numeric optima with the closed forms on random worlds and sweep the generator criterion."""
    rng = np.random.default_rng(seed)
    rows: list[TheoryRow] = []
    for world_id in range(n_worlds):
        world = random_world(rng, n_x, outcomes, step)
        report = generator_optimality_sweep(world, step=step)
        location = "(" + " ".join(f"{v:.2f}" for v in report.minimizer) + ")"
        sweep_ok = report.unique_minimum and report.zero_iff_data
        gaps = {"kl_only": 0.0, "kl_plus_scalar": 0.0, "printed_vs_kl_only": 0.0, "printed_vs_kl_plus_scalar": 0.0}
        for x in range(world.n_x):
            closed = optimal_D_closed_form(world, x)
            kl_only = optimal_D_numeric(world, x, "kl_only")
            kl_plus = optimal_D_numeric(world, x, "kl_plus_scalar")
            gaps["kl_only"] = max(gaps["kl_only"], float(np.max(np.abs(kl_only - closed.mixture))))
            gaps["kl_plus_scalar"] = max(gaps["kl_plus_scalar"], float(np.max(np.abs(kl_plus - closed.proof))))
            gaps["printed_vs_kl_only"] = max(
                gaps["printed_vs_kl_only"], float(np.max(np.abs(closed.printed - kl_only)))
            )
            gaps["printed_vs_kl_plus_scalar"] = max(
                gaps["printed_vs_kl_plus_scalar"], float(np.max(np.abs(closed.printed - kl_plus)))
            )
        rows.append(TheoryRow(world_id, "kl_only", gaps["kl_only"], location, _verdict(gaps["kl_only"] < 1e-4 and sweep_ok)))
        rows.append(
            TheoryRow(
                world_id, "kl_plus_scalar", gaps["kl_plus_scalar"], location, _verdict(gaps["kl_plus_scalar"] < 1e-6)
            )
        )
        rows.append(TheoryRow(world_id, "printed_vs_kl_only", gaps["printed_vs_kl_only"], location, "info"))
        rows.append(
            TheoryRow(world_id, "printed_vs_kl_plus_scalar", gaps["printed_vs_kl_plus_scalar"], location, "info")
        )
    failures = sum(1 for row in rows if row.passed == "fail")
    logger.info("Theory verification over %s worlds: %s failing rows", n_worlds, failures)
    return rows


def _verdict(ok: bool) -> str:
    return "pass" if ok else "fail"


def write_theory_csv(rows: Iterable[TheoryRow], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["world_id", "variant", "sup_norm_gap", "c_minimizer", "result"])
        for row in rows:
            writer.writerow([row.world_id, row.variant, f"{row.sup_gap:.6e}", row.c_minimizer, row.passed])
    return path
