"""Covariance Matrix Adaptation Evolution Strategy with an ask/tell interface.

Standard (mu/mu_w, lambda) CMA-ES with cumulative step-size adaptation and
rank-one plus rank-mu covariance updates, using Hansen's default strategy
constants. Fitness is *maximized*; the update ranks by descending fitness.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

EIGEN_FLOOR = 1e-14


class BudgetExhausted(RuntimeError):
    pass


@dataclass(frozen=True)
class CmaConfig:
    population: int = 10
    max_generations: int = 20
    initial_sigma: float = 0.5
    bounds: tuple[tuple[float, float], ...] | None = None

    def __post_init__(self):
        if self.population < 2:
            raise ValueError("population must be >= 2")
        if self.max_generations < 1:
            raise ValueError("max_generations must be >= 1")
        if self.initial_sigma <= 0:
            raise ValueError("initial_sigma must be positive")
        if self.bounds is not None:
            for lo, hi in self.bounds:
                if not lo < hi:
                    raise ValueError(f"bad bound [{lo}, {hi}]")


class CMAES:
    """One optimizer state. Single-owner: do not share across threads.

    ``scales`` optionally stretches the initial distribution per coordinate
    (the initial covariance is ``diag(scales**2)`` normalized so its largest
    entry is 1, with ``sigma`` absorbing the overall size).
    """

    def __init__(self, mean: Sequence[float], config: CmaConfig | None = None,
                 seed: int | Sequence[int] | None = None, sigma: float | None = None,
                 scales: Sequence[float] | None = None):
        self.config = config or CmaConfig()
        self.mean = np.array(mean, dtype=float)
        n = self.n = self.mean.size
        if n < 1:
            raise ValueError("dimension must be >= 1")
        if self.config.bounds is not None and len(self.config.bounds) != n:
            raise ValueError("bounds length differs from dimension")
        self.rng = np.random.default_rng(seed)
        self.sigma = float(sigma if sigma is not None else self.config.initial_sigma)
        if scales is not None:
            s = np.asarray(scales, dtype=float)
            if s.shape != (n,) or np.any(s <= 0):
                raise ValueError("scales must be positive, one per coordinate")
            top = s.max()
            self.C = np.diag((s / top) ** 2)
            if sigma is None:
                self.sigma = float(top)
        else:
            self.C = np.eye(n)

        lam = self.lam = self.config.population
        mu = self.mu = lam // 2
        w = math.log(mu + 0.5) - np.log(np.arange(1, mu + 1))
        self.weights = w / w.sum()
        self.mu_eff = 1.0 / float(np.sum(self.weights ** 2))
        me = self.mu_eff
        self.c_sigma = (me + 2) / (n + me + 5)
        self.d_sigma = 1 + 2 * max(0.0, math.sqrt((me - 1) / (n + 1)) - 1) + self.c_sigma
        self.c_c = (4 + me / n) / (n + 4 + 2 * me / n)
        self.c_1 = 2 / ((n + 1.3) ** 2 + me)
        self.c_mu = min(1 - self.c_1, 2 * (me - 2 + 1 / me) / ((n + 2) ** 2 + me))
        self.chi_n = math.sqrt(n) * (1 - 1 / (4 * n) + 1 / (21 * n * n))

        self.p_sigma = np.zeros(n)
        self.p_c = np.zeros(n)
        self.generation = 0
        self.evaluations = 0
        self._eigen()
        self._asked: np.ndarray | None = None
        self.best_x: np.ndarray | None = None
        self.best_f = -math.inf
        self.trace: list[tuple[int, float, float]] = []

    def _eigen(self):
        self.C = (self.C + self.C.T) / 2
        vals, vecs = np.linalg.eigh(self.C)
        vals = np.maximum(vals, EIGEN_FLOOR)
        self.B = vecs
        self.D = np.sqrt(vals)
        self.C = (vecs * vals) @ vecs.T
        self.C = (self.C + self.C.T) / 2

    def _draw(self, k: int) -> np.ndarray:
        z = self.rng.standard_normal((k, self.n))
        return self.mean + self.sigma * (z * self.D) @ self.B.T

    def ask(self) -> np.ndarray:
        """Population of candidate vectors, shape (population, n)."""
        if self.generation >= self.config.max_generations:
            raise BudgetExhausted(f"generation budget {self.config.max_generations} spent")
        x = self._draw(self.lam)
        if self.config.bounds is not None:
            lo = np.array([b[0] for b in self.config.bounds])
            hi = np.array([b[1] for b in self.config.bounds])
            bad = np.any((x < lo) | (x > hi), axis=1)
            if bad.any():
                x[bad] = self._draw(int(bad.sum()))
            x = np.clip(x, lo, hi)
        self._asked = x
        return x.copy()

    def tell(self, samples, fitnesses) -> CMAES:
        x = np.asarray(samples, dtype=float)
        f = np.asarray(fitnesses, dtype=float)
        if x.shape != (self.lam, self.n) or f.shape != (self.lam,):
            raise ValueError(f"expected {self.lam} samples of length {self.n} and {self.lam} fitnesses")
        for i, fi in enumerate(f):
            if not math.isfinite(fi):
                raise ValueError(f"non-finite fitness {fi} for sample {i}")

        order = np.argsort(-f, kind="stable")
        i0 = int(order[0])
        if f[i0] > self.best_f or self.best_x is None:
            self.best_f = float(f[i0])
            self.best_x = x[i0].copy()

        n = self.n
        old = self.mean
        y = (x[order[: self.mu]] - old) / self.sigma
        y_w = self.weights @ y
        self.mean = old + self.sigma * y_w

        inv_sqrt = (self.B / self.D) @ self.B.T
        cs = self.c_sigma
        self.p_sigma = (1 - cs) * self.p_sigma + math.sqrt(cs * (2 - cs) * self.mu_eff) * (inv_sqrt @ y_w)
        norm_ps = float(np.linalg.norm(self.p_sigma))
        h_sigma = norm_ps / math.sqrt(1 - (1 - cs) ** (2 * (self.generation + 1))) < (1.4 + 2 / (n + 1)) * self.chi_n

        cc = self.c_c
        self.p_c = (1 - cc) * self.p_c + h_sigma * math.sqrt(cc * (2 - cc) * self.mu_eff) * y_w
        rank_one = np.outer(self.p_c, self.p_c)
        if not h_sigma:
            rank_one = rank_one + cc * (2 - cc) * self.C
        rank_mu = (y.T * self.weights) @ y
        self.C = (1 - self.c_1 - self.c_mu) * self.C + self.c_1 * rank_one + self.c_mu * rank_mu

        self.sigma *= math.exp((cs / self.d_sigma) * (norm_ps / self.chi_n - 1))
        self._eigen()

        self.generation += 1
        self.evaluations += self.lam
        self.trace.append((self.generation, self.sigma, self.best_f))
        return self

    @property
    def best(self) -> tuple[np.ndarray, float]:
        if self.best_x is None:
            raise RuntimeError("best() called before any tell()")
        return self.best_x.copy(), self.best_f

    def condition_number(self) -> float:
        return float((self.D.max() / self.D.min()) ** 2)

    def write_trace(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["generation", "sigma", "best_fitness"])
            for g, s, b in self.trace:
                w.writerow([g, repr(s), repr(b)])


def minimize(fun, x0, sigma0: float, max_evals: int, population: int = 10, seed=None,
             target: float | None = None) -> tuple[np.ndarray, float, CMAES]:
    """Convenience loop minimizing ``fun``; returns (x_best, f_best, optimizer)."""
    gens = max(1, max_evals // population)
    es = CMAES(x0, CmaConfig(population=population, max_generations=gens, initial_sigma=sigma0), seed=seed)
    while es.generation < gens:
        xs = es.ask()
        es.tell(xs, [-fun(x) for x in xs])
        if target is not None and -es.best_f < target:
            break
    x, f = es.best
    return x, -f, es
