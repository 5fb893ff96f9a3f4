"""Physical consistency checks for any energy model.

A model here is anything with ``energy_forces(Z, R) -> (E, F)``.  The
checks cover rotation/reflection/translation/permutation symmetry, agreement
of forces with finite-difference energy gradients, and the work integral of
the forces along a path.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

REPORT_COLUMNS = ("check", "trial", "metric", "tolerance", "pass")


@dataclass(frozen=True)
class CheckRow:
    check: str
    trial: int
    metric: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.metric <= self.tolerance)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform random rotation from a normalised quaternion."""
    q = rng.normal(size=4)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


class IsometrySampler:
    """Random rotations, improper rotations, translations and permutations."""

    def __init__(self, seed: int = 0, translation_scale: float = 10.0):
        self.rng = np.random.default_rng(seed)
        self.translation_scale = translation_scale

    def rotation(self) -> np.ndarray:
        return random_rotation(self.rng)

    def reflection(self) -> np.ndarray:
        return -self.rotation()

    def translation(self) -> np.ndarray:
        return self.rng.uniform(-self.translation_scale, self.translation_scale, size=3)

    def permutation(self, Z) -> np.ndarray:
        return self.rng.permutation(len(Z))


@dataclass(frozen=True)
class InvarianceTolerances:
    energy: float = 1e-8        # |dE| / (1 + |E|) under rotation, reflection, translation
    permutation: float = 1e-10  # same, under atom reordering
    forces: float = 1e-6        # max-norm deviation from the transformed forces
    net_force: float = 1e-8     # max-norm of the summed force vector


def check_invariances(model, molecules, n_trials: int = 10, seed: int = 0,
                      tol: InvarianceTolerances = InvarianceTolerances()) -> list[CheckRow]:
    """Energy invariance and force equivariance under random isometries.

    ``molecules`` is an iterable of ``(Z, R)``.  Forces must rotate with the
    frame and follow atom permutations.
    """
    sampler = IsometrySampler(seed)
    rows = []
    trial = 0
    for Z, R in molecules:
        Z = np.asarray(Z)
        R = np.asarray(R, dtype=np.float64)
        E0, F0 = model.energy_forces(Z, R)
        scale = 1.0 + abs(E0)
        for _ in range(n_trials):
            Q = sampler.rotation()
            P = sampler.reflection()
            t = sampler.translation()
            perm = sampler.permutation(Z)
            cases = {
                "rotation": (Z, R @ Q.T, F0 @ Q.T, tol.energy),
                "reflection": (Z, R @ P.T, F0 @ P.T, tol.energy),
                "translation": (Z, R + t, F0, tol.energy),
                "permutation": (Z[perm], R[perm], F0[perm], tol.permutation),
            }
            for name, (Zc, Rc, F_expect, e_tol) in cases.items():
                E, F = model.energy_forces(Zc, Rc)
                rows.append(CheckRow(f"{name}_energy", trial, abs(E - E0) / scale, e_tol))
                rows.append(CheckRow(f"{name}_forces", trial,
                                     float(np.max(np.abs(F - F_expect))), tol.forces))
            rows.append(CheckRow("net_force", trial, float(np.max(np.abs(F0.sum(axis=0)))),
                                 tol.net_force))
            trial += 1
    return rows


def check_force_consistency(model, Z, R, h: float = 1e-4) -> float:
    """Max relative error between forces and central differences of the energy.

    Errors are relative to the largest force magnitude; an all-zero force
    field that matches gives 0.
    """
    R = np.asarray(R, dtype=np.float64)
    _, F = model.energy_forces(Z, R)
    numeric = np.zeros_like(R)
    for idx in np.ndindex(*R.shape):
        Rp = R.copy()
        Rm = R.copy()
        Rp[idx] += h
        Rm[idx] -= h
        numeric[idx] = -(model.energy(Z, Rp) - model.energy(Z, Rm)) / (2 * h)
    scale = np.max(np.abs(F))
    err = np.max(np.abs(F - numeric))
    if scale == 0.0:
        return float(err)
    return float(err / scale)


def _work(model, Z, path, m: int, rule: str) -> float:
    """Line integral of F . dR along the piecewise-linear ``path``."""
    path = np.asarray(path, dtype=np.float64)
    total = 0.0
    for a, b in zip(path[:-1], path[1:]):
        delta = (b - a) / m
        if rule == "midpoint":
            for k in range(m):
                _, F = model.energy_forces(Z, a + (k + 0.5) * delta)
                total += float(np.sum(F * delta))
        elif rule == "trapezoid":
            Fs = [model.energy_forces(Z, a + k * delta)[1] for k in range(m + 1)]
            w = np.ones(m + 1)
            w[0] = w[-1] = 0.5
            total += float(sum(wk * np.sum(F * delta) for wk, F in zip(w, Fs)))
        else:
            raise ValueError(f"unknown quadrature rule {rule!r}")
    return total


@dataclass(frozen=True)
class WorkResult:
    delta_e: float
    work: float
    residual: float        # |dE + W| with m segments
    residual_2m: float     # same with 2m segments
    trapezoid_residual: float

    @property
    def order(self) -> float:
        """Observed convergence order of the quadrature residual."""
        if self.residual_2m == 0.0 or self.residual == 0.0:
            return float("inf")
        return float(np.log2(self.residual / self.residual_2m))


def check_work_integral(model, Z, path, m: int = 32) -> WorkResult:
    """Energy change along ``path`` against minus the work done by the forces.

    ``path`` is a sequence of configurations joined by straight segments, each
    split into ``m`` quadrature intervals.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    path = np.asarray(path, dtype=np.float64)
    dE = model.energy(Z, path[-1]) - model.energy(Z, path[0])
    W = _work(model, Z, path, m, "midpoint")
    W2 = _work(model, Z, path, 2 * m, "midpoint")
    Wt = _work(model, Z, path, m, "trapezoid")
    return WorkResult(dE, W, abs(dE + W), abs(dE + W2), abs(dE + Wt))


def format_report(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in rows:
        w.writerow([r.check, r.trial, repr(float(r.metric)), repr(float(r.tolerance)),
                    "true" if r.passed else "false"])
    return buf.getvalue()


def random_molecules(n: int, seed: int = 0, n_atoms=(3, 8), types=(1, 6, 7, 8),
                     min_dist: float = 0.8, box: float = 2.5):
    """``n`` random ``(Z, R)`` pairs with all pair distances above ``min_dist``."""
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        k = int(rng.integers(n_atoms[0], n_atoms[1] + 1))
        R = np.zeros((0, 3))
        while len(R) < k:
            x = rng.uniform(-box / 2, box / 2, size=3)
            if len(R) == 0 or np.min(np.linalg.norm(R - x, axis=1)) > min_dist:
                R = np.vstack([R, x])
        out.append((rng.choice(types, size=k), R))
    return out


def work_integral_rows(model, molecules, m: int = 4, step: float = 0.3, seed: int = 0,
                       min_order: float = 1.9) -> list[CheckRow]:
    """Quadrature-order check on straight paths; metric is residual(2m)/residual(m).

    Paths whose coarse residual is already at roundoff level count as passing.
    """
    rng = np.random.default_rng(seed)
    rows = []
    for trial, (Z, R) in enumerate(molecules):
        end = R + step * rng.normal(size=R.shape)
        res = check_work_integral(model, Z, [R, end], m)
        ratio = 0.0 if res.residual < 1e-11 else res.residual_2m / res.residual
        rows.append(CheckRow("work_integral_ratio", trial, ratio, 2.0 ** -min_order))
    return rows
