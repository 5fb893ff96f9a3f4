"""Pairwise Morse potential used as an exact, cheap stand-in for quantum-chemical labels."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Conformation, Dataset


@dataclass(frozen=True)
class MorseParams:
    depth: float      # D_e, kcal/mol
    width: float      # a, 1/Å
    r_eq: float       # r_e, Å


# Loosely chemical magnitudes, scaled down so forces stay O(1-10) kcal/mol/Å
# for sub-0.1 Å displacements.
DEFAULT_PARAMS = {
    (1, 1): MorseParams(4.0, 1.2, 1.60),
    (1, 6): MorseParams(8.0, 1.8, 1.09),
    (1, 8): MorseParams(10.0, 2.0, 0.96),
    (6, 6): MorseParams(9.0, 1.8, 1.54),
    (6, 8): MorseParams(10.0, 2.0, 1.43),
    (8, 8): MorseParams(5.0, 1.6, 1.48),
}
FALLBACK = MorseParams(5.0, 1.5, 1.5)


@dataclass
class MorseOracle:
    """E = sum over atom pairs of D (1 - exp(-a (r - r_e)))^2 - D.

    Parameters are looked up by the unordered pair of atomic numbers.
    """

    params: dict = field(default_factory=lambda: dict(DEFAULT_PARAMS))
    fallback: MorseParams = FALLBACK

    def pair(self, za: int, zb: int) -> MorseParams:
        key = (min(za, zb), max(za, zb))
        return self.params.get(key, self.fallback)

    def _pair_arrays(self, Z):
        Z = np.asarray(Z)
        i, j = np.triu_indices(len(Z), k=1)
        p = [self.pair(int(Z[a]), int(Z[b])) for a, b in zip(i, j)]
        D = np.array([q.depth for q in p])
        a = np.array([q.width for q in p])
        re = np.array([q.r_eq for q in p])
        return i, j, D, a, re

    def energy(self, Z, R) -> float:
        return self.energy_forces(Z, R)[0]

    def energy_forces(self, Z, R) -> tuple[float, np.ndarray]:
        R = np.asarray(R, dtype=np.float64)
        i, j, D, a, re = self._pair_arrays(Z)
        diff = R[i] - R[j]
        r = np.linalg.norm(diff, axis=1)
        x = np.exp(-a * (r - re))
        energy = float(np.sum(D * (1 - x) ** 2 - D))
        # dE/dr for each pair
        dEdr = 2 * D * a * x * (1 - x)
        unit = np.divide(diff, r[:, None], out=np.zeros_like(diff), where=r[:, None] > 0)
        fpair = -dEdr[:, None] * unit  # force on atom i from the pair
        forces = np.zeros_like(R)
        np.add.at(forces, i, fpair)
        np.add.at(forces, j, -fpair)
        return energy, forces


def default_template() -> Conformation:
    """Bent three-atom O-H-H geometry near the default Morse minimum."""
    return Conformation(
        Z=[8, 1, 1],
        R=[[0.0, 0.0, 0.0], [0.96, 0.0, 0.0], [-0.30, 0.91, 0.0]],
        molecule_id="OHH",
    )


def generate_synthetic(oracle: MorseOracle, template: Conformation, n_frames: int,
                       displacement_scale: float, seed: int) -> Dataset:
    """Gaussian perturbations of ``template`` labelled exactly by ``oracle``."""
    if displacement_scale < 0:
        raise ValueError("displacement_scale must be non-negative")
    rng = np.random.default_rng(seed)
    frames = []
    for _ in range(n_frames):
        R = template.R + displacement_scale * rng.normal(size=template.R.shape)
        e, f = oracle.energy_forces(template.Z, R)
        frames.append(Conformation(template.Z.copy(), R, e, f, template.molecule_id))
    return Dataset(frames, {"generator": "morse", "seed": seed,
                            "displacement_scale": displacement_scale})
