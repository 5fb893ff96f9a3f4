"""Velocity-Verlet integration on any ``energy_forces`` potential.

Reduced units throughout: a = F / m with masses defaulting to 1, so the
energy-conservation check does not depend on physical constants.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class SimulationError(FloatingPointError):
    def __init__(self, message, step: int):
        super().__init__(message)
        self.step = step


@dataclass
class MdState:
    Z: np.ndarray
    R: np.ndarray                  # Å
    V: np.ndarray | None = None    # reduced units
    masses: np.ndarray | None = None
    dt: float = 1e-3
    step: int = 0
    potential: list = field(default_factory=list)
    kinetic: list = field(default_factory=list)

    def __post_init__(self):
        self.Z = np.asarray(self.Z)
        self.R = np.array(self.R, dtype=np.float64)
        self.V = np.zeros_like(self.R) if self.V is None else np.array(self.V, dtype=np.float64)
        n = len(self.Z)
        self.masses = np.ones(n) if self.masses is None else np.asarray(self.masses, np.float64)
        if self.R.shape != (n, 3) or self.V.shape != (n, 3):
            raise ValueError("positions and velocities must both be (n_atoms, 3)")
        if self.masses.shape != (n,) or np.any(self.masses <= 0):
            raise ValueError("masses must be positive, one per atom")
        if not self.dt >= 0:
            raise ValueError("dt must be non-negative")

    def kinetic_energy(self) -> float:
        return float(0.5 * np.sum(self.masses[:, None] * self.V ** 2))

    @property
    def total_energy(self) -> np.ndarray:
        return np.asarray(self.potential) + np.asarray(self.kinetic)

    def max_drift(self) -> float:
        """Largest deviation of the total energy from its first record."""
        tot = self.total_energy
        return float(np.max(np.abs(tot - tot[0]))) if tot.size else 0.0


def velocity_verlet(potential, state: MdState, n_steps: int, callback=None) -> MdState:
    """Advance ``state`` in place by ``n_steps``, appending energies each step.

    ``callback(state)`` runs after every step, e.g. to dump frames.
    """
    inv_m = 1.0 / state.masses[:, None]
    E, F = potential.energy_forces(state.Z, state.R)
    if not (np.isfinite(E) and np.all(np.isfinite(F))):
        raise SimulationError(f"non-finite energy or forces at step {state.step}", state.step)
    if not state.potential:
        state.potential.append(float(E))
        state.kinetic.append(state.kinetic_energy())
    dt = state.dt
    for _ in range(n_steps):
        V_half = state.V + 0.5 * dt * F * inv_m
        R = state.R + dt * V_half
        E, F = potential.energy_forces(state.Z, R)
        if not (np.isfinite(E) and np.all(np.isfinite(F))):
            raise SimulationError(f"non-finite energy or forces at step {state.step + 1}",
                                  state.step + 1)
        state.R = R
        state.V = V_half + 0.5 * dt * F * inv_m
        state.step += 1
        state.potential.append(float(E))
        state.kinetic.append(state.kinetic_energy())
        if callback is not None:
            callback(state)
    return state
