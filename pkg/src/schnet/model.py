"""SchNet: continuous-filter convolutions over interatomic distances.

Energies are sum-pooled atom-wise contributions; forces are the exact
negative gradient of the energy with respect to positions.
"""

from __future__ import annotations

import functools
import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Variable
from .data import Conformation, MiniBatch, Normalizer, collate


@dataclass(frozen=True)
class ModelConfig:
    n_features: int = 64
    n_interactions: int = 3
    rbf_min: float = 0.0        # Å
    rbf_spacing: float = 0.1    # Å
    rbf_count: int = 300
    rbf_gamma: float = 10.0     # 1/Å^2
    max_atomic_number: int = 100
    include_self_pairs: bool = False

    def __post_init__(self):
        if self.n_features < 1 or self.n_interactions < 1:
            raise ValueError("n_features and n_interactions must be >= 1")
        if self.rbf_count < 2:
            raise ValueError("rbf_count must be >= 2")
        if not (self.rbf_spacing > 0 and self.rbf_gamma > 0):
            raise ValueError("rbf_spacing and rbf_gamma must be positive")
        if self.max_atomic_number < 1:
            raise ValueError("max_atomic_number must be >= 1")

    @property
    def centers(self) -> np.ndarray:
        return self.rbf_min + self.rbf_spacing * np.arange(self.rbf_count)

    @property
    def head_width(self) -> int:
        return max(1, self.n_features // 2)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(**d)


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Names and shapes of all learnable arrays, in a fixed order."""
    F, K, H = cfg.n_features, cfg.rbf_count, cfg.head_width
    # row Z-1 holds the embedding of atomic number Z
    shapes = {"embedding": (cfg.max_atomic_number, F)}
    for b in range(cfg.n_interactions):
        p = f"interaction{b}."
        shapes[p + "in2f.weight"] = (F, F)
        shapes[p + "in2f.bias"] = (F,)
        shapes[p + "filter1.weight"] = (K, F)
        shapes[p + "filter1.bias"] = (F,)
        shapes[p + "filter2.weight"] = (F, F)
        shapes[p + "filter2.bias"] = (F,)
        shapes[p + "f2out.weight"] = (F, F)
        shapes[p + "f2out.bias"] = (F,)
        shapes[p + "dense.weight"] = (F, F)
        shapes[p + "dense.bias"] = (F,)
    shapes["head1.weight"] = (F, H)
    shapes["head1.bias"] = (H,)
    shapes["head2.weight"] = (H, 1)
    shapes["head2.bias"] = (1,)
    return shapes


def init_parameters(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, Uniform(+-1/sqrt(F)) embeddings."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        if name == "embedding":
            lim = 1.0 / math.sqrt(cfg.n_features)
            params[name] = rng.uniform(-lim, lim, size=shape)
        elif name.endswith(".weight"):
            lim = 1.0 / math.sqrt(shape[0])
            params[name] = rng.uniform(-lim, lim, size=shape)
        else:
            params[name] = np.zeros(shape)
    return params


@functools.lru_cache(maxsize=256)
def _pairs_for_counts(counts: tuple, include_self: bool):
    pi, pj = [], []
    offset = 0
    for n in counts:
        i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        mask = np.ones((n, n), bool) if include_self else ~np.eye(n, dtype=bool)
        pi.append(i[mask] + offset)
        pj.append(j[mask] + offset)
        offset += n
    i = np.concatenate(pi) if pi else np.zeros(0, np.intp)
    j = np.concatenate(pj) if pj else np.zeros(0, np.intp)
    i, j = i.astype(np.intp), j.astype(np.intp)
    i.setflags(write=False)
    j.setflags(write=False)
    return i, j


@dataclass(frozen=True)
class PairList:
    """All ordered atom pairs (i, j) within each molecule of a batch; no cutoff."""

    i: np.ndarray
    j: np.ndarray
    n_atoms: int

    @classmethod
    def build(cls, counts, include_self_pairs: bool = False) -> PairList:
        counts = tuple(int(c) for c in counts)
        i, j = _pairs_for_counts(counts, bool(include_self_pairs))
        return cls(i, j, sum(counts))

    def __len__(self):
        return int(self.i.shape[0])


class SchNetModel:
    """Embedding, interaction blocks and a pooled atom-wise energy head.

    Parameters are leaf ``Variable`` objects keyed by name.  Updating a
    parameter replaces its array, so arrays obtained from ``snapshot`` stay
    valid.
    """

    def __init__(self, config: ModelConfig | None = None, params: dict | None = None,
                 normalizer: Normalizer | None = None, seed: int = 0):
        self.config = config or ModelConfig()
        self.normalizer = normalizer or Normalizer()
        shapes = parameter_shapes(self.config)
        values = params if params is not None else init_parameters(self.config, seed)
        if set(values) != set(shapes):
            missing = set(shapes) ^ set(values)
            raise ValueError(f"parameter names do not match the config: {sorted(missing)}")
        self.params: dict[str, Variable] = {}
        for name, shape in shapes.items():
            arr = np.array(values[name], dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"parameter {name}: shape {arr.shape}, expected {shape}")
            self.params[name] = Variable(arr, requires_grad=True, name=name)

    # -- parameter handling -------------------------------------------------

    @property
    def n_parameters(self) -> int:
        return sum(v.value.size for v in self.params.values())

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.value.copy() for k, v in self.params.items()}

    def load_params(self, values: dict[str, np.ndarray]):
        for k, v in self.params.items():
            v.value = np.array(values[k], dtype=np.float64)

    def with_params(self, values: dict[str, np.ndarray]) -> SchNetModel:
        return SchNetModel(self.config, values, self.normalizer)

    def with_normalizer(self, normalizer: Normalizer) -> SchNetModel:
        return SchNetModel(self.config, self.snapshot(), normalizer)

    # -- building blocks ----------------------------------------------------

    def embed(self, Z) -> Variable:
        Z = np.asarray(Z, dtype=np.intp)
        if Z.size and (Z.min() < 1 or Z.max() > self.config.max_atomic_number):
            bad = Z[(Z < 1) | (Z > self.config.max_atomic_number)][0]
            raise ValueError(f"atomic number {bad} outside the embedding table "
                             f"[1, {self.config.max_atomic_number}]")
        return ad.gather_rows(self.params["embedding"], Z - 1)

    def distances(self, R: Variable, pairs: PairList) -> Variable:
        diff = ad.sub(ad.gather_rows(R, pairs.i), ad.gather_rows(R, pairs.j))
        return ad.l2_norm_rows(diff)

    def rbf_expand(self, d: Variable) -> Variable:
        """exp(-gamma (d - mu_k)^2) for every distance and center."""
        cfg = self.config
        shifted = ad.add_rows(ad.broadcast_cols(d, cfg.rbf_count), Variable(-cfg.centers))
        return ad.exp(ad.affine(ad.square(shifted), -cfg.rbf_gamma))

    def filter_generate(self, e: Variable, block: int) -> Variable:
        p = self.params
        pre = f"interaction{block}."
        h = ad.ssp(ad.linear(e, p[pre + "filter1.weight"], p[pre + "filter1.bias"]))
        return ad.ssp(ad.linear(h, p[pre + "filter2.weight"], p[pre + "filter2.bias"]))

    @staticmethod
    def cfconv(X: Variable, W: Variable, pairs: PairList) -> Variable:
        """out_i = sum over pairs (i, j) of X_j * W_ij (element-wise)."""
        if W.shape != (len(pairs), X.shape[1]):
            raise ad.ShapeError(f"cfconv: filters {W.shape} vs {len(pairs)} pairs x {X.shape[1]} features")
        messages = ad.mul(ad.gather_rows(X, pairs.j), W)
        return ad.segment_sum(messages, pairs.i, X.shape[0])

    def interaction(self, X: Variable, e: Variable, pairs: PairList, block: int) -> Variable:
        if not 0 <= block < self.config.n_interactions:
            raise IndexError(f"block {block} out of range for {self.config.n_interactions} interactions")
        p = self.params
        pre = f"interaction{block}."
        W = self.filter_generate(e, block)
        y = ad.linear(X, p[pre + "in2f.weight"], p[pre + "in2f.bias"])
        y = self.cfconv(y, W, pairs)
        y = ad.ssp(ad.linear(y, p[pre + "f2out.weight"], p[pre + "f2out.bias"]))
        v = ad.linear(y, p[pre + "dense.weight"], p[pre + "dense.bias"])
        return ad.add(X, v)

    def atom_energies(self, Z, R: Variable, pairs: PairList) -> Variable:
        p = self.params
        X = self.embed(Z)
        e = self.rbf_expand(self.distances(R, pairs))
        for b in range(self.config.n_interactions):
            X = self.interaction(X, e, pairs, b)
        h = ad.ssp(ad.linear(X, p["head1.weight"], p["head1.bias"]))
        return ad.sum_cols(ad.linear(h, p["head2.weight"], p["head2.bias"]))

    def forward(self, batch: MiniBatch, R: Variable) -> Variable:
        """Normalised per-molecule energies for a batch, shape (n_molecules,)."""
        pairs = PairList.build(batch.counts, self.config.include_self_pairs)
        atom_e = self.atom_energies(batch.Z, R, pairs)
        return ad.segment_sum(atom_e, batch.segments, batch.n_molecules)

    # -- prediction API -----------------------------------------------------

    def predict_batch(self, batch: MiniBatch, forces: bool = True):
        """Denormalised energies (kcal/mol) and forces (kcal/mol/Å, or None)."""
        if not np.all(np.isfinite(batch.R)):
            raise ValueError("positions must be finite")
        with ad.Graph():
            R = Variable(batch.R, requires_grad=forces)
            E = self.forward(batch, R)
            F = None
            if forces:
                # isolated atoms leave R unused: zero force, no warning needed
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", ad.UnreachableGradientWarning)
                    F = -ad.backward(ad.sum_all(E), [R])[R].value
        return self.normalizer.denormalize(E.value, F)

    def energy(self, Z, R) -> float:
        batch = collate([Conformation(Z, R)])
        return float(self.predict_batch(batch, forces=False)[0][0])

    def energy_forces(self, Z, R) -> tuple[float, np.ndarray]:
        batch = collate([Conformation(Z, R)])
        E, F = self.predict_batch(batch, forces=True)
        return float(E[0]), F

    def filter_values(self, distances, block: int) -> np.ndarray:
        """Filter W(d) for each distance, shape (len(distances), n_features)."""
        with ad.no_grad():
            e = self.rbf_expand(Variable(np.asarray(distances, dtype=np.float64)))
            return self.filter_generate(e, block).value
