"""Conformations, extended-XYZ I/O, dataset splits, ragged batching and label normalisation."""

from __future__ import annotations

import math
import shlex
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .elements import atomic_number, symbol


class ExtXYZError(ValueError):
    pass


class MissingLabelsError(ValueError):
    pass


@dataclass
class Conformation:
    """One molecular geometry with optional energy (kcal/mol) and forces (kcal/mol/Å)."""

    Z: np.ndarray
    R: np.ndarray
    energy: float | None = None
    forces: np.ndarray | None = None
    molecule_id: str = ""

    def __post_init__(self):
        self.Z = np.asarray(self.Z, dtype=np.int64).reshape(-1)
        self.R = np.asarray(self.R, dtype=np.float64).reshape(-1, 3)
        if self.R.shape[0] != self.Z.shape[0]:
            raise ValueError(f"{self.Z.shape[0]} atomic numbers but {self.R.shape[0]} positions")
        if not np.all(np.isfinite(self.R)):
            raise ValueError("positions must be finite")
        if self.energy is not None:
            self.energy = float(self.energy)
        if self.forces is not None:
            self.forces = np.asarray(self.forces, dtype=np.float64)
            if self.forces.shape != self.R.shape:
                raise ValueError(f"forces shape {self.forces.shape} != positions shape {self.R.shape}")

    @property
    def n_atoms(self) -> int:
        return int(self.Z.shape[0])


@dataclass
class Dataset:
    conformations: list[Conformation]
    provenance: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.conformations)

    def __getitem__(self, i):
        return self.conformations[i]

    def __iter__(self):
        return iter(self.conformations)

    def subset(self, indices, **provenance) -> Dataset:
        return Dataset([self.conformations[i] for i in indices],
                       {**self.provenance, **provenance})

    @property
    def has_energies(self) -> bool:
        return all(c.energy is not None for c in self.conformations)

    @property
    def has_forces(self) -> bool:
        return all(c.forces is not None for c in self.conformations)

    def energies(self) -> np.ndarray:
        if not self.has_energies:
            raise MissingLabelsError("dataset has conformations without an energy label")
        return np.array([c.energy for c in self.conformations])


# ---------------------------------------------------------------------------
# extended XYZ
# ---------------------------------------------------------------------------

def _parse_comment(line: str, lineno: int) -> dict:
    try:
        tokens = shlex.split(line)
    except ValueError as exc:
        raise ExtXYZError(f"line {lineno}: cannot parse comment line ({exc})") from None
    info = {}
    for tok in tokens:
        if "=" in tok:
            key, value = tok.split("=", 1)
            info[key.strip().lower()] = value
    return info


def _columns(properties: str | None, lineno: int) -> tuple[int, int | None]:
    """Column offsets of positions and forces from a Properties string."""
    if properties is None:
        return 1, None
    parts = properties.split(":")
    if len(parts) % 3:
        raise ExtXYZError(f"line {lineno}: malformed Properties={properties!r}")
    col, pos, forces = 0, None, None
    for name, _kind, width in zip(parts[0::3], parts[1::3], parts[2::3]):
        if name == "pos":
            pos = col
        elif name in ("forces", "force"):
            forces = col
        col += int(width)
    if pos is None:
        raise ExtXYZError(f"line {lineno}: Properties lacks a pos column")
    return pos, forces


def read_extxyz(path) -> Dataset:
    """Parse an extended-XYZ file, one conformation per frame.

    Energies come from the ``energy=`` key of the comment line (absent
    energies become ``None``).  Forces are read when ``Properties`` declares
    them or, without ``Properties``, when atom lines carry three extra columns.
    """
    path = Path(path)
    lines = path.read_text().splitlines()
    confs = []
    k = 0
    while k < len(lines):
        if not lines[k].strip():
            k += 1
            continue
        try:
            n = int(lines[k].split()[0])
        except ValueError:
            raise ExtXYZError(f"{path}:{k + 1}: expected an atom count, got {lines[k]!r}") from None
        if k + 1 >= len(lines):
            raise ExtXYZError(f"{path}:{k + 1}: frame truncated after atom count")
        info = _parse_comment(lines[k + 1], k + 2)
        pos_col, force_col = _columns(info.get("properties"), k + 2)
        Z, R, F = [], [], []
        for a in range(n):
            lineno = k + 3 + a
            if lineno > len(lines):
                raise ExtXYZError(f"{path}:{lineno}: frame truncated, expected {n} atoms")
            tok = lines[lineno - 1].split()
            try:
                Z.append(atomic_number(tok[0]))
                R.append([float(t) for t in tok[pos_col:pos_col + 3]])
                if force_col is not None:
                    F.append([float(t) for t in tok[force_col:force_col + 3]])
                elif "properties" not in info and len(tok) >= 7:
                    F.append([float(t) for t in tok[4:7]])
            except (ValueError, IndexError) as exc:
                raise ExtXYZError(f"{path}:{lineno}: malformed atom line ({exc})") from None
            if len(R[-1]) != 3 or (F and len(F[-1]) != 3):
                raise ExtXYZError(f"{path}:{lineno}: malformed atom line")
        if F and len(F) != n:
            raise ExtXYZError(f"{path}:{k + 3}: force columns on some atoms only")
        energy = None
        if "energy" in info:
            try:
                energy = float(info["energy"])
            except ValueError:
                raise ExtXYZError(f"{path}:{k + 2}: bad energy value {info['energy']!r}") from None
        try:
            confs.append(Conformation(Z, np.array(R).reshape(n, 3), energy,
                                      np.array(F) if F else None,
                                      info.get("molecule_id", "")))
        except ValueError as exc:
            raise ExtXYZError(f"{path}:{k + 1}: {exc}") from None
        k += 2 + n
    return Dataset(confs, {"source": str(path)})


def format_extxyz(confs: Sequence[Conformation]) -> str:
    """Serialise conformations; floats use ``repr`` so parsing is bit-exact."""
    out = []
    for c in confs:
        has_f = c.forces is not None
        props = "species:S:1:pos:R:3" + (":forces:R:3" if has_f else "")
        head = [f"Properties={props}"]
        if c.energy is not None:
            head.append(f"energy={c.energy!r}")
        if c.molecule_id:
            head.append(f"molecule_id={shlex.quote(c.molecule_id)}")
        out.append(str(c.n_atoms))
        out.append(" ".join(head))
        for a in range(c.n_atoms):
            cols = [symbol(int(c.Z[a]))] + [repr(float(x)) for x in c.R[a]]
            if has_f:
                cols += [repr(float(x)) for x in c.forces[a]]
            out.append(" ".join(cols))
    return "\n".join(out) + "\n"


def write_extxyz(path, confs: Sequence[Conformation]):
    Path(path).write_text(format_extxyz(list(confs)))


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

@dataclass
class SplitSpec:
    """How to partition a dataset.

    ``random`` shuffles conformations.  ``molecule_wise`` shuffles molecule ids,
    keeps ``id_fraction`` of them for training/validation and sends every
    conformation of the remaining ids to the test set.
    """

    n_train: int
    n_val: int
    mode: str = "random"
    seed: int = 0
    id_fraction: float = 0.8

    def __post_init__(self):
        if self.mode not in ("random", "molecule_wise"):
            raise ValueError(f"unknown split mode {self.mode!r}")
        if self.n_train < 0 or self.n_val < 0:
            raise ValueError("split sizes must be non-negative")


def split(ds: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset, Dataset]:
    """Deterministic (train, val, test) partition; test is the remainder."""
    rng = np.random.default_rng(spec.seed)
    n = len(ds)
    if spec.mode == "random":
        if spec.n_train + spec.n_val > n:
            raise ValueError(f"cannot take {spec.n_train}+{spec.n_val} conformations from {n}")
        perm = rng.permutation(n)
        tr = perm[:spec.n_train]
        va = perm[spec.n_train:spec.n_train + spec.n_val]
        te = perm[spec.n_train + spec.n_val:]
    else:
        ids = sorted({c.molecule_id for c in ds})
        by_id = {m: [i for i, c in enumerate(ds) if c.molecule_id == m] for m in ids}
        order = [ids[i] for i in rng.permutation(len(ids))]
        n_pool = int(round(spec.id_fraction * len(ids)))
        pool, test_ids = order[:n_pool], order[n_pool:]
        val_ids, train_ids = [], []
        count = 0
        for m in pool:
            if count < spec.n_val:
                val_ids.append(m)
                count += len(by_id[m])
            else:
                train_ids.append(m)
        va = [i for m in val_ids for i in by_id[m]][:spec.n_val] if spec.n_val else []
        train_pool = np.array([i for m in train_ids for i in by_id[m]], dtype=np.int64)
        if len(train_pool) < spec.n_train or count < spec.n_val:
            raise ValueError(
                f"molecule-wise split: {len(train_pool)} train / {count} val conformations "
                f"available, need {spec.n_train} / {spec.n_val}")
        tr = np.sort(rng.permutation(train_pool)[:spec.n_train])
        te = [i for m in test_ids for i in by_id[m]]
    return (ds.subset(tr, split="train"), ds.subset(va, split="val"),
            ds.subset(te, split="test"))


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

@dataclass
class MiniBatch:
    """Several molecules concatenated atom-wise.

    ``segments[a]`` is the molecule index of atom ``a``; atoms of one molecule
    are contiguous.
    """

    Z: np.ndarray
    R: np.ndarray
    segments: np.ndarray
    counts: np.ndarray
    energies: np.ndarray | None = None
    forces: np.ndarray | None = None

    @property
    def n_molecules(self) -> int:
        return int(self.counts.shape[0])

    @property
    def n_atoms(self) -> int:
        return int(self.Z.shape[0])


def collate(confs: Sequence[Conformation]) -> MiniBatch:
    counts = np.array([c.n_atoms for c in confs], dtype=np.int64)
    energies = None
    if all(c.energy is not None for c in confs):
        energies = np.array([c.energy for c in confs])
    forces = None
    if all(c.forces is not None for c in confs):
        forces = np.concatenate([c.forces for c in confs])
    return MiniBatch(
        Z=np.concatenate([c.Z for c in confs]),
        R=np.concatenate([c.R for c in confs]),
        segments=np.repeat(np.arange(len(confs)), counts),
        counts=counts,
        energies=energies,
        forces=forces,
    )


def batch_order(n: int, shuffle_seed: int | None, epoch: int = 0) -> np.ndarray:
    if shuffle_seed is None:
        return np.arange(n)
    return np.random.default_rng([shuffle_seed, epoch]).permutation(n)


def batch_iter(ds: Dataset, batch_size: int, shuffle_seed: int | None = None,
               epoch: int = 0) -> Iterator[MiniBatch]:
    """One epoch of mini-batches; the order depends only on (seed, epoch)."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = batch_order(len(ds), shuffle_seed, epoch)
    for start in range(0, len(order), batch_size):
        yield collate([ds[i] for i in order[start:start + batch_size]])


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Normalizer:
    """Energy standardisation; forces are scaled by ``1/std`` only."""

    mean: float = 0.0
    std: float = 1.0

    @classmethod
    def fit(cls, train: Dataset) -> Normalizer:
        if len(train) == 0:
            raise ValueError("cannot fit a normalizer on an empty dataset")
        e = train.energies()
        mean = float(np.mean(e))
        std = float(np.std(e))  # population std
        if not std > 0 or not math.isfinite(std):
            std = 1.0
        return cls(mean, std)

    def normalize(self, energy, forces=None):
        e = (np.asarray(energy, dtype=np.float64) - self.mean) / self.std
        if forces is None:
            return e, None
        return e, np.asarray(forces, dtype=np.float64) / self.std

    def denormalize(self, energy, forces=None):
        e = np.asarray(energy, dtype=np.float64) * self.std + self.mean
        if forces is None:
            return e, None
        return e, np.asarray(forces, dtype=np.float64) * self.std
