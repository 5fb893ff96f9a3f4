import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from schnet.data import (Conformation, Dataset, ExtXYZError, MissingLabelsError, Normalizer,
                         SplitSpec, batch_iter, collate, format_extxyz, read_extxyz, split,
                         write_extxyz)
from schnet.synthetic import MorseOracle, MorseParams, default_template, generate_synthetic

from oracles import five_point_difference

WATER = """3
energy=-1.5
O 0 0 0 0 0 0
H 0.96 0 0 0 0 0
H -0.24 0.93 0 0 0 0
"""


def test_parse_fixture(tmp_path):
    path = tmp_path / "w.xyz"
    path.write_text(WATER)
    ds = read_extxyz(path)
    assert len(ds) == 1
    c = ds[0]
    assert c.n_atoms == 3 and c.energy == -1.5
    np.testing.assert_array_equal(c.Z, [8, 1, 1])
    np.testing.assert_array_equal(c.forces, np.zeros((3, 3)))
    np.testing.assert_array_equal(c.R[2], [-0.24, 0.93, 0])


def test_parse_without_forces(tmp_path):
    path = tmp_path / "w.xyz"
    path.write_text("2\nenergy=3.0 pbc=\"F F F\" extra=1\nH 0 0 0\nH 0 0 0.74\n")
    c = read_extxyz(path)[0]
    assert c.forces is None and c.energy == 3.0


def test_parse_properties_column_order(tmp_path):
    path = tmp_path / "p.xyz"
    path.write_text("1\nProperties=species:S:1:forces:R:3:pos:R:3 energy=1\nC 1 2 3 4 5 6\n")
    c = read_extxyz(path)[0]
    np.testing.assert_array_equal(c.forces, [[1, 2, 3]])
    np.testing.assert_array_equal(c.R, [[4, 5, 6]])


def test_parse_missing_energy_is_allowed(tmp_path):
    path = tmp_path / "n.xyz"
    path.write_text("1\n\nH 0 0 0\n")
    ds = read_extxyz(path)
    assert ds[0].energy is None
    with pytest.raises(MissingLabelsError):
        ds.energies()


@pytest.mark.parametrize("text,line", [
    ("2\nenergy=1\nH 0 0 0\nH 0 zero 0\n", 4),
    ("2\nenergy=1\nH 0 0 0\n", 4),
    ("x\nenergy=1\n", 1),
    ("1\nenergy=abc\nH 0 0 0\n", 2),
    ("1\nenergy=1\nQq 0 0 0\n", 3),
])
def test_malformed_reports_line(tmp_path, text, line):
    path = tmp_path / "bad.xyz"
    path.write_text(text)
    with pytest.raises(ExtXYZError, match=f":{line}:"):
        read_extxyz(path)


def test_round_trip_bit_identical(tmp_path):
    rng = np.random.default_rng(0)
    confs = [Conformation(rng.integers(1, 10, size=4), rng.normal(size=(4, 3)) * 1e3,
                          float(rng.normal() * 1e5), rng.normal(size=(4, 3)), "mol a"),
             Conformation([1], [[1 / 3, -2 / 7, 1e-300]], None, None, "b")]
    path = tmp_path / "rt.xyz"
    write_extxyz(path, confs)
    back = read_extxyz(path)
    for a, b in zip(confs, back):
        assert np.array_equal(a.Z, b.Z) and np.array_equal(a.R, b.R)
        assert a.energy == b.energy and a.molecule_id == b.molecule_id
        assert (a.forces is None and b.forces is None) or np.array_equal(a.forces, b.forces)
    assert format_extxyz(back) == format_extxyz(confs)


def test_conformation_validation():
    with pytest.raises(ValueError):
        Conformation([1, 1], [[0, 0, 0]])
    with pytest.raises(ValueError):
        Conformation([1], [[0, 0, np.inf]])
    with pytest.raises(ValueError):
        Conformation([1], [[0, 0, 0]], 1.0, np.zeros((2, 3)))


# -- splits ------------------------------------------------------------------

def _toy(n_ids=1, per_id=10):
    return Dataset([Conformation([1], [[float(k), 0, 0]], float(k), None, f"m{k // per_id}")
                    for k in range(n_ids * per_id)])


def test_random_split_sizes():
    tr, va, te = split(_toy(), SplitSpec(8, 1, seed=3))
    assert (len(tr), len(va), len(te)) == (8, 1, 1)
    xs = sorted(c.R[0, 0] for part in (tr, va, te) for c in part)
    assert xs == list(range(10))


def test_split_is_deterministic():
    ds = _toy(5)
    for mode in ("random", "molecule_wise"):
        spec = SplitSpec(20, 10, mode=mode, seed=11)
        a, b = split(ds, spec), split(ds, spec)
        for pa, pb in zip(a, b):
            assert [c.R[0, 0] for c in pa] == [c.R[0, 0] for c in pb]


def test_molecule_wise_split():
    ds = _toy(5, 10)
    tr, va, te = split(ds, SplitSpec(20, 10, mode="molecule_wise", seed=1, id_fraction=0.8))
    ids = [{c.molecule_id for c in part} for part in (tr, va, te)]
    assert len(ids[0] | ids[1]) == 4 and len(ids[2]) == 1
    assert not (ids[0] & ids[1]) and not (ids[0] & ids[2]) and not (ids[1] & ids[2])
    assert len(te) == 10 and len(va) == 10 and len(tr) == 20


def test_split_insufficient_data():
    with pytest.raises(ValueError):
        split(_toy(), SplitSpec(8, 3))
    with pytest.raises(ValueError):
        split(_toy(5), SplitSpec(45, 10, mode="molecule_wise"))


# -- batching ----------------------------------------------------------------

def test_batch_sizes():
    ds = _toy(1, 7)
    sizes = [b.n_molecules for b in batch_iter(ds, 3, shuffle_seed=0)]
    assert sizes == [3, 3, 1]


def test_segments():
    b = collate([Conformation([1] * 3, np.zeros((3, 3))), Conformation([6] * 5, np.ones((5, 3)))])
    np.testing.assert_array_equal(b.segments, [0, 0, 0, 1, 1, 1, 1, 1])
    assert b.counts.tolist() == [3, 5] and b.n_atoms == 8


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 40), st.integers(1, 9), st.integers(0, 1000), st.integers(0, 5))
def test_epoch_covers_each_conformation_once(n, bs, seed, epoch):
    ds = _toy(1, n)
    seen = [c for b in batch_iter(ds, bs, seed, epoch) for c in b.R[:, 0]]
    assert sorted(seen) == list(range(n))
    again = [c for b in batch_iter(ds, bs, seed, epoch) for c in b.R[:, 0]]
    assert seen == again


def test_batch_size_must_be_positive():
    with pytest.raises(ValueError):
        next(batch_iter(_toy(), 0))


# -- normalizer ----------------------------------------------------------------

def test_normalizer_population_std():
    ds = Dataset([Conformation([1], [[0, 0, 0]], e) for e in (1.0, 3.0)])
    nz = Normalizer.fit(ds)
    assert (nz.mean, nz.std) == (2.0, 1.0)


def test_normalizer_constant_energies():
    ds = Dataset([Conformation([1], [[0, 0, 0]], 5.0) for _ in range(3)])
    nz = Normalizer.fit(ds)
    assert nz.std == 1.0
    np.testing.assert_array_equal(nz.normalize([5.0, 5.0])[0], 0.0)


def test_normalizer_forces_scale_only():
    nz = Normalizer(10.0, 4.0)
    e, f = nz.normalize([14.0], np.array([[8.0, -4.0, 0.0]]))
    assert e[0] == 1.0
    np.testing.assert_array_equal(f, [[2.0, -1.0, 0.0]])


def test_normalizer_inverse():
    nz = Normalizer(-97.25, 2.5)
    E = np.array([-100.0, -97.25, -95.5, 0.0, -1234.5])
    F = np.array([[1.25, -3.0, 0.5]])
    e, f = nz.normalize(E, F)
    e2, f2 = nz.denormalize(e, f)
    np.testing.assert_array_equal(e2, E)
    np.testing.assert_array_equal(f2, F)


def test_normalizer_empty():
    with pytest.raises(ValueError):
        Normalizer.fit(Dataset([]))


# -- synthetic Morse oracle ----------------------------------------------------

def test_morse_minimum():
    oracle = MorseOracle({(1, 1): MorseParams(3.0, 1.7, 0.9)})
    e, f = oracle.energy_forces([1, 1], [[0, 0, 0], [0, 0.9, 0]])
    assert e == -3.0
    np.testing.assert_array_equal(f, 0.0)


def test_morse_forces_match_finite_differences():
    oracle = MorseOracle()
    ds = generate_synthetic(oracle, default_template(), 5, 0.1, seed=2)
    for c in ds:
        numeric = -five_point_difference(lambda r: oracle.energy(c.Z, r), c.R, 1e-3)
        assert np.max(np.abs(c.forces - numeric)) < 1e-8


def test_zero_displacement_copies():
    ds = generate_synthetic(MorseOracle(), default_template(), 4, 0.0, seed=0)
    for c in ds:
        np.testing.assert_array_equal(c.R, ds[0].R)
        assert c.energy == ds[0].energy
        np.testing.assert_array_equal(c.forces, ds[0].forces)


def test_synthetic_deterministic():
    a = generate_synthetic(MorseOracle(), default_template(), 3, 0.05, seed=9)
    b = generate_synthetic(MorseOracle(), default_template(), 3, 0.05, seed=9)
    assert format_extxyz(a.conformations) == format_extxyz(b.conformations)
