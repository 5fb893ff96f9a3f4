"""Acceptance gate: one recorded PASS/FAIL line per primary criterion."""

import math
import time

import numpy as np
import pytest

from schnet import autodiff as ad
from schnet.autodiff import Variable
from schnet.checkpoint import load_checkpoint, save_checkpoint
from schnet.cli import main
from schnet.data import Conformation, Normalizer, SplitSpec, collate, split
from schnet.md import MdState, velocity_verlet
from schnet.model import ModelConfig, PairList, SchNetModel
from schnet.synthetic import MorseOracle, default_template, generate_synthetic
from schnet.training import LossConfig, TrainConfig, evaluate, loss, loss_and_grads, train
from schnet.verify import (check_force_consistency, check_invariances, check_work_integral,
                           random_molecules)

from oracles import central_difference, rel_error

pytestmark = pytest.mark.acceptance

# frozen after the reference run: 2000 steps per arm, about 80 s in total
DESK_STEPS = 2000


@pytest.fixture(scope="module")
def fresh_model():
    return SchNetModel(ModelConfig(), seed=11)


@pytest.fixture(scope="module")
def desk():
    """Force+energy and energy-only training on the same Morse split and budget."""
    ds = generate_synthetic(MorseOracle(), default_template(), 1400, 0.05, seed=0)
    tr, va, te = split(ds, SplitSpec(1000, 200, seed=0))
    out = {"test": te}
    start = time.perf_counter()
    for arm, train_forces in (("forces", True), ("energy", False)):
        m = SchNetModel(ModelConfig(), normalizer=Normalizer.fit(tr), seed=0)
        cfg = TrainConfig(max_steps=DESK_STEPS, eval_interval=250, patience=1000,
                          loss=LossConfig(0.01, train_forces))
        out[arm] = train(m, tr, va, cfg).model
    out["seconds"] = time.perf_counter() - start
    return out


def test_invariance_suite(fresh_model, criterion):
    start = time.perf_counter()
    mols = random_molecules(100, seed=1, n_atoms=(3, 8))
    rows = check_invariances(fresh_model, mols, n_trials=2, seed=1)
    seconds = time.perf_counter() - start
    worst = {}
    for r in rows:
        worst[r.check] = max(worst.get(r.check, 0.0), r.metric)
    ok = all(r.passed for r in rows) and seconds < 60
    detail = ", ".join(f"{k}={v:.1e}" for k, v in sorted(worst.items()))
    criterion("invariance suite (100 molecules)", ok, f"{detail}; {seconds:.0f}s")
    assert ok


def test_gradient_oracle(fresh_model, criterion):
    start = time.perf_counter()
    mols = random_molecules(20, seed=2, n_atoms=(3, 8))
    errors = [check_force_consistency(fresh_model, Z, R, 1e-4) for Z, R in mols]
    Z, R = mols[0]
    hs = np.array([1e-2, 1e-3, 1e-4])
    scan = np.array([check_force_consistency(fresh_model, Z, R, h) for h in hs])
    slope = np.polyfit(np.log10(hs), np.log10(scan), 1)[0]
    seconds = time.perf_counter() - start
    ok = max(errors) < 1e-5 and 1.8 <= slope <= 2.2 and seconds < 60
    criterion("gradient oracle (h=1e-4, 20 conformations)", ok,
              f"max rel err={max(errors):.1e}, observed order={slope:.2f}; {seconds:.0f}s")
    assert ok


def test_double_backward_oracle(criterion):
    start = time.perf_counter()
    cfg = ModelConfig(n_features=8, n_interactions=1, rbf_count=16, rbf_spacing=0.4, rbf_gamma=2.0)
    model = SchNetModel(cfg, seed=3, normalizer=Normalizer(-1.0, 2.0))
    rng = np.random.default_rng(3)
    confs = []
    for Z, R in random_molecules(3, seed=3, n_atoms=(2, 4), types=(1, 6, 8)):
        confs.append(Conformation(Z, R, rng.normal(), rng.normal(size=R.shape)))
    batch = collate(confs)
    lcfg = LossConfig(rho=0.01, train_forces=True)
    _, grads = loss_and_grads(batch, model, lcfg)
    worst, n_checked = 0.0, 0
    for name, var in model.params.items():
        base = var.value.copy()

        def f(x):
            var.value = x
            with ad.Graph():
                return float(loss(batch, model, lcfg).value)

        numeric = central_difference(f, base, 1e-5)
        var.value = base
        n_checked += base.size
        if np.max(np.abs(numeric)) < 1e-10:
            err = float(np.max(np.abs(grads[name])))
        else:
            err = rel_error(grads[name], numeric)
        worst = max(worst, err)
    seconds = time.perf_counter() - start
    ok = worst < 1e-4 and seconds < 120
    criterion("double-backward oracle (F=8, 1 block, K=16)", ok,
              f"{n_checked} parameters, max rel err={worst:.1e}; {seconds:.0f}s")
    assert ok


def test_cfconv_brute_force(fresh_model, criterion):
    worst = 0.0
    rng = np.random.default_rng(4)
    for Z, R in random_molecules(50, seed=4, n_atoms=(1, 8)):
        n, F = len(Z), fresh_model.config.n_features
        pairs = PairList.build([n])
        with ad.no_grad():
            d = fresh_model.distances(Variable(R), pairs)
            W = fresh_model.filter_generate(fresh_model.rbf_expand(d), 0).value
            X = rng.normal(size=(n, F))
            fast = SchNetModel.cfconv(Variable(X), Variable(W), pairs).value
        slow = np.zeros((n, F))
        for p, (i, j) in enumerate(zip(pairs.i, pairs.j)):
            slow[i] += X[j] * W[p]
        worst = max(worst, float(np.max(np.abs(fast - slow))) if n > 1 else 0.0)
    ok = worst <= 1e-12
    criterion("cfconv brute-force equivalence (50 molecules)", ok, f"max abs diff={worst:.1e}")
    assert ok


def test_energy_conservation(desk, criterion):
    start = time.perf_counter()
    model = desk["forces"]
    t = default_template()
    rng = np.random.default_rng(5)
    end = t.R + 0.15 * rng.normal(size=t.R.shape)
    res = check_work_integral(model, t.Z, [t.R, end], m=4)
    loop = [t.R, t.R + 0.1 * rng.normal(size=t.R.shape), t.R + 0.1 * rng.normal(size=t.R.shape), t.R]
    loops = [abs(check_work_integral(model, t.Z, loop, m).work) for m in (4, 16, 64)]

    V = 0.3 * rng.normal(size=t.R.shape)
    V -= V.mean(axis=0)
    state = MdState(t.Z, t.R, V, dt=0.01)
    max_step = [0.0]
    prev = [state.R.copy()]

    def watch(s):
        max_step[0] = max(max_step[0], float(np.max(np.linalg.norm(s.R - prev[0], axis=1))))
        prev[0] = s.R.copy()

    velocity_verlet(model, state, 10_000, callback=watch)
    drift = state.max_drift() / state.kinetic[0]
    seconds = time.perf_counter() - start
    ok = (res.order >= 1.9 and loops[2] < loops[0] / 100 and max_step[0] < 0.01
          and drift < 0.01 and seconds < 300)
    criterion("energy conservation", ok,
              f"work order={res.order:.2f}, closed loop |W| {loops[0]:.1e}->{loops[2]:.1e}, "
              f"MD drift={100 * drift:.3f}% of KE0 (max step {max_step[0]:.4f} A); {seconds:.0f}s")
    assert ok


def test_desk_learning(desk, criterion):
    te = desk["test"]
    with_forces = evaluate(desk["forces"], te)
    energy_only = evaluate(desk["energy"], te)
    ok = with_forces.force_mae < energy_only.force_mae and desk["seconds"] < 1200
    criterion("desk-scale learning (forces+energy vs energy only)", ok,
              f"test force MAE {with_forces.force_mae:.4f} vs {energy_only.force_mae:.4f}, "
              f"energy MAE {with_forces.energy_mae:.4f} vs {energy_only.energy_mae:.4f}; "
              f"{desk['seconds']:.0f}s")
    assert ok


def test_ssp_contract(criterion):
    zero = float(ad.ssp(Variable(np.array(0.0))).value)
    large = np.array([20.0, 40.0, 80.0, 700.0])
    tail = np.abs(ad.ssp(Variable(large)).value - (large - math.log(2)))
    x = np.linspace(-30, 30, 2001)
    v = Variable(x, requires_grad=True)
    with ad.Graph():
        g = ad.backward(ad.sum_all(ad.ssp(v)), [v])[v].value
    sig = 1 / (1 + np.exp(-x))
    slope_err = float(np.max(np.abs(g - sig)))
    ok = zero == 0.0 and tail[-1] <= tail[0] and tail[0] < 1e-8 and slope_err < 1e-12
    criterion("ssp unit contract", ok,
              f"ssp(0)={zero!r}, tail {tail[0]:.1e}->{tail[-1]:.1e}, |ssp'-sigmoid|={slope_err:.1e}")
    assert ok


def test_determinism(tmp_path, criterion):
    data = tmp_path / "d.xyz"
    main(["gen-synthetic", "--out", str(data), "--n-frames", "60", "--seed", "3"])
    args = ["train", "--data", str(data), "--n-features", "16", "--n-interactions", "2",
            "--n-train", "40", "--n-val", "10", "--max-steps", "60", "--eval-interval", "20",
            "--batch-size", "8", "--seed", "3"]
    codes = [main(args + ["--out", str(tmp_path / f"run{k}")]) for k in (0, 1)]
    a, b = ((tmp_path / f"run{k}" / "metrics.csv").read_bytes() for k in (0, 1))
    ok = codes == [0, 0] and a == b and a.count(b"\n") == 4
    criterion("determinism (metrics CSV)", ok, f"{len(a)} bytes, identical={a == b}")
    assert ok


def test_checkpoint_round_trip(tmp_path, criterion):
    model = SchNetModel(ModelConfig(), seed=6, normalizer=Normalizer(-3.25, 1.7))
    mols = random_molecules(10, seed=6, n_atoms=(2, 8))
    save_checkpoint(tmp_path / "ck.npz", model, {"rho": 0.01})
    loaded, _ = load_checkpoint(tmp_path / "ck.npz")
    worst = 0.0
    for Z, R in mols:
        E1, F1 = model.energy_forces(Z, R)
        E2, F2 = loaded.energy_forces(Z, R)
        worst = max(worst, abs(E1 - E2), float(np.max(np.abs(F1 - F2))))
    ok = worst <= 1e-15
    criterion("checkpoint round trip (10 conformations)", ok, f"max diff={worst:.1e}")
    assert ok
