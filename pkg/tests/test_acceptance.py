"""Acceptance criteria 1-8, each at its stated tolerance.

Criteria 4-6 and 8 share one full desk-scale pipeline run driven through the
command line; criterion 7 uses short training runs so it can repeat the
commands four times.
"""

import hashlib
import json
import os
import time

import numpy as np
import pytest

from tooluse import analysis as A
from tooluse import cae as C
from tooluse import cli
from tooluse import mtrnn as M
from tooluse import pipeline as P
from tooluse import simulator as S
from tooluse.config import DESK_MAX_MTRNN_ITERATIONS, load_config
from tooluse.numerics import finite_diff_check
from test_mtrnn import oracle_trace

DESK_IMAGE = (32, 24, 3)


def sha(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def run_cli(*argv):
    code = cli.main(list(argv))
    assert code == 0, f"tooluse {' '.join(argv)} exited {code}"


# -- 1: gradient correctness -------------------------------------------------

def test_criterion_1_gradients(verdict):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = 0.0
    for k in range(20):
        cfg = M.MtrnnConfig(io_count=int(rng.integers(3, 7)), cf_count=int(rng.integers(4, 9)),
                            cs_count=int(rng.integers(2, 4)),
                            sequence_length=int(rng.integers(10, 21)))
        p = M.init_params(cfg, 2, seed=k)
        p.W = rng.uniform(-0.7, 0.7, p.W.shape) * p.mask
        p.cs0_bank = rng.uniform(-0.8, 0.8, p.cs0_bank.shape)
        seqs = rng.uniform(-0.9, 0.9, (2, cfg.sequence_length, cfg.io_count))
        gW, gc, _ = M.bptt_gradients(seqs, p, cfg)
        rep = finite_diff_check(lambda: M.bptt_gradients(seqs, p, cfg)[2],
                                [p.W, p.cs0_bank], [gW, gc], 1e-5, [p.mask, None])
        worst = max(worst, rep.max_relative_error)
    elapsed = time.perf_counter() - start
    ok = worst < 1e-4 and elapsed < 60
    assert verdict(1, ok, f"20 nets, max relative error {worst:.2e}, {elapsed:.1f} s")


# -- 2: dynamics oracle ------------------------------------------------------

def test_criterion_2_dynamics_oracle(verdict):
    rng = np.random.default_rng(7)
    mismatches = 0
    cases = 0
    for k in range(12):
        cfg = M.MtrnnConfig(io_count=int(rng.integers(3, 7)), cf_count=int(rng.integers(4, 9)),
                            cs_count=int(rng.integers(2, 4)),
                            tau_cf=float(rng.choice([1, 2, 5])), tau_cs=float(rng.choice([5, 40])),
                            sequence_length=int(rng.integers(10, 21)))
        p = M.init_params(cfg, 1, seed=k)
        p.W = rng.uniform(-1, 1, p.W.shape) * p.mask
        cs0 = rng.uniform(-0.95, 0.95, cfg.cs_count)
        seq = rng.uniform(-1, 1, (cfg.sequence_length, cfg.io_count))
        ref = oracle_trace(p.W, cfg.taus().tolist(), cs0, seq, cfg.io_count, closed=False)
        preds, final = M.run_open_loop(seq, cs0, p, cfg)
        want = [y[:cfg.io_count] for _, y in ref[1:]]
        mismatches += preds.tolist() != want or final.u.tolist() != ref[-1][0]
        # one forward_step from a random state
        u = rng.normal(size=cfg.n)
        x = rng.uniform(-1, 1, cfg.n)
        taus = cfg.taus()
        step = M.forward_step(M.StepState(u, np.tanh(u), 0), x, p.W, taus)
        xs = list(x) + [1.0]
        expect = []
        for i in range(cfg.n):
            acc = 0.0
            for j in range(cfg.n + 1):
                acc = acc + xs[j] * float(p.W[i, j])
            expect.append((1.0 - 1.0 / taus[i]) * u[i] + (1.0 / taus[i]) * acc)
        mismatches += step.u.tolist() != expect
        cases += 2
    # unit time constant: no leak
    s1 = M.forward_step(M.StepState(np.array([3.0]), np.tanh([3.0]), 0), [0.5], [[2.0]], [1.0])
    mismatches += s1.u.tolist() != [1.0]
    # geometric decay with zero input
    st = M.StepState(np.array([1.0]), np.tanh([1.0]), 0)
    for _ in range(10):
        st = M.forward_step(st, [0.0], [[0.0]], [40.0])
    ref = 1.0
    for _ in range(10):
        ref = 0.975 * ref
    mismatches += st.u.tolist() != [ref]
    cases += 2
    assert verdict(2, mismatches == 0, f"{cases} traces, {mismatches} bit mismatches")


# -- 3: task grid ------------------------------------------------------------

def test_criterion_3_task_grid(verdict):
    tasks = S.enumerate_tasks()
    executable = [t for t in tasks if not t.forbidden]
    forbidden = [t for t in tasks if t.forbidden]
    rows = [
        (S.effect_of(S.Tool("rake"), S.ObjectKind("short_box"), S.PULL_LOW).label.value,
         "slide"),
        (S.effect_of(S.Tool("stick"), S.ObjectKind("short_box"), S.PULL_LOW).label.value,
         "no_movement"),
        (S.effect_of(S.Tool("rake"), S.ObjectKind("short_box"), S.PULL_HIGH).label.value,
         "no_movement"),
    ]
    ok = (len(executable), len(forbidden)) == (36, 4) and all(a == b for a, b in rows)
    assert verdict(3, ok, f"{len(executable)} executable, {len(forbidden)} forbidden, "
                          f"rows {[a for a, _ in rows]}")


# -- shared desk pipeline ----------------------------------------------------

@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    root = str(tmp_path_factory.mktemp("desk"))
    start = time.perf_counter()
    for cmd in ("gen-data", "train-cae", "extract-features", "train-mtrnn"):
        run_cli(cmd, "--out", root, "--seed", "0")
    elapsed = time.perf_counter() - start
    cfg = json.load(open(P.paths(root)["config"]))
    return {"root": root, "elapsed": elapsed, "config": cfg}


@pytest.mark.slow
def test_criterion_4_desk_pipeline(desk, verdict):
    root, cfg = desk["root"], desk["config"]
    _, images, _ = P.load_dataset(root)
    cae_params, cae_cfg = P.load_cae(root)
    frames = images.reshape((-1,) + images.shape[2:])
    mse = C.reconstruction_mse(frames, cae_params, cae_cfg)
    run_cli("analyze", "regeneration", "--out", root)
    rows = P.regeneration_stage(load_config(P.paths(root)["config"]), root)
    worst = max(r["joint_rmse"] for r in rows)
    dims = (cfg["simulator"]["width"], cfg["simulator"]["height"], cfg["simulator"]["channels"])
    iters = cfg["mtrnn_train"]["iterations"]
    minutes = desk["elapsed"] / 60
    ok_a = mse < 0.01
    ok_b = worst < 0.2 and len(rows) == 36
    setup = dims == DESK_IMAGE and iters <= DESK_MAX_MTRNN_ITERATIONS
    ok = ok_a and ok_b and setup and minutes < 30
    assert verdict(4, ok, f"(a) CAE mse {mse:.5f}; (b) worst joint rmse {worst:.4f} over "
                          f"{len(rows)} tasks; {iters} MTRNN iterations; {minutes:.1f} min")


@pytest.mark.slow
def test_criterion_5_cs0_clusters(desk, verdict):
    root = desk["root"]
    run_cli("analyze", "pca", "--out", root)
    doc = json.load(open(os.path.join(P.paths(root)["analysis"], "pca.json")))
    tool = doc["pull_tasks"]["tool"]
    height = doc["pull_tasks"]["action_height"]
    ok = (tool["correct"], tool["total"], height["correct"], height["total"]) == (16, 16, 16, 16)
    assert doc["components"] == 6
    assert verdict(5, ok, f"tool {tool['correct']}/{tool['total']}, "
                          f"action height {height['correct']}/{height['total']}")


@pytest.fixture(scope="session")
def experiments(desk):
    root = desk["root"]
    models = [P.paths(root)[k] for k in ("cae", "mtrnn", "features")]
    before = [sha(p) for p in models]
    for exp in ("A", "B"):
        run_cli("recognize", "--experiment", exp, "--out", root)
    after = [sha(p) for p in models]
    verdicts = {}
    for exp in ("A", "B"):
        for var in ("X", "Y"):
            path = os.path.join(P.paths(root)["recognition"], f"{exp}_{var}", "verdict.json")
            verdicts[exp, var] = json.load(open(path))
    return {"verdicts": verdicts, "unchanged": before == after}


@pytest.mark.slow
def test_criterion_6_experiments(experiments, verdict):
    v = experiments["verdicts"]
    a_ok = all(v["A", k]["matched_expectation"] for k in "XY")
    b_ok = all(v["B", k]["matched_expectation"] for k in "XY")
    still = all(v["B", k]["object_shift_px"] < 1.0 for k in "XY")
    detail = "; ".join(f"{e}{k}: {v[e, k]['tool']}/{v[e, k]['action']}/{v[e, k]['effect']} "
                       f"matched={v[e, k]['matched_expectation']} "
                       f"shift={v[e, k]['object_shift_px']:.2f}px"
                       for e in "AB" for k in "XY")
    assert verdict(6, a_ok and b_ok and still, detail)


# -- 7: determinism ----------------------------------------------------------

def test_criterion_7_determinism(tmp_path, verdict):
    conf = tmp_path / "short.json"
    conf.write_text(json.dumps({"cae_train": {"iterations": 20},
                                "mtrnn_train": {"iterations": 15}}))
    outputs = {}
    for threads in (1, 4):
        for rep in range(2):
            root = str(tmp_path / f"t{threads}_{rep}")
            for cmd in ("gen-data", "train-cae", "extract-features", "train-mtrnn"):
                run_cli(cmd, "--config", str(conf), "--out", root, "--threads", str(threads))
            files = sorted(os.path.relpath(os.path.join(d, f), root)
                           for d, _, fs in os.walk(root) for f in fs)
            outputs[threads, rep] = {f: sha(os.path.join(root, f)) for f in files}
    same_runs = all(outputs[t, 0] == outputs[t, 1] for t in (1, 4))
    same_threads = outputs[1, 0] == outputs[4, 0]
    n = len(outputs[1, 0])
    assert verdict(7, same_runs and same_threads,
                   f"{n} files identical across repeats: {same_runs}, across 1/4 threads: "
                   f"{same_threads}")


# -- 8: model files ----------------------------------------------------------

@pytest.mark.slow
def test_criterion_8_model_round_trip(desk, experiments, verdict):
    root = desk["root"]
    cae_blob = open(P.paths(root)["cae"], "rb").read()
    mt_blob = open(P.paths(root)["mtrnn"], "rb").read()
    cae_ok = C.to_bytes(*C.from_bytes(cae_blob)) == cae_blob
    params, cfg, meta = M.from_bytes(mt_blob)
    mt_ok = M.to_bytes(params, cfg, meta) == mt_blob
    ok = cae_ok and mt_ok and experiments["unchanged"]
    assert verdict(8, ok, f"CAE round trip {cae_ok}, MTRNN round trip {mt_ok}, "
                          f"models unchanged by recognition {experiments['unchanged']}")


@pytest.mark.slow
def test_analyzers_do_not_fail_on_desk_models(desk):
    root = desk["root"]
    run_cli("generate", "--task", "rake-short_box-pull_low", "--out", root)
    out = os.path.join(P.paths(root)["generated"], "rake-short_box-pull_low")
    assert os.path.exists(os.path.join(out, "trajectory.csv"))


@pytest.mark.slow
@pytest.mark.parametrize("task_id", ["rake-short_box-pull_low", "stick-ball-pull_high"])
def test_recognition_recovers_training_task(desk, task_id):
    root = desk["root"]
    cfg = load_config(P.paths(root)["config"])
    models = P.load_models(cfg, root)
    seqs, manifest = P.training_sequences(root)
    i = P.find_task(manifest, task_id)
    img = models.image_dims
    target = M.RecognitionTarget(seqs[i, 0], seqs[i, -1, :img], cfg.recognition.iterations,
                                 cfg.recognition.alpha)
    cs0_hat, _ = A.recognize(target, models, cfg.recognition)
    d = np.linalg.norm(models.mtrnn_params.cs0_bank - cs0_hat, axis=1)
    assert d[i] < 0.1 or np.argmin(d) == i
