import json
import os

import pytest

from tooluse import cli
from tooluse import pipeline as P
from tooluse.config import (DESK_MAX_MTRNN_ITERATIONS, derive_seed, load_config, preset_dict,
                            resolve)


# -- configuration ---------------------------------------------------------

def test_desk_preset_fits_the_desk_budget():
    cfg = resolve()
    assert cfg.preset == "desk"
    assert (cfg.simulator.width, cfg.simulator.height) == (32, 24)
    assert cfg.mtrnn_train.iterations <= DESK_MAX_MTRNN_ITERATIONS
    assert cfg.recognition.init == "best_trained" and cfg.recognition.starts >= 1


def test_large_preset_resolution_and_iterations():
    cfg = resolve(preset="paper")
    assert (cfg.simulator.width, cfg.simulator.height) == (64, 48)
    assert (cfg.cae.image_width, cfg.cae.image_height) == (64, 48)
    assert cfg.mtrnn_train.iterations == cfg.recognition.iterations == 150000


def test_precedence_preset_then_json_then_seed():
    doc = {"seed": 5, "mtrnn_train": {"iterations": 7}}
    cfg = resolve(doc)
    assert cfg.seed == 5 and cfg.mtrnn_train.iterations == 7
    # untouched keys of an overridden section keep their preset value
    assert cfg.mtrnn_train.alpha == preset_dict("desk")["mtrnn_train"]["alpha"]
    assert resolve(doc, seed=9).seed == 9
    assert resolve({"preset": "paper"}).simulator.width == 64
    assert resolve({"preset": "paper"}, preset="desk").simulator.width == 32


@pytest.mark.parametrize("doc", [{"bogus": 1}, {"mtrnn": {"bogus": 1}}, {"preset": "huge"},
                                 {"recognition": {"init": "random"}},
                                 {"simulator": {"width": 40}}])
def test_invalid_documents_rejected(doc):
    with pytest.raises((ValueError, TypeError)):
        resolve(doc)


def test_stage_seeds_are_distinct_and_reproducible():
    seeds = resolve(seed=3).seeds()
    assert len(set(seeds.values())) == 4
    assert seeds == resolve(seed=3).seeds()
    assert seeds["cae"] == derive_seed(3, "cae") != derive_seed(4, "cae")


def test_threads_never_stored():
    cfg = resolve()
    assert "threads" not in cfg.to_dict()["mtrnn_train"]
    assert "threads" not in cfg.to_dict()["cae_train"]
    with pytest.raises(ValueError):
        resolve({"mtrnn_train": {"threads": 4}})


# -- command line ----------------------------------------------------------

def run(*argv):
    return cli.main(list(argv))


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    root = str(tmp_path_factory.mktemp("cli"))
    assert run("gen-data", "--out", root, "--seed", "2") == 0
    return root


def test_gen_data_writes_config_and_dataset(data_dir):
    cfg = load_config(P.paths(data_dir)["config"])
    assert cfg.seed == 2
    manifest = P.load_manifest(data_dir)
    assert len(manifest["tasks"]) == 36
    assert all(os.path.exists(os.path.join(P.paths(data_dir)["dataset"], P.sequence_filename(i)))
               for i in range(36))


def test_later_commands_reuse_stored_config(data_dir, tmp_path):
    over = tmp_path / "c.json"
    over.write_text(json.dumps({"cae_train": {"iterations": 2}, "seed": 2}))
    root = str(tmp_path / "w")
    assert run("gen-data", "--config", str(over), "--out", root) == 0
    assert run("train-cae", "--out", root) == 0
    assert load_config(P.paths(root)["config"]).cae_train.iterations == 2
    assert os.path.getsize(P.paths(root)["cae_loss"]) > 0


def test_usage_errors_exit_1(data_dir, tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        run("nonsense")
    assert exc.value.code == cli.EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        run("recognize", "--experiment", "C", "--out", data_dir)
    assert exc.value.code == cli.EXIT_USAGE
    assert run("gen-data", "--out", str(tmp_path / "t"), "--threads", "0") == cli.EXIT_USAGE
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run("gen-data", "--config", str(bad), "--out", str(tmp_path / "b")) == cli.EXIT_USAGE
    bad.write_text(json.dumps({"unknown_section": {}}))
    assert run("gen-data", "--config", str(bad), "--out", str(tmp_path / "b")) == cli.EXIT_USAGE
    assert "error" in capsys.readouterr().err


def test_missing_upstream_artifact_exits_2(data_dir, capsys):
    assert run("train-mtrnn", "--out", data_dir) == cli.EXIT_IO
    assert "run the upstream command first" in capsys.readouterr().err


def test_malformed_model_exits_2(data_dir, tmp_path):
    root = str(tmp_path / "m")
    assert run("gen-data", "--out", root, "--seed", "2") == 0
    os.makedirs(os.path.dirname(P.paths(root)["cae"]))
    with open(P.paths(root)["cae"], "wb") as fh:
        fh.write(b"XXXX garbage")
    assert run("extract-features", "--out", root) == cli.EXIT_IO


def test_unknown_log_level_is_a_usage_error(data_dir, monkeypatch):
    monkeypatch.setenv("TOOLUSE_LOG", "CHATTY")
    assert run("analyze", "pca", "--out", data_dir) == cli.EXIT_USAGE
