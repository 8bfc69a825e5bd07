"""Pipeline stages over a single work directory.

Layout under the work directory::

    config.json                 resolved configuration
    dataset/manifest.json       tasks, image dims, joint scaling, seeds
    dataset/seq_NN.sms          one file per executable task
    cae/model.cae, cae/loss.csv
    features/features.fea       rescaled features + rescale coefficients
    features/features.json      readable summary of the same
    mtrnn/model.mtr, mtrnn/loss.csv
    recognition/<exp>_<variant>/ verdict.json, trajectory.csv, ...
    generated/<task_id>/        trajectory.csv, predicted_strip.png
    analysis/                   pca_projection.csv, pca.json, regeneration.csv
"""

from __future__ import annotations

import io
import json
import logging
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict

import numpy as np

from . import analysis, cae, mtrnn
from . import simulator as sim
from .config import PipelineConfig, dump

log = logging.getLogger("tooluse")

FEATURE_MAGIC = b"FEA1"
VARIANTS = {"X": sim.UNKNOWN_BOX_X, "Y": sim.UNKNOWN_BOX_Y}


class ArtifactError(OSError):
    """A required file is missing, unreadable or malformed."""

    def __init__(self, path, reason):
        super().__init__(f"{path}: {reason}")
        self.path = path


def paths(root: str) -> dict:
    j = os.path.join
    return {
        "config": j(root, "config.json"),
        "dataset": j(root, "dataset"),
        "manifest": j(root, "dataset", "manifest.json"),
        "cae": j(root, "cae", "model.cae"),
        "cae_loss": j(root, "cae", "loss.csv"),
        "features": j(root, "features", "features.fea"),
        "features_json": j(root, "features", "features.json"),
        "mtrnn": j(root, "mtrnn", "model.mtr"),
        "mtrnn_loss": j(root, "mtrnn", "loss.csv"),
        "recognition": j(root, "recognition"),
        "generated": j(root, "generated"),
        "analysis": j(root, "analysis"),
    }


def _write_bytes(path: str, data: bytes) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(data)


def _write_json(path: str, doc) -> None:
    _write_bytes(path, (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode())


def _read_bytes(path: str) -> bytes:
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except FileNotFoundError:
        raise ArtifactError(path, "missing; run the upstream command first") from None
    except OSError as exc:
        raise ArtifactError(path, exc.strerror or str(exc)) from None


def _parse(path: str, loader):
    data = _read_bytes(path)
    try:
        return loader(data)
    except (ValueError, struct.error, KeyError) as exc:
        raise ArtifactError(path, f"malformed file ({exc})") from None


def write_config(root: str, cfg: PipelineConfig) -> None:
    _write_bytes(paths(root)["config"], dump(cfg).encode())


# -- dataset ---------------------------------------------------------------

def sequence_filename(index: int) -> str:
    return f"seq_{index:02d}.sms"


def gen_data(cfg: PipelineConfig, root: str, threads: int = 1) -> dict:
    p = paths(root)
    tasks = sim.executable_tasks()
    seed = cfg.seeds()["simulator"]
    seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(len(tasks))]

    def run(i):
        return sim.sequence_to_bytes(sim.simulate(tasks[i], cfg.simulator, seeds[i]))

    with ThreadPoolExecutor(max_workers=threads) as pool:
        blobs = list(pool.map(run, range(len(tasks))))
    entries = []
    for i, (task, blob) in enumerate(zip(tasks, blobs)):
        name = sequence_filename(i)
        _write_bytes(os.path.join(p["dataset"], name), blob)
        effect = sim.effect_of(task.tool, task.object, task.action)
        entries.append({"index": i, "file": name, "task_id": task.task_id, "seed": seeds[i],
                        **task.labels(), "effect": effect.label.value})
    s = cfg.simulator
    manifest = {
        "format": sim.SEQ_MAGIC.decode(),
        "preset": cfg.preset,
        "seed": cfg.seed,
        "simulator": asdict(s),
        "image_dims": [s.width, s.height, s.channels],
        "joint_count": sim.JOINT_COUNT,
        "joint_scaling": {"raw_center": sim.RAW_JOINT_CENTER.tolist(),
                          "raw_half_range": sim.RAW_JOINT_HALF_RANGE.tolist(),
                          "limit": sim.JOINT_LIMIT},
        "tasks": entries,
    }
    _write_json(p["manifest"], manifest)
    log.info("wrote %d sequences to %s", len(tasks), p["dataset"])
    return manifest


def load_manifest(root: str) -> dict:
    path = paths(root)["manifest"]
    return _parse(path, lambda b: json.loads(b.decode()))


def load_dataset(root: str):
    """``(manifest, images (n, T, C, H, W), joints (n, T, 6))``."""
    manifest = load_manifest(root)
    images, joints = [], []
    for entry in manifest["tasks"]:
        path = os.path.join(paths(root)["dataset"], entry["file"])
        seq = _parse(path, sim.sequence_from_bytes)
        images.append(seq.images)
        joints.append(seq.joints)
    return manifest, np.stack(images), np.stack(joints)


def task_labels(manifest: dict) -> list[dict]:
    keys = ("task_id", "tool", "object", "height_class", "action", "direction", "action_height")
    return [{k: e[k] for k in keys} for e in manifest["tasks"]]


# -- CAE and features -----------------------------------------------------

def _check_dims(manifest: dict, cfg: PipelineConfig, root: str) -> None:
    c = cfg.cae
    if manifest["image_dims"] != [c.image_width, c.image_height, c.channels]:
        raise ArtifactError(paths(root)["manifest"],
                            f"dataset image dims {manifest['image_dims']} do not match the config")


def train_cae_stage(cfg: PipelineConfig, root: str, threads: int = 1):
    manifest, images, _ = load_dataset(root)
    _check_dims(manifest, cfg, root)
    frames = images.reshape((-1,) + images.shape[2:])
    tc = cfg.cae_train_config(threads)

    def progress(it, loss):
        if it % 250 == 0:
            log.info("cae iteration %d mse %.6f", it, loss)

    params, curve = cae.train_cae(frames, cfg.cae, tc, progress=progress)
    p = paths(root)
    _write_bytes(p["cae"], cae.to_bytes(params, cfg.cae))
    os.makedirs(os.path.dirname(p["cae_loss"]), exist_ok=True)
    analysis.write_curve_csv(p["cae_loss"], curve, "mse")
    # report the error of the model as stored
    stored, _ = cae.from_bytes(_read_bytes(p["cae"]))
    mse = cae.reconstruction_mse(frames, stored, cfg.cae)
    log.info("cae reconstruction mse %.6f", mse)
    return stored, mse


def load_cae(root: str):
    return _parse(paths(root)["cae"], cae.from_bytes)


def features_to_bytes(fs: cae.FeatureSet, task_ids: list[str]) -> bytes:
    n, frames, dim = fs.features.shape
    header = json.dumps({"sequences": n, "frames": frames, "feature_dim": dim,
                         "task_ids": list(task_ids), "untrained": bool(fs.untrained)},
                        sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(FEATURE_MAGIC)
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    buf.write(np.asarray(fs.raw_min, dtype="<f8").tobytes())
    buf.write(np.asarray(fs.raw_max, dtype="<f8").tobytes())
    buf.write(np.asarray(fs.features, dtype="<f4").tobytes())
    return buf.getvalue()


def features_from_bytes(data: bytes):
    """``(FeatureSet, task_ids)``."""
    if data[:4] != FEATURE_MAGIC:
        raise ValueError(f"bad feature magic {data[:4]!r}")
    (hlen,) = struct.unpack_from("<I", data, 4)
    head = json.loads(data[8:8 + hlen].decode())
    n, frames, dim = head["sequences"], head["frames"], head["feature_dim"]
    off = 8 + hlen
    lo = np.frombuffer(data, "<f8", dim, off).astype(np.float64)
    hi = np.frombuffer(data, "<f8", dim, off + 8 * dim).astype(np.float64)
    off += 16 * dim
    if off + 4 * n * frames * dim != len(data):
        raise ValueError("feature file has trailing or missing bytes")
    feats = np.frombuffer(data, "<f4", n * frames * dim, off).astype(np.float64)
    fs = cae.FeatureSet(feats.reshape(n, frames, dim), lo, hi, head["untrained"])
    return fs, head["task_ids"]


def extract_features_stage(cfg: PipelineConfig, root: str) -> cae.FeatureSet:
    manifest, images, _ = load_dataset(root)
    _check_dims(manifest, cfg, root)
    params, ccfg = load_cae(root)
    fs = cae.extract_feature_sequences(images, params, ccfg)
    p = paths(root)
    ids = [e["task_id"] for e in manifest["tasks"]]
    _write_bytes(p["features"], features_to_bytes(fs, ids))
    _write_json(p["features_json"], {
        "shape": list(fs.features.shape), "task_ids": ids, "untrained": bool(fs.untrained),
        "rescale": {"raw_min": fs.raw_min.tolist(), "raw_max": fs.raw_max.tolist(),
                    "target_range": [-1.0, 1.0]}})
    return features_from_bytes(_read_bytes(p["features"]))[0]


def load_features(root: str):
    return _parse(paths(root)["features"], features_from_bytes)


def training_sequences(root: str) -> tuple[np.ndarray, dict]:
    """IO sequences ``(n, T, features + joints)`` and the manifest."""
    manifest, _, joints = load_dataset(root)
    fs, ids = load_features(root)
    if ids != [e["task_id"] for e in manifest["tasks"]]:
        raise ArtifactError(paths(root)["features"], "task order differs from the dataset")
    return np.concatenate([fs.features, joints], axis=2), manifest


# -- MTRNN -----------------------------------------------------------------

def train_mtrnn_stage(cfg: PipelineConfig, root: str, threads: int = 1):
    seqs, manifest = training_sequences(root)
    tc = cfg.mtrnn_train_config(threads)

    def progress(it, err):
        if it % 500 == 0:
            log.info("mtrnn iteration %d E %.4f", it, err)

    params, curve = mtrnn.train(seqs, cfg.mtrnn, tc, progress=progress)
    p = paths(root)
    meta = {"task_ids": [e["task_id"] for e in manifest["tasks"]]}
    _write_bytes(p["mtrnn"], mtrnn.to_bytes(params, cfg.mtrnn, meta))
    os.makedirs(os.path.dirname(p["mtrnn_loss"]), exist_ok=True)
    analysis.write_curve_csv(p["mtrnn_loss"], curve, "E")
    return params, curve


def load_mtrnn(root: str):
    return _parse(paths(root)["mtrnn"], mtrnn.from_bytes)


def load_models(cfg: PipelineConfig, root: str) -> analysis.TrainedModels:
    manifest = load_manifest(root)
    cae_params, cae_cfg = load_cae(root)
    fs, _ = load_features(root)
    params, mcfg, _ = load_mtrnn(root)
    if len(params.cs0_bank) != len(manifest["tasks"]):
        raise ArtifactError(paths(root)["mtrnn"], "Cs(0) bank size differs from the dataset")
    return analysis.TrainedModels(cae_params, cae_cfg, fs, params, mcfg,
                                  task_labels(manifest), cfg.simulator)


# -- evaluation ------------------------------------------------------------

def recognize_stage(cfg: PipelineConfig, root: str, experiment: str,
                    variants: list[str]) -> list[analysis.ExperimentResult]:
    models = load_models(cfg, root)
    out = []
    for name in variants:
        d = os.path.join(paths(root)["recognition"], f"{experiment}_{name}")
        out.append(analysis.run_experiment_ab(models, sim.UNKNOWN_RAKE, VARIANTS[name],
                                              experiment, cfg.recognition, d, name))
    return out


def find_task(manifest: dict, key: str) -> int:
    for e in manifest["tasks"]:
        if key in (e["task_id"], str(e["index"])):
            return e["index"]
    raise KeyError(key)


def generate_stage(cfg: PipelineConfig, root: str, index: int) -> dict:
    models = load_models(cfg, root)
    seqs, manifest = training_sequences(root)
    seq = seqs[index]
    d = models.image_dims
    gen = mtrnn.run_closed_loop(seq[0], models.mtrnn_params.cs0_bank[index],
                                models.mtrnn_params, models.mtrnn_config)
    task_id = manifest["tasks"][index]["task_id"]
    out = os.path.join(paths(root)["generated"], task_id)
    os.makedirs(out, exist_ok=True)
    analysis.write_trajectory_csv(os.path.join(out, "trajectory.csv"), gen[:, d:], seq[:, d:])
    decoded = cae.decode_scaled(gen[:, :d], models.cae_params, models.cae_config, models.features)
    frames = list(range(0, len(decoded), 16)) + [len(decoded) - 1]
    analysis.save_png_strip(os.path.join(out, "predicted_strip.png"), [decoded[f] for f in frames])
    rmse, shift = analysis.shifted_rmse(gen[:, d:], seq[:, d:])
    return {"task_id": task_id, "joint_rmse": rmse, "shift": shift, "dir": out}


def _separation_doc(points, labels) -> dict:
    r = analysis.cluster_separation(points, labels)
    return {"correct": r.correct, "total": r.total, "accuracy": r.accuracy,
            "silhouette": r.silhouette}


def pca_stage(cfg: PipelineConfig, root: str) -> dict:
    models = load_models(cfg, root)
    bank = models.mtrnn_params.cs0_bank
    labels = models.task_labels
    pca = analysis.fit_pca(bank)
    out = paths(root)["analysis"]
    os.makedirs(out, exist_ok=True)
    analysis.write_pca_projection(os.path.join(out, "pca_projection.csv"), pca, bank, labels)
    pull = [i for i, lab in enumerate(labels) if lab["direction"] == "pull"]
    doc = {
        "components": int(pca.axes.shape[0]),
        "variances": pca.variances.tolist(),
        "axes": pca.axes.tolist(),
        "mean": pca.mean.tolist(),
        "pull_tasks": {key: _separation_doc(bank[pull], [labels[i][key] for i in pull])
                       for key in ("tool", "action_height")},
        "all_tasks": {key: _separation_doc(bank, [lab[key] for lab in labels])
                      for key in ("tool", "direction", "action")},
    }
    _write_json(os.path.join(out, "pca.json"), doc)
    return doc


def regeneration_stage(cfg: PipelineConfig, root: str) -> list[dict]:
    models = load_models(cfg, root)
    seqs, _ = training_sequences(root)
    rows = analysis.regeneration_report(models, seqs)
    out = paths(root)["analysis"]
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "regeneration.csv"), "w") as fh:
        fh.write("task_id,joint_rmse,shift,feature_rmse\n")
        for r in rows:
            fh.write(f"{r['task_id']},{r['joint_rmse']!r},{r['shift']},{r['feature_rmse']!r}\n")
    return rows
