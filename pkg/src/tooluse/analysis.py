"""Evaluation of trained Cs(0) spaces and the goal-conditioned detection experiments."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import cae, mtrnn, simulator as sim
from .numerics import DimensionError


class DegenerateVarianceError(ValueError):
    """Raised when PCA input has no variance at all."""


@dataclass
class PcaModel:
    mean: np.ndarray
    axes: np.ndarray  # components x dims, rows orthonormal
    variances: np.ndarray

    def project(self, vectors) -> np.ndarray:
        return (np.asarray(vectors, dtype=np.float64) - self.mean) @ self.axes.T

    def reconstruct(self, coords) -> np.ndarray:
        return np.asarray(coords) @ self.axes + self.mean


def fit_pca(vectors) -> PcaModel:
    """Principal axes of the sample covariance, largest variance first.

    Each axis is signed so that its largest-magnitude component is positive.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or len(x) < 2:
        raise ValueError("PCA needs at least two vectors")
    mean = x.mean(axis=0)
    xc = x - mean
    if not np.any(xc):
        raise DegenerateVarianceError("all vectors are identical")
    cov = xc.T @ xc / (len(x) - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals = np.clip(vals[order], 0.0, None)
    axes = vecs[:, order].T.copy()
    for a in axes:
        if a[np.argmax(np.abs(a))] < 0:
            a *= -1.0
    return PcaModel(mean, axes, vals)


@dataclass
class SeparationReport:
    accuracy: float
    correct: int
    total: int
    silhouette: float | None
    centroids: dict
    predictions: list


def nearest_centroid(points, labels):
    pts = np.asarray(points, dtype=np.float64)
    names = sorted(set(labels), key=str)
    cents = {k: pts[[l == k for l in labels]].mean(axis=0) for k in names}
    stack = np.stack([cents[k] for k in names])
    dist = np.linalg.norm(pts[:, None, :] - stack[None], axis=2)
    return [names[i] for i in np.argmin(dist, axis=1)], cents


def silhouette(points, labels) -> float | None:
    """Mean silhouette width; ``None`` when some label has a single member."""
    pts = np.asarray(points, dtype=np.float64)
    labels = list(labels)
    names = sorted(set(labels), key=str)
    if len(names) < 2:
        return None
    groups = {k: np.array([l == k for l in labels]) for k in names}
    if any(g.sum() < 2 for g in groups.values()):
        return None
    d = np.linalg.norm(pts[:, None] - pts[None], axis=2)
    scores = []
    for i, lab in enumerate(labels):
        own = groups[lab].copy()
        own[i] = False
        a = d[i, own].mean()
        b = min(d[i, groups[k]].mean() for k in names if k != lab)
        denom = max(a, b)
        scores.append(0.0 if denom == 0 else (b - a) / denom)
    return float(np.mean(scores))


def cluster_separation(points, labels) -> SeparationReport:
    """Nearest-centroid accuracy (centroids include every point) and silhouette."""
    labels = list(labels)
    if len(set(labels)) < 2:
        raise ValueError("cluster separation needs at least two labels")
    pred, cents = nearest_centroid(points, labels)
    correct = sum(p == l for p, l in zip(pred, labels))
    return SeparationReport(correct / len(labels), correct, len(labels),
                            silhouette(points, labels),
                            {str(k): v.tolist() for k, v in cents.items()}, pred)


# expected detections: (tool, object height class, action, effect)
EXPECTATIONS = {
    "A": [("rake", "short", "pull_low", "slide")],
    "B": [("stick", "short", "pull_low", "no_movement"),
          ("rake", "short", "pull_high", "no_movement")],
}


def expectation_rows():
    return [row for rows in EXPECTATIONS.values() for row in rows]


@dataclass
class DetectionVerdict:
    tool: str
    object_height: str
    action: str
    effect: str
    matched_expectation: bool
    nearest_task: str
    distance: float

    def as_tuple(self):
        return (self.tool, self.object_height, self.action, self.effect)


def classify_recognized(cs0_hat, cs0_bank, task_labels, object_height: str,
                        effect: str) -> DetectionVerdict:
    """Label a recognised Cs(0) by its nearest trained Cs(0).

    Tool and action come from the nearest training task; the object height
    class and effect are the ones shown by the goal condition.
    """
    bank = np.asarray(cs0_bank, dtype=np.float64)
    if len(bank) == 0:
        raise ValueError("empty Cs(0) bank")
    dist = np.linalg.norm(bank - np.asarray(cs0_hat, dtype=np.float64), axis=1)
    i = int(np.argmin(dist))
    lab = task_labels[i]
    key = (lab["tool"], object_height, lab["action"], effect)
    return DetectionVerdict(lab["tool"], object_height, lab["action"], effect,
                            key in expectation_rows(), lab["task_id"], float(dist[i]))


# -- experiments A/B -------------------------------------------------------

@dataclass
class TrainedModels:
    cae_params: cae.CaeParams
    cae_config: cae.CaeConfig
    features: cae.FeatureSet
    mtrnn_params: mtrnn.MtrnnParams
    mtrnn_config: mtrnn.MtrnnConfig
    task_labels: list
    sim_config: sim.SimConfig

    @property
    def image_dims(self) -> int:
        return self.cae_config.feature_dim


@dataclass
class RecognitionSettings:
    iterations: int = 3000
    alpha: float = 1e-2
    momentum: float = 0.0
    init: str = "zeros"  # or "best_trained"
    grad_clip: float = 0.0
    starts: int = 1  # best_trained only: descend from this many lowest-error trained Cs(0)

    def __post_init__(self):
        if self.init not in ("zeros", "best_trained"):
            raise ValueError(f"unknown recognition init {self.init!r}")
        if self.iterations < 0 or self.alpha < 0 or self.grad_clip < 0:
            raise ValueError("recognition iterations, alpha and grad_clip must be >= 0")
        if self.starts < 1:
            raise ValueError("starts must be >= 1")


@dataclass
class ExperimentResult:
    experiment: str
    variant: str
    verdict: DetectionVerdict
    cs0_hat: np.ndarray
    error_trace: np.ndarray
    generated: mtrnn.GeneratedSequence
    target_joints: np.ndarray
    decoded: np.ndarray  # frames x C x H x W
    object_shift_px: float
    in_detected_cluster: bool | None
    files: dict = field(default_factory=dict)


def mask_centroid(mask: np.ndarray):
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        return None
    return np.array([ys.mean(), xs.mean()])


def color_mask(image: np.ndarray, rgb, tol: float = 0.3) -> np.ndarray:
    d = np.linalg.norm(image - np.asarray(rgb)[:, None, None], axis=0)
    return d < tol


def object_shift(first: np.ndarray, last: np.ndarray, rgb, tol: float = 0.3) -> float:
    """Centroid displacement in pixels of the object-coloured region between two images."""
    a = mask_centroid(color_mask(first, rgb, tol))
    b = mask_centroid(color_mask(last, rgb, tol))
    if a is None or b is None:
        return float("inf")
    return float(np.linalg.norm(a - b))


def pull_cluster_check(cs0_hat, models: TrainedModels, detected_tool: str,
                       detected_action: str) -> bool | None:
    """Is ``cs0_hat`` closer to its detected (tool, pull height) centroid than to any other?"""
    idx = [i for i, lab in enumerate(models.task_labels) if lab["direction"] == "pull"]
    if not detected_action.startswith("pull") or len(idx) < 2:
        return None
    bank = models.mtrnn_params.cs0_bank[idx]
    keys = [(models.task_labels[i]["tool"], models.task_labels[i]["action"]) for i in idx]
    pca = fit_pca(bank)
    pts = pca.project(bank)
    q = pca.project(np.asarray(cs0_hat)[None])[0]
    _, cents = nearest_centroid(pts, keys)
    want = (detected_tool, detected_action)
    if want not in cents:
        return None
    dist = {k: np.linalg.norm(q - c) for k, c in cents.items()}
    return all(dist[want] < v for k, v in dist.items() if k != want)


def recognize(target: mtrnn.RecognitionTarget, models: TrainedModels,
              settings: RecognitionSettings | None = None):
    """Recognise Cs(0) for ``target``; returns ``(cs0_hat, error_trace)`` of the best start.

    With ``init="best_trained"`` descent starts from each of the ``starts``
    trained Cs(0) with the lowest recognition error, and the run reaching
    the lowest error wins.
    """
    settings = settings or RecognitionSettings()
    p, cfg = models.mtrnn_params, models.mtrnn_config
    inits = [None]
    if settings.init == "best_trained":
        errs = [mtrnn.recognition_error(c, target, p, cfg) for c in p.cs0_bank]
        inits = [p.cs0_bank[i] for i in np.argsort(errs, kind="stable")[:settings.starts]]
    runs = [mtrnn.recognize_cs0(target, p, cfg, init=init, momentum=settings.momentum,
                                grad_clip=settings.grad_clip)
            for init in inits]
    best = min(range(len(runs)), key=lambda k: runs[k][1].min() if len(runs[k][1]) else 0.0)
    return runs[best]


def run_experiment_ab(models: TrainedModels, tool: sim.Tool, obj: sim.ObjectKind,
                      experiment: str, settings: RecognitionSettings | None = None,
                      out_dir: str | None = None, variant: str = "variant") -> ExperimentResult:
    """Recognise Cs(0) from an initial/goal image pair, regenerate the task and label it.

    Experiment ``A`` shows the object pulled toward the robot; ``B`` shows the
    same arm pose with the object unmoved.
    """
    experiment = experiment.upper()
    if experiment not in EXPECTATIONS:
        raise ValueError(f"unknown experiment {experiment!r}")
    settings = settings or RecognitionSettings()
    goal_effect = sim.EffectLabel.SLIDE if experiment == "A" else sim.EffectLabel.NO_MOVEMENT
    scene = sim.make_recognition_target(tool, obj, goal_effect, sim.PULL_LOW, models.sim_config)
    f0 = cae.encode_scaled(scene.initial_image, models.cae_params, models.cae_config, models.features)
    fg = cae.encode_scaled(scene.goal_image, models.cae_params, models.cae_config, models.features)
    io0 = np.concatenate([f0, scene.initial_joints])
    target = mtrnn.RecognitionTarget(io0, fg, settings.iterations, settings.alpha)
    cs0_hat, trace = recognize(target, models, settings)
    gen = mtrnn.generate_from_recognition(cs0_hat, io0, models.mtrnn_params,
                                          models.mtrnn_config, models.image_dims)
    verdict = classify_recognized(cs0_hat, models.mtrnn_params.cs0_bank, models.task_labels,
                                  obj.height_class, scene.goal_effect.label.value)
    decoded = cae.decode_scaled(gen.image_features, models.cae_params, models.cae_config,
                                models.features)
    shift = object_shift(decoded[0], decoded[-1], obj.color)
    in_cluster = pull_cluster_check(cs0_hat, models, verdict.tool, verdict.action)
    target_joints = sim.joint_trajectory(sim.PULL_LOW, scene.goal_effect,
                                         models.mtrnn_config.sequence_length)
    result = ExperimentResult(experiment, variant, verdict, cs0_hat, trace, gen, target_joints,
                              decoded, shift, in_cluster)
    if out_dir is not None:
        result.files = write_experiment(result, scene, out_dir)
    return result


def write_experiment(result: ExperimentResult, scene: sim.RecognitionScene, out_dir: str) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    files = {k: os.path.join(out_dir, v) for k, v in (
        ("verdict", "verdict.json"), ("trajectory", "trajectory.csv"),
        ("errors", "recognition_error.csv"), ("strip", "predicted_strip.png"))}
    doc = {"experiment": result.experiment, "variant": result.variant,
           **asdict(result.verdict), "cs0_hat": result.cs0_hat.tolist(),
           "final_error": float(result.error_trace[-1]) if len(result.error_trace) else None,
           "best_error": float(result.error_trace.min()) if len(result.error_trace) else None,
           "object_shift_px": result.object_shift_px,
           "in_detected_cluster": result.in_detected_cluster}
    with open(files["verdict"], "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_trajectory_csv(files["trajectory"], result.generated.joints, result.target_joints)
    write_curve_csv(files["errors"], result.error_trace, "E")
    frames = list(range(0, len(result.decoded), 16)) + [len(result.decoded) - 1]
    strip = [scene.initial_image, scene.goal_image] + [result.decoded[f] for f in frames]
    save_png_strip(files["strip"], strip)
    return files


def write_trajectory_csv(path, generated, target) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame"] + [f"gen_j{i}" for i in range(generated.shape[1])]
                   + [f"target_j{i}" for i in range(target.shape[1])])
        for f, (g, t) in enumerate(zip(generated, target)):
            w.writerow([f] + [repr(float(v)) for v in g] + [repr(float(v)) for v in t])


def write_curve_csv(path, values, name: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", name])
        for i, v in enumerate(values):
            w.writerow([i, repr(float(v))])


def save_png_strip(path, images, scale: int = 4) -> None:
    from PIL import Image

    row = np.concatenate([np.clip(np.asarray(im), 0.0, 1.0) for im in images], axis=2)
    arr = (row.transpose(1, 2, 0) * 255.0 + 0.5).astype(np.uint8)
    img = Image.fromarray(arr)
    img.resize((img.width * scale, img.height * scale), Image.NEAREST).save(path)


def write_pca_projection(path, pca: PcaModel, bank, task_labels) -> None:
    coords = pca.project(bank)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task_id", "tool", "object", "action"]
                   + [f"pc{i + 1}" for i in range(coords.shape[1])])
        for lab, c in zip(task_labels, coords):
            w.writerow([lab["task_id"], lab["tool"], lab["object"], lab["action"]]
                       + [repr(float(v)) for v in c])


# -- regeneration of training sequences ------------------------------------

def shifted_rmse(generated, target, max_shift: int = 10) -> tuple[float, int]:
    """Smallest RMSE over time shifts ``|k| <= max_shift`` of ``generated`` against ``target``.

    Only the overlapping frames are compared for each shift, so shifts are
    capped at one less than the sequence length.  Ties go to the smaller shift.
    """
    g, t = np.asarray(generated), np.asarray(target)
    if g.shape != t.shape or len(t) == 0:
        raise DimensionError(f"shapes {g.shape} and {t.shape} must match and be non-empty")
    best = (float("inf"), 0)
    n = len(t)
    reach = min(max_shift, n - 1)
    for k in sorted(range(-reach, reach + 1), key=lambda k: (abs(k), k)):
        if k >= 0:
            a, b = g[k:], t[:n - k]
        else:
            a, b = g[:n + k], t[-k:]
        r = float(np.sqrt(np.mean((a - b) ** 2)))
        if r < best[0]:
            best = (r, k)
    return best


def regeneration_report(models: TrainedModels, sequences, max_shift: int = 10) -> list[dict]:
    """Closed-loop regeneration error of each training sequence from its own Cs(0)."""
    rows = []
    d = models.image_dims
    for i, seq in enumerate(np.asarray(sequences)):
        gen = mtrnn.run_closed_loop(seq[0], models.mtrnn_params.cs0_bank[i],
                                    models.mtrnn_params, models.mtrnn_config)
        r, k = shifted_rmse(gen[:, d:], seq[:, d:], max_shift)
        rows.append({"task_id": models.task_labels[i]["task_id"], "joint_rmse": r, "shift": k,
                     "feature_rmse": float(np.sqrt(np.mean((gen[:, :d] - seq[:, :d]) ** 2)))})
    return rows
