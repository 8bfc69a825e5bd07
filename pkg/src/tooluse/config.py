"""Pipeline configuration: presets, JSON overrides and seed fan-out.

Thread count is a runtime setting and never part of the stored configuration,
so outputs do not depend on it.

Every random stream is derived from the single root ``seed``::

    derive_seed(root, name) = SeedSequence([root, crc32(name)]).generate_state(1)[0]

with ``name`` one of ``"simulator"``, ``"cae"``, ``"mtrnn"``, ``"recognition"``.
"""

from __future__ import annotations

import copy
import json
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from .analysis import RecognitionSettings
from .cae import CaeConfig, CaeTrainConfig
from .mtrnn import MtrnnConfig, TrainConfig
from .simulator import SimConfig

PRESETS = ("desk", "paper")
DESK_MAX_MTRNN_ITERATIONS = 20000
# closed-loop training with clipped gradients; see README for the rationale
DESK_MTRNN_TRAIN = dict(alpha=1e-4, momentum=0.9, feedback_ratio=1.0, grad_clip=200.0,
                        cs0_alpha_scale=10.0, iterations=16000)
# multi-start clipped descent from the best-fitting trained Cs(0)
DESK_RECOGNITION = dict(iterations=3000, alpha=1e-3, momentum=0.9, init="best_trained",
                        grad_clip=1.0, starts=3)


def derive_seed(root: int, name: str) -> int:
    ss = np.random.SeedSequence([int(root), zlib.crc32(name.encode())])
    return int(ss.generate_state(1)[0])


@dataclass
class PipelineConfig:
    preset: str = "desk"
    seed: int = 0
    simulator: SimConfig = field(default_factory=SimConfig)
    cae: CaeConfig = field(default_factory=CaeConfig)
    cae_train: CaeTrainConfig = field(default_factory=CaeTrainConfig)
    mtrnn: MtrnnConfig = field(default_factory=MtrnnConfig)
    mtrnn_train: TrainConfig = field(default_factory=TrainConfig)
    recognition: RecognitionSettings = field(default_factory=RecognitionSettings)

    def seeds(self) -> dict:
        return {name: derive_seed(self.seed, name)
                for name in ("simulator", "cae", "mtrnn", "recognition")}

    def cae_train_config(self, threads: int = 1) -> CaeTrainConfig:
        return _replace(self.cae_train, seed=self.seeds()["cae"], threads=threads)

    def mtrnn_train_config(self, threads: int = 1) -> TrainConfig:
        return _replace(self.mtrnn_train, seed=self.seeds()["mtrnn"], threads=threads)

    def to_dict(self) -> dict:
        doc = json.loads(json.dumps(asdict(self)))
        for section in ("cae_train", "mtrnn_train"):
            doc[section].pop("threads")
        return doc

    def validate(self) -> None:
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}")
        sim, c, m = self.simulator, self.cae, self.mtrnn
        if (c.image_width, c.image_height, c.channels) != (sim.width, sim.height, sim.channels):
            raise ValueError("CAE image shape must match the simulator resolution")
        if m.io_count != c.feature_dim + 6:
            raise ValueError("MTRNN io_count must equal feature_dim + 6 joints")
        if m.sequence_length != sim.frames:
            raise ValueError("MTRNN sequence_length must equal the simulated frame count")


def _replace(obj, **changes):
    d = asdict(obj)
    d.update(changes)
    return type(obj)(**d)


def preset_dict(name: str) -> dict:
    """Full default document for a preset."""
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {PRESETS}")
    base = PipelineConfig(preset=name).to_dict()
    base["mtrnn_train"].update(DESK_MTRNN_TRAIN)
    base["recognition"].update(DESK_RECOGNITION)
    if name == "paper":
        base["simulator"].update(width=64, height=48)
        base["cae"].update(image_width=64, image_height=48)
        base["mtrnn_train"]["iterations"] = 150000
        base["recognition"]["iterations"] = 150000
    return base


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in out:
            raise ValueError(f"unknown configuration key {k!r}")
        if isinstance(out[k], dict) and isinstance(v, dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


_SECTIONS = {
    "simulator": SimConfig,
    "cae": CaeConfig,
    "cae_train": CaeTrainConfig,
    "mtrnn": MtrnnConfig,
    "mtrnn_train": TrainConfig,
    "recognition": RecognitionSettings,
}


def from_dict(doc: dict) -> PipelineConfig:
    kw = {k: (_SECTIONS[k](**v) if k in _SECTIONS else v) for k, v in doc.items()}
    cfg = PipelineConfig(**kw)
    cfg.validate()
    return cfg


def resolve(config_doc: dict | None = None, preset: str | None = None,
            seed: int | None = None) -> PipelineConfig:
    """Preset defaults, then the JSON document, then explicit command-line values."""
    doc = dict(config_doc or {})
    name = preset or doc.get("preset") or "desk"
    merged = _merge(preset_dict(name), doc)
    merged["preset"] = name
    if seed is not None:
        merged["seed"] = seed
    return from_dict(merged)


def load_config(path: str | None, **kw) -> PipelineConfig:
    doc = None
    if path:
        with open(path) as fh:
            doc = json.load(fh)
    return resolve(doc, **kw)


def dump(cfg: PipelineConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"
