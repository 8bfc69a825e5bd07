"""Deterministic 2D tool-use scenes standing in for the robot and its camera.

The table plane has a lateral axis ``l`` (0 = left image edge, 1 = right) and
a depth axis ``d`` (0 = at the robot, 1 = far table edge).  Heights ``h`` are
measured in fractions of the image height.  A point projects to

    col = l * W,    row = (0.25 + 0.75 * (1 - d)) * H - h * H

so pulling an object toward the robot moves it down the image and pushing it
sideways moves it across.
"""

from __future__ import annotations

import io
import itertools
import struct
from dataclasses import dataclass
from enum import Enum

import numpy as np

FRAMES = 144
FRAME_PERIOD_S = 0.1
JOINT_COUNT = 6
JOINT_LIMIT = 0.8
SEQ_MAGIC = b"SMS1"

ROW_FAR, ROW_NEAR = 0.25, 1.0
OBJECT_HOME = (0.5, 0.6)
OBJECT_DEPTH_HALF = 0.05

BACKGROUND = (0.80, 0.82, 0.88)
TABLE = (0.62, 0.48, 0.32)
ARM = (0.30, 0.30, 0.34)
TOOL = (0.95, 0.80, 0.15)
SHOULDER = (0.85, -0.25, 0.35)
RAKE_TINES = 3
RAKE_TINE_LENGTH = 3.0  # pixels at 32 px width


class DomainError(ValueError):
    """Raised for tasks outside the executable grid."""


class ToolKind(str, Enum):
    STICK = "stick"
    RAKE = "rake"


class ObjectShape(str, Enum):
    BALL = "ball"
    TALL_BOX = "tall_box"
    SHORT_BOX = "short_box"
    TALL_CYLINDER = "tall_cylinder"
    SHORT_CYLINDER = "short_cylinder"


class Direction(str, Enum):
    PUSH = "push"
    PULL = "pull"


class Height(str, Enum):
    HIGH = "high"
    LOW = "low"


class EffectLabel(str, Enum):
    SLIDE = "slide"
    TOPPLE = "topple"
    ROLL = "roll"
    NO_MOVEMENT = "no_movement"


TOOL_DEFAULTS = {
    ToolKind.STICK: dict(shaft_length=0.38, head_width=0.0),
    ToolKind.RAKE: dict(shaft_length=0.38, head_width=0.30),
}

# (width as a fraction of W, height as a fraction of H, rgb)
OBJECT_DEFAULTS = {
    ObjectShape.BALL: (0.20, 0.267, (0.85, 0.15, 0.15)),
    ObjectShape.TALL_BOX: (0.25, 0.42, (0.15, 0.30, 0.85)),
    ObjectShape.SHORT_BOX: (0.25, 0.17, (0.15, 0.30, 0.85)),
    ObjectShape.TALL_CYLINDER: (0.20, 0.42, (0.15, 0.65, 0.30)),
    ObjectShape.SHORT_CYLINDER: (0.20, 0.17, (0.15, 0.65, 0.30)),
}


@dataclass(frozen=True)
class Tool:
    kind: ToolKind
    shaft_length: float | None = None
    head_width: float | None = None

    def __post_init__(self):
        defaults = TOOL_DEFAULTS[ToolKind(self.kind)]
        object.__setattr__(self, "kind", ToolKind(self.kind))
        for name, value in defaults.items():
            given = getattr(self, name)
            if given is None:
                object.__setattr__(self, name, value)
            elif value > 0 and abs(given / value - 1.0) > 0.3 + 1e-12:
                raise ValueError(f"{name}={given} is more than 30% from default {value}")


@dataclass(frozen=True)
class ObjectKind:
    kind: ObjectShape
    width: float | None = None
    height: float | None = None
    color: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", ObjectShape(self.kind))
        w, h, c = OBJECT_DEFAULTS[self.kind]
        for name, value in (("width", w), ("height", h)):
            given = getattr(self, name)
            if given is None:
                object.__setattr__(self, name, value)
            elif abs(given / value - 1.0) > 0.3 + 1e-12:
                raise ValueError(f"{name}={given} is more than 30% from default {value}")
        object.__setattr__(self, "color", tuple(c if self.color is None else self.color))

    @property
    def tall(self) -> bool:
        return self.kind in (ObjectShape.TALL_BOX, ObjectShape.TALL_CYLINDER)

    @property
    def height_class(self) -> str:
        return "tall" if self.tall else "short"


@dataclass(frozen=True)
class Action:
    direction: Direction
    height: Height

    def __post_init__(self):
        object.__setattr__(self, "direction", Direction(self.direction))
        object.__setattr__(self, "height", Height(self.height))

    @property
    def name(self) -> str:
        return f"{self.direction.value}_{self.height.value}"


PULL_LOW = Action(Direction.PULL, Height.LOW)
PULL_HIGH = Action(Direction.PULL, Height.HIGH)
PUSH_LOW = Action(Direction.PUSH, Height.LOW)
PUSH_HIGH = Action(Direction.PUSH, Height.HIGH)


@dataclass(frozen=True)
class Effect:
    label: EffectLabel
    displacement: tuple = (0.0, 0.0)  # (lateral, depth)
    toppled: bool = False


@dataclass(frozen=True)
class TaskSpec:
    tool: Tool
    object: ObjectKind
    action: Action

    @property
    def forbidden(self) -> bool:
        return (self.action.direction is Direction.PULL and self.action.height is Height.LOW
                and self.object.tall)

    @property
    def task_id(self) -> str:
        return f"{self.tool.kind.value}-{self.object.kind.value}-{self.action.name}"

    def labels(self) -> dict:
        return {"tool": self.tool.kind.value, "object": self.object.kind.value,
                "height_class": self.object.height_class, "action": self.action.name,
                "direction": self.action.direction.value, "action_height": self.action.height.value}


@dataclass
class SimConfig:
    width: int = 32
    height: int = 24
    channels: int = 3
    frames: int = FRAMES
    joint_noise: float = 0.0

    def __post_init__(self):
        if self.channels != 3:
            raise ValueError("the renderer produces RGB images")
        if self.width < 8 or self.height < 6 or self.frames < 2:
            raise ValueError("image or sequence too small")


@dataclass
class SensorimotorSequence:
    images: np.ndarray  # frames x C x H x W, values in [0, 1]
    joints: np.ndarray  # frames x 6, values in [-0.8, 0.8]
    task: TaskSpec | None = None
    contact: np.ndarray | None = None

    @property
    def duration_s(self) -> float:
        return len(self.joints) * FRAME_PERIOD_S


@dataclass
class WorldState:
    """Everything the renderer needs for one frame; ``None`` parts are not drawn."""
    table: bool = True
    obj: ObjectKind | None = None
    obj_pos: tuple = OBJECT_HOME
    toppled: bool = False
    tool: Tool | None = None
    hand: tuple | None = None  # (l, d, h)


def enumerate_tasks() -> list[TaskSpec]:
    """All 2 x 5 x 4 tool/object/action combinations, forbidden ones included."""
    actions = [PULL_HIGH, PULL_LOW, PUSH_HIGH, PUSH_LOW]
    return [TaskSpec(Tool(t), ObjectKind(o), a)
            for t, o, a in itertools.product(ToolKind, ObjectShape, actions)]


def executable_tasks() -> list[TaskSpec]:
    return [t for t in enumerate_tasks() if not t.forbidden]


# -- effect rules ----------------------------------------------------------

PULL_SLIDE = (0.0, -0.20)
PUSH_SLIDE = (0.22, 0.0)
ROLL_GAIN = 1.25
TOPPLE_SHIFT = (0.10, 0.0)


def _moved(shape: ObjectShape, disp) -> Effect:
    if shape is ObjectShape.BALL:
        return Effect(EffectLabel.ROLL, (disp[0] * ROLL_GAIN, disp[1] * ROLL_GAIN))
    return Effect(EffectLabel.SLIDE, tuple(disp))


def effect_of(tool: Tool, obj: ObjectKind, action: Action) -> Effect:
    """Rule-table outcome of applying ``action`` with ``tool`` to ``obj``."""
    if TaskSpec(tool, obj, action).forbidden:
        raise DomainError(f"pulling a tall object low is forbidden: {obj.kind.value}")
    none = Effect(EffectLabel.NO_MOVEMENT)
    rake = tool.kind is ToolKind.RAKE
    if action.direction is Direction.PULL:
        if action.height is Height.LOW:
            return _moved(obj.kind, PULL_SLIDE) if rake else none
        return _moved(obj.kind, PULL_SLIDE) if (obj.tall and rake) else none
    if action.height is Height.LOW:
        return _moved(obj.kind, PUSH_SLIDE)
    if obj.tall:
        return Effect(EffectLabel.TOPPLE, TOPPLE_SHIFT, toppled=True)
    return none


# -- motion ----------------------------------------------------------------

HOME = (0.86, 0.05, 1.10)  # tool raised above the camera view
ACTION_HEIGHT = {Height.LOW: 0.03, Height.HIGH: 0.30}
TRAVEL_HEIGHT = 0.62
# fraction of the stroke travelled before the tool touches the object
CONTACT_ONSET = {Direction.PULL: 0.25, Direction.PUSH: 0.42}
LOAD_DELAY = 6  # extra stroke frames when the tool drags an object


def min_jerk(s) -> np.ndarray:
    s = np.clip(s, 0.0, 1.0)
    return s ** 3 * (10.0 - 15.0 * s + 6.0 * s * s)


def _keyframes(action: Action, effect: Effect):
    h = ACTION_HEIGHT[action.height]
    load = 0 if effect.label is EffectLabel.NO_MOVEMENT else LOAD_DELAY
    if action.direction is Direction.PULL:
        keys = [(0, HOME), (8, HOME), (30, (0.5, 0.20, TRAVEL_HEIGHT)),
                (50, (0.5, 0.34, TRAVEL_HEIGHT)), (62, (0.5, 0.34, h)),
                (92 + load, (0.5, 0.06, h))]
    else:
        keys = [(0, HOME), (8, HOME), (30, (0.45, 0.20, TRAVEL_HEIGHT)),
                (50, (0.12, 0.32, TRAVEL_HEIGHT)), (62, (0.12, 0.32, h)),
                (100 + load, (0.72, 0.32, h))]
    stroke = (keys[-2][0], keys[-1][0])
    return keys, stroke


def hand_path(action: Action, effect: Effect, frames: int = FRAMES):
    """Hand positions ``frames x 3`` and the stroke progress in [0, 1] per frame."""
    keys, (s0, s1) = _keyframes(action, effect)
    t = np.arange(frames, dtype=np.float64)
    pos = np.empty((frames, 3))
    pos[:] = keys[-1][1]
    for (ta, pa), (tb, pb) in zip(keys[:-1], keys[1:]):
        sel = (t >= ta) & (t < tb)
        s = min_jerk((t[sel] - ta) / (tb - ta))[:, None]
        pos[sel] = np.asarray(pa) + s * (np.asarray(pb) - np.asarray(pa))
    progress = min_jerk((t - s0) / (s1 - s0))
    return pos, progress


JOINT_MIX = np.array([
    [2.2, 0.0, 0.0],
    [0.0, 2.5, 0.8],
    [0.0, -0.6, 3.0],
    [1.5, 1.5, 0.0],
    [1.2, 0.0, -2.0],
    [-1.5, 1.8, 1.0],
])
JOINT_CENTER = np.array([0.5, 0.3, 0.3])
# pseudo joint limits in radians; rescaling maps them onto [-0.8, 0.8]
RAW_JOINT_CENTER = np.array([0.0, -0.4, -1.2, 0.0, 0.3, 0.0])
RAW_JOINT_HALF_RANGE = np.array([1.2, 1.0, 1.4, 1.6, 1.1, 2.0])


def joints_from_hand(pos) -> np.ndarray:
    """Smooth synthetic 6-joint posture for hand positions, already rescaled."""
    z = (np.asarray(pos) - JOINT_CENTER) @ JOINT_MIX.T
    return JOINT_LIMIT * np.tanh(z) * 0.95


def rescale_joints(raw) -> np.ndarray:
    return JOINT_LIMIT * (np.asarray(raw) - RAW_JOINT_CENTER) / RAW_JOINT_HALF_RANGE


def unscale_joints(rescaled) -> np.ndarray:
    return RAW_JOINT_CENTER + np.asarray(rescaled) * RAW_JOINT_HALF_RANGE / JOINT_LIMIT


def joint_trajectory(action: Action, effect: Effect, frames: int = FRAMES) -> np.ndarray:
    """Minimum-jerk keyframe trajectory of the six arm joints, ``frames x 6``."""
    pos, _ = hand_path(action, effect, frames)
    return joints_from_hand(pos)


def object_motion(task: TaskSpec, effect: Effect, progress):
    """Per-frame object position, topple flag and contact predicate."""
    onset = CONTACT_ONSET[task.action.direction]
    contact = np.zeros(len(progress), dtype=bool)
    frac = np.zeros(len(progress))
    if effect.label is not EffectLabel.NO_MOVEMENT:
        frac = np.clip((progress - onset) / (1.0 - onset), 0.0, 1.0)
        contact = np.diff(frac, prepend=0.0) > 0
    disp = np.asarray(effect.displacement)
    pos = np.asarray(OBJECT_HOME) + frac[:, None] * disp
    toppled = effect.toppled & (frac > 0)
    return pos, np.asarray(toppled, dtype=bool), contact


# -- rendering -------------------------------------------------------------

def _row(d, h, H):
    return ((ROW_FAR + (ROW_NEAR - ROW_FAR) * (1.0 - d)) - h) * H


def _grid(config: SimConfig):
    ys = np.arange(config.height)[:, None] + 0.5
    xs = np.arange(config.width)[None, :] + 0.5
    return ys, xs


def _paint(img, mask, rgb):
    for c in range(3):
        img[c][mask] = rgb[c]


def _segment_mask(ys, xs, p, q, radius):
    (py, px), (qy, qx) = p, q
    dy, dx = qy - py, qx - px
    L2 = dy * dy + dx * dx
    t = 0.0 if L2 == 0 else np.clip(((ys - py) * dy + (xs - px) * dx) / L2, 0.0, 1.0)
    cy, cx = py + t * dy, px + t * dx
    return (ys - cy) ** 2 + (xs - cx) ** 2 <= radius * radius


def _lighter(rgb, amount=0.35):
    return tuple(c + (1.0 - c) * amount for c in rgb)


def _draw_object(img, ys, xs, obj: ObjectKind, pos, toppled: bool, config: SimConfig):
    W, H = config.width, config.height
    l, d = pos
    base = _row(d, 0.0, H)
    cx = l * W
    w_px, h_px = obj.width * W, obj.height * H
    if toppled:
        # lying on its side: long axis horizontal, seen end-on it is thinner
        w_px, h_px = h_px * W / H * 0.75, w_px * H / W * 0.6
    top = base - h_px
    if obj.kind is ObjectShape.BALL:
        r = w_px / 2.0
        cy = base - r
        disk = (ys - cy) ** 2 + (xs - cx) ** 2 <= r * r
        _paint(img, disk, obj.color)
        shine = (ys - (cy - r / 3)) ** 2 + (xs - (cx - r / 3)) ** 2 <= (r / 3) ** 2
        _paint(img, shine, _lighter(obj.color, 0.5))
        return
    body = (ys >= top) & (ys < base) & (np.abs(xs - cx) <= w_px / 2.0)
    _paint(img, body, obj.color)
    cap = 0.06 * H
    if obj.kind in (ObjectShape.TALL_BOX, ObjectShape.SHORT_BOX):
        lid = (ys >= top - cap) & (ys < top) & (np.abs(xs - cx) <= w_px / 2.0)
    elif toppled:
        # cylinder lying on its side: end disc on the right
        lid = ((ys - (top + h_px / 2)) ** 2 / (h_px / 2) ** 2
               + (xs - (cx + w_px / 2)) ** 2 / (cap ** 2) <= 1.0)
    else:
        lid = ((ys - top) ** 2 / cap ** 2 + (xs - cx) ** 2 / (w_px / 2) ** 2 <= 1.0)
    _paint(img, lid, _lighter(obj.color))


def _draw_tool_and_arm(img, ys, xs, tool: Tool | None, hand, config: SimConfig):
    W, H = config.width, config.height
    scale = W / 32.0
    l, d, h = hand
    hand_px = (_row(d, h, H), l * W)
    sl, sd, sh = SHOULDER
    shoulder_px = (_row(sd, sh, H), sl * W)
    if tool is not None:
        tip_px = (_row(d + tool.shaft_length, h, H), l * W)
        _paint(img, _segment_mask(ys, xs, hand_px, tip_px, 0.75 * scale), TOOL)
        if tool.kind is ToolKind.RAKE:
            half = tool.head_width * W / 2.0
            head = (np.abs(ys - tip_px[0]) <= 0.9 * scale) & (np.abs(xs - tip_px[1]) <= half)
            _paint(img, head, TOOL)
            # tines hang from the head bar toward the table
            for k in range(RAKE_TINES):
                x = tip_px[1] - half + 2.0 * half * k / (RAKE_TINES - 1)
                tine = (ys >= tip_px[0]) & (ys <= tip_px[0] + RAKE_TINE_LENGTH * scale) \
                    & (np.abs(xs - x) <= 0.6 * scale)
                _paint(img, tine, TOOL)
    _paint(img, _segment_mask(ys, xs, shoulder_px, hand_px, 1.6 * scale), ARM)
    disc = (ys - hand_px[0]) ** 2 + (xs - hand_px[1]) ** 2 <= (2.0 * scale) ** 2
    _paint(img, disc, _lighter(ARM, 0.2))


def render(world: WorldState, config: SimConfig) -> np.ndarray:
    """Flat-shaded ``3 x H x W`` image of the scene with values in [0, 1]."""
    img = np.empty((3, config.height, config.width))
    for c in range(3):
        img[c] = BACKGROUND[c]
    ys, xs = _grid(config)
    if world.table:
        _paint(img, np.broadcast_to(ys >= ROW_FAR * config.height, img.shape[1:]), TABLE)
    if world.obj is not None:
        _draw_object(img, ys, xs, world.obj, world.obj_pos, world.toppled, config)
    if world.hand is not None:
        _draw_tool_and_arm(img, ys, xs, world.tool, world.hand, config)
    return img


def object_mask(world: WorldState, config: SimConfig) -> np.ndarray:
    """Pixels covered by the object alone (no table, arm or tool)."""
    bare = WorldState(table=False, obj=world.obj, obj_pos=world.obj_pos, toppled=world.toppled)
    empty = render(WorldState(table=False), config)
    return np.any(render(bare, config) != empty, axis=0)


# -- whole tasks -----------------------------------------------------------

def world_states(task: TaskSpec, effect: Effect, frames: int = FRAMES):
    hand, progress = hand_path(task.action, effect, frames)
    pos, toppled, contact = object_motion(task, effect, progress)
    states = [WorldState(obj=task.object, obj_pos=tuple(pos[f]), toppled=bool(toppled[f]),
                         tool=task.tool, hand=tuple(hand[f])) for f in range(frames)]
    return states, contact


def simulate(task: TaskSpec, config: SimConfig | None = None, seed: int = 0) -> SensorimotorSequence:
    """Render one task execution as aligned images and joint angles."""
    config = config or SimConfig()
    if task.forbidden:
        raise DomainError(f"task {task.task_id} is forbidden")
    effect = effect_of(task.tool, task.object, task.action)
    states, contact = world_states(task, effect, config.frames)
    images = np.stack([render(s, config) for s in states])
    joints = joint_trajectory(task.action, effect, config.frames)
    if config.joint_noise > 0:
        rng = np.random.default_rng(seed)
        joints = joints + rng.normal(0.0, config.joint_noise, joints.shape)
        joints = np.clip(joints, -JOINT_LIMIT, JOINT_LIMIT)
    return SensorimotorSequence(images, joints, task, contact)


@dataclass
class RecognitionScene:
    initial_image: np.ndarray
    goal_image: np.ndarray
    initial_joints: np.ndarray
    initial_state: WorldState
    goal_state: WorldState
    goal_effect: Effect


def make_recognition_target(tool: Tool, obj: ObjectKind, goal_effect: EffectLabel | str,
                            action: Action = PULL_LOW,
                            config: SimConfig | None = None) -> RecognitionScene:
    """Initial and goal images for an (often unseen) tool/object pair.

    The goal frame always shows the arm at the final pose of ``action``; the
    object is placed according to ``goal_effect``, so a "no movement" goal is
    a counterfactual scene that the task itself would not produce.
    """
    config = config or SimConfig()
    label = EffectLabel(goal_effect)
    if label is EffectLabel.NO_MOVEMENT:
        effect = Effect(label)
    elif label is EffectLabel.TOPPLE:
        effect = Effect(label, TOPPLE_SHIFT, toppled=True)
    else:
        disp = PULL_SLIDE if action.direction is Direction.PULL else PUSH_SLIDE
        effect = _moved(obj.kind, disp)
        if label is not effect.label:
            effect = Effect(label, effect.displacement)
    task = TaskSpec(tool, obj, action)
    # every outcome of an action ends in the same held arm pose
    states, _ = world_states(task, effect, config.frames)
    goal = states[-1]
    joints = joint_trajectory(action, effect, config.frames)
    return RecognitionScene(render(states[0], config), render(goal, config), joints[0],
                            states[0], goal, effect)


UNKNOWN_RAKE = Tool(ToolKind.RAKE, shaft_length=0.42, head_width=0.36)
UNKNOWN_BOX_X = ObjectKind(ObjectShape.SHORT_BOX, width=0.29, height=0.19, color=(0.30, 0.42, 0.90))
UNKNOWN_BOX_Y = ObjectKind(ObjectShape.SHORT_BOX, width=0.21, height=0.15, color=(0.12, 0.22, 0.70))


def random_variant(obj: ObjectKind, rng: np.random.Generator, spread: float = 0.25) -> ObjectKind:
    """Resized, recoloured copy of ``obj`` for generalisation checks."""
    w = obj.width * (1.0 + rng.uniform(-spread, spread))
    h = obj.height * (1.0 + rng.uniform(-spread, spread))
    color = tuple(float(np.clip(c + rng.uniform(-0.15, 0.15), 0.0, 1.0)) for c in obj.color)
    return ObjectKind(obj.kind, width=w, height=h, color=color)


# -- sequence files --------------------------------------------------------

def sequence_to_bytes(seq: SensorimotorSequence) -> bytes:
    frames, c, h, w = seq.images.shape
    buf = io.BytesIO()
    buf.write(SEQ_MAGIC)
    buf.write(struct.pack("<5I", frames, c, h, w, seq.joints.shape[1]))
    for f in range(frames):
        buf.write(seq.images[f].astype("<f4").tobytes())
        buf.write(seq.joints[f].astype("<f4").tobytes())
    return buf.getvalue()


def sequence_from_bytes(data: bytes) -> SensorimotorSequence:
    if data[:4] != SEQ_MAGIC:
        raise ValueError(f"bad sequence magic {data[:4]!r}")
    frames, c, h, w, j = struct.unpack_from("<5I", data, 4)
    record = np.dtype([("img", "<f4", (c, h, w)), ("joints", "<f4", (j,))])
    rec = np.frombuffer(data, record, frames, 24)
    if 24 + rec.nbytes != len(data):
        raise ValueError("sequence file has trailing or missing bytes")
    return SensorimotorSequence(rec["img"].astype(np.float64), rec["joints"].astype(np.float64))
