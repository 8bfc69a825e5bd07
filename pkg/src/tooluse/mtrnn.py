"""Multiple-timescale recurrent network.

Nodes are ordered ``[IO | Cf | Cs]`` and a constant-1 virtual node is
appended to every input vector, so ``W`` has shape ``N x (N + 1)`` and its
last column holds the biases.  Internal state follows the leaky integrator

    u(t) = (1 - 1/tau) * u(t-1) + (1/tau) * W @ x(t),    y(t) = tanh(u(t))

where the context part of ``x(t)`` is ``y(t-1)`` and the IO part is the
teaching frame (open loop), the previous IO output (closed loop), or a blend
of the two.

Frames are indexed from 0.  Step ``s`` reads frame ``s - 1`` and its IO output
``y(s)`` is compared against frame ``s``.  ``y(0)`` is the initial state, so
its pairing with frame 0 only enters the recognition error.
"""

from __future__ import annotations

import io
import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .numerics import DimensionError, TrainingError, momentum_step, tanh_act

MAGIC = b"MTR1"
CS0_CLAMP = 0.999


@dataclass
class MtrnnConfig:
    io_count: int = 26
    cf_count: int = 50
    cs_count: int = 6
    tau_io: float = 1.0
    tau_cf: float = 5.0
    tau_cs: float = 40.0
    sequence_length: int = 144
    connectivity: str = "layered"  # or "full"

    def __post_init__(self):
        if min(self.io_count, self.cf_count, self.cs_count) < 1:
            raise ValueError("all node counts must be >= 1")
        if min(self.tau_io, self.tau_cf, self.tau_cs) < 1:
            raise ValueError("time constants must be >= 1")
        if not self.tau_io <= self.tau_cf <= self.tau_cs:
            raise ValueError("time constants must satisfy tau_io <= tau_cf <= tau_cs")
        if self.sequence_length < 2:
            raise ValueError("sequence_length must be >= 2")
        if self.connectivity not in ("layered", "full"):
            raise ValueError(f"unknown connectivity {self.connectivity!r}")

    @property
    def n(self) -> int:
        return self.io_count + self.cf_count + self.cs_count

    @property
    def io_slice(self) -> slice:
        return slice(0, self.io_count)

    @property
    def cf_slice(self) -> slice:
        return slice(self.io_count, self.io_count + self.cf_count)

    @property
    def cs_slice(self) -> slice:
        return slice(self.io_count + self.cf_count, self.n)

    def taus(self) -> np.ndarray:
        return np.concatenate([np.full(self.io_count, float(self.tau_io)),
                               np.full(self.cf_count, float(self.tau_cf)),
                               np.full(self.cs_count, float(self.tau_cs))])

    def mask(self) -> np.ndarray:
        """Boolean ``N x (N + 1)`` connectivity; the bias column is always on."""
        n = self.n
        m = np.ones((n, n + 1), dtype=bool)
        if self.connectivity == "layered":
            io, cs = self.io_slice, self.cs_slice
            m[io, cs] = False
            m[cs, io] = False
        return m


@dataclass
class TrainConfig:
    alpha: float = 1e-3
    iterations: int = 1000
    feedback_ratio: float = 0.0  # 0 = pure teacher forcing on the IO inputs
    momentum: float = 0.0
    teacher_forcing: bool = True
    seed: int = 0
    chunk_size: int = 36
    threads: int = 1
    grad_clip: float = 0.0  # joint L2 bound on (grad_W, grad_cs0); 0 disables
    cs0_alpha_scale: float = 1.0  # Cs(0) step size relative to alpha

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not 0.0 <= self.feedback_ratio <= 1.0:
            raise ValueError("feedback_ratio must lie in [0, 1]")
        if self.grad_clip < 0:
            raise ValueError("grad_clip must be >= 0")
        if self.cs0_alpha_scale < 0:
            raise ValueError("cs0_alpha_scale must be >= 0")
        if not self.teacher_forcing:
            self.feedback_ratio = 1.0


@dataclass
class MtrnnParams:
    W: np.ndarray
    cs0_bank: np.ndarray
    mask: np.ndarray
    iterations: int = 0

    def copy(self) -> "MtrnnParams":
        return MtrnnParams(self.W.copy(), self.cs0_bank.copy(), self.mask.copy(), self.iterations)


@dataclass
class StepState:
    u: np.ndarray
    y: np.ndarray
    t: int = 0


@dataclass
class RecognitionTarget:
    io0: np.ndarray
    goal_image_features: np.ndarray
    iterations: int = 1000
    alpha: float = 1e-2
    seed: int = 0

    def __post_init__(self):
        self.io0 = np.asarray(self.io0, dtype=np.float64)
        self.goal_image_features = np.asarray(self.goal_image_features, dtype=np.float64)
        if np.any(np.abs(self.io0) > 1) or np.any(np.abs(self.goal_image_features) > 1):
            raise ValueError("recognition targets must lie in [-1, 1]")


@dataclass
class GeneratedSequence:
    io: np.ndarray
    image_features: np.ndarray
    joints: np.ndarray


@dataclass
class Trace:
    """Forward record of a batched rollout; arrays are indexed ``[step, batch, ...]``."""
    u: np.ndarray
    y: np.ndarray
    x: np.ndarray
    cs0: np.ndarray
    feedback: float


def init_params(config: MtrnnConfig, n_sequences: int, seed: int = 0) -> MtrnnParams:
    """Uniform weights in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` and zero Cs(0)."""
    rng = np.random.default_rng(seed)
    mask = config.mask()
    fan_in = mask.sum(axis=1, keepdims=True)
    r = 1.0 / np.sqrt(fan_in)
    W = rng.uniform(-1.0, 1.0, size=mask.shape) * r * mask
    cs0 = np.zeros((n_sequences, config.cs_count))
    return MtrnnParams(W, cs0, mask)


def _tau_vector(tau) -> np.ndarray:
    if isinstance(tau, MtrnnConfig):
        return tau.taus()
    return np.asarray(tau, dtype=np.float64)


def weighted_input(W, x) -> np.ndarray:
    """``sum_j W[i, j] * x[j]`` accumulated in ascending ``j``.

    The fixed order makes single-sequence runs reproducible to the bit on any
    BLAS; batched training uses a matrix product instead.
    """
    acc = np.zeros(x.shape[:-1] + (W.shape[0],))
    for j in range(W.shape[1]):
        acc = acc + x[..., j, None] * W[:, j]
    return acc


def forward_step(prev: StepState, x, W, tau) -> StepState:
    """Advance every node by one step of the leaky-integrator dynamics.

    ``x`` is the input over all N nodes; ``W`` may omit the bias column.
    ``tau`` is a per-node vector or an :class:`MtrnnConfig`.
    """
    x = np.asarray(x, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    taus = _tau_vector(tau)
    n = prev.u.shape[-1]
    if x.shape[-1] != n or taus.shape != (n,) or W.shape[0] != n:
        raise DimensionError(f"forward_step shapes: u{prev.u.shape}, x{x.shape}, W{W.shape}")
    if W.shape[1] == n + 1:
        x = np.concatenate([x, np.ones(x.shape[:-1] + (1,))], axis=-1)
    elif W.shape[1] != n:
        raise DimensionError(f"weight matrix {W.shape} incompatible with {n} nodes")
    u = (1.0 - 1.0 / taus) * prev.u + (1.0 / taus) * weighted_input(W, x)
    return StepState(u, tanh_act(u), prev.t + 1)


def project_cs0(cs0) -> np.ndarray:
    """Keep Cs(0) inside the activation range after a gradient step."""
    return np.clip(cs0, -CS0_CLAMP, CS0_CLAMP)


def initial_state(cs0, config: MtrnnConfig) -> StepState:
    """IO and Cf start at rest; Cs starts so that ``y_Cs(0)`` equals the clamped Cs(0)."""
    cs0 = np.atleast_2d(np.asarray(cs0, dtype=np.float64))
    if cs0.shape[-1] != config.cs_count:
        raise DimensionError(f"cs0 length {cs0.shape[-1]} != cs_count {config.cs_count}")
    u = np.zeros((cs0.shape[0], config.n))
    u[:, config.cs_slice] = np.arctanh(np.clip(cs0, -CS0_CLAMP, CS0_CLAMP))
    return StepState(u, np.tanh(u), 0)


def rollout(W, cs0, teach, config: MtrnnConfig, feedback: float = 0.0) -> Trace:
    """Batched forward pass over ``T - 1`` steps.

    ``teach`` has shape ``(B, T, io_count)``.  The IO input at step 1 is frame
    0; later IO inputs are ``(1 - feedback) * teach + feedback * y_IO``.
    """
    teach = np.asarray(teach, dtype=np.float64)
    b, t_len, io = teach.shape
    if io != config.io_count:
        raise DimensionError(f"teaching frames have {io} dims, expected {config.io_count}")
    n = config.n
    taus = config.taus()
    leak, gain = 1.0 - 1.0 / taus, 1.0 / taus
    state = initial_state(cs0, config)
    u = np.empty((t_len, b, n))
    y = np.empty((t_len, b, n))
    x = np.zeros((t_len, b, n + 1))
    u[0], y[0] = state.u, state.y
    x[:, :, n] = 1.0
    for s in range(1, t_len):
        if s == 1 or feedback == 0.0:
            x[s, :, :io] = teach[:, s - 1]
        elif feedback == 1.0:
            x[s, :, :io] = y[s - 1, :, :io]
        else:
            x[s, :, :io] = (1.0 - feedback) * teach[:, s - 1] + feedback * y[s - 1, :, :io]
        x[s, :, io:n] = y[s - 1, :, io:]
        u[s] = leak * u[s - 1] + gain * (x[s] @ W.T)
        y[s] = np.tanh(u[s])
    return Trace(u, y, x, np.atleast_2d(np.asarray(cs0, dtype=np.float64)), feedback)


def sequence_error(trace: Trace, targets, weights, config: MtrnnConfig) -> float:
    io = config.io_count
    diff = trace.y[:, :, :io] - np.swapaxes(targets, 0, 1)
    return float(np.sum(_broadcast_weights(weights, trace) * diff * diff))


def _broadcast_weights(weights, trace: Trace) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim == 2:  # T x io
        return w[:, None, :]
    return np.swapaxes(w, 0, 1)  # B x T x io


def backward(trace: Trace, W, targets, weights, config: MtrnnConfig, mask=None):
    """Gradients of ``E = sum w * (y_IO(s) - target(s))^2`` by backpropagation through time.

    Returns ``(E, grad_W, grad_cs0)``.
    """
    io, n = config.io_count, config.n
    taus = config.taus()
    leak, gain = 1.0 - 1.0 / taus, 1.0 / taus
    y, x = trace.y, trace.x
    t_len, b, _ = y.shape
    wts = _broadcast_weights(weights, trace)
    diff = y[:, :, :io] - np.swapaxes(np.asarray(targets, dtype=np.float64), 0, 1)
    err = float(np.sum(wts * diff * diff))
    if not np.isfinite(err):
        raise TrainingError("non-finite sequence error")
    g_out = 2.0 * wts * diff

    gW = np.zeros_like(W)
    du_next = np.zeros((b, n))
    carry = np.zeros((b, n))
    for s in range(t_len - 1, -1, -1):
        dy = carry
        dy[:, :io] += g_out[s]
        du = dy * (1.0 - y[s] * y[s]) + leak * du_next
        if s >= 1:
            dpre = gain * du
            gW += dpre.T @ x[s]
            dx = dpre @ W
            carry = np.zeros((b, n))
            carry[:, io:] = dx[:, io:n]
            if s >= 2 and trace.feedback != 0.0:
                carry[:, :io] = trace.feedback * dx[:, :io]
        du_next = du
    c = np.clip(trace.cs0, -CS0_CLAMP, CS0_CLAMP)
    inside = np.abs(trace.cs0) < CS0_CLAMP
    g_cs0 = du_next[:, config.cs_slice] / (1.0 - c * c) * inside
    if mask is not None:
        gW *= mask
    return err, gW, g_cs0


def training_weights(config: MtrnnConfig) -> np.ndarray:
    """Loss weights for the prediction error: every IO dim of frames 1..T-1."""
    w = np.ones((config.sequence_length, config.io_count))
    w[0] = 0.0
    return w


def bptt_gradients(sequences, params: MtrnnParams, config: MtrnnConfig,
                   feedback: float = 0.0, chunk_size: int = 36, threads: int = 1):
    """Prediction error and its gradients over a batch of teaching sequences.

    Returns ``(grad_W, grad_cs0, E)`` with one Cs(0) gradient row per sequence.
    Chunks are reduced in index order, so the result does not depend on
    ``threads``.
    """
    seqs = np.asarray(sequences, dtype=np.float64)
    if seqs.ndim != 3 or seqs.shape[1:] != (config.sequence_length, config.io_count):
        raise DimensionError(
            f"sequences shape {seqs.shape} != (B, {config.sequence_length}, {config.io_count})")
    if params.cs0_bank.shape[0] != seqs.shape[0]:
        raise DimensionError(
            f"{seqs.shape[0]} sequences but {params.cs0_bank.shape[0]} Cs(0) vectors")
    weights = training_weights(config)
    bounds = [(i, min(i + chunk_size, len(seqs))) for i in range(0, len(seqs), chunk_size)]

    def work(bound):
        lo, hi = bound
        tr = rollout(params.W, params.cs0_bank[lo:hi], seqs[lo:hi], config, feedback)
        return backward(tr, params.W, seqs[lo:hi], weights, config, params.mask)

    if threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, bounds))
    else:
        results = [work(bd) for bd in bounds]
    err = 0.0
    gW = np.zeros_like(params.W)
    g_cs0 = np.zeros_like(params.cs0_bank)
    for (lo, hi), (e, g, gc) in zip(bounds, results):
        err += e
        gW += g
        g_cs0[lo:hi] = gc
    return gW, g_cs0, err


def train(sequences, config: MtrnnConfig, train_config: TrainConfig,
          params: MtrnnParams | None = None, progress=None):
    """Joint gradient descent on the weights and every sequence's Cs(0).

    Returns ``(params, loss_curve)`` where ``loss_curve[n]`` is E before the
    ``n``-th update.
    """
    seqs = np.asarray(sequences, dtype=np.float64)
    if len(seqs) < 1:
        raise ValueError("need at least one sequence")
    if params is None:
        params = init_params(config, len(seqs), train_config.seed)
    params = params.copy()
    tc = train_config
    vW = np.zeros_like(params.W)
    vc = np.zeros_like(params.cs0_bank)
    curve = np.empty(tc.iterations)
    for it in range(tc.iterations):
        try:
            gW, gc, err = bptt_gradients(seqs, params, config, tc.feedback_ratio,
                                         tc.chunk_size, tc.threads)
        except TrainingError as exc:
            raise TrainingError("MTRNN training diverged", it) from exc
        curve[it] = err
        if tc.grad_clip > 0:
            norm = float(np.sqrt(np.sum(gW * gW) + np.sum(gc * gc)))
            if norm > tc.grad_clip:
                gW, gc = gW * (tc.grad_clip / norm), gc * (tc.grad_clip / norm)
        params.W, vW = momentum_step(params.W, gW, vW, tc.alpha, tc.momentum, it)
        params.cs0_bank, vc = momentum_step(params.cs0_bank, gc, vc, tc.alpha * tc.cs0_alpha_scale,
                                            tc.momentum, it)
        params.cs0_bank = project_cs0(params.cs0_bank)
        params.W *= params.mask
        if not (np.all(np.isfinite(params.W)) and np.all(np.isfinite(params.cs0_bank))):
            raise TrainingError("MTRNN training diverged", it)
        if progress is not None:
            progress(it, err)
    params.iterations += tc.iterations
    return params, curve


def _single_rollout(io_inputs, cs0, params: MtrnnParams, config: MtrnnConfig, closed: bool):
    """Step-by-step pass for one sequence; returns the list of states ``0..T-1``."""
    io = config.io_count
    taus = config.taus()
    state = initial_state(cs0, config)
    state = StepState(state.u[0], state.y[0], 0)
    states = [state]
    for s in range(1, len(io_inputs)):
        x = np.empty(config.n)
        x[:io] = io_inputs[s - 1] if (s == 1 or not closed) else state.y[:io]
        x[io:] = state.y[io:]
        state = forward_step(state, x, params.W, taus)
        states.append(state)
    return states


def run_open_loop(sequence, cs0, params: MtrnnParams, config: MtrnnConfig):
    """Teacher-forced pass.  Returns ``(predictions of frames 1..T-1, final StepState)``."""
    seq = np.asarray(sequence, dtype=np.float64)
    if seq.ndim != 2 or seq.shape[1] != config.io_count:
        raise DimensionError(f"sequence shape {seq.shape} does not match io_count {config.io_count}")
    states = _single_rollout(seq, cs0, params, config, closed=False)
    preds = np.array([st.y[:config.io_count] for st in states[1:]]).reshape(-1, config.io_count)
    return preds, states[-1]


def run_closed_loop(io0, cs0, params: MtrnnParams, config: MtrnnConfig,
                    length: int | None = None) -> np.ndarray:
    """Generate ``length`` IO frames from ``io0``, feeding each output back as the next input."""
    length = config.sequence_length if length is None else length
    io0 = np.asarray(io0, dtype=np.float64)
    if io0.shape != (config.io_count,):
        raise DimensionError(f"io0 has shape {io0.shape}, expected ({config.io_count},)")
    inputs = np.zeros((length, config.io_count))
    inputs[0] = io0
    states = _single_rollout(inputs, cs0, params, config, closed=True)
    frames = np.array([st.y[:config.io_count] for st in states])
    frames[0] = io0
    return frames


def recognition_weights(config: MtrnnConfig, image_dims: int) -> np.ndarray:
    w = np.zeros((config.sequence_length, config.io_count))
    w[0] = 1.0
    w[-1, :image_dims] = 1.0
    return w


def recognize_cs0(target: RecognitionTarget, params: MtrnnParams, config: MtrnnConfig,
                  init=None, momentum: float = 0.0, grad_clip: float = 0.0, progress=None):
    """Infer Cs(0) for an unseen task by descending the sparse recognition error.

    The error covers the full IO frame at the first step and only the image
    features at the last step of a closed-loop rollout from ``target.io0``.
    A positive ``grad_clip`` bounds the gradient norm; closed-loop error
    surfaces have cliffs where the raw gradient jumps by orders of magnitude.
    Weights are never modified.  Returns ``(cs0_hat, error_trace)`` where
    ``cs0_hat`` is the lowest-error iterate visited.
    """
    img = target.goal_image_features.shape[0]
    if target.io0.shape != (config.io_count,) or img > config.io_count:
        raise DimensionError(
            f"recognition target io0{target.io0.shape} / goal({img}) incompatible with config")
    if grad_clip < 0:
        raise ValueError("grad_clip must be >= 0")
    t_len = config.sequence_length
    teach = np.zeros((1, t_len, config.io_count))
    teach[0, 0] = target.io0
    goal = np.zeros_like(teach)
    goal[0, 0] = target.io0
    goal[0, -1, :img] = target.goal_image_features
    weights = recognition_weights(config, img)
    cs0 = np.zeros((1, config.cs_count)) if init is None else \
        project_cs0(np.array(init, dtype=np.float64).reshape(1, config.cs_count))
    W = params.W
    vel = np.zeros_like(cs0)
    trace_err = np.empty(target.iterations)
    best, best_err = cs0.copy(), np.inf
    for it in range(target.iterations):
        tr = rollout(W, cs0, teach, config, 1.0)
        try:
            err, _, g = backward(tr, W, goal, weights, config)
        except TrainingError as exc:
            raise TrainingError("Cs(0) recognition diverged", it) from exc
        trace_err[it] = err
        if err < best_err:
            best, best_err = cs0.copy(), err
        norm = float(np.linalg.norm(g))
        if grad_clip > 0 and norm > grad_clip:
            g = g * (grad_clip / norm)
        cs0, vel = momentum_step(cs0, g, vel, target.alpha, momentum, it)
        cs0 = project_cs0(cs0)
        if progress is not None:
            progress(it, err)
    return best[0], trace_err


def recognition_error(cs0, target: RecognitionTarget, params: MtrnnParams,
                      config: MtrnnConfig) -> float:
    img = target.goal_image_features.shape[0]
    teach = np.zeros((1, config.sequence_length, config.io_count))
    teach[0, 0] = target.io0
    goal = teach.copy()
    goal[0, -1, :img] = target.goal_image_features
    tr = rollout(params.W, np.asarray(cs0)[None], teach, config, 1.0)
    return sequence_error(tr, goal, recognition_weights(config, img), config)


def generate_from_recognition(cs0_hat, io0, params: MtrnnParams, config: MtrnnConfig,
                              image_dims: int) -> GeneratedSequence:
    frames = run_closed_loop(io0, cs0_hat, params, config)
    return GeneratedSequence(frames, frames[:, :image_dims], frames[:, image_dims:])


# -- serialization ---------------------------------------------------------

def to_bytes(params: MtrnnParams, config: MtrnnConfig, meta: dict | None = None) -> bytes:
    header = {"config": asdict(config), "iterations": params.iterations,
              "meta": meta or {}}
    blob = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    buf.write(np.packbits(params.mask.reshape(-1), bitorder="little").tobytes())
    buf.write(params.W.astype("<f4").tobytes())
    buf.write(struct.pack("<I", params.cs0_bank.shape[0]))
    buf.write(params.cs0_bank.astype("<f4").tobytes())
    return buf.getvalue()


def from_bytes(data: bytes):
    """Returns ``(params, config, meta)``."""
    if data[:4] != MAGIC:
        raise ValueError(f"bad MTRNN model magic {data[:4]!r}")
    (hlen,) = struct.unpack_from("<I", data, 4)
    pos = 8 + hlen
    header = json.loads(data[8:pos])
    config = MtrnnConfig(**header["config"])
    n = config.n
    nbits = n * (n + 1)
    nbytes = (nbits + 7) // 8
    mask = np.unpackbits(np.frombuffer(data, np.uint8, nbytes, pos),
                         bitorder="little")[:nbits].astype(bool).reshape(n, n + 1)
    pos += nbytes
    W = np.frombuffer(data, "<f4", nbits, pos).astype(np.float64).reshape(n, n + 1)
    pos += 4 * nbits
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    cs0 = np.frombuffer(data, "<f4", count * config.cs_count, pos).astype(np.float64)
    pos += 4 * count * config.cs_count
    if pos != len(data):
        raise ValueError("trailing bytes in MTRNN model file")
    params = MtrnnParams(W, cs0.reshape(count, config.cs_count), mask, header["iterations"])
    return params, config, header["meta"]


def save(path, params: MtrnnParams, config: MtrnnConfig, meta: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(params, config, meta))


def load(path):
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
