"""The three-part world-model agent over one flat genome.

Parameter layout (the checkpoint contract): vision, then memory, then
controller; inside each component layers go input to output and every layer
stores its weights before its biases.  Conv weights are ``(out, k, k, in)``,
dense weights ``(out, in)``, and the LSTM stores ``weight_ih, weight_hh,
bias_ih, bias_hh`` with gate rows ordered i, f, g, o.  The encoder flattens
its final ``(2, 2, 256)`` feature map in ``(h, w, c)`` order.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .nn import DTYPE, ConfigurationError, LayerSpec, ParamSlice
from .rng import derive_rng

FRAME_SHAPE = (64, 64, 3)
LATENT_SIZE = 32
ACTION_SIZE = 3
HIDDEN_SIZE = 256
N_MIXTURES = 5
MDN_HEAD_SIZE = N_MIXTURES + 2 * N_MIXTURES * LATENT_SIZE + 2  # 327

VISION_LAYERS = (
    LayerSpec("enc.conv1", "conv", 3, 32, kernel=4, stride=2, activation="relu"),
    LayerSpec("enc.conv2", "conv", 32, 64, kernel=4, stride=2, activation="relu"),
    LayerSpec("enc.conv3", "conv", 64, 128, kernel=4, stride=2, activation="relu"),
    LayerSpec("enc.conv4", "conv", 128, 256, kernel=4, stride=2, activation="relu"),
    LayerSpec("enc.mu", "dense", 1024, LATENT_SIZE),
    LayerSpec("enc.logsigma", "dense", 1024, LATENT_SIZE),
)
MEMORY_LAYERS = (
    LayerSpec("mdn.lstm", "lstm", LATENT_SIZE + ACTION_SIZE, HIDDEN_SIZE),
    LayerSpec("mdn.head", "dense", HIDDEN_SIZE, MDN_HEAD_SIZE),
)
CONTROLLER_LAYERS = (LayerSpec("ctrl.fc", "dense", LATENT_SIZE + HIDDEN_SIZE, ACTION_SIZE),)
# Static definition only: never part of the genome, never run.
DECODER_LAYERS = (
    LayerSpec("dec.fc", "dense", LATENT_SIZE, 1024),
    LayerSpec("dec.deconv1", "deconv", 1024, 128, kernel=5, stride=2, activation="relu"),
    LayerSpec("dec.deconv2", "deconv", 128, 64, kernel=5, stride=2, activation="relu"),
    LayerSpec("dec.deconv3", "deconv", 64, 32, kernel=6, stride=2, activation="relu"),
    LayerSpec("dec.deconv4", "deconv", 32, 3, kernel=6, stride=2, activation="sigmoid"),
)

COMPONENTS = {
    "vision": VISION_LAYERS,
    "memory": MEMORY_LAYERS,
    "controller": CONTROLLER_LAYERS,
}
COMPONENT_NAMES = tuple(COMPONENTS)


def _build_partition() -> dict[str, ParamSlice]:
    parts, offset = {}, 0
    for name, layers in COMPONENTS.items():
        n = nn.param_count(layers)
        parts[name] = ParamSlice(name, offset, n)
        offset += n
    return parts


PARTITION = _build_partition()
GENOME_SIZE = sum(s.length for s in PARTITION.values())
TENSORS = {s.name: s for s in nn.tensor_layout(VISION_LAYERS + MEMORY_LAYERS + CONTROLLER_LAYERS)}


def architecture_table() -> list[tuple[str, int]]:
    """Per-component parameter counts, mirroring the published table."""
    encoder = nn.param_count(VISION_LAYERS)
    decoder = nn.param_count(DECODER_LAYERS)
    return [
        ("encoder", encoder),
        ("decoder", decoder),
        ("vae", encoder + decoder),
        ("mdn-rnn", nn.param_count(MEMORY_LAYERS)),
        ("controller", nn.param_count(CONTROLLER_LAYERS)),
        ("genome", GENOME_SIZE),
    ]


def encoder_shape_chain(size: int = FRAME_SHAPE[0]) -> list[int]:
    """Spatial size after each encoder convolution for a square input."""
    chain = []
    for layer in VISION_LAYERS:
        if layer.kind == "conv":
            size = layer.output_hw(size, size)[0]
            chain.append(size)
    return chain


def architecture_hash() -> bytes:
    desc = repr(
        [
            (layer.name, layer.kind, layer.in_size, layer.out_size, layer.kernel, layer.stride, layer.activation)
            for layers in COMPONENTS.values()
            for layer in layers
        ]
    ) + "|conv=okki|flatten=hwc|gates=ifgo|dtype=<f4"
    return hashlib.sha256(desc.encode()).digest()


class Genome:
    """Flat float32 parameter vector with named component views."""

    __slots__ = ("params",)

    def __init__(self, params: np.ndarray):
        params = np.asarray(params)
        if params.shape != (GENOME_SIZE,):
            raise ConfigurationError(f"genome must have {GENOME_SIZE} parameters, got shape {params.shape}")
        if params.dtype != DTYPE:
            params = params.astype(DTYPE)
        self.params = params

    @classmethod
    def zeros(cls) -> "Genome":
        return cls(np.zeros(GENOME_SIZE, DTYPE))

    def component(self, name: str) -> np.ndarray:
        return PARTITION[name].view(self.params)

    def tensor(self, name: str) -> np.ndarray:
        return TENSORS[name].view(self.params)

    def copy(self) -> "Genome":
        return Genome(self.params.copy())

    def __eq__(self, other):
        return isinstance(other, Genome) and np.array_equal(self.params, other.params)

    def __repr__(self):
        return f"Genome(size={self.params.size})"


def init_genome(seed: int) -> Genome:
    """Uniform ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))`` init, weights and biases alike."""
    rng = derive_rng(seed, "init")
    params = np.empty(GENOME_SIZE, DTYPE)
    offset = 0
    for layers in COMPONENTS.values():
        for layer in layers:
            for (_, shape), fan_in in zip(layer.tensor_shapes(), layer.fan_ins()):
                n = int(np.prod(shape))
                bound = np.sqrt(1.0 / fan_in)
                params[offset : offset + n] = rng.uniform(-bound, bound, n)
                offset += n
    return Genome(params)


@dataclass(frozen=True)
class Action:
    steer: float = 0.0
    gas: float = 0.0
    brake: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.steer, self.gas, self.brake], DTYPE)


ZERO_ACTION = Action()


@dataclass
class MemoryState:
    h: np.ndarray
    c: np.ndarray

    @classmethod
    def zeros(cls) -> "MemoryState":
        return cls(np.zeros(HIDDEN_SIZE, DTYPE), np.zeros(HIDDEN_SIZE, DTYPE))


@dataclass
class MdnOutput:
    mixture_logits: np.ndarray  # (5,)
    means: np.ndarray  # (5, 32)
    log_sigmas: np.ndarray  # (5, 32)
    reward_pred: float
    done_pred: float

    @classmethod
    def from_head(cls, out: np.ndarray) -> "MdnOutput":
        if out.shape != (MDN_HEAD_SIZE,):
            raise ConfigurationError(f"MDN head output must have {MDN_HEAD_SIZE} values")
        k, block = N_MIXTURES, N_MIXTURES * LATENT_SIZE
        return cls(
            mixture_logits=out[:k],
            means=out[k : k + block].reshape(N_MIXTURES, LATENT_SIZE),
            log_sigmas=out[k + block : k + 2 * block].reshape(N_MIXTURES, LATENT_SIZE),
            reward_pred=float(out[-2]),
            done_pred=float(out[-1]),
        )

    def mixture_weights(self) -> np.ndarray:
        e = np.exp(self.mixture_logits - self.mixture_logits.max())
        return e / e.sum()


class EvaluationError(RuntimeError):
    """An agent produced an unusable output (NaN action)."""


class Agent:
    """Reshaped views of one genome, ready for per-step inference.

    Building an ``Agent`` costs a few reshapes; the step methods allocate only
    activations.  The genome must not be mutated while an agent views it.
    """

    def __init__(self, genome: Genome, latent_mode: str = "continuous"):
        if latent_mode not in ("continuous", "discrete"):
            raise ConfigurationError(f"unknown latent mode {latent_mode!r}")
        self.genome = genome
        self.latent_mode = latent_mode
        t = genome.tensor
        self._convs = [(t(f"{l.name}.weight"), t(f"{l.name}.bias"), l) for l in VISION_LAYERS[:4]]
        self._mu = (t("enc.mu.weight"), t("enc.mu.bias"))
        self._logsigma = (t("enc.logsigma.weight"), t("enc.logsigma.bias"))
        self._lstm = (t("mdn.lstm.weight_ih"), t("mdn.lstm.weight_hh"), t("mdn.lstm.bias_ih"), t("mdn.lstm.bias_hh"))
        self._head = (t("mdn.head.weight"), t("mdn.head.bias"))
        self._ctrl = (t("ctrl.fc.weight"), t("ctrl.fc.bias"))

    def encode(self, frame: np.ndarray, noise_rng: np.random.Generator | None = None) -> np.ndarray:
        """Latent code of one frame.

        With ``noise_rng`` the code is sampled as ``mu + exp(logsigma) * eps``
        before any binarisation; otherwise it is the deterministic mean.
        """
        if frame.shape != FRAME_SHAPE:
            raise ConfigurationError(f"frame must be {FRAME_SHAPE}, got {frame.shape}")
        x = np.asarray(frame, DTYPE)
        for w, b, spec in self._convs:
            x = nn.conv2d_forward(x, w, b, spec)
        flat = x.reshape(-1)
        z = nn.dense_forward(flat, *self._mu)
        if noise_rng is not None:
            log_sigma = nn.dense_forward(flat, *self._logsigma)
            eps = noise_rng.standard_normal(LATENT_SIZE, dtype=DTYPE)
            z = z + np.exp(log_sigma) * eps
        if self.latent_mode == "discrete":
            z = nn.step_activation(z)
        return z

    def memory_step(self, z: np.ndarray, a_prev: Action | np.ndarray, state: MemoryState):
        a = a_prev.as_array() if isinstance(a_prev, Action) else np.asarray(a_prev, DTYPE)
        x = np.concatenate([np.asarray(z, DTYPE), a])
        if x.shape != (LATENT_SIZE + ACTION_SIZE,):
            raise ConfigurationError(f"memory input must have {LATENT_SIZE + ACTION_SIZE} values, got {x.shape}")
        h, c = nn.lstm_step(x, (state.h, state.c), *self._lstm)
        return MemoryState(h, c), MdnOutput.from_head(nn.dense_forward(h, *self._head))

    def act(self, z: np.ndarray, state: MemoryState) -> Action:
        raw = nn.dense_forward(np.concatenate([z, state.h]), *self._ctrl)
        if not np.all(np.isfinite(raw)):
            raise EvaluationError(f"controller produced non-finite output {raw}")
        return Action(float(np.tanh(raw[0])), float(nn.sigmoid(raw[1])), float(nn.sigmoid(raw[2])))


def encode(frame: np.ndarray, genome: Genome, mode: str = "continuous") -> np.ndarray:
    return Agent(genome, mode).encode(frame)


def memory_step(z, a_prev, state: MemoryState, genome: Genome):
    return Agent(genome).memory_step(z, a_prev, state)


def act(z, state: MemoryState, genome: Genome) -> Action:
    return Agent(genome).act(np.asarray(z, DTYPE), state)


# -- serialization -----------------------------------------------------------

GENOME_MAGIC = b"WMEVOGEN"
GENOME_VERSION = 1
_HEADER = struct.Struct("<8sI32sI")


class ArchitectureMismatch(ValueError):
    pass


def genome_to_bytes(genome: Genome) -> bytes:
    lengths = [PARTITION[n].length for n in COMPONENT_NAMES]
    header = _HEADER.pack(GENOME_MAGIC, GENOME_VERSION, architecture_hash(), len(lengths))
    header += struct.pack(f"<{len(lengths)}Q", *lengths)
    return header + genome.params.astype("<f4").tobytes()


def genome_from_bytes(blob: bytes) -> Genome:
    if len(blob) < _HEADER.size:
        raise ValueError("genome file is truncated")
    magic, version, arch, n = _HEADER.unpack_from(blob)
    if magic != GENOME_MAGIC:
        raise ValueError("not a genome file (bad magic)")
    if version != GENOME_VERSION:
        raise ValueError(f"genome format version {version} is not supported (expected {GENOME_VERSION})")
    if arch != architecture_hash():
        raise ArchitectureMismatch("genome was saved for a different architecture")
    lengths = struct.unpack_from(f"<{n}Q", blob, _HEADER.size)
    expected = [PARTITION[c].length for c in COMPONENT_NAMES]
    if list(lengths) != expected:
        raise ArchitectureMismatch(f"slice lengths {list(lengths)} != {expected}")
    start = _HEADER.size + 8 * n
    data = np.frombuffer(blob, dtype="<f4", offset=start)
    if data.size != GENOME_SIZE:
        raise ValueError(f"genome payload has {data.size} values, expected {GENOME_SIZE}")
    return Genome(data.astype(DTYPE))


def save_genome(genome: Genome, path) -> None:
    Path(path).write_bytes(genome_to_bytes(genome))


def load_genome(path) -> Genome:
    return genome_from_bytes(Path(path).read_bytes())
