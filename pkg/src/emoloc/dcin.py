"""Dilated Context Integrated Network.

Two streams per layer: the coarse stream halves the temporal resolution of
the context with a stride-2 convolution and refines it with dot-product
graph attention; the fine stream keeps full resolution and absorbs the
refined context through a cross-modal attention read plus a learned gate.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .episode import Episode
from .errors import ConfigError, DimensionError, ParseError, PreconditionError

ACTIVATIONS = {"relu": ad.relu, "sigmoid": ad.sigmoid}


@dataclass(frozen=True)
class DcinConfig:
    d: int = 16
    n_classes: int = 6
    layers: int = 3
    margin: float = 0.5
    activation: str = "relu"
    kernel_width: int = 3

    def __post_init__(self) -> None:
        if self.d < 1:
            raise ConfigError(f"d must be >= 1, got {self.d}")
        if self.n_classes < 2:
            raise ConfigError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.layers < 1:
            raise ConfigError(f"layers must be >= 1, got {self.layers}")
        if not self.margin > 0:
            raise ConfigError(f"margin must be > 0, got {self.margin}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.kernel_width < 1 or self.kernel_width % 2 == 0:
            raise ConfigError(f"kernel_width must be odd, got {self.kernel_width}")


# Parameter containers hold either numpy arrays (a stored model) or Tensors
# (a model bound to a tape).


@dataclass
class DcinLayerParams:
    W1: object  # (d, k, d) conv kernels, (out, tap, in)
    b1: object  # (d,)
    W2: object  # (d, d) reasoning projection
    W3: object  # (d, 2d) gate map
    b3: object  # (d,)


@dataclass
class ClassifierParams:
    W_video: object  # (N, d)
    b_video: object  # (N,)
    W_subtitle: object
    b_subtitle: object


@dataclass
class DcinModel:
    config: DcinConfig
    layers: list[DcinLayerParams]
    classifiers: ClassifierParams

    def __post_init__(self) -> None:
        if len(self.layers) != self.config.layers:
            raise ConfigError(
                f"model has {len(self.layers)} layers, config says {self.config.layers}"
            )

    def parameters(self) -> dict[str, object]:
        out = {}
        for i, layer in enumerate(self.layers):
            for key, val in asdict_shallow(layer).items():
                out[f"layers.{i}.{key}"] = val
        for key, val in asdict_shallow(self.classifiers).items():
            out[f"classifier.{key}"] = val
        return out

    @classmethod
    def from_parameters(cls, config: DcinConfig, params: dict) -> "DcinModel":
        layers = [
            DcinLayerParams(**{k: params[f"layers.{i}.{k}"] for k in _LAYER_KEYS})
            for i in range(config.layers)
        ]
        clf = ClassifierParams(**{k: params[f"classifier.{k}"] for k in _CLF_KEYS})
        return cls(config, layers, clf)

    def bind(self, tape: Tape) -> tuple["DcinModel", dict[str, Tensor]]:
        """Snapshot every parameter onto ``tape`` as a leaf."""
        bound = {name: tape.param(val) for name, val in self.parameters().items()}
        return DcinModel.from_parameters(self.config, bound), bound

    def copy(self) -> "DcinModel":
        return DcinModel.from_parameters(
            self.config, {k: np.array(v, copy=True) for k, v in self.parameters().items()}
        )


_LAYER_KEYS = ("W1", "b1", "W2", "W3", "b3")
_CLF_KEYS = ("W_video", "b_video", "W_subtitle", "b_subtitle")


def asdict_shallow(obj) -> dict:
    return {f: getattr(obj, f) for f in obj.__dataclass_fields__}


def init_model(config: DcinConfig, seed: int | np.random.Generator = 0) -> DcinModel:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    d, N, k = config.d, config.n_classes, config.kernel_width

    def u(shape, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    layers = [
        DcinLayerParams(
            W1=u((d, k, d), k * d),
            b1=np.zeros(d),
            W2=u((d, d), d),
            W3=u((d, 2 * d), 2 * d),
            b3=np.zeros(d),
        )
        for _ in range(config.layers)
    ]
    clf = ClassifierParams(
        W_video=u((N, d), d),
        b_video=np.zeros(N),
        W_subtitle=u((N, d), d),
        b_subtitle=np.zeros(N),
    )
    return DcinModel(config, layers, clf)


@dataclass
class DcinOutput:
    V0: Tensor
    VL: Tensor
    contexts: list[Tensor]
    gate_trace: list[np.ndarray]
    tcdr_attention: list[np.ndarray] = field(default_factory=list)
    gtci_attention: list[np.ndarray] = field(default_factory=list)
    context_valid: list[int] = field(default_factory=list)
    # V^(0..L) and the attended context m^(1..L), for inspection only
    fine_states: list[np.ndarray] = field(default_factory=list)
    context_mix: list[np.ndarray] = field(default_factory=list)


# ---------------------------------------------------------------- layer ops


def temporal_context_conv(C_prev, layer: DcinLayerParams, activation: str = "relu") -> Tensor:
    C_prev = ad.as_tensor(C_prev)
    if C_prev.shape[0] % 2:
        raise PreconditionError(
            f"temporal_context_conv: context length {C_prev.shape[0]} is odd; pad first"
        )
    return ACTIVATIONS[activation](ad.conv1d_stride2(C_prev, layer.W1, layer.b1))


def _col_mask(n_valid: int, n_total: int):
    if n_valid >= n_total:
        return None
    return (np.arange(n_total) < n_valid)[None, :]


def context_dependency_reasoning(C, W2, mask=None) -> tuple[Tensor, Tensor]:
    """Residual graph attention over context nodes; returns (C_tilde, alpha)."""
    C = ad.as_tensor(C)
    alpha = ad.softmax_rows(ad.matmul_nt(C, C), mask)
    C_tilde = ad.add(C, ad.matmul(alpha, ad.matmul_nt(C, W2)))
    return C_tilde, alpha


def gated_context_integration(V_prev, S, C_tilde, layer: DcinLayerParams, mask=None):
    """Returns (V_next, gates, alpha)."""
    V_prev, S, C_tilde = ad.as_tensor(V_prev), ad.as_tensor(S), ad.as_tensor(C_tilde)
    if V_prev.shape != S.shape:
        raise DimensionError(f"gated_context_integration: V {V_prev.shape} vs S {S.shape}")
    if C_tilde.shape[1] != V_prev.shape[1]:
        raise DimensionError(
            f"gated_context_integration: context {C_tilde.shape} vs segments {V_prev.shape}"
        )
    # (v_i + s_i) . c_j is the sum of the two dot products
    alpha = ad.softmax_rows(ad.matmul_nt(ad.add(V_prev, S), C_tilde), mask)
    m = ad.matmul(alpha, C_tilde)
    gates = ad.sigmoid(ad.affine(ad.concat_last_dim(V_prev, m), layer.W3, layer.b3))
    V_next = ad.add(V_prev, ad.mul(gates, ad.sub(m, V_prev)))
    return V_next, gates, alpha


def padded_length(T: int, layers: int) -> int:
    block = 1 << layers
    return -(-T // block) * block


def dcin_forward(model: DcinModel, episode: Episode, *, _force_padding: bool = False) -> DcinOutput:
    cfg = model.config
    T = episode.T
    if T == 0:
        raise PreconditionError(f"episode {episode.episode_id} is empty (T = 0)")
    if episode.d != cfg.d:
        raise DimensionError(f"episode d = {episode.d}, model d = {cfg.d}")
    V = Tensor(episode.V)
    S = Tensor(episode.S)
    Tp = padded_length(T, cfg.layers)
    if Tp != T or _force_padding:
        padded = np.zeros((Tp, cfg.d))
        padded[:T] = episode.V
        C = Tensor(padded)
    else:
        C = V

    out = DcinOutput(V0=V, VL=V, contexts=[], gate_trace=[], fine_states=[V.value])
    V_cur = V
    for l, layer in enumerate(model.layers, start=1):
        C = temporal_context_conv(C, layer, cfg.activation)
        n_valid = -(-T // (1 << l))
        mask = _col_mask(n_valid, C.shape[0])
        if mask is None and _force_padding:
            mask = np.ones((1, C.shape[0]), dtype=bool)
        C_tilde, a_tcdr = context_dependency_reasoning(C, layer.W2, mask)
        V_cur, gates, a_gtci = gated_context_integration(V_cur, S, C_tilde, layer, mask)
        out.contexts.append(C)
        out.context_valid.append(n_valid)
        out.gate_trace.append(gates.value)
        out.tcdr_attention.append(a_tcdr.value)
        out.gtci_attention.append(a_gtci.value)
        out.fine_states.append(V_cur.value)
        out.context_mix.append(a_gtci.value @ C_tilde.value)
    out.VL = V_cur
    return out


def classify(features, which: str, classifiers: ClassifierParams) -> Tensor:
    if which == "video":
        W, b = classifiers.W_video, classifiers.b_video
    elif which == "subtitle":
        W, b = classifiers.W_subtitle, classifiers.b_subtitle
    else:
        raise ValueError(f"which must be 'video' or 'subtitle', got {which!r}")
    return ad.softmax_rows(ad.affine(features, W, b))


def context_distance(P0, PL) -> Tensor:
    """Per-segment Euclidean distance between class distributions, shape (T,)."""
    P0, PL = ad.as_tensor(P0), ad.as_tensor(PL)
    if P0.shape != PL.shape:
        raise DimensionError(f"context_distance: {P0.shape} vs {PL.shape}")
    return ad.row_norms(ad.sub(PL, P0))


def context_sensitive_loss(P0, PL, margin: float) -> Tensor:
    dist = context_distance(P0, PL)
    return ad.sum_all(ad.relu(ad.add_scalar(ad.scale(dist, -1.0), margin)))


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"DCINCKPT"
CKPT_VERSION = 1


def save_checkpoint(model: DcinModel, path) -> None:
    cfg = json.dumps(asdict(model.config), sort_keys=True).encode()
    params = model.parameters()
    chunks = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(cfg)), cfg,
              struct.pack("<I", len(params))]
    for name, val in params.items():
        arr = np.ascontiguousarray(val, dtype="<f8")
        raw = name.encode()
        chunks.append(struct.pack("<HB", len(raw), arr.ndim) + raw)
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> DcinModel:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise ParseError(f"checkpoint truncated at byte {pos}", path=path)
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(len(CKPT_MAGIC)) != CKPT_MAGIC:
        raise ParseError("not a checkpoint (bad magic)", path=path)
    version, cfg_len = struct.unpack("<II", take(8))
    if version != CKPT_VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", path=path)
    try:
        config = DcinConfig(**json.loads(take(cfg_len)))
    except (ValueError, TypeError) as exc:
        raise ParseError(f"bad config block: {exc}", path=path) from exc
    (count,) = struct.unpack("<I", take(4))
    params = {}
    for _ in range(count):
        name_len, ndim = struct.unpack("<HB", take(3))
        name = take(name_len).decode()
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
    if pos != len(buf):
        raise ParseError(f"{len(buf) - pos} trailing bytes", path=path)
    try:
        return DcinModel.from_parameters(config, params)
    except KeyError as exc:
        raise ParseError(f"missing parameter {exc}", path=path) from exc
