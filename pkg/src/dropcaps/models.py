"""3D CNN baseline and 3D dilated CapsNet built on :mod:`dropcaps.tensor`."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError
from .tensor import BatchNormState, Conv3dSpec, Tensor

# -- capsule primitives ----------------------------------------------------------


def squash(s: Tensor, axis: int = -1) -> Tensor:
    """v = |s|^2 / (1 + |s|^2) * s / |s|, written as s * |s| / (1 + |s|^2)."""
    n = T.norm(s, axis=axis, keepdims=True)
    return s * (n / (n * n + 1.0))


def routing_by_agreement(u_hat: Tensor, iterations: int = 3, trace: list | None = None) -> Tensor:
    """Dynamic routing over predictions ``u_hat`` of shape (N, in, out, dim).

    A 3-D input (in, out, dim) is treated as a batch of one and the output
    keeps that rank. Coupling coefficients of each iteration are appended to
    ``trace`` when given.
    """
    if iterations < 1:
        raise ConfigurationError(f"routing needs at least one iteration, got {iterations}")
    squeeze = u_hat.ndim == 3
    if squeeze:
        u_hat = u_hat.reshape((1,) + u_hat.shape)
    if u_hat.ndim != 4:
        raise ConfigurationError(f"u_hat must be (N, in, out, dim), got {u_hat.shape}")
    n, n_in, n_out, _ = u_hat.shape
    logits = Tensor(np.zeros((n, n_in, n_out), dtype=u_hat.dtype))
    v = None
    for it in range(iterations):
        c = T.softmax(logits, axis=2)
        if trace is not None:
            trace.append(c.data.copy())
        s = T.einsum("nij,nijd->njd", c, u_hat)
        v = squash(s)
        if it < iterations - 1:
            logits = logits + T.einsum("nijd,njd->nij", u_hat, v)
    return v.reshape(v.shape[1:]) if squeeze else v


def capsule_lengths(v: Tensor) -> Tensor:
    return T.norm(v, axis=-1, keepdims=False)


def margin_loss(lengths: Tensor, labels: np.ndarray, m_pos: float = 0.9, m_neg: float = 0.1,
                lam: float = 0.5) -> Tensor:
    """Capsule margin loss summed over classes, averaged over the batch."""
    if lengths.ndim == 1:
        lengths = lengths.reshape(1, -1)
    labels = np.atleast_1d(np.asarray(labels))
    onehot = np.zeros(lengths.shape, dtype=lengths.dtype)
    onehot[np.arange(len(labels)), labels] = 1
    pos = T.relu(m_pos - lengths) ** 2 * Tensor(onehot)
    neg = T.relu(lengths - m_neg) ** 2 * Tensor(lam * (1 - onehot))
    return (pos + neg).sum() * (1.0 / len(labels))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    labels = np.atleast_1d(np.asarray(labels))
    logp = T.log_softmax(logits, axis=1)
    picked = T.take(logp, (np.arange(len(labels)), labels))
    return -picked.mean()


# -- specs -----------------------------------------------------------------------

def _tuple3(v) -> tuple[int, int, int]:
    return tuple(int(x) for x in v)


@dataclass(frozen=True)
class Cnn3dSpec:
    input_shape: tuple = (2, 410, 6, 6)
    filters: tuple = (8, 16, 32, 64, 128)
    kernels: tuple = ((100, 2, 2),) * 4 + ((4, 2, 2),)
    dense: tuple = (128, 96)
    n_classes: int = 65

    kind = "cnn3d"

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "filters", tuple(int(v) for v in self.filters))
        object.__setattr__(self, "kernels", tuple(_tuple3(k) for k in self.kernels))
        object.__setattr__(self, "dense", tuple(int(v) for v in self.dense))
        if len(self.filters) != len(self.kernels):
            raise ConfigurationError("filters and kernels must have equal length")

    def to_dict(self) -> dict:
        return {"kind": self.kind, **asdict(self)}


@dataclass(frozen=True)
class CapsNetSpec:
    input_shape: tuple = (2, 410, 6, 6)
    conv_features: tuple = (128, 128, 256, 256)
    conv_kernel: tuple = (3, 2, 2)
    dilations: tuple = ((1, 1, 1), (4, 1, 1), (16, 1, 1), (64, 1, 1))
    conv_dropout: float = 0.5
    primary_channels: int = 4
    capsule_dim: int = 8
    primary_kernel: tuple = (3, 1, 1)
    primary_stride: tuple = (2, 2, 2)
    n_classes: int = 65
    class_dim: int = 8
    routing_iterations: int = 3
    bn_momentum: float = 0.1
    bn_eps: float = 1e-3

    kind = "capsnet"

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "conv_features", tuple(int(v) for v in self.conv_features))
        object.__setattr__(self, "conv_kernel", _tuple3(self.conv_kernel))
        object.__setattr__(self, "dilations", tuple(_tuple3(d) for d in self.dilations))
        object.__setattr__(self, "primary_kernel", _tuple3(self.primary_kernel))
        object.__setattr__(self, "primary_stride", _tuple3(self.primary_stride))
        if len(self.dilations) != len(self.conv_features):
            raise ConfigurationError("one dilation per conv layer is required")
        if self.routing_iterations < 1:
            raise ConfigurationError("routing_iterations must be >= 1")

    def to_dict(self) -> dict:
        return {"kind": self.kind, **asdict(self)}


def spec_from_dict(doc: dict):
    doc = dict(doc)
    kind = doc.pop("kind")
    if kind == "cnn3d":
        return Cnn3dSpec(**doc)
    if kind == "capsnet":
        return CapsNetSpec(**doc)
    raise ConfigurationError(f"unknown model kind {kind!r}")


def spec_hash(spec) -> bytes:
    text = json.dumps(spec.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).digest()


def desk_capsnet_spec(n_classes: int = 8, window: int = 64, width: int = 16) -> CapsNetSpec:
    """Reduced CapsNet for CPU-scale runs: narrow convs, dilations (1, 2, 4).

    Conv dropout is lowered to 0.2; at this width 0.5 trains too slowly.
    """
    return CapsNetSpec(input_shape=(2, window, 6, 6),
                       conv_features=(width, width, 2 * width, 2 * width),
                       dilations=((1, 1, 1), (1, 1, 1), (2, 1, 1), (4, 1, 1)),
                       n_classes=n_classes, conv_dropout=0.2)


def desk_cnn_spec(n_classes: int = 8, window: int = 64) -> Cnn3dSpec:
    """Reduced CNN keeping the five-conv/two-dense layout with shorter kernels."""
    kt = max(2, (window - 8) // 5)
    return Cnn3dSpec(input_shape=(2, window, 6, 6), filters=(8, 16, 32, 64, 128),
                     kernels=((kt, 2, 2),) * 4 + ((4, 2, 2),), n_classes=n_classes)


# -- models ------------------------------------------------------------------------

def truncated_normal(rng: np.random.Generator, shape, fan_in: int, dtype, gain: float = 2.0) -> np.ndarray:
    std = np.sqrt(gain / fan_in)
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(dtype)


class Model:
    """Parameters, batch-norm buffers, and a forward pass."""

    spec = None

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self.bn: dict[str, BatchNormState] = {}

    def _param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value.astype(self.dtype), requires_grad=True, name=name)
        self.params[name] = t
        return t

    @property
    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: p.data for k, p in self.params.items()}
        for k, s in self.bn.items():
            state[f"{k}.running_mean"] = s.running_mean
            state[f"{k}.running_var"] = s.running_var
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = self.state_dict()
        missing = set(expected) - set(state)
        extra = set(state) - set(expected)
        if missing or extra:
            raise ConfigurationError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, v in state.items():
            if expected[k].shape != v.shape:
                raise ConfigurationError(f"{k}: shape {v.shape} != {expected[k].shape}")
            expected[k][...] = v

    def _input(self, x) -> Tensor:
        if isinstance(x, Tensor):
            return x
        x = np.asarray(x, dtype=self.dtype)
        if x.shape[1:] != tuple(self.spec.input_shape):
            raise ConfigurationError(f"input shape {x.shape[1:]} != model input {self.spec.input_shape}")
        return Tensor(x)

    def forward(self, x, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        raise NotImplementedError

    def loss(self, scores: Tensor, labels: np.ndarray) -> Tensor:
        raise NotImplementedError

    def confidences(self, x, batch_size: int = 256) -> np.ndarray:
        """Per-class confidences in inference mode."""
        out = []
        for i in range(0, len(x), batch_size):
            out.append(self._confidence(self.forward(x[i:i + batch_size], training=False)))
        return np.concatenate(out)

    def predict(self, x, batch_size: int = 256) -> np.ndarray:
        return self.confidences(x, batch_size).argmax(axis=1)

    def _confidence(self, scores: Tensor) -> np.ndarray:
        return scores.data


def _propagate(name: str, spec: Conv3dSpec, shape: tuple) -> tuple:
    try:
        return (spec.out_channels,) + spec.output_shape(shape[1:])
    except ConfigurationError as exc:
        raise ConfigurationError(f"layer {name}: {exc} (input {shape})") from None


class Cnn3d(Model):
    def __init__(self, spec: Cnn3dSpec = Cnn3dSpec(), seed: int = 0, dtype=np.float32):
        super().__init__(dtype)
        self.spec = spec
        rng = np.random.default_rng(seed)
        shape = tuple(spec.input_shape)
        self.convs: list[tuple[str, Conv3dSpec]] = []
        for i, (f, k) in enumerate(zip(spec.filters, spec.kernels), start=1):
            cs = Conv3dSpec(shape[0], f, k)
            name = f"conv{i}"
            shape = _propagate(name, cs, shape)
            self._param(f"{name}.weight", truncated_normal(rng, (f, cs.in_channels) + k,
                                                           cs.in_channels * int(np.prod(k)), self.dtype))
            self._param(f"{name}.bias", np.zeros(f))
            self.convs.append((name, cs))
        width = int(np.prod(shape))
        self.flat_features = width
        for i, h in enumerate(tuple(spec.dense) + (spec.n_classes,), start=1):
            gain = 2.0 if i <= len(spec.dense) else 1.0
            self._param(f"dense{i}.weight", truncated_normal(rng, (width, h), width, self.dtype, gain))
            self._param(f"dense{i}.bias", np.zeros(h))
            width = h

    def forward(self, x, training=False, rng=None) -> Tensor:
        h = self._input(x)
        for name, cs in self.convs:
            h = T.relu(T.conv3d(h, self.params[f"{name}.weight"], self.params[f"{name}.bias"], cs))
        h = h.reshape(h.shape[0], -1)
        n_dense = len(self.spec.dense) + 1
        for i in range(1, n_dense + 1):
            h = T.dense(h, self.params[f"dense{i}.weight"], self.params[f"dense{i}.bias"])
            if i < n_dense:
                h = T.relu(h)
        return h

    def loss(self, scores, labels):
        return cross_entropy(scores, labels)

    def _confidence(self, scores):
        return T.softmax(scores.detach(), axis=1).data


class CapsNet(Model):
    def __init__(self, spec: CapsNetSpec = CapsNetSpec(), seed: int = 0, dtype=np.float32):
        super().__init__(dtype)
        self.spec = spec
        rng = np.random.default_rng(seed)
        shape = tuple(spec.input_shape)
        self.convs: list[tuple[str, Conv3dSpec]] = []
        for i, (f, d) in enumerate(zip(spec.conv_features, spec.dilations), start=1):
            cs = Conv3dSpec(shape[0], f, spec.conv_kernel, dilation=d)
            name = f"conv{i}"
            shape = _propagate(name, cs, shape)
            fan = cs.in_channels * int(np.prod(cs.kernel))
            self._param(f"{name}.weight", truncated_normal(rng, (f, cs.in_channels) + cs.kernel, fan, self.dtype))
            self._param(f"{name}.bias", np.zeros(f))
            self._param(f"bn{i}.gamma", np.ones(f))
            self._param(f"bn{i}.beta", np.zeros(f))
            self.bn[f"bn{i}"] = BatchNormState.fresh(f, self.dtype)
            self.convs.append((name, cs))
        pc = spec.primary_channels * spec.capsule_dim
        self.primary = Conv3dSpec(shape[0], pc, spec.primary_kernel, stride=spec.primary_stride)
        shape = _propagate("primary", self.primary, shape)
        fan = self.primary.in_channels * int(np.prod(spec.primary_kernel))
        self._param("primary.weight", truncated_normal(rng, (pc, self.primary.in_channels)
                                                       + spec.primary_kernel, fan, self.dtype, 1.0))
        self._param("primary.bias", np.zeros(pc))
        self.primary_positions = int(np.prod(shape[1:]))
        self.n_primary_caps = spec.primary_channels * self.primary_positions
        self._param("caps.weight", truncated_normal(
            rng, (self.n_primary_caps, spec.n_classes, spec.class_dim, spec.capsule_dim),
            spec.capsule_dim, self.dtype, 1.0))

    def primary_capsules(self, h: Tensor) -> Tensor:
        spec = self.spec
        p = T.conv3d(h, self.params["primary.weight"], self.params["primary.bias"], self.primary)
        n = p.shape[0]
        # (N, channels*dim, t, h, w) -> (N, channels, positions, dim) -> (N, caps, dim)
        p = p.reshape(n, spec.primary_channels, spec.capsule_dim, self.primary_positions)
        p = p.transpose(0, 1, 3, 2).reshape(n, self.n_primary_caps, spec.capsule_dim)
        return squash(p)

    def class_capsules(self, x, training=False, rng=None) -> Tensor:
        h = self._input(x)
        spec = self.spec
        for i, (name, cs) in enumerate(self.convs, start=1):
            h = T.relu(T.conv3d(h, self.params[f"{name}.weight"], self.params[f"{name}.bias"], cs))
            h = T.dropout(h, spec.conv_dropout, training, rng)
            h = T.batch_norm(h, self.params[f"bn{i}.gamma"], self.params[f"bn{i}.beta"], self.bn[f"bn{i}"],
                             training, spec.bn_eps, spec.bn_momentum)
        u = self.primary_capsules(h)
        u_hat = T.einsum("ijde,nie->nijd", self.params["caps.weight"], u)
        return routing_by_agreement(u_hat, spec.routing_iterations)

    def forward(self, x, training=False, rng=None) -> Tensor:
        return capsule_lengths(self.class_capsules(x, training, rng))

    def loss(self, scores, labels):
        return margin_loss(scores, labels)


def build_model(spec, seed: int = 0, dtype=np.float32) -> Model:
    if isinstance(spec, CapsNetSpec):
        return CapsNet(spec, seed, dtype)
    if isinstance(spec, Cnn3dSpec):
        return Cnn3d(spec, seed, dtype)
    raise ConfigurationError(f"unsupported spec {type(spec).__name__}")


def build_cnn3d(spec: Cnn3dSpec = Cnn3dSpec(), seed: int = 0, dtype=np.float32) -> Cnn3d:
    return Cnn3d(spec, seed, dtype)


def build_capsnet(spec: CapsNetSpec = CapsNetSpec(), seed: int = 0, dtype=np.float32) -> CapsNet:
    return CapsNet(spec, seed, dtype)
