"""Trainable model over precomputed embeddings: MLP encoder, 3-layer
projection network with unit-norm output, and a linear classification head.

Gradients are exact reverse-mode, written specifically for this affine/relu
chain (no general autodiff). The forward pass records a tape of activations;
``backward`` consumes upstream gradients with respect to any combination of
the normalized projection, the encoder features, and the head logits.
``forward_jvp`` provides the matching forward-mode directional derivative,
which the meta-weighting stage uses to obtain all per-sample gradient inner
products at the cost of roughly one extra forward pass.

Checkpoint layout (little-endian)::

    magic "FSCK" | u32 version=1 | u32 layer_count |
    per layer: u8 section | u8 activation | u8 frozen |
               u32 in_dim | u32 out_dim | f32 weights (out*in) | f32 biases (out)
"""

from __future__ import annotations

import fnmatch
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FileSizeError, FormatError, NumericError

MAGIC = b"FSCK"
FORMAT_VERSION = 1
_FILE_HEADER = struct.Struct("<4sII")
_LAYER_HEADER = struct.Struct("<BBBII")

_SECTIONS = ("encoder", "projection", "head")
_ACTIVATIONS = ("identity", "relu")

_ZERO_NORM = 1e-30


@dataclass
class Layer:
    weight: np.ndarray  # (out, in) float64
    bias: np.ndarray  # (out,) float64
    activation: str = "identity"
    frozen: bool = False

    def __post_init__(self) -> None:
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise DataError(f"inconsistent layer shapes {self.weight.shape} / {self.bias.shape}")
        if self.activation not in _ACTIVATIONS:
            raise DataError(f"unknown activation {self.activation!r}")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


class ModelParams:
    """Encoder + projection + head parameters with per-layer freeze flags."""

    def __init__(self, encoder: list[Layer], projection: list[Layer], head: Layer):
        if len(projection) != 3:
            raise DataError(f"projection must have exactly 3 layers, got {len(projection)}")
        chain = encoder + projection
        for prev, nxt in zip(chain, chain[1:]):
            if prev.out_dim != nxt.in_dim:
                raise DataError(
                    f"layer dimension chain broken: {prev.out_dim} -> {nxt.in_dim}"
                )
        if encoder and head.in_dim != encoder[-1].out_dim:
            raise DataError(
                f"head expects {head.in_dim} features, encoder produces {encoder[-1].out_dim}"
            )
        self.encoder = encoder
        self.projection = projection
        self.head = head

    @classmethod
    def create(
        cls,
        input_dim: int,
        encoder_dims: list[int],
        projection_dims: list[int],
        num_classes: int = 2,
        seed: int = 0,
    ) -> "ModelParams":
        """Seeded uniform fan-in initialization.

        Encoder: relu on hidden layers, linear final layer (the feature
        layer). Projection: exactly three affine layers with relu between
        them; its output is normalized by the forward pass.
        """
        if len(projection_dims) != 3:
            raise ConfigError(f"projection_dims must list 3 widths, got {projection_dims}")
        if not encoder_dims:
            raise ConfigError("encoder needs at least one layer")
        rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, 0x6E657477]))

        def affine(n_in: int, n_out: int, activation: str) -> Layer:
            bound = 1.0 / np.sqrt(n_in)
            w = rng.uniform(-bound, bound, size=(n_out, n_in))
            b = rng.uniform(-bound, bound, size=n_out)
            return Layer(w, b, activation)

        encoder = []
        dims = [input_dim] + list(encoder_dims)
        for i, (n_in, n_out) in enumerate(zip(dims, dims[1:])):
            last = i == len(encoder_dims) - 1
            encoder.append(affine(n_in, n_out, "identity" if last else "relu"))
        proj = []
        pdims = [encoder_dims[-1]] + list(projection_dims)
        for i, (n_in, n_out) in enumerate(zip(pdims, pdims[1:])):
            proj.append(affine(n_in, n_out, "identity" if i == 2 else "relu"))
        head = affine(encoder_dims[-1], num_classes, "identity")
        return cls(encoder, proj, head)

    def layer_names(self) -> list[str]:
        names = [f"encoder.{i}" for i in range(len(self.encoder))]
        names += [f"projection.{i}" for i in range(len(self.projection))]
        names.append("head")
        return names

    def layer(self, name: str) -> Layer:
        section, _, idx = name.partition(".")
        if section == "head" and not idx:
            return self.head
        try:
            if section == "encoder":
                return self.encoder[int(idx)]
            if section == "projection":
                return self.projection[int(idx)]
        except (ValueError, IndexError):
            pass
        raise ConfigError(f"unknown layer name {name!r}")

    def named_layers(self) -> list[tuple[str, Layer]]:
        return [(name, self.layer(name)) for name in self.layer_names()]

    def copy(self) -> "ModelParams":
        def dup(layer: Layer) -> Layer:
            return Layer(layer.weight.copy(), layer.bias.copy(), layer.activation, layer.frozen)

        return ModelParams(
            [dup(l) for l in self.encoder], [dup(l) for l in self.projection], dup(self.head)
        )

    @property
    def input_dim(self) -> int:
        return self.encoder[0].in_dim

    @property
    def feature_dim(self) -> int:
        return self.encoder[-1].out_dim

    @property
    def projection_dim(self) -> int:
        return self.projection[-1].out_dim


def set_frozen(params: ModelParams, selector: str | list[str], frozen: bool = True) -> None:
    """Set freeze flags on the layers matched by ``selector``.

    Selectors are exact layer names or fnmatch patterns ("encoder.*"); each
    pattern must match at least one existing layer.
    """
    patterns = [selector] if isinstance(selector, str) else list(selector)
    names = params.layer_names()
    for pattern in patterns:
        matched = [n for n in names if fnmatch.fnmatchcase(n, pattern)]
        if not matched:
            raise ConfigError(f"freeze selector {pattern!r} matches no layer (have {names})")
        for name in matched:
            params.layer(name).frozen = frozen


class GradientBundle:
    """One gradient buffer per layer, mirroring the parameter shapes.

    Buffers for frozen layers are kept but forced to zero, so optimizers can
    iterate uniformly.
    """

    def __init__(self, grads: dict[str, tuple[np.ndarray, np.ndarray]]):
        self.grads = grads

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "GradientBundle":
        return cls(
            {
                name: (np.zeros_like(layer.weight), np.zeros_like(layer.bias))
                for name, layer in params.named_layers()
            }
        )

    def __getitem__(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        return self.grads[name]

    def items(self):
        return self.grads.items()

    def dot(self, other: "GradientBundle") -> float:
        total = 0.0
        for name, (dw, db) in self.grads.items():
            ow, ob = other.grads[name]
            total += float(np.vdot(dw, ow)) + float(np.vdot(db, ob))
        return total

    def norm(self) -> float:
        return float(np.sqrt(self.dot(self)))

    def scaled(self, c: float) -> "GradientBundle":
        return GradientBundle({n: (dw * c, db * c) for n, (dw, db) in self.grads.items()})

    def add_(self, other: "GradientBundle") -> None:
        for name, (dw, db) in other.grads.items():
            self.grads[name][0][...] += dw
            self.grads[name][1][...] += db

    def is_finite(self) -> bool:
        return all(
            np.all(np.isfinite(dw)) and np.all(np.isfinite(db))
            for dw, db in self.grads.values()
        )


@dataclass
class Tape:
    """Activations recorded by a forward pass, consumed by backward/JVP."""

    x: np.ndarray  # network input (n, d)
    encoder_inputs: list[np.ndarray] = field(default_factory=list)
    encoder_pre: list[np.ndarray] = field(default_factory=list)
    projection_inputs: list[np.ndarray] = field(default_factory=list)
    projection_pre: list[np.ndarray] = field(default_factory=list)
    features: np.ndarray | None = None
    pre_norm: np.ndarray | None = None  # projection output before normalization
    norms: np.ndarray | None = None
    z: np.ndarray | None = None  # normalized projection


def _run_chain(layers: list[Layer], h: np.ndarray, inputs: list, pres: list) -> np.ndarray:
    for layer in layers:
        inputs.append(h)
        pre = h @ layer.weight.T + layer.bias
        pres.append(pre)
        h = np.maximum(pre, 0.0) if layer.activation == "relu" else pre
    return h


def forward_embed(
    params: ModelParams, x: np.ndarray
) -> tuple[np.ndarray, np.ndarray, Tape]:
    """Run encoder and projection; returns (features, unit projection, tape).

    Accepts a single vector or a batch of rows; outputs match the input
    arity. Raises NumericError if any projection output is the zero vector,
    which cannot be normalized.
    """
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    X = np.atleast_2d(arr)
    if X.shape[1] != params.input_dim:
        raise DataError(f"input dim {X.shape[1]} does not match encoder input {params.input_dim}")
    tape = Tape(x=X)
    features = _run_chain(params.encoder, X, tape.encoder_inputs, tape.encoder_pre)
    v = _run_chain(params.projection, features, tape.projection_inputs, tape.projection_pre)
    norms = np.linalg.norm(v, axis=1)
    bad = np.flatnonzero(norms < _ZERO_NORM)
    if bad.size:
        raise NumericError(
            f"projection collapsed to the zero vector for row {bad[0]}; cannot normalize"
        )
    z = v / norms[:, None]
    tape.features = features
    tape.pre_norm = v
    tape.norms = norms
    tape.z = z
    if single:
        return features[0], z[0], tape
    return features, z, tape


def forward_features(params: ModelParams, x: np.ndarray) -> tuple[np.ndarray, Tape]:
    """Encoder-only forward; the returned tape supports backward passes that
    do not touch the projection (head/feature gradients)."""
    X = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if X.shape[1] != params.input_dim:
        raise DataError(f"input dim {X.shape[1]} does not match encoder input {params.input_dim}")
    tape = Tape(x=X)
    tape.features = _run_chain(params.encoder, X, tape.encoder_inputs, tape.encoder_pre)
    return tape.features, tape


def head_forward(params: ModelParams, features: np.ndarray) -> np.ndarray:
    """Affine class logits from encoder features (no nonlinearity)."""
    feats = np.asarray(features, dtype=np.float64)
    single = feats.ndim == 1
    F = np.atleast_2d(feats)
    if F.shape[1] != params.head.in_dim:
        raise DataError(f"feature dim {F.shape[1]} does not match head input {params.head.in_dim}")
    logits = F @ params.head.weight.T + params.head.bias
    return logits[0] if single else logits


def _chain_backward(
    layers: list[Layer],
    inputs: list[np.ndarray],
    pres: list[np.ndarray],
    d_out: np.ndarray,
    grads: dict,
    prefix: str,
) -> np.ndarray:
    for i in reversed(range(len(layers))):
        layer = layers[i]
        d_pre = d_out * (pres[i] > 0.0) if layer.activation == "relu" else d_out
        dw, db = grads[f"{prefix}.{i}"]
        dw += d_pre.T @ inputs[i]
        db += d_pre.sum(axis=0)
        d_out = d_pre @ layer.weight
    return d_out


def backward(
    params: ModelParams,
    tape: Tape,
    d_projection: np.ndarray | None = None,
    d_features: np.ndarray | None = None,
    d_logits: np.ndarray | None = None,
) -> GradientBundle:
    """Exact reverse-mode gradients for a scalar loss.

    Upstream gradients may arrive at the normalized projection output, the
    encoder features, the head logits, or any combination; contributions are
    summed. Frozen layers come back with zero buffers.
    """
    bundle = GradientBundle.zeros_like(params)
    grads = bundle.grads
    n = tape.x.shape[0]
    d_feat_total = np.zeros((n, params.feature_dim), dtype=np.float64)

    if d_logits is not None:
        d_logits = np.atleast_2d(np.asarray(d_logits, dtype=np.float64))
        if d_logits.shape != (n, params.head.out_dim):
            raise DataError(f"d_logits shape {d_logits.shape} does not match tape")
        dw, db = grads["head"]
        dw += d_logits.T @ tape.features
        db += d_logits.sum(axis=0)
        d_feat_total += d_logits @ params.head.weight

    if d_projection is not None:
        dz = np.atleast_2d(np.asarray(d_projection, dtype=np.float64))
        if dz.shape != tape.z.shape:
            raise DataError(f"d_projection shape {dz.shape} does not match tape")
        # z = v / |v|  =>  dL/dv = (dL/dz - z (z . dL/dz)) / |v|
        radial = np.sum(tape.z * dz, axis=1, keepdims=True)
        dv = (dz - tape.z * radial) / tape.norms[:, None]
        d_feat_total += _chain_backward(
            params.projection, tape.projection_inputs, tape.projection_pre, dv, grads, "projection"
        )

    if d_features is not None:
        df = np.atleast_2d(np.asarray(d_features, dtype=np.float64))
        if df.shape != (n, params.feature_dim):
            raise DataError(f"d_features shape {df.shape} does not match tape")
        d_feat_total += df

    _chain_backward(
        params.encoder, tape.encoder_inputs, tape.encoder_pre, d_feat_total, grads, "encoder"
    )
    for name, layer in params.named_layers():
        if layer.frozen:
            grads[name][0][...] = 0.0
            grads[name][1][...] = 0.0
    return bundle


def _chain_jvp(
    layers: list[Layer],
    inputs: list[np.ndarray],
    pres: list[np.ndarray],
    u: np.ndarray,
    direction: GradientBundle,
    prefix: str,
) -> np.ndarray:
    for i, layer in enumerate(layers):
        dw, db = direction[f"{prefix}.{i}"]
        u_pre = u @ layer.weight.T + inputs[i] @ dw.T + db
        u = u_pre * (pres[i] > 0.0) if layer.activation == "relu" else u_pre
    return u


def forward_jvp(
    params: ModelParams, tape: Tape, direction: GradientBundle
) -> tuple[np.ndarray, np.ndarray]:
    """Directional derivative of (features, normalized projection) along a
    parameter-space direction, reusing a recorded tape.

    The input itself is held fixed; only parameters move. Cost is about one
    forward pass.
    """
    u0 = np.zeros_like(tape.x)
    d_feat = _chain_jvp(params.encoder, tape.encoder_inputs, tape.encoder_pre, u0, direction, "encoder")
    dv = _chain_jvp(
        params.projection, tape.projection_inputs, tape.projection_pre, d_feat, direction, "projection"
    )
    radial = np.sum(tape.z * dv, axis=1, keepdims=True)
    dz = (dv - tape.z * radial) / tape.norms[:, None]
    return d_feat, dz


_SECTION_CODE = {name: i for i, name in enumerate(_SECTIONS)}
_ACTIVATION_CODE = {name: i for i, name in enumerate(_ACTIVATIONS)}


def save_checkpoint(params: ModelParams, path: str | Path) -> None:
    """Serialize parameters as float32; loading restores the stored values exactly."""
    sections = (
        [("encoder", l) for l in params.encoder]
        + [("projection", l) for l in params.projection]
        + [("head", params.head)]
    )
    chunks = [_FILE_HEADER.pack(MAGIC, FORMAT_VERSION, len(sections))]
    for section, layer in sections:
        chunks.append(
            _LAYER_HEADER.pack(
                _SECTION_CODE[section],
                _ACTIVATION_CODE[layer.activation],
                1 if layer.frozen else 0,
                layer.in_dim,
                layer.out_dim,
            )
        )
        chunks.append(np.ascontiguousarray(layer.weight, dtype="<f4").tobytes())
        chunks.append(np.ascontiguousarray(layer.bias, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> ModelParams:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _FILE_HEADER.size:
        raise FormatError(f"{path}: file shorter than header")
    magic, version, count = _FILE_HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    offset = _FILE_HEADER.size
    encoder: list[Layer] = []
    projection: list[Layer] = []
    head: Layer | None = None
    for _ in range(count):
        if offset + _LAYER_HEADER.size > len(raw):
            raise FileSizeError(f"{path}: truncated layer header")
        sec, act, frozen, in_dim, out_dim = _LAYER_HEADER.unpack_from(raw, offset)
        offset += _LAYER_HEADER.size
        nbytes = 4 * (in_dim * out_dim + out_dim)
        if offset + nbytes > len(raw):
            raise FileSizeError(f"{path}: truncated layer payload")
        w = (
            np.frombuffer(raw, dtype="<f4", count=in_dim * out_dim, offset=offset)
            .reshape(out_dim, in_dim)
            .astype(np.float64)
        )
        offset += 4 * in_dim * out_dim
        b = np.frombuffer(raw, dtype="<f4", count=out_dim, offset=offset).astype(np.float64)
        offset += 4 * out_dim
        try:
            layer = Layer(w, b, _ACTIVATIONS[act], bool(frozen))
            section = _SECTIONS[sec]
        except IndexError:
            raise FormatError(f"{path}: unknown section/activation code") from None
        if section == "encoder":
            encoder.append(layer)
        elif section == "projection":
            projection.append(layer)
        else:
            if head is not None:
                raise FormatError(f"{path}: multiple head layers")
            head = layer
    if offset != len(raw):
        raise FileSizeError(f"{path}: {len(raw) - offset} trailing bytes")
    if head is None:
        raise FormatError(f"{path}: missing head layer")
    return ModelParams(encoder, projection, head)
