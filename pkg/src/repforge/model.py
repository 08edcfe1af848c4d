"""CNN architectures for the three image layouts at depths 2-4.

Layer order per conv block: conv (same padding) -> ReLU -> max-pool (valid),
optionally followed by dropout. The head is flatten -> FC -> ReLU -> dropout
-> FC -> ReLU -> dropout -> FC(num_classes).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields

import numpy as np

from repforge import layers
from repforge.dataset import Standardizer
from repforge.imaging import ImageLayout, InputImage, layout_dims
from repforge.layers import ConvSpec

VARIANTS = ("square84", "rect", "rect-disj", "channels")

DEFAULT_MAPS = {2: (32, 64), 3: (32, 64, 128), 4: (32, 64, 128, 256)}
DEFAULT_FC = {2: (1024, 1024), 3: (1024, 1024), 4: (2048, 1024)}


@dataclass(frozen=True)
class BlockGeometry:
    conv_window: tuple[int, int]
    conv_stride: tuple[int, int]
    pool_window: tuple[int, int]
    pool_stride: tuple[int, int]


def _g(cw, cs, pw, ps) -> BlockGeometry:
    return BlockGeometry(tuple(cw), tuple(cs), tuple(pw), tuple(ps))


# Reference geometry of the first two blocks per layout; deeper blocks continue the
# layout's second-block pooling pattern along the time axis.
BASE_GEOMETRY = {
    "square84": [_g((3, 3), (1, 1), (3, 3), (3, 3)), _g((3, 3), (1, 1), (2, 2), (2, 2))],
    "rect": [_g((3, 3), (1, 1), (3, 4), (3, 4)), _g((3, 3), (1, 1), (1, 4), (1, 4))],
    "rect-disj": [_g((3, 3), (3, 1), (1, 4), (1, 4)), _g((3, 3), (1, 1), (1, 4), (1, 4))],
    "channels": [_g((3, 3), (1, 1), (2, 4), (1, 4)), _g((3, 3), (1, 1), (2, 4), (1, 4))],
}
DEEPER_BLOCK = {
    "square84": _g((3, 3), (1, 1), (2, 2), (2, 2)),
    "rect": _g((3, 3), (1, 1), (1, 4), (1, 4)),
    "rect-disj": _g((3, 3), (1, 1), (1, 4), (1, 4)),
    "channels": _g((3, 3), (1, 1), (1, 4), (1, 4)),
}


class GeometryError(ValueError):
    pass


class LayoutMismatchError(ValueError):
    pass


def default_geometry(variant: str, depth: int) -> list[BlockGeometry]:
    base = BASE_GEOMETRY[variant]
    return list(base) + [DEEPER_BLOCK[variant]] * (depth - len(base))


@dataclass
class ModelConfig:
    variant: str = "channels"
    depth: int = 2
    conv_feature_maps: tuple[int, ...] | None = None
    fc_widths: tuple[int, int] | None = None
    num_classes: int = 50
    dropout_keep: float = 0.5
    dropout_on_conv: bool = False
    seed: int = 0
    input_shape: tuple[int, int, int] | None = None
    conv_geometry: list[BlockGeometry] | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown layout {self.variant!r}; valid layouts: {', '.join(VARIANTS)}")
        if self.depth not in (2, 3, 4):
            raise ValueError(f"depth must be 2, 3 or 4, got {self.depth}")
        if self.conv_feature_maps is None:
            self.conv_feature_maps = DEFAULT_MAPS[self.depth]
        if self.fc_widths is None:
            self.fc_widths = DEFAULT_FC[self.depth]
        if self.input_shape is None:
            self.input_shape = layout_dims(self.layout)
        if self.conv_geometry is None:
            self.conv_geometry = default_geometry(self.variant, self.depth)
        self.conv_feature_maps = tuple(int(m) for m in self.conv_feature_maps)
        self.fc_widths = tuple(int(w) for w in self.fc_widths)
        self.input_shape = tuple(int(d) for d in self.input_shape)
        self.conv_geometry = [
            g if isinstance(g, BlockGeometry) else _g(**g) if isinstance(g, dict) else _g(*g)
            for g in self.conv_geometry
        ]
        if len(self.conv_feature_maps) != self.depth or len(self.conv_geometry) != self.depth:
            raise ValueError("conv_feature_maps and conv_geometry must both have one entry per conv layer")
        if len(self.fc_widths) != 2:
            raise ValueError("fc_widths must hold two hidden widths")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if not 0.0 < self.dropout_keep <= 1.0:
            raise ValueError("dropout_keep must be in (0, 1]")

    @property
    def layout(self) -> ImageLayout:
        return ImageLayout.RECT if self.variant.startswith("rect") else ImageLayout(self.variant)

    def to_text(self) -> str:
        """``key=value`` lines with JSON-encoded values."""
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "conv_geometry":
                value = [[list(g.conv_window), list(g.conv_stride), list(g.pool_window), list(g.pool_stride)] for g in value]
            elif isinstance(value, tuple):
                value = list(value)
            lines.append(f"{f.name}={json.dumps(value)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        kwargs = {}
        known = {f.name for f in fields(cls)}
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            key = key.strip()
            if not sep or key not in known:
                raise ValueError(f"bad config line {raw!r}")
            kwargs[key] = json.loads(value)
        return cls(**kwargs)


@dataclass
class Model:
    config: ModelConfig
    names: list[str]
    params: list[np.ndarray]
    conv_specs: list[ConvSpec]
    shape_trace: list[tuple[str, tuple[int, int, int]]] = field(default_factory=list)
    standardizer: Standardizer | None = None  # training-set statistics, set by run_training

    @property
    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params))

    def param(self, name: str) -> np.ndarray:
        return self.params[self.names.index(name)]


def _truncated_normal(rng: np.random.Generator, shape, sigma: float = 0.1) -> np.ndarray:
    out = rng.normal(0.0, sigma, size=shape)
    bad = np.abs(out) > 2 * sigma
    while bad.any():
        out[bad] = rng.normal(0.0, sigma, size=int(bad.sum()))
        bad = np.abs(out) > 2 * sigma
    return out


def plan_shapes(config: ModelConfig) -> tuple[list[ConvSpec], list[tuple[str, tuple[int, int, int]]]]:
    h, w, c = config.input_shape
    specs, trace = [], [("input", (h, w, c))]
    for i, (geo, maps) in enumerate(zip(config.conv_geometry, config.conv_feature_maps), start=1):
        spec = ConvSpec(geo.conv_window, geo.conv_stride, c, maps, "same")
        h, w = spec.output_hw(h, w)
        c = maps
        specs.append(spec)
        trace.append((f"conv{i}", (h, w, c)))
        (ph, pw), (sy, sx) = geo.pool_window, geo.pool_stride
        if ph > h or pw > w:
            raise GeometryError(f"pool{i}: window {ph}x{pw} exceeds its {h}x{w} input")
        h, w = (h - ph) // sy + 1, (w - pw) // sx + 1
        trace.append((f"pool{i}", (h, w, c)))
    return specs, trace


def build_model(config: ModelConfig) -> Model:
    specs, trace = plan_shapes(config)
    rng = np.random.default_rng(config.seed)
    names, params = [], []
    for i, spec in enumerate(specs, start=1):
        names += [f"conv{i}.kernels", f"conv{i}.bias"]
        params += [
            _truncated_normal(rng, (*spec.window, spec.in_channels, spec.out_maps)),
            np.full(spec.out_maps, 0.1),
        ]
    h, w, c = trace[-1][1]
    widths = [h * w * c, *config.fc_widths, config.num_classes]
    for name, n_in, n_out in zip(("fc1", "fc2", "out"), widths[:-1], widths[1:]):
        names += [f"{name}.weights", f"{name}.bias"]
        params += [_truncated_normal(rng, (n_in, n_out)), np.full(n_out, 0.1)]
    return Model(config, names, params, specs, trace)


# --------------------------------------------------------------------------
# forward / backward


def _check_batch(model: Model, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or x.shape[1:] != model.config.input_shape:
        raise LayoutMismatchError(
            f"model expects images of shape {list(model.config.input_shape)}, got {list(x.shape[1:])}"
        )
    return x


def forward_batch(model: Model, x, training: bool = False, rng: np.random.Generator | None = None):
    """Logits ``(N, K)`` for a batch ``(N, H, W, C)`` plus the backward caches."""
    cfg = model.config
    x = _check_batch(model, x)
    if training and cfg.dropout_keep < 1.0 and rng is None:
        raise ValueError("training-mode forward needs an rng for dropout")
    caches = []
    p = iter(model.params)
    for spec, geo in zip(model.conv_specs, cfg.conv_geometry):
        k, b = next(p), next(p)
        x, cc = layers.conv2d_forward(x, k, b, spec)
        x, rc = layers.relu(x)
        x, pc = layers.maxpool_forward(x, geo.pool_window, geo.pool_stride)
        dm = None
        if cfg.dropout_on_conv:
            x, dm = layers.dropout_apply(x, cfg.dropout_keep, rng, training)
        caches.append((cc, rc, pc, dm))
    flat_shape = x.shape
    x = x.reshape(x.shape[0], -1)
    for _ in range(2):
        w, b = next(p), next(p)
        x, dc = layers.dense_forward(x, w, b)
        x, rc = layers.relu(x)
        x, dm = layers.dropout_apply(x, cfg.dropout_keep, rng, training)
        caches.append((dc, rc, dm))
    w, b = next(p), next(p)
    logits, oc = layers.dense_forward(x, w, b)
    caches.append((oc, flat_shape))
    return logits, caches


def backward(model: Model, caches, grad_logits) -> list[np.ndarray]:
    """Parameter gradients, ordered like ``model.params``."""
    depth = model.config.depth
    if len(caches) != depth + 3:
        raise ValueError("caches do not come from a forward pass of this model")
    grad_logits = np.asarray(grad_logits, dtype=np.float64)
    if grad_logits.ndim == 1:
        grad_logits = grad_logits[None]
    oc, flat_shape = caches[-1]
    g, gw, gb = layers.dense_backward(grad_logits, oc)
    grads = [gw, gb]
    for dc, rc, dm in reversed(caches[depth:depth + 2]):
        g = layers.dropout_backward(g, dm)
        g = layers.relu_backward(g, rc)
        g, gw, gb = layers.dense_backward(g, dc)
        grads = [gw, gb] + grads
    g = g.reshape(flat_shape)
    for i in reversed(range(depth)):
        cc, rc, pc, dm = caches[i]
        g = layers.dropout_backward(g, dm)
        g = layers.maxpool_backward(g, pc)
        g = layers.relu_backward(g, rc)
        g, gk, gb = layers.conv2d_backward(g, cc, need_input_grad=i > 0)
        grads = [gk, gb] + grads
    return grads


def _image_array(model: Model, image: InputImage | np.ndarray) -> np.ndarray:
    if isinstance(image, InputImage):
        if image.layout is not model.config.layout:
            raise LayoutMismatchError(
                f"image layout {image.layout.value!r} does not match model layout "
                f"{model.config.layout.value!r}"
            )
        return image.data
    return np.asarray(image, dtype=np.float64)


def forward(model: Model, image, training: bool = False, rng: np.random.Generator | None = None):
    """Single-image forward: logits ``(K,)`` and caches for :func:`backward`."""
    logits, caches = forward_batch(model, _image_array(model, image)[None], training, rng)
    return logits[0], caches


def predict_batch(model: Model, x, chunk: int = 256) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    probs = np.concatenate(
        [layers.softmax(forward_batch(model, x[i:i + chunk])[0]) for i in range(0, len(x), chunk)]
    ) if len(x) else np.zeros((0, model.config.num_classes))
    return probs.argmax(axis=1), probs


def predict_rep(model: Model, image) -> tuple[int, np.ndarray]:
    logits, _ = forward(model, image)
    probs = layers.softmax(logits)
    return int(np.argmax(probs)), probs
