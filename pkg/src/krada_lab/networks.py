"""Small fully-convolutional networks: feature extractor, two heads, discriminator.

All layers keep spatial resolution, so masks computed at image resolution
apply to feature maps unchanged.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, ShapeError
from .rng import stream
from .tensor import ParamSet, Tensor, conv2d, relu


@dataclass
class Conv:
    weight: Tensor
    bias: Tensor

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, padding=(self.kernel - 1) // 2)


@dataclass
class SegModel:
    """Feature extractor ``F`` with the open-set head ``C`` and known-class head ``C_star``."""

    K: int
    F: list[Conv]
    C: Conv
    C_star: Conv

    @property
    def in_channels(self) -> int:
        return self.F[0].in_channels

    @property
    def feat_channels(self) -> int:
        return self.F[-1].out_channels

    def named_params(self) -> dict[str, dict[str, Tensor]]:
        groups = {"F": {}, "C": {}, "C_star": {}}
        for i, layer in enumerate(self.F):
            groups["F"][f"F.{i}.weight"] = layer.weight
            groups["F"][f"F.{i}.bias"] = layer.bias
        for name in ("C", "C_star"):
            layer = getattr(self, name)
            groups[name][f"{name}.weight"] = layer.weight
            groups[name][f"{name}.bias"] = layer.bias
        return groups


@dataclass
class Discriminator:
    """Per-location domain classifier: two 1x1 convolutions."""

    layers: list[Conv] = field(default_factory=list)

    @property
    def in_channels(self) -> int:
        return self.layers[0].in_channels

    def named_params(self) -> dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"D.{i}.weight"] = layer.weight
            out[f"D.{i}.bias"] = layer.bias
        return out


def _conv(rng: np.random.Generator, cin: int, cout: int, k: int) -> Conv:
    fan_in = cin * k * k
    bound = np.sqrt(6.0 / fan_in)
    w = rng.uniform(-bound, bound, size=(cout, cin, k, k))
    return Conv(Tensor(w, requires_grad=True), Tensor(np.zeros(cout), requires_grad=True))


def init_model(K: int, in_channels: int = 3, seed: int = 0, width: int = 16,
               disc_width: int = 8) -> tuple[SegModel, Discriminator]:
    """Build ``F``, ``C``, ``C_star`` and ``D`` with He-uniform weights and zero biases."""
    if K < 2:
        raise ConfigError(f"need at least 2 known classes, got K={K}")
    rng = stream(seed, "init-model")
    F = [_conv(rng, in_channels, width, 3), _conv(rng, width, width, 3)]
    C = _conv(rng, width, K + 1, 1)
    C_star = _conv(rng, width, K, 1)
    drng = stream(seed, "init-discriminator")
    D = Discriminator([_conv(drng, width, disc_width, 1), _conv(drng, disc_width, 1, 1)])
    return SegModel(K, F, C, C_star), D


def param_set(model: SegModel, disc: Discriminator | None = None) -> ParamSet:
    groups = model.named_params()
    groups["D"] = disc.named_params() if disc is not None else {}
    return ParamSet(groups)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def forward_features(model: SegModel, images) -> Tensor:
    x = _as_tensor(images)
    if x.data.ndim != 4 or x.shape[1] != model.in_channels:
        raise ShapeError(f"expected N x {model.in_channels} x H x W images, got {x.shape}")
    for layer in model.F:
        x = relu(layer(x))
    return x


def classify(head: Conv, features) -> Tensor:
    f = _as_tensor(features)
    if f.data.ndim != 4 or f.shape[1] != head.in_channels:
        raise ShapeError(f"head expects {head.in_channels} feature channels, got {f.shape}")
    return head(f)


def discriminate(disc: Discriminator, features) -> Tensor:
    f = _as_tensor(features)
    if f.data.ndim != 4 or f.shape[1] != disc.in_channels:
        raise ShapeError(f"discriminator expects {disc.in_channels} channels, got {f.shape}")
    h = relu(disc.layers[0](f))
    return disc.layers[1](h)


def resize_nearest(mask: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resample of an (..., H, W) array to ``size``."""
    h, w = mask.shape[-2:]
    rows = (np.arange(size[0]) * h) // size[0]
    cols = (np.arange(size[1]) * w) // size[1]
    return mask[..., rows[:, None], cols[None, :]]


# ---------------------------------------------------------------------------
# checkpoints
#
# layout (little endian):
#   magic b"KRADACKP" | u32 K | u32 layer count
#   per layer: u16 name length | name (utf-8) | u8 ndim | ndim x u32 dims | float64 data

MAGIC = b"KRADACKP"


def write_checkpoint(path, K: int, arrays: dict[str, np.ndarray]) -> None:
    parts = [MAGIC, struct.pack("<II", K, len(arrays))]
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        a = np.asarray(arr, dtype="<f8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{a.ndim}I", a.ndim, *a.shape))
        parts.append(a.tobytes(order="C"))
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path) -> tuple[int, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"{path}: truncated checkpoint")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(len(MAGIC)) != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    K, count = struct.unpack("<II", take(8))
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(buf):
        raise FormatError(f"{path}: trailing bytes after last layer")
    return K, arrays


def save_model(path, model: SegModel) -> None:
    flat = {n: t.data for g in model.named_params().values() for n, t in g.items()}
    write_checkpoint(path, model.K, flat)


def save_discriminator(path, disc: Discriminator, K: int) -> None:
    write_checkpoint(path, K, {n: t.data for n, t in disc.named_params().items()})


def _assign(targets: dict[str, Tensor], arrays: dict[str, np.ndarray], path) -> None:
    if set(targets) != set(arrays):
        raise FormatError(f"{path}: layer names {sorted(arrays)} do not match {sorted(targets)}")
    for name, t in targets.items():
        if arrays[name].shape != t.shape:
            raise FormatError(f"{path}: {name} has shape {arrays[name].shape}, expected {t.shape}")
        t.data[...] = arrays[name]


def load_model(path, in_channels: int | None = None) -> SegModel:
    K, arrays = read_checkpoint(path)
    try:
        w0 = arrays["F.0.weight"]
        width = w0.shape[0]
    except KeyError:
        raise FormatError(f"{path}: missing F.0.weight") from None
    if in_channels is not None and w0.shape[1] != in_channels:
        raise FormatError(f"{path}: model expects {w0.shape[1]} input channels")
    model, _ = init_model(K, w0.shape[1], seed=0, width=width)
    _assign({n: t for g in model.named_params().values() for n, t in g.items()}, arrays, path)
    return model


def load_discriminator(path) -> Discriminator:
    _, arrays = read_checkpoint(path)
    try:
        w0 = arrays["D.0.weight"]
    except KeyError:
        raise FormatError(f"{path}: missing D.0.weight") from None
    _, disc = init_model(2, 3, seed=0, width=w0.shape[1], disc_width=w0.shape[0])
    _assign(disc.named_params(), arrays, path)
    return disc
