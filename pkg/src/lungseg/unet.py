"""U-Net builder, forward pass and checkpoint persistence.

Layer schedule (``c_i = base_channels * 2**i``)::

    enc{i}:  conv3x3 -> relu -> conv3x3 -> relu   (c_i channels), then 2x2 max-pool
    bott:    conv3x3 -> relu -> conv3x3 -> relu   (c_depth channels)
    dec{i}:  upsample x2 -> up: conv3x3 -> relu   (c_i)
             concat with enc{i} output            (2 * c_i)
             conv3x3 -> relu -> conv3x3 -> relu   (c_i)
    head:    conv1x1 -> sigmoid                   (out_channels)

All 3x3 convolutions use pad=1 so every level keeps its spatial size.
"""

from __future__ import annotations

import struct
from dataclasses import astuple, dataclass
from pathlib import Path

import numpy as np

from .autograd import Tape, Tensor, concat_channels, conv2d, max_pool2, relu, sigmoid, upsample_nearest2
from .errors import ConfigError, DataIOError, FormatError, ShapeError

ParamStore = dict[str, Tensor]

MAGIC = b"LSEG"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 1
    out_channels: int = 1
    depth: int = 4
    base_channels: int = 64
    input_size: int = 512

    def __post_init__(self):
        for name, value in zip(("in_channels", "out_channels", "depth", "base_channels", "input_size"), astuple(self)):
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.input_size % (2 ** self.depth):
            raise ConfigError(
                f"input_size {self.input_size} is not divisible by 2**depth = {2 ** self.depth}"
            )

    @classmethod
    def desk(cls) -> "UNetConfig":
        return cls(depth=3, base_channels=8, input_size=64)

    @classmethod
    def paper(cls) -> "UNetConfig":
        return cls()


def _conv(name: str, cin: int, cout: int, k: int = 3) -> dict[str, tuple[int, ...]]:
    return {f"{name}.w": (cout, cin, k, k), f"{name}.b": (cout,)}


def param_shapes(cfg: UNetConfig) -> dict[str, tuple[int, ...]]:
    """Canonical parameter names and shapes, sorted by name."""
    widths = [cfg.base_channels * 2 ** i for i in range(cfg.depth + 1)]
    shapes: dict[str, tuple[int, ...]] = {}
    cin = cfg.in_channels
    for i in range(cfg.depth):
        shapes.update(_conv(f"enc{i}.conv1", cin, widths[i]))
        shapes.update(_conv(f"enc{i}.conv2", widths[i], widths[i]))
        cin = widths[i]
    shapes.update(_conv("bott.conv1", cin, widths[-1]))
    shapes.update(_conv("bott.conv2", widths[-1], widths[-1]))
    for i in reversed(range(cfg.depth)):
        shapes.update(_conv(f"dec{i}.up", widths[i + 1], widths[i]))
        shapes.update(_conv(f"dec{i}.conv1", 2 * widths[i], widths[i]))
        shapes.update(_conv(f"dec{i}.conv2", widths[i], widths[i]))
    shapes.update(_conv("head", widths[0], cfg.out_channels, k=1))
    return dict(sorted(shapes.items()))


def build_unet(cfg: UNetConfig, seed: int, dtype=np.float32) -> ParamStore:
    """Fresh parameters: He-normal weights (std sqrt(2/fan_in)), zero biases."""
    rng = np.random.default_rng(seed)
    params: ParamStore = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".b"):
            params[name] = Tensor(np.zeros(shape, dtype=dtype))
        else:
            fan_in = shape[1] * shape[2] * shape[3]
            params[name] = Tensor((rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype))
    return params


def count_params(params: ParamStore) -> int:
    return sum(t.size for t in params.values())


def infer_depth(params: ParamStore) -> int:
    depth = 0
    while f"enc{depth}.conv1.w" in params:
        depth += 1
    return depth


def track(params: ParamStore, tape: Tape) -> ParamStore:
    """Watch every parameter on ``tape``; returns the tracked copies by name."""
    return {name: tape.watch(t) for name, t in params.items()}


def _block(params: ParamStore, prefix: str, x: Tensor) -> Tensor:
    return relu(conv2d(x, params[f"{prefix}.w"], params[f"{prefix}.b"], pad=1))


def unet_forward(params: ParamStore, x: Tensor, taps: dict | None = None) -> Tensor:
    """Run the network on an NCHW batch; output has the input's spatial size.

    Gradients flow to whichever parameters (and input) are tracked on a tape.
    ``taps``, if given, receives the skip-concatenated tensor of each decoder
    level under ``dec{i}.cat``.
    """
    depth = infer_depth(params)
    if x.ndim != 4:
        raise ShapeError(f"unet_forward expects NCHW input, got shape {x.shape}")
    h, w = x.shape[2:]
    if h % 2 ** depth or w % 2 ** depth:
        raise ShapeError(f"input {h}x{w} is not divisible by 2**depth = {2 ** depth}")
    in_ch = params["enc0.conv1.w"].shape[1]
    if x.shape[1] != in_ch:
        raise ShapeError(f"input has {x.shape[1]} channels, network expects {in_ch}")

    skips = []
    for i in range(depth):
        x = _block(params, f"enc{i}.conv2", _block(params, f"enc{i}.conv1", x))
        skips.append(x)
        x = max_pool2(x)
    x = _block(params, "bott.conv2", _block(params, "bott.conv1", x))
    for i in reversed(range(depth)):
        x = _block(params, f"dec{i}.up", upsample_nearest2(x))
        x = concat_channels(skips[i], x)
        if taps is not None:
            taps[f"dec{i}.cat"] = x
        x = _block(params, f"dec{i}.conv2", _block(params, f"dec{i}.conv1", x))
    return sigmoid(conv2d(x, params["head.w"], params["head.b"]))


def predict(params: ParamStore, images: np.ndarray) -> np.ndarray:
    """Untracked forward on an (N,C,H,W) array in the parameters' precision."""
    dtype = next(iter(params.values())).dtype
    return unet_forward(params, Tensor(np.asarray(images, dtype=dtype))).data


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(params: ParamStore, cfg: UNetConfig, path) -> None:
    expected = param_shapes(cfg)
    if set(params) != set(expected):
        raise FormatError("parameter names do not match the configuration")
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<5I", *astuple(cfg)),
              struct.pack("<I", len(params))]
    for name in sorted(params):
        arr = params[name].data
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    try:
        Path(path).write_bytes(b"".join(chunks))
    except OSError as exc:
        raise DataIOError(f"cannot write checkpoint {path}: {exc}") from exc


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"checkpoint truncated at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> tuple[ParamStore, UNetConfig]:
    try:
        rd = _Reader(Path(path).read_bytes())
    except OSError as exc:
        raise DataIOError(f"cannot read checkpoint {path}: {exc}") from exc
    if rd.take(4) != MAGIC:
        raise FormatError(f"{path}: not a lung-segmentation checkpoint (bad magic)")
    (version,) = rd.unpack("<I")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        cfg = UNetConfig(*rd.unpack("<5I"))
    except ConfigError as exc:
        raise FormatError(f"{path}: invalid stored configuration ({exc})") from exc
    expected = param_shapes(cfg)
    (count,) = rd.unpack("<I")
    params: ParamStore = {}
    for _ in range(count):
        (nlen,) = rd.unpack("<H")
        try:
            name = rd.take(nlen).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{path}: parameter name is not UTF-8") from exc
        (rank,) = rd.unpack("<B")
        dims = rd.unpack(f"<{rank}I")
        data = np.frombuffer(rd.take(4 * int(np.prod(dims, dtype=np.int64))), dtype="<f4")
        if name not in expected or tuple(dims) != expected[name] or name in params:
            raise FormatError(f"{path}: unexpected parameter {name!r} with shape {dims}")
        params[name] = Tensor(data.astype(np.float32).reshape(dims))
    if rd.pos != len(rd.buf):
        raise FormatError(f"{path}: trailing bytes after last parameter")
    if set(params) != set(expected):
        missing = sorted(set(expected) - set(params))
        raise FormatError(f"{path}: missing parameters {missing[:3]}")
    return dict(sorted(params.items())), cfg
