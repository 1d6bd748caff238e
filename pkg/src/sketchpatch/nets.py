"""Desk-scale ResNet generator and PatchGAN discriminator on the autodiff core.

Pixel mapping between image space and network space is ``t = 1 - 2 v``, so
ink (v = 0) is +1 and background (v = 1) is -1.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple, Union

import numpy as np

from . import tensor as T
from .tensor import Tensor

CHECKPOINT_MAGIC = b"SKPATCH1\n"


@dataclass(frozen=True)
class GeneratorSpec:
    base_width: int = 16
    res_blocks: int = 3
    down_levels: int = 2
    # "identity" passes the hybrid straight through; used for diagnostics
    architecture: str = "resnet"

    def __post_init__(self):
        if self.architecture not in ("resnet", "identity"):
            raise ValueError(f"unknown generator architecture {self.architecture!r}")
        if self.base_width < 1 or self.res_blocks < 0 or self.down_levels < 0:
            raise ValueError("generator spec fields must be non-negative (width >= 1)")

    @property
    def divisor(self) -> int:
        return 2 ** self.down_levels


@dataclass(frozen=True)
class DiscriminatorSpec:
    """4x4 conv stack; each entry of ``widths`` is one conv with its stride.

    A final stride-1 4x4 conv maps to the single-channel score map. The
    default gives a 6x6 map on 64x64 input.
    """

    widths: Tuple[int, ...] = (16, 32, 64, 64)
    strides: Tuple[int, ...] = (2, 2, 2, 1)
    kernel: int = 4
    slope: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        if len(self.widths) != len(self.strides) or not self.widths:
            raise ValueError("widths and strides must be non-empty and equally long")

    def score_size(self, side: int) -> int:
        for s in self.strides:
            side = (side + 2 - self.kernel) // s + 1
        return side + 2 - self.kernel + 1


@dataclass
class ModelParams:
    """Named parameter slots for G ("G.*") and D ("D.*")."""

    gen_spec: GeneratorSpec
    disc_spec: DiscriminatorSpec
    seed: int
    slots: Dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.slots[name]

    def names(self, prefix: str = "") -> List[str]:
        return [n for n in self.slots if n.startswith(prefix)]

    def tensors(self, prefix: str = "") -> List[Tensor]:
        return [self.slots[n] for n in self.names(prefix)]

    def zero_grad(self, prefix: str = "") -> None:
        for t in self.tensors(prefix):
            t.grad = np.zeros_like(t.data)

    def copy(self) -> "ModelParams":
        slots = {n: Tensor(t.data, requires_grad=True) for n, t in self.slots.items()}
        return ModelParams(self.gen_spec, self.disc_spec, self.seed, slots)

    def astype(self, dtype) -> "ModelParams":
        with T.precision(dtype):
            slots = {n: Tensor(t.data, requires_grad=True) for n, t in self.slots.items()}
        return ModelParams(self.gen_spec, self.disc_spec, self.seed, slots)

    def equals(self, other: "ModelParams") -> bool:
        if self.names() != other.names():
            return False
        return all(np.array_equal(self[n].data, other[n].data) for n in self.slots)


# ---------------------------------------------------------------- layer plan


def _generator_layout(spec: GeneratorSpec) -> List[Tuple[str, Tuple[int, ...]]]:
    if spec.architecture == "identity":
        return []
    w = spec.base_width
    # convs feeding instance norm carry no bias: the norm would cancel it exactly
    layout = [("G.in.w", (w, 1, 7, 7))]
    ch = w
    for i in range(spec.down_levels):
        layout += [(f"G.down{i}.w", (ch * 2, ch, 3, 3))]
        ch *= 2
    for i in range(spec.res_blocks):
        for j in (1, 2):
            layout += [(f"G.res{i}.c{j}.w", (ch, ch, 3, 3))]
    for i in range(spec.down_levels):
        # transposed kernels are [C_in, C_out, kh, kw]
        layout += [(f"G.up{i}.w", (ch, ch // 2, 3, 3))]
        ch //= 2
    layout += [("G.out.w", (1, ch, 7, 7)), ("G.out.b", (1,))]
    return layout


def _discriminator_layout(spec: DiscriminatorSpec) -> List[Tuple[str, Tuple[int, ...]]]:
    k = spec.kernel
    layout, ch = [], 1
    for i, w in enumerate(spec.widths):
        layout += [(f"D.c{i}.w", (w, ch, k, k))]
        if i == 0:
            layout += [("D.c0.b", (w,))]
        ch = w
    layout += [("D.out.w", (1, ch, k, k)), ("D.out.b", (1,))]
    return layout


def init_params(
    gen_spec: GeneratorSpec = GeneratorSpec(),
    disc_spec: DiscriminatorSpec = DiscriminatorSpec(),
    seed: int = 0,
) -> ModelParams:
    """Weights ~ N(0, 0.02), biases 0, drawn in a fixed slot order from ``seed``."""
    rng = np.random.default_rng(seed)
    slots = {}
    for name, shape in _generator_layout(gen_spec) + _discriminator_layout(disc_spec):
        if name.endswith(".b"):
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, 0.02, size=shape)
        slots[name] = Tensor(data, requires_grad=True)
    return ModelParams(gen_spec, disc_spec, seed, slots)


# ---------------------------------------------------------------- forward passes


def image_to_net(v: np.ndarray) -> np.ndarray:
    return 1.0 - 2.0 * np.asarray(v)


def net_to_image(t: np.ndarray) -> np.ndarray:
    return np.clip((1.0 - np.asarray(t, dtype=np.float64)) / 2.0, 0.0, 1.0)


def _conv_in_relu(params, x, name, stride=1, padding=1, reflect=0):
    if reflect:
        x = T.pad(x, reflect, "reflect")
    x = T.conv2d(x, params[name + ".w"], stride=stride, padding=padding)
    return T.relu(T.instance_norm(x))


def generator_forward(params: ModelParams, hybrid: Tensor) -> Tensor:
    """Map hybrid patches ``[N,1,p,p]`` in network space to styled patches in (-1, 1)."""
    spec = params.gen_spec
    if hybrid.data.ndim != 4 or hybrid.shape[1] != 1:
        raise T.DimensionError(f"generator expects [N,1,p,p], got {hybrid.shape}")
    _, _, h, w = hybrid.shape
    if h % spec.divisor or w % spec.divisor:
        raise T.DimensionError(f"patch side must be divisible by {spec.divisor}, got {h}x{w}")
    if spec.architecture == "identity":
        return hybrid
    x = _conv_in_relu(params, hybrid, "G.in", padding=0, reflect=3)
    for i in range(spec.down_levels):
        x = _conv_in_relu(params, x, f"G.down{i}", stride=2, padding=1)
    for i in range(spec.res_blocks):
        y = _conv_in_relu(params, x, f"G.res{i}.c1", padding=0, reflect=1)
        y = T.pad(y, 1, "reflect")
        y = T.conv2d(y, params[f"G.res{i}.c2.w"])
        x = T.add(x, T.instance_norm(y))
    for i in range(spec.down_levels):
        # k=3, s=2 with one row/col of top-left padding doubles the side exactly
        x = T.conv2d_transpose(x, params[f"G.up{i}.w"], stride=2, padding=(1, 0, 1, 0))
        x = T.relu(T.instance_norm(x))
    x = T.pad(x, 3, "reflect")
    x = T.conv2d(x, params["G.out.w"], params["G.out.b"])
    return T.tanh(x)


def discriminator_forward(params: ModelParams, patch: Tensor) -> Tensor:
    """PatchGAN score map ``[N,1,s,s]``; no norm on the first layer or the output."""
    spec = params.disc_spec
    if patch.data.ndim != 4 or patch.shape[1] != 1:
        raise T.DimensionError(f"discriminator expects [N,1,p,p], got {patch.shape}")
    x = patch
    for i, stride in enumerate(spec.strides):
        if i == 0:
            x = T.conv2d(x, params["D.c0.w"], params["D.c0.b"], stride=stride, padding=1)
        else:
            x = T.instance_norm(T.conv2d(x, params[f"D.c{i}.w"], stride=stride, padding=1))
        x = T.leaky_relu(x, spec.slope)
    return T.conv2d(x, params["D.out.w"], params["D.out.b"], stride=1, padding=1)


def translate(params: ModelParams, patches: np.ndarray) -> np.ndarray:
    """Run G on image-space patches ``[N,p,p]`` and return image-space output."""
    with T.no_grad():
        x = Tensor(image_to_net(patches)[:, None])
        if params.gen_spec.architecture == "identity":
            return np.asarray(patches, dtype=np.float64).copy()
        y = generator_forward(params, x)
    return net_to_image(y.data[:, 0])


# ---------------------------------------------------------------- checkpoints


class CheckpointError(ValueError):
    pass


def save_checkpoint(params: ModelParams, path: Union[str, Path], extra: Optional[dict] = None) -> None:
    """Header line (JSON spec, seed, slot table) followed by raw float32 LE values."""
    header = {
        "gen_spec": asdict(params.gen_spec),
        "disc_spec": asdict(params.disc_spec),
        "seed": params.seed,
        "slots": [[n, list(t.shape)] for n, t in params.slots.items()],
    }
    if extra:
        header["extra"] = extra
    head = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for t in params.slots.values():
            fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def load_checkpoint(path: Union[str, Path]) -> ModelParams:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    off = len(CHECKPOINT_MAGIC)
    if len(data) < off + 8:
        raise CheckpointError(f"{path}: truncated header")
    (hlen,) = struct.unpack_from("<Q", data, off)
    off += 8
    try:
        header = json.loads(data[off:off + hlen])
        gs = GeneratorSpec(**header["gen_spec"])
        ds = DiscriminatorSpec(**header["disc_spec"])
        slot_table = [(str(n), [int(d) for d in shape]) for n, shape in header["slots"]]
        seed = int(header["seed"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
    off += hlen
    slots = {}
    with T.precision(np.float32):
        for name, shape in slot_table:
            n = int(np.prod(shape)) if shape else 1
            if off + 4 * n > len(data):
                raise CheckpointError(f"{path}: truncated at slot {name}")
            arr = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(shape)
            slots[name] = Tensor(arr, requires_grad=True)
            off += 4 * n
    if off != len(data):
        raise CheckpointError(f"{path}: {len(data) - off} trailing bytes")
    expected = [n for n, _ in _generator_layout(gs) + _discriminator_layout(ds)]
    if list(slots) != expected:
        raise CheckpointError(f"{path}: slot table does not match its specs")
    return ModelParams(gs, ds, seed, slots)


def iter_slot_shapes(params: ModelParams) -> Iterator[Tuple[str, Tuple[int, ...]]]:
    for n, t in params.slots.items():
        yield n, t.shape
