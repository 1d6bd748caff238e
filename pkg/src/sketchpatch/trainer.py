"""Seamless-translation training: reconstruction, LSGAN and blurred-shape losses."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import tensor as T
from .hybrid import DEFAULT_DELTA, compose_batch, sample_masks
from .image import gaussian_blur
from .nets import (
    DiscriminatorSpec,
    GeneratorSpec,
    ModelParams,
    discriminator_forward,
    generator_forward,
    image_to_net,
    init_params,
    save_checkpoint,
)
from .patches import PairDataset
from .tensor import Tensor

log = logging.getLogger(__name__)

TRACE_COLUMNS = ("iteration", "l1", "adv_g", "shape", "d_real", "d_fake")
Net = Callable[[Tensor], Tensor]


class TrainingDivergedError(RuntimeError):
    """A loss or activation became non-finite; the offending batch was dumped."""


@dataclass
class TrainConfig:
    batch_size: int = 8
    iterations: int = 2000
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    delta: int = DEFAULT_DELTA
    patch_size: int = 64
    adversarial: bool = True
    shape: bool = True
    seed: int = 0
    checkpoint_every: int = 0
    out_dir: Optional[str] = None
    base_width: int = 16
    res_blocks: int = 3
    down_levels: int = 2
    generator: str = "resnet"

    def __post_init__(self):
        for name in ("batch_size", "patch_size", "base_width"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("iterations", "checkpoint_every", "delta", "res_blocks", "down_levels"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not (self.lr > 0 and 0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ValueError("optimizer settings out of range")

    @property
    def gen_spec(self) -> GeneratorSpec:
        return GeneratorSpec(self.base_width, self.res_blocks, self.down_levels, self.generator)

    @property
    def variant(self) -> str:
        terms = ["l1"] + (["adv"] if self.adversarial else []) + (["shape"] if self.shape else [])
        return "+".join(terms)

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in dataclasses.fields(self))


def _coerce(field_type, raw: str):
    kind = field_type if isinstance(field_type, str) else getattr(field_type, "__name__", str(field_type))
    if "bool" in kind:
        low = raw.strip().lower()
        if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
            raise ValueError(f"not a boolean: {raw!r}")
        return low in ("1", "true", "yes", "on")
    if "Optional" in kind or "None" in kind:
        return None if raw.strip() in ("", "None") else raw.strip()
    if "int" in kind:
        return int(raw)
    if "float" in kind:
        return float(raw)
    return raw.strip()


def config_from_mapping(values: Dict[str, str], base: Optional[TrainConfig] = None) -> TrainConfig:
    """Override ``base`` with string values; unknown keys are rejected."""
    base = base or TrainConfig()
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    updates = {}
    for key, raw in values.items():
        if key not in types:
            raise ValueError(f"unknown config key {key!r}")
        updates[key] = _coerce(types[key], str(raw))
    return dataclasses.replace(base, **updates)


def parse_config_text(text: str) -> Dict[str, str]:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise ValueError(f"config line {n}: expected key=value, got {raw!r}")
        out[key.strip()] = val.strip()
    return out


def load_config(path: Union[str, Path], base: Optional[TrainConfig] = None) -> TrainConfig:
    return config_from_mapping(parse_config_text(Path(path).read_text()), base)


# ---------------------------------------------------------------- losses


def _to_net(batch: np.ndarray) -> Tensor:
    return Tensor(image_to_net(batch)[:, None])


def generator_loss(
    G: Net,
    D: Optional[Net],
    plain_batch: np.ndarray,
    styled_batch: np.ndarray,
    masks: np.ndarray,
    adversarial: bool = True,
    shape: bool = True,
    fake: Optional[Tensor] = None,
):
    """Unit-weighted sum of L1(G(h), s), mean (D(G(h)) - 1)^2 and L1(g(G(h)), g(s)).

    Batches are image-space ``[N,p,p]``; ``masks`` is ``(N, 4)``. Pass ``fake``
    to reuse an already-computed G(h). Returns ``(loss, components)``.
    """
    plain_batch = np.asarray(plain_batch)
    styled_batch = np.asarray(styled_batch)
    if plain_batch.shape != styled_batch.shape or len(masks) != len(plain_batch):
        raise T.DimensionError("plain, styled and mask batches must align")
    s = _to_net(styled_batch)
    if fake is None:
        fake = G(_to_net(compose_batch(plain_batch, styled_batch, masks)))
    if fake.shape != s.shape:
        raise T.DimensionError(f"generator output {fake.shape} != target {s.shape}")
    l1 = T.mean(T.abs(T.sub(fake, s)))
    total = l1
    parts = {"l1": l1.item(), "adv_g": None, "shape": None}
    if adversarial:
        adv = T.mean(T.square(T.sub(D(fake), 1.0)))
        total = T.add(total, adv)
        parts["adv_g"] = adv.item()
    if shape:
        with T.no_grad():
            gs = gaussian_blur(s)
        sh = T.mean(T.abs(T.sub(gaussian_blur(fake), gs)))
        total = T.add(total, sh)
        parts["shape"] = sh.item()
    if not math.isfinite(total.item()):
        raise T.NumericError("generator loss is not finite")
    return total, parts


def discriminator_loss(D: Net, fake_batch: Tensor, real_batch: Tensor):
    """LSGAN objective mean (D(real) - 1)^2 + mean D(fake)^2; ``fake`` is detached."""
    d_real = T.mean(T.square(T.sub(D(real_batch), 1.0)))
    d_fake = T.mean(T.square(D(fake_batch.detach())))
    total = T.add(d_real, d_fake)
    if not math.isfinite(total.item()):
        raise T.NumericError("discriminator loss is not finite")
    return total, {"d_real": d_real.item(), "d_fake": d_fake.item()}


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Dict[str, Tensor],
    grads: Dict[str, np.ndarray],
    state: AdamState,
    lr: float = 2e-4,
    beta1: float = 0.5,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """Bias-corrected Adam update applied in place to ``params[name].data``."""
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        state.m[name], state.v[name] = m, v
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = (p.data - update).astype(p.data.dtype)
    return state


# ---------------------------------------------------------------- training loop


@dataclass
class TrainResult:
    params: ModelParams
    trace: List[Dict[str, Optional[float]]]
    checkpoints: List[Path] = field(default_factory=list)


def _dump_batch(cfg: TrainConfig, it: int, **arrays) -> Path:
    root = Path(cfg.out_dir) if cfg.out_dir else Path.cwd()
    root.mkdir(parents=True, exist_ok=True)
    path = root / f"diverged_iter{it:06d}.npz"
    np.savez(path, iteration=it, **arrays)
    return path


def derive_seeds(seed: int) -> Tuple[int, int]:
    """Independent (init, data) seeds spawned from the run seed."""
    ss = np.random.SeedSequence(seed)
    init_seed, data_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(2))
    return init_seed, data_seed


def train(
    dataset: PairDataset,
    config: TrainConfig,
    disc_spec: DiscriminatorSpec = DiscriminatorSpec(),
    progress: Optional[Callable[[int, Dict], None]] = None,
) -> TrainResult:
    """Alternate one D step and one G step per iteration on fresh random hybrids."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if dataset.patch_size != config.patch_size:
        raise ValueError(f"dataset patch size {dataset.patch_size} != config patch_size {config.patch_size}")
    if config.adversarial and disc_spec.score_size(config.patch_size) < 1:
        raise ValueError(f"patch size {config.patch_size} is too small for the discriminator")
    init_seed, data_seed = derive_seeds(config.seed)
    with T.precision(np.float32):
        params = init_params(config.gen_spec, disc_spec, seed=init_seed)
    params.seed = config.seed
    rng = np.random.default_rng(data_seed)
    n, b = len(dataset), config.batch_size
    g_names = params.names("G.")
    d_names = params.names("D.")
    g_state, d_state = AdamState(), AdamState()
    opt = dict(lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps)
    trace: List[Dict[str, Optional[float]]] = []
    ckpts: List[Path] = []

    G = lambda x: generator_forward(params, x)  # noqa: E731
    D = lambda x: discriminator_forward(params, x)  # noqa: E731
    trainable = bool(g_names)

    for it in range(config.iterations):
        # all randomness for the iteration is drawn up front, in a fixed order
        idx = rng.integers(n, size=b)
        masks = sample_masks(b, config.patch_size, config.delta, rng)
        real_idx = rng.integers(n, size=b)
        plain, styled = dataset.take(idx)
        real = dataset.take(real_idx)[1]
        try:
            with T.precision(np.float32):
                hybrid = _to_net(compose_batch(plain, styled, masks))
                fake = G(hybrid)
                row: Dict[str, Optional[float]] = {"iteration": it, "d_real": None, "d_fake": None}
                if config.adversarial:
                    params.zero_grad("D.")
                    ld, dparts = discriminator_loss(D, fake, _to_net(real))
                    T.backward(ld)
                    adam_step({k: params[k] for k in d_names}, {k: params[k].grad for k in d_names}, d_state, **opt)
                    row.update(dparts)
                params.zero_grad()
                lg, gparts = generator_loss(
                    G, D, plain, styled, masks, config.adversarial, config.shape, fake=fake
                )
                if trainable:
                    T.backward(lg)
                    adam_step({k: params[k] for k in g_names}, {k: params[k].grad for k in g_names}, g_state, **opt)
        except T.NumericError as exc:
            path = _dump_batch(config, it, plain=plain, styled=styled, masks=masks, index=idx, real_index=real_idx)
            raise TrainingDivergedError(f"iteration {it}: {exc}; batch written to {path}") from exc
        row.update(gparts)
        trace.append({k: row.get(k) for k in TRACE_COLUMNS})
        if progress is not None:
            progress(it, trace[-1])
        if config.checkpoint_every and config.out_dir and (it + 1) % config.checkpoint_every == 0:
            path = Path(config.out_dir) / f"checkpoint_{it + 1:06d}.ckpt"
            path.parent.mkdir(parents=True, exist_ok=True)
            save_checkpoint(params, path, extra={"iteration": it + 1})
            ckpts.append(path)
    for t in params.tensors():
        t.grad = None
    return TrainResult(params, trace, ckpts)


def write_trace(trace: Sequence[Dict[str, Optional[float]]], path: Union[str, Path]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for row in trace:
            w.writerow(["" if row.get(c) is None else repr(row[c]) if c != "iteration" else row[c] for c in TRACE_COLUMNS])


def read_trace(path: Union[str, Path]) -> List[Dict[str, Optional[float]]]:
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append(
                {c: (int(rec[c]) if c == "iteration" else (float(rec[c]) if rec[c] != "" else None)) for c in TRACE_COLUMNS}
            )
    return rows


def total_loss(row: Dict[str, Optional[float]]) -> float:
    return sum(row[k] or 0.0 for k in ("l1", "adv_g", "shape"))
