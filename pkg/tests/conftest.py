"""Shared, session-scoped training runs for the acceptance and model-level tests.

Training the desk-scale model takes minutes, so each run happens once per
session. Setting ``SKETCHPATCH_CACHE_DIR`` keeps checkpoints, traces and
timings between sessions; leave it unset for a fresh, fully measured run.
"""

import json
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

import pytest

from sketchpatch import nets, patches, synth, trainer
from sketchpatch.image import GrayImage
from sketchpatch.synth import StyleSpec

# the pinned desk-scale experiment
EXEMPLAR_SIZE = 256
EXEMPLAR_SEED = 1
EXEMPLAR_STROKE = 3
EXEMPLAR_SHAPES = 8
STRIPES = StyleSpec("stripes", period=8, phase=0, thickness=4)
HSTRIPES = StyleSpec("hstripes", period=8, phase=0, thickness=4)
PATCH = 64
ROTATION_STEP = 90
STRIDE = 8
TRAIN_SEED = 0
ABLATION_ITERATIONS = 500
HELD_OUT_SEEDS = (101, 102, 103)

REPORT: List[str] = []


def report(criterion: str, ok: bool, detail: str) -> bool:
    line = f"{'PASS' if ok else 'FAIL'} {criterion}: {detail}"
    print(line)
    REPORT.append(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if REPORT:
        terminalreporter.section("acceptance criteria")
        for line in REPORT:
            terminalreporter.write_line(line)


def held_out_sketch(seed: int) -> GrayImage:
    return synth.synth_sketch(EXEMPLAR_SIZE, seed=seed, stroke=EXEMPLAR_STROKE, shapes=EXEMPLAR_SHAPES)


@dataclass
class Exemplar:
    plain: GrayImage
    styled: GrayImage
    dataset: patches.PairDataset


@dataclass
class Run:
    params: nets.ModelParams
    trace: List[Dict[str, Optional[float]]]
    seconds: float
    config: trainer.TrainConfig


def _exemplar(style: StyleSpec) -> Exemplar:
    plain = held_out_sketch(EXEMPLAR_SEED)
    styled = synth.synth_style(plain, style)
    ds = patches.mine_dataset([(style.kind, plain, styled)], PATCH, ROTATION_STEP, STRIDE)
    return Exemplar(plain, styled, ds)


def _train(name: str, dataset: patches.PairDataset, cfg: trainer.TrainConfig) -> Run:
    cache = os.environ.get("SKETCHPATCH_CACHE_DIR")
    if cache:
        root = Path(cache)
        ckpt, trace_path, meta_path = root / f"{name}.ckpt", root / f"{name}.csv", root / f"{name}.json"
        if meta_path.exists():
            meta = json.loads(meta_path.read_text())
            if meta["config"] == cfg.to_text():
                return Run(nets.load_checkpoint(ckpt), trainer.read_trace(trace_path), meta["seconds"], cfg)
    start = time.perf_counter()
    result = trainer.train(dataset, cfg)
    seconds = time.perf_counter() - start
    if cache:
        root.mkdir(parents=True, exist_ok=True)
        nets.save_checkpoint(result.params, ckpt)
        trainer.write_trace(result.trace, trace_path)
        meta_path.write_text(json.dumps({"config": cfg.to_text(), "seconds": seconds}))
    return Run(result.params, result.trace, seconds, cfg)


@pytest.fixture(scope="session")
def stripes() -> Exemplar:
    return _exemplar(STRIPES)


@pytest.fixture(scope="session")
def hstripes() -> Exemplar:
    return _exemplar(HSTRIPES)


@pytest.fixture(scope="session")
def stripes_run(stripes) -> Run:
    return _train("stripes", stripes.dataset, trainer.TrainConfig(seed=TRAIN_SEED))


@pytest.fixture(scope="session")
def hstripes_run(hstripes) -> Run:
    return _train("hstripes", hstripes.dataset, trainer.TrainConfig(seed=TRAIN_SEED))


@pytest.fixture(scope="session")
def ablation_runs(stripes) -> Dict[str, Run]:
    runs = {}
    for adversarial in (False, True):
        for shape in (False, True):
            cfg = trainer.TrainConfig(
                iterations=ABLATION_ITERATIONS, seed=TRAIN_SEED, adversarial=adversarial, shape=shape
            )
            runs[cfg.variant] = _train(f"ablation_{cfg.variant}", stripes.dataset, cfg)
    return runs


@pytest.fixture(scope="session")
def output_dir() -> Path:
    """Persistent location for artefacts meant for manual inspection."""
    root = Path(__file__).resolve().parent.parent / "acceptance_output"
    root.mkdir(exist_ok=True)
    return root
