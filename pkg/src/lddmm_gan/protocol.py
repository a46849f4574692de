"""Desk-scale training and held-out evaluation protocol for the 2D torus experiments."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import TorusSpec, torus_stack
from .energy import mse_rel
from .evaluation import jacobian_positivity
from .gan import GanConfig, TrainResult, infer, train
from .nets import GeneratorParams, load_generator

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DeskProtocol:
    train_count: int = 256
    train_seed: int = 0
    heldout_count: int = 64
    heldout_seed: int = 12345
    epochs: int = 200
    batch_size: int = 64
    # 800 generator updates instead of tens of thousands; see the decisions ledger
    lr_g: float = 1e-3

    def config(self, parameterization: str, **kw) -> GanConfig:
        return GanConfig(epochs=self.epochs, batch_size=self.batch_size, lr_g=self.lr_g,
                         parameterization=parameterization, **kw)

    def training_images(self) -> np.ndarray:
        return torus_stack(TorusSpec(count=self.train_count, seed=self.train_seed))

    def heldout_pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """Unseen pairs ``(i, n/2 + i)`` drawn from an independent seed."""
        imgs = torus_stack(TorusSpec(count=self.heldout_count, seed=self.heldout_seed))
        half = self.heldout_count // 2
        return imgs[:half], imgs[half:2 * half]


@dataclass
class HeldoutReport:
    mse_rel: np.ndarray
    jac_pos: np.ndarray
    seconds_per_pair: float

    @property
    def median_mse_rel(self) -> float:
        return float(np.median(self.mse_rel))

    @property
    def min_jac_pos(self) -> float:
        return float(np.min(self.jac_pos))


def evaluate_generator(gen: GeneratorParams, cfg: GanConfig, I0, I1) -> HeldoutReport:
    t0 = time.perf_counter()
    res = infer(gen, I0, I1, cfg)
    dt = (time.perf_counter() - t0) / len(I0)
    rel = np.array([mse_rel(a, b, w) for a, b, w in zip(I0, I1, res.warped)])
    jac = np.array([jacobian_positivity(u) for u in res.displacement])
    return HeldoutReport(rel, jac, dt)


def train_desk(parameterization: str, out_dir, protocol: DeskProtocol = DeskProtocol(),
               progress=None, **kw) -> TrainResult:
    cfg = protocol.config(parameterization, **kw)
    return train(protocol.training_images(), cfg, out_dir=out_dir, progress=progress)


def load_desk_run(out_dir, parameterization: str, protocol: DeskProtocol = DeskProtocol()):
    """Generator from a finished run directory, or ``None`` if it is incomplete."""
    out_dir = Path(out_dir)
    path = out_dir / "generator.ckpt"
    if not path.exists():
        return None
    gen, meta = load_generator(path)
    if int(meta.get("epoch", -1)) != protocol.epochs - 1:
        log.info("%s stopped at epoch %s", out_dir, meta.get("epoch"))
        return None
    return gen, protocol.config(parameterization)

