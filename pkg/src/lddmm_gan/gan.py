"""Adversarial training of the registration generator.

Per batch: the discriminator is updated on a positive case (convex mix of
source and target), then on a negative case (source warped by the current
generator), then the generator is updated on ``-log p + lambda * E``.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import spectral
from .autodiff import Tape, Tensor, ops
from .diffeo import DEFAULT_SQUARINGS, DEFAULT_STEPS
from .energy import EnergyConfig, energy_terms
from .errors import DivergenceError, InvalidParameterError, ShapeError
from .grid import GridSpec
from .nets import (AdamState, DiscriminatorParams, GeneratorParams, PROB_EPS, adam_step,
                   discriminator_forward, generator_checkpoint, init_discriminator,
                   init_generator, save_checkpoint)

log = logging.getLogger(__name__)

MODES = {"stationary": "svf-gan", "epdiff": "epdiff-gan"}
LOG_COLUMNS = ["step", "epoch", "loss_d_pos", "loss_d_neg", "loss_adv", "energy",
               "lambda_energy", "loss_g", "p_pos", "p_neg", "mse_rel", "wall_ms"]
# per-sample discriminator outputs behind the batch means in the main log
P_COLUMNS = ["step", "case", "sample", "p"]
MAX_CONSECUTIVE_SKIPS = 10


@dataclass
class GanConfig:
    beta: float = 0.2
    lam: float = 1000.0
    lr_g: float = 5e-5
    lr_d: float = 1e-6
    epochs: int = 1000
    batch_size: int = 64
    seed: int = 0
    parameterization: str = "stationary"
    sigma2: float = 1.0
    alpha: float = 0.0025
    s: float = 4.0
    T: int = DEFAULT_STEPS
    squarings: int = DEFAULT_SQUARINGS
    exp_method: str = "squaring"
    channels: tuple[int, ...] = (16, 32, 64)
    gain: float = 0.1
    head: str = "smooth"

    def __post_init__(self):
        if not 0 < self.beta < 1:
            raise InvalidParameterError(f"beta must lie strictly inside (0, 1), got {self.beta}")
        if not self.lam > 0:
            raise InvalidParameterError(f"lambda must be positive, got {self.lam}")
        if self.epochs < 0 or self.batch_size < 1:
            raise InvalidParameterError("epochs must be >= 0 and batch_size >= 1")
        if self.parameterization not in MODES:
            raise InvalidParameterError(f"unknown parameterization {self.parameterization!r}")
        if self.head not in ("direct", "smooth"):
            raise InvalidParameterError(f"unknown velocity head {self.head!r}")

    def energy_config(self, extents) -> EnergyConfig:
        op = spectral.build(self.alpha, self.s, GridSpec(extents))
        return EnergyConfig(op, self.sigma2, self.parameterization, self.T, self.squarings, self.exp_method)


@dataclass
class TrainRecord:
    step: int
    epoch: int
    loss_d_pos: float
    loss_d_neg: float
    loss_adv: float
    energy: float
    lambda_energy: float
    loss_g: float
    p_pos: float
    p_neg: float
    mse_rel: float
    wall_ms: float
    p_pos_each: np.ndarray = field(repr=False, default=None)
    p_neg_each: np.ndarray = field(repr=False, default=None)
    p_gen_each: np.ndarray = field(repr=False, default=None)

    def row(self) -> dict:
        return {k: getattr(self, k) for k in LOG_COLUMNS}


@dataclass
class TrainResult:
    generator: GeneratorParams
    discriminator: DiscriminatorParams
    records: list[TrainRecord]
    skipped: list[tuple[int, int]]   # (epoch, step) of batches dropped after divergence


def make_positive(I0, I1, beta: float) -> np.ndarray:
    """Stand-in for a well-registered warped source: ``beta*I0 + (1-beta)*I1``."""
    if not 0 < beta < 1:
        raise InvalidParameterError(f"beta must lie strictly inside (0, 1), got {beta}")
    I0, I1 = np.asarray(I0), np.asarray(I1)
    if I0.shape != I1.shape:
        raise ShapeError(f"source {I0.shape} and target {I1.shape} differ")
    return beta * I0 + (1.0 - beta) * I1


def discriminator_loss(p, case: str):
    """``-log p`` for positive cases, ``-log(1-p)`` for negative ones.

    Works on floats/arrays (returns numpy) and on tensors (returns a tensor,
    mean over the batch)."""
    if case not in ("positive", "negative"):
        raise InvalidParameterError(f"case must be 'positive' or 'negative', got {case!r}")
    if isinstance(p, Tensor):
        q = p if case == "positive" else ops.sub(1.0, p)
        return ops.mean(ops.scalar_mul(ops.log(q), -1.0))
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    return -np.log(p) if case == "positive" else -np.log1p(-p)


def generator_loss(p, v, I0, I1, cfg: GanConfig, energy_cfg: EnergyConfig | None = None):
    """``-log p + lambda * E(v, I0, I1)``.

    With tensors (batched) returns ``(L_G, L_adv, lambda*E, terms)``; with a
    float ``p`` and unbatched arrays returns the float ``L_G``.
    """
    if isinstance(p, Tensor):
        terms = energy_terms(v, I0, I1, energy_cfg)
        l_adv = discriminator_loss(p, "positive")
        lam_e = ops.scalar_mul(ops.mean(terms.total), cfg.lam)
        return ops.add(l_adv, lam_e), l_adv, lam_e, terms
    v = np.asarray(v)
    energy_cfg = energy_cfg or cfg.energy_config(v.shape[:-1])
    terms = energy_terms(Tensor(v[None]), np.asarray(I0)[None], np.asarray(I1)[None], energy_cfg)
    return float(discriminator_loss(p, "positive")) + cfg.lam * float(terms.total.data[0])


def velocity(gen: GeneratorParams, I0, I1, cfg: GanConfig, energy_cfg: EnergyConfig) -> Tensor:
    """Generator output, optionally projected onto smooth fields by ``K``."""
    from .nets import generator_forward
    raw = generator_forward(gen, I0, I1)
    if cfg.head == "smooth":
        return ops.spectral_filter(raw, 1.0 / energy_cfg.operator.half_multipliers, gen.dims)
    return raw


def sample_pairs(rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Every image once as a source, each with a uniformly drawn different target."""
    src = rng.permutation(n)
    tgt = (src + rng.integers(1, n, size=n)) % n
    return src, tgt


def _pooled_mse_rel(I0, I1, warped) -> float:
    den = float(np.sum((I0.astype(np.float64) - I1) ** 2))
    if den == 0:
        return float("nan")
    return float(np.sum((warped.astype(np.float64) - I1) ** 2) / den)


def init_models(cfg: GanConfig, extents):
    gen = init_generator(len(extents), cfg.channels, cfg.gain, seed=cfg.seed)
    disc = init_discriminator(extents, seed=cfg.seed + 1)
    return gen, disc


def train_step(gen, disc, opt_g, opt_d, I0, I1, cfg: GanConfig, energy_cfg: EnergyConfig):
    """One D-positive / D-negative / G update. Returns a partially filled record dict."""
    d_params = disc.params
    # (1) discriminator on the positive case
    positive = make_positive(I0, I1, cfg.beta).astype(np.float32)
    with Tape() as tape:
        p_pos = discriminator_forward(disc, positive, I1)
        l_pos = discriminator_loss(p_pos, "positive")
    grads = tape.backward(l_pos, wrt=list(d_params.values()))
    adam_step(opt_d, d_params, dict(zip(d_params, grads)))

    # generator forward once; the map is shared by the negative D step and the G step
    g_tape = Tape()
    with g_tape:
        v = velocity(gen, I0, I1, cfg, energy_cfg)
        terms = energy_terms(v, I0, I1, energy_cfg)

    # (2) discriminator on the negative case
    with Tape() as tape:
        p_neg = discriminator_forward(disc, terms.warped.detach(), I1)
        l_neg = discriminator_loss(p_neg, "negative")
    grads = tape.backward(l_neg, wrt=list(d_params.values()))
    adam_step(opt_d, d_params, dict(zip(d_params, grads)))

    # (3) generator; the scalar bookkeeping runs in float64 so the logged
    # components add up to the logged total
    with g_tape:
        p_gen = discriminator_forward(disc, terms.warped, I1)
        l_adv = ops.astype(discriminator_loss(p_gen, "positive"), np.float64)
        energy = ops.astype(ops.mean(terms.total), np.float64)
        lam_e = ops.scalar_mul(energy, cfg.lam)
        l_g = ops.add(l_adv, lam_e)
    g_params = gen.params
    grads = g_tape.backward(l_g, wrt=list(g_params.values()))
    adam_step(opt_g, g_params, dict(zip(g_params, grads)))

    return dict(loss_d_pos=l_pos.item(), loss_d_neg=l_neg.item(), loss_adv=l_adv.item(),
                energy=energy.item(), lambda_energy=lam_e.item(), loss_g=l_g.item(),
                p_pos=float(p_pos.data.mean()), p_neg=float(p_neg.data.mean()),
                mse_rel=_pooled_mse_rel(I0, I1, terms.warped.data),
                p_pos_each=p_pos.data.copy(), p_neg_each=p_neg.data.copy(),
                p_gen_each=p_gen.data.copy())


def write_run_config(path, cfg, extra: dict | None = None) -> None:
    """``key=value`` lines for every effective parameter."""
    items = {k: (",".join(map(str, v)) if isinstance(v, tuple) else v) for k, v in asdict(cfg).items()}
    items.update(extra or {})
    Path(path).write_text("".join(f"{k}={v}\n" for k, v in items.items()))


def read_run_config(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line:
            k, _, v = line.partition("=")
            out[k.strip()] = v.strip()
    return out


def save_models(out_dir: Path, gen, disc, cfg: GanConfig, epoch: int) -> None:
    meta = {"mode": MODES[cfg.parameterization], "head": cfg.head, "epoch": epoch}
    generator_checkpoint(gen, out_dir / "generator.ckpt", meta)
    save_checkpoint(out_dir / "discriminator.ckpt", disc.params,
                    {"kind": "discriminator", "epoch": epoch,
                     "input_shape": ",".join(map(str, disc.input_shape))})


def train(images: np.ndarray, cfg: GanConfig, out_dir=None, progress=None) -> TrainResult:
    """Train on a stack of images ``(n, *S)``; pairs are redrawn every epoch.

    With ``out_dir`` set, writes ``run_config.txt``, appends ``train_log.csv``
    (and the per-sample probabilities to ``train_p.csv``) row by row, and
    checkpoints both networks after every epoch.
    """
    images = np.asarray(images, dtype=np.float32)
    n, extents = images.shape[0], images.shape[1:]
    if n < 2:
        raise InvalidParameterError("training needs at least two images")
    energy_cfg = cfg.energy_config(extents)
    gen, disc = init_models(cfg, extents)
    opt_g, opt_d = AdamState(cfg.lr_g), AdamState(cfg.lr_d)
    rng = np.random.default_rng(cfg.seed)
    records, skipped = [], []
    writer = fh = p_writer = p_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_run_config(out_dir / "run_config.txt", cfg, {"mode": MODES[cfg.parameterization],
                                                          "images": n,
                                                          "extents": ",".join(map(str, extents))})
        fh = open(out_dir / "train_log.csv", "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        p_fh = open(out_dir / "train_p.csv", "w", newline="")
        p_writer = csv.writer(p_fh)
        p_writer.writerow(P_COLUMNS)
    step = consecutive = 0
    try:
        for epoch in range(cfg.epochs):
            src, tgt = sample_pairs(rng, n)
            for start in range(0, n, cfg.batch_size):
                I0 = images[src[start:start + cfg.batch_size]]
                I1 = images[tgt[start:start + cfg.batch_size]]
                t0 = time.perf_counter()
                try:
                    out = train_step(gen, disc, opt_g, opt_d, I0, I1, cfg, energy_cfg)
                except DivergenceError as exc:
                    skipped.append((epoch, step))
                    consecutive += 1
                    log.warning("epoch %d step %d skipped: %s", epoch, step, exc)
                    if consecutive >= MAX_CONSECUTIVE_SKIPS:
                        raise DivergenceError(
                            f"{consecutive} consecutive batches diverged (last at step {step})",
                            step=step) from exc
                    step += 1
                    continue
                consecutive = 0
                rec = TrainRecord(step=step, epoch=epoch,
                                  wall_ms=(time.perf_counter() - t0) * 1e3, **out)
                records.append(rec)
                if writer is not None:
                    writer.writerow(rec.row())
                    for case, ps in (("pos", rec.p_pos_each), ("neg", rec.p_neg_each), ("gen", rec.p_gen_each)):
                        p_writer.writerows((step, case, i, float(p)) for i, p in enumerate(ps))
                    fh.flush()
                    p_fh.flush()
                if progress is not None:
                    progress(rec)
                step += 1
            if out_dir is not None:
                save_models(out_dir, gen, disc, cfg, epoch)
    finally:
        for h in (fh, p_fh):
            if h is not None:
                h.close()
    return TrainResult(gen, disc, records, skipped)


@dataclass
class Inference:
    velocity: np.ndarray
    displacement: np.ndarray
    warped: np.ndarray


def infer(gen: GeneratorParams, I0, I1, cfg: GanConfig) -> Inference:
    """Register one pair (``(*S)`` arrays) or a batch (``(B, *S)``) without recording a tape."""
    I0 = np.asarray(I0, dtype=np.float32)
    I1 = np.asarray(I1, dtype=np.float32)
    single = I0.ndim == gen.dims
    if single:
        I0, I1 = I0[None], I1[None]
    if I0.shape != I1.shape:
        raise ShapeError(f"source {I0.shape} and target {I1.shape} differ")
    energy_cfg = cfg.energy_config(I0.shape[1:])
    v = velocity(gen, I0, I1, cfg, energy_cfg)
    terms = energy_terms(v, I0, I1, energy_cfg)
    res = Inference(v.data, terms.phi_inv.data, terms.warped.data)
    if single:
        res = Inference(res.velocity[0], res.displacement[0], res.warped[0])
    return res
