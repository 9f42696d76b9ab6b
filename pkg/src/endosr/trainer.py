"""Adversarial training loop, learning-rate schedule, checkpoints and loss-weight sweeps."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from . import checkpoint
from .data import PairSample
from .errors import ConfigurationError, FormatError, InputError, NumericalError
from .features import FeatureExtractor
from .imagecore import bicubic_upscale
from .losses import GeneratorObjective, LossWeights, adversarial_losses
from .metrics import MetricReport, evaluate
from .networks import Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, init_weights

log = logging.getLogger(__name__)

PAPER_DEFAULT_WEIGHTS = (0.35, 0.20, 0.15)
# the ten (alpha, beta, gamma) settings of the published weight sweep
PAPER_SWEEP = (
    (0.25, 0.25, 0.25), (0.15, 0.40, 0.35), (0.35, 0.20, 0.15), (0.05, 0.55, 0.40), (0.15, 0.15, 0.65),
    (0.70, 0.20, 0.05), (0.50, 0.30, 0.30), (0.05, 0.10, 0.75), (0.15, 0.70, 0.05), (0.45, 0.05, 0.35),
)


@dataclass(frozen=True)
class ExtractorSpec:
    """Where the frozen feature extractor comes from: a checkpoint path, or a seeded random VGG."""

    path: str | None = None
    width: float = 1.0
    seed: int = 0
    gain: float = 1.0

    def build(self) -> FeatureExtractor:
        if self.path:
            return FeatureExtractor.from_checkpoint(self.path)
        return FeatureExtractor.random(self.width, self.seed, gain=self.gain)


@dataclass(frozen=True)
class TrainConfig:
    lr_phase1: float = 1e-4
    iters_phase1: int = 100_000
    lr_phase2: float = 1e-5
    iters_phase2: int = 100_000
    finetune_iters: int = 2_000
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 1
    seed: int = 0
    weight_decay: float = 0.0
    loss: LossWeights = LossWeights()
    content_tap: str = "relu5_4"
    texture_tap: str = "relu2_2"
    generator: GeneratorConfig = GeneratorConfig()
    discriminator: DiscriminatorConfig = DiscriminatorConfig()
    extractor: ExtractorSpec = ExtractorSpec()
    track_d_improvement: bool = False

    def __post_init__(self):
        if self.lr_phase1 < 0 or self.lr_phase2 < 0:
            raise ConfigurationError("learning rates must be >= 0")
        if min(self.iters_phase1, self.iters_phase2, self.finetune_iters) < 0:
            raise ConfigurationError("iteration counts must be >= 0")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigurationError("Adam betas must lie in [0, 1)")

    @property
    def total_iters(self) -> int:
        return self.iters_phase1 + self.iters_phase2 + self.finetune_iters

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        nested = {"loss": LossWeights, "generator": GeneratorConfig, "discriminator": DiscriminatorConfig,
                  "extractor": ExtractorSpec}
        for key, typ in nested.items():
            if key in d and isinstance(d[key], dict):
                d[key] = typ(**d[key])
        return cls(**d)


def lr_schedule(iteration: int, cfg: TrainConfig) -> float | None:
    """Phase-1 rate, then the phase-2 rate (also used for fine-tuning); None once training is complete."""
    if iteration < 0:
        raise ConfigurationError("iteration must be >= 0")
    if iteration < cfg.iters_phase1:
        return cfg.lr_phase1
    if iteration < cfg.total_iters:
        return cfg.lr_phase2
    return None


@dataclass
class TrainState:
    cfg: TrainConfig
    generator: Generator
    discriminator: Discriminator
    opt_g: torch.optim.Adam
    opt_d: torch.optim.Adam
    rng: torch.Generator
    extractor: FeatureExtractor | None
    iteration: int = 0
    last_breakdown: dict = field(default_factory=dict)
    best_val: dict | None = None

    @property
    def objective(self) -> GeneratorObjective:
        return GeneratorObjective(self.cfg.loss, self.extractor, self.cfg.content_tap, self.cfg.texture_tap)


def _adam(params, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=cfg.lr_phase1, betas=(cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay)


def new_state(cfg: TrainConfig, extractor: FeatureExtractor | None = None) -> TrainState:
    """Fresh networks initialized from ``cfg.seed``."""
    init_gen = torch.Generator().manual_seed(int(cfg.seed))
    g = init_weights(Generator(cfg.generator), init_gen)
    d = init_weights(Discriminator(cfg.discriminator), init_gen)
    rng = torch.Generator().manual_seed(int(cfg.seed) + 1)
    g.set_dropout_generator(rng)
    coeffs = cfg.loss.coefficients
    if extractor is None and (coeffs["content"] or coeffs["texture"]):
        extractor = cfg.extractor.build()
    return TrainState(cfg, g, d, _adam(g.parameters(), cfg), _adam(d.parameters(), cfg), rng, extractor)


def to_tensor(images: Sequence[np.ndarray]) -> torch.Tensor:
    """[0, 1] HxWxC arrays -> float32 (B, C, H, W) in [-1, 1]."""
    arr = np.stack([np.asarray(im, dtype=np.float32) for im in images]).transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(arr)) * 2.0 - 1.0


def from_tensor(t: torch.Tensor) -> list[np.ndarray]:
    arr = ((t.detach().to(torch.float64).clamp(-1, 1) + 1.0) * 0.5).numpy().transpose(0, 2, 3, 1)
    return [np.ascontiguousarray(a) for a in arr]


def _batch_tensors(batch) -> tuple[torch.Tensor, torch.Tensor]:
    if isinstance(batch, tuple) and len(batch) == 2 and all(torch.is_tensor(t) for t in batch):
        return batch
    batch = list(batch)
    if not batch:
        raise InputError("empty training batch")
    shapes = {(s.lr.shape, s.hr.shape) for s in batch}
    if len(shapes) != 1:
        raise InputError(f"batch mixes image sizes: {sorted(shapes)}")
    return to_tensor([s.lr for s in batch]), to_tensor([s.hr for s in batch])


def _set_lr(opt, lr):
    for group in opt.param_groups:
        group["lr"] = lr


def train_step(state: TrainState, batch, snapshot_dir=None) -> dict:
    """One discriminator update followed by one generator update.

    ``batch`` is a list of :class:`PairSample` or a ``(lr, hr)`` tensor pair in
    [-1, 1]. Returns the log record for this iteration.
    """
    cfg = state.cfg
    lr_t, hr_t = _batch_tensors(batch)
    if hr_t.shape[2] != lr_t.shape[2] * cfg.generator.scale:
        raise ConfigurationError(f"batch scale {hr_t.shape[2] // lr_t.shape[2]} does not match the "
                                 f"generator scale {cfg.generator.scale}")
    rate = lr_schedule(state.iteration, cfg)
    if rate is None:
        raise ConfigurationError(f"training complete after {cfg.total_iters} iterations")
    _set_lr(state.opt_g, rate)
    _set_lr(state.opt_d, rate)
    g, d = state.generator, state.discriminator
    g.train()
    d.train()
    started = time.perf_counter()

    sr = g(lr_t)

    # discriminator: minimize D(SR)^2 + (D(HR) - 1)^2
    d.requires_grad_(True)
    d_real = d.score(lr_t, hr_t)
    d_fake = d.score(lr_t, sr.detach())
    _, d_loss = adversarial_losses(d_real, d_fake)
    _guard(state, "discriminator loss", d_loss, snapshot_dir)
    state.opt_d.zero_grad(set_to_none=True)
    d_loss.backward()
    _guard_grads(state, d, snapshot_dir)
    state.opt_d.step()

    d_after = None
    if cfg.track_d_improvement:
        with torch.no_grad():
            _, d_after_t = adversarial_losses(d.score(lr_t, hr_t), d.score(lr_t, sr.detach()))
        d_after = float(d_after_t)

    # generator: minimize the weighted hybrid objective
    d.requires_grad_(False)
    d_fake_g = d.score(lr_t, sr) if cfg.loss.coefficients["adv"] else None
    total, breakdown = state.objective(sr, hr_t, d_fake_g)
    _guard(state, "generator loss", total, snapshot_dir)
    state.opt_g.zero_grad(set_to_none=True)
    total.backward()
    _guard_grads(state, g, snapshot_dir)
    state.opt_g.step()
    d.requires_grad_(True)

    state.iteration += 1
    record = {
        "iter": state.iteration,
        "lr": rate,
        "d_loss": float(d_loss.detach()),
        "g_adv": breakdown["adv"],
        "g_pixel": breakdown["pixel"],
        "g_content": breakdown["content"],
        "g_texture": breakdown["texture"],
        "g_total": breakdown["total"],
        "seconds": time.perf_counter() - started,
    }
    if d_after is not None:
        record["d_loss_after"] = d_after
    state.last_breakdown = record
    return record


def _guard(state, what, value, snapshot_dir):
    if not torch.isfinite(value).all():
        path = _snapshot(state, snapshot_dir)
        raise NumericalError(f"{what} is not finite at iteration {state.iteration}"
                             + (f"; state saved to {path}" if path else ""))


def _guard_grads(state, module, snapshot_dir):
    for name, p in module.named_parameters():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            path = _snapshot(state, snapshot_dir)
            raise NumericalError(f"non-finite gradient in layer {name} at iteration {state.iteration}"
                                 + (f"; state saved to {path}" if path else ""))


def _snapshot(state, snapshot_dir):
    if snapshot_dir is None:
        return None
    path = Path(snapshot_dir) / f"failure_iter{state.iteration}.enl2h"
    checkpoint_save(state, path)
    return path


def train(state: TrainState, batches: Iterable, n_steps: int, log_path=None, checkpoint_dir=None,
          checkpoint_every: int = 0, snapshot_dir=None) -> list[dict]:
    """Run ``n_steps`` steps (fewer if ``batches`` or the schedule runs out), logging JSON lines."""
    records = []
    fh = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        it = iter(batches)
        for _ in range(n_steps):
            if lr_schedule(state.iteration, state.cfg) is None:
                break
            try:
                batch = next(it)
            except StopIteration:
                break
            rec = train_step(state, batch, snapshot_dir)
            records.append(rec)
            if fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
            if checkpoint_dir and checkpoint_every and state.iteration % checkpoint_every == 0:
                checkpoint_save(state, Path(checkpoint_dir) / f"iter{state.iteration:07d}.enl2h")
    finally:
        if fh:
            fh.close()
    return records


def cycle_batches(pairs: Sequence[PairSample], batch_size: int, n_steps: int):
    """``n_steps`` batches walking through ``pairs`` in order, wrapping around."""
    n = len(pairs)
    for i in range(n_steps):
        yield [pairs[(i * batch_size + k) % n] for k in range(batch_size)]


# ------------------------------------------------------------------ inference / evaluation


def super_resolve(generator: Generator, lr_images: Sequence[np.ndarray]) -> list[np.ndarray]:
    generator.eval()
    with torch.no_grad():
        return from_tensor(generator(to_tensor(lr_images)))


def evaluate_pairs(generator: Generator | None, pairs: Sequence[PairSample],
                   extractor: FeatureExtractor | None) -> list[MetricReport]:
    """Metrics of the generator output (or the bicubic baseline when ``generator`` is None)."""
    reports = []
    for p in pairs:
        if generator is None:
            sr = bicubic_upscale(p.lr, p.scale)
        else:
            sr = super_resolve(generator, [p.lr])[0]
        reports.append(evaluate(sr, p.hr, extractor))
    return reports


# ------------------------------------------------------------------ checkpoints


def _optimizer_tensors(opt: torch.optim.Optimizer, prefix: str) -> dict:
    out = {}
    for idx, st in opt.state_dict()["state"].items():
        for key, val in st.items():
            out[f"{prefix}/{idx}/{key}"] = val if torch.is_tensor(val) else torch.tensor(val)
    return out


def _load_optimizer(opt: torch.optim.Optimizer, tensors: dict, prefix: str) -> None:
    sd = opt.state_dict()
    state: dict = {}
    for name, arr in tensors.items():
        if not name.startswith(prefix + "/"):
            continue
        _, idx, key = name.split("/", 2)
        t = torch.from_numpy(np.array(arr))
        state.setdefault(int(idx), {})[key] = t
    sd["state"] = state
    opt.load_state_dict(sd)


def checkpoint_save(state: TrainState, path) -> None:
    tensors = {}
    tensors.update(checkpoint.module_tensors(state.generator, "generator"))
    tensors.update(checkpoint.module_tensors(state.discriminator, "discriminator"))
    tensors.update(_optimizer_tensors(state.opt_g, "opt_g"))
    tensors.update(_optimizer_tensors(state.opt_d, "opt_d"))
    tensors["rng/state"] = state.rng.get_state()
    meta = {"kind": "train_state", "iteration": state.iteration, "config": state.cfg.to_dict(),
            "best_val": state.best_val}
    checkpoint.save(path, tensors, meta)


def save_generator(generator: Generator, path, extra: dict | None = None) -> None:
    meta = {"kind": "generator", "generator": dataclasses.asdict(generator.cfg)}
    if extra:
        meta.update(extra)
    checkpoint.save(path, checkpoint.module_tensors(generator, "generator"), meta)


def checkpoint_load(path, extractor: FeatureExtractor | None = None) -> TrainState:
    tensors, meta = checkpoint.load(path)
    if not meta or meta.get("kind") != "train_state":
        raise FormatError(f"{path}: not a training-state checkpoint (kind={meta and meta.get('kind')})")
    cfg = TrainConfig.from_dict(meta["config"])
    state = new_state(cfg, extractor)
    checkpoint.load_module(state.generator, tensors, "generator")
    checkpoint.load_module(state.discriminator, tensors, "discriminator")
    _load_optimizer(state.opt_g, tensors, "opt_g")
    _load_optimizer(state.opt_d, tensors, "opt_d")
    state.rng.set_state(torch.from_numpy(np.array(tensors["rng/state"])))
    state.iteration = int(meta["iteration"])
    state.best_val = meta.get("best_val")
    return state


def load_generator(path) -> Generator:
    """Generator weights from either a generator-only or a full training-state checkpoint (eval mode)."""
    tensors, meta = checkpoint.load(path)
    if not meta or meta.get("kind") not in ("generator", "train_state"):
        raise FormatError(f"{path}: checkpoint holds no generator")
    gcfg = meta["generator"] if meta["kind"] == "generator" else meta["config"]["generator"]
    g = Generator(GeneratorConfig(**gcfg))
    checkpoint.load_module(g, tensors, "generator")
    return g.eval()


# ------------------------------------------------------------------ sweeps


def run_sweep(base_cfg: TrainConfig, weight_sets: Sequence[tuple[float, float, float]],
              train_pairs: Sequence[PairSample], val_pairs: Sequence[PairSample], n_steps: int,
              extractor: FeatureExtractor | None = None) -> list[dict]:
    """Train one model per (alpha, beta, gamma) and rank them by validation PSNR (descending)."""
    if not weight_sets:
        raise ConfigurationError("a sweep needs at least one weight set")
    if not train_pairs or not val_pairs:
        raise InputError("a sweep needs training and validation pairs")
    extractor = extractor or base_cfg.extractor.build()
    rows = []
    for idx, (a, b, c) in enumerate(weight_sets):
        cfg = dataclasses.replace(base_cfg, loss=dataclasses.replace(base_cfg.loss, alpha=a, beta=b, gamma=c))
        state = new_state(cfg, extractor)
        train(state, cycle_batches(train_pairs, cfg.batch_size, n_steps), n_steps)
        reports = evaluate_pairs(state.generator, val_pairs, extractor)
        rows.append({
            "index": idx, "alpha": a, "beta": b, "gamma": c,
            "psnr": float(np.mean([r.psnr for r in reports])),
            "ssim": float(np.mean([r.ssim for r in reports])),
            "lpips": float(np.mean([r.lpips for r in reports])),
            "gmsd": float(np.mean([r.gmsd for r in reports])),
            "paper_default": all(math.isclose(x, y) for x, y in zip((a, b, c), PAPER_DEFAULT_WEIGHTS)),
        })
    rows.sort(key=lambda r: (-r["psnr"], r["index"]))
    for rank, r in enumerate(rows, 1):
        r["rank"] = rank
    return rows
