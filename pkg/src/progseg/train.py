"""Adversarial training: objectives, alternating updates and the staged schedule."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .data import Dataset, reduce_mask
from .errors import ContractError, DataError, ShapeError
from .nn import AdamState, adam_step
from .progan import (Architecture, GrowthState, Models, active_parameters, build_models, grow,
                     predict_proba)
from .tensor import Rng, Tensor

MODES = ("unet", "gan", "progressive")
GAN_MODES = ("non_saturating", "minimax")
SCORE_EPS = 1e-7


@dataclass
class ObjectiveConfig:
    lambda_l1: float = 100.0
    gan_mode: str = "non_saturating"

    def __post_init__(self):
        if self.lambda_l1 < 0:
            raise ContractError(f"lambda_l1 must be >= 0, got {self.lambda_l1}")
        if self.gan_mode not in GAN_MODES:
            raise ContractError(f"gan_mode must be one of {GAN_MODES}, got {self.gan_mode!r}")


@dataclass
class StageSpec:
    resolution: int
    iterations: int
    fade_iterations: int = 0


@dataclass
class Schedule:
    stages: list
    batch_size: int = 16

    def __post_init__(self):
        if not self.stages:
            raise ContractError("schedule has no stages")
        for a, b in zip(self.stages, self.stages[1:]):
            if b.resolution != 2 * a.resolution:
                raise ContractError(
                    f"stage resolutions must double: {a.resolution} -> {b.resolution}")
        for s in self.stages:
            if s.iterations <= 0:
                raise ContractError(f"stage {s.resolution}px has {s.iterations} iterations")
            if not 0 <= s.fade_iterations <= s.iterations:
                raise ContractError(f"stage {s.resolution}px fade {s.fade_iterations} invalid")
        if self.batch_size < 2:
            raise ContractError("batch_size must be at least 2 (batch norm)")

    @property
    def total_iterations(self) -> int:
        return sum(s.iterations for s in self.stages)

    @property
    def resolutions(self) -> list:
        return [s.resolution for s in self.stages]

    @classmethod
    def progressive(cls, resolutions, total_iterations, batch_size=16, fade_fraction=0.5):
        """Split ``total_iterations`` equally over stages; fade in over the first
        ``fade_fraction`` of every stage after the first."""
        per = total_iterations // len(resolutions)
        stages = []
        for i, r in enumerate(resolutions):
            iters = per + (total_iterations - per * len(resolutions) if i == len(resolutions) - 1 else 0)
            fade = int(round(fade_fraction * iters)) if i > 0 else 0
            stages.append(StageSpec(int(r), iters, fade))
        return cls(stages, batch_size)

    @classmethod
    def single(cls, resolution, iterations, batch_size=16):
        return cls([StageSpec(int(resolution), iterations, 0)], batch_size)


@dataclass
class TrainConfig:
    mode: str = "progressive"
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps_adam: float = 1e-8
    seed: int = 0
    log_interval: int = 1
    probe_interval: int = 100
    probe_size: int = 64
    threshold: float = 0.5

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractError(f"mode must be one of {MODES}, got {self.mode!r}")


@dataclass
class TrainRecord:
    iteration: int
    stage: int
    resolution: int
    alpha: float
    loss_D: float | None
    loss_G_adv: float | None
    loss_G_l1: float
    train_accuracy: float | None = None

    FIELDS = ("iteration", "stage", "resolution", "alpha", "loss_D", "loss_G_adv",
              "loss_G_l1", "train_accuracy")


@dataclass
class SampleBatch:
    """Full-resolution inputs with targets at the active stage resolution."""

    input: np.ndarray          # (b, 3, H, W) float32 in [0, 1]
    target: np.ndarray         # (b, 1, r, r) float32 in {0, 1}

    @property
    def resolution(self) -> int:
        return self.target.shape[-1]


class BatchProvider:
    """Deterministic epoch-shuffled minibatches from a :class:`Dataset`."""

    def __init__(self, dataset: Dataset, batch_size: int, rng: Rng):
        if len(dataset) == 0:
            raise DataError("cannot draw batches from an empty dataset")
        self.dataset = dataset
        self.batch_size = batch_size
        self.rng = rng
        self._order = np.empty(0, dtype=int)
        self._pos = 0

    def next_indices(self) -> np.ndarray:
        out = []
        need = self.batch_size
        while need:
            if self._pos >= len(self._order):
                self._order = self.rng.permutation(len(self.dataset))
                self._pos = 0
            take = self._order[self._pos:self._pos + need]
            self._pos += len(take)
            need -= len(take)
            out.append(take)
        return np.concatenate(out)

    def next(self, resolution: int) -> SampleBatch:
        idx = self.next_indices()
        target = self.dataset.masks_at(resolution)[idx][:, None].astype(np.float32)
        return SampleBatch(self.dataset.images[idx], target)

    def get_state(self) -> dict:
        return {"rng": self.rng.get_state(), "order": self._order.tolist(), "pos": self._pos}

    def set_state(self, state: dict) -> None:
        self.rng.set_state(state["rng"])
        self._order = np.asarray(state["order"], dtype=int)
        self._pos = int(state["pos"])


# -- objectives ------------------------------------------------------------------

def discriminator_loss(d_real: Tensor, d_fake: Tensor) -> Tensor:
    """-mean log D(y) - mean log(1 - D(y_hat))."""
    real = T.reduce_mean(T.log(d_real))
    fake = T.reduce_mean(T.log(T.add(T.neg(d_fake), 1.0)))
    return T.neg(T.add(real, fake))


def generator_loss(d_fake: Tensor | None, y_hat: Tensor, y: Tensor, cfg: ObjectiveConfig):
    """Returns (total, adv_part, l1_part); ``l1_part`` already carries lambda_l1.

    ``d_fake`` may be None (plain U-Net training), in which case adv_part is None.
    """
    if y_hat.shape != y.shape:
        raise ShapeError(f"prediction {y_hat.shape} vs target {y.shape}")
    l1 = T.reduce_mean(T.abs(T.sub(y, y_hat)))
    l1_part = T.scale(l1, cfg.lambda_l1)
    if d_fake is None:
        return l1_part, None, l1_part
    if cfg.gan_mode == "non_saturating":
        adv = T.neg(T.reduce_mean(T.log(d_fake)))
    else:
        adv = T.reduce_mean(T.log(T.add(T.neg(d_fake), 1.0)))
    return T.add(adv, l1_part), adv, l1_part


# -- training state ----------------------------------------------------------------

@dataclass
class TrainState:
    models: Models
    opt_g: AdamState
    opt_d: AdamState | None
    iteration: int = 0

    @property
    def gs(self) -> GrowthState:
        return self.models.state


def architecture_for_mode(arch: Architecture, mode: str, schedule: Schedule) -> Architecture:
    """unet/gan train the full-depth decoder from the start; progressive starts
    at the first scheduled resolution."""
    if schedule.resolutions[-1] != arch.full_res:
        raise ContractError(
            f"last stage {schedule.resolutions[-1]}px must equal full_res {arch.full_res}")
    base = arch.full_res if mode in ("unet", "gan") else schedule.resolutions[0]
    return replace(arch, base_res=base)


def schedule_for_mode(schedule: Schedule, mode: str) -> Schedule:
    if mode == "progressive":
        return schedule
    return Schedule.single(schedule.resolutions[-1], schedule.total_iterations,
                           schedule.batch_size)


def init_state(arch: Architecture, cfg: TrainConfig) -> TrainState:
    rng = Rng(cfg.seed, "model")
    models = build_models(arch, rng, with_discriminator=cfg.mode != "unet")
    opt_g = AdamState(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps_adam)
    opt_d = AdamState(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps_adam) if cfg.mode != "unet" else None
    return TrainState(models, opt_g, opt_d)


def _advance_alpha(gs: GrowthState, fade_iterations: int) -> None:
    gs.iters_in_stage += 1
    if gs.stage == 1 or fade_iterations <= 0:
        gs.alpha = 1.0
    else:
        gs.alpha = min(1.0, gs.iters_in_stage / fade_iterations)


def _real_for_discriminator(target: np.ndarray, gs: GrowthState) -> np.ndarray:
    """During fade-in the real masks are blended the same way as the generator output."""
    if gs.stage == 1 or gs.alpha >= 1.0:
        return target
    coarse = reduce_mask(target).astype(target.dtype).repeat(2, axis=2).repeat(2, axis=3)
    a = target.dtype.type(gs.alpha)
    return a * target + (1 - a) * coarse


def _stage_image(x: np.ndarray, r: int) -> np.ndarray:
    f = x.shape[-1] // r
    return np.ascontiguousarray(x[:, :, ::f, ::f])


def _score_pair(d, real: Tensor, fake: Tensor, gs: GrowthState, img: Tensor | None):
    """Score real and fake masks in one batch so batch-norm statistics are shared.

    Scored separately, each half is normalized by its own statistics and the
    pooled score loses the real/fake offset entirely.
    """
    b = real.shape[0]
    both_img = None if img is None else T.concat([img, img], axis=0)
    scores = d(T.concat([real, fake], axis=0), gs, both_img)
    return T.narrow(scores, 0, 0, b), T.narrow(scores, 0, b, b)


def train_step(state: TrainState, batch: SampleBatch, cfg: TrainConfig,
               fade_iterations: int = 0) -> TrainRecord:
    """One discriminator update followed by one generator update."""
    g, d = state.models.generator, state.models.discriminator
    gs = state.gs
    if batch.input.shape[0] < 2:
        raise ContractError("train_step needs a batch of at least 2")
    if batch.resolution != gs.resolution:
        raise ShapeError(f"batch at {batch.resolution}px, stage at {gs.resolution}px")
    g.train()
    x = Tensor(batch.input)
    y = Tensor(batch.target)
    y_hat = g(x, gs)

    loss_d_val = adv_val = None
    d_fake = None
    if d is not None:
        d.train()
        img = Tensor(_stage_image(batch.input, gs.resolution)) if d.arch.discriminator_sees_input else None
        real = Tensor(_real_for_discriminator(batch.target, gs))
        loss_d = discriminator_loss(*_score_pair(d, real, y_hat.detach(), gs, img))
        T.backward(loss_d)
        adam_step(active_parameters(d, gs, "from_mask"), state.opt_d)
        loss_d_val = float(loss_d.data)
        _, d_fake = _score_pair(d, real, y_hat, gs, img)

    total, adv, l1_part = generator_loss(d_fake, y_hat, y, cfg.objective)
    T.backward(total)
    if d is not None:
        d.zero_grad()
        adv_val = float(adv.data)
    adam_step(active_parameters(g, gs, "heads"), state.opt_g)

    mean_l1 = float(np.abs(batch.target - y_hat.data).mean())
    record = TrainRecord(state.iteration, gs.stage, gs.resolution, float(gs.alpha),
                         loss_d_val, adv_val, mean_l1)
    state.iteration += 1
    _advance_alpha(gs, fade_iterations)
    return record


def pixel_accuracy(g, images: np.ndarray, masks: np.ndarray, gs: GrowthState,
                   threshold: float = 0.5) -> float:
    pred = predict_proba(g, images, gs) >= threshold
    return float((pred == masks.astype(bool)).mean())


def run_schedule(state: TrainState, dataset: Dataset, schedule: Schedule, cfg: TrainConfig,
                 sink=None, provider: BatchProvider | None = None, on_checkpoint=None,
                 checkpoint_interval: int = 0) -> list:
    """Train through every stage of ``schedule`` starting from ``state``.

    Stages already completed by ``state`` (after a resume) are skipped. Each
    emitted :class:`TrainRecord` goes to ``sink`` (if given) every
    ``cfg.log_interval`` iterations; the list of emitted records is returned.
    """
    for r in schedule.resolutions:
        if r not in dataset.levels:
            raise DataError(f"dataset has no {r}px level (has {sorted(dataset.levels)})")
    if provider is None:
        provider = BatchProvider(dataset, schedule.batch_size, Rng(cfg.seed, "batches"))
    probe = np.arange(min(cfg.probe_size, len(dataset)))
    records = []
    for si, stage in enumerate(schedule.stages, start=1):
        gs = state.gs
        if si < gs.stage:
            continue
        if si > gs.stage:
            gs = grow(state.models.generator, state.models.discriminator, gs)
            if stage.fade_iterations == 0:
                gs.alpha = 1.0
            state.models.state = gs
        if gs.resolution != stage.resolution:
            raise ContractError(f"stage {si}: model at {gs.resolution}px, schedule wants "
                                f"{stage.resolution}px")
        while gs.iters_in_stage < stage.iterations:
            batch = provider.next(stage.resolution)
            rec = train_step(state, batch, cfg, stage.fade_iterations)
            if cfg.probe_interval and (rec.iteration + 1) % cfg.probe_interval == 0:
                rec.train_accuracy = pixel_accuracy(
                    state.models.generator, dataset.images[probe],
                    dataset.masks_at(stage.resolution)[probe], gs, cfg.threshold)
            if rec.iteration % cfg.log_interval == 0 or rec.train_accuracy is not None:
                records.append(rec)
                if sink is not None:
                    sink(rec)
            if on_checkpoint and checkpoint_interval and state.iteration % checkpoint_interval == 0:
                on_checkpoint(state, provider)
    return records


def ema(values, window: int = 100) -> np.ndarray:
    """Exponential moving average with span ``window`` (weight 2/(window+1))."""
    a = 2.0 / (window + 1)
    out = np.empty(len(values))
    acc = None
    for i, v in enumerate(values):
        acc = v if acc is None else a * v + (1 - a) * acc
        out[i] = acc
    return out


def stage_start_values(records, window: int = 100) -> list:
    """EMA of loss_G_l1 at the first record of every stage, in stage order."""
    smooth = ema([r.loss_G_l1 for r in records], window)
    starts, seen = [], set()
    for r, v in zip(records, smooth):
        if r.stage not in seen:
            seen.add(r.stage)
            starts.append(float(v))
    return starts


def fit(dataset: Dataset, arch: Architecture, schedule: Schedule, cfg: TrainConfig,
        sink=None, on_checkpoint=None, checkpoint_interval: int = 0):
    """Build models for ``cfg.mode`` and train them. Returns (TrainState, records).

    ``unet`` and ``gan`` collapse the schedule into one full-resolution stage
    with the same total iteration count; ``unet`` has no discriminator.
    """
    sched = schedule_for_mode(schedule, cfg.mode)
    state = init_state(architecture_for_mode(arch, cfg.mode, schedule), cfg)
    records = run_schedule(state, dataset, sched, cfg, sink, on_checkpoint=on_checkpoint,
                           checkpoint_interval=checkpoint_interval)
    return state, records
