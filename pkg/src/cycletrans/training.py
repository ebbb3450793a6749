"""Scratch training and fine-tuning loops.

Per iteration: one generator step on the weighted objective, then a
discriminator step for ``disc_x`` and one for ``disc_y`` on replayed fakes.
"""
from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch

from .data import UnpairedDataset, unpaired_sampler
from .losses import (
    DEFAULT_WEIGHTS,
    DivergenceError,
    LossWeights,
    combined_objective,
    cycle_loss,
    discriminator_loss,
    disparity_loss,
    generator_adversarial_loss,
)
from .models import TranslationModel, load_checkpoint, save_checkpoint

HISTORY_COLUMNS = (
    "iteration", "epoch", "adv_x", "adv_y", "cycle", "disparity",
    "gen_total", "disc_x_loss", "disc_y_loss", "lr",
)


@dataclass
class TrainConfig:
    epochs: int = 180
    freeze_disc_epochs: int = 10
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 1
    weights: LossWeights = DEFAULT_WEIGHTS
    seed: int = 0
    # "constant" or "linear" (lr -> 0 from decay_start to the end of the run)
    decay: str = "constant"
    decay_start: int = 0
    fake_pool_size: int = 50
    checkpoint_every: int = 10
    adversarial_mode: str = "log"
    deterministic: bool = False
    log_every: int = 50

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 <= self.freeze_disc_epochs < self.epochs:
            raise ValueError(f"freeze_disc_epochs ({self.freeze_disc_epochs}) must be in [0, epochs={self.epochs})")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.decay not in ("constant", "linear"):
            raise ValueError(f"unknown decay {self.decay!r}")
        if self.decay == "linear" and not 0 <= self.decay_start < self.epochs:
            raise ValueError("decay_start must lie in [0, epochs)")
        if self.adversarial_mode not in ("log", "lsgan"):
            raise ValueError(f"unknown adversarial_mode {self.adversarial_mode!r}")
        if self.fake_pool_size < 0 or self.checkpoint_every < 0:
            raise ValueError("fake_pool_size and checkpoint_every must be >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Learning rate for ``epoch``: constant, then linear towards 0 after ``decay_start``."""
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs})")
    if config.decay == "constant" or epoch < config.decay_start:
        return config.lr
    span = config.epochs - config.decay_start
    return config.lr * (1.0 - (epoch - config.decay_start) / span)


class FakePool:
    """Replay buffer of past generated images for discriminator updates."""

    def __init__(self, capacity: int, seed: int | np.random.SeedSequence | list = 0):
        self.capacity = capacity
        self.rng = np.random.default_rng(seed)
        self.images: list[torch.Tensor] = []

    def push_pop(self, new_fake: torch.Tensor) -> torch.Tensor:
        """Batch in, same-shape batch out; each image handled independently."""
        if self.capacity == 0:
            return new_fake
        out = []
        for img in new_fake.detach():
            img = img.unsqueeze(0)
            if len(self.images) < self.capacity:
                self.images.append(img.clone())
                out.append(img)
            elif self.rng.random() < 0.5:
                idx = int(self.rng.integers(self.capacity))
                out.append(self.images[idx].clone())
                self.images[idx] = img.clone()
            else:
                out.append(img)
        return torch.cat(out, dim=0)

    def state_dict(self) -> dict:
        return {"images": list(self.images), "rng": self.rng.bit_generator.state}

    def load_state_dict(self, state: dict) -> None:
        self.images = [t.clone() for t in state["images"]]
        self.rng.bit_generator.state = state["rng"]


@dataclass
class LossHistory:
    records: list[dict] = field(default_factory=list)
    epoch_lr: dict[int, float] = field(default_factory=dict)
    epoch_end_iteration: dict[int, int] = field(default_factory=dict)

    def __len__(self):
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.records], dtype=float)

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(HISTORY_COLUMNS)
            for r in self.records:
                w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in HISTORY_COLUMNS])
        return path

    @classmethod
    def from_csv(cls, path: str | Path) -> "LossHistory":
        hist = cls()
        with open(path, newline="") as f:
            reader = csv.DictReader(f)
            if tuple(reader.fieldnames or ()) != HISTORY_COLUMNS:
                raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")
            for row in reader:
                rec = {c: float(row[c]) for c in HISTORY_COLUMNS}
                rec["iteration"] = int(row["iteration"])
                rec["epoch"] = int(row["epoch"])
                hist.records.append(rec)
                hist.epoch_lr[rec["epoch"]] = rec["lr"]
                hist.epoch_end_iteration[rec["epoch"]] = rec["iteration"]
        return hist

    def state(self) -> dict:
        return {
            "records": [dict(r) for r in self.records],
            "epoch_lr": {str(k): v for k, v in self.epoch_lr.items()},
            "epoch_end_iteration": {str(k): v for k, v in self.epoch_end_iteration.items()},
        }

    @classmethod
    def from_state(cls, state: dict) -> "LossHistory":
        return cls(
            [dict(r) for r in state["records"]],
            {int(k): v for k, v in state["epoch_lr"].items()},
            {int(k): v for k, v in state["epoch_end_iteration"].items()},
        )


@dataclass
class TrainResult:
    model: TranslationModel
    history: LossHistory
    checkpoints: list[Path]


def configure_determinism(config: TrainConfig) -> None:
    torch.manual_seed(config.seed)
    if config.deterministic:
        torch.use_deterministic_algorithms(True)


def _batches(pairs: Iterable, batch_size: int, dtype: torch.dtype):
    xs, ys = [], []
    for x, y in pairs:
        xs.append(x.pixels)
        ys.append(y.pixels)
        if len(xs) == batch_size:
            yield _to_batch(xs, dtype), _to_batch(ys, dtype)
            xs, ys = [], []
    if xs:
        yield _to_batch(xs, dtype), _to_batch(ys, dtype)


def _to_batch(arrs, dtype) -> torch.Tensor:
    return torch.from_numpy(np.stack(arrs).astype(np.float64)).to(dtype).unsqueeze(1)


def _grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(p.grad.detach().pow(2).sum())
    return math.sqrt(total)


def _set_requires_grad(module, flag: bool) -> None:
    for p in module.parameters():
        p.requires_grad_(flag)


class Trainer:
    """Holds the model, four Adam optimizers, two fake pools and the history."""

    def __init__(self, model: TranslationModel, config: TrainConfig, phase: str = "scratch"):
        if phase not in ("scratch", "finetune"):
            raise ValueError(f"unknown phase {phase!r}")
        self.model = model
        self.config = config
        self.phase = phase
        betas = (config.beta1, config.beta2)
        self.opt = {
            name: torch.optim.Adam(getattr(model, name).parameters(), lr=config.lr, betas=betas)
            for name in ("gen_x_to_y", "gen_y_to_x", "disc_x", "disc_y")
        }
        ss = np.random.SeedSequence(config.seed)
        sx, sy = ss.spawn(2)
        self.pool_x = FakePool(config.fake_pool_size, sx)
        self.pool_y = FakePool(config.fake_pool_size, sy)
        self.history = LossHistory()
        self.next_epoch = 0
        self.iteration = 0

    @property
    def dtype(self) -> torch.dtype:
        return next(self.model.parameters()).dtype

    def discriminators_frozen(self, epoch: int) -> bool:
        return self.phase == "finetune" and epoch < self.config.freeze_disc_epochs

    def set_lr(self, lr: float) -> None:
        for opt in self.opt.values():
            for group in opt.param_groups:
                group["lr"] = lr

    def step(self, x: torch.Tensor, y: torch.Tensor, epoch: int, lr: float) -> dict:
        cfg, m = self.config, self.model
        mode = cfg.adversarial_mode
        frozen = self.discriminators_frozen(epoch)

        # generators
        _set_requires_grad(m.disc_x, False)
        _set_requires_grad(m.disc_y, False)
        fake_y = m.gen_x_to_y(x)
        fake_x = m.gen_y_to_x(y)
        rec_x = m.gen_y_to_x(fake_y)
        rec_y = m.gen_x_to_y(fake_x)
        adv_x = generator_adversarial_loss(m.disc_x(fake_x), mode)
        adv_y = generator_adversarial_loss(m.disc_y(fake_y), mode)
        cyc = cycle_loss(x, rec_x, y, rec_y)
        disp = disparity_loss(x, fake_y, y, fake_x)
        total, breakdown = combined_objective(adv_x, adv_y, cyc, disp, cfg.weights)
        self.opt["gen_x_to_y"].zero_grad(set_to_none=True)
        self.opt["gen_y_to_x"].zero_grad(set_to_none=True)
        total.backward()
        gen_grad = _grad_norm(m.generator_parameters())
        self.opt["gen_x_to_y"].step()
        self.opt["gen_y_to_x"].step()

        # discriminators, fixed order: disc_x then disc_y
        disc_losses = {}
        disc_grads = {}
        for name, real, fake, pool in (("disc_x", x, fake_x, self.pool_x), ("disc_y", y, fake_y, self.pool_y)):
            disc = getattr(m, name)
            replay = pool.push_pop(fake.detach())
            if frozen:
                with torch.no_grad():
                    loss = discriminator_loss(disc(real), disc(replay), mode)
                disc_grads[name] = 0.0
            else:
                _set_requires_grad(disc, True)
                loss = discriminator_loss(disc(real), disc(replay), mode)
                self.opt[name].zero_grad(set_to_none=True)
                loss.backward()
                disc_grads[name] = _grad_norm(disc.parameters())
                self.opt[name].step()
            value = float(loss.detach())
            if not math.isfinite(value):
                raise DivergenceError(f"{name}_loss", value, f"iteration {self.iteration + 1}")
            disc_losses[name] = value

        self.iteration += 1
        record = {
            "iteration": self.iteration,
            "epoch": epoch,
            "adv_x": breakdown.adv_x,
            "adv_y": breakdown.adv_y,
            "cycle": breakdown.cycle,
            "disparity": breakdown.disparity,
            "gen_total": breakdown.total,
            "disc_x_loss": disc_losses["disc_x"],
            "disc_y_loss": disc_losses["disc_y"],
            "lr": lr,
        }
        self.history.records.append(record)
        return {**record, "gen_grad_norm": gen_grad,
                "disc_x_grad_norm": disc_grads["disc_x"], "disc_y_grad_norm": disc_grads["disc_y"],
                "disc_frozen": frozen}

    def run_epoch(self, dataset: UnpairedDataset, epoch: int,
                  progress: Callable[[dict], None] | None = None) -> None:
        lr = lr_at(epoch, self.config)
        self.set_lr(lr)
        self.history.epoch_lr[epoch] = lr
        pairs = unpaired_sampler(dataset, self.config.seed, epoch)
        for x, y in _batches(pairs, self.config.batch_size, self.dtype):
            try:
                info = self.step(x, y, epoch, lr)
            except DivergenceError as exc:
                exc.iteration = self.iteration + 1
                exc.epoch = epoch
                raise
            if progress and self.config.log_every and info["iteration"] % self.config.log_every == 0:
                progress({"event": "iteration", "phase": self.phase, **info})
        self.history.epoch_end_iteration[epoch] = self.iteration
        if progress:
            last = self.history.records[-1]
            progress({"event": "epoch", "phase": self.phase, "epoch": epoch, "lr": lr,
                      "iteration": self.iteration, "gen_total": last["gen_total"],
                      "disc_x_loss": last["disc_x_loss"], "disc_y_loss": last["disc_y_loss"]})
        self.next_epoch = epoch + 1

    def state(self) -> dict:
        return {
            "phase": self.phase,
            "next_epoch": self.next_epoch,
            "iteration": self.iteration,
            "optimizers": {k: o.state_dict() for k, o in self.opt.items()},
            "pool_x": self.pool_x.state_dict(),
            "pool_y": self.pool_y.state_dict(),
            "history": self.history.state(),
        }

    def load_state(self, state: dict) -> None:
        self.phase = state["phase"]
        self.next_epoch = state["next_epoch"]
        self.iteration = state["iteration"]
        for k, o in self.opt.items():
            o.load_state_dict(state["optimizers"][k])
        self.pool_x.load_state_dict(state["pool_x"])
        self.pool_y.load_state_dict(state["pool_y"])
        self.history = LossHistory.from_state(state["history"])

    def save(self, path: str | Path) -> Path:
        return save_checkpoint(path, self.model, self.config.to_dict(), self.state())

    def fit(self, dataset: UnpairedDataset, checkpoint_dir: str | Path | None = None,
            progress: Callable[[dict], None] | None = None) -> TrainResult:
        """Run epochs ``next_epoch .. config.epochs - 1``; checkpoint periodically and at the end."""
        if not dataset.domain_x or not dataset.domain_y:
            raise ValueError("training dataset needs both domains non-empty")
        checkpoints: list[Path] = []
        ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
        last_ckpt = None
        every = self.config.checkpoint_every
        for epoch in range(self.next_epoch, self.config.epochs):
            try:
                self.run_epoch(dataset, epoch, progress)
            except DivergenceError as exc:
                exc.last_checkpoint = last_ckpt
                raise
            if ckpt_dir is not None and every and (epoch + 1) % every == 0 and epoch + 1 < self.config.epochs:
                last_ckpt = self.save(ckpt_dir / f"{self.phase}_epoch{epoch + 1:04d}.pt")
                checkpoints.append(last_ckpt)
        for name in ("disc_x", "disc_y"):
            _set_requires_grad(getattr(self.model, name), True)
        if ckpt_dir is not None:
            checkpoints.append(self.save(ckpt_dir / f"{self.phase}_final.pt"))
        return TrainResult(self.model, self.history, checkpoints)


def train_from_scratch(model: TranslationModel, dataset: UnpairedDataset, config: TrainConfig,
                       checkpoint_dir: str | Path | None = None,
                       progress: Callable[[dict], None] | None = None) -> TrainResult:
    configure_determinism(config)
    return Trainer(model, config, "scratch").fit(dataset, checkpoint_dir, progress)


def resume_training(checkpoint: str | Path, dataset: UnpairedDataset,
                    checkpoint_dir: str | Path | None = None,
                    progress: Callable[[dict], None] | None = None,
                    epochs: int | None = None) -> TrainResult:
    """Continue a run from a checkpoint written by ``Trainer.save``."""
    model, payload = load_checkpoint(checkpoint)
    state = payload.get("state") or {}
    if "optimizers" not in state:
        raise ValueError(f"{checkpoint} carries no resumable training state")
    cfg_dict = dict(payload["train_config"])
    if epochs is not None:
        cfg_dict["epochs"] = epochs
    config = TrainConfig.from_dict(cfg_dict)
    configure_determinism(config)
    trainer = Trainer(model, config, state["phase"])
    trainer.load_state(state)
    return trainer.fit(dataset, checkpoint_dir, progress)


def fine_tune(checkpoint: str | Path | TranslationModel, dataset_target: UnpairedDataset, config: TrainConfig,
              checkpoint_dir: str | Path | None = None,
              progress: Callable[[dict], None] | None = None) -> TrainResult:
    """Continue from pretrained weights with fresh optimizers.

    Discriminators are not updated during the first ``freeze_disc_epochs``
    epochs; the learning rate follows ``config``'s schedule.
    """
    if isinstance(checkpoint, TranslationModel):
        model = checkpoint
    else:
        model, _ = load_checkpoint(checkpoint)
    configure_determinism(config)
    return Trainer(model, config, "finetune").fit(dataset_target, checkpoint_dir, progress)
