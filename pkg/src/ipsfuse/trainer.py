"""Desk-scale training loop: crop, shuffle, fuse, L1 loss, Adam update.

Every iteration draws its randomness from a generator seeded with
``(rng_seed, iteration)``, so a run resumed from a checkpoint replays exactly
the batches an uninterrupted run would have seen.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .autodiff import NonFiniteError
from .checkpoint import load_checkpoint, save_checkpoint
from .imageio import IMAGE_SUFFIXES, ImageFormatError, read_image
from .network import FusionNet, ModelConfig, forward, init_model, l1_loss
from .shuffle import ShuffleConfig, make_training_sample

__all__ = [
    "TrainConfig",
    "Adam",
    "TrainingDivergedError",
    "lr_at",
    "iteration_rng",
    "sample_batch",
    "train_step",
    "Trainer",
    "load_corpus",
    "run_training",
    "save_model",
    "load_model",
]

log = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    total_iters: int = 20_000
    batch_size: int = 1
    base_lr: float = 1e-4
    decay_start: float = 0.5
    crop_size: int = 64
    shuffle: ShuffleConfig = field(default_factory=ShuffleConfig)
    checkpoint_interval: int = 5_000
    rng_seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self) -> "TrainConfig":
        if self.total_iters < 1 or self.batch_size < 1:
            raise ValueError("total_iters and batch_size must be >= 1")
        if not 0.0 < self.decay_start <= 1.0:
            raise ValueError(f"decay_start must lie in (0, 1], got {self.decay_start}")
        if self.base_lr <= 0 or self.crop_size < 3:
            raise ValueError("base_lr must be positive and crop_size >= 3")
        if self.checkpoint_interval < 1:
            raise ValueError("checkpoint_interval must be >= 1")
        self.shuffle.validate()
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        d = {k: v for k, v in d.items() if k in known}
        if isinstance(d.get("shuffle"), dict):
            d["shuffle"] = ShuffleConfig(**d["shuffle"])
        return cls(**d).validate()


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    """Constant ``base_lr`` up to ``decay_start * total``, then linear to zero at ``total``."""
    total = cfg.total_iters
    if not 0 <= iteration < total:
        raise ValueError(f"iteration {iteration} outside [0, {total})")
    start = cfg.decay_start * total
    if iteration < start:
        return cfg.base_lr
    return cfg.base_lr * (1.0 - (iteration - start) / (total - start))


class Adam:
    """Adaptive-moment optimizer over a model's named parameters."""

    def __init__(self, params: dict, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.step_count = 0

    def step(self, lr: float) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.data.dtype, copy=False)

    def state(self) -> dict:
        return {"step": self.step_count, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}


def iteration_rng(seed: int, iteration: int) -> np.random.Generator:
    return np.random.default_rng([seed, iteration])


def _random_crop(img: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    h, w = img.shape[:2]
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return img[top : top + size, left : left + size]


def sample_batch(images: list[np.ndarray], cfg: TrainConfig, iteration: int):
    """Shuffled inputs and targets for one iteration, each (B, crop, crop, J)."""
    rng = iteration_rng(cfg.rng_seed, iteration)
    a, b, t = [], [], []
    for _ in range(cfg.batch_size):
        img = images[int(rng.integers(len(images)))]
        crop = _random_crop(img, cfg.crop_size, rng)
        fa, fb, target = make_training_sample(crop, cfg.shuffle, rng)
        a.append(fa)
        b.append(fb)
        t.append(target)
    return np.stack(a), np.stack(b), np.stack(t)


def train_step(model: FusionNet, opt: Adam, batch, lr: float, iteration: int = -1) -> float:
    """One forward/backward/update; returns the pre-update loss."""
    a, b, target = batch
    try:
        loss = l1_loss(forward(model, a, b), target)
        value = loss.item()
        if not math.isfinite(value):
            raise NonFiniteError(f"loss is {value}")
        model.zero_grad()
        loss.backward()
    except NonFiniteError as exc:
        raise TrainingDivergedError(f"non-finite values at iteration {iteration} (lr={lr:g}): {exc}") from exc
    opt.step(lr)
    return value


# ------------------------------------------------------------ persistence

def save_model(path, model: FusionNet, opt: Adam | None = None, iteration: int = 0,
               train_config: TrainConfig | None = None) -> Path:
    groups = {"param": {k: p.data for k, p in model.params.items()}}
    if opt is not None:
        groups["adam_m"] = opt.m
        groups["adam_v"] = opt.v
    return save_checkpoint(
        path,
        model_config=model.cfg.to_dict(),
        train_config=train_config.to_dict() if train_config is not None else None,
        tensors=groups,
        iteration=iteration,
        optimizer=opt.state() if opt is not None else None,
    )


def load_model(path) -> tuple[FusionNet, dict]:
    """Rebuild a model from a checkpoint; the second item is the raw header."""
    ck = load_checkpoint(path)
    cfg = ModelConfig.from_dict(ck["model_config"])
    model = init_model(cfg, 0)
    stored = ck["arrays"].get("param", {})
    missing = set(model.params) - set(stored)
    if missing:
        raise ValueError(f"{path}: checkpoint lacks parameters {sorted(missing)}")
    for name, p in model.params.items():
        arr = stored[name]
        if arr.shape != p.shape:
            raise ValueError(f"{path}: parameter {name} has shape {arr.shape}, config implies {p.shape}")
        p.data = arr.astype(p.dtype).copy()
    return model, ck


# ------------------------------------------------------------------ loops

class Trainer:
    """Owns a model, its optimizer and the iteration counter for in-memory images."""

    def __init__(self, model: FusionNet, cfg: TrainConfig, iteration: int = 0):
        self.model = model
        self.cfg = cfg.validate()
        self.opt = Adam(model.params, cfg.beta1, cfg.beta2, cfg.eps)
        self.iteration = iteration

    def load_optimizer(self, ck: dict) -> None:
        state = ck.get("optimizer") or {}
        arrays = ck["arrays"]
        if "adam_m" in arrays:
            for k in self.opt.m:
                self.opt.m[k] = arrays["adam_m"][k].astype(self.opt.m[k].dtype).copy()
                self.opt.v[k] = arrays["adam_v"][k].astype(self.opt.v[k].dtype).copy()
        self.opt.step_count = int(state.get("step", 0))

    def step(self, images: list[np.ndarray]) -> tuple[int, float, float]:
        it = self.iteration
        lr = lr_at(it, self.cfg)
        loss = train_step(self.model, self.opt, sample_batch(images, self.cfg, it), lr, it)
        self.iteration += 1
        return it, lr, loss

    def run(self, images: list[np.ndarray], until: int | None = None, callback=None) -> list[float]:
        until = self.cfg.total_iters if until is None else min(until, self.cfg.total_iters)
        losses = []
        while self.iteration < until:
            it, lr, loss = self.step(images)
            losses.append(loss)
            if callback is not None:
                callback(it, lr, loss)
        return losses


def load_corpus(corpus_dir, min_size: int = 1) -> list[np.ndarray]:
    """Read every PGM/PPM under ``corpus_dir`` (sorted by name).

    Unreadable or too-small files are skipped with a warning; mixed gray and
    color corpora are promoted to three channels.
    """
    corpus_dir = Path(corpus_dir)
    if not corpus_dir.is_dir():
        raise FileNotFoundError(f"corpus directory not found: {corpus_dir}")
    paths = sorted(p for p in corpus_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not paths:
        raise ValueError(f"no PGM/PPM images in {corpus_dir}")
    images = []
    for p in paths:
        try:
            img = read_image(p)
        except (ImageFormatError, OSError) as exc:
            log.warning("skipping %s: %s", p.name, exc)
            continue
        if min(img.shape[:2]) < min_size:
            log.warning("skipping %s: %dx%d is smaller than crop %d", p.name, img.shape[0], img.shape[1], min_size)
            continue
        images.append(img)
    if not images:
        raise ValueError(f"none of the {len(paths)} images in {corpus_dir} is usable")
    if any(img.shape[2] == 3 for img in images):
        images = [np.repeat(img, 3, axis=2) if img.shape[2] == 1 else img for img in images]
    return images


def _truncate_log(path: Path, lines: int) -> None:
    if not path.exists():
        return
    kept = path.read_text(encoding="utf-8").splitlines(keepends=True)[:lines]
    path.write_text("".join(kept), encoding="utf-8")


def run_training(corpus_dir, out_dir, cfg: TrainConfig, model_cfg: ModelConfig | None = None,
                 resume=None, stop_after: int | None = None) -> tuple[Path, Path]:
    """Train on a folder of images; writes checkpoints and ``loss.log`` to ``out_dir``.

    ``stop_after`` ends the run early (after that many total iterations)
    without writing the final checkpoint, which is how an interruption is
    simulated. Returns ``(final_checkpoint_path, loss_log_path)``.
    """
    cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    images = load_corpus(corpus_dir, min_size=cfg.crop_size)
    log_path = out_dir / "loss.log"

    if resume is not None:
        model, ck = load_model(resume)
        trainer = Trainer(model, cfg, iteration=int(ck["iteration"]))
        trainer.load_optimizer(ck)
        _truncate_log(log_path, trainer.iteration)
        log.info("resumed from %s at iteration %d", resume, trainer.iteration)
    else:
        model_cfg = replace(model_cfg or ModelConfig(), image_channels=images[0].shape[2])
        model = init_model(model_cfg, cfg.rng_seed)
        trainer = Trainer(model, cfg)
        log_path.write_text("", encoding="utf-8")
    if model.cfg.image_channels != images[0].shape[2]:
        raise ValueError(f"model expects {model.cfg.image_channels} channel(s), corpus has {images[0].shape[2]}")
    log.info("training %d parameters on %d images", model.parameter_count(), len(images))

    until = cfg.total_iters if stop_after is None else min(stop_after, cfg.total_iters)
    with open(log_path, "a", encoding="utf-8") as fh:
        def record(it, lr, loss):
            fh.write(f"{it}\t{lr!r}\t{loss!r}\n")
            done = it + 1
            if done % cfg.checkpoint_interval == 0 and done < cfg.total_iters:
                fh.flush()
                save_model(out_dir / f"ckpt_{done:07d}.ipsf", model, trainer.opt, done, cfg)
            if done % 500 == 0:
                log.info("iter %d lr %.3g loss %.5f", done, lr, loss)

        trainer.run(images, until=until, callback=record)

    final = out_dir / "final.ipsf"
    if trainer.iteration >= cfg.total_iters:
        save_model(final, model, trainer.opt, trainer.iteration, cfg)
    return final, log_path


def read_loss_log(path) -> np.ndarray:
    """Parse ``loss.log`` into an (n, 3) array of iteration, lr, loss."""
    rows = [line.split("\t") for line in Path(path).read_text(encoding="utf-8").splitlines() if line]
    return np.array([[float(c) for c in r] for r in rows]) if rows else np.zeros((0, 3))
