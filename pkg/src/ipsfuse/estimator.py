"""scikit-learn style front ends.

``PixelShuffler`` is a stateless transformer that turns sharp images into
shuffled training triples. ``IPSFusion`` trains the fusion network on a set
of single images and fuses pairs of source images.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import metrics
from ._validation import check_images, check_pairs, stack_if_uniform
from .autodiff import no_grad
from .network import ModelConfig, forward, init_model
from .shuffle import ShuffleConfig, synthesize
from .trainer import TrainConfig, Trainer, load_model, save_model

__all__ = ["PixelShuffler", "IPSFusion"]


class PixelShuffler(TransformerMixin, BaseEstimator):
    """Make ``(shuffled_f, shuffled_d, target)`` triples from sharp images.

    ``transform`` returns an array of shape (n, 3, H, W, J) when all images
    share a shape, otherwise a list of (3, H, W, J) arrays.
    """

    def __init__(self, mask_zero_probability=0.5, filter_kind="mean", kernel_range=(3, 31),
                 swap=False, random_state=None):
        self.mask_zero_probability = mask_zero_probability
        self.filter_kind = filter_kind
        self.kernel_range = kernel_range
        self.swap = swap
        self.random_state = random_state

    def _config(self) -> ShuffleConfig:
        return ShuffleConfig(self.mask_zero_probability, self.filter_kind, tuple(self.kernel_range), self.swap).validate()

    def fit(self, X=None, y=None):
        self.config_ = self._config()
        return self

    def transform(self, X):
        check_is_fitted(self, "config_")
        rng = np.random.default_rng(self.random_state)
        out = []
        for img in check_images(X):
            s = synthesize(img, self.config_, rng)
            out.append(np.stack([s.shuffled_f, s.shuffled_d, s.target]))
        return stack_if_uniform(out)


class IPSFusion(BaseEstimator):
    """Multi-focus fusion network trained from single sharp images.

    ``fit(X)`` takes sharp images; ``predict(X)`` takes pairs of source
    images and returns fused images in [0, 1]. Hyperparameters mirror
    :class:`ModelConfig` and :class:`TrainConfig`.
    """

    def __init__(self, base_channels=16, local_blocks=3, global_blocks=4, ssm_state_size=8,
                 mlp_expansion=2, scan_order="bidirectional_row_major", total_iters=20_000,
                 batch_size=1, base_lr=1e-4, decay_start=0.5, crop_size=64,
                 mask_zero_probability=0.5, filter_kind="mean", kernel_range=(3, 31),
                 dtype="float32", random_state=0):
        self.base_channels = base_channels
        self.local_blocks = local_blocks
        self.global_blocks = global_blocks
        self.ssm_state_size = ssm_state_size
        self.mlp_expansion = mlp_expansion
        self.scan_order = scan_order
        self.total_iters = total_iters
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.decay_start = decay_start
        self.crop_size = crop_size
        self.mask_zero_probability = mask_zero_probability
        self.filter_kind = filter_kind
        self.kernel_range = kernel_range
        self.dtype = dtype
        self.random_state = random_state

    def _configs(self, channels: int) -> tuple[ModelConfig, TrainConfig]:
        seed = 0 if self.random_state is None else int(self.random_state)
        model_cfg = ModelConfig(
            image_channels=channels,
            base_channels=self.base_channels,
            local_blocks=self.local_blocks,
            global_blocks=self.global_blocks,
            ssm_state_size=self.ssm_state_size,
            mlp_expansion=self.mlp_expansion,
            scan_order=self.scan_order,
            dtype=self.dtype,
        ).validate()
        shuffle_cfg = ShuffleConfig(self.mask_zero_probability, self.filter_kind, tuple(self.kernel_range), True, seed)
        train_cfg = TrainConfig(
            total_iters=self.total_iters,
            batch_size=self.batch_size,
            base_lr=self.base_lr,
            decay_start=self.decay_start,
            crop_size=self.crop_size,
            shuffle=shuffle_cfg,
            rng_seed=seed,
        ).validate()
        return model_cfg, train_cfg

    def fit(self, X, y=None, callback=None):
        imgs = check_images(X)
        small = [i.shape for i in imgs if min(i.shape[:2]) < self.crop_size]
        if small:
            raise ValueError(f"images smaller than crop_size={self.crop_size}: {small}")
        model_cfg, train_cfg = self._configs(imgs[0].shape[2])
        model = init_model(model_cfg, train_cfg.rng_seed)
        trainer = Trainer(model, train_cfg)
        self.loss_curve_ = trainer.run(imgs, callback=callback)
        self.model_ = model
        self.n_iter_ = trainer.iteration
        self.n_features_in_ = imgs[0].shape[2]
        return self

    def fuse(self, a, b) -> np.ndarray:
        check_is_fitted(self, "model_")
        ((a, b),) = check_pairs([(a, b)])
        with no_grad():
            return forward(self.model_, a, b).data[0].astype(np.float64)

    def predict(self, X):
        check_is_fitted(self, "model_")
        return stack_if_uniform([self.fuse(a, b) for a, b in check_pairs(X)])

    def score(self, X, y) -> float:
        """Mean PSNR (dB) of the fused outputs against reference images ``y``."""
        fused = self.predict(X)
        refs = check_images(y)
        return float(np.mean([metrics.psnr(f, r) for f, r in zip(fused, refs)]))

    def save(self, path) -> None:
        check_is_fitted(self, "model_")
        save_model(path, self.model_, iteration=self.n_iter_)

    @classmethod
    def load(cls, path) -> "IPSFusion":
        model, ck = load_model(path)
        c = model.cfg
        est = cls(base_channels=c.base_channels, local_blocks=c.local_blocks, global_blocks=c.global_blocks,
                  ssm_state_size=c.ssm_state_size, mlp_expansion=c.mlp_expansion, scan_order=c.scan_order,
                  dtype=c.dtype)
        est.model_ = model
        est.n_iter_ = int(ck["iteration"])
        est.n_features_in_ = c.image_channels
        return est
