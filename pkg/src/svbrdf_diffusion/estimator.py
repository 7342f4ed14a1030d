"""scikit-learn style wrappers around the encoding, tiling and diffusion model."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .dataset import make_latent
from .svbrdf import decode, encode, tile
from .trainer import TrainConfig, TrainingData, load_training_checkpoint, sample_maps, train
from .unet import UNetConfig, load_checkpoint
from .validation import check_encoded, check_is_fitted_params, check_maps_list, check_prompts

__all__ = ["SvbrdfEncoder", "SeamlessTiler", "SvbrdfDiffusion"]


class SvbrdfEncoder(TransformerMixin, BaseEstimator):
    """Stateless map <-> ``[-1, 1]`` tensor codec."""

    def fit(self, X, y=None):
        check_maps_list(X)
        return self

    def transform(self, X) -> np.ndarray:
        return np.stack([encode(m) for m in check_maps_list(X)])

    def inverse_transform(self, X) -> list:
        return [decode(x) for x in check_encoded(X)]


class SeamlessTiler(TransformerMixin, BaseEstimator):
    def fit(self, X, y=None):
        check_maps_list(X)
        return self

    def transform(self, X) -> list:
        return [tile(m) for m in check_maps_list(X)]


class SvbrdfDiffusion(BaseEstimator):
    """Prompt-conditioned SVBRDF generator.

    ``fit`` takes a dataset directory (or a :class:`TrainingData`) and trains
    from scratch; ``predict`` returns one material per prompt.
    """

    def __init__(self, base_resolution=32, level_channels=(32, 64, 128), batch_size=16, total_steps=5000,
                 learning_rate=2e-4, cond_dropout_prob=0.1, latent_dropout_prob=0.5, checkpoint_every=500,
                 sample_steps=50, random_state=0, out_dir="run"):
        self.base_resolution = base_resolution
        self.level_channels = level_channels
        self.batch_size = batch_size
        self.total_steps = total_steps
        self.learning_rate = learning_rate
        self.cond_dropout_prob = cond_dropout_prob
        self.latent_dropout_prob = latent_dropout_prob
        self.checkpoint_every = checkpoint_every
        self.sample_steps = sample_steps
        self.random_state = random_state
        self.out_dir = out_dir

    def _config(self, dataset) -> TrainConfig:
        return TrainConfig(
            dataset=str(dataset),
            out_dir=str(self.out_dir),
            unet=UNetConfig(self.base_resolution, tuple(self.level_channels)),
            batch_size=self.batch_size,
            total_steps=self.total_steps,
            learning_rate=self.learning_rate,
            cond_dropout_prob=self.cond_dropout_prob,
            latent_dropout_prob=self.latent_dropout_prob,
            checkpoint_every=self.checkpoint_every,
            seed=int(self.random_state),
        )

    def fit(self, X, y=None):
        data = X if isinstance(X, TrainingData) else None
        cfg = self._config("<memory>" if data is not None else X)
        final, log = train(cfg, data=data)
        self.params_, _ = load_training_checkpoint(final, cfg)
        self.checkpoint_ = Path(final)
        self.loss_curve_ = log.losses
        return self

    @classmethod
    def load(cls, checkpoint, **kw) -> "SvbrdfDiffusion":
        params, _ = load_checkpoint(checkpoint)
        est = cls(base_resolution=params.config.base_resolution,
                  level_channels=params.config.level_channels, **kw)
        est.params_ = params
        est.checkpoint_ = Path(checkpoint)
        return est

    def sample(self, prompt, count: int = 1, seed: int = 0, latent_from=None) -> list:
        """``count`` materials for one prompt with seeds ``seed .. seed + count - 1``."""
        check_is_fitted_params(self)
        spec = check_prompts(prompt)[0]
        latent = None
        if latent_from is not None:
            latent = make_latent(check_maps_list(latent_from)[0], self.params_.config.latent_channels)
        cond = spec.condition(latent)
        return sample_maps(self.params_, [cond] * count, [seed + i for i in range(count)], self.sample_steps)

    def predict(self, prompts, seed: int = 0) -> list:
        """One material per prompt; prompt ``i`` uses seed ``seed + i``."""
        check_is_fitted_params(self)
        specs = check_prompts(prompts)
        conds = [s.condition() for s in specs]
        return sample_maps(self.params_, conds, [seed + i for i in range(len(specs))], self.sample_steps)
