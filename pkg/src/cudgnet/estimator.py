"""scikit-learn style wrappers: the full classifier and the transformation component."""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import data as data_mod
from ._validation import check_images, check_targets
from .training import TrainConfig, Trainer
from .transform import FractalBank, TCConfig, apply_tc_batch
from .uncertainty import calibrate_sigma_S, single_pass_uncertainty


def _dataset(X01, y):
    return data_mod.ImageArrayDataset(np.moveaxis(X01, 1, -1), y)


class CUDGNetClassifier(ClassifierMixin, BaseEstimator):
    """Single-source domain-generalising image classifier.

    Wraps the adversarial training loop behind ``fit``/``predict``. ``X`` is an
    image batch (uint8 or [0, 1] floats, channels-first or -last); labels may be
    any hashable values. After fitting, ``domain_uncertainty`` scores how far a
    new batch sits from the training domain.
    """

    def __init__(self, epochs=20, batch_size=128, lr_M=0.1, lr_G=1e-3, beta=1.0, w1=0.1, K=2,
                 temperature=0.1, c=0.1, k_max=2, depth=16, widen_factor=4, proj_dim=128,
                 tap_stage="after_block1", use_generator=True, use_tc=True, use_style=True,
                 use_contrastive=True, random_state=0, device="cpu"):
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_M = lr_M
        self.lr_G = lr_G
        self.beta = beta
        self.w1 = w1
        self.K = K
        self.temperature = temperature
        self.c = c
        self.k_max = k_max
        self.depth = depth
        self.widen_factor = widen_factor
        self.proj_dim = proj_dim
        self.tap_stage = tap_stage
        self.use_generator = use_generator
        self.use_tc = use_tc
        self.use_style = use_style
        self.use_contrastive = use_contrastive
        self.random_state = random_state
        self.device = device

    def _train_config(self, n_classes):
        params = self.get_params()
        seed = params.pop("random_state")
        return TrainConfig(seed=0 if seed is None else int(seed), num_classes=n_classes, **params)

    def fit(self, X, y):
        X01 = check_images(X)
        y = check_targets(y, len(X01))
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        self.config_ = self._train_config(len(self.classes_))
        self.trainer_ = Trainer(self.config_, _dataset(X01, y_idx))
        self.history_ = self.trainer_.fit()
        self.model_ = self.trainer_.model.eval()
        self.sigma_S_ref_ = calibrate_sigma_S(self.model_, _dataset(X01, y_idx), device=self.device)
        self.n_features_in_ = int(np.prod(X01.shape[1:]))
        return self

    @torch.no_grad()
    def _logits(self, X):
        check_is_fitted(self, "model_")
        X01 = check_images(X)
        self.model_.eval()
        out = []
        for start in range(0, len(X01), 500):
            x = data_mod.normalize(torch.from_numpy(X01[start:start + 500])).to(self.device)
            out.append(self.model_(x).logits.cpu())
        return torch.cat(out)

    def predict_proba(self, X):
        return torch.softmax(self._logits(X), dim=1).numpy()

    def predict(self, X):
        idx = self._logits(X).argmax(1).numpy()
        return self.classes_[idx]

    def domain_uncertainty(self, X):
        """Relative sigma increase of the batch ``X`` over the training domain."""
        check_is_fitted(self, "model_")
        X01 = check_images(X)
        x = data_mod.normalize(torch.from_numpy(X01)).to(self.device)
        return single_pass_uncertainty(self.model_, x, self.sigma_S_ref_, self.device)


class TransformationComponent(TransformerMixin, BaseEstimator):
    """Fractal/affine image mixing as a stateless transformer.

    ``fit`` renders (or loads) the fractal bank at the images' size;
    ``transform`` returns float ``(N, C, H, W)`` images in ``[0, 1]``.
    """

    def __init__(self, k_max=2, rotation_deg=20.0, translate_frac=0.125, contrast_jitter=0.4,
                 n_fractals=64, fractal_seed=0, fractal_dir=None, random_state=None):
        self.k_max = k_max
        self.rotation_deg = rotation_deg
        self.translate_frac = translate_frac
        self.contrast_jitter = contrast_jitter
        self.n_fractals = n_fractals
        self.fractal_seed = fractal_seed
        self.fractal_dir = fractal_dir
        self.random_state = random_state

    def fit(self, X, y=None):
        X01 = check_images(X)
        self.config_ = TCConfig(k_max=self.k_max, rotation_deg=self.rotation_deg,
                                translate_frac=self.translate_frac, contrast_jitter=self.contrast_jitter,
                                n_fractals=self.n_fractals, fractal_seed=self.fractal_seed,
                                fractal_dir=self.fractal_dir)
        if self.fractal_dir is not None:
            self.bank_ = FractalBank.from_directory(self.fractal_dir)
        else:
            self.bank_ = FractalBank.render(X01.shape[-2:], self.n_fractals, self.fractal_seed)
        if tuple(self.bank_.shape) != X01.shape[1:]:
            raise ValueError(f"fractal bank shape {tuple(self.bank_.shape)} does not match images {X01.shape[1:]}")
        self._rng = np.random.default_rng(self.random_state)
        self.n_features_in_ = int(np.prod(X01.shape[1:]))
        return self

    def transform(self, X):
        check_is_fitted(self, "bank_")
        return apply_tc_batch(check_images(X), self.config_, self._rng, self.bank_)
