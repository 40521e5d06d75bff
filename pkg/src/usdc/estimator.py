"""scikit-learn compatible classifier wrapping the full two-stage pipeline."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .autograd import softmax, Tensor
from .trainer import TrainConfig, run_pipeline
from .vit import ViTConfig


class USDCClassifier(ClassifierMixin, BaseEstimator):
    """Compressed ViT classifier.

    ``X`` is ``[n, channels, size, size]`` or flattened ``[n, channels*size*size]``
    (square images only). ``fit`` runs search, pruning and fine-tuning;
    ``predict`` uses batch-level gates over chunks of ``inference_batch_size``.
    """

    def __init__(
        self,
        layers: int = 4,
        heads: int = 4,
        embed_dim: int = 32,
        ffn_hidden: int = 64,
        patch_size: int = 4,
        f_t: float = 0.65,
        gamma: float = 100.0,
        lr: float = 5e-4,
        arch_lr: float = 0.02,
        weight_decay: float = 0.05,
        epochs_pretrain: int = 0,
        epochs_stage1: int = 30,
        epochs_stage2: int = 20,
        batch_size: int = 64,
        gate_strategy: str = "group",
        noise_anneal: float = 0.7,
        static_harden: float = 0.5,
        gate_exec_bias: float = 3.0,
        use_static: bool = True,
        use_dynamic: bool = True,
        inference_batch_size: int = 64,
        random_state: int = 0,
    ):
        self.layers = layers
        self.heads = heads
        self.embed_dim = embed_dim
        self.ffn_hidden = ffn_hidden
        self.patch_size = patch_size
        self.f_t = f_t
        self.gamma = gamma
        self.lr = lr
        self.arch_lr = arch_lr
        self.weight_decay = weight_decay
        self.epochs_pretrain = epochs_pretrain
        self.epochs_stage1 = epochs_stage1
        self.epochs_stage2 = epochs_stage2
        self.batch_size = batch_size
        self.gate_strategy = gate_strategy
        self.noise_anneal = noise_anneal
        self.static_harden = static_harden
        self.gate_exec_bias = gate_exec_bias
        self.use_static = use_static
        self.use_dynamic = use_dynamic
        self.inference_batch_size = inference_batch_size
        self.random_state = random_state

    def _images(self, X, fitting: bool) -> np.ndarray:
        X = np.asarray(X)
        if X.ndim == 2:
            if fitting:
                side = int(round(np.sqrt(X.shape[1])))
                if side * side != X.shape[1]:
                    raise ValueError(f"cannot reshape {X.shape[1]} features into a square single-channel image")
                self.image_shape_ = (1, side, side)
            if X.shape[1] != int(np.prod(self.image_shape_)):
                raise ValueError(f"expected {int(np.prod(self.image_shape_))} features, got {X.shape[1]}")
            return X.reshape((-1,) + self.image_shape_).astype(np.float32)
        if X.ndim == 3:
            X = X[:, None]
        if X.ndim != 4 or X.shape[2] != X.shape[3]:
            raise ValueError(f"expected images [n, channels, size, size], got shape {X.shape}")
        if fitting:
            self.image_shape_ = tuple(X.shape[1:])
        elif tuple(X.shape[1:]) != self.image_shape_:
            raise ValueError(f"image shape {X.shape[1:]} differs from training shape {self.image_shape_}")
        return X.astype(np.float32)

    def fit(self, X, y):
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float32)
        check_classification_targets(y)
        images = self._images(X, fitting=True)
        self.classes_, labels = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        channels, size, _ = self.image_shape_
        vit = ViTConfig(
            layers=self.layers, heads=self.heads, embed_dim=self.embed_dim, ffn_hidden=self.ffn_hidden,
            image_size=size, patch_size=self.patch_size, num_classes=len(self.classes_), channels=channels,
        )
        cfg = TrainConfig(
            gamma=self.gamma, f_t=self.f_t, lr=self.lr, arch_lr=self.arch_lr, weight_decay=self.weight_decay,
            epochs_pretrain=self.epochs_pretrain, epochs_stage1=self.epochs_stage1, epochs_stage2=self.epochs_stage2,
            batch_size=self.batch_size, gate_strategy=self.gate_strategy, noise_anneal=self.noise_anneal,
            static_harden=self.static_harden, gate_exec_bias=self.gate_exec_bias,
            use_static=self.use_static, use_dynamic=self.use_dynamic,
            seed=self.random_state,
        )
        self.model_, self.train_log_, self.summary_ = run_pipeline(vit, cfg, (images, labels.astype(np.int64)))
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_array(X, allow_nd=True, dtype=np.float32)
        return self.model_.predict_logits(self._images(X, fitting=False), self.inference_batch_size)

    def predict_proba(self, X) -> np.ndarray:
        return softmax(Tensor(self.decision_function(X)), axis=-1).data

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]
