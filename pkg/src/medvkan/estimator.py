"""scikit-learn style wrapper around the segmentation network."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import Sample
from .metrics import aggregate, sample_metrics
from .model import INPUT_MULTIPLE, ModelConfig
from .training import TrainConfig, predict_logits, train


def check_images(X, in_channels=None) -> np.ndarray:
    """Validate a batch of images and return it as float32 ``n×C×H×W``.

    A 3-D array is read as single-channel ``n×H×W``.
    """
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4:
        raise ValueError(f"expected images shaped n×C×H×W or n×H×W, got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("got zero images")
    if not np.issubdtype(X.dtype, np.number):
        raise ValueError(f"images must be numeric, got dtype {X.dtype}")
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain NaN or infinity")
    h, w = X.shape[2:]
    if h % INPUT_MULTIPLE or w % INPUT_MULTIPLE:
        raise ValueError(f"image size {h}x{w} is not a multiple of {INPUT_MULTIPLE}")
    if in_channels is not None and X.shape[1] != in_channels:
        raise ValueError(f"model expects {in_channels} channel(s), got {X.shape[1]}")
    return X.astype(np.float32, copy=False)


def check_masks(y, X) -> np.ndarray:
    """Validate integer label masks ``n×H×W`` against images ``X``."""
    y = np.asarray(y)
    if y.shape != (X.shape[0],) + X.shape[2:]:
        raise ValueError(f"masks of shape {y.shape} do not match images of shape {X.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.mod(y, 1) == 0):
            raise ValueError("masks must hold integer class labels")
    if y.min() < 0:
        raise ValueError("mask labels must be non-negative")
    return y.astype(np.int64)


class MedVKANSegmenter(BaseEstimator):
    """Hybrid conv / state-space / KAN U-shaped segmenter.

    Parameters
    ----------
    num_classes : int or None, default=None
        Number of classes including background.  ``None`` infers it from the
        masks passed to :meth:`fit`.
    stage_channels : sequence of int, default=(8, 16, 32, 64, 128)
        Widths of the five encoder stages.
    decoder_head_channels : int, default=24
        Width of the last decoder stage.
    d_state : int, default=4
        State size of each selective scan.
    cbam_reduction : int, default=4
        Channel-attention bottleneck ratio.
    efconv_mode : {"none", "conv3", "conv5", "conv3x2"}, default="conv3x2"
        Convolutions placed ahead of the token-wise KAN.
    deep_supervision : bool, default=True
        Train auxiliary heads at 1/2, 1/4 and 1/8 resolution.
    lr : float, default=2e-4
        Peak AdamW learning rate, annealed by a cosine to ``lr_min``.
    lr_min : float, default=1e-6
    weight_decay : float, default=0.05
    batch_size : int, default=4
    max_steps : int, default=300
        Number of optimizer steps performed by :meth:`fit`.
    random_state : int, default=0
        Seed for initialisation and batch order.

    Attributes
    ----------
    params_ : dict
        Trained parameter tree.
    config_ : ModelConfig
        Architecture actually used.
    history_ : list of dict
        Per-step loss and learning rate.
    classes_ : ndarray
        ``arange(num_classes)``.

    Examples
    --------
    >>> from medvkan.data import synth_dataset
    >>> data = synth_dataset(0, 4, 32, 2)
    >>> X = np.stack([s.image for s in data]); y = np.stack([s.label for s in data])
    >>> seg = MedVKANSegmenter(max_steps=2).fit(X, y)
    >>> seg.predict(X).shape
    (4, 32, 32)
    """

    def __init__(self, num_classes=None, stage_channels=(8, 16, 32, 64, 128), decoder_head_channels=24,
                 d_state=4, cbam_reduction=4, efconv_mode="conv3x2", deep_supervision=True, lr=2e-4,
                 lr_min=1e-6, weight_decay=0.05, batch_size=4, max_steps=300, random_state=0):
        self.num_classes = num_classes
        self.stage_channels = stage_channels
        self.decoder_head_channels = decoder_head_channels
        self.d_state = d_state
        self.cbam_reduction = cbam_reduction
        self.efconv_mode = efconv_mode
        self.deep_supervision = deep_supervision
        self.lr = lr
        self.lr_min = lr_min
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.max_steps = max_steps
        self.random_state = random_state

    def _model_config(self, in_channels, num_classes):
        return ModelConfig(
            in_channels=in_channels,
            num_classes=num_classes,
            stage_channels=list(self.stage_channels),
            decoder_head_channels=self.decoder_head_channels,
            d_state=self.d_state,
            cbam_reduction=self.cbam_reduction,
            efconv_mode=self.efconv_mode,
            deep_supervision=self.deep_supervision,
        )

    def fit(self, X, y):
        """Train from scratch on images ``X`` and label masks ``y``.

        Returns
        -------
        self : MedVKANSegmenter
        """
        X = check_images(X)
        y = check_masks(y, X)
        k = int(self.num_classes) if self.num_classes is not None else max(int(y.max()) + 1, 2)
        if y.max() >= k:
            raise ValueError(f"mask label {int(y.max())} exceeds num_classes={k}")
        config = self._model_config(X.shape[1], k)
        train_config = TrainConfig(lr0=self.lr, lr_min=self.lr_min, weight_decay=self.weight_decay,
                                   batch_size=self.batch_size, max_steps=self.max_steps,
                                   seed=self.random_state)
        samples = [Sample(img, lab.astype(np.uint8)) for img, lab in zip(X, y)]
        result = train(config, train_config, samples)
        self.params_ = result.params
        self.config_ = config
        self.history_ = result.history
        self.classes_ = np.arange(k)
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X) -> np.ndarray:
        """Per-pixel class probabilities, ``n×K×H×W``."""
        check_is_fitted(self, "params_")
        X = check_images(X, self.n_features_in_)
        logits = predict_logits(self.params_, self.config_, X, self.batch_size).astype(np.float64)
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        """Label masks ``n×H×W`` (argmax over classes)."""
        check_is_fitted(self, "params_")
        X = check_images(X, self.n_features_in_)
        return predict_logits(self.params_, self.config_, X, self.batch_size).argmax(axis=1)

    def score(self, X, y) -> float:
        """Mean foreground Dice of :meth:`predict` against ``y``."""
        pred = self.predict(X)
        y = check_masks(y, check_images(X))
        k = len(self.classes_)
        return aggregate([sample_metrics(p, g, k) for p, g in zip(pred, y)], k, 1.0).mean_foreground_dice
