"""scikit-learn style wrappers around pretraining, retrieval and the task heads."""
from __future__ import annotations

from dataclasses import fields
from typing import Optional

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .config import Config, check_config
from .data import PairedSample
from .evaluation import encode_pairs, mean_recall, task_predictions, zero_shot_eval
from .model import build_model
from .validation import check_images, check_pairs, check_tokens

_CONFIG_FIELDS = {f.name for f in fields(Config)}


def _as_corpus(images, tokens, cfg: Config) -> list[PairedSample]:
    images, tokens = check_pairs(images, tokens, cfg)
    return [PairedSample(im, tok, i) for i, (im, tok) in enumerate(zip(images, tokens))]


class MaskVLMPretrainer(BaseEstimator, TransformerMixin):
    """Pretrain on image/caption pairs; ``transform`` returns contrastive image embeddings.

    Any :class:`~maskvlm.config.Config` field can be passed through ``params``;
    the explicit arguments are the ones usually tuned.
    """

    def __init__(self, epochs=30, batch_size=32, loss_set=("ITC", "ITM", "MLM", "MIM"), masking_strategy="one",
                 image_mask_ratio=0.6, text_mask_ratio=0.3, seed=0, params=None):
        self.epochs = epochs
        self.batch_size = batch_size
        self.loss_set = loss_set
        self.masking_strategy = masking_strategy
        self.image_mask_ratio = image_mask_ratio
        self.text_mask_ratio = text_mask_ratio
        self.seed = seed
        self.params = params

    def _config(self) -> Config:
        extra = dict(self.params or {})
        unknown = set(extra) - _CONFIG_FIELDS
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        cfg = Config(**extra).replace(epochs=self.epochs, batch_size=self.batch_size, loss_set=tuple(self.loss_set),
                                      masking_strategy=self.masking_strategy, image_mask_ratio=self.image_mask_ratio,
                                      text_mask_ratio=self.text_mask_ratio, seed=self.seed)
        return check_config(cfg)

    def fit(self, X, y, X_val=None, y_val=None):
        """``X`` images ``(n, H, W, C)``, ``y`` caption token rows."""
        from .training import pretrain
        cfg = self._config()
        corpus = {"train": _as_corpus(X, y, cfg)}
        if X_val is not None:
            corpus["val"] = _as_corpus(X_val, y_val, cfg)
        result = pretrain(cfg, corpus)
        self.config_ = cfg
        self.model_ = result.model
        self.history_ = [r for r in result.records if r["kind"] == "eval"]
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        images = torch.as_tensor(check_images(X, self.config_))
        with torch.no_grad():
            return self.model_.project_itc(self.model_.encode_image(images)[:, 0], "image").numpy()

    def transform_text(self, y):
        check_is_fitted(self, "model_")
        tokens = torch.as_tensor(check_tokens(y, self.config_))
        with torch.no_grad():
            return self.model_.project_itc(self.model_.encode_text(tokens)[:, 0], "text").numpy()

    def similarity(self, X, y) -> np.ndarray:
        """Image-by-text contrastive similarity matrix."""
        check_is_fitted(self, "model_")
        images, tokens = check_pairs(X, y, self.config_)
        _, _, _, z_im, z_txt = encode_pairs(self.model_, images, tokens)
        return (z_im @ z_txt.T).numpy()

    def retrieve(self, X, y, k_candidates: Optional[int] = None) -> dict:
        check_is_fitted(self, "model_")
        return zero_shot_eval(self.model_, _as_corpus(X, y, self.config_), k_candidates)

    def score(self, X, y) -> float:
        """Mean of the six zero-shot recalls as a fraction; 0 when retrieval is not defined."""
        report = self.retrieve(X, y)
        return mean_recall(report) / 100.0 if report["evaluable"] else 0.0


class TaskClassifier(BaseEstimator, ClassifierMixin):
    """Finetune a task head (``vqa``, ``nlvr`` or ``ve``) on top of a pretrained model.

    ``X`` is a list of :class:`~maskvlm.data.TaskSample`; ``y`` is ignored
    because labels travel with the samples. Predictions are class indices for
    NLVR/VE and answer id lists for VQA.
    """

    def __init__(self, task="ve", base=None, epochs=None, lr_scale=1.0, seed=0):
        self.task = task
        self.base = base
        self.epochs = epochs
        self.lr_scale = lr_scale
        self.seed = seed

    def fit(self, X, y=None, X_val=None):
        import copy
        from .training import FINETUNE_RECIPES, finetune_task
        if isinstance(self.base, MaskVLMPretrainer):
            check_is_fitted(self.base, "model_")
            model, cfg = copy.deepcopy(self.base.model_), self.base.config_
        elif self.base is None:
            cfg = Config(seed=self.seed)
            model = build_model(cfg)
        else:
            raise ValueError("base must be a fitted MaskVLMPretrainer or None")
        recipe = FINETUNE_RECIPES[self.task].scaled(self.lr_scale)
        datasets = {"train": list(X), "val": list(X_val) if X_val is not None else []}
        result = finetune_task(cfg.replace(seed=self.seed), self.task, datasets, model, recipe=recipe,
                               epochs=self.epochs)
        self.model_, self.head_ = result.model, result.head
        return self

    def predict(self, X):
        check_is_fitted(self, "head_")
        return task_predictions(self.model_, self.head_, list(X))

    def score(self, X, y=None) -> float:
        from .evaluation import prediction_accuracy
        samples = list(X)
        return prediction_accuracy(self.task, self.predict(samples), samples) / 100.0
