import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from maskvlm.data import END, START, build_task_dataset, stack
from maskvlm.estimators import MaskVLMPretrainer, TaskClassifier

from conftest import tiny_config

TINY = dict(image_size=16, encoder_patch=4, mask_patch=8, dim=16, n_heads=2, n_enc_blocks=1, n_cross_blocks=1,
            proj_dim=8, warmup_epochs=1, k_candidates=4)


@pytest.fixture(scope="module")
def fitted(tiny_corpus):
    X, y = stack(tiny_corpus["train"])
    Xv, yv = stack(tiny_corpus["val"])
    return MaskVLMPretrainer(epochs=2, batch_size=8, params=TINY).fit(X, y, Xv, yv)


def test_get_set_params_and_clone():
    est = MaskVLMPretrainer(epochs=3, params=TINY)
    params = est.get_params()
    assert params["epochs"] == 3 and params["params"] == TINY
    other = clone(est).set_params(seed=5)
    assert other.seed == 5 and est.seed == 0
    assert TaskClassifier(task="nlvr").get_params()["task"] == "nlvr"


def test_unfitted_raises(tiny_corpus):
    X, _ = stack(tiny_corpus["test"])
    with pytest.raises(NotFittedError):
        MaskVLMPretrainer().transform(X)


def test_unknown_config_field_rejected(tiny_corpus):
    X, y = stack(tiny_corpus["train"][:4])
    with pytest.raises(ValueError, match="unknown config"):
        MaskVLMPretrainer(params={"width": 3}).fit(X, y)


def test_fit_transform_shapes_and_unit_norm(fitted, tiny_corpus):
    X, y = stack(tiny_corpus["test"])
    z = fitted.transform(X)
    t = fitted.transform_text(y)
    assert z.shape == (len(X), TINY["proj_dim"]) and t.shape == z.shape
    assert np.allclose(np.linalg.norm(z, axis=1), 1, atol=1e-5)
    assert np.allclose(fitted.similarity(X, y), z @ t.T, atol=1e-5)
    assert len(fitted.history_) == 2


def test_score_and_retrieve(fitted, tiny_corpus):
    X, y = stack(tiny_corpus["test"])
    report = fitted.retrieve(X, y)
    assert report["evaluable"]
    s = fitted.score(X, y)
    assert 0 <= s <= 1 and s == fitted.score(X, y)


def test_ragged_token_rows_are_padded(fitted):
    rows = [[START, 6, 7, END], [START, 8, END]]
    X = np.zeros((2, 16, 16, 3), dtype=np.float32)
    assert fitted.similarity(X, rows).shape == (2, 2)


@pytest.mark.parametrize("X, y, match", [
    (np.zeros((2, 8, 8, 3)), [[START, END]] * 2, "shape"),
    (np.full((2, 16, 16, 3), np.nan), [[START, END]] * 2, "non-finite"),
    (np.zeros((2, 16, 16, 3)), [[START, END]], "2 images but 1"),
    (np.zeros((1, 16, 16, 3)), [[6, END]], "START"),
    (np.zeros((1, 16, 16, 3)), [[START, 99]], "outside"),
    (np.zeros((1, 16, 16, 3)), [[START] + [6] * 40], "max_text_len"),
    (np.zeros((1, 16, 16, 3)), [[START, 1.5]], "integer"),
])
def test_input_validation(fitted, X, y, match):
    with pytest.raises(ValueError, match=match):
        fitted.similarity(X, y)


def test_task_classifier_fit_predict_score(fitted, tiny_corpus):
    cfg = tiny_config()
    train = build_task_dataset(tiny_corpus["train"], "ve", 16, 0, cfg)
    test = build_task_dataset(tiny_corpus["test"], "ve", 8, 1, cfg)
    clf = TaskClassifier(task="ve", base=fitted, epochs=1).fit(train, X_val=test)
    preds = clf.predict(test)
    assert len(preds) == len(test) and all(p in (0, 1, 2) for p in preds)
    assert clf.score(test) == pytest.approx(np.mean([p == s.label for p, s in zip(preds, test)]))
    # the pretrainer's own model is not modified
    assert clf.model_ is not fitted.model_


def test_task_classifier_rejects_bad_base():
    with pytest.raises(ValueError, match="base"):
        TaskClassifier(base="checkpoint.ckpt").fit([])
