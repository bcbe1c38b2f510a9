import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from maskvlm.config import Config, rng_stream
from maskvlm.data import (COLORS, END, PAD, RGB, SHAPES, START, VE_LABELS, CapacityError, OOVError, Scene,
                          SkipSample, build_corpus, build_task_dataset, caption_is_truthful, corpus_hash,
                          default_vocab, derive_task, detokenize, load_corpus, nlvr_label, parse_caption,
                          render_caption, render_image, save_corpus, scene_capacity, tokenize, ve_label,
                          vqa_label)

VOCAB = default_vocab()


def test_vocab_specials_first_and_oov_named():
    assert VOCAB.tokens[:5] == ["[PAD]", "[START]", "[END]", "[MASK]", "[SEP]"]
    with pytest.raises(OOVError, match="zebra"):
        tokenize("a zebra", VOCAB)


def test_tokenize_roundtrip():
    text = "a red circle in the top left"
    assert detokenize(tokenize(text, VOCAB), VOCAB) == text


def test_single_blue_circle():
    scene = Scene(1, (("circle", "blue"),))
    cap = render_caption(scene, rng_stream(0, "t"), VOCAB, 12)
    assert detokenize(cap, VOCAB, strip_special=True) == "a blue circle in the middle"
    assert vqa_label(scene, "circle") == "blue"


def test_scene_id_roundtrip():
    rng = rng_stream(0, "s")
    from maskvlm.data import gen_scene
    for _ in range(50):
        s = gen_scene(rng, 2)
        assert Scene.from_id(s.scene_id, 2) == s


def test_capacity():
    assert scene_capacity(1) == 15
    with pytest.raises(CapacityError):
        build_corpus(16, 0, cfg=Config(grid=1))


def test_render_colors_and_background():
    scene = Scene(1, (("square", "red"),))
    img = render_image(scene, 16)
    assert img.shape == (16, 16, 3)
    assert np.allclose(img[0, 0], 0.1)
    assert np.allclose(img[8, 8], RGB["red"])


def test_corpus_properties():
    cfg = Config()
    corpus = build_corpus(64, 3, cfg=cfg)
    assert [len(corpus[k]) for k in ("train", "val", "test")] == [48, 8, 8]
    ids = [s.scene_id for split in corpus.values() for s in split]
    assert len(set(ids)) == 64
    for s in corpus["train"]:
        assert s.tokens[0] == START and END in s.tokens
        assert len(s.tokens) == cfg.max_text_len
        assert caption_is_truthful(s.tokens, Scene.from_id(s.scene_id, cfg.grid), VOCAB)


def test_full_grid_caption_fits_default_length():
    scene = Scene(2, tuple(("triangle", "yellow") for _ in range(4)))
    cap = render_caption(scene, rng_stream(0, "x"), VOCAB, Config().max_text_len)
    assert len(parse_caption(detokenize(cap, VOCAB, strip_special=True), 2)) == 4


def test_corpus_deterministic(tmp_path):
    a = build_corpus(32, 7)
    b = build_corpus(32, 7)
    assert corpus_hash(a) == corpus_hash(b)
    save_corpus(a, tmp_path, Config())
    loaded, manifest = load_corpus(tmp_path)
    assert corpus_hash(loaded) == corpus_hash(a)
    assert manifest["counts"]["train"] == 24


def test_vqa_skips_when_no_unique_shape():
    scene = Scene(2, (("circle", "red"), ("circle", "blue"), None, None))
    from maskvlm.data import make_sample
    s = make_sample(scene, rng_stream(0, "c"), VOCAB, Config())
    with pytest.raises(SkipSample):
        derive_task([s], "vqa", rng_stream(0, "q"), Config())


@pytest.mark.parametrize("task", ["vqa", "nlvr", "ve"])
def test_task_labels_rederivable(task):
    cfg = Config()
    corpus = build_corpus(64, 1, cfg=cfg)
    samples = build_task_dataset(corpus["train"], task, 60, 0, cfg)
    for t in samples:
        scenes = [Scene.from_id(i, cfg.grid) for i in t.scene_ids]
        words = detokenize(t.tokens, VOCAB, strip_special=True).split()
        if task == "vqa":
            assert len(t.images) == 1
            assert t.label[0] == START and t.label[-1] == END
            assert VOCAB.tokens[t.label[1]] == vqa_label(scenes[0], words[-1])
        elif task == "nlvr":
            assert len(t.images) == 2
            assert t.label == nlvr_label(scenes[0], scenes[1], words[-1])
        else:
            assert t.label == ve_label(scenes[0], words)


def test_nlvr_balanced_and_ve_uniform():
    cfg = Config()
    corpus = build_corpus(128, 2, cfg=cfg)
    nlvr = build_task_dataset(corpus["train"], "nlvr", 400, 0, cfg)
    assert abs(np.mean([t.label for t in nlvr]) - 0.5) < 0.08
    ve = build_task_dataset(corpus["train"], "ve", 600, 0, cfg)
    counts = np.bincount([t.label for t in ve], minlength=3)
    assert counts.min() > 150
    assert len(VE_LABELS) == 3


@settings(max_examples=40, deadline=None)
@given(st.lists(st.one_of(st.none(), st.tuples(st.sampled_from(SHAPES), st.sampled_from(COLORS))),
                min_size=4, max_size=4).filter(lambda c: any(x is not None for x in c)), st.integers(0, 1000))
def test_captions_parse_back_to_scene(cells, seed):
    scene = Scene(2, tuple(cells))
    cap = render_caption(scene, rng_stream(seed, "c"), VOCAB, 36)
    assert sorted(parse_caption(detokenize(cap, VOCAB, strip_special=True), 2)) == sorted(scene.objects)
    assert all(t == PAD for t in cap[list(cap).index(END) + 1:])
