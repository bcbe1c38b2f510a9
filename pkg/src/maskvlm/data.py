"""Synthetic paired image-caption corpus with known cross-modal structure.

Scenes are small grids of colored shapes. Images are rendered
deterministically from the scene and captions are generated from a fixed
template, so every caption can be checked against its scene.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import Config, RngStream, rng_stream

PAD, START, END, MASK, SEP = range(5)
SPECIALS = ("[PAD]", "[START]", "[END]", "[MASK]", "[SEP]")
SHAPES = ("square", "circle", "triangle")
COLORS = ("red", "green", "blue", "yellow", "white")
RGB = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "white": (1.0, 1.0, 1.0),
}
BACKGROUND = 0.1
POSITION_WORDS = ("top", "bottom", "left", "right", "middle")
GLUE = ("a", "in", "the", "and")
QUESTION_WORDS = ("what", "color", "is")
NLVR_WORDS = ("both", "images", "contain")
VE_WORDS = ("outside", "image")
TASKS = ("vqa", "nlvr", "ve")
VE_LABELS = ("entail", "neutral", "contradict")


class OOVError(KeyError):
    pass


class CapacityError(ValueError):
    pass


class SkipSample(Exception):
    """A sample cannot support the requested task; the caller should resample."""


class Vocabulary:
    def __init__(self, words: Sequence[str]):
        self.tokens = list(SPECIALS) + [w for w in words if w not in SPECIALS]
        self.index = {w: i for i, w in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate vocabulary entries")

    def __len__(self):
        return len(self.tokens)

    def __getitem__(self, word: str) -> int:
        try:
            return self.index[word]
        except KeyError:
            raise OOVError(f"out-of-vocabulary word: {word!r}") from None

    def __contains__(self, word: str) -> bool:
        return word in self.index

    @property
    def specials(self) -> dict[str, int]:
        return {name: i for i, name in enumerate(SPECIALS)}


def default_vocab() -> Vocabulary:
    return Vocabulary(COLORS + SHAPES + POSITION_WORDS + GLUE + QUESTION_WORDS + NLVR_WORDS + VE_WORDS)


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    return [vocab[w] for w in text.split()]


def detokenize(ids: Sequence[int], vocab: Vocabulary, strip_special: bool = False) -> str:
    words = []
    for i in ids:
        i = int(i)
        if strip_special and i < len(SPECIALS):
            continue
        words.append(vocab.tokens[i])
    return " ".join(words)


def position_names(grid: int) -> list[tuple[str, ...]]:
    """Words naming each cell, row-major."""
    if grid == 1:
        return [("middle",)]
    if grid == 2:
        rows, cols = ("top", "bottom"), ("left", "right")
    elif grid == 3:
        rows, cols = ("top", "middle", "bottom"), ("left", "middle", "right")
    else:
        raise ValueError("grid must be 1, 2 or 3")
    names = []
    for r in rows:
        for c in cols:
            names.append((r,) if r == c else (r, c))
    return names


@dataclass(frozen=True)
class Scene:
    """``cells[i]`` is ``None`` or ``(shape, color)`` for cell ``i`` (row-major)."""

    grid: int
    cells: tuple

    @property
    def objects(self) -> list[tuple[int, str, str]]:
        return [(i, c[0], c[1]) for i, c in enumerate(self.cells) if c is not None]

    @property
    def scene_id(self) -> int:
        # base-16 digits: 0 = empty, 1 + 5*shape + color otherwise
        sid = 0
        for c in reversed(self.cells):
            digit = 0 if c is None else 1 + SHAPES.index(c[0]) * len(COLORS) + COLORS.index(c[1])
            sid = sid * 16 + digit
        return sid

    @classmethod
    def from_id(cls, scene_id: int, grid: int) -> "Scene":
        cells = []
        for _ in range(grid * grid):
            digit = scene_id % 16
            scene_id //= 16
            if digit == 0:
                cells.append(None)
            else:
                s, c = divmod(digit - 1, len(COLORS))
                cells.append((SHAPES[s], COLORS[c]))
        return cls(grid, tuple(cells))

    def shapes(self) -> set[str]:
        return {s for _, s, _ in self.objects}


def scene_capacity(grid: int) -> int:
    per_cell = len(SHAPES) * len(COLORS)
    return (per_cell + 1) ** (grid * grid) - 1


def gen_scene(rng: RngStream, grid: int) -> Scene:
    if grid < 1:
        raise ValueError("grid >= 1")
    n_cells = grid * grid
    count = int(rng.integers(1, n_cells + 1))
    occupied = set(int(i) for i in rng.permutation(n_cells)[:count])
    cells = []
    for i in range(n_cells):
        if i in occupied:
            cells.append((SHAPES[int(rng.integers(len(SHAPES)))], COLORS[int(rng.integers(len(COLORS)))]))
        else:
            cells.append(None)
    return Scene(grid, tuple(cells))


def _shape_mask(shape: str, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    yc = (yy + 0.5) / size
    xc = (xx + 0.5) / size
    if shape == "square":
        return np.ones((size, size), dtype=bool)
    if shape == "circle":
        return (yc - 0.5) ** 2 + (xc - 0.5) ** 2 <= 0.25
    if shape == "triangle":
        # apex at top centre, base along the bottom
        return np.abs(xc - 0.5) <= 0.5 * yc
    raise ValueError(shape)


def cell_inset(image_size: int, grid: int) -> tuple[int, int]:
    """(cell side, inset) in pixels; the object occupies the cell minus the inset border."""
    cell = image_size // grid
    return cell, max(1, cell // 8)


def render_image(scene: Scene, image_size: int) -> np.ndarray:
    if image_size % scene.grid:
        raise ValueError("image_size must be divisible by grid")
    img = np.full((image_size, image_size, 3), BACKGROUND, dtype=np.float32)
    cell, inset = cell_inset(image_size, scene.grid)
    inner = cell - 2 * inset
    for idx, shape, color in scene.objects:
        r, c = divmod(idx, scene.grid)
        y0, x0 = r * cell + inset, c * cell + inset
        region = img[y0:y0 + inner, x0:x0 + inner]
        region[_shape_mask(shape, inner)] = RGB[color]
    return img


def object_phrase(shape: str, color: str, position: Sequence[str]) -> list[str]:
    return ["a", color, shape, "in", "the", *position]


def caption_words(scene: Scene, order: Sequence[int]) -> list[str]:
    names = position_names(scene.grid)
    objs = scene.objects
    words: list[str] = []
    for n, k in enumerate(order):
        idx, shape, color = objs[k]
        if n:
            words.append("and")
        words.extend(object_phrase(shape, color, names[idx]))
    return words


def render_caption(scene: Scene, rng: RngStream, vocab: Vocabulary, max_len: int = 36) -> list[int]:
    """Token ids ``[START] ... [END]`` padded to ``max_len``.

    Objects appear in random order. A caption that would not fit is
    regenerated with fewer objects mentioned rather than truncated.
    """
    n_obj = len(scene.objects)
    order = [int(i) for i in rng.permutation(n_obj)]
    for keep in range(n_obj, 0, -1):
        ids = [START] + tokenize(" ".join(caption_words(scene, order[:keep])), vocab) + [END]
        if len(ids) <= max_len:
            return ids + [PAD] * (max_len - len(ids))
    raise ValueError(f"max_text_len {max_len} too short for a single object phrase")


def parse_caption(text: str, grid: int) -> list[tuple[int, str, str]]:
    """Inverse of the caption template: list of (cell, shape, color)."""
    names = {n: i for i, n in enumerate(position_names(grid))}
    words = [w for w in text.split() if w not in SPECIALS]
    out = []
    for chunk in " ".join(words).split(" and "):
        toks = chunk.split()
        if len(toks) < 6 or toks[0] != "a" or toks[3:5] != ["in", "the"]:
            raise ValueError(f"unparseable phrase {chunk!r}")
        out.append((names[tuple(toks[5:])], toks[2], toks[1]))
    return out


def caption_is_truthful(tokens: Sequence[int], scene: Scene, vocab: Vocabulary) -> bool:
    mentioned = parse_caption(detokenize(tokens, vocab, strip_special=True), scene.grid)
    actual = set(scene.objects)
    return len(set(mentioned)) == len(mentioned) and set(mentioned) <= actual


@dataclass(frozen=True)
class PairedSample:
    image: np.ndarray
    tokens: np.ndarray
    scene_id: int


def make_sample(scene: Scene, rng: RngStream, vocab: Vocabulary, cfg: Config) -> PairedSample:
    tokens = np.asarray(render_caption(scene, rng, vocab, cfg.max_text_len), dtype=np.int64)
    return PairedSample(render_image(scene, cfg.image_size), tokens, scene.scene_id)


def build_corpus(n: int, seed: int, split: Sequence[float] = (0.75, 0.125, 0.125),
                 cfg: Optional[Config] = None, vocab: Optional[Vocabulary] = None) -> dict[str, list[PairedSample]]:
    cfg = cfg or Config()
    vocab = vocab or default_vocab()
    if len(split) != 3 or abs(sum(split) - 1.0) > 1e-9 or min(split) < 0:
        raise ValueError("split fractions must be three nonnegative values summing to 1")
    cap = scene_capacity(cfg.grid)
    if n > cap:
        raise CapacityError(f"{n} distinct scenes requested but grid {cfg.grid} allows only {cap}")
    scene_rng = rng_stream(seed, "data/scenes")
    caption_rng = rng_stream(seed, "data/captions")
    scenes: list[Scene] = []
    seen: set[int] = set()
    while len(scenes) < n:
        s = gen_scene(scene_rng, cfg.grid)
        if s.scene_id in seen:
            continue
        seen.add(s.scene_id)
        scenes.append(s)
    n_train = int(round(split[0] * n))
    n_val = int(round(split[1] * n))
    bounds = {"train": (0, n_train), "val": (n_train, n_train + n_val), "test": (n_train + n_val, n)}
    corpus = {}
    for name, (a, b) in bounds.items():
        corpus[name] = [make_sample(s, caption_rng, vocab, cfg) for s in scenes[a:b]]
    return corpus


@dataclass(frozen=True)
class TaskSample:
    task: str
    images: tuple
    tokens: np.ndarray
    label: object  # answer ids for vqa, int for nlvr / ve
    scene_ids: tuple


def _pad(ids: list[int], length: int) -> np.ndarray:
    if len(ids) > length:
        raise ValueError("sequence longer than max_text_len")
    return np.asarray(ids + [PAD] * (length - len(ids)), dtype=np.int64)


def vqa_label(scene: Scene, shape: str) -> str:
    colors = [c for _, s, c in scene.objects if s == shape]
    if len(colors) != 1:
        raise SkipSample(f"shape {shape!r} does not occur exactly once")
    return colors[0]


def nlvr_label(scene_a: Scene, scene_b: Scene, shape: str) -> int:
    return int(shape in scene_a.shapes() and shape in scene_b.shapes())


def ve_label(scene: Scene, words: Sequence[str]) -> int:
    """Recover the entailment class of a hypothesis from the scene alone."""
    if "outside" in words:
        return VE_LABELS.index("neutral")
    (idx, shape, color), = parse_caption(" ".join(words), scene.grid)
    cell = scene.cells[idx]
    if cell == (shape, color):
        return VE_LABELS.index("entail")
    present = {c for _, s, c in scene.objects if s == shape}
    if color not in present:
        return VE_LABELS.index("contradict")
    raise ValueError("hypothesis is neither entailed nor contradicted")


def derive_task(samples: Sequence[PairedSample], task: str, rng: RngStream, cfg: Config,
                vocab: Optional[Vocabulary] = None, nlvr_target: Optional[int] = None) -> TaskSample:
    """One task sample from one (vqa, ve) or two (nlvr) paired samples.

    NLVR draws the wanted truth value first (or takes ``nlvr_target``) and
    signals a skip when no shape gives it for this image pair.
    """
    vocab = vocab or default_vocab()
    scenes = [Scene.from_id(s.scene_id, cfg.grid) for s in samples]
    L = cfg.max_text_len
    if task == "vqa":
        scene = scenes[0]
        unique = sorted(s for s in scene.shapes() if sum(1 for _, t, _ in scene.objects if t == s) == 1)
        if not unique:
            raise SkipSample("no shape occurs exactly once")
        shape = unique[int(rng.integers(len(unique)))]
        question = [START] + tokenize(f"what color is the {shape}", vocab) + [END]
        answer = [START, vocab[vqa_label(scene, shape)], END]
        return TaskSample("vqa", (samples[0].image,), _pad(question, L), np.asarray(answer, dtype=np.int64),
                          (samples[0].scene_id,))
    if task == "nlvr":
        if len(samples) != 2:
            raise ValueError("nlvr needs exactly two samples")
        a, b = scenes
        want = int(rng.integers(2)) if nlvr_target is None else nlvr_target
        matching = [s for s in SHAPES if nlvr_label(a, b, s) == want]
        if not matching:
            raise SkipSample(f"no shape makes the statement {bool(want)} for this pair")
        shape = matching[int(rng.integers(len(matching)))]
        text = [START] + tokenize(f"both images contain a {shape}", vocab) + [END]
        return TaskSample("nlvr", (samples[0].image, samples[1].image), _pad(text, L), nlvr_label(a, b, shape),
                          (samples[0].scene_id, samples[1].scene_id))
    if task == "ve":
        scene = scenes[0]
        names = position_names(cfg.grid)
        kind = VE_LABELS[int(rng.integers(3))]
        objs = scene.objects
        if kind == "contradict":
            options = []
            for idx, shape, _ in objs:
                used = {c for _, s, c in objs if s == shape}
                options.extend((idx, shape, c) for c in COLORS if c not in used)
            idx, shape, color = options[int(rng.integers(len(options)))]
            words = object_phrase(shape, color, names[idx])
        elif kind == "entail":
            idx, shape, color = objs[int(rng.integers(len(objs)))]
            words = object_phrase(shape, color, names[idx])
        else:
            shape = SHAPES[int(rng.integers(len(SHAPES)))]
            color = COLORS[int(rng.integers(len(COLORS)))]
            words = ["a", color, shape, "outside", "the", "image"]
        text = [START] + tokenize(" ".join(words), vocab) + [END]
        return TaskSample("ve", (samples[0].image,), _pad(text, L), ve_label(scene, words), (samples[0].scene_id,))
    raise ValueError(f"unknown task {task!r}")


def build_task_dataset(samples: Sequence[PairedSample], task: str, n: int, seed: int, cfg: Config,
                       vocab: Optional[Vocabulary] = None) -> list[TaskSample]:
    """Draw ``n`` task samples from ``samples``, resampling on skips.

    NLVR keeps its drawn truth value across resamples, so labels stay balanced.
    """
    vocab = vocab or default_vocab()
    rng = rng_stream(seed, f"data/task/{task}")
    out: list[TaskSample] = []
    attempts = 0
    target = None
    while len(out) < n:
        if task == "nlvr" and target is None:
            target = int(rng.integers(2))
        attempts += 1
        if attempts > 100 * n + 100:
            raise ValueError(f"could not derive {n} {task} samples")
        if task == "nlvr":
            i, j = rng.choice(len(samples), size=2, replace=False)
            picked = [samples[int(i)], samples[int(j)]]
        else:
            picked = [samples[int(rng.integers(len(samples)))]]
        try:
            out.append(derive_task(picked, task, rng, cfg, vocab, nlvr_target=target))
            target = None
        except SkipSample:
            continue
    return out


def stack(samples: Sequence[PairedSample]) -> tuple[np.ndarray, np.ndarray]:
    images = np.stack([s.image for s in samples]).astype(np.float32)
    tokens = np.stack([s.tokens for s in samples]).astype(np.int64)
    return images, tokens


# corpus files: manifest.json plus <split>.images.f32 / <split>.tokens.u16 / <split>.ids.u64

def corpus_hash(corpus: dict[str, list[PairedSample]]) -> str:
    h = hashlib.blake2b(digest_size=8)
    for name in ("train", "val", "test"):
        for s in corpus.get(name, []):
            h.update(np.ascontiguousarray(s.image, dtype="<f4").tobytes())
            h.update(np.ascontiguousarray(s.tokens, dtype="<u2").tobytes())
            h.update(int(s.scene_id).to_bytes(8, "little"))
    return h.hexdigest()


def save_corpus(corpus: dict[str, list[PairedSample]], directory: str | Path, cfg: Config,
                vocab: Optional[Vocabulary] = None, extra: Optional[dict] = None) -> Path:
    vocab = vocab or default_vocab()
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    counts = {}
    for name, samples in corpus.items():
        counts[name] = len(samples)
        if samples:
            images, tokens = stack(samples)
            ids = np.asarray([s.scene_id for s in samples], dtype="<u8")
        else:
            images = np.zeros((0, cfg.image_size, cfg.image_size, 3))
            tokens = np.zeros((0, cfg.max_text_len))
            ids = np.zeros(0, dtype="<u8")
        (directory / f"{name}.images.f32").write_bytes(images.astype("<f4").tobytes())
        (directory / f"{name}.tokens.u16").write_bytes(tokens.astype("<u2").tobytes())
        (directory / f"{name}.ids.u64").write_bytes(ids.tobytes())
    manifest = {
        "format": "maskvlm-corpus/1",
        "counts": counts,
        "image_shape": [cfg.image_size, cfg.image_size, 3],
        "max_text_len": cfg.max_text_len,
        "vocab": vocab.tokens,
        "corpus_hash": corpus_hash(corpus),
        "config": cfg.to_dict(),
    }
    if extra:
        manifest.update(extra)
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def load_corpus(directory: str | Path) -> tuple[dict[str, list[PairedSample]], dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    H, W, C = manifest["image_shape"]
    L = manifest["max_text_len"]
    corpus = {}
    for name, count in manifest["counts"].items():
        images = np.frombuffer((directory / f"{name}.images.f32").read_bytes(), dtype="<f4")
        tokens = np.frombuffer((directory / f"{name}.tokens.u16").read_bytes(), dtype="<u2")
        ids = np.frombuffer((directory / f"{name}.ids.u64").read_bytes(), dtype="<u8")
        images = images.reshape(count, H, W, C).astype(np.float32)
        tokens = tokens.reshape(count, L).astype(np.int64)
        corpus[name] = [PairedSample(images[i], tokens[i], int(ids[i])) for i in range(count)]
    if corpus_hash(corpus) != manifest["corpus_hash"]:
        raise ValueError("corpus hash mismatch")
    return corpus, manifest
