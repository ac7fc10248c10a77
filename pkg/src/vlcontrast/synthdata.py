"""Deterministic synthetic image-caption pairs.

Scenes are two colored shapes placed on a g x g grid; the caption names every
object with its color, shape and cell, so image and text carry exactly the
same information. That known correspondence is what makes retrieval on this
corpus an exact oracle. Also provides the two-view augmentation pipeline and
the token masking used by the masked-prediction objective.
"""

from __future__ import annotations

from dataclasses import dataclass
import struct

import numpy as np

from .common import (
    ConfigurationError,
    STREAM_AUGMENT,
    STREAM_DATA,
    STREAM_MLM,
    STREAM_SYNONYM,
    rng_from,
)

# -- vocabulary ---------------------------------------------------------------

PAD_ID, CLS_ID, MASK_ID, UNK_ID = 0, 1, 2, 3
IGNORE_ID = -1

COLORS = ["red", "green", "blue", "yellow", "cyan", "magenta", "orange", "purple"]
COLOR_SYNONYMS = {"red": "crimson", "green": "lime", "blue": "navy", "yellow": "gold"}
SHAPES = ["circle", "square", "triangle", "cross", "diamond", "heart", "star"]
SHAPE_SYNONYMS = {
    "circle": "disc",
    "square": "box",
    "triangle": "wedge",
    "cross": "plus",
    "diamond": "gem",
}
ROW_WORDS = {2: ["top", "bottom"], 3: ["top", "middle", "bottom"], 4: ["top", "upper", "lower", "bottom"]}
COL_WORDS = {2: ["left", "right"], 3: ["left", "center", "right"], 4: ["left", "midleft", "midright", "right"]}

TOKENS = (
    ["[PAD]", "[CLS]", "[MASK]", "[UNK]", "a", "and"]
    + COLORS
    + list(COLOR_SYNONYMS.values())
    + SHAPES
    + list(SHAPE_SYNONYMS.values())
    + ["top", "upper", "lower", "bottom", "middle"]
    + ["left", "midleft", "midright", "right", "center"]
)
VOCAB = {tok: i for i, tok in enumerate(TOKENS)}
VOCAB_SIZE = len(TOKENS)
assert VOCAB_SIZE == 40

# Synonym ids resolve to the same canonical word when decoding.
_CANONICAL = {VOCAB[syn]: VOCAB[base] for base, syn in {**COLOR_SYNONYMS, **SHAPE_SYNONYMS}.items()}

N_MAX = 16  # caption length including [CLS]; the template never exceeds 12 tokens
N_CHANNELS = 3
DEFAULT_IMAGE_SIZE = 64

_COLOR_RGB = np.array(
    [
        [0.90, 0.10, 0.10],  # red
        [0.10, 0.80, 0.15],  # green
        [0.10, 0.20, 0.90],  # blue
        [0.95, 0.85, 0.10],  # yellow
        [0.10, 0.85, 0.85],  # cyan
        [0.85, 0.10, 0.80],  # magenta
        [0.95, 0.55, 0.10],  # orange
        [0.55, 0.15, 0.75],  # purple
    ]
)
_BACKGROUND = 0.92

# -- domain types -------------------------------------------------------------


@dataclass
class SyntheticPair:
    image: np.ndarray  # (3, H, W) float64 in [0, 1]
    caption: np.ndarray  # (N_MAX,) int64, [CLS] first, [PAD]-padded
    scene: tuple  # ((shape, color, row, col), ...) in row-major cell order
    pair_id: int


@dataclass
class AugmentedViews:
    view_a: np.ndarray
    view_b: np.ndarray
    rng_seed: int


@dataclass
class MaskedText:
    input_ids: np.ndarray  # (N_MAX,) with selected positions rewritten
    labels: np.ndarray  # original id at selected positions, IGNORE_ID elsewhere
    mask_positions: np.ndarray  # indices of selected positions


# -- captions -----------------------------------------------------------------


def caption_for_scene(scene, grid: int, synonym_rng: np.random.Generator | None = None) -> np.ndarray:
    """Template caption: 'a <color> <shape> <row> <col> and a ...', padded to N_MAX."""
    words: list[str] = []
    for k, (shape, color, row, col) in enumerate(scene):
        if k > 0:
            words.append("and")
        color_word = COLORS[color]
        shape_word = SHAPES[shape]
        if synonym_rng is not None:
            if color_word in COLOR_SYNONYMS and synonym_rng.random() < 0.5:
                color_word = COLOR_SYNONYMS[color_word]
            if shape_word in SHAPE_SYNONYMS and synonym_rng.random() < 0.5:
                shape_word = SHAPE_SYNONYMS[shape_word]
        words += ["a", color_word, shape_word, ROW_WORDS[grid][row], COL_WORDS[grid][col]]
    ids = [CLS_ID] + [VOCAB[w] for w in words]
    if len(ids) > N_MAX:
        raise ConfigurationError(f"caption length {len(ids)} exceeds N_MAX={N_MAX}")
    return np.array(ids + [PAD_ID] * (N_MAX - len(ids)), dtype=np.int64)


def decode_caption(ids: np.ndarray, grid: int) -> tuple:
    """Invert the template grammar back to scene descriptors (synonym-insensitive)."""
    words = [TOKENS[_CANONICAL.get(int(i), int(i))] for i in ids if i not in (PAD_ID, CLS_ID)]
    objects = []
    while words:
        if words[0] == "and":
            words = words[1:]
        a, color, shape, row, col = words[:5]
        words = words[5:]
        if a != "a":
            raise ValueError("caption does not follow the template grammar")
        objects.append(
            (SHAPES.index(shape), COLORS.index(color), ROW_WORDS[grid].index(row), COL_WORDS[grid].index(col))
        )
    return tuple(objects)


# -- rendering ----------------------------------------------------------------


def _shape_mask(kind: int, yy, xx, cy, cx, r) -> np.ndarray:
    dy, dx = yy - cy, xx - cx
    if kind == 0:  # circle
        return dx * dx + dy * dy <= r * r
    if kind == 1:  # square
        return (np.abs(dx) <= 0.82 * r) & (np.abs(dy) <= 0.82 * r)
    if kind == 2:  # triangle, apex up
        return (dy >= -r) & (dy <= 0.8 * r) & (np.abs(dx) <= (dy + r) / 1.8)
    if kind == 3:  # cross
        arm = 0.35 * r
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= r))
    if kind == 4:  # diamond
        return np.abs(dx) + np.abs(dy) <= r
    if kind == 5:  # heart
        x, y = dx / (0.8 * r), -dy / (0.8 * r) + 0.25
        return (x * x + y * y - 1.0) ** 3 - x * x * y**3 <= 0.0
    if kind == 6:  # six-point star: two opposed triangles
        up = (dy >= -r) & (dy <= 0.5 * r) & (np.abs(dx) <= (dy + r) / 1.6)
        down = (dy <= r) & (dy >= -0.5 * r) & (np.abs(dx) <= (r - dy) / 1.6)
        return up | down
    raise ConfigurationError(f"unknown shape kind {kind}")


def render_scene(scene, grid: int, image_size: int = DEFAULT_IMAGE_SIZE) -> np.ndarray:
    """Rasterize a scene to a (3, H, W) image; values land on the float32 grid."""
    h = w = image_size
    image = np.full((N_CHANNELS, h, w), _BACKGROUND)
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    cell = image_size / grid
    for shape, color, row, col in scene:
        cy, cx = (row + 0.5) * cell, (col + 0.5) * cell
        mask = _shape_mask(shape, yy, xx, cy, cx, 0.40 * cell)
        image[:, mask] = _COLOR_RGB[color][:, None]
    return image.astype(np.float32).astype(np.float64)


# -- dataset generation ---------------------------------------------------------


def _sample_scene(rng: np.random.Generator, grid: int) -> tuple:
    cells = np.sort(rng.choice(grid * grid, size=2, replace=False))
    return tuple(
        (int(rng.integers(len(SHAPES))), int(rng.integers(len(COLORS))), int(c) // grid, int(c) % grid)
        for c in cells
    )


def generate_dataset(
    count: int,
    seed: int,
    grid: int,
    image_size: int = DEFAULT_IMAGE_SIZE,
    synonyms: bool = False,
) -> list[SyntheticPair]:
    """Deterministic corpus of `count` pairs with pairwise-distinct scenes."""
    if grid not in ROW_WORDS:
        raise ConfigurationError(f"grid must be one of {sorted(ROW_WORDS)}, got {grid}")
    if count < 1:
        raise ConfigurationError("count must be >= 1")
    rng = rng_from(seed, STREAM_DATA)
    seen: set[tuple] = set()
    pairs: list[SyntheticPair] = []
    for pair_id in range(count):
        scene = _sample_scene(rng, grid)
        while scene in seen:
            scene = _sample_scene(rng, grid)
        seen.add(scene)
        syn_rng = rng_from(seed, STREAM_SYNONYM, pair_id) if synonyms else None
        pairs.append(
            SyntheticPair(
                image=render_scene(scene, grid, image_size),
                caption=caption_for_scene(scene, grid, syn_rng),
                scene=scene,
                pair_id=pair_id,
            )
        )
    return pairs


# -- augmentation ---------------------------------------------------------------


def _bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    c, h, w = image.shape
    sy = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    sx = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    y0 = np.clip(np.floor(sy).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(sx).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    fy = np.clip(sy - y0, 0.0, 1.0)[:, None]
    fx = np.clip(sx - x0, 0.0, 1.0)[None, :]
    top = image[:, y0[:, None], x0[None, :]] * (1 - fx) + image[:, y0[:, None], x1[None, :]] * fx
    bot = image[:, y1[:, None], x0[None, :]] * (1 - fx) + image[:, y1[:, None], x1[None, :]] * fx
    return top * (1 - fy) + bot * fy


def _transform_once(image: np.ndarray, rng: np.random.Generator, strength: str) -> np.ndarray:
    if strength == "none":
        return image.copy()
    _, h, w = image.shape
    # random resized crop
    side = int(round(h * rng.uniform(0.7, 1.0)))
    top = int(rng.integers(0, h - side + 1))
    left = int(rng.integers(0, w - side + 1))
    out = _bilinear_resize(image[:, top : top + side, left : left + side], h, w)
    if rng.random() < 0.5:
        out = out[:, :, ::-1]
    if strength == "strong":
        out = out * rng.uniform(0.85, 1.15)  # brightness
        mean = out.mean(axis=(1, 2), keepdims=True)
        out = (out - mean) * rng.uniform(0.8, 1.2) + mean  # contrast
        out = out + rng.normal(0.0, 0.02, size=out.shape)  # channel noise
    return np.clip(out, 0.0, 1.0)


def augment(image: np.ndarray, seed: int, strength: str = "strong", shared: bool = False) -> AugmentedViews:
    """Two independently transformed views; `shared` reuses one sub-seed so both
    views coincide (the single-view training configuration)."""
    if strength not in ("none", "weak", "strong"):
        raise ConfigurationError(f"strength must be none|weak|strong, got {strength!r}")
    rng_a = rng_from(seed, STREAM_AUGMENT, 0)
    rng_b = rng_from(seed, STREAM_AUGMENT, 0) if shared else rng_from(seed, STREAM_AUGMENT, 1)
    return AugmentedViews(
        view_a=_transform_once(image, rng_a, strength),
        view_b=_transform_once(image, rng_b, strength),
        rng_seed=seed,
    )


# -- token masking ----------------------------------------------------------------


def mlm_mask(
    caption: np.ndarray,
    seed: int,
    rate: float = 0.15,
    split: tuple = (0.8, 0.1, 0.1),
) -> MaskedText:
    """Mask non-special positions at `rate`; rewrite per (mask, random, keep) split."""
    if not 0.0 <= rate <= 1.0:
        raise ConfigurationError(f"rate must be in [0, 1], got {rate}")
    if abs(sum(split) - 1.0) > 1e-9 or any(p < 0 for p in split):
        raise ConfigurationError(f"split must be nonnegative and sum to 1, got {split}")
    p_mask, p_random, _ = split
    rng = rng_from(seed, STREAM_MLM)
    ids = np.asarray(caption, dtype=np.int64).copy()
    eligible = ids > UNK_ID  # specials occupy the low ids
    selected = eligible & (rng.random(ids.shape) < rate)
    action = rng.random(ids.shape)
    labels = np.full_like(ids, IGNORE_ID)
    labels[selected] = ids[selected]
    replace_mask = selected & (action < p_mask)
    replace_random = selected & (action >= p_mask) & (action < p_mask + p_random)
    ids[replace_mask] = MASK_ID
    n_rand = int(replace_random.sum())
    if n_rand:
        ids[replace_random] = rng.integers(UNK_ID + 1, VOCAB_SIZE, size=n_rand)
    return MaskedText(input_ids=ids, labels=labels, mask_positions=np.flatnonzero(selected))


# -- dataset file format -----------------------------------------------------------

_MAGIC = b"TCLD"
_VERSION = 1
_HEADER = struct.Struct("<4sIIIII")  # magic, version, count, H, W, grid


def save_dataset(path: str, pairs: list[SyntheticPair], grid: int):
    """Record file: header then per-record pair_id u32, image f32, ids u16, scene u8s."""
    if not pairs:
        raise ConfigurationError("cannot save an empty dataset")
    h, w = pairs[0].image.shape[1:]
    with open(path, "wb") as f:
        f.write(_HEADER.pack(_MAGIC, _VERSION, len(pairs), h, w, grid))
        for p in pairs:
            f.write(struct.pack("<I", p.pair_id))
            f.write(p.image.astype("<f4").tobytes())
            f.write(p.caption.astype("<u2").tobytes())
            f.write(struct.pack("<B", len(p.scene)))
            for obj in p.scene:
                f.write(struct.pack("<BBBB", *obj))


def load_dataset(path: str) -> tuple[list[SyntheticPair], int]:
    """Read a dataset record file; returns (pairs, grid)."""
    with open(path, "rb") as f:
        magic, version, count, h, w, grid = _HEADER.unpack(f.read(_HEADER.size))
        if magic != _MAGIC:
            raise ConfigurationError(f"not a dataset file (magic {magic!r})")
        if version != _VERSION:
            raise ConfigurationError(f"unsupported dataset version {version}")
        pairs = []
        for _ in range(count):
            (pair_id,) = struct.unpack("<I", f.read(4))
            image = np.frombuffer(f.read(4 * N_CHANNELS * h * w), dtype="<f4")
            image = image.reshape(N_CHANNELS, h, w).astype(np.float64)
            caption = np.frombuffer(f.read(2 * N_MAX), dtype="<u2").astype(np.int64)
            (n_obj,) = struct.unpack("<B", f.read(1))
            scene = tuple(struct.unpack("<BBBB", f.read(4)) for _ in range(n_obj))
            scene = tuple(tuple(int(v) for v in obj) for obj in scene)
            pairs.append(SyntheticPair(image=image, caption=caption, scene=scene, pair_id=pair_id))
    return pairs, grid
