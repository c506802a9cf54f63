"""Toy synthetic word-image generation.

Three procedural bitmap scripts stand in for real Unicode fonts: A (10
glyphs), B (12 glyphs, 6 shapes shared with A) and C (12 glyphs, disjoint
shapes, drawn with a top-connector line). Rendering composes 5x7 glyph
cells left to right and applies seeded scale/rotation/noise/contrast
jitter, so every sample is a pure function of (word, seed).
"""
from __future__ import annotations

import os
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import EmptyLexicon, MissingGlyph
from .textcodec import Vocabulary, clean_text

GLYPH_H, GLYPH_W = 7, 5
_SHAPE_SEED = 20240917


@dataclass
class GlyphAtlas:
    script: str
    glyphs: dict  # codepoint -> bool array (GLYPH_H, GLYPH_W)
    connector: bool = False

    def vocabulary(self) -> Vocabulary:
        return Vocabulary(sorted(self.glyphs))


@dataclass
class RenderConfig:
    height: int = 32
    width: int = 100
    scale: tuple = (0.85, 1.0)
    rotation: float = 3.0  # max absolute degrees
    noise: float = 0.03
    contrast: tuple = (0.7, 1.0)
    seed: int = 0


@dataclass
class WordSample:
    image: np.ndarray  # (H, W) float in [0, 1]
    label: str
    script: str
    seed: int


def _make_shapes(count: int, min_on: int = 14, min_dist: int = 10):
    """Random distinct glyph bitmaps with a pairwise Hamming-distance floor."""
    rng = np.random.default_rng(_SHAPE_SEED)
    shapes = []
    while len(shapes) < count:
        cand = rng.random((GLYPH_H, GLYPH_W)) < 0.45
        cand[0, :] = False  # keep the top row clear for the connector line
        if cand.sum() < min_on:
            continue
        if all(np.sum(cand != s) >= min_dist for s in shapes):
            shapes.append(cand)
    return shapes


_SHAPES = _make_shapes(28)

SCRIPT_A_CHARS = "abcdefghij"
SCRIPT_B_CHARS = "klmnopqrstuv"
SCRIPT_C_CHARS = "ABCDEFGHIJKL"


def builtin_scripts():
    """Toy scripts A, B, C; A and B share 6 glyph shapes, C is disjoint."""
    a = GlyphAtlas("A", {cp: _SHAPES[i] for i, cp in enumerate(SCRIPT_A_CHARS)})
    b_shapes = _SHAPES[0:6] + _SHAPES[10:16]
    b = GlyphAtlas("B", {cp: b_shapes[i] for i, cp in enumerate(SCRIPT_B_CHARS)})
    c = GlyphAtlas("C", {cp: _SHAPES[16 + i] for i, cp in enumerate(SCRIPT_C_CHARS)}, connector=True)
    return a, b, c


def get_script(name: str) -> GlyphAtlas:
    for atlas in builtin_scripts():
        if atlas.script == name:
            return atlas
    raise KeyError(f"unknown builtin script {name!r}")


def builtin_lexicon(atlas: GlyphAtlas, count: int, seed: int = 0, min_len: int = 3, max_len: int = 8):
    """Deterministic list of distinct words over the atlas alphabet."""
    rng = np.random.default_rng([seed, zlib.crc32(atlas.script.encode())])
    chars = sorted(atlas.glyphs)
    words = []
    seen = set()
    while len(words) < count:
        n = int(rng.integers(min_len, max_len + 1))
        w = "".join(chars[i] for i in rng.integers(0, len(chars), size=n))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


# ---------------------------------------------------------------------------
# image helpers


def resize_bilinear(img: np.ndarray, oh: int, ow: int) -> np.ndarray:
    """Bilinear resize of a 2-D image, pixel-center convention with zero
    padding outside the source (matches the affine sampler under an
    identity transform)."""
    h, w = img.shape
    if (oh, ow) == (h, w):
        return img.copy()
    ys = ((2.0 * np.arange(oh) + 1.0) * h / oh - 1.0) / 2.0
    xs = ((2.0 * np.arange(ow) + 1.0) * w / ow - 1.0) / 2.0
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    out = np.zeros((oh, ow), dtype=img.dtype if img.dtype.kind == "f" else np.float64)
    for dy, dx, wgt in (
        (0, 0, (1 - wy) * (1 - wx)),
        (0, 1, (1 - wy) * wx),
        (1, 0, wy * (1 - wx)),
        (1, 1, wy * wx),
    ):
        yi = y0 + dy
        xi = x0 + dx
        ok = ((yi >= 0) & (yi < h))[:, None] & ((xi >= 0) & (xi < w))[None, :]
        out += wgt * ok * img[np.clip(yi, 0, h - 1)[:, None], np.clip(xi, 0, w - 1)[None, :]]
    return out


def _rotate(img: np.ndarray, degrees: float) -> np.ndarray:
    if degrees == 0.0:
        return img
    h, w = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rad = np.deg2rad(degrees)
    cos, sin = np.cos(rad), np.sin(rad)
    yy, xx = np.mgrid[0:h, 0:w]
    # inverse rotation: sample source coords for each output pixel
    sx = cos * (xx - cx) + sin * (yy - cy) + cx
    sy = -sin * (xx - cx) + cos * (yy - cy) + cy
    x0 = np.floor(sx).astype(int)
    y0 = np.floor(sy).astype(int)
    acc = np.zeros_like(img)
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0 + dx
            yi = y0 + dy
            ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            wgt = (1 - np.abs(sx - xi)) * (1 - np.abs(sy - yi))
            acc += wgt * ok * img[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
    return np.clip(acc, 0.0, 1.0)


def _compose(word: str, atlas: GlyphAtlas) -> np.ndarray:
    n = len(word)
    width = n * (GLYPH_W + 1) - 1
    canvas = np.zeros((GLYPH_H + 2, width + 2))
    for i, cp in enumerate(word):
        x = 1 + i * (GLYPH_W + 1)
        canvas[1 : 1 + GLYPH_H, x : x + GLYPH_W] = atlas.glyphs[cp].astype(float)
    if atlas.connector:
        canvas[1, 1 : 1 + width] = 1.0
    return canvas


def render_word(word: str, atlas: GlyphAtlas, cfg: RenderConfig) -> WordSample:
    """Render one word image; deterministic for a given (word, cfg.seed)."""
    label = clean_text(word)
    if not label:
        raise MissingGlyph("word is empty after cleaning")
    missing = [cp for cp in label if cp not in atlas.glyphs]
    if missing:
        raise MissingGlyph(f"atlas {atlas.script!r} lacks glyphs for {missing!r}")
    rng = np.random.default_rng([cfg.seed, zlib.crc32(label.encode("utf-8"))])

    base = _compose(label, atlas)
    bh, bw = base.shape
    fit = min(cfg.height / bh, cfg.width / bw)
    sc = rng.uniform(*cfg.scale) * fit
    sh = max(1, int(round(bh * sc)))
    sw = max(1, int(round(bw * sc)))
    scaled = resize_bilinear(base, sh, sw)

    img = np.zeros((cfg.height, cfg.width))
    oy = int(rng.integers(0, cfg.height - sh + 1))
    ox = int(rng.integers(0, cfg.width - sw + 1))
    img[oy : oy + sh, ox : ox + sw] = scaled

    angle = rng.uniform(-cfg.rotation, cfg.rotation) if cfg.rotation > 0 else 0.0
    img = _rotate(img, angle)
    img = img * rng.uniform(*cfg.contrast)
    if cfg.noise > 0:
        img = img + rng.normal(0.0, cfg.noise, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    return WordSample(image=img, label=label, script=atlas.script, seed=cfg.seed)


# ---------------------------------------------------------------------------
# dataset generation


def write_pgm(path, img: np.ndarray) -> None:
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if not raw.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM file")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(raw[start:pos]))
    pos += 1
    w, h, maxval = fields
    data = np.frombuffer(raw, dtype=np.uint8, count=h * w, offset=pos)
    return data.reshape(h, w).astype(np.float64) / maxval


def worker_count() -> int:
    """Worker-pool bound from STR_LAB_THREADS (default: CPU count)."""
    env = os.environ.get("STR_LAB_THREADS", "").strip()
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _render_rows(words, atlas, cfg, start_index):
    def job(i_word):
        i, word = i_word
        sample = render_word(word, atlas, replace(cfg, seed=cfg.seed * 1_000_003 + start_index + i))
        return f"images/{start_index + i:06d}.pgm", sample

    workers = worker_count()
    if workers > 1 and len(words) > 64:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(job, enumerate(words)))
    return [job(t) for t in enumerate(words)]


def generate_dataset(lexicon, atlas: GlyphAtlas, cfg: RenderConfig, count: int, out_dir, split=None):
    """Render ``count`` samples from the lexicon into ``out_dir``.

    Writes binary PGM images plus TSV manifests "path<TAB>label<TAB>script".
    With ``split`` (train fraction), word lists are made disjoint between
    train.tsv and test.tsv; otherwise a single manifest.tsv is written.
    Fully determined by (lexicon, cfg, count, split).
    """
    words = [clean_text(w) for w in lexicon]
    words = [w for w in words if w]
    if not words:
        raise EmptyLexicon("no usable lexicon words")
    if count < 1:
        raise EmptyLexicon("count must be >= 1")
    rng = np.random.default_rng(cfg.seed)
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)

    manifests = {}
    if split is None:
        picks = [words[i] for i in rng.integers(0, len(words), size=count)]
        manifests["manifest.tsv"] = _render_rows(picks, atlas, cfg, 0)
    else:
        if not 0.0 < split < 1.0:
            raise ValueError("split must be a train fraction in (0, 1)")
        order = list(rng.permutation(len(words)))
        n_train = max(1, min(len(words) - 1, int(round(split * len(words)))))
        train_words = [words[i] for i in order[:n_train]]
        test_words = [words[i] for i in order[n_train:]]
        n_train_imgs = int(round(split * count))
        n_test_imgs = count - n_train_imgs
        picks_tr = [train_words[i] for i in rng.integers(0, len(train_words), size=n_train_imgs)]
        picks_te = [test_words[i] for i in rng.integers(0, len(test_words), size=n_test_imgs)]
        manifests["train.tsv"] = _render_rows(picks_tr, atlas, cfg, 0)
        manifests["test.tsv"] = _render_rows(picks_te, atlas, cfg, n_train_imgs)

    for name, rows in manifests.items():
        lines = []
        for rel, sample in rows:
            write_pgm(os.path.join(out_dir, rel), sample.image)
            lines.append(f"{rel}\t{sample.label}\t{sample.script}")
        with open(os.path.join(out_dir, name), "w", encoding="utf-8", newline="\n") as f:
            f.write("\n".join(lines) + "\n")
    return {name: [(rel, s.label) for rel, s in rows] for name, rows in manifests.items()}


def load_manifest(data_dir, name=None):
    """Read (image, label, script) triples; picks train/test/manifest.tsv."""
    if name is None:
        for cand in ("manifest.tsv", "train.tsv", "test.tsv"):
            if os.path.exists(os.path.join(data_dir, cand)):
                name = cand
                break
        else:
            raise FileNotFoundError(f"no manifest found in {data_dir}")
    out = []
    with open(os.path.join(data_dir, name), encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            rel, label, script = line.split("\t")
            out.append((read_pgm(os.path.join(data_dir, rel)), label, script))
    return out
