"""Toy glyph atlases, word rendering, and dataset generation."""
import hashlib
import os

import numpy as np
import pytest

from strlab import synthgen as sg
from strlab.errors import EmptyLexicon, MissingGlyph


def zero_jitter(**kw):
    return sg.RenderConfig(scale=(1.0, 1.0), rotation=0.0, noise=0.0, contrast=(1.0, 1.0), **kw)


# -- builtin scripts ----------------------------------------------------------


def shared_shapes(a, b):
    return sum(
        1
        for ga in a.glyphs.values()
        if any(np.array_equal(ga, gb) for gb in b.glyphs.values())
    )


def test_scripts_sizes():
    a, b, c = sg.builtin_scripts()
    assert (len(a.glyphs), len(b.glyphs), len(c.glyphs)) == (10, 12, 12)


def test_a_b_share_six_shapes():
    a, b, _ = sg.builtin_scripts()
    assert shared_shapes(a, b) == 6


def test_a_c_disjoint():
    a, _, c = sg.builtin_scripts()
    assert shared_shapes(a, c) == 0


def test_script_c_has_connector():
    _, _, c = sg.builtin_scripts()
    assert c.connector


def test_every_atlas_renders_full_vocabulary():
    cfg = sg.RenderConfig(seed=1)
    for atlas in sg.builtin_scripts():
        word = "".join(sorted(atlas.glyphs))
        sample = sg.render_word(word, atlas, cfg)
        assert sample.label == word
        assert sample.image.shape == (cfg.height, cfg.width)


def test_get_script():
    assert sg.get_script("B").script == "B"
    with pytest.raises(KeyError):
        sg.get_script("Z")


def test_glyphs_keep_top_row_clear():
    for atlas in sg.builtin_scripts():
        for g in atlas.glyphs.values():
            assert not g[0].any()


# -- rendering ----------------------------------------------------------------


def test_render_deterministic():
    cfg = sg.RenderConfig(seed=7)
    atlas = sg.get_script("A")
    one = sg.render_word("abc", atlas, cfg).image
    two = sg.render_word("abc", atlas, cfg).image
    assert np.array_equal(one, two)


def test_render_seed_changes_image():
    atlas = sg.get_script("A")
    one = sg.render_word("abc", atlas, sg.RenderConfig(seed=7)).image
    two = sg.render_word("abc", atlas, sg.RenderConfig(seed=8)).image
    assert not np.array_equal(one, two)


def test_render_missing_glyph():
    with pytest.raises(MissingGlyph):
        sg.render_word("xyz", sg.get_script("A"), sg.RenderConfig())


def test_render_empty_after_cleaning():
    with pytest.raises(MissingGlyph):
        sg.render_word("​", sg.get_script("A"), sg.RenderConfig())


def test_render_pixels_in_unit_range():
    cfg = sg.RenderConfig(seed=3, noise=0.2)
    img = sg.render_word("abcd", sg.get_script("A"), cfg).image
    assert img.min() >= 0.0 and img.max() <= 1.0


def test_render_zero_jitter_matches_direct_composition():
    # canvas sized exactly to the composition makes every random draw a
    # no-op, so the image is the raw glyph paste-up
    atlas = sg.get_script("A")
    word = "ab"
    gh, gw = sg.GLYPH_H, sg.GLYPH_W
    width = 2 * gw + 3  # 1px margin each side + 1px spacing
    height = gh + 2
    cfg = zero_jitter(height=height, width=width, seed=0)
    got = sg.render_word(word, atlas, cfg).image
    want = np.zeros((height, width))
    want[1 : 1 + gh, 1 : 1 + gw] = atlas.glyphs["a"]
    want[1 : 1 + gh, 2 + gw : 2 + 2 * gw] = atlas.glyphs["b"]
    assert np.array_equal(got, want)


def test_render_connector_line():
    _, _, c = sg.builtin_scripts()
    word = "AB"
    gh, gw = sg.GLYPH_H, sg.GLYPH_W
    cfg = zero_jitter(height=gh + 2, width=2 * gw + 3, seed=0)
    img = sg.render_word(word, c, cfg).image
    assert (img[1, 1:-1] == 1.0).all()


def test_label_survives_clean_text():
    from strlab.textcodec import clean_text

    s = sg.render_word("abc", sg.get_script("A"), sg.RenderConfig(seed=0))
    assert clean_text(s.label) == s.label


# -- pgm round trip -----------------------------------------------------------


def test_pgm_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    img = np.round(rng.uniform(0, 1, (18, 40)) * 255) / 255.0
    path = tmp_path / "x.pgm"
    sg.write_pgm(path, img)
    back = sg.read_pgm(path)
    assert np.abs(back - img).max() < 1e-9


# -- dataset generation -------------------------------------------------------


def manifest_hash(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


def test_generate_dataset_manifest(tmp_path):
    atlas = sg.get_script("A")
    lex = sg.builtin_lexicon(atlas, 20, seed=0)
    out = tmp_path / "ds"
    rows = sg.generate_dataset(lex, atlas, sg.RenderConfig(seed=0), 100, out)
    assert len(rows["manifest.tsv"]) == 100
    lines = (out / "manifest.tsv").read_text(encoding="utf-8").splitlines()
    assert len(lines) == 100
    for line in lines:
        rel, label, script = line.split("\t")
        assert (out / rel).exists()
        assert script == "A"
        assert label in lex


def test_generate_dataset_split_disjoint(tmp_path):
    atlas = sg.get_script("B")
    lex = sg.builtin_lexicon(atlas, 40, seed=1)
    rows = sg.generate_dataset(lex, atlas, sg.RenderConfig(seed=1), 100, tmp_path / "ds", split=0.8)
    train_labels = {label for _, label in rows["train.tsv"]}
    test_labels = {label for _, label in rows["test.tsv"]}
    assert train_labels and test_labels
    assert not (train_labels & test_labels)


def test_generate_dataset_hash_stable(tmp_path):
    atlas = sg.get_script("A")
    lex = sg.builtin_lexicon(atlas, 10, seed=2)
    sg.generate_dataset(lex, atlas, sg.RenderConfig(seed=5), 30, tmp_path / "one")
    sg.generate_dataset(lex, atlas, sg.RenderConfig(seed=5), 30, tmp_path / "two")
    assert manifest_hash(tmp_path / "one" / "manifest.tsv") == manifest_hash(tmp_path / "two" / "manifest.tsv")
    # and image bytes, not just the manifest
    rel = open(tmp_path / "one" / "manifest.tsv", encoding="utf-8").readline().split("\t")[0]
    assert open(tmp_path / "one" / rel, "rb").read() == open(tmp_path / "two" / rel, "rb").read()


def test_generate_dataset_empty_lexicon(tmp_path):
    with pytest.raises(EmptyLexicon):
        sg.generate_dataset([], sg.get_script("A"), sg.RenderConfig(), 5, tmp_path / "ds")
    with pytest.raises(EmptyLexicon):
        sg.generate_dataset(["ab"], sg.get_script("A"), sg.RenderConfig(), 0, tmp_path / "ds")


def test_load_manifest_roundtrip(tmp_path):
    atlas = sg.get_script("A")
    lex = sg.builtin_lexicon(atlas, 8, seed=3)
    sg.generate_dataset(lex, atlas, sg.RenderConfig(seed=3), 12, tmp_path / "ds")
    triples = sg.load_manifest(tmp_path / "ds")
    assert len(triples) == 12
    img, label, script = triples[0]
    assert img.shape == (32, 100) and script == "A" and label


def test_builtin_lexicon_deterministic_and_distinct():
    atlas = sg.get_script("C")
    a = sg.builtin_lexicon(atlas, 50, seed=4)
    b = sg.builtin_lexicon(atlas, 50, seed=4)
    assert a == b
    assert len(set(a)) == 50
    assert all(3 <= len(w) <= 8 for w in a)


def test_worker_count_env(monkeypatch):
    monkeypatch.setenv("STR_LAB_THREADS", "3")
    assert sg.worker_count() == 3
    monkeypatch.setenv("STR_LAB_THREADS", "0")
    assert sg.worker_count() == 1
