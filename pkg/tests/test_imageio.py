import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from progtx.imageio import (Corpus, CorpusEntry, ImageBuffer, PPMError, default_data_root,
                            load_manifest, load_ppm, save_ppm, write_manifest)


@settings(max_examples=50, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(1, 12), st.integers(1, 12), st.just(3))))
def test_round_trip(tmp_path_factory, px):
    path = tmp_path_factory.mktemp("ppm") / "x.ppm"
    save_ppm(ImageBuffer(px), path)
    assert np.array_equal(load_ppm(path).pixels, px)


def test_header_with_comments(tmp_path):
    px = np.arange(2 * 3 * 3, dtype=np.uint8).reshape(2, 3, 3)
    path = tmp_path / "c.ppm"
    path.write_bytes(b"P6\n# a comment\n3 # width\n2\n255\n" + px.tobytes())
    img = load_ppm(path)
    assert (img.width, img.height) == (3, 2)
    assert np.array_equal(img.pixels, px)


@pytest.mark.parametrize("raw, msg", [
    (b"P5\n1 1\n255\n\x00", "not a binary PPM"),
    (b"P6\n1 1\n65535\n" + b"\x00" * 6, "maxval"),
    (b"P6\n2 2\n255\n\x00\x00", "truncated"),
    (b"P6\n2 x\n255\n", "malformed"),
    (b"P6\n2 2", "truncated"),
    (b"P6\n0 2\n255\n", "dimensions"),
])
def test_rejects_bad_files(tmp_path, raw, msg):
    path = tmp_path / "bad.ppm"
    path.write_bytes(raw)
    with pytest.raises(PPMError, match=msg):
        load_ppm(path)


def test_buffer_validation():
    with pytest.raises(ValueError):
        ImageBuffer(np.zeros((2, 2), np.uint8))
    with pytest.raises(ValueError):
        ImageBuffer(np.zeros((2, 2, 3), np.float64))
    assert ImageBuffer.filled(4, 3).pixels.shape == (3, 4, 3)


def test_corpus_ordering_and_splits(tmp_path):
    for n in ("b", "a", "c"):
        save_ppm(ImageBuffer.filled(2, 2), tmp_path / f"{n}.ppm")
    corpus = Corpus((CorpusEntry("b", tmp_path / "b.ppm", "evaluation"),
                     CorpusEntry("a", tmp_path / "a.ppm", "calibration"),
                     CorpusEntry("c", tmp_path / "c.ppm", "evaluation")))
    assert [e.name for e in corpus.entries] == ["a", "b", "c"]
    assert [e.name for e in corpus.split("evaluation")] == ["b", "c"]
    write_manifest(corpus, tmp_path / "manifest.json")
    again = load_manifest(tmp_path / "manifest.json")
    assert again == corpus
    assert [n for n, _ in again.load("calibration")] == ["a"]
    with pytest.raises(ValueError):
        Corpus((CorpusEntry("a", tmp_path / "a.ppm", "calibration"),
                CorpusEntry("a", tmp_path / "a.ppm", "evaluation")))
    with pytest.raises(ValueError):
        Corpus((CorpusEntry("a", tmp_path / "a.ppm", "training"),))


def test_kodak_geometry(kodak_manifest):
    corpus = load_manifest(kodak_manifest)
    for _, img in corpus.load():
        assert (img.width, img.height) == (768, 512)
    names = {e.name for e in corpus.split("calibration")}
    assert names.isdisjoint(e.name for e in corpus.split("evaluation"))


def test_data_root_env(monkeypatch):
    monkeypatch.setenv("PROGTX_DATA", "/somewhere")
    assert str(default_data_root()) == "/somewhere"
    monkeypatch.delenv("PROGTX_DATA")
    assert str(default_data_root()) == "data"
