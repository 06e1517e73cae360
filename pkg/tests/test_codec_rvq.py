import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from progtx.codec_rvq import (BudgetTooSmall, Codebook, Projector, ResidualStack, RVQCodec,
                              TokenMap, assemble_patches, cluster_codebook, codebook_bytes,
                              extract_patches, fit_projector, m_stages, nearest, pack_indices,
                              parse_token_packet, read_codebook, rq_decode, rq_decode_batch,
                              rq_encode, rq_encode_batch, select_codebook, token_packet,
                              train_codebook_family, train_kmeans, train_residual_stack,
                              training_patches, unpack_indices, write_codebook)
from progtx.imageio import ImageBuffer, load_manifest
from progtx.simulator import PROJECTOR_FILE, STACK_FILE


def rand_image(w, h, seed=0):
    return ImageBuffer(np.random.default_rng(seed).integers(0, 256, (h, w, 3), dtype=np.uint8))


def toy_stack(seed=0, k=3, dim=2, stages=2):
    rng = np.random.default_rng(seed)
    # the Codebook type wants 2^bpi entries; pad a 3-entry book with far-away decoys
    books = []
    for s in range(stages):
        e = rng.normal(0, 1.0 / (s + 1), (k, dim))
        pad = np.full((4 - k, dim), 1e6)
        books.append(Codebook(np.vstack([e, pad]).astype(np.float32)))
    return ResidualStack(tuple(books), (0.0,) * stages)


# -- patches -----------------------------------------------------------------

def test_patch_grid_and_round_trip():
    img = rand_image(16, 16, 1)
    g = extract_patches(img, 8)
    assert g.vectors.shape == (2, 2, 192)
    assert np.array_equal(assemble_patches(g).pixels, img.pixels)
    odd = rand_image(13, 11, 2)
    assert np.array_equal(assemble_patches(extract_patches(odd)).pixels, odd.pixels)
    flat = extract_patches(ImageBuffer.filled(24, 16, 77)).flat
    assert np.all(flat == flat[0])


def test_training_patch_counts():
    imgs = [rand_image(24, 16, 3)]
    assert training_patches(imgs, 8).shape == (6, 192)
    assert training_patches(imgs, 8, 1).shape == (17 * 9, 192)


# -- projector ---------------------------------------------------------------

def test_projector_exact_plane():
    rng = np.random.default_rng(0)
    basis = np.linalg.qr(rng.normal(size=(10, 2)))[0].T
    x = (rng.normal(size=(200, 2)) * [5.0, 2.0]) @ basis + 3.0
    p = fit_projector(x, 2)
    assert np.max(np.abs(p.back_project(p.project(x)) - x)) < 1e-6
    assert np.allclose(p.rows @ p.rows.T, np.eye(2), atol=1e-6)


def test_projector_isotropic_invariants():
    x = np.random.default_rng(1).normal(size=(500, 6))
    p = fit_projector(x, 3)
    assert np.allclose(p.rows @ p.rows.T, np.eye(3), atol=1e-6)
    assert np.all(np.diff(p.variances) <= 1e-9)


def test_projector_captures_embedded_variance():
    rng = np.random.default_rng(2)
    basis = np.linalg.qr(rng.normal(size=(30, 4)))[0].T
    x = (rng.normal(size=(1000, 4)) * [9, 5, 3, 2]) @ basis + rng.normal(0, 1e-3, (1000, 30))
    p = fit_projector(x, 4)
    eig = np.linalg.eigvalsh(np.cov(x.T, bias=True))[::-1]
    assert p.variances.sum() >= 0.999 * eig.sum()
    assert np.allclose(p.variances, eig[:4], rtol=1e-6)


def test_projector_errors(tmp_path):
    with pytest.raises(ValueError):
        fit_projector(np.ones((10, 5)), 2)
    with pytest.raises(ValueError):
        fit_projector(np.random.default_rng(0).normal(size=(3, 5)), 4)
    p = fit_projector(np.random.default_rng(0).normal(size=(50, 5)), 2)
    p.to_npz(tmp_path / "p.npz")
    q = Projector.from_npz(tmp_path / "p.npz")
    assert np.array_equal(q.rows, p.rows) and np.array_equal(q.mean, p.mean)


# -- k-means -----------------------------------------------------------------

def test_nearest_matches_brute_force_with_ties():
    rng = np.random.default_rng(4)
    c = rng.integers(-3, 4, (40, 3)).astype(float)
    x = rng.integers(-3, 4, (500, 3)).astype(float)
    idx, d = nearest(x, c)
    for i in range(len(x)):
        dist = [float(np.sum((x[i] - cj) ** 2)) for cj in c]
        best = min(range(len(c)), key=lambda j: (dist[j], j))
        assert idx[i] == best and d[i] == dist[best]


def test_nearest_kdtree_path_matches_brute_force():
    rng = np.random.default_rng(5)
    c = rng.integers(0, 20, (1024, 2)).astype(float)  # many exact duplicates and ties
    x = rng.integers(0, 20, (300, 2)).astype(float) + 0.5
    idx, d = nearest(x, c)
    full = ((x[:, None] - c[None]) ** 2).sum(-1)
    ref = np.argmin(full, axis=1)  # first minimum = lowest index
    assert np.array_equal(d, full[np.arange(300), ref])
    assert np.array_equal(idx, ref)


def test_kmeans_exact_locations_and_mean():
    locs = np.array([[0.0, 0.0], [5.0, 5.0], [-4.0, 7.0]])
    x = np.repeat(locs, 10, axis=0)
    res = train_kmeans(x, 3, seed=1)
    assert res.objective[-1] == 0.0
    assert sorted(map(tuple, res.centroids)) == sorted(map(tuple, locs))
    one = train_kmeans(np.random.default_rng(0).normal(size=(40, 3)), 1)
    assert np.allclose(one.centroids[0], np.random.default_rng(0).normal(size=(40, 3)).mean(0))


def test_kmeans_beats_random_assignments():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(20, 2))
    res = train_kmeans(x, 3, seed=3)
    best_random = np.inf
    for _ in range(1000):
        a = rng.integers(0, 3, 20)
        obj = sum(np.sum((x[a == j] - x[a == j].mean(0)) ** 2) for j in range(3) if np.any(a == j))
        best_random = min(best_random, obj)
    assert res.objective[-1] <= best_random + 1e-9
    assert all(b <= a + 1e-9 for a, b in zip(res.objective, res.objective[1:]))


def test_kmeans_errors_and_determinism():
    x = np.repeat(np.eye(3), 4, axis=0)
    with pytest.raises(ValueError):
        train_kmeans(x, 4)
    with pytest.raises(ValueError):
        train_kmeans(np.zeros((0, 2)), 1)
    y = np.random.default_rng(0).normal(size=(200, 4))
    assert np.array_equal(train_kmeans(y, 8, seed=5).centroids, train_kmeans(y, 8, seed=5).centroids)


def test_cluster_codebook_examples():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(600, 3))
    large = train_kmeans(x, 64, seed=0).codebook
    same = cluster_codebook(large, 6)
    assert sorted(map(tuple, same.entries)) == sorted(map(tuple, large.entries))
    zero = cluster_codebook(large, 0)
    assert np.allclose(zero.entries[0], large.entries.astype(np.float64).mean(0), atol=1e-5)
    small = cluster_codebook(large, 3)
    assert small.bpi == 3
    assert np.mean(nearest(x, small.entries)[1]) >= np.mean(nearest(x, large.entries)[1])
    with pytest.raises(ValueError):
        cluster_codebook(large, 7)


def test_codebook_family():
    x = np.random.default_rng(9).normal(size=(800, 2))
    large, fam = train_codebook_family(x, range(3, 7), 64)
    assert list(fam) == [3, 4, 5, 6] and fam[6] is large
    assert all(len(fam[b]) == 1 << b for b in fam)


# -- residual stack ----------------------------------------------------------

def test_residual_stack_exact_corpus():
    x = np.random.default_rng(10).normal(size=(16, 3))
    s1 = train_residual_stack(x, 1, 4)
    assert s1.train_mse[0] < 1e-10
    s2 = train_residual_stack(x, 2, 4)
    assert np.max(np.abs(s2.stages[1].entries)) < 1e-5
    assert s2.train_mse[1] < 1e-10


def test_residual_stack_monotone():
    x = np.random.default_rng(11).normal(size=(2000, 4))
    s = train_residual_stack(x, 6, 4)
    assert all(b <= a for a, b in zip(s.train_mse, s.train_mse[1:]))
    with pytest.raises(ValueError):
        train_residual_stack(x, 0, 4)


def test_rq_encode_matches_brute_force_toy():
    stack = toy_stack()
    rng = np.random.default_rng(12)
    real = [s.entries[:3].astype(np.float64) for s in stack.stages]
    for _ in range(100):
        x = rng.normal(size=2)
        c1 = min(range(3), key=lambda j: (np.sum((real[0][j] - x) ** 2), j))
        c2 = min(range(3), key=lambda j: (np.sum((real[0][c1] + real[1][j] - x) ** 2), j))
        assert rq_encode(x, stack, 2) == [c1, c2]


def test_rq_m1_is_nearest_neighbour_and_codeword_identity():
    stack = toy_stack(1)
    x = np.random.default_rng(13).normal(size=(200, 2))
    assert np.array_equal(rq_encode_batch(x, stack, 1)[:, 0],
                          nearest(x, stack.stages[0].entries)[0])
    cw = stack.stages[0].entries[1].astype(np.float64)
    assert rq_encode(cw, stack, 1) == [1]
    assert np.allclose(rq_decode([1], stack), cw)


def test_rq_decode_prefixes_and_errors():
    stack = toy_stack(2)
    assert np.array_equal(rq_decode([], stack), np.zeros(2))
    x = np.random.default_rng(14).normal(size=(50, 2))
    codes = rq_encode_batch(x, stack, 2)
    resid = x.copy()
    for m in (1, 2):
        resid = resid - stack.stages[m - 1].entries.astype(np.float64)[codes[:, m - 1]]
        # same residuals up to the order of float additions
        assert np.allclose(x - rq_decode_batch(codes[:, :m], stack), resid, rtol=0, atol=1e-9)
    with pytest.raises(IndexError):
        rq_decode([4], stack)
    with pytest.raises(ValueError):
        rq_encode(x[0], stack, 3)


# -- budget rules ------------------------------------------------------------

def family_stub(lo=8, hi=16):
    return {b: Codebook(np.zeros((1 << b, 1), np.float32)) for b in range(lo, hi + 1)}


def test_select_codebook_examples():
    fam = family_stub()
    assert select_codebook(fam, 61440, 768, 512) == 10
    with pytest.raises(BudgetTooSmall, match="budget too small"):
        select_codebook(fam, 49151, 768, 512)
    assert select_codebook(fam, 10**9, 768, 512) == 16


def test_budget_rules_match_exhaustive_oracles():
    fam = family_stub()
    rng = np.random.default_rng(15)
    for budget in rng.integers(0, 200_000, 1000):
        budget = int(budget)
        feasible = [b for b in range(8, 17) if 6144 * b <= budget]
        if feasible:
            assert select_codebook(fam, budget, 768, 512) == max(feasible)
        else:
            with pytest.raises(BudgetTooSmall):
                select_codebook(fam, budget, 768, 512)
        per = int(rng.integers(1, 60_000))
        expect = max(m for m in range(0, 11) if m * per <= budget)
        assert m_stages(budget, per, 10) == expect


def test_m_stages_examples():
    assert m_stages(100_000, 49152, 10) == 2
    assert m_stages(100, 49152, 10) == 0
    assert m_stages(10**9, 49152, 10) == 10
    with pytest.raises(ValueError):
        m_stages(10, 0, 10)


# -- serialization -----------------------------------------------------------

@settings(max_examples=100, deadline=None)
@given(st.integers(1, 16).flatmap(
    lambda b: st.tuples(st.just(b), st.lists(st.integers(0, (1 << b) - 1), max_size=64))))
def test_pack_round_trip(args):
    bpi, idx = args
    raw = pack_indices(np.array(idx, dtype=np.int64), bpi)
    assert len(raw) == math.ceil(len(idx) * bpi / 8)
    assert unpack_indices(raw, bpi, len(idx)).tolist() == idx


def test_pack_bit_order():
    assert pack_indices(np.array([1, 2]), 3) == bytes([0b00101000])
    assert pack_indices(np.array([0xABC]), 12) == bytes([0xAB, 0xC0])


def test_token_packet_layout():
    raw = token_packet(9, 2, 8, np.array([1, 255, 7]))
    assert raw[0] == 0x54 and int.from_bytes(raw[1:5], "little") == 9
    assert raw[5] == 2 and raw[6] == 8 and int.from_bytes(raw[7:11], "little") == 3
    image_id, stage, bpi, idx = parse_token_packet(raw)
    assert (image_id, stage, bpi, idx.tolist()) == (9, 2, 8, [1, 255, 7])
    with pytest.raises(ValueError):
        parse_token_packet(b"\x55" + raw[1:])


def test_codebook_file_round_trip(tmp_path):
    stack = train_residual_stack(np.random.default_rng(16).normal(size=(300, 3)), 3, 3)
    write_codebook(tmp_path / "s.bin", stack)
    raw = (tmp_path / "s.bin").read_bytes()
    assert raw[:4] == b"RVQ1" and raw == codebook_bytes(stack)
    back = read_codebook(tmp_path / "s.bin")
    assert all(np.array_equal(a.entries, b.entries) for a, b in zip(back.stages, stack.stages))
    (tmp_path / "bad.bin").write_bytes(raw[:-1])
    with pytest.raises(ValueError):
        read_codebook(tmp_path / "bad.bin")
    single = Codebook(np.zeros((4, 2), np.float32))
    write_codebook(tmp_path / "c.bin", single)
    assert isinstance(read_codebook(tmp_path / "c.bin"), Codebook)


def test_codebook_validation():
    with pytest.raises(ValueError):
        Codebook(np.zeros((3, 2), np.float32))
    with pytest.raises(ValueError):
        Codebook(np.full((2, 2), np.nan, np.float32))
    with pytest.raises(ValueError):
        TokenMap(np.array([[4]]), 2, (1, 1))


# -- trained artifacts -------------------------------------------------------

@pytest.fixture(scope="module")
def trained(artifacts):
    stack = read_codebook(artifacts / STACK_FILE)
    return RVQCodec(stack, Projector.from_npz(artifacts / PROJECTOR_FILE))


def test_trained_stack_monotone(trained, desk_manifest):
    imgs = [im for _, im in load_manifest(desk_manifest).load("calibration")]
    z = trained.projector.project(training_patches(imgs, 8, 2))
    codes = rq_encode_batch(z, trained.stack, 10)
    mse = [np.mean(np.sum((z - rq_decode_batch(codes[:, :m], trained.stack)) ** 2, axis=1))
           for m in range(1, 11)]
    assert all(b <= a for a, b in zip(mse, mse[1:]))


def test_held_out_patches_mostly_monotone(trained, desk_manifest):
    imgs = [im for _, im in load_manifest(desk_manifest).load("evaluation")]
    ok = total = 0
    for img in imgs:
        _, z = trained.vectors(img)
        codes = rq_encode_batch(z, trained.stack, 10)
        errs = [np.sum((z - rq_decode_batch(codes[:, :m], trained.stack)) ** 2, axis=1)
                for m in range(1, 11)]
        errs = np.stack(errs, axis=1)
        ok += int(np.sum(np.all(np.diff(errs, axis=1) <= 1e-9, axis=1)))
        total += len(z)
    assert ok >= 0.95 * total


def test_codec_decode_shapes_and_stage_bits(trained, desk_manifest):
    img = load_manifest(desk_manifest).load("evaluation")[0][1]
    tok = trained.encode(img, 4)
    assert tok.stages == 4 and tok.grid == (8, 12)
    out = trained.decode(tok, img.width, img.height, 2)
    assert (out.width, out.height) == (img.width, img.height)
    assert trained.stage_bits(img.width, img.height) == 11 * 8 + 96 * 8


def test_artifact_family_files(artifacts):
    large = read_codebook(artifacts / "codebook_large.bin")
    assert len(large) == 16384
    for bpi in range(8, 15):
        assert read_codebook(artifacts / f"codebook_bpi{bpi}.bin").bpi == bpi
