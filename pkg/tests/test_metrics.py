import math
from fractions import Fraction

import numpy as np
import pytest

from partgen.blending import TriangleMesh, write_obj
from partgen.dataset import build_dataset
from partgen.metrics import (
    chamfer,
    chamfer_matrix,
    cov,
    cov_from_matrix,
    evaluate_generation,
    mmd,
    normalize_cloud,
    sample_shape,
)


def brute_chamfer(X, Y):
    """Double loop with exactly rounded means."""
    def one_way(A, B):
        mins = []
        for a in A:
            best = math.inf
            for b in B:
                dx, dy, dz = a[0] - b[0], a[1] - b[1], a[2] - b[2]
                best = min(best, dx * dx + dy * dy + dz * dz)
            mins.append(best)
        return float(sum(Fraction(m) for m in mins)) / len(A)
    return one_way(X, Y) + one_way(Y, X)


def brute_matrix(G, R):
    return np.array([[brute_chamfer(r, g) for g in G] for r in R])


def test_chamfer_trivial():
    X = np.random.default_rng(0).random((10, 3))
    assert chamfer(X, X) == 0.0
    assert chamfer([[0, 0, 0]], [[1, 0, 0]]) == 2.0


def test_chamfer_matches_brute_force(rng):
    for n, m in ((50, 50), (50, 17), (1, 30)):
        X, Y = rng.random((n, 3)), rng.normal(size=(m, 3))
        assert chamfer(X, Y) == brute_chamfer(X, Y)
        assert chamfer(X, Y) == chamfer(Y, X)


def test_chamfer_with_near_ties(rng):
    # a lattice gives many equidistant neighbours
    g = np.stack(np.meshgrid(*[np.arange(4.0)] * 3, indexing="ij"), -1).reshape(-1, 3)
    X = g + 0.5
    assert chamfer(X, g) == brute_chamfer(X, g)


def test_chamfer_rejects_bad_clouds():
    with pytest.raises(ValueError):
        chamfer(np.zeros((0, 3)), np.zeros((1, 3)))
    with pytest.raises(ValueError):
        chamfer([[np.nan, 0, 0]], [[0, 0, 0]])


def test_mmd_cov_trivial(rng):
    A, B, C = (rng.random((20, 3)) for _ in range(3))
    assert mmd([A], [A]) == 0.0
    assert mmd([B, C], [A]) == min(chamfer(A, B), chamfer(A, C))
    R = [rng.random((20, 3)) for _ in range(6)]
    assert cov(R, R) == 1.0
    assert cov([R[2]], R) == 1 / 6


def test_matrix_reductions_match_brute_force():
    rng = np.random.default_rng(11)
    for ng, nr in ((10, 10), (20, 20), (7, 13)):
        G = [rng.random((50, 3)) for _ in range(ng)]
        R = [rng.random((50, 3)) for _ in range(nr)]
        D = brute_matrix(G, R)
        assert np.array_equal(chamfer_matrix(G, R), D)
        assert mmd(G, R) == math.fsum(D.min(axis=1)) / nr
        # coverage: distinct nearest references, lowest index on ties
        claimed = set()
        for j in range(ng):
            col = list(D[:, j])
            claimed.add(col.index(min(col)))
        assert cov(G, R) == len(claimed) / nr


def test_cov_tie_breaks_to_lowest_reference():
    D = np.array([[1.0, 2.0], [1.0, 2.0], [3.0, 2.0]])
    assert cov_from_matrix(D) == 1 / 3  # both columns tie and pick row 0
    D = np.array([[1.0, 5.0], [1.0, 5.0], [3.0, 2.0]])
    assert cov_from_matrix(D) == 2 / 3


def test_parallel_matrix_is_identical(rng):
    G = [rng.random((40, 3)) for _ in range(5)]
    R = [rng.random((40, 3)) for _ in range(4)]
    assert np.array_equal(chamfer_matrix(G, R), chamfer_matrix(G, R, workers=3))


def test_normalization(rng):
    X = rng.normal(size=(100, 3)) * [3, 1, 0.5] + 7
    N = normalize_cloud(X)
    assert np.allclose(N.mean(0), 0, atol=1e-12)
    assert math.isclose((N.max(0) - N.min(0)).max(), 1.0)
    assert np.allclose(normalize_cloud(N), N, atol=1e-14)


def test_self_evaluation_and_reproducibility():
    m = build_dataset({"train": 0, "val": 0, "test": 4}, categories=["chair", "table"], seed=2)
    ref = m.split("test")
    r1 = evaluate_generation(ref, ref, n_points=512, seed=4)
    assert r1.cov_cd == 1.0 and r1.mmd_cd <= 1e-4
    r2 = evaluate_generation(ref, ref, n_points=512, seed=4)
    assert r1.to_text() == r2.to_text()
    lines = dict(line.split("=", 1) for line in r1.to_text().splitlines())
    assert set(lines) == {"mmd_cd_x1000", "cov_cd", "n_gen", "n_ref", "n_points", "seed"}
    assert lines["n_points"] == "512" and lines["seed"] == "4"


def test_unreadable_mesh_is_skipped(tmp_path):
    m = build_dataset({"train": 0, "val": 0, "test": 2}, categories=["table"], seed=2)
    (tmp_path / "bad.obj").write_text("v 1 2\nf x\n")
    write_obj(tmp_path / "empty.obj", TriangleMesh.empty())
    rep = evaluate_generation([tmp_path / "bad.obj", tmp_path / "empty.obj", m.split("test")[0]], m.split("test"),
                              n_points=128)
    assert rep.n_gen == 1 and len(rep.errors) == 2 and not rep.ok
    assert "error=" in rep.to_text()


def test_identical_shapes_sample_identically():
    m = build_dataset({"train": 0, "val": 0, "test": 1}, categories=["lamp"], seed=0)
    r = m.split("test")[0]
    assert np.array_equal(sample_shape(r, 64, 0), sample_shape(r, 64, 0))
    assert not np.array_equal(sample_shape(r, 64, 0), sample_shape(r, 64, 1))
