import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from provfilter import annindex
from provfilter.annindex import DescriptorRecord, Neighbor, RecordTable
from provfilter.errors import EmptyInput, ImageIOError, InvalidParams, VersionMismatch

from .conftest import gaussian_mixture

BACKENDS = ["brute", "kdtree", "kdforest", "pq", "hkmeans"]
UNBOUNDED = {
    "brute": None,
    "kdtree": {"max_leaf_checks": None},
    "kdforest": {"max_leaf_checks": None},
    "pq": {"rerank_factor": 0, "ks": 64, "iters": 8},
    "hkmeans": {"max_leaf_checks": None, "branching": 8, "leaf_size": 32},
}
FAST = {"pq": {"ks": 64, "iters": 8}, "hkmeans": {"branching": 8, "leaf_size": 32}}


def table(X, per_image=10):
    n = len(X)
    names = [f"img{i:04d}" for i in range((n + per_image - 1) // per_image)]
    idx = np.arange(n) // per_image
    return RecordTable(X, names, idx, np.arange(n) % per_image)


def exact(X, Q, k):
    """Independent float64 oracle, ties broken by global id."""
    d = ((Q[:, None, :].astype(np.float64) - X[None].astype(np.float64)) ** 2).sum(-1)
    order = np.lexsort((np.broadcast_to(np.arange(len(X)), d.shape), d), axis=1)[:, :k]
    return order, np.take_along_axis(d, order, 1)


@pytest.fixture(scope="module")
def data():
    rng = np.random.default_rng(5)
    X = gaussian_mixture(rng, 3000, centres=30)
    Q = X[rng.choice(len(X), 60, replace=False)] + 0.2 * rng.normal(size=(60, 64)).astype(np.float32)
    return X, Q


@pytest.mark.parametrize("backend", BACKENDS)
def test_unbounded_search_equals_brute_force(backend, data):
    X, Q = data
    idx = annindex.build(table(X), backend, UNBOUNDED[backend], seed=3)
    ids, d2 = idx.search(Q, 10)
    ref_i, ref_d = exact(X, Q, 10)
    assert np.array_equal(ids, ref_i)
    np.testing.assert_allclose(d2, ref_d, rtol=1e-12, atol=1e-9)


@pytest.mark.parametrize("backend", BACKENDS)
def test_self_query_has_zero_distance(backend, data):
    X, _ = data
    idx = annindex.build(table(X), backend, UNBOUNDED[backend], seed=0)
    nb = annindex.knn(idx, X[17], 1)
    assert nb[0].distance == 0.0 and nb[0].global_id == 17


@pytest.mark.parametrize("backend", BACKENDS)
def test_single_record(backend):
    v = np.random.default_rng(0).normal(size=(1, 64)).astype(np.float32)
    q = np.zeros(64, np.float32)
    idx = annindex.build(table(v), backend, FAST.get(backend), seed=0)
    nb = annindex.knn(idx, q, 5)
    assert len(nb) == 1 and nb[0].global_id == 0
    assert nb[0].distance == pytest.approx(float(np.linalg.norm(v[0].astype(np.float64))), rel=1e-12)


def test_k_equal_n_returns_everything_sorted(data):
    X, Q = data
    small = X[:40]
    idx = annindex.build(table(small), "brute")
    nb = annindex.knn(idx, Q[0], 40)
    assert sorted(n.global_id for n in nb) == list(range(40))
    assert nb == sorted(nb)
    assert len(annindex.knn(idx, Q[0], 1000)) == 40


@pytest.mark.parametrize("backend", BACKENDS)
def test_determinism(backend, data):
    X, Q = data
    a = annindex.build(table(X), backend, FAST.get(backend), seed=9)
    b = annindex.build(table(X), backend, FAST.get(backend), seed=9)
    for x, y in zip(a.search(Q, 5), b.search(Q, 5)):
        assert np.array_equal(x, y)


@pytest.mark.parametrize("backend", BACKENDS)
def test_save_load_roundtrip(backend, data, tmp_path):
    X, Q = data
    idx = annindex.build(table(X), backend, FAST.get(backend), seed=2, epsilon=0.1)
    path = tmp_path / f"{backend}.pfix"
    annindex.save_index(idx, path)
    back = annindex.load_index(path)
    assert back.backend == backend and back.params == idx.params and back.epsilon == 0.1
    assert back.records.image_names == idx.records.image_names
    assert annindex.knn_batch(back, Q, 5) == annindex.knn_batch(idx, Q, 5)
    assert annindex.stats(back)["memory_bytes"] == annindex.stats(idx)["memory_bytes"]


def test_load_wrong_magic(tmp_path):
    p = tmp_path / "x.pfix"
    p.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(VersionMismatch):
        annindex.load_index(p)


def test_load_wrong_version(data, tmp_path):
    X, _ = data
    p = tmp_path / "x.pfix"
    annindex.save_index(annindex.build(table(X[:50]), "brute"), p)
    raw = bytearray(p.read_bytes())
    raw[4] = 99
    p.write_bytes(bytes(raw))
    with pytest.raises(VersionMismatch):
        annindex.load_index(p)


def test_save_into_missing_directory(data, tmp_path):
    X, _ = data
    with pytest.raises(ImageIOError):
        annindex.save_index(annindex.build(table(X[:50]), "brute"), tmp_path / "missing" / "x.pfix")
    with pytest.raises(ImageIOError):
        annindex.load_index(tmp_path / "missing" / "x.pfix")


def test_invalid_params():
    X = np.zeros((10, 64), np.float32)
    with pytest.raises(InvalidParams):
        annindex.build(table(X), "pq", {"m": 7})
    with pytest.raises(InvalidParams):
        annindex.build(table(X), "hkmeans", {"branching": 1})
    with pytest.raises(InvalidParams):
        annindex.build(table(X), "kdtree", {"bogus": 1})
    with pytest.raises(InvalidParams):
        annindex.build(table(X), "nope")
    with pytest.raises(InvalidParams):
        annindex.build(table(X), "brute", epsilon=-1)


def test_empty_input():
    with pytest.raises(EmptyInput):
        annindex.build(RecordTable(np.zeros((0, 64), np.float32), [], [], []), "brute")


def test_wrong_dimension():
    with pytest.raises(InvalidParams):
        RecordTable(np.zeros((3, 32), np.float32), ["a"], [0, 0, 0], [0, 1, 2])


def test_from_records_requires_dense_ids():
    v = np.zeros(64, np.float32)
    recs = [DescriptorRecord(0, "a", 0, v), DescriptorRecord(2, "a", 1, v)]
    with pytest.raises(InvalidParams):
        RecordTable.from_records(recs)
    ok = RecordTable.from_records([DescriptorRecord(1, "b", 0, v), DescriptorRecord(0, "a", 3, v)])
    assert ok.image_id(0) == "a" and ok.record(1).keypoint_ordinal == 0


def test_knn_batch_plumbing(data):
    X, Q = data
    idx = annindex.build(table(X), "kdforest", seed=1)
    assert annindex.knn_batch(idx, np.zeros((0, 64), np.float32), 3) == []
    assert annindex.knn_batch(idx, Q[:1], 3) == [annindex.knn(idx, Q[0], 3)]
    batch = annindex.knn_batch(idx, Q[:50], 4)
    assert batch == [annindex.knn(idx, q, 4) for q in Q[:50]]
    with pytest.raises(InvalidParams):
        annindex.knn(idx, Q[0], 0)


@pytest.mark.parametrize("backend", BACKENDS)
def test_lists_sorted_and_unique(backend, data):
    X, Q = data
    idx = annindex.build(table(X), backend, FAST.get(backend), seed=4)
    for nl in annindex.knn_batch(idx, Q, 8):
        assert nl == sorted(nl)
        assert len({n.global_id for n in nl}) == len(nl)


def test_kdforest_recall_on_small_gaussian():
    rng = np.random.default_rng(21)
    X = rng.normal(size=(1000, 64)).astype(np.float32)
    Q = rng.normal(size=(100, 64)).astype(np.float32)
    idx = annindex.build(table(X), "kdforest", seed=0)
    got = idx.search(Q, 1)[0][:, 0]
    assert np.mean(got == exact(X, Q, 1)[0][:, 0]) >= 0.9


def test_epsilon_bound_with_unlimited_checks(data):
    X, Q = data
    ref = exact(X, Q, 1)[1][:, 0]
    for backend in ("kdtree", "kdforest"):
        idx = annindex.build(table(X), backend, {"max_leaf_checks": None}, epsilon=0.0)
        np.testing.assert_allclose(idx.search(Q, 1)[1][:, 0], ref, rtol=1e-12)
        loose = annindex.build(table(X), backend, {"max_leaf_checks": None}, epsilon=0.5)
        d = loose.search(Q, 1)[1][:, 0]
        assert np.all(np.sqrt(d) <= 1.5 * np.sqrt(ref) + 1e-9)


def test_stats(data):
    X, _ = data
    n = len(X)
    brute = annindex.stats(annindex.build(table(X), "brute"))
    assert brute["N"] == n and brute["memory_bytes"] >= n * 64 * 4
    pq = annindex.stats(annindex.build(table(X), "pq", {"ks": 256, "iters": 2}))
    assert pq["components"]["codes"] == n * 8
    assert pq["rerank_store_bytes"] == n * 64 * 4
    kd = annindex.stats(annindex.build(table(X), "kdtree"))
    kf = annindex.stats(annindex.build(table(X), "kdforest"))
    assert kf["memory_bytes"] >= kd["memory_bytes"] >= n * 64 * 4
    assert kf["params"]["num_trees"] == 2


def test_neighbor_order():
    assert Neighbor(1.0, 5) < Neighbor(1.0, 6) < Neighbor(2.0, 0)


@settings(max_examples=25, deadline=None)
@given(
    st.integers(1, 60),
    st.integers(1, 12),
    st.sampled_from(BACKENDS),
    st.integers(0, 2**31 - 1),
)
def test_property_unbounded_equals_oracle(n, k, backend, seed):
    rng = np.random.default_rng(seed)
    # small integer grid forces many exact distance ties
    X = rng.integers(-2, 3, size=(n, 64)).astype(np.float32)
    Q = rng.integers(-2, 3, size=(5, 64)).astype(np.float32)
    idx = annindex.build(table(X, 7), backend, UNBOUNDED[backend], seed=seed % 1000)
    ids, d2 = idx.search(Q, k)
    ref_i, ref_d = exact(X, Q, min(k, n))
    assert np.array_equal(ids, ref_i)
    assert np.array_equal(d2, ref_d)
