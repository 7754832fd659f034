import numpy as np
import pytest
from hypothesis import given, strategies as st

from s2sd import diffcore as dc
from s2sd.heads import (CheckpointError, FeatureBatch, HeadParams, TargetBank, embed, init_head,
                        load_checkpoint, normalize_features, pool, project, save_checkpoint)

from conftest import philox


def loop_pool(maps, mode):
    b, h, w, c = maps.shape
    out = np.zeros((b, c if mode == "avg" else 2 * c))
    for i in range(b):
        for k in range(c):
            vals = [maps[i, y, x, k] for y in range(h) for x in range(w)]
            out[i, k] = sum(vals) / len(vals)
            if mode != "avg":
                out[i, c + k] = max(vals)
    return out


def loop_forward(x, head):
    rows = []
    for row in x:
        v = list(row)
        for li, (w, b) in enumerate(head.layers):
            if li:
                v = [max(t, 0.0) for t in v]
            v = [sum(w[o, i] * v[i] for i in range(len(v))) + b[o] for o in range(w.shape[0])]
        n = sum(t * t for t in v) ** 0.5
        rows.append([t / n for t in v])
    return np.array(rows)


def test_pool_hand_values():
    maps = np.array([[1.0, 3.0], [5.0, 7.0]]).reshape(1, 2, 2, 1)
    fb = FeatureBatch(np.repeat(maps, 2, 0), [0, 1])
    np.testing.assert_allclose(pool(fb, "avg"), [[4.0], [4.0]])
    np.testing.assert_allclose(pool(fb, "avg_plus_max"), [[4.0, 7.0], [4.0, 7.0]])
    flat = philox(0).standard_normal((3, 1, 1, 5))
    np.testing.assert_array_equal(pool(flat, "avg"), flat[:, 0, 0])
    with pytest.raises(ValueError):
        pool(flat, "median")


@pytest.mark.parametrize("mode", ["avg", "avg_plus_max"])
def test_pool_matches_loop_oracle(mode):
    maps = philox(1).standard_normal((2, 4, 4, 3))
    np.testing.assert_allclose(pool(maps, mode), loop_pool(maps, mode), atol=1e-12)


@given(st.integers(0, 2**31))
def test_pool_is_permutation_invariant_over_space(seed):
    rng = philox(seed)
    maps = rng.standard_normal((2, 3, 3, 2))
    perm = rng.permutation(9)
    shuffled = maps.reshape(2, 9, 2)[:, perm].reshape(2, 3, 3, 2)
    for mode in ("avg", "avg_plus_max"):
        np.testing.assert_allclose(pool(maps, mode), pool(shuffled, mode), atol=1e-12)


def test_feature_batch_validation():
    with pytest.raises(ValueError):
        FeatureBatch(np.zeros((2, 3)), [0, 1])
    with pytest.raises(ValueError):
        FeatureBatch(np.zeros((2, 1, 1, 3)), [0, 1, 2])
    with pytest.raises(ValueError):
        FeatureBatch(np.zeros((1, 1, 1, 3)), [0])


def test_init_head_contract():
    h = init_head(4, 2, 1, seed=3)
    assert [w.shape for w, _ in h.layers] == [(2, 4)]
    np.testing.assert_array_equal(h.layers[0][1], [0.0, 0.0])
    assert np.abs(h.layers[0][0]).max() <= np.sqrt(6 / 4)
    again = init_head(4, 2, 1, seed=3)
    assert h.layers[0][0].tobytes() == again.layers[0][0].tobytes()
    deep = init_head(10, 3, 2, hidden_dim=64)
    assert [w.shape for w, _ in deep.layers] == [(64, 10), (3, 64)]
    with pytest.raises(ValueError):
        init_head(4, 2, 4)
    with pytest.raises(ValueError):
        HeadParams([(np.ones((2, 3)), np.ones(2)), (np.ones((2, 4)), np.ones(2))])


def test_embed_identity_normalizes():
    head = HeadParams([(np.eye(2), np.zeros(2))])
    np.testing.assert_allclose(embed(np.array([[3.0, 4.0]]), head).value, [[0.6, 0.8]])
    with pytest.raises(dc.ShapeError):
        embed(np.ones((2, 3)), head)


def test_embed_matches_loop_oracle():
    rng = philox(5)
    head = init_head(6, 3, 2, hidden_dim=5, seed=9)
    head = head.rebind([a if a.ndim == 2 else rng.uniform(-0.2, 0.2, a.shape)
                        for a in head.arrays()])
    x = rng.standard_normal((4, 6))
    np.testing.assert_allclose(embed(x, head).value, loop_forward(x, head), atol=1e-12)


@given(st.integers(0, 2**31), st.integers(1, 3))
def test_embed_rows_lie_on_sphere(seed, depth):
    rng = philox(seed)
    head = init_head(5, 4, depth, hidden_dim=6, seed=seed % 1000)
    x = rng.standard_normal((6, 5)) + 0.5
    e = embed(x, head)
    assert e.normalized and e.dim == 4
    norms = np.linalg.norm(e.value, axis=1)
    finite = np.linalg.norm(project(x, head).value, axis=1) > 1e-6
    np.testing.assert_allclose(norms[finite], 1.0, atol=1e-9)


def test_normalize_features():
    np.testing.assert_allclose(normalize_features(np.array([[3.0, 4.0]])).value, [[0.6, 0.8]])
    u = philox(2).standard_normal((5, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    np.testing.assert_allclose(normalize_features(u).value, u, atol=1e-15)


def test_gradient_through_normalization():
    w = philox(3).standard_normal((4, 3))
    fn = lambda x: dc.sum(normalize_features(x).embeddings * w)
    x = [philox(4).standard_normal((4, 3))]
    _, (g,) = dc.value_and_grad(fn, x)
    (f,) = dc.finite_difference_grad(fn, x)
    assert dc.relative_error(g, f) < 1e-7


def _bank_heads(depth, seed=0):
    rng = philox(seed)
    heads = [init_head(7, d, depth, hidden_dim=h, seed=seed + i, branch_id=f"target{d}")
             for i, (d, h) in enumerate([(4, 6), (6, 5), (9, 8)])]
    return [h.rebind([a if a.ndim == 2 else rng.uniform(-0.3, 0.3, a.shape) for a in h.arrays()])
            for h in heads]


@pytest.mark.parametrize("depth", [1, 2, 3])
def test_target_bank_equals_separate_heads(depth):
    heads = _bank_heads(depth)
    bank = TargetBank(heads)
    x = philox(9).standard_normal((5, 7))
    want = np.concatenate([project(x, h).value for h in heads], axis=1)
    np.testing.assert_allclose(bank.project(x).value, want, atol=1e-12)
    for a, b in zip(bank.unpack(), heads):
        assert a.branch_id == b.branch_id
        for ta, tb in zip(a.arrays(), b.arrays()):
            assert ta.tobytes() == tb.tobytes()


def test_target_bank_gradients_match_separate_heads():
    heads = _bank_heads(2)
    bank = TargetBank(heads)
    x = philox(10).standard_normal((5, 7))
    w = philox(11).standard_normal((5, sum(bank.out_dims)))
    _, g_bank = dc.value_and_grad(lambda *t: dc.sum(bank.rebind(t).project(x) * w), bank.arrays())
    flat = [a for h in heads for a in h.arrays()]

    def separate(*t):
        hs, pos = [], 0
        for h in heads:
            hs.append(h.rebind(t[pos:pos + 4]))
            pos += 4
        return dc.sum(dc.concatenate([project(x, h) for h in hs], axis=1) * w)

    _, g_sep = dc.value_and_grad(separate, flat)
    grads = bank.rebind(g_bank).unpack()
    for got, want in zip([a for h in grads for a in h.arrays()], g_sep):
        np.testing.assert_allclose(got, want, atol=1e-12)


def test_target_bank_rejects_mixed_depths():
    with pytest.raises(ValueError):
        TargetBank([init_head(3, 4, 1), init_head(3, 5, 2)])


def test_checkpoint_round_trip_is_byte_exact(tmp_path):
    heads = [init_head(5, 3, 1, seed=1, branch_id="base"),
             init_head(5, 8, 2, hidden_dim=6, seed=2, branch_id="target8")]
    path = tmp_path / "ckpt.bin"
    save_checkpoint(heads, path)
    loaded = load_checkpoint(path)
    assert list(loaded) == ["base", "target8"]
    save_checkpoint(list(loaded.values()), tmp_path / "again.bin")
    assert path.read_bytes() == (tmp_path / "again.bin").read_bytes()
    assert path.read_bytes().startswith(b"S2SDHEAD branch=base in=5 out=3 depth=1\n")


def test_checkpoint_errors(tmp_path):
    path = tmp_path / "ckpt.bin"
    save_checkpoint([init_head(5, 3, 2, seed=1)], path)
    data = path.read_bytes()
    (tmp_path / "short.bin").write_bytes(data[:-5])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "short.bin")
    (tmp_path / "junk.bin").write_bytes(b"\xff\xfe garbage\n")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.bin")
    with pytest.raises(ValueError):
        save_checkpoint([init_head(2, 2, branch_id="has space")], path)
