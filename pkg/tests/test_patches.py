import numpy as np
import pytest

from sftnet.errors import DimensionError
from sftnet.patches import (PatchGrid, final_patch_expand, patch_embed, patch_expand, patch_extract,
                            patch_merge, patch_unextract, space_to_tokens, tokens_to_space)
from sftnet.tensor import Tensor

from conftest import check_op


def tokens_loop(x, p):
    """Loop oracle: token (r, c) holds its p x p block flattened (row, col, channel)."""
    b, h, w, c = x.shape
    out = np.zeros((b, (h // p) * (w // p), p * p * c))
    for n in range(b):
        for r in range(h // p):
            for q in range(w // p):
                vals = [x[n, r * p + i, q * p + j, ch] for i in range(p) for j in range(p) for ch in range(c)]
                out[n, r * (w // p) + q] = vals
    return out


def test_space_to_tokens_matches_loop(rng):
    x = rng.standard_normal((2, 8, 12, 3))
    np.testing.assert_array_equal(space_to_tokens(Tensor(x), 4).data, tokens_loop(x, 4))


@pytest.mark.parametrize("patch", [1, 2, 4])
def test_space_token_round_trip(rng, patch):
    x = rng.standard_normal((2, 8, 8, 5))
    t = space_to_tokens(Tensor(x), patch)
    back = tokens_to_space(t, PatchGrid(8 // patch, 8 // patch), patch)
    np.testing.assert_array_equal(back.data, x)


def test_extract_unextract_round_trip(rng):
    x = rng.standard_normal((1, 16, 8, 2))
    t = patch_extract(Tensor(x), 4)
    assert t.shape == (1, 8, 32)
    np.testing.assert_array_equal(patch_unextract(t, PatchGrid(4, 2), 4).data, x)


def test_patch_embed_identity_is_flattening(rng):
    img = rng.random((1, 8, 8, 3))
    out = patch_embed(Tensor(img), Tensor(np.eye(48)), Tensor(np.zeros(48)))
    assert out.shape == (1, 4, 48)
    np.testing.assert_array_equal(out.data, tokens_loop(img, 4))


def test_patch_merge_matches_loop(rng):
    g, c = 4, 3
    x = rng.standard_normal((2, g * g, c))
    w = rng.standard_normal((4 * c, 2 * c))
    out = patch_merge(Tensor(x), PatchGrid(g, g), Tensor(w)).data
    grid = x.reshape(2, g, g, c)
    for i in range(g // 2):
        for j in range(g // 2):
            cat = np.concatenate([grid[:, 2 * i, 2 * j], grid[:, 2 * i, 2 * j + 1],
                                  grid[:, 2 * i + 1, 2 * j], grid[:, 2 * i + 1, 2 * j + 1]], axis=-1)
            np.testing.assert_allclose(out[:, i * (g // 2) + j], cat @ w, atol=1e-12)


def test_patch_expand_places_channel_groups(rng):
    g, c = 2, 4
    x = rng.standard_normal((1, g * g, c))
    out = patch_expand(Tensor(x), PatchGrid(g, g), Tensor(np.eye(c, 2 * c))).data
    assert out.shape == (1, 4 * g * g, c // 2)
    spatial = out.reshape(1, 2 * g, 2 * g, c // 2)
    y = np.concatenate([x, np.zeros_like(x)], axis=-1)  # identity-padded projection
    for i in range(g):
        for j in range(g):
            for a in range(2):
                for b in range(2):
                    k = (a * 2 + b) * (c // 2)
                    np.testing.assert_array_equal(spatial[0, 2 * i + a, 2 * j + b], y[0, i * g + j, k:k + c // 2])


def test_merge_then_expand_restores_shape(rng):
    x = Tensor(rng.standard_normal((2, 64, 8)))
    m = patch_merge(x, PatchGrid(8, 8), Tensor(rng.standard_normal((32, 16))))
    assert m.shape == (2, 16, 16)
    e = patch_expand(m, PatchGrid(4, 4), Tensor(rng.standard_normal((16, 32))))
    assert e.shape == (2, 64, 8)


def test_channel_ladder_at_toy_scale(rng):
    c, g = 8, 16
    x = patch_embed(Tensor(rng.random((1, 64, 64, 3))), Tensor(rng.standard_normal((48, c))))
    shapes = [x.shape[1:]]
    for _ in range(3):
        x = patch_merge(x, PatchGrid(g, g), Tensor(rng.standard_normal((4 * c, 2 * c))))
        g, c = g // 2, 2 * c
        shapes.append(x.shape[1:])
    assert shapes == [(256, 8), (64, 16), (16, 32), (4, 64)]


def test_final_expand_shape_and_errors(rng):
    x = Tensor(rng.standard_normal((1, 16, 8)))
    out = final_patch_expand(x, PatchGrid(4, 4), Tensor(rng.standard_normal((8, 32))), out_hw=(16, 16))
    assert out.shape == (1, 16, 16, 2)
    with pytest.raises(DimensionError):
        final_patch_expand(x, PatchGrid(4, 4), Tensor(rng.standard_normal((8, 32))), out_hw=(32, 32))
    with pytest.raises(DimensionError):
        final_patch_expand(x, PatchGrid(4, 4), Tensor(rng.standard_normal((8, 30))))


def test_shape_errors():
    with pytest.raises(DimensionError):
        space_to_tokens(Tensor(np.zeros((1, 6, 8, 1))), 4)
    with pytest.raises(DimensionError):
        patch_merge(Tensor(np.zeros((1, 9, 2))), PatchGrid(3, 3), Tensor(np.zeros((8, 4))))
    with pytest.raises(DimensionError):
        PatchGrid(4, 4).check(Tensor(np.zeros((1, 15, 2))))
    with pytest.raises(DimensionError):
        PatchGrid(0, 4)


@pytest.mark.parametrize("seed", range(5))
def test_patch_op_gradients(seed):
    r = np.random.default_rng(seed)
    probe = lambda y: (y * Tensor(np.random.default_rng(7).standard_normal(y.shape))).sum()
    check_op(lambda x, w, b: probe(patch_embed(x, w, b)),
             [r.random((1, 8, 8, 3)), r.standard_normal((48, 4)), r.standard_normal(4)])
    check_op(lambda x, w: probe(patch_merge(x, PatchGrid(4, 4), w)),
             [r.standard_normal((1, 16, 3)), r.standard_normal((12, 6))])
    check_op(lambda x, w: probe(patch_expand(x, PatchGrid(2, 2), w)),
             [r.standard_normal((1, 4, 4)), r.standard_normal((4, 8))])
    check_op(lambda x, w: probe(final_patch_expand(x, PatchGrid(2, 2), w)),
             [r.standard_normal((1, 4, 4)), r.standard_normal((4, 32))])
