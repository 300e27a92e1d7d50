import numpy as np
import pytest

from sftnet.errors import DimensionError, ParameterError
from sftnet.swin import (MASK_VALUE, SwinLayerParams, WindowSpec, effective_window, layer_param_shapes,
                         relative_position_index, shifted_window_mask, swin_block, swin_layer,
                         window_attention, window_partition, window_reverse)
from sftnet.tensor import Tensor

from conftest import check_op


def make_params(rng, c, window, heads, scale=0.5, rel_bias=True, dtype=np.float64):
    kw = {}
    for name, shape, init in layer_param_shapes(c, window, heads, 2.0, rel_bias):
        if init == "ones":
            arr = 1.0 + 0.1 * rng.standard_normal(shape)
        else:
            arr = scale * rng.standard_normal(shape)
        kw[name] = Tensor(arr.astype(dtype), requires_grad=True)
    return SwinLayerParams(**kw)


def brute_force_attention(x, g, window, shift, p, heads):
    """Masked attention computed token-pair by token-pair on the unshifted grid.

    Tokens i, j may attend iff they fall in the same window after the cyclic
    shift and agree, per axis, on whether they wrapped around the border
    (original coordinate < shift).
    """
    b, n, c = x.shape
    d = c // heads
    qkv = x @ p.qkv_w.data + p.qkv_b.data
    q, k, v = qkv[..., :c], qkv[..., c:2 * c], qkv[..., 2 * c:]
    table = p.rel_bias.data if p.rel_bias is not None else None
    out = np.zeros((b, n, c))
    coords = [(i // g, i % g) for i in range(n)]
    for bi in range(b):
        for i, (ri, ci) in enumerate(coords):
            si, ti = (ri - shift) % g, (ci - shift) % g
            allowed = []
            for j, (rj, cj) in enumerate(coords):
                sj, tj = (rj - shift) % g, (cj - shift) % g
                same_window = si // window == sj // window and ti // window == tj // window
                same_wrap = shift == 0 or ((ri < shift) == (rj < shift) and (ci < shift) == (cj < shift))
                if same_window and same_wrap:
                    allowed.append((j, si % window - sj % window, ti % window - tj % window))
            for h in range(heads):
                sl = slice(h * d, (h + 1) * d)
                logits = []
                for j, dr, dc in allowed:
                    z = q[bi, i, sl] @ k[bi, j, sl] / np.sqrt(d)
                    if table is not None:
                        z += table[(dr + window - 1) * (2 * window - 1) + dc + window - 1, h]
                    logits.append(z)
                logits = np.array(logits)
                wts = np.exp(logits - logits.max())
                wts /= wts.sum()
                out[bi, i, sl] = sum(w * v[bi, j, sl] for w, (j, _, _) in zip(wts, allowed))
    return out @ p.proj_w.data + p.proj_b.data


@pytest.mark.parametrize("shift,heads", [(2, 1), (0, 1), (2, 2)])
def test_window_attention_matches_brute_force(rng, shift, heads):
    g, window, c = 8, 4, 4
    x = rng.standard_normal((2, g * g, c))
    p = make_params(rng, c, window, heads)
    got = window_attention(Tensor(x), g, g, p, WindowSpec(window, shift, heads)).data
    ref = brute_force_attention(x, g, window, shift, p, heads)
    assert np.max(np.abs(got - ref)) <= 1e-6


def test_shift_zero_is_plain_window_attention(rng):
    g, window, c = 8, 4, 4
    x = Tensor(rng.standard_normal((1, g * g, c)))
    p = make_params(rng, c, window, 1)
    a = window_attention(x, g, g, p, WindowSpec(window, 0, 1)).data
    b = window_attention(x, g, g, p, WindowSpec(window, 0, 1)).data
    np.testing.assert_array_equal(a, b)
    ref = brute_force_attention(x.data, g, window, 0, p, 1)
    assert np.max(np.abs(a - ref)) <= 1e-6


def test_masked_tokens_do_not_leak(rng):
    g, window, shift, c = 8, 4, 2, 4
    p = make_params(rng, c, window, 1)
    x = rng.standard_normal((1, g * g, c))
    base = window_attention(Tensor(x), g, g, p, WindowSpec(window, shift, 1)).data
    # token (0, 0) wraps on both axes; it shares a shifted window with (7, 7)
    # but must stay invisible to it, and to every token outside that window
    x2 = x.copy()
    x2[0, 0] += 10.0
    moved = window_attention(Tensor(x2), g, g, p, WindowSpec(window, shift, 1)).data
    changed = np.nonzero(np.any(moved != base, axis=-1)[0])[0]
    assert set(changed) == {0, 1, 8, 9}


def test_mask_values_and_shape():
    m = shifted_window_mask(8, 8, 4, 2)
    assert m.shape == (4, 16, 16)
    assert set(np.unique(m)) == {0.0, MASK_VALUE}
    assert np.all(m[0] == 0)  # the interior window is unaffected by the wrap
    np.testing.assert_array_equal(m, m.transpose(0, 2, 1))


def test_masked_softmax_weight_is_exactly_zero():
    z = np.array([0.5, MASK_VALUE + 3.0], dtype=np.float32)
    w = np.exp(z - z.max())
    assert w[1] == 0.0


def test_partition_order_and_round_trip(rng):
    g, window = 4, 2
    x = np.arange(g * g, dtype=float).reshape(1, g * g, 1)
    win = window_partition(Tensor(x), g, g, window).data[..., 0]
    np.testing.assert_array_equal(win, [[0, 1, 4, 5], [2, 3, 6, 7], [8, 9, 12, 13], [10, 11, 14, 15]])
    y = rng.standard_normal((2, 64, 3))
    back = window_reverse(window_partition(Tensor(y), 8, 8, 4), 8, 8, 4).data
    np.testing.assert_array_equal(back, y)
    with pytest.raises(DimensionError):
        window_partition(Tensor(y), 8, 8, 3)


def test_relative_position_index_range():
    idx = relative_position_index(4)
    assert idx.shape == (16, 16)
    assert idx.min() == 0 and idx.max() == 48
    assert np.all(np.diag(idx) == 24)


def test_effective_window():
    assert effective_window(16, 16, 4) == (4, 2)
    assert effective_window(4, 4, 4) == (4, 0)
    assert effective_window(2, 2, 4) == (2, 0)


def test_window_spec_validation():
    with pytest.raises(ParameterError):
        WindowSpec(4, 4)
    with pytest.raises(ParameterError):
        WindowSpec(0)
    with pytest.raises(ParameterError):
        window_attention(Tensor(np.zeros((1, 16, 5))), 4, 4, make_params(np.random.default_rng(0), 5, 2, 1),
                         WindowSpec(2, 0, 2))


def test_zero_output_weights_make_layer_identity(rng):
    c = 4
    p = make_params(rng, c, 2, 2)
    for name in ("proj_w", "proj_b", "fc2_w", "fc2_b"):
        getattr(p, name).data[...] = 0.0
    x = rng.standard_normal((2, 16, c))
    out = swin_layer(Tensor(x), 4, 4, p, WindowSpec(2, 1, 2))
    np.testing.assert_array_equal(out.data, x)


def test_translation_equivariance_of_unshifted_layer(rng):
    # moving the input by a whole window moves the W-MSA output the same way
    g, window, c = 8, 4, 4
    p = make_params(rng, c, window, 1)
    x = rng.standard_normal((1, g, g, c))
    shifted = np.roll(x, window, axis=2)
    a = window_attention(Tensor(x.reshape(1, -1, c)), g, g, p, WindowSpec(window)).data.reshape(1, g, g, c)
    b = window_attention(Tensor(shifted.reshape(1, -1, c)), g, g, p, WindowSpec(window)).data
    np.testing.assert_allclose(np.roll(a, window, axis=2), b.reshape(1, g, g, c), atol=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_swin_block_gradients(seed):
    r = np.random.default_rng(seed)
    g, window, c, heads = 4, 2, 4, 2
    layers = [make_params(r, c, window, heads) for _ in range(2)]
    x = r.standard_normal((2, g * g, c))
    probe = np.random.default_rng(5).standard_normal((2, g * g, c))

    def fn(x_t, *flat):
        ls = [SwinLayerParams(*flat[:13]), SwinLayerParams(*flat[13:])]
        return (swin_block(x_t, g, g, ls, window, heads) * Tensor(probe)).sum()

    names = list(SwinLayerParams.__dataclass_fields__)
    arrays = [x] + [getattr(layer, n).data.copy() for layer in layers for n in names]
    # key-bias gradients are exactly zero (a per-row constant under softmax), so
    # the floor absorbs the ~1e-10 roundoff of the difference quotient there
    check_op(fn, arrays, tol=1e-5, floor=1e-4)
