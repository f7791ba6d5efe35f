import hashlib

import numpy as np
import pytest

from chartroute.chartsynth import make_quadruple
from chartroute.numkit import DimensionError, grad_check, mse_loss
from chartroute.toystack import (
    DecoderHead,
    InputError,
    PatchEncoder,
    TextEmbedder,
    decode_backward,
    decode_with_lora,
    embed_text,
    encode_chart,
    patch_features,
    tokenize,
)

# sha256 of the float64 token bytes for the seed-0 chart, recorded once
FIXTURE_TOKENS_SHA = "ac3a8aace0111d84580ecf1cd225ed70364bbfb54969799428600eb4f827c407"


def test_white_image_gives_identical_tokens():
    enc = PatchEncoder.build(32, seed=0)
    tok = encode_chart(enc, np.full((490, 490, 3), 255, np.uint8))
    assert tok.shape == (49, 32)
    assert np.all(tok == tok[0])


@pytest.mark.parametrize("g", [1, 3, 7, 10])
def test_token_count_is_grid_squared(g):
    enc = PatchEncoder.build(8, grid=g, seed=1)
    img = np.random.default_rng(g).integers(0, 256, (60, 70, 3), dtype=np.uint8)
    assert encode_chart(enc, img).shape == (g * g, 8)


def test_degenerate_images_rejected():
    enc = PatchEncoder.build(8, seed=0)
    with pytest.raises(InputError):
        encode_chart(enc, np.zeros((5, 100, 3), np.uint8))
    with pytest.raises(InputError):
        encode_chart(enc, np.zeros((100, 100), np.uint8))


def test_patch_features_closed_form():
    img = np.zeros((14, 14, 3), np.uint8)
    img[:, ::2] = 255  # vertical stripes
    f = patch_features(img, 7)
    np.testing.assert_allclose(f[0], [0.5, 0.5, 0.5, 4 * 0.25, 4 * 1.0, 0.0])


def test_fixture_chart_tokens_recorded_hash():
    enc = PatchEncoder.build(32, seed=0)
    tok = encode_chart(enc, make_quadruple(0).raster)
    assert hashlib.sha256(np.ascontiguousarray(tok).tobytes()).hexdigest() == FIXTURE_TOKENS_SHA


def test_frozen_projections_reproducible_and_read_only():
    a, b = PatchEncoder.build(32, seed=3), PatchEncoder.build(32, seed=3)
    assert np.array_equal(a.proj, b.proj)
    with pytest.raises(ValueError):
        a.proj[0, 0] = 1.0
    with pytest.raises(ValueError):
        DecoderHead.build(seed=0).W[0, 0] = 1.0


def test_embed_text_contracts():
    emb = TextEmbedder.build(seed=0)
    v = embed_text(emb, "Revenue,2019,45.5")
    assert np.array_equal(v, embed_text(emb, "Revenue,2019,45.5"))
    assert abs(np.linalg.norm(v) - 1) <= 1e-9
    a, b = embed_text(emb, "1,2,3"), embed_text(emb, "4,5,6")
    assert float(a @ b) < 1
    assert np.array_equal(embed_text(emb, "  "), np.zeros(48))


def test_tokenize():
    assert tokenize("Hello, World 3.5") == ["hello", ",", "world", "3", ".", "5"]


def test_zero_adapter_identity():
    rng = np.random.default_rng(0)
    head = DecoderHead.build(16, dim=12, seed=0)
    P = rng.normal(size=(5, 16))
    assert np.array_equal(decode_with_lora(head, P), P @ head.W)
    head.lora_B = rng.normal(size=head.lora_B.shape)
    head.lora_A = np.zeros_like(head.lora_A)
    assert np.array_equal(decode_with_lora(head, P), P @ head.W)
    with pytest.raises(DimensionError):
        decode_with_lora(head, np.zeros(3))


def test_full_rank_adapter_reproduces_any_update():
    rng = np.random.default_rng(1)
    d, e = 6, 5
    head = DecoderHead.build(d, dim=e, rank=min(d, e), seed=0)
    dW = rng.normal(size=(d, e))
    U, s, Vt = np.linalg.svd(dW, full_matrices=False)
    head.lora_A = U * s / head.scale
    head.lora_B = Vt
    P = rng.normal(size=(4, d))
    np.testing.assert_allclose(decode_with_lora(head, P), P @ (head.W + dW), atol=1e-12)


def test_lora_grad_check_and_frozen_w():
    rng = np.random.default_rng(2)
    head = DecoderHead.build(8, dim=6, rank=3, seed=0)
    head.lora_B = rng.normal(size=head.lora_B.shape)
    P, T = rng.normal(size=(5, 8)), rng.normal(size=(5, 6))
    W_before = head.W.copy()

    def loss_fn():
        loss, d = mse_loss(decode_with_lora(head, P), T)
        _, g = decode_backward(head, P, d)
        return loss, g

    rep = grad_check(loss_fn, head.lora_params())
    assert rep.passed and rep.max_rel_err <= 1e-4
    _, g = loss_fn()
    assert set(g) == {"lora.A", "lora.B"}
    assert np.array_equal(head.W, W_before)

    # the pooled input gradient is also correct
    def loss_p():
        loss, d = mse_loss(decode_with_lora(head, P), T)
        return loss, {"P": decode_backward(head, P, d)[0]}

    assert grad_check(loss_p, {"P": P}).passed
