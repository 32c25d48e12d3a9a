"""Model architecture: shapes, sharing, invariances, persistence."""

import json

import numpy as np
import pytest

from onix4d import autodiff as ad
from onix4d import fileio, model
from onix4d.model import ModelConfig, Reconstructor

SMALL = ModelConfig(enc_channels=(4, 6), gen_width=16, n_view_blocks=2,
                    n_post_blocks=1, freq_xyz=2, freq_t=1,
                    disc_channels=(8, 8))


def small_images(rng, v=2, c=2, h=16, w=16):
    return rng.uniform(0, 1, size=(v, c, h, w)).astype(np.float32)


# ---------------------------------------------------------------------------
# config and embedding
# ---------------------------------------------------------------------------

def test_config_dims_and_validation():
    cfg = SMALL
    assert cfg.feature_dim == 10
    assert cfg.coord_dim == 3 + 6 * 2 + 1 + 2 * 1
    assert ModelConfig(use_time=False, freq_xyz=0).coord_dim == 3
    with pytest.raises(ValueError):
        ModelConfig(enc_channels=())
    with pytest.raises(ValueError):
        ModelConfig(n_view_blocks=0)


def test_fourier_embed_values_and_time():
    cfg = ModelConfig(freq_xyz=1, freq_t=1, use_time=True)
    pts = np.array([[0.5, -0.25, 0.0]])
    emb = model.fourier_embed(pts, 0.5, cfg, dtype=np.float64)
    assert emb.shape == (1, cfg.coord_dim)
    np.testing.assert_allclose(emb[0, :3], pts[0])
    np.testing.assert_allclose(emb[0, 3:6], np.sin(np.pi * pts[0]), atol=1e-12)
    np.testing.assert_allclose(emb[0, 6:9], np.cos(np.pi * pts[0]), atol=1e-12)
    assert emb[0, 9] == 0.5
    assert emb[0, 10] == pytest.approx(np.sin(np.pi * 0.5))
    assert emb[0, 11] == pytest.approx(np.cos(np.pi * 0.5))
    with pytest.raises(ValueError):
        model.fourier_embed(pts, None, cfg)
    no_time = model.fourier_embed(pts, None, ModelConfig(freq_xyz=1, use_time=False))
    assert no_time.shape == (1, 9)


# ---------------------------------------------------------------------------
# encoder and feature lookup
# ---------------------------------------------------------------------------

def test_encoder_pyramid_shapes():
    rng = np.random.default_rng(0)
    store = ad.ParamStore(0)
    feats = model.encode(store, ad.Tensor(small_images(rng)), SMALL)
    assert [f.data.shape for f in feats] == [(2, 4, 16, 16), (2, 6, 8, 8)]


def test_pixel_features_alignment_across_levels():
    # Ramp maps value = x pixel coordinate at each level; the half-res
    # lookup of full-res position x must read (x + 0.5) / 2 - 0.5.
    full = np.tile(np.arange(8, dtype=np.float32), (1, 1, 8, 1))
    half = np.tile(np.arange(4, dtype=np.float32), (1, 1, 4, 1))
    out = model.pixel_features([ad.Tensor(full), ad.Tensor(half)],
                               np.array([0]), np.array([[3.0, 2.0]]))
    np.testing.assert_allclose(out.data, [[3.0, (3.0 + 0.5) / 2 - 0.5]], atol=1e-6)


def test_pixel_features_constant_maps_ignore_position():
    maps = ad.Tensor(np.full((2, 3, 8, 8), 1.5, dtype=np.float32))
    xy = np.array([[1.2, 3.4], [6.0, 0.5]])
    out = model.pixel_features([maps], np.array([0, 1]), xy)
    np.testing.assert_allclose(out.data, 1.5, atol=1e-6)


# ---------------------------------------------------------------------------
# generator
# ---------------------------------------------------------------------------

def test_generate_shapes_nonneg_and_sharing():
    rng = np.random.default_rng(1)
    store = ad.ParamStore(0)
    n, v = 7, 3
    feats = ad.Tensor(rng.normal(size=(v * n, SMALL.feature_dim)).astype(np.float32))
    emb = model.fourier_embed(rng.uniform(-1, 1, size=(n, 3)), 0.3, SMALL)
    out = model.generate(store, feats, emb, v, SMALL)
    assert out.data.shape == (n, 2)
    assert np.all(out.data > 0)                   # softplus head
    # per-view blocks are one shared parameter set, not per-view copies
    view_params = [k for k in store.params if k.startswith("gen.view")]
    assert len(view_params) == SMALL.n_view_blocks * 4
    with pytest.raises(ad.ShapeError):
        model.generate(store, feats, emb[:3], v, SMALL)


def test_generate_is_view_permutation_invariant():
    rng = np.random.default_rng(2)
    store = ad.ParamStore(0)
    n, v = 5, 3
    feats = rng.normal(size=(v, n, SMALL.feature_dim)).astype(np.float32)
    emb = model.fourier_embed(rng.uniform(-1, 1, size=(n, 3)), 0.0, SMALL)
    base = model.generate(store, ad.Tensor(feats.reshape(v * n, -1)), emb, v, SMALL)
    perm = feats[[2, 0, 1]]
    swapped = model.generate(store, ad.Tensor(perm.reshape(v * n, -1)), emb, v, SMALL)
    np.testing.assert_allclose(base.data, swapped.data, atol=1e-6)


# ---------------------------------------------------------------------------
# discriminator
# ---------------------------------------------------------------------------

def test_discriminator_score_map():
    rng = np.random.default_rng(3)
    store = ad.ParamStore(0)
    patches = ad.Tensor(rng.uniform(0, 1, size=(4, 2, 32, 32)).astype(np.float32))
    scores = model.discriminate(store, patches, SMALL)
    assert scores.data.shape == (4, 1, 8, 8)
    assert np.all((scores.data > 0) & (scores.data < 1))


# ---------------------------------------------------------------------------
# reconstructor
# ---------------------------------------------------------------------------

def test_reconstructor_volume_shape_scale_and_determinism():
    rng = np.random.default_rng(4)
    images = small_images(rng)
    r1 = Reconstructor(SMALL, seed=0)
    r2 = Reconstructor(SMALL, seed=0)
    v1 = r1.volume(images, (0.0, 23.8), 0.5, 6, 2 / 16)
    v2 = r2.volume(images, (0.0, 23.8), 0.5, 6, 2 / 16)
    assert v1.shape == (6, 6, 6, 2)
    assert np.all(v1 > 0)
    np.testing.assert_array_equal(v1, v2)          # same seed, same init
    r3 = Reconstructor(SMALL, seed=1)
    assert not np.array_equal(v1, r3.volume(images, (0.0, 23.8), 0.5, 6, 2 / 16))
    # out_scale is a plain per-channel multiplier on the physical volume
    import dataclasses
    scaled_cfg = dataclasses.replace(SMALL, out_scale=(2.0, 3.0))
    r4 = Reconstructor(scaled_cfg, seed=0)
    v4 = r4.volume(images, (0.0, 23.8), 0.5, 6, 2 / 16)
    np.testing.assert_allclose(v4[..., 0], 2.0 * v1[..., 0], rtol=1e-6)
    np.testing.assert_allclose(v4[..., 1], 3.0 * v1[..., 1], rtol=1e-6)
    # volume chunking is invisible
    v5 = r1.volume(images, (0.0, 23.8), 0.5, 6, 2 / 16, chunk=17)
    np.testing.assert_array_equal(v5, v1)


def test_view_permutation_invariance_end_to_end():
    rng = np.random.default_rng(5)
    images = small_images(rng)
    r = Reconstructor(SMALL, seed=0)
    v_ab = r.volume(images, (0.0, 23.8), 0.2, 5, 2 / 16)
    v_ba = r.volume(images[::-1].copy(), (23.8, 0.0), 0.2, 5, 2 / 16)
    np.testing.assert_allclose(v_ab, v_ba, rtol=1e-4, atol=1e-10)


def test_gradients_reach_encoder_through_field():
    rng = np.random.default_rng(6)
    images = small_images(rng, h=8, w=8)
    r = Reconstructor(SMALL, seed=0)
    pyramids = r.encode_views(images)
    fn = r.field_fn(pyramids, (0.0, 23.8), 0.1, 8, 8, 2 / 8)
    out = fn(rng.uniform(-0.5, 0.5, size=(5, 3)))
    ad.backward(ad.tensor_sum(out))
    enc_grads = [p.grad for p in r.enc.params.values()]
    gen_grads = [p.grad for p in r.gen.params.values()]
    assert all(g is not None for g in enc_grads)
    assert all(g is not None for g in gen_grads)
    assert any(np.abs(g).max() > 0 for g in enc_grads)


def test_state_roundtrip_through_checkpoint(tmp_path):
    rng = np.random.default_rng(7)
    images = small_images(rng)
    r = Reconstructor(SMALL, seed=0)
    # touch every parameter once so the stores are fully populated
    before = r.volume(images, (0.0, 23.8), 0.5, 5, 2 / 16)
    model.discriminate(r.disc, ad.Tensor(rng.uniform(size=(1, 2, 32, 32)).astype(np.float32)), SMALL)
    ckpt = tmp_path / "m.ckpt"
    cfg_path = tmp_path / "m.json"
    fileio.save_checkpoint(str(ckpt), r.state_dict())
    r.save_config(str(cfg_path), extra={"note": 1})
    loaded = model.load_reconstructor(str(cfg_path), str(ckpt), seed=99)
    after = loaded.volume(images, (0.0, 23.8), 0.5, 5, 2 / 16)
    np.testing.assert_allclose(after, before, rtol=1e-6, atol=1e-12)
    payload = json.loads(cfg_path.read_text())
    assert payload["note"] == 1
    assert model.config_from_dict(payload["model"]) == SMALL


def test_load_state_dict_shape_mismatch_rejected():
    r = Reconstructor(SMALL, seed=0)
    rng = np.random.default_rng(8)
    r.volume(small_images(rng), (0.0, 23.8), 0.5, 4, 2 / 16)
    state = r.state_dict()
    key = next(k for k in state if k.startswith("gen/"))
    state[key] = np.zeros((1, 1), dtype=np.float32)
    r2 = Reconstructor(SMALL, seed=0)
    r2.volume(small_images(rng), (0.0, 23.8), 0.5, 4, 2 / 16)
    with pytest.raises(ValueError):
        r2.load_state_dict(state)
