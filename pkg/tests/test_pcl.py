"""Contrastive embedding: normalization, sampling, augmentation, loss oracles."""

import numpy as np
import pytest

from tmegraph import autodiff as ad
from tmegraph.nn import gradient_check
from tmegraph.pcl import (
    ChannelStats,
    EmbeddedImage,
    PCLConfig,
    PCLModel,
    augment_pair,
    contrast_accuracy,
    held_out_contrast_accuracy,
    load_embedded,
    normalize_cohort,
    nt_xent_loss,
    sample_crops,
    save_embedded,
    tile_and_embed,
    tile_grid,
    train_pcl,
)


def tiny_cfg(**kw):
    base = dict(s_cr=10, alpha_cr=2.0, b_cr=8, r_images=2, g=16, proj_dim=8,
                tau=0.5, cutout_frac=0.15, steps=10, lr=1e-3,
                encoder_widths=(4, 8))
    base.update(kw)
    return PCLConfig(**base)


def random_images(n, h=48, w=48, b=3, seed=0):
    rng = np.random.default_rng(seed)
    return [rng.uniform(0, 1, size=(h, w, b)) for _ in range(n)]


# -- normalization ---------------------------------------------------------------

def test_normalize_constant_channel_flagged():
    img = np.full((8, 8, 2), 0.5)
    img[..., 1] = np.linspace(0, 1, 64).reshape(8, 8)
    normed, stats = normalize_cohort([img])
    assert stats.constant[0] and not stats.constant[1]
    np.testing.assert_allclose(normed[0][..., 0], 0.0)


def test_normalize_two_image_symmetry():
    rng = np.random.default_rng(1)
    noise = rng.normal(size=(10, 10, 1))
    img1 = noise + 0.0
    img2 = noise + 2.0
    normed, stats = normalize_cohort([img1, img2])
    m1 = normed[0].mean()
    m2 = normed[1].mean()
    assert abs(m1 + m2) < 1e-9
    assert abs((m1 * 100 + m2 * 100) / 200) < 1e-9


def test_normalize_cohort_unit_variance():
    images = random_images(5, seed=2)
    normed, _ = normalize_cohort(images)
    flat = np.concatenate([im.reshape(-1, 3) for im in normed], axis=0)
    np.testing.assert_allclose(flat.mean(axis=0), 0.0, atol=1e-6)
    np.testing.assert_allclose(flat.var(axis=0), 1.0, atol=1e-6)


# -- sampling --------------------------------------------------------------------

def test_sample_crops_shape_and_default_alpha():
    cfg = PCLConfig(s_cr=10, b_cr=128, g=16, proj_dim=8, encoder_widths=(4,))
    assert cfg.crop_side == 20
    crops = sample_crops(random_images(4), cfg, np.random.default_rng(3))
    assert crops.shape == (128, 20, 20, 3)


def test_sample_crops_single_image_and_determinism():
    cfg = tiny_cfg()
    imgs = random_images(1, seed=4)
    c1 = sample_crops(imgs, cfg, np.random.default_rng(9))
    c2 = sample_crops(imgs, cfg, np.random.default_rng(9))
    np.testing.assert_array_equal(c1, c2)


def test_sample_crops_skips_small_images():
    cfg = tiny_cfg()
    imgs = random_images(2, seed=5) + [np.zeros((5, 5, 3))]
    with pytest.warns(UserWarning, match="smaller than crop"):
        crops = sample_crops(imgs, cfg, np.random.default_rng(0))
    assert crops.shape[0] == cfg.b_cr
    with pytest.raises(ValueError):
        sample_crops([np.zeros((5, 5, 3))], cfg, np.random.default_rng(0))


# -- augmentation -----------------------------------------------------------------

def test_cutout_side_rounding_rule():
    # 0.15 * 10 = 1.5 -> side 2 -> 4 zeroed pixels per channel
    cfg = tiny_cfg()
    crop = np.full((20, 20, 3), 2.0)  # strictly positive so zeros = cutout
    v1, v2 = augment_pair(crop, cfg, np.random.default_rng(6))
    for v in (v1, v2):
        assert v.shape == (10, 10, 3)
        assert int((v[..., 0] == 0).sum()) == 4


def test_augment_views_are_rotated_subcrops():
    cfg = tiny_cfg(cutout_frac=0.0)
    rng = np.random.default_rng(7)
    crop = rng.uniform(0.1, 1.0, size=(20, 20, 2))
    sums = set()
    for r in range(11):
        for c in range(11):
            sums.add(round(float(crop[r:r + 10, c:c + 10, :].sum()), 9))
    v1, v2 = augment_pair(crop, cfg, rng)
    # rotation permutes pixels: channel sums match some plain sub-crop
    assert round(float(v1.sum()), 9) in sums
    assert round(float(v2.sum()), 9) in sums


# -- encoder / projection -----------------------------------------------------------

def test_encode_zero_final_layer_gives_zero_vector():
    model = PCLModel(tiny_cfg(), channels=3, rng=np.random.default_rng(8))
    model.params["enc.out_w"].data[...] = 0.0
    model.params["enc.out_b"].data[...] = 0.0
    h = model.encode(np.zeros((2, 10, 10, 3))).numpy()
    np.testing.assert_allclose(h, 0.0)


def test_encode_default_g_is_256():
    cfg = PCLConfig()
    model = PCLModel(cfg, channels=6, rng=np.random.default_rng(9))
    h = model.encode(np.random.default_rng(0).normal(size=(1, 10, 10, 6)))
    assert h.shape == (1, 256)


def test_encode_deterministic_and_shape_checked():
    model = PCLModel(tiny_cfg(), channels=3, rng=np.random.default_rng(10))
    patch = np.random.default_rng(1).normal(size=(1, 10, 10, 3))
    h1 = model.encode(patch).numpy()
    h2 = model.encode(patch.copy()).numpy()
    np.testing.assert_array_equal(h1, h2)
    with pytest.raises(ValueError):
        model.encode(np.zeros((1, 10, 10, 5)))


def test_project_identity_weights_truncate():
    cfg = tiny_cfg()
    model = PCLModel(cfg, channels=3, rng=np.random.default_rng(11))
    model.params["proj.w_hidden"].data = np.eye(cfg.g)
    model.params["proj.w_out"].data = np.eye(cfg.g)[:, :cfg.proj_dim]
    h = np.abs(np.random.default_rng(2).normal(size=(3, cfg.g)))
    z = model.project(h).numpy()
    np.testing.assert_allclose(z, h[:, :cfg.proj_dim], atol=1e-12)
    np.testing.assert_allclose(model.project(np.zeros((2, cfg.g))).numpy(), 0.0)


def test_project_gradient_matches_finite_differences():
    cfg = tiny_cfg()
    model = PCLModel(cfg, channels=3, rng=np.random.default_rng(12))
    h = np.random.default_rng(3).normal(size=(2, cfg.g))
    params = {k: v for k, v in model.params.items() if k.startswith("proj.")}

    def loss():
        z = model.project(h, grad=True)
        return (z * z).sum()

    assert gradient_check(loss, params, eps=1e-5) < 1e-4


# -- nt-xent -------------------------------------------------------------------------

def brute_force_nt_xent(z: np.ndarray, tau: float) -> float:
    zn = z / np.linalg.norm(z, axis=1, keepdims=True)
    n = len(z)
    total = 0.0
    for a in range(n):
        p = a ^ 1
        num = np.exp(zn[a] @ zn[p] / tau)
        den = sum(np.exp(zn[a] @ zn[o] / tau) for o in range(n) if o != a)
        total += -np.log(num / den)
    return total / n


def test_nt_xent_orthogonal_pairs_closed_form():
    z = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
    loss = nt_xent_loss(ad.constant(z), tau=0.5).item()
    expect = np.log(1.0 + 2.0 * np.exp(-2.0))
    assert abs(loss - expect) < 1e-9
    assert abs(loss - 0.23954) < 1e-4


def test_nt_xent_all_identical_is_log_2b_minus_1():
    for b in (2, 4, 8):
        z = np.tile(np.array([[0.3, -0.7, 0.2]]), (2 * b, 1))
        loss = nt_xent_loss(ad.constant(z), tau=0.5).item()
        assert abs(loss - np.log(2 * b - 1)) < 1e-9


def test_nt_xent_scale_invariance_and_nonnegative():
    rng = np.random.default_rng(13)
    z = rng.normal(size=(12, 6))
    l1 = nt_xent_loss(ad.constant(z), 0.5).item()
    l2 = nt_xent_loss(ad.constant(3.0 * z), 0.5).item()
    assert abs(l1 - l2) < 1e-9
    assert l1 >= 0.0


def test_nt_xent_matches_brute_force():
    rng = np.random.default_rng(14)
    for _ in range(25):
        b = int(rng.integers(2, 17))
        z = rng.normal(size=(2 * b, int(rng.integers(2, 8))))
        mine = nt_xent_loss(ad.constant(z), 0.5).item()
        ref = brute_force_nt_xent(z, 0.5)
        assert abs(mine - ref) < 1e-6


def test_nt_xent_rejects_zero_norm():
    z = np.ones((4, 3))
    z[2] = 0.0
    with pytest.raises(ValueError):
        nt_xent_loss(ad.constant(z), 0.5)


def test_nt_xent_permutation_of_pairs_is_invariant():
    rng = np.random.default_rng(15)
    z = rng.normal(size=(8, 4))
    perm_pairs = np.array([2, 3, 0, 1, 6, 7, 4, 5])
    l1 = nt_xent_loss(ad.constant(z), 0.5).item()
    l2 = nt_xent_loss(ad.constant(z[perm_pairs]), 0.5).item()
    assert abs(l1 - l2) < 1e-9


def test_pcl_loss_gradients_on_4_pair_batch():
    cfg = tiny_cfg(b_cr=4)
    model = PCLModel(cfg, channels=2, rng=np.random.default_rng(16))
    batch = np.random.default_rng(4).normal(size=(8, 10, 10, 2))

    def loss():
        h = model.encode(batch, grad=True)
        return nt_xent_loss(model.project(h, grad=True), cfg.tau)

    assert gradient_check(loss, model.params, eps=1e-5) < 1e-4


# -- contrast accuracy ----------------------------------------------------------------

def test_contrast_accuracy_forced_cases():
    z = np.array([[1.0, 0, 0], [1.0, 0, 0], [0, 1.0, 0], [0, 1.0, 0],
                  [0, 0, 1.0], [0, 0, 1.0]])
    assert contrast_accuracy(z) == 100.0


def test_contrast_accuracy_chance_level():
    rng = np.random.default_rng(17)
    b = 16
    vals = [contrast_accuracy(rng.normal(size=(2 * b, 32))) for _ in range(300)]
    chance = 100.0 / (2 * b - 1)
    assert abs(np.mean(vals) - chance) < 1.5


# -- training -------------------------------------------------------------------------

def test_train_pcl_loss_decreases_and_deterministic(tmp_path):
    images = random_images(3, h=40, w=40, seed=18)
    normed, stats = normalize_cohort(images)
    cfg = tiny_cfg(steps=25, b_cr=8, lr=3e-3)
    model1, log1 = train_pcl(normed, cfg, seed=5, stats=stats,
                             checkpoint_path=tmp_path / "enc.ckpt",
                             log_path=tmp_path / "log.csv")
    assert log1[-1][1] < log1[0][1]
    model2, log2 = train_pcl(normed, cfg, seed=5, stats=stats)
    for k in model1.params:
        np.testing.assert_array_equal(model1.params[k].data, model2.params[k].data)
    loaded = PCLModel.load(tmp_path / "enc.ckpt")
    patch = normed[0][:10, :10, :][None]
    np.testing.assert_allclose(loaded.encode(patch).numpy(),
                               model1.encode(patch).numpy(), atol=1e-12)
    assert loaded.stats is not None
    acc = held_out_contrast_accuracy(model1, normed, n_batches=3, seed=1)
    assert 0.0 <= acc <= 100.0


def test_train_pcl_zero_lr_keeps_params():
    images = random_images(2, h=40, w=40, seed=19)
    normed, _ = normalize_cohort(images)
    cfg = tiny_cfg(steps=5, lr=0.0)
    ref = PCLModel(cfg, 3, np.random.default_rng([6, 0xec0]))
    model, _ = train_pcl(normed, cfg, seed=6)
    for k in model.params:
        np.testing.assert_array_equal(model.params[k].data, ref.params[k].data)


# -- tiling ---------------------------------------------------------------------------

def test_tile_grid_floor_formula():
    assert tile_grid(800, 800, 10) == (80, 80)
    assert 80 * 80 == 6400
    assert tile_grid(200, 200, 10) == (20, 20)
    assert tile_grid(805, 803, 10) == (80, 80)
    rng = np.random.default_rng(20)
    for _ in range(50):
        h = int(rng.integers(10, 900))
        w = int(rng.integers(10, 900))
        s = int(rng.integers(2, 40))
        rows, cols = tile_grid(h, w, s)
        assert rows == h // s and cols == w // s


def test_tile_and_embed_counts_and_patch_content():
    cfg = tiny_cfg()
    model = PCLModel(cfg, channels=3, rng=np.random.default_rng(21))
    img = np.random.default_rng(7).normal(size=(45, 33, 3))
    emb = tile_and_embed(img, model, image_id="i0")
    assert emb.embeddings.shape == (4, 3, cfg.g)
    assert emb.num_patches == 12
    # grid cell (1, 2) embeds exactly the patch at rows 10:20, cols 20:30
    direct = model.encode(img[10:20, 20:30, :][None]).numpy()[0]
    np.testing.assert_allclose(emb.embeddings[1, 2], direct, atol=1e-10)


def test_embedded_roundtrip(tmp_path):
    emb = EmbeddedImage(embeddings=np.random.default_rng(8).normal(size=(3, 4, 6)),
                        image_id="img7", patch_size=10)
    save_embedded(tmp_path / "img7", emb)
    back = load_embedded(tmp_path / "img7")
    np.testing.assert_allclose(back.embeddings, emb.embeddings, atol=1e-6)
    assert back.image_id == "img7" and back.patch_size == 10
