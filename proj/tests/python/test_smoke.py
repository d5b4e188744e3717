import math

import numpy as np
import pytest

import uidkat


def scene(rng, size=32):
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.stack([0.5 + 0.4 * np.sin(6 * xx + k) * np.cos(4 * yy) for k in range(3)])
    return np.clip(img + 0.02 * rng.standard_normal(img.shape), 0, 1).astype(np.float32)


def test_metrics_closed_forms():
    gt = np.full((3, 16, 16), 0.5)
    assert uidkat.ssim(gt, gt) == 1.0
    assert abs(uidkat.psnr(gt + 0.1, gt) - 20.0) < 1e-9
    with pytest.raises(uidkat.ShapeError):
        uidkat.psnr(gt, np.zeros((3, 16, 15)))


def test_loss_values():
    assert uidkat.lsgan_generator_loss(np.ones((1, 1, 4, 4))) == 0.0
    assert uidkat.lsgan_discriminator_loss(np.ones((1, 1, 4, 4)), np.zeros((1, 1, 4, 4))) == 0.0
    assert uidkat.identity_loss(np.ones((1, 3, 4, 4)), np.ones((1, 3, 4, 4))) == 0.0
    assert uidkat.total_generator_loss(0.1, 0.1, 0.2) == pytest.approx(1.2, abs=1e-12)


def test_patch_nce_two_way_tie_is_ln2():
    q = np.array([1.0, 0.0])
    loss = uidkat.patch_nce_single(q, q, np.array([[1.0, 0.0]]), tau=0.07)
    assert abs(loss - math.log(2)) < 1e-9


def test_patch_nce_matches_numpy_oracle():
    rng = np.random.default_rng(0)
    for n in (1, 8, 63):
        q, k = rng.standard_normal(16), rng.standard_normal(16)
        negs = rng.standard_normal((n, 16))
        unit = lambda v: v / np.linalg.norm(v, axis=-1, keepdims=True)
        logits = np.concatenate([[unit(q) @ unit(k)], unit(negs) @ unit(q)]) / 0.07
        ref = -logits[0] + np.log(np.exp(logits - logits.max()).sum()) + logits.max()
        assert abs(uidkat.patch_nce_single(q, k, negs) - ref) < 1e-6


def test_generator_shape_and_range():
    g = uidkat.Generator("T", seed=0)
    assert g.num_params == uidkat.audit("T", 256)["total_params"]
    x = np.random.default_rng(1).uniform(-1, 1, (1, 3, 64, 64)).astype(np.float32)
    y = g.forward(x)
    assert y.shape == x.shape
    assert np.all(np.abs(y) <= 1.0)
    with pytest.raises(uidkat.ShapeError):
        g.forward(np.zeros((1, 3, 30, 30), np.float32))


def test_audit_ordering():
    t, s, b = (uidkat.audit(v, 256) for v in "TSB")
    assert t["total_params"] < s["total_params"] < b["total_params"]
    assert t["total_macs"] < s["total_macs"] < b["total_macs"]


def test_trainer_steps_and_round_trips(tmp_path):
    rng = np.random.default_rng(2)
    trainer = uidkat.Trainer("variant = T\nimage_size = 32\nseed = 0")
    hazy = scene(rng)[None] * 2 - 1
    clean = scene(rng)[None] * 2 - 1
    log = trainer.step(hazy, clean)
    assert trainer.steps == 1
    assert all(math.isfinite(log[k]) for k in ("adv_g", "ide", "pc", "total_g", "adv_d"))

    trainer.save(tmp_path / "ckpt")
    gen = uidkat.Generator.load(tmp_path / "ckpt")
    np.testing.assert_array_equal(gen.forward(hazy), trainer.generator.forward(hazy))

    resumed = uidkat.Trainer.load(tmp_path / "ckpt")
    assert resumed.steps == 1
    assert resumed.step(hazy, clean) == trainer.step(hazy, clean)


def test_image_io_and_restore(tmp_path):
    img = scene(np.random.default_rng(3), 24)
    hazy = uidkat.synthesize_haze(img, t=0.5, airlight=0.9)
    np.testing.assert_allclose(hazy, img * 0.5 + 0.45, atol=1e-6)
    uidkat.write_png(tmp_path / "h.png", hazy)
    back = uidkat.read_image(tmp_path / "h.png")
    assert np.max(np.abs(back - hazy)) <= 0.5 / 255 + 1e-6
    out = uidkat.Generator("T", seed=0).restore(back)
    assert out.shape == (3, 24, 24)
    assert out.min() >= 0 and out.max() <= 1


def test_gradient_suite_passes():
    cases = uidkat.gradcheck(seed=0)
    assert cases
    failed = [c["name"] for c in cases if not c["passed"]]
    assert not failed
