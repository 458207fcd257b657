"""Encoder forward/backward gradients, projection head, checkpoint format."""
import json
import struct

import numpy as np
import pytest

from csibts.nets import (MAGIC, BundleConfig, CheckpointFormatError, DualConfig,
                         PrimalConfig, PsiConfig, dual_backward, dual_forward,
                         init_bundle, init_dual, init_primal, init_psi,
                         load_bundle, primal_backward, primal_forward,
                         psi_backward, psi_forward, save_bundle)
from csibts.trainer import _streams

from oracles import rel_err

SMALL_PRIMAL = PrimalConfig(n_features=6, tau=5, d_model=8, n_heads=2,
                            n_blocks=1, d_ff=16, n_classes=4)
SMALL_DUAL = DualConfig(tau=8, n_subcarriers=8, n_pairs=2, width=4,
                        n_blocks=2, d_latent=8, n_classes=4)


def _directional_fd(loss_fn, params, key, direction, eps=1e-6):
    keep = params[key].copy()
    params[key] = keep + eps * direction
    up = loss_fn()
    params[key] = keep - eps * direction
    down = loss_fn()
    params[key] = keep
    return (up - down) / (2.0 * eps)


def _check_param_grads(params, loss_fn, grads, rng, dirs_per_tensor=1, tol=1e-6):
    """Directional FD probe on every parameter tensor; returns probe count."""
    probes = 0
    worst = 0.0
    for key in sorted(params):
        for _ in range(dirs_per_tensor):
            direction = rng.standard_normal(params[key].shape)
            numeric = _directional_fd(loss_fn, params, key, direction)
            analytic = float(np.sum(grads[key] * direction))
            probes += 1
            if max(abs(numeric), abs(analytic)) < 1e-7:
                # flat direction (key bias cancels in softmax); FD noise only
                continue
            worst = max(worst, rel_err(numeric, analytic))
    assert worst <= tol, f"worst relative error {worst}"
    return probes


# ---------------------------------------------------------------------------
# forward behavior
# ---------------------------------------------------------------------------

def test_primal_forward_shapes_and_probs():
    rng = np.random.default_rng(0)
    p = init_primal(rng, SMALL_PRIMAL)
    x = rng.standard_normal((3, 5, 6))
    out, _ = primal_forward(p, SMALL_PRIMAL, x)
    assert out.z.shape == (3, 8)
    assert out.logits.shape == (3, 4)
    np.testing.assert_allclose(out.probs.sum(axis=1), 1.0, atol=1e-12)


def test_dual_forward_shapes_and_probs():
    rng = np.random.default_rng(1)
    p = init_dual(rng, SMALL_DUAL)
    frames = rng.standard_normal((3, 8, 8, 2))
    out, _ = dual_forward(p, SMALL_DUAL, frames)
    assert out.z.shape == (3, 8)
    assert out.logits.shape == (3, 4)
    np.testing.assert_allclose(out.probs.sum(axis=1), 1.0, atol=1e-12)


@pytest.mark.parametrize("which", ["primal", "dual"])
def test_forward_rows_independent_of_batch(which):
    rng = np.random.default_rng(2)
    if which == "primal":
        p = init_primal(rng, SMALL_PRIMAL)
        x = rng.standard_normal((4, 5, 6))
        full, _ = primal_forward(p, SMALL_PRIMAL, x)
        solo = [primal_forward(p, SMALL_PRIMAL, x[i:i + 1])[0] for i in range(4)]
    else:
        p = init_dual(rng, SMALL_DUAL)
        x = rng.standard_normal((4, 8, 8, 2))
        full, _ = dual_forward(p, SMALL_DUAL, x)
        solo = [dual_forward(p, SMALL_DUAL, x[i:i + 1])[0] for i in range(4)]
    for i in range(4):
        np.testing.assert_allclose(full.logits[i], solo[i].logits[0], atol=1e-10)
        np.testing.assert_allclose(full.z[i], solo[i].z[0], atol=1e-10)


def test_forward_is_deterministic():
    rng = np.random.default_rng(3)
    p = init_primal(rng, SMALL_PRIMAL)
    x = rng.standard_normal((2, 5, 6))
    a, _ = primal_forward(p, SMALL_PRIMAL, x)
    b, _ = primal_forward(p, SMALL_PRIMAL, x)
    assert np.array_equal(a.logits, b.logits)


# ---------------------------------------------------------------------------
# backward gradients
# ---------------------------------------------------------------------------

def test_primal_backward_matches_fd():
    rng = np.random.default_rng(4)
    p = init_primal(rng, SMALL_PRIMAL)
    x = rng.standard_normal((3, 5, 6))
    dz = rng.standard_normal((3, 8))
    dlogits = rng.standard_normal((3, 4))

    def loss():
        out, _ = primal_forward(p, SMALL_PRIMAL, x)
        return float(np.sum(out.z * dz) + np.sum(out.logits * dlogits))

    _, cache = primal_forward(p, SMALL_PRIMAL, x)
    grads = primal_backward(p, SMALL_PRIMAL, cache, dz=dz, dlogits=dlogits)
    probes = _check_param_grads(p, loss, grads, rng)
    assert probes >= 20


def test_dual_backward_matches_fd():
    rng = np.random.default_rng(5)
    p = init_dual(rng, SMALL_DUAL)
    x = rng.standard_normal((2, 8, 8, 2))
    dz = rng.standard_normal((2, 8))
    dlogits = rng.standard_normal((2, 4))

    def loss():
        out, _ = dual_forward(p, SMALL_DUAL, x)
        return float(np.sum(out.z * dz) + np.sum(out.logits * dlogits))

    _, cache = dual_forward(p, SMALL_DUAL, x)
    grads = dual_backward(p, SMALL_DUAL, cache, dz=dz, dlogits=dlogits)
    probes = _check_param_grads(p, loss, grads, rng, dirs_per_tensor=2)
    assert probes >= 20


@pytest.mark.parametrize("which", ["primal", "dual"])
def test_backward_with_latent_gradient_only(which):
    """dz-only backward must leave the classifier head untouched."""
    rng = np.random.default_rng(6)
    if which == "primal":
        p = init_primal(rng, SMALL_PRIMAL)
        _, cache = primal_forward(p, SMALL_PRIMAL, rng.standard_normal((2, 5, 6)))
        grads = primal_backward(p, SMALL_PRIMAL, cache, dz=rng.standard_normal((2, 8)))
    else:
        p = init_dual(rng, SMALL_DUAL)
        _, cache = dual_forward(p, SMALL_DUAL, rng.standard_normal((2, 8, 8, 2)))
        grads = dual_backward(p, SMALL_DUAL, cache, dz=rng.standard_normal((2, 8)))
    assert np.all(grads["cls.w"] == 0.0) and np.all(grads["cls.b"] == 0.0)
    assert any(np.any(g != 0.0) for k, g in grads.items() if not k.startswith("cls."))


# ---------------------------------------------------------------------------
# projection head
# ---------------------------------------------------------------------------

def test_psi_is_bias_free():
    cfg = PsiConfig(dims=(8, 8, 4))
    p = init_psi(np.random.default_rng(7), cfg)
    assert sorted(p) == ["l0.w", "l1.w"]


def test_psi_zero_weights_give_zero_output():
    cfg = PsiConfig(dims=(8, 8, 4))
    p = init_psi(np.random.default_rng(8), cfg)
    for key in p:
        p[key][:] = 0.0
    proj, _ = psi_forward(p, cfg, np.random.default_rng(9).standard_normal((5, 8)))
    assert np.all(proj == 0.0)


def test_psi_single_identity_layer_is_identity():
    cfg = PsiConfig(dims=(6, 6))
    p = {"l0.w": np.eye(6)}
    z = np.random.default_rng(10).standard_normal((4, 6))
    proj, _ = psi_forward(p, cfg, z)
    np.testing.assert_allclose(proj, z, atol=1e-15)


def test_psi_backward_matches_fd_for_weights_and_input():
    rng = np.random.default_rng(11)
    cfg = PsiConfig(dims=(8, 8, 4))
    p = init_psi(rng, cfg)
    z = rng.standard_normal((3, 8))
    dout = rng.standard_normal((3, 4))

    def loss():
        proj, _ = psi_forward(p, cfg, z)
        return float(np.sum(proj * dout))

    _, caches = psi_forward(p, cfg, z)
    grads, dz = psi_backward(p, cfg, caches, dout)
    _check_param_grads(p, loss, grads, rng, dirs_per_tensor=3)
    direction = rng.standard_normal(z.shape)
    keep = z.copy()
    z += 1e-6 * direction
    up = loss()
    z[:] = keep - 1e-6 * direction
    down = loss()
    z[:] = keep
    numeric = (up - down) / 2e-6
    assert rel_err(numeric, float(np.sum(dz * direction))) <= 1e-7


def test_psi_final_layer_init_is_an_order_smaller():
    cfg = PsiConfig(dims=(64, 64, 32))
    p = init_psi(np.random.default_rng(12), cfg)
    assert np.std(p["l1.w"]) < 0.25 * np.std(p["l0.w"])


# ---------------------------------------------------------------------------
# bundle + checkpoint file
# ---------------------------------------------------------------------------

def _tiny_bundle(seed=0, center=None):
    config = BundleConfig(tau=8, n_subcarriers=8, n_pairs=2, d_model=8, n_heads=2,
                          primal_blocks=1, d_ff=16, width=4, dual_blocks=2,
                          psi_dims=(8, 8, 4), seed=seed)
    bundle = init_bundle(config, _streams(seed))
    if center is not None:
        bundle.center = np.asarray(center, dtype=np.float64)
    return bundle


def test_init_bundle_is_deterministic_per_seed():
    a, b = _tiny_bundle(3), _tiny_bundle(3)
    for name, params in a.nets().items():
        for key, value in params.items():
            assert np.array_equal(value, b.nets()[name][key]), (name, key)
    c = _tiny_bundle(4)
    assert not np.array_equal(a.primal_teacher["embed.w"], c.primal_teacher["embed.w"])


def test_bundle_roundtrip_preserves_tensors_and_center(tmp_path):
    bundle = _tiny_bundle(center=[0.5, -1.0, 2.0, 0.0])
    path = tmp_path / "model.ckpt"
    save_bundle(bundle, path)
    loaded = load_bundle(path)
    assert loaded.config == bundle.config
    np.testing.assert_allclose(loaded.center, bundle.center, atol=1e-7)
    assert not loaded.center.flags.writeable
    for name, params in bundle.nets().items():
        for key, value in params.items():
            np.testing.assert_array_equal(
                loaded.nets()[name][key], value.astype("<f4").astype(np.float64),
                err_msg=f"{name}.{key}")


def test_second_save_is_bitwise_stable(tmp_path):
    bundle = _tiny_bundle(center=[1.0, 2.0, 3.0, 4.0])
    first = tmp_path / "a.ckpt"
    second = tmp_path / "b.ckpt"
    save_bundle(bundle, first)
    save_bundle(load_bundle(first), second)
    assert first.read_bytes() == second.read_bytes()


def test_load_rejects_bad_magic(tmp_path):
    path = tmp_path / "model.ckpt"
    path.write_bytes(b"NOTMAGIC" + b"\0" * 32)
    with pytest.raises(CheckpointFormatError, match="magic"):
        load_bundle(path)


def test_load_rejects_malformed_header(tmp_path):
    blob = b"{not json"
    path = tmp_path / "model.ckpt"
    path.write_bytes(MAGIC + struct.pack("<Q", len(blob)) + blob)
    with pytest.raises(CheckpointFormatError, match="header"):
        load_bundle(path)


def test_load_rejects_unknown_schema(tmp_path):
    blob = json.dumps({"schema_version": 99}).encode()
    path = tmp_path / "model.ckpt"
    path.write_bytes(MAGIC + struct.pack("<Q", len(blob)) + blob)
    with pytest.raises(CheckpointFormatError, match="schema"):
        load_bundle(path)


def test_load_rejects_truncated_payload(tmp_path):
    path = tmp_path / "model.ckpt"
    save_bundle(_tiny_bundle(), path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(CheckpointFormatError, match="truncated"):
        load_bundle(path)


def test_load_rejects_trailing_bytes(tmp_path):
    path = tmp_path / "model.ckpt"
    save_bundle(_tiny_bundle(), path)
    path.write_bytes(path.read_bytes() + b"\0\0\0\0")
    with pytest.raises(CheckpointFormatError, match="trailing"):
        load_bundle(path)


def test_bundle_config_wires_submodel_shapes():
    cfg = BundleConfig()
    assert cfg.primal.n_features == 56 * 4
    assert cfg.dual.n_pairs == 4
    assert cfg.psi.dims == (64, 64, 32)
    assert cfg.primal.d_model == cfg.dual.d_latent == cfg.psi.dims[0]
