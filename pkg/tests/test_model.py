import numpy as np
import pytest

from redcore import autodiff as ad
from redcore.errors import CheckpointError, ConfigError, ShapeError
from redcore.losses import total_loss
from redcore.model import (ArchConfig, ForwardOutputs, assemble_representation,
                           forward_all, init_params, load_model, reparameterize,
                           save_model, senc_forward, wrap_params, xenc_forward)

ARCH = ArchConfig(rep_dim=4, senc_hidden=6, xenc_bottlenecks=(5, 3))
DIMS = (5, 4, 6)


def small_params(seed=0):
    return init_params(ARCH, DIMS, n_classes=3, seed=seed)


def random_batch(params, batch=6, seed=1, presence=None):
    rng = np.random.default_rng(seed)
    pres = presence if presence is not None else np.ones((batch, 3), dtype=np.int64)
    feats = [rng.normal(size=(batch, dm)) * pres[:, m][:, None]
             for m, dm in enumerate(params.modality_dims)]
    labels = rng.integers(0, params.n_classes, size=batch)
    return feats, labels, pres


def test_senc_zero_weights_gives_zero_gaussian():
    params = small_params()
    for name in params.tensors:
        if name.startswith("senc0"):
            params.tensors[name][:] = 0.0
    mu, lv = senc_forward(wrap_params(params), 0, ad.var(np.random.default_rng(0).normal(size=(5, 5))))
    assert np.array_equal(mu.value, np.zeros((5, 4)))
    assert np.array_equal(lv.value, np.zeros((5, 4)))


def test_senc_output_widths_and_shape_error():
    params = small_params()
    pn = wrap_params(params)
    mu, lv = senc_forward(pn, 1, ad.var(np.zeros((7, 4))))
    assert mu.value.shape == (7, 4) and lv.value.shape == (7, 4)
    with pytest.raises(ShapeError):
        senc_forward(pn, 1, ad.var(np.zeros((7, 5))))


def test_senc_log_var_clamped():
    params = small_params()
    params.tensors["senc0.b2"][:] = 100.0  # drives raw log-var far out of range
    _, lv = senc_forward(wrap_params(params), 0, ad.var(np.zeros((2, 5))))
    assert lv.value.max() <= 10.0 and lv.value.min() >= -10.0


def test_senc_gradient_vs_finite_differences():
    params = small_params(3)
    rng = np.random.default_rng(5)
    x0 = rng.normal(size=(3, 5))
    probe = rng.normal(size=(3, 4))

    def f(x):
        mu, lv = senc_forward(wrap_params(params), 0, x)
        return ad.add(ad.sum(ad.mul_elem(mu, ad.var(probe))),
                      ad.sum(ad.mul_elem(lv, ad.var(probe))))

    assert ad.finite_diff_check(f, x0) < 1e-4


def test_reparameterize_cases():
    mu = ad.var([[1.0, 2.0]])
    lv = ad.var([[0.0, 0.0]])
    z = reparameterize(mu, lv, np.zeros((1, 2)))
    np.testing.assert_array_equal(z.value, [[1.0, 2.0]])
    # log_var = 0 means unit std: adding the first basis vector shifts by 1
    z = reparameterize(mu, lv, np.array([[1.0, 0.0]]))
    np.testing.assert_allclose(z.value, [[2.0, 2.0]])
    with pytest.raises(ShapeError):
        reparameterize(mu, lv, np.zeros((2, 2)))


def test_reparameterize_gradients_reach_both_inputs():
    rng = np.random.default_rng(9)
    eps = rng.normal(size=(3, 4))
    lv0 = rng.normal(scale=0.5, size=(3, 4))
    mu0 = rng.normal(size=(3, 4))

    def f_mu(x):
        return ad.sum(reparameterize(x, ad.var(lv0), eps))

    def f_lv(x):
        return ad.sum(reparameterize(ad.var(mu0), x, eps))

    assert ad.finite_diff_check(f_mu, mu0) < 1e-4
    assert ad.finite_diff_check(f_lv, lv0) < 1e-4


def test_xenc_all_others_absent_is_deterministic_bias_path():
    params = small_params(7)
    pn = wrap_params(params)
    rng = np.random.default_rng(2)
    z_bars = [ad.var(rng.normal(size=(4, 4))) for _ in range(3)]
    presence = np.zeros((4, 3), dtype=np.int64)
    presence[:, 0] = 1  # target 0: others all absent
    out1 = xenc_forward(pn, 0, z_bars, presence, params.arch)
    out2 = xenc_forward(wrap_params(params), 0, z_bars, presence, params.arch)
    assert np.all(np.isfinite(out1.value))
    assert np.array_equal(out1.value, out2.value)
    # every row identical: the input is the all-zero vector for each row
    assert np.array_equal(out1.value, np.repeat(out1.value[:1], 4, axis=0))


def test_xenc_slot_order_sensitivity():
    params = small_params(11)
    pn = wrap_params(params)
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(2, 4)), rng.normal(size=(2, 4))
    presence = np.ones((2, 3), dtype=np.int64)
    z1 = [ad.var(np.zeros((2, 4))), ad.var(a), ad.var(b)]
    z2 = [ad.var(np.zeros((2, 4))), ad.var(b), ad.var(a)]
    out1 = xenc_forward(pn, 0, z1, presence, params.arch)
    out2 = xenc_forward(pn, 0, z2, presence, params.arch)
    assert not np.allclose(out1.value, out2.value)


def test_xenc_zero_weights_reduce_to_output_bias():
    params = small_params(13)
    bias = np.linspace(-1, 1, 4)
    for name, arr in params.tensors.items():
        if name.startswith("xenc0"):
            arr[:] = 0.0
    params.tensors["xenc0.b_out"][:] = bias
    rng = np.random.default_rng(4)
    z_bars = [ad.var(rng.normal(size=(5, 4))) for _ in range(3)]
    out = xenc_forward(wrap_params(params), 0, z_bars, np.ones((5, 3), dtype=np.int64),
                       params.arch)
    assert np.array_equal(out.value, np.repeat(bias[None, :], 5, axis=0))


def test_assemble_routing():
    rng = np.random.default_rng(6)
    zb, zh = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
    ones = np.ones(6, dtype=np.int64)
    assert np.array_equal(assemble_representation(ad.var(zb), ad.var(zh), ones).value, zb)
    assert np.array_equal(assemble_representation(ad.var(zb), ad.var(zh), 1 - ones).value, zh)
    col = np.array([1, 0, 1, 1, 0, 0])
    out = assemble_representation(ad.var(zb), ad.var(zh), col).value
    for n in range(6):  # brute-force row oracle
        expect = zb[n] if col[n] == 1 else zh[n]
        assert np.array_equal(out[n], expect)


def test_forward_shapes_and_full_presence_identity():
    arch = ArchConfig(rep_dim=8, senc_hidden=6, xenc_bottlenecks=(4,))
    params = init_params(arch, (5, 4, 6), n_classes=3, seed=0)
    batch = random_batch(params, batch=4)
    assert params.tensors["joint.w"].shape == (24, 3)  # M*d = 24
    out = forward_all(params, batch, eps=None)
    assert out.joint_logits.value.shape == (4, 3)
    for m in range(3):
        assert out.logits[m].value.shape == (4, 3)
        assert np.array_equal(out.z[m].value, out.z_bar[m].value)


def test_forward_eq1_routing_brute_force():
    params = small_params(17)
    presence = np.array([[1, 0, 1], [0, 1, 1], [1, 1, 0], [1, 1, 1]], dtype=np.int64)
    batch = random_batch(params, batch=4, presence=presence)
    out = forward_all(params, batch, eps=None)
    for m in range(3):
        for n in range(4):
            expect = out.z_bar[m].value[n] if presence[n, m] == 1 else out.z_hat[m].value[n]
            assert np.array_equal(out.z[m].value[n], expect)


def test_forward_eps_sources():
    params = small_params(19)
    batch = random_batch(params, batch=3)
    rng = np.random.default_rng(8)
    eps_list = [rng.normal(size=(3, 4)) for _ in range(3)]
    out_list = forward_all(params, batch, eps=eps_list)
    out_call = forward_all(params, batch, eps=lambda m, shape: eps_list[m])
    for m in range(3):
        assert np.array_equal(out_list.z_bar[m].value, out_call.z_bar[m].value)
    out_zero = forward_all(params, batch, eps=None)
    for m in range(3):
        assert np.array_equal(out_zero.z_bar[m].value, out_zero.mu[m].value)


def test_missing_features_cannot_influence_outputs():
    """Inference path: zero-filled absent features are bit-irrelevant."""
    params = small_params(23)
    presence = np.array([[1, 0, 1], [1, 0, 1], [0, 1, 1]], dtype=np.int64)
    batch = random_batch(params, batch=3, presence=presence)
    out_a = forward_all(params, batch, eps=None)

    feats = [f.copy() for f in batch[0]]
    for m in range(3):
        gone = presence[:, m] == 0
        feats[m][gone] = 123.456  # garbage where the modality is missing
    out_b = forward_all(params, (feats, batch[1], presence), eps=None)

    assert np.array_equal(out_a.joint_logits.value, out_b.joint_logits.value)
    for m in range(3):
        assert np.array_equal(out_a.logits[m].value, out_b.logits[m].value)
        assert np.array_equal(out_a.z[m].value, out_b.z[m].value)


def test_no_dead_parameters_on_fully_present_batch():
    params = small_params(29)
    batch = random_batch(params, batch=6)
    eps = [np.random.default_rng(m).normal(size=(6, 4)) for m in range(3)]
    out = forward_all(params, batch, eps=eps)
    loss, _ = total_loss(out, batch[1], batch[2], gamma=0.1,
                         eta=np.full(3, 0.05))
    ad.backward(loss)
    for name, node in out.param_nodes.items():
        assert np.any(node.grad != 0.0), f"{name} received no gradient"


def test_model_needs_two_modalities():
    with pytest.raises(ConfigError):
        init_params(ARCH, (5,), n_classes=3, seed=0)


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    params = small_params(31)
    save_model(params, tmp_path)
    back = load_model(tmp_path)
    assert back.arch == params.arch
    assert back.modality_dims == params.modality_dims
    for name, arr in params.tensors.items():
        assert np.array_equal(arr, back.tensors[name]), name


def test_checkpoint_truncation_detected(tmp_path):
    params = small_params(37)
    save_model(params, tmp_path)
    blob = (tmp_path / "weights.bin").read_bytes()
    (tmp_path / "weights.bin").write_bytes(blob[:-16])
    with pytest.raises(CheckpointError):
        load_model(tmp_path)


def test_checkpoint_shape_mismatch_detected(tmp_path):
    params = small_params(41)
    save_model(params, tmp_path)
    manifest = (tmp_path / "manifest.json").read_text()
    (tmp_path / "manifest.json").write_text(manifest.replace('"n_classes": 3',
                                                             '"n_classes": 4'))
    with pytest.raises(CheckpointError):
        load_model(tmp_path)
