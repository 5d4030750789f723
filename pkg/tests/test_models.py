import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dropcaps import checkpoint
from dropcaps import tensor as T
from dropcaps.errors import ConfigurationError, FormatError, VersionError
from dropcaps.gradcheck import check_gradients
from dropcaps.models import (CapsNetSpec, Cnn3dSpec, build_capsnet, build_cnn3d, capsule_lengths,
                             desk_capsnet_spec, desk_cnn_spec, margin_loss, routing_by_agreement,
                             squash)
from dropcaps.tensor import Tensor


def ref_squash(s):
    n = np.linalg.norm(s)
    return s * 0.0 if n == 0 else (n * n / (1 + n * n)) * s / n


def ref_routing(u_hat, iterations):
    """Loop-by-loop dynamic routing on a single example (in, out, dim)."""
    n_in, n_out, dim = u_hat.shape
    b = np.zeros((n_in, n_out))
    couplings = []
    v = None
    for it in range(iterations):
        c = np.zeros_like(b)
        for i in range(n_in):
            e = [np.exp(b[i, j]) for j in range(n_out)]
            total = sum(e)
            for j in range(n_out):
                c[i, j] = e[j] / total
        couplings.append(c)
        v = np.zeros((n_out, dim))
        for j in range(n_out):
            s = np.zeros(dim)
            for i in range(n_in):
                s += c[i, j] * u_hat[i, j]
            v[j] = ref_squash(s)
        if it < iterations - 1:
            for i in range(n_in):
                for j in range(n_out):
                    b[i, j] += float(np.dot(u_hat[i, j], v[j]))
    return v, couplings


# -- squash ----------------------------------------------------------------------

def test_squash_zero_and_unit():
    assert np.all(squash(Tensor(np.zeros((1, 4)))).data == 0)
    v = squash(Tensor(np.array([[0.6, 0.8]]))).data
    assert np.linalg.norm(v) == pytest.approx(0.5)


def test_squash_large_norm_direction():
    s = np.array([[6.0, 8.0]])
    v = squash(Tensor(s)).data[0]
    assert np.linalg.norm(v) == pytest.approx(100 / 101, rel=1e-12)
    np.testing.assert_allclose(v / np.linalg.norm(v), s[0] / 10, rtol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=8), st.floats(1.01, 10))
def test_squash_properties(vec, scale):
    s = np.array(vec)
    n = np.linalg.norm(s)
    if n < 1e-6:
        return
    v = squash(Tensor(s[None])).data[0]
    nv = np.linalg.norm(v)
    assert 0 < nv < 1 or (nv == pytest.approx(1.0) and n > 1e6)
    np.testing.assert_allclose(v / nv, s / n, atol=1e-9)
    bigger = np.linalg.norm(squash(Tensor(s[None] * scale)).data)
    assert bigger >= nv


# -- routing ----------------------------------------------------------------------

def test_routing_single_input_capsule():
    rng = np.random.default_rng(0)
    u_hat = rng.normal(size=(1, 3, 4))
    v = routing_by_agreement(Tensor(u_hat), 1).data
    expected = np.stack([ref_squash(u_hat[0, j] / 3) for j in range(3)])
    np.testing.assert_allclose(v, expected, rtol=1e-12)


def test_routing_identical_predictions_keep_uniform_coupling():
    u = np.random.default_rng(1).normal(size=(1, 2, 3))
    u_hat = np.repeat(u, 5, axis=0)
    trace = []
    routing_by_agreement(Tensor(u_hat), 4, trace)
    for c in trace:
        np.testing.assert_allclose(c[0], np.broadcast_to(c[0][0], c[0].shape), atol=1e-12)


def test_routing_matches_reference_small_instance():
    u_hat = np.random.default_rng(2).normal(size=(3, 2, 2))
    v = routing_by_agreement(Tensor(u_hat), 3).data
    expected, _ = ref_routing(u_hat, 3)
    np.testing.assert_allclose(v, expected, atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(n_in=st.integers(1, 4), n_out=st.integers(1, 4), dim=st.integers(1, 4),
       iters=st.integers(1, 5), seed=st.integers(0, 2 ** 30))
def test_routing_property_against_reference(n_in, n_out, dim, iters, seed):
    u_hat = np.random.default_rng(seed).normal(size=(n_in, n_out, dim))
    trace = []
    v = routing_by_agreement(Tensor(u_hat), iters, trace).data
    expected, couplings = ref_routing(u_hat, iters)
    np.testing.assert_allclose(v, expected, atol=1e-6)
    for c, ref in zip(trace, couplings):
        np.testing.assert_allclose(c[0].sum(axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(c[0], ref, atol=1e-9)


def test_routing_rejects_zero_iterations():
    with pytest.raises(ConfigurationError):
        routing_by_agreement(Tensor(np.ones((2, 2, 2))), 0)


def test_routing_gradients():
    rng = np.random.default_rng(3)
    u_hat = Tensor(rng.normal(size=(2, 3, 2, 3)), requires_grad=True)
    probe = Tensor(rng.normal(size=(2, 2, 3)))
    err = check_gradients(lambda: (routing_by_agreement(u_hat, 3) * probe).sum(), [u_hat])[0]
    assert err < 1e-4


def test_squash_gradients():
    s = Tensor(np.random.default_rng(4).normal(size=(3, 4)), requires_grad=True)
    probe = Tensor(np.random.default_rng(5).normal(size=(3, 4)))
    assert check_gradients(lambda: (squash(s) * probe).sum(), [s])[0] < 1e-4


# -- lengths & loss -------------------------------------------------------------------

def test_capsule_lengths():
    assert np.all(capsule_lengths(Tensor(np.zeros((65, 8)))).data == 0)
    v = np.zeros((65, 8))
    v[3, 0] = 0.6
    assert capsule_lengths(Tensor(v)).data[3] == pytest.approx(0.6)
    r = np.random.default_rng(6).normal(size=(65, 8))
    np.testing.assert_allclose(capsule_lengths(Tensor(r)).data,
                               [np.sqrt(sum(x * x for x in row)) for row in r], rtol=1e-12)


def test_margin_loss_values():
    conf = np.full(65, 0.05)
    conf[7] = 0.95
    assert margin_loss(Tensor(conf), [7]).item() == 0
    assert margin_loss(Tensor(np.zeros(65)), [0]).item() == pytest.approx(0.81)
    r = np.random.default_rng(7).random((3, 5))
    labels = np.array([0, 4, 2])
    expected = 0.0
    for row, y in zip(r, labels):
        for k, v in enumerate(row):
            expected += max(0, 0.9 - v) ** 2 if k == y else 0.5 * max(0, v - 0.1) ** 2
    assert margin_loss(Tensor(r), labels).item() == pytest.approx(expected / 3, rel=1e-12)


def test_margin_loss_gradient():
    x = Tensor(np.random.default_rng(8).random((4, 6)), requires_grad=True)
    assert check_gradients(lambda: margin_loss(x, np.array([1, 0, 5, 2])), [x])[0] < 1e-4


def test_prediction_invariant_to_positive_scaling():
    v = np.random.default_rng(9).normal(size=(5, 8, 4))
    base = capsule_lengths(Tensor(v)).data.argmax(axis=1)
    for k in (0.01, 0.5, 3.0):
        assert np.array_equal(capsule_lengths(Tensor(v * k)).data.argmax(axis=1), base)


# -- assembled models ----------------------------------------------------------------

def test_capsnet_full_scale_forward():
    model = build_capsnet(CapsNetSpec(), seed=0)
    out = model.forward(np.random.default_rng(0).random((1, 2, 410, 6, 6)))
    assert out.shape == (1, 65)
    assert np.all((out.data >= 0) & (out.data < 1))
    assert model.n_primary_caps == 4 * 119


def test_cnn_full_scale_zero_input():
    model = build_cnn3d(Cnn3dSpec(), seed=0)
    assert model.flat_features == 128 * 11
    out = model.forward(np.zeros((2, 2, 410, 6, 6)))
    assert out.shape == (2, 65)
    # zero input: conv biases start at zero, so logits come from the bias path alone
    np.testing.assert_array_equal(out.data[0], out.data[1])
    np.testing.assert_array_equal(out.data[0], model.params["dense3.bias"].data)


def test_shape_check_names_offending_layer():
    spec = CapsNetSpec(input_shape=(2, 60, 6, 6))
    with pytest.raises(ConfigurationError, match="conv4"):
        build_capsnet(spec)


def test_desk_capsnet_forward_backward_finite():
    model = build_capsnet(desk_capsnet_spec(8, 64, width=4), seed=1)
    x = np.random.default_rng(2).random((4, 2, 64, 6, 6)).astype(np.float32)
    loss = model.loss(model.forward(x, True, np.random.default_rng(0)), np.array([0, 1, 2, 3]))
    loss.backward()
    for name, p in model.params.items():
        assert p.grad is not None and np.all(np.isfinite(p.grad)), name


def tiny_capsnet():
    spec = CapsNetSpec(input_shape=(2, 8, 6, 6), conv_features=(2, 2, 2, 2), conv_kernel=(2, 2, 2),
                       dilations=((1, 1, 1),) * 4, primary_channels=2, capsule_dim=2,
                       n_classes=2, class_dim=2, routing_iterations=3)
    return build_capsnet(spec, seed=3, dtype=np.float64)


def test_tiny_capsnet_end_to_end_gradients():
    model = tiny_capsnet()
    x = np.random.default_rng(4).random((2, 2, 8, 6, 6))
    y = np.array([0, 1])

    def fn():
        return model.loss(model.forward(x, True, np.random.default_rng(5)), y)

    params = list(model.params.values())
    errors = check_gradients(fn, params)
    assert max(errors) < 1e-3


def test_checkpoint_round_trip(tmp_path):
    model = build_capsnet(desk_capsnet_spec(8, 64, width=4), seed=5)
    model.bn["bn1"].running_mean[:] = np.arange(4)
    path = tmp_path / "m.ckpt"
    checkpoint.save(model, path)
    loaded = checkpoint.load(path)
    assert checkpoint.dumps(loaded) == path.read_bytes()
    for k, v in model.state_dict().items():
        assert np.array_equal(v, loaded.state_dict()[k])


def test_checkpoint_rejects_bad_files(tmp_path):
    model = build_cnn3d(desk_cnn_spec(), seed=0)
    blob = checkpoint.dumps(model)
    with pytest.raises(FormatError):
        checkpoint.loads(b"XXXXXXXX" + blob[8:])
    with pytest.raises(VersionError):
        checkpoint.loads(blob[:8] + (99).to_bytes(4, "little") + blob[12:])
    with pytest.raises(FormatError):
        checkpoint.loads(blob[:-3])
    other = build_capsnet(desk_capsnet_spec(), seed=0)
    path = tmp_path / "cnn.ckpt"
    path.write_bytes(blob)
    with pytest.raises(FormatError):
        checkpoint.load(path, other)
