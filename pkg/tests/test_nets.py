import numpy as np
import pytest

from aetlab import diffcore as dc
from aetlab.errors import ConfigError, ContractError, ShapeError
from aetlab.nets import ENC_LOGVAR_MIN, LOGVAR_MAX, Model, NetConfig

SMALL = NetConfig(image_size=8, widths=(3, 4), rep_grid=1, decoder_hidden=5, classifier_hidden=4, n_classes=3)


@pytest.fixture
def model():
    return Model.create(SMALL, 0)


@pytest.fixture
def images():
    return np.random.default_rng(1).random((2, 1, 8, 8))


def test_rep_shapes(model, images):
    rep = model.encode(images, eps=np.zeros(1))
    assert rep.mean.shape == (2, SMALL.rep_dim) == rep.logvar.shape
    np.testing.assert_array_equal(rep.sample.data, rep.mean.data)


def test_rep_grid_dim():
    cfg = NetConfig(image_size=16, widths=(2, 5), rep_grid=2)
    assert cfg.rep_dim == 20
    rep = Model.create(cfg, 0).encode(np.zeros((1, 1, 16, 16)), eps=np.zeros(1))
    assert rep.mean.shape == (1, 20)


def test_reparameterization(model, images):
    eps = np.random.default_rng(2).standard_normal((2, SMALL.rep_dim))
    rep = model.encode(images, eps=eps)
    np.testing.assert_allclose(rep.sample.data, rep.mean.data + np.exp(rep.logvar.data / 2) * eps, atol=1e-15)


def test_initial_logvar_near_bias(model, images):
    lv = model.encode(images, eps=np.zeros(1)).logvar.data
    assert np.all(np.abs(lv - SMALL.logvar_bias_init) < 1.0)


def test_logvar_clamped(images):
    m = Model.create(NetConfig(**(SMALL.to_dict() | {"logvar_bias_init": 50.0})), 0)
    assert m.encode(images, eps=np.zeros(1)).logvar.data.max() == LOGVAR_MAX
    m = Model.create(NetConfig(**(SMALL.to_dict() | {"logvar_bias_init": -50.0})), 0)
    assert m.encode(images, eps=np.zeros(1)).logvar.data.min() == ENC_LOGVAR_MIN


def test_siamese_branches_share_weights(model, images):
    a = model.encode(images[:1], eps=np.zeros(1)).mean.data
    b = model.encode(images, eps=np.zeros(1)).mean.data[:1]
    np.testing.assert_allclose(a, b, atol=1e-14)


def test_decoder_input_order_matters(model, images):
    rep = model.encode(images, eps=np.zeros(1)).mean
    z, zt = dc.getitem(rep, slice(0, 1)), dc.getitem(rep, slice(1, 2))
    d1 = model.decode_transformation(z, zt).mean.data
    d2 = model.decode_transformation(zt, z).mean.data
    assert not np.allclose(d1, d2)


def test_categorical_decoder():
    cfg = NetConfig(**(SMALL.to_dict() | {"decoder": "categorical", "decoder_out": 4}))
    m = Model.create(cfg, 0)
    z = np.zeros((3, cfg.rep_dim))
    out = m.decode_transformation(z, z)
    assert out.mode == "categorical" and out.logits.shape == (3, 4)


def test_classifier_outputs_log_probs(model):
    lp = model.classify(np.random.default_rng(3).standard_normal((5, SMALL.rep_dim))).data
    np.testing.assert_allclose(np.exp(lp).sum(axis=1), 1.0)


def test_full_model_gradcheck(model, images):
    eps = np.random.default_rng(4).standard_normal((4, SMALL.rep_dim))
    both = np.concatenate([images, images[:, :, ::-1]])
    p = model.params
    # small scale keeps ReLU pre-activations away from kinks relative to eps
    names = ["enc.conv1.w", "enc.logvar.b", "dec.fc1.w", "dec.logvar.w", "cls.fc.w"]

    def f(*ts):
        rep = model.encode(both, eps=eps)
        z_t, z = dc.getitem(rep.sample, slice(0, 2)), dc.getitem(rep.sample, slice(2, 4))
        dec = model.decode_transformation(z, z_t)
        lp = model.classify(z_t)
        return dc.add(dc.sum(dc.mul(dec.mean, dec.logvar)), dc.sum(lp))

    assert dc.gradcheck(f, [p[n] for n in names]).ok(1e-4)


def test_downstream_rep_variance_collapse(images):
    m = Model.create(NetConfig(**(SMALL.to_dict() | {"logvar_bias_init": -10.0})), 0)
    a = m.downstream_rep(images, 1, np.random.default_rng(0))
    b = m.downstream_rep(images, 5, np.random.default_rng(0))
    assert np.abs(a - b).max() < 1e-2


def test_downstream_rep_needs_rng(model, images):
    with pytest.raises(ContractError):
        model.downstream_rep(images, 5)
    with pytest.raises(ContractError):
        model.downstream_rep(images, 0, np.random.default_rng(0))


def test_input_shape_checked(model):
    with pytest.raises(ShapeError):
        model.encode(np.zeros((1, 1, 9, 9)), eps=np.zeros(1))


def test_state_roundtrip(model, images):
    other = Model.create(SMALL, 99)
    other.load_arrays(model.state_arrays())
    np.testing.assert_array_equal(
        other.encode(images, eps=np.zeros(1)).mean.data, model.encode(images, eps=np.zeros(1)).mean.data
    )


def test_seeded_init_deterministic():
    a, b = Model.create(SMALL, 5).state_arrays(), Model.create(SMALL, 5).state_arrays()
    assert all(np.array_equal(a[k], b[k]) for k in a)


@pytest.mark.parametrize(
    "kw", [{"strides": (1, 1, 1, 2)}, {"decoder": "mixture"}, {"image_size": 10}, {"rep_grid": 3}, {"widths": (4,)}]
)
def test_invalid_config(kw):
    with pytest.raises(ConfigError):
        NetConfig(**kw)
