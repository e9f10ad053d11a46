import hashlib

import numpy as np
import pytest

from aetlab import evaluation as ev
from aetlab.data import Dataset, synth_shapes
from aetlab.errors import ContractError, FormatError, InputError
from aetlab.nets import Model, NetConfig
from aetlab.train import checkpoint_meta, TrainConfig, write_state, OptimizerState

NET = NetConfig(image_size=8, widths=(2, 3), rep_grid=1, n_classes=3)


def brute_force_knn(feats, labels, queries, k):
    """Exhaustive oracle written independently: full sort, explicit tie rules."""
    out = []
    for q in queries:
        d = [float(np.sqrt(np.sum((f - q) ** 2))) for f in feats]
        order = sorted(range(len(d)), key=lambda i: (d[i], i))[:k]
        votes, sums = {}, {}
        for i in order:
            votes[labels[i]] = votes.get(labels[i], 0) + 1
            sums[labels[i]] = sums.get(labels[i], 0.0) + d[i]
        best = max(votes.values())
        cands = [c for c in votes if votes[c] == best]
        out.append(min(cands, key=lambda c: (sums[c], c)))
    return np.array(out)


class TestKnn:
    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            n, d, c = int(rng.integers(20, 201)), int(rng.integers(1, 6)), int(rng.integers(2, 5))
            bank = ev.FeatureBank(rng.standard_normal((n, d)), rng.integers(0, c, n))
            q = rng.standard_normal((15, d))
            for k in ev.KNN_K_SET:
                np.testing.assert_array_equal(ev.knn_classify(bank, q, k),
                                              brute_force_knn(bank.features, bank.labels, q, k))

    def test_exact_match_k1(self):
        rng = np.random.default_rng(1)
        bank = ev.FeatureBank(rng.standard_normal((30, 4)), rng.integers(0, 5, 30))
        np.testing.assert_array_equal(ev.knn_classify(bank, bank.features[[3, 17]], 1), bank.labels[[3, 17]])

    def test_separable_clusters(self):
        rng = np.random.default_rng(2)
        f = np.concatenate([rng.normal(0, 0.1, (20, 3)), rng.normal(50, 0.1, (20, 3))])
        bank = ev.FeatureBank(f, np.repeat([0, 1], 20))
        for k in (1, 5, 20):
            assert ev.knn_error(bank, bank, k) == 0.0

    def test_tie_by_distance_sum_then_label(self):
        bank = ev.FeatureBank(np.array([[1.0], [-2.0], [3.0], [-3.0]]), np.array([1, 0, 1, 0]))
        # two votes each; label 0 has distance sum 5, label 1 has 4
        assert ev.knn_classify(bank, np.array([[0.0]]), 4)[0] == 1
        sym = ev.FeatureBank(np.array([[1.0], [-1.0]]), np.array([2, 0]))
        assert ev.knn_classify(sym, np.array([[0.0]]), 2)[0] == 0

    def test_k_out_of_range(self):
        bank = ev.FeatureBank(np.zeros((3, 2)), np.zeros(3))
        with pytest.raises(ContractError):
            ev.knn_classify(bank, np.zeros((1, 2)), 4)
        with pytest.raises(ContractError):
            ev.knn_classify(bank, np.zeros((1, 2)), 0)

    def test_bank_validation(self):
        with pytest.raises(InputError):
            ev.FeatureBank(np.zeros((0, 2)), np.zeros(0))
        with pytest.raises(InputError):
            ev.FeatureBank(np.array([[np.nan]]), np.zeros(1))


@pytest.fixture(scope="module")
def shapes():
    return synth_shapes(30, 8, 3, np.random.default_rng(0), blur=0.0)


class TestExtract:
    def test_permutation_equivariant(self, shapes):
        model = Model.create(NET, 0)
        perm = np.random.default_rng(1).permutation(len(shapes))
        a = ev.extract_features(model, shapes, rng=np.random.default_rng(5))
        b = ev.extract_features(model, shapes.subset(perm), rng=np.random.default_rng(5), batch_size=7)
        # batch composition only changes BLAS summation order
        np.testing.assert_allclose(b.features, a.features[perm], atol=1e-12, rtol=0)
        np.testing.assert_array_equal(b.labels, a.labels[perm])

    def test_deterministic(self, shapes):
        model = Model.create(NET, 0)
        a = ev.extract_features(model, shapes, rng=np.random.default_rng(3)).features
        b = ev.extract_features(model, shapes, rng=np.random.default_rng(3)).features
        np.testing.assert_array_equal(a, b)

    def test_collapsed_variance(self, shapes):
        model = Model.create(NetConfig(**(NET.to_dict() | {"logvar_bias_init": -30.0})), 0)
        a = ev.extract_features(model, shapes, 1, np.random.default_rng(0)).features
        b = ev.extract_features(model, shapes, 5, np.random.default_rng(0)).features
        assert np.abs(a - b).max() < 1e-2

    def test_averaged_noise_variance(self):
        # mean of 5 standard normals has variance 1/5
        rows = np.random.default_rng(0).random((10_000, 2))
        draws = np.array([ev._row_noise(7, r, 5, 1)[0] for r in rows])
        assert abs(draws.var() - 0.2) < 0.05 * 0.2

    def test_unlabeled_rejected(self):
        with pytest.raises(InputError):
            ev.extract_features(Model.create(NET, 0), Dataset(np.zeros((2, 1, 8, 8)), None, 1))


class TestProbe:
    def test_linearly_separable(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((200, 2))
        y = (x[:, 0] + 0.5 * x[:, 1] > 0).astype(int)
        x[:, 0] += np.where(y == 1, 0.5, -0.5)
        bank = ev.FeatureBank(x, y)
        assert ev.probe_train(bank, bank, ev.ProbeConfig(epochs=40)) == 0.0

    def test_permuted_labels_chance(self):
        rng = np.random.default_rng(1)
        c = 4
        tr_bank = ev.FeatureBank(rng.standard_normal((400, 5)), rng.integers(0, c, 400))
        te_bank = ev.FeatureBank(rng.standard_normal((2000, 5)), rng.integers(0, c, 2000))
        err = ev.probe_train(tr_bank, te_bank, ev.ProbeConfig(epochs=20))
        assert abs(err - (1 - 1 / c)) <= 0.05

    def test_constant_features_majority_rate(self):
        y = np.array([0] * 70 + [1] * 30)
        bank = ev.FeatureBank(np.ones((100, 3)), y)
        assert ev.probe_train(bank, bank, ev.ProbeConfig(epochs=30)) == pytest.approx(0.3)

    def test_nonlinear_xor(self):
        rng = np.random.default_rng(2)
        x = rng.uniform(-1, 1, (400, 2))
        x = x[np.abs(x).min(axis=1) > 0.15]
        y = ((x[:, 0] > 0) ^ (x[:, 1] > 0)).astype(int)
        bank = ev.FeatureBank(x, y)
        cfg = dict(epochs=150, hidden=32, lr=0.05)
        assert ev.probe_train(bank, bank, ev.ProbeConfig(head="nonlinear", **cfg)) < 0.05
        assert ev.probe_train(bank, bank, ev.ProbeConfig(head="linear", **cfg)) > 0.3

    def test_degenerate(self):
        with pytest.raises(InputError):
            ev.probe_train(ev.FeatureBank(np.ones((3, 2)), np.zeros(3)), ev.FeatureBank(np.ones((1, 2)), [0]))


class TestFewLabel:
    @pytest.fixture
    def banks(self):
        rng = np.random.default_rng(3)
        centers = rng.standard_normal((3, 4)) * 2
        y = np.repeat(np.arange(3), 40)
        return ev.FeatureBank(centers[y] + rng.standard_normal((120, 4)), y), \
            ev.FeatureBank(centers[y] + rng.standard_normal((120, 4)), y)

    def test_full_count_matches_plain_probe(self, banks):
        rows = ev.few_label_protocol(*banks, [40], np.random.default_rng(0))
        assert rows[0]["error_rate"] == ev.probe_train(*banks)

    def test_reproducible(self, banks):
        a = ev.few_label_protocol(*banks, [2, 10], np.random.default_rng(9), repetitions=2)
        b = ev.few_label_protocol(*banks, [2, 10], np.random.default_rng(9), repetitions=2)
        assert a == b

    def test_stratified_counts(self, banks):
        idx = ev.stratified_indices(banks[0].labels, 7, np.random.default_rng(0))
        np.testing.assert_array_equal(np.bincount(banks[0].labels[idx]), [7, 7, 7])

    def test_insufficient(self, banks):
        with pytest.raises(InputError):
            ev.few_label_protocol(*banks, [41], np.random.default_rng(0))


def _state_hash(model):
    h = hashlib.sha256()
    for k, v in sorted(model.state_arrays().items()):
        h.update(k.encode() + v.tobytes())
    return h.hexdigest()


def test_probe_does_not_touch_encoder(shapes):
    model = Model.create(NET, 0)
    before = _state_hash(model)
    bank = ev.extract_features(model, shapes)
    ev.probe_train(bank, bank, ev.ProbeConfig(head="nonlinear", epochs=3))
    ev.few_label_protocol(bank, bank, [2], np.random.default_rng(0))
    assert _state_hash(model) == before


class TestCheckpointLoad:
    def test_roundtrip(self, tmp_path, shapes):
        model = Model.create(NET, 4)
        write_state(tmp_path / "c.bin", model, OptimizerState(), checkpoint_meta(model, TrainConfig(), 0, 0))
        back, meta = ev.load_model(tmp_path / "c.bin", NET)
        assert meta["epoch"] == 0
        assert _state_hash(back) == _state_hash(model)

    def test_mismatch(self, tmp_path):
        model = Model.create(NET, 4)
        write_state(tmp_path / "c.bin", model, OptimizerState(), checkpoint_meta(model, TrainConfig(), 0, 0))
        with pytest.raises(FormatError, match="widths"):
            ev.load_model(tmp_path / "c.bin", NetConfig(image_size=8, widths=(2, 4), rep_grid=1))


def test_csv_format(tmp_path):
    ev.write_csv(tmp_path / "t.csv", [{"protocol": "knn", "setting": "k=5", "seed": 0, "error_rate": 0.25, "x": 1}])
    assert (tmp_path / "t.csv").read_text() == "protocol,setting,seed,error_rate\nknn,k=5,0,0.250000\n"
