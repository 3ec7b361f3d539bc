import json

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from ocacompat import nn
from ocacompat.datagen import Dataset, gen_synthetic, restrict_classes
from ocacompat.exceptions import StructuralError
from ocacompat.linalg import orthogonality_defect
from ocacompat.trainer import (
    CompatibleEmbedder,
    TrainConfig,
    _warm_start,
    append_manifest,
    compute_prototypes,
    config_hash,
    extract_features,
    load_bundle,
    load_prototypes,
    save_bundle,
    save_prototypes,
    train_new,
    train_old,
)

SMALL = dict(d_old=4, d_extra=2, hidden=(16,), epochs=3, batch_size=16)


@pytest.fixture(scope="module")
def scenario():
    train, evaluation = gen_synthetic(6, 20, 5, 8, seed=3)
    cfg = TrainConfig(seed=3, **SMALL)
    old = train_old(cfg, restrict_classes(train, 3))
    protos = compute_prototypes(old, train)
    return cfg, train, evaluation, old, protos


class TestEstimatorApi:
    def test_get_params_roundtrip(self):
        est = CompatibleEmbedder(mode="bct", d_old=8, lambda1=2.5)
        params = est.get_params()
        assert params["mode"] == "bct" and params["lambda1"] == 2.5
        assert CompatibleEmbedder(**params).get_params() == params

    def test_clone(self):
        est = CompatibleEmbedder(epochs=7, hidden=(5,))
        twin = clone(est)
        assert twin is not est and twin.get_params() == est.get_params()

    def test_unfitted(self):
        with pytest.raises(NotFittedError):
            CompatibleEmbedder().transform(np.zeros((1, 3)))

    def test_fit_transform(self):
        train, _ = gen_synthetic(3, 10, 1, 5, seed=0)
        est = CompatibleEmbedder(mode="independent", d_old=4, d_extra=0, hidden=(8,), epochs=2, part="bct")
        out = est.fit(train.X, train.labels).transform(train.X)
        assert out.shape == (30, 4)
        assert est.predict(train.X).shape == (30,)
        assert len(est.history_) == 2

    def test_bad_mode(self):
        with pytest.raises(StructuralError):
            CompatibleEmbedder(mode="nope").fit(np.zeros((2, 2)), [0, 1])

    def test_needs_prototypes(self):
        with pytest.raises(StructuralError):
            CompatibleEmbedder(mode="oca", **SMALL).fit(np.zeros((2, 2)), [0, 1])


class TestTrainOld:
    def test_deterministic(self, scenario):
        cfg, train, _, old, _ = scenario
        again = train_old(cfg, restrict_classes(train, 3))
        for name, t in old.tensors().items():
            assert t.tobytes() == again.tensors()[name].tobytes()

    def test_separable_two_class(self):
        rng = np.random.default_rng(0)
        X = np.vstack([rng.normal(-3, 0.3, size=(40, 2)), rng.normal(3, 0.3, size=(40, 2))])
        y = np.repeat([0, 1], 40)
        ds = Dataset(2, 2, np.arange(80), y, X)
        bundle = train_old(TrainConfig(mode="independent", d_old=4, d_extra=0, hidden=(8,), epochs=50, batch_size=16, lr=1e-2), ds)
        est = CompatibleEmbedder.from_bundle(bundle, part="bct")
        assert np.mean(est.predict(X) == y) >= 0.99

    def test_history_finite_and_decreasing(self, scenario):
        cfg, train, *_ = scenario
        bundle = train_old(TrainConfig(seed=1, **{**SMALL, "epochs": 10}), restrict_classes(train, 3))
        totals = [h["total"] for h in bundle.history]
        assert np.all(np.isfinite(totals))
        assert totals[-1] < totals[0]

    def test_role(self, scenario):
        assert scenario[3].role == "old" and scenario[3].config.mode == "independent"


class TestPrototypes:
    def test_means(self):
        identity = nn.Backbone([2, 2], [np.eye(2)], [np.zeros(2)])
        bundle = type("B", (), {"backbone": identity})()
        ds = Dataset(2, 1, [0, 1], [0, 0], [[1.0, 0.0], [0.0, 1.0]])
        p = compute_prototypes(bundle, ds)
        assert p.vectors.tolist() == [[0.5, 0.5]] and p.counts.tolist() == [2]

    def test_duplicates(self):
        identity = nn.Backbone([2, 2], [np.eye(2)], [np.zeros(2)])
        bundle = type("B", (), {"backbone": identity})()
        ds = Dataset(2, 2, [0, 1, 2], [0, 0, 1], [[2.0, 1.0], [2.0, 1.0], [0.0, 3.0]])
        p = compute_prototypes(bundle, ds)
        assert p.vectors.tolist() == [[2.0, 1.0], [0.0, 3.0]]

    def test_shape(self, scenario):
        cfg, train, _, _, protos = scenario
        assert protos.vectors.shape == (train.num_classes, cfg.d_old)

    def test_file_roundtrip(self, scenario, tmp_path):
        protos = scenario[4]
        save_prototypes(protos, tmp_path / "p.json")
        back = load_prototypes(tmp_path / "p.json")
        assert np.array_equal(back.vectors, protos.vectors)


class TestTrainNew:
    def test_oca_requires_extra_dims(self):
        with pytest.raises(StructuralError):
            TrainConfig(mode="oca", d_extra=0)

    def test_prototype_count_checked(self, scenario):
        cfg, train, _, old, protos = scenario
        with pytest.raises(StructuralError):
            train_new(cfg, restrict_classes(train, 3), protos)

    @pytest.mark.parametrize("mode", ["oca", "oca_no_cos"])
    def test_ortho_layer_stays_orthogonal(self, scenario, mode):
        cfg, train, _, _, protos = scenario
        bundle = train_new(TrainConfig(seed=3, mode=mode, **SMALL), train, protos)
        assert orthogonality_defect(bundle.ortho.q) <= 1e-8

    def test_no_ortho_layer_when_ablated(self, scenario):
        cfg, train, _, _, protos = scenario
        bundle = train_new(TrainConfig(seed=3, mode="oca_no_ortho", **SMALL), train, protos)
        assert bundle.ortho is None

    def test_warm_start_copies_backbone(self, scenario):
        cfg, train, _, old, protos = scenario
        fresh = nn.init_backbone(old.backbone.layer_dims[:-1] + [6], 9)
        _warm_start(fresh, old.backbone)
        for w_new, w_old in zip(fresh.weights[:-1], old.backbone.weights[:-1]):
            assert np.array_equal(w_new, w_old)
        assert np.array_equal(fresh.weights[-1][:4], old.backbone.weights[-1])

    def test_warm_start_needs_old_model(self, scenario):
        cfg, train, _, _, protos = scenario
        with pytest.raises(StructuralError):
            train_new(TrainConfig(seed=3, warm_start=True, **SMALL), train, protos)

    def test_data_order_irrelevant(self, scenario):
        cfg, train, _, _, protos = scenario
        p = np.random.default_rng(0).permutation(len(train))
        shuffled = Dataset(train.input_dim, train.num_classes, train.ids[p], train.labels[p], train.X[p])
        a = train_new(TrainConfig(seed=3, **SMALL), train, protos)
        b = train_new(TrainConfig(seed=3, **SMALL), shuffled, protos)
        for name, t in a.tensors().items():
            assert t.tobytes() == b.tensors()[name].tobytes()


class TestExtract:
    def test_parts(self, scenario):
        cfg, train, evaluation, _, protos = scenario
        bundle = train_new(TrainConfig(seed=3, **SMALL), train, protos)
        full = extract_features(bundle, evaluation, "full")
        bct = extract_features(bundle, evaluation, "bct")
        assert full.dim == 6 and bct.dim == 4
        assert np.array_equal(full.features[:, :4], bct.features)
        assert full.ids.tolist() == evaluation.ids.tolist()

    def test_full_on_unexpanded(self, scenario):
        _, _, evaluation, old, _ = scenario
        with pytest.raises(StructuralError):
            extract_features(old, evaluation, "full")

    def test_deterministic(self, scenario):
        _, _, evaluation, old, _ = scenario
        a = extract_features(old, evaluation, "bct")
        b = extract_features(old, evaluation, "bct")
        assert a.features.tobytes() == b.features.tobytes()

    def test_inference_ignores_training_heads(self, scenario):
        cfg, train, evaluation, _, protos = scenario
        bundle = train_new(TrainConfig(seed=3, **SMALL), train, protos)
        before = extract_features(bundle, evaluation, "full").features.copy()
        rng = np.random.default_rng(1)
        bundle.ortho.params[:] = rng.normal(size=bundle.ortho.params.shape)
        bundle.ortho.refresh()
        bundle.classifier.weights[:] = rng.normal(size=bundle.classifier.weights.shape)
        assert np.array_equal(extract_features(bundle, evaluation, "full").features, before)


class TestPersistence:
    def test_bundle_roundtrip_bit_exact(self, scenario, tmp_path):
        cfg, train, evaluation, _, protos = scenario
        bundle = train_new(TrainConfig(seed=3, **SMALL), train, protos)
        save_bundle(bundle, tmp_path / "m.ckpt")
        back = load_bundle(tmp_path / "m.ckpt")
        assert back.config == bundle.config
        a = extract_features(bundle, evaluation, "full").features
        b = extract_features(back, evaluation, "full").features
        assert a.tobytes() == b.tobytes()
        save_bundle(back, tmp_path / "n.ckpt")
        assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "n.ckpt").read_bytes()

    def test_config_hash_key_order(self):
        assert config_hash({"a": 1, "b": [2]}) == config_hash({"b": [2], "a": 1})
        assert config_hash({"a": 1}) != config_hash({"a": 2})

    def test_manifest(self, tmp_path):
        append_manifest(tmp_path / "m.log", "r1", "abc", 0, {"total": 1.5})
        append_manifest(tmp_path / "m.log", "r2", "abc", 1, {"total": 0.5})
        lines = (tmp_path / "m.log").read_text().splitlines()
        assert len(lines) == 2
        run_id, h, seed, losses = lines[1].split("\t")
        assert (run_id, h, seed, json.loads(losses)) == ("r2", "abc", "1", {"total": 0.5})
