import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from rhgn import RHGNClassifier
from rhgn.exceptions import CheckpointError
from rhgn.hetgraph import LabelSplit
from rhgn.synthdata import SynthConfig, generate


@pytest.fixture(scope="module")
def fitted():
    graph, labels = generate(SynthConfig(num_users=40, num_items=12, num_categories=2,
                                         purchases_per_user=3, clicks_per_user=3, seed=1))
    est = RHGNClassifier(d=8, h=2, L=2, epochs=15, batch_size="full", max_lr=0.02,
                         embedding_std=0.1, seed=0)
    return est.fit(graph, labels), graph, labels


def test_params_round_trip():
    est = RHGNClassifier(d=16, h=4, ablation={"click": "x"})
    params = est.get_params()
    assert params["d"] == 16 and params["ablation"] == {"click": "x"}
    twin = clone(est)
    assert twin.get_params() == params
    est.set_params(epochs=3)
    assert est.epochs == 3
    cfg = est.get_config()
    assert cfg.epochs == 3 and cfg.ablation == {"click": "x"}
    assert RHGNClassifier.from_config(cfg).get_params() == est.get_params()


def test_unfitted():
    with pytest.raises(NotFittedError):
        RHGNClassifier().predict()


def test_fit_predict(fitted):
    est, graph, labels = fitted
    assert "click_rev" in est.graph_.relation_types
    assert len(est.history_) == 15
    users = est.split_.test_ids
    pred = est.predict(node_ids=users)
    proba = est.predict_proba(node_ids=users)
    assert pred.shape == (len(users),)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_array_equal(pred, proba.argmax(axis=1))
    assert 0.0 <= est.score(None, labels) <= 1.0
    # raw graph is prepared the same way
    np.testing.assert_array_equal(est.predict(graph, users), pred)


def test_attention_records(fitted):
    est, _, _ = fitted
    recs = est.attention()
    assert len(recs) == 2
    assert recs[0].alpha.shape == (est.graph_.num_edges, 2)


def test_save_load(fitted, tmp_path):
    est, graph, labels = fitted
    est.save(tmp_path / "m.json")
    back = RHGNClassifier.load(tmp_path / "m.json", graph)
    assert back.split_ == est.split_
    np.testing.assert_array_equal(back.decision_function(), est.decision_function())
    assert back.get_params() == est.get_params()
    other, _ = generate(SynthConfig(num_users=41, num_items=12, num_categories=2, seed=1))
    with pytest.raises(CheckpointError):
        RHGNClassifier.load(tmp_path / "m.json", other)


def test_explicit_split_and_ablation(fitted):
    _, graph, labels = fitted
    ids = sorted(labels.labels)
    split = LabelSplit(tuple(ids[:30]), tuple(ids[30:35]), tuple(ids[35:]))
    est = RHGNClassifier(d=8, h=2, L=1, epochs=2, batch_size="full",
                         ablation={"click": "interact", "purchase": "interact"})
    est.fit(graph, labels, split=split)
    assert est.split_ == split
    assert set(est.graph_.relation_types) == {"interact", "interact_rev", "has_attr", "has_attr_rev"}
