import math
from dataclasses import replace

import numpy as np
import pytest

from tieforge import numcore as nc
from tieforge.corpus import Bag, SynthSpec, expand_training_units, generate_synthetic
from tieforge.evalkit import masked_mean_cosine
from tieforge.tiesgraph import TiesGraph, exclusion_penalty
from tieforge.trainer import (CheckpointError, TrainConfig, TrainingError, forward_loss, init_params,
                              load_checkpoint, predict_bag, relation_matrix, save_checkpoint, train)

TINY = TrainConfig(feature_maps=6, word_dim=4, pos_dim=2, batch_size=8, epochs=3, seed=0)


@pytest.fixture(scope="module")
def small():
    spec = SynthSpec(num_relations=5, num_bags=80, num_entities=20, implications=[(1, 2, 1.0), (3, 4, 0.5)],
                     exclusions=[(1, 3), (2, 4)], seed=3, max_sentences=3)
    train_bags, test_bags, vocab, rels, ties = generate_synthetic(spec)
    graph = TiesGraph.from_bags(train_bags, 5, TINY.theta)
    return train_bags, test_bags, vocab, graph


def test_default_hyperparameters():
    c = TrainConfig()
    assert (c.kernel, c.feature_maps, c.word_dim, c.pos_dim) == (3, 320, 50, 5)
    assert (c.learning_rate, c.theta, c.lam, c.gcn_layers) == (0.19, 0.18, 0.25, 2)
    assert c.rel_dim == 960


def test_config_validation():
    with pytest.raises(nc.ConfigError):
        TrainConfig(kernel=4).validate()
    with pytest.raises(nc.ConfigError):
        TrainConfig(lam=-1).validate()
    with pytest.raises(nc.ConfigError):
        TrainConfig.from_dict({"bogus": 1})


def test_lambda_zero_is_mean_nll(small):
    train_bags, _, vocab, graph = small
    p = init_params(len(vocab), 5, TINY)
    units = expand_training_units(train_bags)[:10]
    loss, logits = forward_loss(units, p, graph, TINY, lam=0.0)
    nll = [float(nc.nll_from_logits(nc.Tensor(l), g).values) for l, (_, g) in zip(logits, units)]
    assert float(loss.values) == pytest.approx(np.mean(nll), abs=1e-12)
    loss.backward()
    # the penalty path is absent: H gradients come only from the NLL terms
    assert p.gcn.H0.grad is not None


def test_loss_decomposition(small):
    train_bags, _, vocab, graph = small
    p = init_params(len(vocab), 5, TINY)
    units = expand_training_units(train_bags)[:12]
    for lam in (0.25, 1.0, 7.5):
        full = float(forward_loss(units, p, graph, TINY, lam=lam)[0].values)
        base = float(forward_loss(units, p, graph, TINY, lam=0.0)[0].values)
        omega = float(exclusion_penalty(relation_matrix(p, graph, TINY), graph.U).values)
        assert abs((full - base) - lam * omega) <= 1e-9


@pytest.mark.parametrize("seed", range(3))
def test_composite_gradient(small, seed):
    train_bags, _, vocab, graph = small
    cfg = replace(TINY, seed=seed, lam=0.7)
    p = init_params(len(vocab), 5, cfg)
    units = expand_training_units(train_bags)[seed * 4:seed * 4 + 4]
    rep = nc.grad_check(lambda *_: forward_loss(units, p, graph, cfg)[0], p.tensors())
    assert rep.passed, rep


def test_random_init_nll_near_log_k():
    spec = SynthSpec(seed=7)
    train_bags, _, vocab, _, _ = generate_synthetic(spec)
    cfg = TrainConfig(seed=7)
    graph = TiesGraph.from_bags(train_bags, 12, cfg.theta)
    p = init_params(len(vocab), 12, cfg)
    units = expand_training_units(train_bags)[:200]
    _, logits = forward_loss(units, p, graph, cfg)
    nll = np.mean([float(nc.nll_from_logits(nc.Tensor(l), g).values) for l, (_, g) in zip(logits, units)])
    assert abs(nll - math.log(12)) <= 0.2 * math.log(12)


def test_train_deterministic(small):
    train_bags, _, vocab, graph = small
    p1, t1 = train(train_bags, TINY, graph, len(vocab))
    p2, t2 = train(train_bags, TINY, graph, len(vocab))
    assert t1 == t2
    assert all(np.array_equal(a.values, b.values) for a, b in zip(p1.tensors(), p2.tensors()))
    assert [e for e, _ in t1] == [1, 2, 3]


def test_train_debug_mode_every_param_gets_gradient(small):
    train_bags, _, vocab, graph = small
    params, _ = train(train_bags, replace(TINY, debug=True, epochs=1), graph, len(vocab))
    assert all(np.all(np.isfinite(t.values)) for t in params.tensors())


def test_train_divergence_aborts(small):
    train_bags, _, vocab, graph = small
    with pytest.raises(TrainingError, match="divergence"):
        train(train_bags, replace(TINY, learning_rate=1e6, clip_norm=None, epochs=5), graph, len(vocab))


def test_large_lambda_pushes_excluded_pairs_apart(small):
    train_bags, _, vocab, graph = small
    dots = {}
    for lam in (0.0, 100.0):
        p, _ = train(train_bags, replace(TINY, lam=lam, epochs=5), graph, len(vocab))
        H = relation_matrix(p, graph, TINY).values
        off = (graph.U > 0) & ~np.eye(5, dtype=bool)
        dots[lam] = (H @ H.T)[off].mean()
    assert dots[100.0] <= dots[0.0]


def test_graph_off_has_no_row_mixing(small):
    _, _, vocab, graph = small
    cfg = replace(TINY, graph_enabled=False)
    assert cfg.effective_lambda == 0.0
    p = init_params(len(vocab), 5, cfg)
    base = relation_matrix(p, graph, cfg).values.copy()
    p.gcn.H0.values[2] += 0.5
    after = relation_matrix(p, graph, cfg).values
    changed = np.any(after != base, axis=1)
    assert changed.tolist() == [False, False, True, False, False]
    # with the graph on, relation 1 listens to relation 2
    on = relation_matrix(p, graph, TINY).values
    p.gcn.H0.values[2] -= 0.5
    assert np.any(relation_matrix(p, graph, TINY).values[1] != on[1])


# ---------------------------------------------------------------- prediction

def test_predict_sums_to_one(small):
    train_bags, test_bags, vocab, graph = small
    p = init_params(len(vocab), 5, TINY)
    for bag in test_bags[:5]:
        probs = predict_bag(bag, p, graph, TINY)
        assert probs.shape == (5,) and abs(probs.sum() - 1) <= 1e-9


def test_predict_duplicate_and_order_invariance(small):
    train_bags, _, vocab, graph = small
    p, _ = train(train_bags, replace(TINY, epochs=1), graph, len(vocab))
    one = next(b for b in train_bags if len(b.sentences) == 1)
    five = Bag(one.bag_id, one.head, one.tail, one.sentences * 5, one.labels)
    np.testing.assert_allclose(predict_bag(one, p, graph, TINY), predict_bag(five, p, graph, TINY), atol=1e-12)
    multi = next(b for b in train_bags if len(b.sentences) >= 2)
    rev = Bag(multi.bag_id, multi.head, multi.tail, multi.sentences[::-1], multi.labels)
    np.testing.assert_allclose(predict_bag(multi, p, graph, TINY), predict_bag(rev, p, graph, TINY),
                               atol=1e-9, rtol=0)


def test_predict_zero_params_uniform(small):
    _, test_bags, vocab, graph = small
    p = init_params(len(vocab), 5, TINY)
    for t in p.tensors():
        t.values[...] = 0
    np.testing.assert_allclose(predict_bag(test_bags[0], p, graph, TINY), 0.2, atol=1e-15)


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip(small, tmp_path):
    train_bags, test_bags, vocab, graph = small
    p, _ = train(train_bags, replace(TINY, epochs=1), graph, len(vocab))
    save_checkpoint(p, TINY, tmp_path / "m.ckpt", extra={"note": "x"})
    q, cfg, header = load_checkpoint(tmp_path / "m.ckpt", with_header=True)
    assert cfg == TINY and header["extra"] == {"note": "x"} and header["k"] == 5
    assert all(np.array_equal(a.values, b.values) for a, b in zip(p.tensors(), q.tensors()))
    for bag in test_bags[:5]:
        assert np.array_equal(predict_bag(bag, p, graph, TINY), predict_bag(bag, q, graph, cfg))


def test_checkpoint_float32_blocks(small, tmp_path):
    train_bags, _, vocab, graph = small
    cfg = replace(TINY, dtype="float32")
    p = init_params(len(vocab), 5, cfg)
    assert p.gcn.H0.values.dtype == np.float32
    save_checkpoint(p, cfg, tmp_path / "f.ckpt")
    q, _ = load_checkpoint(tmp_path / "f.ckpt")
    assert all(np.array_equal(a.values, b.values) for a, b in zip(p.tensors(), q.tensors()))


def test_checkpoint_truncated(small, tmp_path):
    _, _, vocab, graph = small
    p = init_params(len(vocab), 5, TINY)
    path = tmp_path / "m.ckpt"
    save_checkpoint(p, TINY, path)
    data = path.read_bytes()
    for cut in (len(data) - 3, 30, 5):
        path.write_bytes(data[:cut])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)


def test_checkpoint_k_mismatch(tmp_path):
    cfg = replace(TINY, feature_maps=2)
    p = init_params(20, 12, cfg)
    save_checkpoint(p, cfg, tmp_path / "m.ckpt")
    with pytest.raises(CheckpointError, match="k=12.*k=53"):
        load_checkpoint(tmp_path / "m.ckpt", expected_k=53)


def test_checkpoint_layout(small, tmp_path):
    _, _, vocab, graph = small
    p = init_params(len(vocab), 5, TINY)
    save_checkpoint(p, TINY, tmp_path / "m.ckpt")
    raw = (tmp_path / "m.ckpt").read_bytes()
    assert raw[:8] == b"TIEFORGE"
    _, cfg, header = load_checkpoint(tmp_path / "m.ckpt", with_header=True)
    assert [n for n, _ in header["blocks"]] == ["word_table", "pos1_table", "pos2_table", "filters",
                                               "filter_bias", "H0", "W0", "W1", "class_bias"]
    tail = np.frombuffer(raw[-5 * 8:], dtype="<f8")
    assert np.array_equal(tail, p.class_bias.values)


def test_masked_cosine_helper_ignores_diagonal():
    H = np.array([[1.0, 0], [0, 1], [1, 1]])
    U = np.ones((3, 3))
    assert masked_mean_cosine(H, U) == pytest.approx((0 + 2 * 2 ** -0.5) * 2 / 6)


def test_loss_decreases_over_ten_epochs():
    train_bags, _, vocab, _, _ = generate_synthetic(SynthSpec(num_bags=400, seed=7))
    cfg = TrainConfig(feature_maps=16, epochs=10, seed=7)
    graph = TiesGraph.from_bags(train_bags, 12, cfg.theta)
    _, trace = train(train_bags, cfg, graph, len(vocab))
    assert trace[-1][1] < trace[0][1]
