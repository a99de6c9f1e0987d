import math

import numpy as np
import pytest

from galmad.autodiff import Tensor
from galmad.errors import DimensionError, InsufficientDataError
from galmad.graph import Topology
from galmad.model import (
    DetectionResult,
    GalMadConfig,
    ModelParams,
    decode,
    detect,
    encode,
    load_checkpoint,
    reconstruction_loss,
    save_checkpoint,
    score,
    step_losses,
    train,
    window_losses,
)

from gradcheck import assert_grads_match


TOPO3 = Topology.from_edges(["a", "b", "c"], [("a", "b"), ("b", "c")])


def tiny_config(**kw):
    base = dict(n_services=3, n_features=2, window_len=3, d1=3, d2=2, d_z=1,
                encoder_hidden=2, decoder_hidden=2, seed=0)
    base.update(kw)
    return GalMadConfig(**base)


def test_encode_shape_contract():
    cfg = tiny_config()
    params = ModelParams(cfg)
    for t_extra in (0,):
        x = np.zeros((cfg.window_len, 3, 2))
        z = encode(params, x, TOPO3)
        assert z.shape == (3, 1)


def test_twelve_services_dz1_embedding_is_12_vector():
    services = [f"s{i}" for i in range(12)]
    topo = Topology.from_edges(services, [(services[i], services[i + 1])
                                          for i in range(11)])
    cfg = GalMadConfig(n_services=12, n_features=4, window_len=4, d1=4, d2=3,
                       d_z=1, encoder_hidden=3, decoder_hidden=3)
    params = ModelParams(cfg)
    z = encode(params, np.random.default_rng(0).normal(size=(4, 12, 4)), topo)
    assert z.shape == (12, 1)


def test_encode_permutation_equivariance():
    cfg = tiny_config()
    params = ModelParams(cfg)
    rng = np.random.default_rng(1)
    x = rng.normal(size=(3, 3, 2))
    perm = np.array([2, 0, 1])
    topo_p = Topology([TOPO3.services[i] for i in perm],
                      TOPO3.adjacency[np.ix_(perm, perm)])
    z = encode(params, x, TOPO3).data
    z_p = encode(params, x[:, perm], topo_p).data
    np.testing.assert_allclose(z_p, z[perm], atol=1e-10)


def test_decode_shape_and_roundtrip_shape():
    cfg = tiny_config()
    params = ModelParams(cfg)
    z = np.random.default_rng(2).normal(size=(3, 1))
    for t in (3, 5):
        out = decode(params, z, TOPO3, t)
        assert out.shape == (t, 3, 2)
    x = np.random.default_rng(3).normal(size=(3, 3, 2))
    recon = decode(params, encode(params, x, TOPO3), TOPO3, 3)
    assert recon.shape == x.shape


def test_decode_symmetric_embeddings_symmetric_outputs():
    # two nodes with identical neighborhoods and identical embeddings must
    # reconstruct identical sequences
    topo = Topology.from_edges(["a", "b"], [("a", "b")])
    cfg = tiny_config(n_services=2)
    params = ModelParams(cfg)
    z = np.array([[0.7], [0.7]])
    out = decode(params, z, topo, 4).data
    np.testing.assert_allclose(out[:, 0], out[:, 1], atol=1e-12)


def test_reconstruction_loss_zero_on_perfect_reconstruction():
    cfg = tiny_config()
    params = ModelParams(cfg)
    x = np.random.default_rng(4).normal(size=(3, 3, 2))
    z = encode(params, x, TOPO3)
    recon = decode(params, z, TOPO3, 3)
    from galmad.autodiff import mse

    assert mse(recon, recon).item() == 0.0
    assert reconstruction_loss(params, x, TOPO3).item() >= 0.0


def test_score_identity_and_paper_anchors():
    y, flag = score(2.0, 2.0)
    assert y == pytest.approx(0.5)
    assert flag is False  # strict inequality at the boundary
    y, flag = score(1.930, 2.0)
    assert y == pytest.approx(1 / (1 + math.exp(0.07)), rel=1e-9)
    assert y == pytest.approx(0.4825, abs=1e-4)
    assert flag is False
    y, flag = score(40366.418, 2.0)
    assert y == pytest.approx(1.0)
    assert flag is True
    y, flag = score(0.0, 2.0)
    assert flag is False
    y, flag = score(2.0 + 1e-9, 2.0)
    assert flag is True


def test_score_monotone():
    values = [score(l, 2.0)[0] for l in np.linspace(0, 10, 50)]
    assert all(b > a for a, b in zip(values, values[1:]))


def test_end_to_end_gradcheck_tiny():
    cfg = tiny_config()
    params = ModelParams(cfg)
    x = np.random.default_rng(5).normal(size=(3, 3, 2))

    def loss():
        return reconstruction_loss(params, x, TOPO3)

    assert_grads_match(loss, params.params(), rtol=1e-3)


@pytest.mark.parametrize("variant", ["gat-ae", "lstm-ae", "linear-ae"])
def test_variant_shapes_and_gradflow(variant):
    cfg = tiny_config(variant=variant)
    params = ModelParams(cfg)
    x = np.random.default_rng(6).normal(size=(3, 3, 2))
    loss = reconstruction_loss(params, x, TOPO3)
    loss.backward()
    for name, p in params.params().items():
        assert p.grad is not None, f"{variant}: no grad for {name}"


def test_train_overfits_identical_windows():
    cfg = tiny_config(learning_rate=0.02, lr_decay_per_epoch=1.0, epochs=200,
                      batch_size=1, d1=4, d2=3, d_z=2, encoder_hidden=4,
                      decoder_hidden=4)
    window = np.random.default_rng(7).normal(size=(3, 3, 2))
    windows = np.repeat(window[None], 5, axis=0)
    params, log = train(cfg, windows, TOPO3)
    assert log[-1]["mean_loss"] < 0.01


def test_train_determinism_bitwise():
    cfg = tiny_config(epochs=3, batch_size=4)
    windows = np.random.default_rng(8).normal(size=(6, 3, 3, 2))
    p1, log1 = train(cfg, windows, TOPO3)
    p2, log2 = train(cfg, windows, TOPO3)
    assert log1 == log2
    for (n1, t1), (n2, t2) in zip(p1.params().items(), p2.params().items()):
        assert n1 == n2
        np.testing.assert_array_equal(t1.data, t2.data)


def test_train_empty_set_errors():
    cfg = tiny_config()
    with pytest.raises(InsufficientDataError):
        train(cfg, np.zeros((0, 3, 3, 2)), TOPO3)


def test_detect_window_counts_and_bounds():
    cfg = tiny_config(window_len=3)
    params = ModelParams(cfg)
    stream = np.random.default_rng(9).normal(size=(3, 3, 2))
    results = detect(params, stream, cfg, TOPO3)
    assert len(results) == 1
    stream = np.random.default_rng(9).normal(size=(6, 3, 2))
    results = detect(params, stream, cfg, TOPO3)
    assert len(results) == 2
    # contiguous bounds at 5-second spacing
    assert results[0].window_start == 0.0
    assert results[0].window_end == 10.0
    assert results[1].window_start == 15.0
    assert results[1].window_end == 25.0
    for r in results:
        assert r.is_anomaly == (r.loss > cfg.threshold)


def test_detect_insufficient_data():
    cfg = tiny_config(window_len=3)
    params = ModelParams(cfg)
    with pytest.raises(InsufficientDataError):
        detect(params, np.zeros((2, 3, 2)), cfg, TOPO3)


def test_window_and_step_losses_consistent():
    cfg = tiny_config()
    params = ModelParams(cfg)
    x = np.random.default_rng(10).normal(size=(3, 3, 2))
    per_win = window_losses(params, x, TOPO3)
    per_step = step_losses(params, x, TOPO3)
    assert per_step.shape == (3,)
    assert per_win == pytest.approx(per_step.mean())


def test_checkpoint_roundtrip(tmp_path):
    cfg = tiny_config()
    params = ModelParams(cfg, np.random.default_rng(11))
    path = tmp_path / "model.npz"
    save_checkpoint(params, path)
    loaded = load_checkpoint(path)
    assert loaded.config == cfg
    x = np.random.default_rng(12).normal(size=(3, 3, 2))
    np.testing.assert_array_equal(
        window_losses(params, x, TOPO3), window_losses(loaded, x, TOPO3)
    )


def test_config_validation():
    with pytest.raises(ValueError):
        tiny_config(window_len=1)
    with pytest.raises(ValueError):
        tiny_config(d_z=0)
    with pytest.raises(ValueError):
        tiny_config(variant="nope")
    with pytest.raises(ValueError):
        tiny_config(threshold=float("inf"))


def test_detection_result_json():
    r = DetectionResult(0.0, 115.0, 1.2, 0.3, False)
    import json as _json

    doc = _json.loads(r.to_json())
    assert doc["is_anomaly"] is False
    assert doc["loss"] == 1.2
