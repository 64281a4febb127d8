import numpy as np
import pytest

from fedface.data import BatchStream
from fedface.fed_core import (
    HyperParams, ServerState, TrainerState, aggregate_and_update_momentum, backbone_step_pfm,
    classifier_step, load_checkpoint, run_local_round, save_checkpoint,
)
from fedface.model import BackboneSpec, Batch, DivergenceError, HeadSpec, init_backbone, init_head
from fedface.params import ParamError

a = np.array


def test_classifier_step_examples():
    om, M = classifier_step(a([1.0]), a([2.0]), a([0.5]), 0.9, 0.1)
    assert M[0] == pytest.approx(2.3, abs=1e-15) and om[0] == pytest.approx(0.77, abs=1e-15)
    om, M = classifier_step(a([0.0]), a([123.0]), a([1.0]), 0.0, 0.1)
    assert (om[0], M[0]) == pytest.approx((-0.1, 1.0))
    om, _ = classifier_step(a([4.0]), a([0.0]), a([0.0]), 0.9, 0.1)
    assert om[0] == 4.0


def test_backbone_step_examples():
    assert backbone_step_pfm(a([1.0]), a([0.5]), 0.9, 0.1, a([2.0]), 10)[0] == pytest.approx(0.932)
    plain = backbone_step_pfm(a([1.0]), a([0.5]), 0.9, 0.1, a([0.0]), 10)
    assert plain[0] == pytest.approx(1.0 - 0.05)
    assert backbone_step_pfm(a([1.0]), a([0.5]), 0.0, 0.1, a([7.0]), 3)[0] == plain[0]
    with pytest.raises(ValueError):
        backbone_step_pfm(a([1.0]), a([0.5]), 0.9, 0.1, a([2.0]), 0)
    with pytest.raises(ParamError):
        backbone_step_pfm(a([1.0]), a([0.5, 1.0]), 0.9, 0.1, a([2.0]), 1)


def test_aggregate_example():
    server = ServerState(a([1.0]), a([1.0]), a([1.0]))
    new = aggregate_and_update_momentum(server, [a([0.8])], 0.1, 0.9)
    assert new.M_Theta[0] == pytest.approx(2.0, abs=1e-12)
    assert new.G[0] == pytest.approx(1.1, abs=1e-12)
    assert new.round == 1


def test_aggregate_no_movement_gives_zero_momentum():
    server = ServerState(a([1.0, 2.0]), a([5.0, -5.0]), a([0.3, 0.7]))
    new = aggregate_and_update_momentum(server, [a([1.0, 2.0])] * 2, 0.1, 0.9)
    assert np.all(new.M_Theta == 0.0)


def test_aggregate_identity_on_random_draws():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n, d = rng.integers(1, 5), rng.integers(1, 6)
        w = rng.dirichlet(np.ones(n))
        server = ServerState(rng.normal(size=d), rng.normal(size=d), w)
        beta, eta = rng.uniform(0, 0.99), 10 ** rng.uniform(-3, 0)
        new = aggregate_and_update_momentum(server, list(rng.normal(size=(n, d))), eta, beta)
        recon = beta * server.M_Theta + new.G
        scale = np.maximum(np.abs(new.M_Theta), np.abs(beta * server.M_Theta)) + 1.0
        assert np.all(np.abs(recon - new.M_Theta) <= 8 * np.finfo(float).eps * scale)


def test_aggregate_one_hot_weighting_is_exact():
    rng = np.random.default_rng(1)
    thetas = list(rng.normal(size=(3, 5)))
    server = ServerState(rng.normal(size=5), np.zeros(5), a([0.0, 1.0, 0.0]))
    new = aggregate_and_update_momentum(server, thetas, 0.1, 0.9)
    assert new.Theta.tobytes() == thetas[1].tobytes()


def test_aggregate_errors():
    server = ServerState(a([1.0]), a([0.0]), a([1.0]))
    with pytest.raises(ValueError):
        aggregate_and_update_momentum(server, [a([0.0])], 0.0, 0.9)
    with pytest.raises(ParamError):
        aggregate_and_update_momentum(server, [a([0.0]), a([0.0])], 0.1, 0.9)
    with pytest.raises(DivergenceError):
        aggregate_and_update_momentum(server, [a([-1e308])], 1e-300, 0.9)


def test_eta_schedule():
    hp = HyperParams(R=100, lr=1.0, lr_decay_at=(0.4, 0.7))
    assert hp.eta(1) == 1.0 and hp.eta(40) == 1.0
    assert hp.eta(41) == pytest.approx(0.1) and hp.eta(71) == pytest.approx(0.01)


B = BackboneSpec(input_dim=4, hidden_dims=(5,), feature_dim=3)
H = HeadSpec(feature_dim=3, num_classes=2)


def _trainer(seed, pid=0):
    rng = np.random.default_rng(seed)
    data = Batch(rng.normal(size=(20, 4)), rng.integers(0, 2, size=20))
    omega = init_head(H, rng, sigma=0.1)
    return TrainerState(pid, init_backbone(B, rng), omega, np.zeros(omega.size),
                        BatchStream(data, 4, seed))


def test_local_round_k1_beta0_is_one_plain_sgd_step():
    t = _trainer(0)
    stream_copy = BatchStream(t.stream.data, 4, 0)
    Theta = init_backbone(B, np.random.default_rng(9))
    omega0 = t.omega.copy()
    from fedface.model import loss_and_grads
    _, g, h = loss_and_grads(B, H, Theta, omega0, stream_copy.next())
    hp = HyperParams(K=1, beta=0.0)
    run_local_round(t, Theta, np.ones(Theta.size), hp, "pfm", B, H, 0.1)
    np.testing.assert_allclose(t.theta, Theta - 0.1 * g, atol=1e-15)
    np.testing.assert_allclose(t.omega, omega0 - 0.1 * h, atol=1e-15)


def test_heads_persist_and_identical_parties_aggregate_to_themselves():
    t1, t2 = _trainer(3, 0), _trainer(3, 1)
    Theta = init_backbone(B, np.random.default_rng(4))
    server = ServerState.initial(Theta, [0.5, 0.5])
    hp = HyperParams(K=5)
    for _ in range(3):
        for t in (t1, t2):
            run_local_round(t, server.Theta, server.M_Theta, hp, "pfm", B, H, 0.1)
        server = aggregate_and_update_momentum(server, [t1.theta, t2.theta], 0.1, hp.beta)
        np.testing.assert_allclose(server.Theta, t1.theta, atol=1e-15)
    # heads evolved locally and were never reset
    assert not np.allclose(t1.omega, _trainer(3).omega)


def test_bad_mode():
    with pytest.raises(ValueError):
        run_local_round(_trainer(0), np.zeros(B.num_params), np.zeros(B.num_params),
                        HyperParams(), "scaffold", B, H, 0.1)


def test_checkpoint_round_trip(tmp_path):
    ts = [_trainer(s, i) for i, s in enumerate((1, 2))]
    for t in ts:
        t.stream.next()
        t.observe_loss(0.5)
    server = ServerState(np.arange(3.0), np.ones(3), a([0.25, 0.75]), round=7)
    save_checkpoint(tmp_path / "c.ckpt", server, ts, extra={"k": 1})
    ck = load_checkpoint(tmp_path / "c.ckpt")
    assert ck.round == 7 and ck.header["extra"] == {"k": 1}
    for name in ("Theta", "M_Theta", "w"):
        assert getattr(ck.server, name).tobytes() == np.asarray(getattr(server, name)).tobytes()
    for t, th, om, M in zip(ts, ck.thetas, ck.omegas, ck.M_omegas):
        assert th.tobytes() == t.theta.tobytes()
        assert om.tobytes() == t.omega.tobytes()
        assert M.tobytes() == np.asarray(t.M_omega, float).tobytes()
    restored = BatchStream(ts[0].stream.data, 4, 0)
    restored.restore(ck.header["streams"][0])
    np.testing.assert_array_equal(restored.next_indices(), ts[0].stream.next_indices())
