import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evograph import diffengine as de
from evograph.data import SyntheticConfig, generate_synthetic
from evograph.diffengine import DimensionError, Tensor, gradcheck
from evograph.gnn import (
    Discriminator,
    EccLayer,
    Generator,
    discriminator_forward,
    ecc_forward,
    generator_forward,
    load_checkpoint,
    parameter_hash,
    save_checkpoint,
)
from evograph.graphcore import ConnectivityMatrix
from evograph.training import TrainConfig, train_cascade


def random_adj(rng, n, batch=None):
    shape = (n, n) if batch is None else (batch, n, n)
    u = rng.random(shape)
    w = (u + np.swapaxes(u, -1, -2)) / 2
    idx = np.arange(n)
    w[..., idx, idx] = 0
    return w


def ecc_reference(layer: EccLayer, adj: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Literal per-node loop over neighbourhoods with Theta built edge by edge."""
    n = adj.shape[0]
    out = np.zeros((n, layer.d_out))
    for k in range(n):
        nbrs = [j for j in range(n) if adj[j, k] > 0 or j == k]
        acc = np.zeros(layer.d_out)
        for j in nbrs:
            label = 0.0 if j == k else adj[j, k]
            acc += layer.theta(label) @ x[j]
        out[k] = acc / len(nbrs) + layer.bias.data
    return out


def set_layer(layer, weight, fbias, bias):
    layer.filter_weight.data[:] = weight
    layer.filter_bias.data[:] = fbias
    layer.bias.data[:] = bias


# ---------------------------------------------------------------- ecc
def test_ecc_identity_filter_two_nodes():
    layer = EccLayer(1, 1, np.random.default_rng(0))
    set_layer(layer, 0.0, 1.0, 0.0)
    adj = ConnectivityMatrix(np.array([[0, 0.5], [0.5, 0]]))
    out = ecc_forward(layer, adj, Tensor([[1.0], [3.0]]))
    assert out.data[:, 0].tolist() == [2.0, 2.0]


def test_ecc_zero_filter_outputs_bias():
    layer = EccLayer(3, 2, np.random.default_rng(0))
    set_layer(layer, 0.0, 0.0, [0.7, -0.2])
    rng = np.random.default_rng(1)
    out = ecc_forward(layer, random_adj(rng, 4), Tensor(rng.normal(size=(4, 3))))
    np.testing.assert_array_equal(out.data, np.tile([0.7, -0.2], (4, 1)))


def test_ecc_isolated_nodes_return_input():
    layer = EccLayer(1, 1, np.random.default_rng(0))
    set_layer(layer, 0.0, 1.0, 0.0)
    x = Tensor([[0.3], [-1.0], [2.5]])
    out = ecc_forward(layer, np.zeros((3, 3)), x)
    np.testing.assert_array_equal(out.data, x.data)


def test_ecc_matches_per_edge_reference():
    rng = np.random.default_rng(2)
    layer = EccLayer(4, 3, rng)
    adj = random_adj(rng, 6)
    adj[0, 3] = adj[3, 0] = 0.0  # a missing edge
    x = rng.normal(size=(6, 4))
    np.testing.assert_allclose(ecc_forward(layer, Tensor(adj), Tensor(x)).data, ecc_reference(layer, adj, x),
                               atol=1e-13)


def test_ecc_dimension_mismatch():
    layer = EccLayer(3, 2, np.random.default_rng(0))
    with pytest.raises(DimensionError):
        ecc_forward(layer, np.zeros((4, 4)), Tensor(np.zeros((4, 2))))


def test_ecc_permutation_equivariant_20_cases():
    rng = np.random.default_rng(10)
    for _ in range(20):
        layer = EccLayer(3, 4, rng)
        adj = random_adj(rng, 5)
        adj[rng.random((5, 5)) < 0.3] = 0.0
        adj = np.minimum(adj, adj.T)
        x = rng.normal(size=(5, 3))
        perm = rng.permutation(5)
        out = ecc_forward(layer, Tensor(adj), Tensor(x)).data
        out_p = ecc_forward(layer, Tensor(adj[np.ix_(perm, perm)]), Tensor(x[perm])).data
        np.testing.assert_allclose(out_p, out[perm], atol=1e-13)


def test_ecc_gradcheck_linear():
    rng = np.random.default_rng(3)
    layer = EccLayer(4, 3, rng)
    adj, x = Tensor(random_adj(rng, 5, batch=2)), Tensor(rng.normal(size=(2, 5, 4)))
    w = Tensor(rng.normal(size=(2, 5, 3)))
    rep = gradcheck(lambda: (layer(adj, x) * w).sum(), layer.parameters(), h=1e-4, tol=1e-5)
    assert rep.passed, rep.errors


# ---------------------------------------------------------------- generator
def zero_generator(n):
    gen = Generator(n, seed=0)
    for layer in gen.layers:
        set_layer(layer, 0.0, 0.0, 0.0)
    return gen


def test_generator_zero_weights_is_skip_only():
    g = ConnectivityMatrix(random_adj(np.random.default_rng(4), 6))
    gen = zero_generator(6)
    assert generator_forward(gen, g, mode="eval") == g
    assert generator_forward(gen, g, mode="train") == g


def test_generator_eval_deterministic():
    rng = np.random.default_rng(5)
    gen = Generator(6, seed=1)
    g = ConnectivityMatrix(random_adj(rng, 6))
    a = generator_forward(gen, g, mode="eval")
    b = generator_forward(gen, g, mode="eval")
    assert a.weights.tobytes() == b.weights.tobytes()


def test_generator_dimension_mismatch():
    with pytest.raises(DimensionError):
        Generator(5, seed=0)(Tensor(np.zeros((1, 6, 6))))


def test_generator_dropout_only_in_training():
    rng = np.random.default_rng(6)
    gen = Generator(6, seed=2, dropout=0.5)
    x = Tensor(random_adj(rng, 6, batch=3))
    a = generator_forward(gen, x, mode="train", rng=np.random.default_rng(0)).data
    b = generator_forward(gen, x, mode="train", rng=np.random.default_rng(1)).data
    assert not np.array_equal(a, b)
    gen.eval()
    np.testing.assert_array_equal(gen(x, rng=np.random.default_rng(0)).data, gen(x, rng=np.random.default_rng(1)).data)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(0.01, 50.0), train=st.booleans())
def test_generator_output_invariants_for_any_parameters(seed, scale, train):
    rng = np.random.default_rng(seed)
    gen = Generator(5, seed=seed, dropout=0.3)
    for p in gen.parameters():
        p.data[...] = rng.normal(size=p.shape) * scale
    out = generator_forward(gen, Tensor(random_adj(rng, 5, batch=2)), mode="train" if train else "eval",
                            rng=rng).data
    for w in out:
        ConnectivityMatrix(w)  # raises on any violated invariant


def test_generator_gradcheck_all_parameters():
    rng = np.random.default_rng(7)
    gen = Generator(5, dropout=0.0, seed=3)
    for p in gen.parameters():
        p.data *= 0.2
    x = Tensor(random_adj(rng, 5, batch=2))
    w = Tensor(rng.normal(size=(2, 5, 5)))
    rep = gradcheck(lambda: (gen(x) * w).sum(), gen.parameters(), h=1e-4, tol=1e-3)
    assert rep.passed, rep.errors
    gen.eval()
    rep = gradcheck(lambda: (gen(x) * w).sum(), gen.parameters(), h=1e-4, tol=1e-3)
    assert rep.passed, rep.errors


def test_generator_gradient_reaches_input():
    rng = np.random.default_rng(8)
    gen = Generator(5, dropout=0.0, seed=4)
    for p in gen.parameters():
        p.data *= 0.2
    x = Tensor(random_adj(rng, 5, batch=1), requires_grad=True)
    w = Tensor(rng.normal(size=(1, 5, 5)))
    rep = gradcheck(lambda: (gen(x) * w).sum(), [x], h=1e-5, tol=1e-3)
    assert rep.passed, rep.errors


# ---------------------------------------------------------------- discriminator
def test_discriminator_zero_network_is_half():
    d = Discriminator(4, seed=0)
    for layer in d.layers:
        set_layer(layer, 0.0, 0.0, 0.0)
    g = ConnectivityMatrix(random_adj(np.random.default_rng(0), 4))
    assert discriminator_forward(d, g, g).data.tolist() == [0.5]


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_discriminator_range(seed):
    rng = np.random.default_rng(seed)
    d = Discriminator(5, seed=seed)
    s = d(Tensor(random_adj(rng, 5, batch=3)), Tensor(random_adj(rng, 5, batch=3))).data
    assert s.shape == (3,) and np.all((s > 0) & (s < 1))


def test_discriminator_dimension_mismatch():
    d = Discriminator(4, seed=0)
    with pytest.raises(DimensionError):
        d(np.zeros((4, 4)), np.zeros((5, 5)))
    with pytest.raises(DimensionError):
        d(np.zeros((5, 5)), np.zeros((5, 5)))


def test_discriminator_gradcheck_all_parameters():
    rng = np.random.default_rng(9)
    d = Discriminator(5, seed=5)
    cond, judged = Tensor(random_adj(rng, 5, batch=2)), Tensor(random_adj(rng, 5, batch=2))
    rep = gradcheck(lambda: d(cond, judged).sum(), d.parameters(), h=1e-4, tol=1e-3)
    assert rep.passed, rep.errors


def test_trained_discriminator_responds_to_judged_graph():
    samples = generate_synthetic(SyntheticConfig(n_subjects=4, n_r=8, seed=1))
    result = train_cascade(samples, TrainConfig(epochs=10, m=1, seed=0))
    d = result.cascade.discriminators[0]
    cond = samples[0].graphs[1]
    s_real = d(cond, cond).item()
    s_other = d(cond, samples[1].graphs[1]).item()
    assert abs(s_real - s_other) > 0


# ---------------------------------------------------------------- checkpoints
def test_checkpoint_round_trip_bitwise(tmp_path):
    rng = np.random.default_rng(11)
    gen = Generator(6, hidden=4, dropout=0.1, seed=6)
    disc = Discriminator(6, hidden=3, seed=7)
    x = Tensor(random_adj(rng, 6, batch=2))
    gen(x, rng=rng)  # move the running statistics off their defaults
    path = tmp_path / "ck.npz"
    save_checkpoint(path, gen, disc, config_hash="abc")
    gen2, disc2, meta = load_checkpoint(path)
    assert meta["config_hash"] == "abc" and meta["format"].startswith("evograph-checkpoint")
    assert parameter_hash(gen, disc) == parameter_hash(gen2, disc2)
    gen.eval(), gen2.eval()
    assert gen(x).data.tobytes() == gen2(x).data.tobytes()
    assert disc(x, x).data.tobytes() == disc2(x, x).data.tobytes()
    save_checkpoint(tmp_path / "again.npz", gen2, disc2, config_hash="abc")
    assert (tmp_path / "again.npz").read_bytes() == path.read_bytes()


def test_checkpoint_rejects_foreign_file(tmp_path):
    np.savez(tmp_path / "x.npz", __meta__=np.array('{"format": "other"}'))
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x.npz")


def test_frozen_parameters_get_no_gradient():
    rng = np.random.default_rng(12)
    d = Discriminator(4, seed=0)
    x = Tensor(random_adj(rng, 4, batch=1), requires_grad=True)
    d.set_requires_grad(False)
    de.mean(d(x, x)).backward()
    assert all(p.grad is None for p in d.parameters())
    assert x.grad is not None
