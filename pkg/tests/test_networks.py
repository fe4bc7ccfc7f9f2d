import numpy as np
import pytest
import torch

from stochtse.errors import ValidationError
from stochtse.networks import (
    MLP,
    forward_states,
    init_parameters,
    input_derivatives,
    load_checkpoint,
    output_gradients,
    save_checkpoint,
)


def tiny_net(seed=0):
    return init_parameters([2, 8, 8, 2], seed=seed)


class TestMLP:
    def test_forward_matches_manual_chain(self):
        net = tiny_net(seed=4)
        rng = np.random.default_rng(4)
        xt = rng.uniform(0.0, 1.0, (7, 2))
        with torch.no_grad():
            got = net(torch.tensor(xt, dtype=torch.float64)).numpy()
        h = xt
        params = [
            (l.weight.detach().numpy(), l.bias.detach().numpy()) for l in net.layers
        ]
        for w, b in params[:-1]:
            h = np.tanh(h @ w.T + b)
        w, b = params[-1]
        want = h @ w.T + b
        np.testing.assert_allclose(got, want, rtol=1e-13, atol=1e-13)

    def test_output_shape(self):
        net = tiny_net()
        with torch.no_grad():
            out = net(torch.zeros((5, 2), dtype=torch.float64))
        assert out.shape == (5, 2)
        assert out.dtype == torch.float64

    def test_bad_layer_sizes(self):
        with pytest.raises(ValidationError):
            MLP([2])
        with pytest.raises(ValidationError):
            MLP([2, 0, 2])

    def test_unsupported_activation(self):
        with pytest.raises(ValidationError):
            MLP([2, 4, 2], activation="relu")


class TestInit:
    def test_deterministic_per_seed(self):
        a = init_parameters([2, 16, 2], seed=9)
        b = init_parameters([2, 16, 2], seed=9)
        c = init_parameters([2, 16, 2], seed=10)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)
        assert any(
            not torch.equal(pa, pc) for pa, pc in zip(a.parameters(), c.parameters())
        )

    def test_biases_zero(self):
        net = init_parameters([2, 32, 32, 2], seed=1)
        for layer in net.layers:
            assert torch.count_nonzero(layer.bias) == 0

    def test_glorot_weight_variance(self):
        # uniform on [-a, a] with a^2 = 6/(fan_in+fan_out) has variance
        # 2/(fan_in+fan_out); check the empirical variance of a wide layer
        net = init_parameters([200, 100, 2], seed=7)
        w = net.layers[0].weight.detach().numpy()
        want = 2.0 / (200 + 100)
        assert abs(w.var() - want) < 0.15 * want
        bound = np.sqrt(6.0 / (200 + 100))
        assert np.abs(w).max() <= bound + 1e-12


class TestForwardStates:
    def test_scalar_inputs(self):
        net = tiny_net()
        rho, v = forward_states(net, 0.3, 0.7)
        assert rho.shape == v.shape == (1,)

    def test_matches_module_call(self):
        net = tiny_net(seed=2)
        x = np.linspace(0.0, 1.0, 9)
        t = np.linspace(1.0, 0.0, 9)
        rho, v = forward_states(net, x, t)
        with torch.no_grad():
            out = net(torch.tensor(np.stack([x, t], axis=1), dtype=torch.float64))
        np.testing.assert_allclose(rho, out[:, 0].numpy())
        np.testing.assert_allclose(v, out[:, 1].numpy())

    def test_shape_mismatch(self):
        net = tiny_net()
        with pytest.raises(ValidationError):
            forward_states(net, np.zeros(3), np.zeros(4))

    def test_non_finite_parameters_rejected(self):
        net = tiny_net()
        with torch.no_grad():
            net.layers[0].weight[0, 0] = float("nan")
        with pytest.raises(ValidationError):
            forward_states(net, 0.5, 0.5)


class TestInputDerivatives:
    def test_against_central_differences(self):
        net = init_parameters([2, 24, 24, 2], seed=11)
        rng = np.random.default_rng(11)
        x = rng.uniform(0.1, 0.9, 25)
        t = rng.uniform(0.1, 0.9, 25)
        g = input_derivatives(net, x, t)
        h = 1e-6

        def rho_at(xs, ts):
            return forward_states(net, xs, ts)[0]

        def v_at(xs, ts):
            return forward_states(net, xs, ts)[1]

        fd_rho_dx = (rho_at(x + h, t) - rho_at(x - h, t)) / (2 * h)
        fd_rho_dt = (rho_at(x, t + h) - rho_at(x, t - h)) / (2 * h)
        fd_v_dx = (v_at(x + h, t) - v_at(x - h, t)) / (2 * h)
        fd_v_dt = (v_at(x, t + h) - v_at(x, t - h)) / (2 * h)
        np.testing.assert_allclose(g.d_rho_dx, fd_rho_dx, atol=1e-7)
        np.testing.assert_allclose(g.d_rho_dt, fd_rho_dt, atol=1e-7)
        np.testing.assert_allclose(g.d_v_dx, fd_v_dx, atol=1e-7)
        np.testing.assert_allclose(g.d_v_dt, fd_v_dt, atol=1e-7)

    def test_requires_grad_guard(self):
        net = tiny_net()
        xt = torch.zeros((3, 2), dtype=torch.float64)
        with pytest.raises(ValidationError):
            output_gradients(net, xt)

    def test_gradients_differentiable_wrt_weights(self):
        # create_graph must let a residual built from input derivatives
        # backpropagate into the parameters
        net = tiny_net(seed=5)
        xt = torch.rand((6, 2), dtype=torch.float64, requires_grad=True)
        _, d_rho, d_v = output_gradients(net, xt, create_graph=True)
        loss = (d_rho**2).sum() + (d_v**2).sum()
        grads = torch.autograd.grad(loss, list(net.parameters()), allow_unused=True)
        named = dict(zip([n for n, _ in net.named_parameters()], grads))
        for name, g in named.items():
            if name.endswith("bias") and name.startswith(
                f"layers.{len(net.layers) - 1}"
            ):
                # the last bias shifts outputs but not their input derivatives
                continue
            assert g is not None, name
            assert torch.isfinite(g).all(), name
        assert any(
            g is not None and torch.count_nonzero(g) > 0 for g in grads
        )

    def test_per_sample_rows_independent(self):
        # batched gradients must equal one-point-at-a-time gradients
        net = tiny_net(seed=8)
        x = np.array([0.2, 0.5, 0.8])
        t = np.array([0.1, 0.6, 0.9])
        batched = input_derivatives(net, x, t)
        for i in range(3):
            single = input_derivatives(net, x[i], t[i])
            assert abs(batched.d_rho_dx[i] - single.d_rho_dx[0]) < 1e-14
            assert abs(batched.d_v_dt[i] - single.d_v_dt[0]) < 1e-14


class TestCheckpoints:
    def test_round_trip_exact(self, tmp_path):
        net = init_parameters([2, 12, 12, 12, 2], seed=3)
        path = tmp_path / "net.npz"
        save_checkpoint(net, path)
        back = load_checkpoint(path)
        assert back.layer_sizes == net.layer_sizes
        for pa, pb in zip(net.parameters(), back.parameters()):
            assert torch.equal(pa, pb)
        x = np.linspace(0, 1, 5)
        np.testing.assert_array_equal(
            forward_states(net, x, x)[0], forward_states(back, x, x)[0]
        )

    def test_version_mismatch(self, tmp_path):
        net = tiny_net()
        path = tmp_path / "net.npz"
        save_checkpoint(net, path)
        with np.load(path, allow_pickle=False) as data:
            arrays = {k: data[k] for k in data.files}
        arrays["format_version"] = np.array(99)
        np.savez(path, **arrays)
        with pytest.raises(ValidationError, match="version"):
            load_checkpoint(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "absent.npz")
