import numpy as np
import pytest

from activesense import autodiff as ad
from activesense import nn
from activesense.autodiff import Graph, check_gradients
from activesense.numerics import RandomStream


class TestDenseForward:
    def test_identity_relu(self):
        p = nn.DenseParams(np.eye(2), np.zeros(2), activation="relu")
        np.testing.assert_array_equal(nn.dense_forward(np.array([[-1.0, 2.0]]), p), [[0.0, 2.0]])

    def test_zero_weight_bias_only(self):
        p = nn.DenseParams(np.zeros((1, 3)), np.array([5.0]))
        np.testing.assert_array_equal(nn.dense_forward(np.array([[9.0, -2.0, 4.0]]), p), [[5.0]])

    def test_matches_explicit_matmul(self):
        g = RandomStream(10).generator()
        p = nn.DenseParams(g.normal(size=(4, 8)), g.normal(size=4))
        x = g.normal(size=(5, 8))
        expected = x @ p.weight.T + p.bias
        np.testing.assert_allclose(nn.dense_forward(x, p), expected, atol=1e-12)

    def test_shape_mismatch(self):
        p = nn.DenseParams(np.ones((2, 3)), np.zeros(2))
        with pytest.raises(ValueError):
            nn.dense_forward(np.ones((1, 4)), p)


def _zero_lstm(state_size=2, input_dim=2):
    z = lambda *shape: np.zeros(shape)
    return nn.LstmParams(
        a_f=z(state_size, input_dim), a_i=z(state_size, input_dim),
        a_o=z(state_size, input_dim), a_c=z(state_size, input_dim),
        u_f=z(state_size, state_size), u_i=z(state_size, state_size),
        u_o=z(state_size, state_size), u_c=z(state_size, state_size),
        b_f=z(state_size), b_i=z(state_size), b_o=z(state_size), b_c=z(state_size),
    )


class TestLstmStep:
    def test_zero_weights_closed_form(self):
        p = _zero_lstm()
        prev = nn.LstmState(s=np.zeros((1, 2)), c=np.array([[2.0, -2.0]]))
        out = nn.lstm_step(np.zeros((1, 2)), prev, p)
        np.testing.assert_allclose(out.c, [[1.0, -1.0]])
        np.testing.assert_allclose(out.s, 0.5 * np.tanh([[1.0, -1.0]]))

    def test_saturated_forget_gate_discards_cell(self):
        p = _zero_lstm()
        p.b_f[:] = -1e6
        prev = nn.LstmState(s=np.zeros((1, 2)), c=np.array([[5.0, -3.0]]))
        out = nn.lstm_step(np.zeros((1, 2)), prev, p)
        # forget gate closed: only the (here zero) candidate path survives
        assert np.max(np.abs(out.c)) < 1e-10
        assert np.max(np.abs(out.s)) < 1e-10

    def test_hidden_state_bounded(self):
        rng = RandomStream(3)
        p = nn.make_lstm(4, 8, rng)
        state = nn.LstmState(np.zeros((6, 8)), np.zeros((6, 8)))
        g = rng.generator()
        for _ in range(20):
            state = nn.lstm_step(g.normal(size=(6, 4)) * 3, state, p)
            assert np.all(np.abs(state.s) < 1.0)

    def test_gradient_check_s16(self):
        p = nn.make_lstm(input_dim=3, state_size=16, rng=RandomStream(5))
        names = ("a_f", "a_i", "a_o", "a_c", "u_f", "u_i", "u_o", "u_c",
                 "b_f", "b_i", "b_o", "b_c")
        arrays = {k: getattr(p, k) for k in names}
        g = RandomStream(6).generator()
        inputs = {"y": g.normal(size=(2, 3)), "s": g.normal(size=(2, 16)) * 0.5,
                  "c": g.normal(size=(2, 16))}

        def build(t, pn, i):
            out = nn.lstm_step(i["y"], nn.LstmState(i["s"], i["c"]), p, nodes=pn)
            return {"loss": ad.reduce_sum(out.s)}

        assert check_gradients(Graph(build, arrays), inputs) < 1e-5


class TestNormalizeUnitPower:
    def test_basic(self):
        np.testing.assert_allclose(
            nn.normalize_unit_power(np.array([3.0, 4.0, 0.0, 0.0])), [0.6, 0.8, 0.0, 0.0]
        )

    def test_idempotent_on_unit_input(self):
        g = RandomStream(8).generator()
        w = g.normal(size=12)
        w = w / np.linalg.norm(w)
        np.testing.assert_allclose(nn.normalize_unit_power(w), w, atol=1e-12)

    def test_norm_and_direction(self):
        g = RandomStream(9).generator()
        w = g.normal(size=32)
        out = nn.normalize_unit_power(w)
        assert np.linalg.norm(out) == pytest.approx(1.0, abs=1e-12)
        cosine = np.dot(out, w) / np.linalg.norm(w)
        assert cosine == pytest.approx(1.0, abs=1e-12)

    def test_degenerate_returns_first_basis_vector(self):
        out = nn.normalize_unit_power(np.zeros(6))
        np.testing.assert_array_equal(out, [1, 0, 0, 0, 0, 0])


class TestNormalizeModulus:
    def test_phase_extraction_with_zero_entry(self):
        out = nn.normalize_modulus(np.array([1.0, 0.0, 1.0, 0.0]), 1.0)
        z = out[:2] + 1j * out[2:]
        np.testing.assert_allclose(z, [np.exp(1j * np.pi / 4), 1.0], atol=1e-15)

    def test_negative_imaginary(self):
        out = nn.normalize_modulus(np.array([0.0, -5.0]), 1.0)
        assert complex(out[0], out[1]) == pytest.approx(-1j)

    def test_every_modulus_pinned(self):
        g = RandomStream(12).generator()
        w = g.normal(size=16)
        target = np.sqrt(2.0 / 16.0)
        out = nn.normalize_modulus(w, target)
        z = out[:8] + 1j * out[8:]
        np.testing.assert_allclose(np.abs(z), 0.35355339059327373, atol=1e-12)
        # with target sqrt(2/M) the full vector is also unit power
        assert np.linalg.norm(out) == pytest.approx(1.0, abs=1e-10)


class TestBatchNorm:
    def test_infer_identity(self):
        st = nn.BatchNormState.create(3)
        x = RandomStream(1).generator().normal(size=(4, 3))
        np.testing.assert_allclose(
            nn.batchnorm_forward(x, st, "infer"), x / np.sqrt(1 + st.epsilon), atol=1e-12
        )

    def test_train_two_point_batch(self):
        st = nn.BatchNormState.create(1)
        x = np.array([[-1.0], [1.0]])
        out = nn.batchnorm_forward(x, st, "train")
        expected = 1.0 / np.sqrt(1.0 + st.epsilon)
        np.testing.assert_allclose(out, [[-expected], [expected]], atol=1e-12)

    def test_train_then_infer_with_full_stat_replacement(self):
        # momentum near zero makes the running stats equal the batch stats
        st = nn.BatchNormState.create(3, momentum=1e-12)
        g = RandomStream(2).generator()
        st.gamma = g.uniform(0.5, 1.5, size=3)
        st.beta = g.normal(size=3)
        x = g.normal(size=(8, 3))
        train_out = nn.batchnorm_forward(x, st, "train")
        infer_out = nn.batchnorm_forward(x, st, "infer")
        np.testing.assert_allclose(infer_out, train_out, atol=1e-10)

    def test_train_needs_batch_of_two(self):
        st = nn.BatchNormState.create(2)
        with pytest.raises(ValueError):
            nn.batchnorm_forward(np.ones((1, 2)), st, "train")


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        params = {"w": np.array([1.0, -2.0])}
        st = nn.AdamState()
        out, st = nn.adam_step(params, {"w": np.zeros(2)}, st, 1e-3)
        np.testing.assert_array_equal(out["w"], params["w"])
        assert st.step_count == 1

    @pytest.mark.parametrize("g0", [0.3, -40.0, 1e-4])
    def test_first_step_magnitude_is_learning_rate(self, g0):
        st = nn.AdamState()
        out, _ = nn.adam_step({"w": np.array([0.0])}, {"w": np.array([g0])}, st, 1e-3)
        # bias correction makes the first step lr * g/(|g| + eps')
        expected = 1e-3 * g0 / (abs(g0) + st.epsilon)
        assert out["w"][0] == pytest.approx(-expected, rel=1e-9)

    def test_two_steps_match_hand_recursion(self):
        lr, b1, b2, eps = 1e-3, 0.9, 0.999, 1e-8
        w = np.array([0.5])
        g = np.array([2.0])
        # closed-form recursion for two identical steps
        m = (1 - b1) * g
        v = (1 - b2) * g * g
        w1 = w - lr * (m / (1 - b1)) / (np.sqrt(v / (1 - b2)) + eps)
        m2 = b1 * m + (1 - b1) * g
        v2 = b2 * v + (1 - b2) * g * g
        w2 = w1 - lr * (m2 / (1 - b1**2)) / (np.sqrt(v2 / (1 - b2**2)) + eps)

        st = nn.AdamState()
        params = {"w": w}
        params, st = nn.adam_step(params, {"w": g}, st, lr)
        np.testing.assert_allclose(params["w"], w1, atol=1e-12)
        params, st = nn.adam_step(params, {"w": g}, st, lr)
        np.testing.assert_allclose(params["w"], w2, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            nn.adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, nn.AdamState(), 1e-3)


class TestCompositeGradient:
    def test_dense_lstm_dense_normalize_chain(self):
        rng = RandomStream(77)
        lstm = nn.make_lstm(input_dim=2, state_size=6, rng=rng.child(0))
        d_in = nn.make_dense(6, 5, rng.child(1), activation="relu")
        d_out = nn.make_dense(5, 8, rng.child(2))
        names = ("a_f", "a_i", "a_o", "a_c", "u_f", "u_i", "u_o", "u_c",
                 "b_f", "b_i", "b_o", "b_c")
        params = {k: getattr(lstm, k) for k in names}
        params.update({"w_in": d_in.weight, "b_in": d_in.bias,
                       "w_out": d_out.weight, "b_out": d_out.bias})
        g = RandomStream(78).generator()
        inputs = {"y": g.normal(size=(3, 2)), "probe": g.normal(size=(3, 8))}

        def build(t, p, i):
            state = nn.lstm_step(i["y"], nn.LstmState(np.zeros((3, 6)), np.zeros((3, 6))),
                                 lstm, nodes=p)
            h = ad.relu(ad.linear(state.s, p["w_in"], p["b_in"]))
            raw = ad.linear(h, p["w_out"], p["b_out"])
            w_unit = ad.normalize_unit_rows(raw)
            w_mod = ad.normalize_modulus_rows(raw, 0.5)
            return {"loss": ad.reduce_sum(w_unit * i["probe"])
                    + ad.reduce_sum(w_mod * i["probe"])}

        assert check_gradients(Graph(build, params), inputs) < 1e-5


class TestCheckpoints:
    def test_roundtrip(self, tmp_path):
        g = RandomStream(4).generator()
        arrays = {"lstm.a_f": g.normal(size=(3, 2)), "sense.0.w": g.normal(size=(4, 3))}
        path = tmp_path / "params.npz"
        nn.save_params(path, arrays, config_hash="abc123")
        loaded, h = nn.load_params(path)
        assert h == "abc123"
        assert set(loaded) == set(arrays)
        for k in arrays:
            np.testing.assert_array_equal(loaded[k], arrays[k])

    def test_bytes_deterministic(self, tmp_path):
        arrays = {"w": np.arange(6.0).reshape(2, 3)}
        p1, p2 = tmp_path / "a.npz", tmp_path / "b.npz"
        nn.save_params(p1, arrays, "h")
        nn.save_params(p2, arrays, "h")
        assert p1.read_bytes() == p2.read_bytes()

    def test_digest_stable_under_ordering(self):
        a = {"x": np.ones(2), "y": np.zeros(3)}
        b = {"y": np.zeros(3), "x": np.ones(2)}
        assert nn.params_digest(a) == nn.params_digest(b)
