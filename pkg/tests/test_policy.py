import numpy as np
import pytest

from activesense import channels as chx
from activesense import policy
from activesense.autodiff import check_gradients
from activesense.numerics import ComplexVector, RandomStream


def aoa_task(frames=3, power=10.0, coherence="coherent"):
    return policy.TaskSpec(task="aoa-estimation", constraint="unit-2-norm",
                           frames=frames, pilot_power=power, coherence=coherence)


def gain_task(frames=3, power=1.0, constraint="unit-2-norm"):
    return policy.TaskSpec(task="downlink-precoding", constraint=constraint,
                           frames=frames, pilot_power=power)


def ris_task(frames=2, power=1.0):
    return policy.TaskSpec(task="ris-reflection", constraint="unit-modulus",
                           frames=frames, pilot_power=power)


SMALL_ARCH = policy.ArchConfig(state_size=16, sensing_hidden=(24,))


def small_agent(task, elements=4, paths=1, seed=0):
    return policy.AgentParams.create(task, SMALL_ARCH, elements, paths, RandomStream(seed))


def jitter(params, seed, scale=0.05):
    """Move parameters to a generic point.

    The zero-bias init puts the bootstrap frame's head input exactly on the
    normalization discontinuity (w_raw = 0), where finite differences are
    meaningless; gradient checks need a perturbed point.
    """
    g = RandomStream(seed).generator()
    arrays = params.trainable()
    params.set_trainable({k: v + scale * g.normal(size=v.shape) for k, v in arrays.items()})


class TestTaskSpec:
    def test_snr_feature_defaults(self):
        assert aoa_task().include_snr_feature is True
        assert gain_task().include_snr_feature is False

    def test_snr_feature_rejected_outside_aoa(self):
        with pytest.raises(ValueError):
            policy.TaskSpec(task="downlink-precoding", constraint="unit-2-norm",
                            frames=2, pilot_power=1.0, include_snr_feature=True)

    def test_feature_dims(self):
        assert aoa_task().feature_dim == 3
        assert aoa_task(coherence="noncoherent").feature_dim == 2
        assert gain_task().feature_dim == 2
        assert ris_task().feature_dim == 2

    def test_ris_requires_unit_modulus(self):
        with pytest.raises(ValueError):
            policy.TaskSpec(task="ris-reflection", constraint="unit-2-norm",
                            frames=2, pilot_power=1.0)

    def test_pairing(self):
        assert aoa_task().pairing == "hermitian"
        assert ris_task().pairing == "transpose"


class TestBuildFeature:
    def test_coherent_precoding_raw_parts(self):
        np.testing.assert_array_equal(
            policy.build_feature(1 + 2j, gain_task(), snr_db=0.0), [1.0, 2.0]
        )

    def test_noncoherent_aoa_magnitude_and_snr(self):
        feat = policy.build_feature(3 + 4j, aoa_task(coherence="noncoherent"), snr_db=10.0)
        np.testing.assert_allclose(feat, [5.0, 1.0])

    def test_zero_measurement(self):
        feat = policy.build_feature(0j, aoa_task(), snr_db=0.0)
        np.testing.assert_array_equal(feat, [0.0, 0.0, 0.0])


class TestEpisodeStructure:
    def setup_method(self):
        self.task = aoa_task()
        self.cfg = chx.MmWaveConfig(antennas=4, paths=1)
        self.params = small_agent(self.task)

    def test_first_sensing_vector_shared_across_channels(self):
        batch = policy.make_batch(self.task, self.cfg, RandomStream(5), 6)
        out = policy.build_episode_graph(self.task, self.params, batch, "infer").forward()
        w0 = out["w_0"]
        for row in w0[1:]:
            np.testing.assert_array_equal(row, w0[0])

    def test_zero_parameters_give_canonical_first_vector(self):
        zeroed = {k: np.zeros_like(v) for k, v in self.params.trainable().items()}
        self.params.set_trainable(zeroed)
        graph = policy.build_episode_graph(
            self.task, self.params,
            policy.make_batch(self.task, self.cfg, RandomStream(6), 3), "infer",
        )
        out = graph.forward()
        expected = np.zeros(8)
        expected[0] = 1.0
        for row in out["w_0"]:
            np.testing.assert_array_equal(row, expected)
        assert any("normalize_unit_rows" in f for f in graph.flags)

    def test_measurements_match_channel_model(self):
        batch = policy.make_batch(self.task, self.cfg, RandomStream(7), 5)
        out = policy.build_episode_graph(self.task, self.params, batch, "infer").forward()
        for t in range(self.task.frames):
            w = out[f"w_{t}"]
            m = batch.elements
            wz = w[:, :m] + 1j * w[:, m:]
            expected = np.sqrt(self.task.pilot_power) * np.sum(wz.conj() * batch.h, axis=1) \
                + np.sum(wz.conj() * batch.noise[:, t], axis=1)
            np.testing.assert_allclose(out[f"y_re_{t}"], expected.real, atol=1e-12)
            np.testing.assert_allclose(out[f"y_im_{t}"], expected.imag, atol=1e-12)

    def test_ris_measurement_uses_transpose_pairing(self):
        task = ris_task()
        cfg = chx.RisConfig(rows=2, cols=2)
        params = policy.AgentParams.create(task, SMALL_ARCH, 4, 1, RandomStream(1))
        batch = policy.make_batch(task, cfg, RandomStream(8), 4)
        out = policy.build_episode_graph(task, params, batch, "infer").forward()
        for t in range(task.frames):
            w = out[f"w_{t}"]
            wz = w[:, :4] + 1j * w[:, 4:]
            expected = np.sqrt(task.pilot_power) * np.sum(wz * batch.h, axis=1) \
                + batch.noise[:, t]
            np.testing.assert_allclose(out[f"y_re_{t}"], expected.real, atol=1e-12)
            np.testing.assert_allclose(out[f"y_im_{t}"], expected.imag, atol=1e-12)


class TestCausality:
    def _outputs(self, task, batch):
        params = small_agent(task)
        return policy.build_episode_graph(task, params, batch, "infer").forward()

    def test_channel_perturbation_spares_first_vector(self):
        task = aoa_task()
        base = policy.make_batch(task, chx.MmWaveConfig(antennas=4, paths=1), RandomStream(9), 2)
        out1 = self._outputs(task, base)
        perturbed = policy.EpisodeBatch(
            h=base.h + 0.1, noise=base.noise, pairing=base.pairing,
            noise_variance=base.noise_variance, aoa_truth=base.aoa_truth, alphas=base.alphas,
        )
        out2 = self._outputs(task, perturbed)
        np.testing.assert_array_equal(out1["w_0"], out2["w_0"])
        assert not np.allclose(out1["w_1"], out2["w_1"])

    @pytest.mark.parametrize("slot", [0, 1, 2])
    def test_noise_perturbation_propagates_causally(self, slot):
        task = aoa_task(frames=4)
        base = policy.make_batch(task, chx.MmWaveConfig(antennas=4, paths=1), RandomStream(10), 2)
        out1 = self._outputs(task, base)
        noise = base.noise.copy()
        noise[:, slot] += 0.25 + 0.1j
        out2 = self._outputs(task, policy.EpisodeBatch(
            h=base.h, noise=noise, pairing=base.pairing,
            noise_variance=base.noise_variance, aoa_truth=base.aoa_truth, alphas=base.alphas,
        ))
        # the draw in slot t enters measurement y_{t+1}, so w_1..w_{t+1} are untouched
        for t in range(slot + 1):
            np.testing.assert_array_equal(out1[f"w_{t}"], out2[f"w_{t}"])
        if slot + 1 < task.frames:
            assert not np.allclose(out1[f"w_{slot + 1}"], out2[f"w_{slot + 1}"])


class TestGradients:
    @pytest.mark.parametrize("task_fn,cfg", [
        (aoa_task, chx.MmWaveConfig(antennas=4, paths=1)),
        (lambda: gain_task(constraint="constant-modulus"), chx.MmWaveConfig(antennas=4, paths=1)),
        (ris_task, chx.RisConfig(rows=2, cols=2)),
    ])
    def test_episode_gradient_check(self, task_fn, cfg):
        task = task_fn()
        elements = cfg.antennas if isinstance(cfg, chx.MmWaveConfig) else cfg.elements
        params = policy.AgentParams.create(task, SMALL_ARCH, elements, 1, RandomStream(11))
        jitter(params, seed=900)
        batch = policy.make_batch(task, cfg, RandomStream(12), 3)
        graph = policy.build_episode_graph(task, params, batch, "train")
        assert check_gradients(graph) < 1e-5

    def test_weight_tying_equals_summed_copies(self):
        task = aoa_task(frames=3)
        cfg = chx.MmWaveConfig(antennas=4, paths=1)
        params = small_agent(task)
        batch = policy.make_batch(task, cfg, RandomStream(13), 4)
        tied = policy.build_episode_graph(task, params, batch, "train", tie_weights=True)
        tied.forward()
        tied_grads = tied.backward()
        untied = policy.build_episode_graph(task, params, batch, "train", tie_weights=False)
        untied.forward()
        untied_grads = untied.backward()
        for name, g in tied_grads.items():
            if name.startswith("final."):
                np.testing.assert_allclose(untied_grads[name], g, atol=1e-10)
            elif name.startswith("lstm."):
                stem, key = name.split(".", 1)
                total = sum(untied_grads[f"{stem}@{f}.{key}"] for f in range(task.frames + 1))
                np.testing.assert_allclose(total, g, atol=1e-10)
            else:
                stem, idx, key = name.split(".", 2)
                total = sum(
                    untied_grads[f"{stem}.{idx}@{f}.{key}"] for f in range(task.frames)
                )
                np.testing.assert_allclose(total, g, atol=1e-10)


class TestLosses:
    def test_exact_estimate_zero_loss(self):
        assert policy.loss_aoa([0.3, -0.2], [0.3, -0.2]) == 0.0

    def test_single_path_offset(self):
        assert policy.loss_aoa([0.4], [0.3]) == pytest.approx(0.01)

    def test_strength_ordering_cancels_permutation(self):
        # truth (0.3, -0.2) with the second path stronger sorts to (-0.2, 0.3)
        loss = policy.loss_aoa([-0.2, 0.3], [0.3, -0.2], strengths=[0.5, 1.5])
        assert loss == pytest.approx(0.0)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            policy.loss_aoa([0.1], [0.1, 0.2])

    def test_gain_loss_is_negated_gain(self):
        g = RandomStream(14).generator()
        h = ComplexVector.from_complex(g.normal(size=4) + 1j * g.normal(size=4))
        z = g.normal(size=4) + 1j * g.normal(size=4)
        v = chx.SensingVector(ComplexVector.from_complex(z / np.linalg.norm(z)), chx.UNIT_NORM)
        expected = -chx.beamforming_gain(h, v, "hermitian")
        assert policy.loss_gain(h, v, "hermitian") == pytest.approx(expected, abs=1e-12)

    def test_gain_loss_mrt_value(self):
        g = RandomStream(15).generator()
        h = ComplexVector.from_complex(g.normal(size=4) + 1j * g.normal(size=4))
        v = chx.SensingVector(ComplexVector.from_complex(h.as_complex() / h.norm()),
                              chx.UNIT_NORM)
        assert policy.loss_gain(h, v, "hermitian") == pytest.approx(-h.norm() ** 2)

    def test_constraint_violation_is_internal_error(self):
        h = ComplexVector.from_complex(np.ones(4, dtype=complex))
        bad = chx.SensingVector(ComplexVector.from_complex(2 * np.ones(4, dtype=complex) / 2.0),
                                chx.UNIT_NORM)
        with pytest.raises(RuntimeError):
            policy.loss_gain(h, bad, "hermitian")


class TestConstraintPreservation:
    @pytest.mark.parametrize("task,cfg", [
        (aoa_task(), chx.MmWaveConfig(antennas=4, paths=1)),
        (gain_task(constraint="constant-modulus"), chx.MmWaveConfig(antennas=4, paths=1)),
        (ris_task(), chx.RisConfig(rows=2, cols=2)),
    ])
    def test_every_emitted_vector_satisfies_constraint(self, task, cfg):
        elements = cfg.antennas if isinstance(cfg, chx.MmWaveConfig) else cfg.elements
        for seed in range(3):
            params = policy.AgentParams.create(task, SMALL_ARCH, elements, 1,
                                               RandomStream(seed))
            batch = policy.make_batch(task, cfg, RandomStream(100 + seed), 64)
            out = policy.build_episode_graph(task, params, batch, "infer").forward()
            for t in range(task.frames):
                w = out[f"w_{t}"]
                z = w[:, :elements] + 1j * w[:, elements:]
                if task.constraint == chx.UNIT_NORM:
                    np.testing.assert_allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-9)
                elif task.constraint == chx.CONSTANT_MODULUS:
                    np.testing.assert_allclose(np.abs(z), 1 / np.sqrt(elements), atol=1e-9)
                else:
                    np.testing.assert_allclose(np.abs(z), 1.0, atol=1e-9)


class TestRunEpisode:
    def test_record_contents_mmwave(self):
        task = aoa_task()
        cfg = chx.MmWaveConfig(antennas=4, paths=1)
        params = small_agent(task)
        channel = chx.sample_mmwave(cfg, RandomStream(20))
        record = policy.run_episode(channel, params, task, RandomStream(21))
        assert record.sensing_vectors.shape == (3, 4)
        assert record.measurements.shape == (3,)
        assert record.features.shape == (3, 3)
        assert record.output.shape == (1,)
        np.testing.assert_allclose(np.linalg.norm(record.sensing_vectors, axis=1), 1.0,
                                   atol=1e-9)

    def test_record_deterministic(self):
        task = ris_task()
        cfg = chx.RisConfig(rows=2, cols=2)
        params = policy.AgentParams.create(task, SMALL_ARCH, 4, 1, RandomStream(1))
        channel = chx.sample_ris(cfg, RandomStream(22))
        r1 = policy.run_episode(channel, params, task, RandomStream(23))
        r2 = policy.run_episode(channel, params, task, RandomStream(23))
        np.testing.assert_array_equal(r1.measurements, r2.measurements)
        np.testing.assert_array_equal(r1.output, r2.output)


class TestTraining:
    def test_toy_task_improves_tenfold(self):
        task = aoa_task(frames=3, power=100.0)
        cfg = chx.MmWaveConfig(antennas=8, paths=1)
        tc = policy.TrainConfig(steps=2000, batch_size=64, val_size=512, val_interval=200,
                                arch=policy.ArchConfig(state_size=32, sensing_hidden=(64, 64)),
                                seed=3, early_stop=False)
        params, history = policy.train(task, cfg, tc)
        initial = history[0]["val_loss"]
        best = min(h["val_loss"] for h in history)
        assert initial / best >= 10.0

    def test_identical_seed_identical_history(self):
        task = aoa_task(frames=2, power=10.0)
        cfg = chx.MmWaveConfig(antennas=4, paths=1)
        tc = policy.TrainConfig(steps=60, batch_size=8, val_size=32, val_interval=20,
                                arch=SMALL_ARCH, seed=5)
        _, h1 = policy.train(task, cfg, tc)
        _, h2 = policy.train(task, cfg, tc)
        assert h1 == h2

    def test_patience_exhaustion_stops_and_returns_best(self):
        # zero pilot power: measurements carry no channel information, so
        # validation stays flat and the stopper has to fire
        task = gain_task(frames=2, power=0.0)
        cfg = chx.MmWaveConfig(antennas=4, paths=1)
        tc = policy.TrainConfig(steps=5000, batch_size=8, val_size=64, val_interval=10,
                                arch=SMALL_ARCH, seed=6, patience=3,
                                learning_rate=1e-4, lr_floor=1e-4, early_stop=True)
        params, history = policy.train(task, cfg, tc)
        assert history[-1]["step"] < 5000
        best = min(h["val_loss"] for h in history)
        batch = policy.make_batch(task, cfg, RandomStream(6).child(1), 64)
        returned = policy.build_episode_graph(task, params, batch, "infer").forward()
        assert float(returned["loss"]) == pytest.approx(best, rel=1e-9)

    def test_nonfinite_loss_aborts(self):
        task = aoa_task(frames=2, power=10.0)
        cfg = chx.MmWaveConfig(antennas=4, paths=1)
        params = small_agent(task)
        bad = {k: v * np.inf for k, v in params.trainable().items()}
        params.set_trainable(bad)
        batch = policy.make_batch(task, cfg, RandomStream(30), 4)
        graph = policy.build_episode_graph(task, params, batch, "train")
        loss = float(graph.forward()["loss"])
        assert not np.isfinite(loss)


class TestEvaluate:
    def test_deterministic(self):
        task = aoa_task()
        cfg = chx.MmWaveConfig(antennas=4, paths=1)
        params = small_agent(task)
        m1 = policy.evaluate(params, task, cfg, 200, seed=42)
        m2 = policy.evaluate(params, task, cfg, 200, seed=42)
        assert m1 == m2

    def test_single_episode_flags_std_error(self):
        task = aoa_task()
        cfg = chx.MmWaveConfig(antennas=4, paths=1)
        params = small_agent(task)
        metrics = policy.evaluate(params, task, cfg, 1, seed=1)
        assert metrics["std_error"] is None
        assert metrics["n"] == 1

    def test_gain_metric_reports_db(self):
        task = gain_task()
        cfg = chx.MmWaveConfig(antennas=4, paths=2)
        params = policy.AgentParams.create(task, SMALL_ARCH, 4, 2, RandomStream(2))
        metrics = policy.evaluate(params, task, cfg, 100, seed=7)
        assert metrics["metric"] == "gain"
        assert metrics["mean_db"] == pytest.approx(10 * np.log10(metrics["mean"]))


class TestHistoryCsv:
    def test_roundtrip(self, tmp_path):
        history = [{"step": 0, "lr": 1e-3, "train_loss": np.nan, "val_loss": 2.0},
                   {"step": 10, "lr": 1e-3, "train_loss": 1.5, "val_loss": 1.8}]
        path = tmp_path / "history.csv"
        policy.write_history_csv(path, history)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "step,lr,train_loss,val_loss"
        assert len(lines) == 3
