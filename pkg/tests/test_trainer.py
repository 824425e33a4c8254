"""Optimizer, training loop, selection, and determinism guarantees."""

import numpy as np
import pytest

from sevkit.model.encoder import EncoderConfig
from sevkit.model.network import MTLModel
from sevkit.synth import VOCABULARY
from sevkit.trainer import (
    AdamState,
    Checkpoint,
    CurveRow,
    TrainConfig,
    TrainerError,
    TrainingCurves,
    adam_step,
    best_epoch,
    clip_gradients,
    load_trainer_checkpoint,
    read_curves,
    save_trainer_checkpoint,
    select_best,
    train,
    write_curves,
)


def _config(**kw):
    base = dict(lr=1e-3, epochs=2, warmup_epochs=0, alpha=0.1, seed=0, batch_size=4)
    base.update(kw)
    return TrainConfig(**base)


def scalar_adam_oracle(g_seq, lr, beta1, beta2, eps, x0=0.0):
    """Independent hand-rolled scalar Adam for cross-checking."""
    x, m, v = x0, 0.0, 0.0
    for t, g in enumerate(g_seq, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1**t)
        vhat = v / (1 - beta2**t)
        x = x - lr * mhat / (np.sqrt(vhat) + eps)
    return x


class TestAdamStep:
    def test_zero_gradient_is_identity(self):
        params = {"w": np.array([1.0, -2.0])}
        state = AdamState.zeros_like(params)
        new_params, new_state = adam_step(params, {"w": np.zeros(2)}, state, _config())
        np.testing.assert_array_equal(new_params["w"], params["w"])
        np.testing.assert_array_equal(new_state.m["w"], 0.0)
        np.testing.assert_array_equal(new_state.v["w"], 0.0)

    def test_single_step_matches_scalar_oracle(self):
        config = _config(lr=0.05, beta1=0.9, beta2=0.98, eps=1e-8)
        params = {"x": np.array([0.0])}
        state = AdamState.zeros_like(params)
        g = 0.37
        new_params, _ = adam_step(params, {"x": np.array([g])}, state, config)
        want = scalar_adam_oracle([g], 0.05, 0.9, 0.98, 1e-8)
        assert new_params["x"][0] == pytest.approx(want, rel=1e-12)
        # first-step closed form: -lr * g / (|g| + eps)
        assert new_params["x"][0] == pytest.approx(-0.05 * g / (abs(g) + 1e-8), rel=1e-9)

    def test_multi_step_matches_scalar_oracle(self):
        rng = np.random.default_rng(0)
        g_seq = rng.normal(size=20)
        config = _config(lr=0.01)
        params = {"x": np.array([0.0])}
        state = AdamState.zeros_like(params)
        for g in g_seq:
            params, state = adam_step(params, {"x": np.array([g])}, state, config)
        want = scalar_adam_oracle(g_seq, 0.01, config.beta1, config.beta2, config.eps)
        assert params["x"][0] == pytest.approx(want, rel=1e-12)

    def test_quadratic_convergence(self):
        config = _config(lr=0.1)
        params = {"x": np.array([0.0])}
        state = AdamState.zeros_like(params)
        for _ in range(500):
            grad = {"x": 2.0 * (params["x"] - 3.0)}
            params, state = adam_step(params, grad, state, config)
        assert abs(params["x"][0] - 3.0) < 1e-2

    def test_non_finite_gradient_rejected(self):
        params = {"x": np.array([0.0])}
        state = AdamState.zeros_like(params)
        with pytest.raises(TrainerError, match="non-finite"):
            adam_step(params, {"x": np.array([np.nan])}, state, _config())


def test_clip_preserves_small_and_scales_large():
    small = {"a": np.array([0.3, 0.4])}
    assert clip_gradients(small, 5.0)["a"] is small["a"]
    big = {"a": np.array([30.0, 40.0])}
    clipped = clip_gradients(big, 5.0)
    assert np.linalg.norm(clipped["a"]) == pytest.approx(5.0)


class TestSelectBest:
    def _curves(self, valid_combined):
        rows = [
            CurveRow(e, 0, 0, 0, 0, 0, v, 0.0) for e, v in enumerate(valid_combined)
        ]
        return TrainingCurves(rows=rows)

    def test_monotone_decreasing_picks_last(self):
        assert best_epoch([5.0, 4.0, 3.0], warmup_epochs=0) == 2

    def test_argmin(self):
        # valid L [5,3,4] -> second epoch
        assert best_epoch([5.0, 3.0, 4.0], warmup_epochs=0) == 1

    def test_warmup_excludes_early_epochs(self):
        # [1,9,9] with one warmup epoch: epoch 0 ineligible
        assert best_epoch([1.0, 9.0, 9.0], warmup_epochs=1) == 1

    def test_ties_resolve_earliest(self):
        assert best_epoch([4.0, 2.0, 2.0], warmup_epochs=0) == 1

    def test_no_eligible_epoch_errors(self):
        with pytest.raises(TrainerError, match="eligible"):
            best_epoch([1.0, 2.0], warmup_epochs=2)

    def test_select_best_returns_checkpoint(self):
        curves = self._curves([5.0, 3.0, 4.0])
        checkpoints = {
            e: Checkpoint(epoch=e, params={}, adam_state=AdamState({}, {}, 0), valid_combined=v)
            for e, v in enumerate([5.0, 3.0, 4.0])
        }
        assert select_best(curves, checkpoints, warmup_epochs=0).epoch == 1


@pytest.fixture(scope="module")
def tiny_sets(micro_corpus):
    examples = micro_corpus["examples"]
    return examples["train"][:40], examples["valid"][:16]


def _model(seed=0, with_ctc_head=True, feature_dim=32):
    config = EncoderConfig(kind="toy", feature_dim=feature_dim, downsampling=320, seed=seed)
    return MTLModel(config, vocabulary=VOCABULARY, with_ctc_head=with_ctc_head)


class TestTrainLoop:
    def test_curves_complete_and_finite(self, tiny_sets):
        train_set, valid_set = tiny_sets
        result = train(_model(), train_set, valid_set, _config(epochs=2))
        assert len(result.curves) == 2
        for row in result.curves.rows:
            for field in ("train_ce", "train_ctc", "valid_ce", "valid_ctc", "valid_combined"):
                assert np.isfinite(getattr(row, field))

    def test_determinism_bit_identical(self, tiny_sets):
        train_set, valid_set = tiny_sets
        r1 = train(_model(seed=1), train_set, valid_set, _config(epochs=2, seed=1))
        r2 = train(_model(seed=1), train_set, valid_set, _config(epochs=2, seed=1))
        for key in r1.final.params:
            np.testing.assert_array_equal(r1.final.params[key], r2.final.params[key])
        assert [r.valid_combined for r in r1.curves.rows] == [r.valid_combined for r in r2.curves.rows]

    def test_warmup_freezes_severity_head_exactly(self, tiny_sets):
        train_set, valid_set = tiny_sets
        model = _model(seed=2)
        init_w = model.severity.weight.copy()
        init_b = model.severity.bias.copy()
        result = train(model, train_set, valid_set, _config(epochs=3, warmup_epochs=3))
        assert np.array_equal(result.final.params["severity_head.weight"], init_w)
        assert np.array_equal(result.final.params["severity_head.bias"], init_b)
        # degenerate warmup: best falls back to the final epoch
        assert result.best.epoch == result.final.epoch == 2

    def test_severity_head_moves_after_warmup(self, tiny_sets):
        train_set, valid_set = tiny_sets
        model = _model(seed=2)
        init_w = model.severity.weight.copy()
        result = train(model, train_set, valid_set, _config(epochs=2, warmup_epochs=1))
        assert not np.array_equal(result.final.params["severity_head.weight"], init_w)

    def test_stl_equivalence_alpha_zero_vs_no_head(self, tiny_sets):
        train_set, valid_set = tiny_sets
        config = _config(epochs=3, alpha=0.0, seed=3)
        with_head = train(_model(seed=3, with_ctc_head=True), train_set, valid_set, config)
        without_head = train(_model(seed=3, with_ctc_head=False), train_set, valid_set, config)
        ce_a = np.array([r.valid_ce for r in with_head.curves.rows])
        ce_b = np.array([r.valid_ce for r in without_head.curves.rows])
        np.testing.assert_allclose(ce_a, ce_b, atol=1e-9)
        tr_a = np.array([r.train_ce for r in with_head.curves.rows])
        tr_b = np.array([r.train_ce for r in without_head.curves.rows])
        np.testing.assert_allclose(tr_a, tr_b, atol=1e-9)

    def test_resume_matches_straight_run(self, tiny_sets, tmp_path):
        train_set, valid_set = tiny_sets
        straight = train(_model(seed=4), train_set, valid_set, _config(epochs=4, seed=4))

        first = train(_model(seed=4), train_set, valid_set, _config(epochs=2, seed=4))
        # persist and reload across the boundary, as the pipeline would
        model = _model(seed=4)
        model.set_parameters(first.final.params)
        path = tmp_path / "resume.ckpt"
        save_trainer_checkpoint(path, model, first.final, _config(epochs=2, seed=4))
        model2, checkpoint, _ = load_trainer_checkpoint(path)
        second = train(model2, train_set, valid_set, _config(epochs=4, seed=4), resume=checkpoint)

        for key in straight.final.params:
            np.testing.assert_array_equal(straight.final.params[key], second.final.params[key])
        assert straight.final.adam_state.step == second.final.adam_state.step

    def test_empty_partition_rejected(self, tiny_sets):
        train_set, _ = tiny_sets
        with pytest.raises(TrainerError, match="non-empty"):
            train(_model(), train_set, [], _config())

    def test_unalignable_transcripts_skipped_with_count(self, tiny_sets):
        train_set, valid_set = tiny_sets
        crippled = list(train_set)
        long_transcript = tuple([1, 1] * 40)  # needs far more frames than any clip has
        crippled[0] = type(crippled[0])(
            utterance_id=crippled[0].utterance_id,
            audio=crippled[0].audio,
            label=crippled[0].label,
            transcript=long_transcript,
        )
        result = train(_model(), crippled, valid_set, _config(epochs=1))
        assert result.skipped_unalignable == 1

    def test_all_unalignable_errors(self, tiny_sets):
        train_set, valid_set = tiny_sets
        long_transcript = tuple([1, 1] * 40)
        crippled = [
            type(ex)(ex.utterance_id, ex.audio, ex.label, long_transcript) for ex in train_set
        ]
        with pytest.raises(TrainerError, match="unalignable"):
            train(_model(), crippled, valid_set, _config(epochs=1))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")  # nan propagation is the point
    def test_non_finite_gradient_aborts_with_diagnostic(self, tiny_sets):
        train_set, valid_set = tiny_sets
        model = _model()
        poisoned = model.ctc.weight.copy()
        poisoned[0, 0] = np.nan
        model.set_parameters({"ctc_head.weight": poisoned})
        with pytest.raises(TrainerError, match="epoch 0"):
            train(model, train_set, valid_set, _config(epochs=1))


class TestConfigValidation:
    def test_warmup_beyond_epochs_rejected(self):
        with pytest.raises(TrainerError):
            TrainConfig(epochs=10, warmup_epochs=11)

    def test_bad_batch_size_rejected(self):
        with pytest.raises(TrainerError):
            TrainConfig(batch_size=0)

    def test_defaults_mirror_recipe(self):
        config = TrainConfig()
        assert (config.lr, config.beta1, config.beta2, config.eps) == (2e-5, 0.9, 0.98, 1e-8)
        assert (config.batch_size, config.epochs) == (4, 100)
        assert config.alpha == 0.1


def test_curves_round_trip(tmp_path):
    rows = [CurveRow(e, 1.0 + e, 2.0, 3.0, 4.0, 5.0, 6.0 - e, 0.25) for e in range(3)]
    curves = TrainingCurves(rows=rows)
    path = tmp_path / "curves.tsv"
    write_curves(path, curves)
    back = read_curves(path)
    assert len(back) == 3
    np.testing.assert_allclose(back.column("train_ce"), curves.column("train_ce"))
    np.testing.assert_allclose(back.column("valid_combined"), curves.column("valid_combined"))
