"""Encoder, heads, losses, and CTC behavior."""

import io
import itertools
import sys

import numpy as np
import pytest

from sevkit.corpus import RawAudio
from sevkit.model import (
    CTCAlignmentError,
    EncoderConfig,
    LatentSequence,
    MTLModel,
    ModelError,
    SubprocessEncoderAdapter,
    ToyEncoder,
    ce_loss,
    combined_loss,
    ctc_frame_distributions,
    ctc_loss,
    encode,
    greedy_decode,
    load_checkpoint,
    mean_pool,
    read_latent_matrix,
    save_checkpoint,
    severity_distribution,
    softmax,
    write_latent_matrix,
)
from sevkit.model.ctc import ctc_loss_and_grad_from_logits, min_alignment_frames
from sevkit.model.network import CTCHead, SeverityHead

SR = 16000


def toy_config(feature_dim=16, seed=0, downsampling=320):
    return EncoderConfig(kind="toy", feature_dim=feature_dim, seed=seed, downsampling=downsampling)


def random_audio(n, seed=0, scale=0.3):
    rng = np.random.default_rng(seed)
    return RawAudio(np.clip(rng.normal(0, scale, n), -1, 1), SR)


class TestEncode:
    def test_output_length_is_ceil(self):
        latent = encode(random_audio(16000), toy_config())
        assert latent.H.shape == (50, 16)
        assert latent.valid_length == 50

    def test_one_window_audio(self):
        latent = encode(random_audio(320), toy_config())
        assert latent.H.shape[0] == 1

    def test_shorter_than_window_errors(self):
        with pytest.raises(Exception, match="downsampling window"):
            encode(random_audio(319), toy_config())

    def test_deterministic_for_same_parameters(self):
        audio = random_audio(5000)
        a = encode(audio, toy_config(seed=4))
        b = encode(audio, toy_config(seed=4))
        assert np.array_equal(a.H, b.H)

    def test_different_seed_changes_parameters(self):
        audio = random_audio(5000)
        a = encode(audio, toy_config(seed=4))
        b = encode(audio, toy_config(seed=5))
        assert not np.allclose(a.H, b.H)

    def test_ceil_lengths_randomized(self):
        encoder = ToyEncoder(toy_config())
        rng = np.random.default_rng(9)
        for _ in range(6):
            n = int(rng.integers(320, 20000))
            latent = encoder.forward(random_audio(n))
            assert latent.H.shape[0] == -(-n // 320)


class TestMeanPool:
    def test_identical_rows(self):
        v = np.array([1.5, -2.0, 3.0])
        latent = LatentSequence(H=np.tile(v, (4, 1)), valid_length=4)
        np.testing.assert_array_equal(mean_pool(latent), v)

    def test_arithmetic_mean(self):
        latent = LatentSequence(H=np.array([[1.0, 3.0], [3.0, 5.0]]), valid_length=2)
        np.testing.assert_array_equal(mean_pool(latent), [2.0, 4.0])

    def test_padded_rows_excluded(self):
        rng = np.random.default_rng(0)
        H = rng.normal(size=(6, 8))
        unpadded = LatentSequence(H=H[:4], valid_length=4)
        padded = LatentSequence(H=np.vstack([H[:4], np.full((3, 8), 9.0)]), valid_length=4)
        np.testing.assert_allclose(mean_pool(padded), mean_pool(unpadded), atol=1e-6)


class TestSeverityDistribution:
    def test_zero_head_is_uniform(self):
        head = SeverityHead(weight=np.zeros((5, 8)), bias=np.zeros(5))
        p = severity_distribution(np.ones(8), head)
        np.testing.assert_allclose(p, 0.2, atol=1e-12)

    def test_shift_invariance(self):
        rng = np.random.default_rng(1)
        head = SeverityHead(weight=rng.normal(size=(5, 8)), bias=rng.normal(size=5))
        pooled = rng.normal(size=8)
        p1 = severity_distribution(pooled, head)
        shifted = SeverityHead(weight=head.weight, bias=head.bias + 7.3)
        p2 = severity_distribution(pooled, shifted)
        np.testing.assert_allclose(p1, p2, atol=1e-9)

    def test_hand_softmax(self):
        logits = np.log([1.0, 2.0, 3.0, 2.0, 2.0])
        p = softmax(logits)
        np.testing.assert_allclose(p, [0.1, 0.2, 0.3, 0.2, 0.2], atol=1e-12)

    def test_dim_mismatch(self):
        head = SeverityHead(weight=np.zeros((5, 8)), bias=np.zeros(5))
        with pytest.raises(ModelError):
            head.logits(np.ones(9))

    def test_rows_sum_to_one_under_huge_logits(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            logits = rng.uniform(-1e4, 1e4, size=5)
            p = softmax(logits)
            assert np.all(np.isfinite(p))
            assert abs(p.sum() - 1.0) < 1e-6


class TestCeLoss:
    def test_certain_prediction_is_zero(self):
        logits = np.array([1000.0, 0.0, 0.0, 0.0, 0.0])
        assert ce_loss(logits, 0) == pytest.approx(0.0, abs=1e-12)

    def test_uniform_is_log5(self):
        assert ce_loss(np.zeros(5), 3) == pytest.approx(np.log(5.0))

    def test_hand_log_sum_exp(self):
        logits = np.array([0.0, 0.0, 0.0, 0.0, 10.0])
        want = np.log(4 * np.exp(-10.0) + 1.0)
        assert ce_loss(logits, 4) == pytest.approx(want, rel=1e-9)
        assert want == pytest.approx(1.816e-4, rel=1e-3)


class TestCtcFrameDistributions:
    def test_zero_head_uniform_rows(self):
        head = CTCHead(weight=np.zeros((4, 8)), bias=np.zeros(4), vocabulary=(1, 2, 3))
        latent = LatentSequence(H=np.random.default_rng(0).normal(size=(6, 8)), valid_length=6)
        p = ctc_frame_distributions(latent, head)
        np.testing.assert_allclose(p, 0.25, atol=1e-12)

    def test_rows_independent_under_permutation(self):
        rng = np.random.default_rng(3)
        head = CTCHead(weight=rng.normal(size=(4, 8)), bias=rng.normal(size=4), vocabulary=(1, 2, 3))
        H = rng.normal(size=(5, 8))
        p = ctc_frame_distributions(LatentSequence(H=H, valid_length=5), head)
        perm = rng.permutation(5)
        p_perm = ctc_frame_distributions(LatentSequence(H=H[perm], valid_length=5), head)
        np.testing.assert_allclose(p_perm, p[perm], atol=1e-12)

    def test_single_row_matches_hand_softmax(self):
        head = CTCHead(weight=np.eye(3), bias=np.zeros(3), vocabulary=(1, 2))
        H = np.log([[1.0, 2.0, 3.0]])
        p = ctc_frame_distributions(LatentSequence(H=H, valid_length=1), head)
        np.testing.assert_allclose(p[0], [1 / 6, 2 / 6, 3 / 6], atol=1e-12)


def brute_force_ctc(probs, target):
    """Total probability over all paths whose collapse equals the target."""
    T, V = probs.shape
    target = tuple(target)
    total = 0.0
    for path in itertools.product(range(V), repeat=T):
        collapsed, prev = [], None
        for s in path:
            if s != prev:
                collapsed.append(s)
            prev = s
        if tuple(s for s in collapsed if s != 0) == target:
            p = 1.0
            for t, s in enumerate(path):
                p *= probs[t, s]
            total += p
    return -np.log(total) if total > 0 else np.inf


class TestCtcLoss:
    def test_single_frame_single_token(self):
        probs = np.array([[0.6, 0.4]])
        assert ctc_loss(probs, (1,)) == pytest.approx(-np.log(0.4))

    def test_two_frames_uniform_three_symbols(self):
        probs = np.full((2, 3), 1 / 3)
        assert ctc_loss(probs, (1,)) == pytest.approx(np.log(3.0))

    def test_repeated_token_needs_blank_frame(self):
        probs = np.full((2, 3), 1 / 3)
        with pytest.raises(CTCAlignmentError):
            ctc_loss(probs, (1, 1))
        assert min_alignment_frames((1, 1)) == 3

    def test_forward_matches_enumeration(self):
        rng = np.random.default_rng(11)
        for T in range(1, 5):
            for V in (2, 3):
                targets = [
                    t
                    for U in (1, 2)
                    for t in itertools.product(range(1, V), repeat=U)
                ]
                for target in targets:
                    if T < min_alignment_frames(target):
                        continue
                    for _ in range(5):
                        probs = rng.random((T, V))
                        probs /= probs.sum(axis=1, keepdims=True)
                        want = brute_force_ctc(probs, target)
                        assert ctc_loss(probs, target) == pytest.approx(want, abs=1e-6)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        logits = rng.normal(0, 2, size=(5, 4))
        target = (1, 3, 1)
        _, grad = ctc_loss_and_grad_from_logits(logits, target)
        h = 1e-7
        for t in range(5):
            for v in range(4):
                up, down = logits.copy(), logits.copy()
                up[t, v] += h
                down[t, v] -= h
                num = (
                    ctc_loss_and_grad_from_logits(up, target)[0]
                    - ctc_loss_and_grad_from_logits(down, target)[0]
                ) / (2 * h)
                assert grad[t, v] == pytest.approx(num, abs=1e-6)

    def test_blank_in_target_rejected(self):
        with pytest.raises(CTCAlignmentError, match="blank"):
            ctc_loss(np.full((3, 3), 1 / 3), (0, 1))


class TestCombinedLoss:
    def test_post_warmup_arithmetic(self):
        bundle = combined_loss(ce=2.0, ctc=30.0, alpha=0.1, epoch=25, warmup_epochs=20)
        assert bundle.combined == pytest.approx(5.0)

    def test_warmup_gates_ce_off(self):
        bundle = combined_loss(ce=2.0, ctc=30.0, alpha=0.1, epoch=5, warmup_epochs=20)
        assert bundle.combined == pytest.approx(3.0)

    def test_zero_alpha_single_task(self):
        bundle = combined_loss(ce=2.0, ctc=30.0, alpha=0.0, epoch=25, warmup_epochs=20)
        assert bundle.combined == pytest.approx(2.0)

    def test_invariant_relation(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            ce, ctc = rng.uniform(0, 5), rng.uniform(0, 50)
            alpha = rng.uniform(0, 1)
            epoch, warm = int(rng.integers(0, 40)), int(rng.integers(0, 40))
            bundle = combined_loss(ce, ctc, alpha, epoch, warm)
            want = alpha * ctc if epoch < warm else ce + alpha * ctc
            assert abs(bundle.combined - want) <= 1e-9


class TestGreedyDecode:
    def test_collapse_rule(self):
        probs = np.array([[0.1, 0.8, 0.1], [0.1, 0.8, 0.1], [0.8, 0.1, 0.1], [0.1, 0.1, 0.8]])
        assert greedy_decode(probs) == (1, 2)

    def test_all_blank(self):
        probs = np.tile([0.9, 0.05, 0.05], (4, 1))
        assert greedy_decode(probs) == ()

    def test_blank_separates_repeats_vs_best_path_oracle(self):
        probs = np.array([[0.1, 0.9], [0.9, 0.1], [0.1, 0.9]])
        # oracle: the most probable single path, then collapse
        best_path = max(
            itertools.product(range(2), repeat=3),
            key=lambda path: np.prod([probs[t, s] for t, s in enumerate(path)]),
        )
        collapsed, prev = [], None
        for s in best_path:
            if s != prev and s != 0:
                collapsed.append(s)
            prev = s
        assert greedy_decode(probs) == tuple(collapsed) == (1, 1)


class TestLatentWireFormat:
    def test_round_trip(self):
        H = np.random.default_rng(0).normal(size=(7, 5))
        buf = io.BytesIO()
        write_latent_matrix(buf, H)
        buf.seek(0)
        np.testing.assert_array_equal(read_latent_matrix(buf), H)

    def test_subprocess_adapter_round_trip(self, tmp_path):
        script = tmp_path / "echo_encoder.py"
        script.write_text(
            "import sys\n"
            "import numpy as np\n"
            "from sevkit.model.encoder import read_audio_message, write_latent_matrix\n"
            "audio = read_audio_message(sys.stdin.buffer)\n"
            "n = (audio.samples.size // 100) * 100\n"
            "H = audio.samples[:n].reshape(-1, 100)[:, :6].copy()\n"
            "write_latent_matrix(sys.stdout.buffer, H)\n"
        )
        config = EncoderConfig(
            kind="external-adapter",
            feature_dim=6,
            adapter_command=(sys.executable, str(script)),
        )
        adapter = SubprocessEncoderAdapter(config)
        audio = random_audio(1000, seed=1)
        latent = adapter.forward(audio)
        assert latent.H.shape == (10, 6)
        np.testing.assert_allclose(latent.H[0], audio.samples[:6])


class TestCheckpointContainer:
    def test_round_trip_preserves_everything(self, tmp_path):
        model = MTLModel(toy_config(seed=2), vocabulary=(1, 2, 3))
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, model, alpha=0.1, warmup_epochs=20, extra={"note": 1})
        loaded, meta, _ = load_checkpoint(path)
        assert meta["alpha"] == 0.1
        assert meta["warmup_epochs"] == 20
        assert tuple(meta["vocabulary"]) == (1, 2, 3)
        for key, tensor in model.parameters().items():
            np.testing.assert_array_equal(loaded.parameters()[key], tensor)

    def test_writes_are_byte_deterministic(self, tmp_path):
        model = MTLModel(toy_config(seed=2), vocabulary=(1, 2))
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(p1, model, alpha=0.1, warmup_epochs=0)
        save_checkpoint(p2, model, alpha=0.1, warmup_epochs=0)
        assert p1.read_bytes() == p2.read_bytes()
