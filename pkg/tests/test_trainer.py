import pytest
import torch

from hcanet.errors import CheckpointError, ConfigurationError, InputError, TrainingDivergedError
from hcanet.heatmap_codec import HeatmapStack
from hcanet.losses import LossConfig, total_loss
from hcanet.network import ModelConfig, NetworkOutput, build_model
from hcanet.spine_data import SynthConfig, generate_synthetic, prepare_batch
from hcanet.trainer import (
    CHECKPOINT_VERSION,
    TrainConfig,
    _check_finite,
    config_from_items,
    config_to_flat_items,
    load_checkpoint,
    parse_config_file,
    resume,
    train,
)


def tiny_model(seed=0):
    return ModelConfig(stacks=1, channels=8, hourglass_depth=2, input_size=(64, 64), seed=seed)


def tiny_train(**overrides) -> TrainConfig:
    defaults = dict(
        epochs=2, batch_size=4, learning_rate=2.5e-4, loss=LossConfig(),
        model=tiny_model(), checkpoint_every=50, seed=0,
    )
    defaults.update(overrides)
    return TrainConfig(**defaults)


@pytest.fixture(scope="module")
def data8():
    return generate_synthetic(
        SynthConfig(count=8, height=64, width=64, disc_gap_px=(4.2, 5.0), noise_std=0.02, seed=2)
    )


@pytest.fixture(scope="module")
def data4(data8):
    return data8[:4]


def read_log(path):
    return path.read_text().strip().splitlines()


def state_tensors_equal(a: dict, b: dict) -> bool:
    assert a.keys() == b.keys()
    return all(torch.equal(a[k], b[k]) for k in a)


class TestTrainLoop:
    def test_log_contract_one_epoch(self, data4, tmp_path):
        report = train(tiny_train(epochs=1), data4, data4[:2], tmp_path)
        lines = read_log(tmp_path / "train_log.csv")
        assert lines[0] == "epoch,train_loss,val_loss,val_dtt_px,val_fnr,val_fpr"
        assert len(lines) == 2
        assert report.epochs_run == 1

    def test_zero_learning_rate_is_a_null_update(self, data4, tmp_path):
        config = tiny_train(epochs=2, learning_rate=0.0)
        train(config, data4, [], tmp_path)
        trained = load_checkpoint(tmp_path / "last.ckpt")["model_state"]
        fresh = build_model(config.model)
        # parameters must be bitwise untouched (BN running stats may move)
        for name, param in fresh.named_parameters():
            assert torch.equal(trained[name], param), name

    def test_loss_decreases_tenfold_on_overfit(self, data8, tmp_path):
        config = tiny_train(epochs=200)
        train(config, data8, [], tmp_path)
        rows = [line.split(",") for line in read_log(tmp_path / "train_log.csv")[1:]]
        first, last = float(rows[0][1]), float(rows[-1][1])
        assert last < first / 10.0

    def test_empty_train_set_rejected(self, tmp_path):
        with pytest.raises(InputError):
            train(tiny_train(), [], [], tmp_path)

    def test_checkpoint_cadence_and_best(self, data4, tmp_path):
        train(tiny_train(epochs=4, checkpoint_every=2), data4, data4[:2], tmp_path)
        for name in ("epoch_0002.ckpt", "epoch_0004.ckpt", "best.ckpt", "last.ckpt"):
            assert (tmp_path / name).exists(), name

    def test_divergence_names_the_offending_term(self, data4, tmp_path):
        config = tiny_train(epochs=6, learning_rate=1e8)
        with pytest.raises(TrainingDivergedError, match="L_v"):
            train(config, data4, [], tmp_path)

    def test_check_finite_names_both_terms(self):
        bad = torch.tensor(float("nan"))
        good = torch.tensor(1.0)
        with pytest.raises(TrainingDivergedError, match="L_v"):
            _check_finite(bad, good, epoch=3)
        with pytest.raises(TrainingDivergedError, match="L_sk"):
            _check_finite(good, bad, epoch=3)

    def test_learnable_alpha_stays_in_range(self, data4, tmp_path):
        config = tiny_train(epochs=2, loss=LossConfig(alpha_learnable=True))
        train(config, data4, [], tmp_path)
        alpha = load_checkpoint(tmp_path / "last.ckpt")["alpha_param"]
        assert alpha is not None
        assert 0.0 < float(alpha) <= 1.0


class TestDeterminismAndResume:
    def test_identical_runs_identical_logs(self, data4, tmp_path):
        train(tiny_train(epochs=3), data4, data4[:2], tmp_path / "a")
        train(tiny_train(epochs=3), data4, data4[:2], tmp_path / "b")
        assert (tmp_path / "a/train_log.csv").read_bytes() == (tmp_path / "b/train_log.csv").read_bytes()

    def test_resume_with_no_extra_epochs_is_noop(self, data4, tmp_path):
        train(tiny_train(epochs=3), data4, data4[:2], tmp_path)
        before = load_checkpoint(tmp_path / "last.ckpt")["model_state"]
        report = resume(tmp_path / "last.ckpt", data4, data4[:2])
        assert report.epochs_run == 0
        after = load_checkpoint(tmp_path / "last.ckpt")["model_state"]
        assert state_tensors_equal(before, after)

    def test_split_equals_straight_bitwise(self, data4, tmp_path):
        train(tiny_train(epochs=6), data4, data4[:2], tmp_path / "straight")
        train(tiny_train(epochs=3), data4, data4[:2], tmp_path / "split")
        resume(tmp_path / "split/last.ckpt", data4, data4[:2], epochs=6)
        straight = load_checkpoint(tmp_path / "straight/last.ckpt")
        split = load_checkpoint(tmp_path / "split/last.ckpt")
        assert state_tensors_equal(straight["model_state"], split["model_state"])
        assert (tmp_path / "straight/train_log.csv").read_bytes() == (
            tmp_path / "split/train_log.csv"
        ).read_bytes()

    def test_corrupted_checkpoint_refused_with_version_message(self, tmp_path):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"not a checkpoint at all")
        with pytest.raises(CheckpointError, match=CHECKPOINT_VERSION):
            load_checkpoint(bad)

    def test_wrong_version_refused(self, data4, tmp_path):
        train(tiny_train(epochs=1), data4, [], tmp_path)
        payload = torch.load(tmp_path / "last.ckpt", weights_only=True)
        payload["format_version"] = "hcanet-checkpoint-v0"
        torch.save(payload, tmp_path / "old.ckpt")
        with pytest.raises(CheckpointError, match="hcanet-checkpoint-v0"):
            load_checkpoint(tmp_path / "old.ckpt")


class TestStepProperties:
    def test_one_step_rarely_increases_loss(self, data4):
        """Smoke property over 20 seeds at lr=1e-4; up to 2 violations allowed."""
        violations = 0
        for seed in range(20):
            config = tiny_model(seed=seed)
            images, targets, keypoints, _ = prepare_batch(data4, config)
            model = build_model(config)
            optimizer = torch.optim.RMSprop(model.parameters(), lr=1e-4, alpha=0.99, eps=1e-8)

            def batch_loss():
                fused, outs = model(images)
                per = []
                for b in range(images.shape[0]):
                    out = NetworkOutput(HeatmapStack(fused[b]), [HeatmapStack(o[b]) for o in outs])
                    per.append(
                        total_loss(out, HeatmapStack(targets[b], role="target"),
                                   keypoints[b], LossConfig())
                    )
                return torch.stack(per).mean()

            model.train()
            loss0 = batch_loss()
            optimizer.zero_grad()
            loss0.backward()
            optimizer.step()
            model.train()
            with torch.no_grad():
                loss1 = batch_loss()
            if float(loss1) > float(loss0.detach()):
                violations += 1
        assert violations <= 2

    def test_fully_masked_disc_gets_zero_head_bias_gradient(self, data4):
        hidden = 5
        samples = generate_synthetic(
            SynthConfig(count=4, height=64, width=64, disc_gap_px=(4.2, 5.0), seed=9)
        )
        for sample in samples:
            sample.keypoints.visible[hidden] = False
            sample.keypoints.coords[hidden] = (-1.0, -1.0)
        config = ModelConfig(stacks=2, channels=8, hourglass_depth=2, input_size=(64, 64), seed=1)
        images, targets, keypoints, _ = prepare_batch(samples, config)
        model = build_model(config)
        fused, outs = model(images)
        per = []
        for b in range(images.shape[0]):
            out = NetworkOutput(HeatmapStack(fused[b]), [HeatmapStack(o[b]) for o in outs])
            per.append(
                total_loss(out, HeatmapStack(targets[b], role="target"), keypoints[b],
                           LossConfig(lambda_sk=1e-3))
            )
        torch.stack(per).mean().backward()
        for head in model.heads:
            assert head.bias.grad is not None
            assert head.bias.grad[hidden].item() == 0.0
            assert head.bias.grad.abs().sum().item() > 0.0


class TestConfigFiles:
    def test_defaults_applied_for_missing_keys(self, tmp_path):
        path = tmp_path / "cfg.txt"
        path.write_text("epochs = 3\nmodel.channels = 8\nmodel.input_size = 64,64\nmodel.hourglass_depth = 2\n")
        config = parse_config_file(path)
        assert config.epochs == 3
        assert config.loss.lambda_sk == 2e-4
        assert config.loss.beta == 0.75
        assert config.loss.alpha == 0.8
        assert config.learning_rate == 2.5e-4
        assert config.batch_size == 4

    def test_comments_and_blank_lines_ignored(self, tmp_path):
        path = tmp_path / "cfg.txt"
        path.write_text("# a comment\n\nepochs = 2\n")
        assert parse_config_file(path).epochs == 2

    def test_unknown_key_lists_valid_keys(self, tmp_path):
        path = tmp_path / "cfg.txt"
        path.write_text("learninig_rate = 0.1\n")
        with pytest.raises(ConfigurationError, match="loss.lambda_sk"):
            parse_config_file(path)

    def test_bad_value_reported(self):
        with pytest.raises(ConfigurationError, match="epochs"):
            config_from_items({"epochs": "three"})

    def test_scales_and_size_parsing(self):
        config = config_from_items(
            {
                "model.input_size": "64x64",
                "model.hourglass_depth": "2",
                "model.channels": "8",
                "model.mlka.scales": "9:3,21:3",
            }
        )
        assert config.model.input_size == (64, 64)
        assert [s.kernel for s in config.model.mlka.scales] == [9, 21]

    def test_flat_items_roundtrip(self):
        original = tiny_train(epochs=7, learning_rate=1e-3, seed=4)
        rebuilt = config_from_items(config_to_flat_items(original))
        assert rebuilt == original

    def test_learning_rate_zero_allowed(self):
        assert tiny_train(learning_rate=0.0).learning_rate == 0.0
        with pytest.raises(ConfigurationError):
            tiny_train(learning_rate=-1e-3)
