import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import check_gradients
from hcanet.errors import ConfigurationError, InputError
from hcanet.network import DOWNSAMPLE, ModelConfig, build_model, infer_sample


def tiny_config(**overrides):
    defaults = dict(stacks=1, channels=8, hourglass_depth=2, num_discs=11,
                    input_size=(64, 64), seed=0)
    defaults.update(overrides)
    return ModelConfig(**defaults)


def all_parameters_equal(a, b):
    pa, pb = dict(a.named_parameters()), dict(b.named_parameters())
    assert pa.keys() == pb.keys()
    return all(torch.equal(pa[k], pb[k]) for k in pa)


class TestBuild:
    def test_same_seed_same_weights(self):
        m1 = build_model(tiny_config(seed=5))
        m2 = build_model(tiny_config(seed=5))
        assert all_parameters_equal(m1, m2)

    def test_different_seed_different_weights(self):
        m1 = build_model(tiny_config(seed=5))
        m2 = build_model(tiny_config(seed=6))
        assert not all_parameters_equal(m1, m2)

    def test_structural_counts(self):
        model = build_model(tiny_config(stacks=2, num_discs=11))
        assert len(model.heads) == 2
        assert model.fuse.out_channels == 11
        assert model.fuse.in_channels == 22

    def test_parameter_count_increases_with_stacks(self):
        counts = [build_model(tiny_config(stacks=n)).num_parameters for n in (1, 2, 3)]
        assert counts[0] < counts[1] < counts[2]

    def test_indivisible_input_size_rejected(self):
        with pytest.raises(ConfigurationError):
            ModelConfig(stacks=1, channels=8, hourglass_depth=3, input_size=(60, 60))

    def test_mlka_channel_mismatch_rejected(self):
        from hcanet.mlka import MlkaConfig

        with pytest.raises(ConfigurationError):
            ModelConfig(channels=8, input_size=(64, 64), hourglass_depth=2,
                        mlka=MlkaConfig(channels=16))


class TestForward:
    def test_full_size_shape_contract(self):
        config = ModelConfig(stacks=2, channels=16, hourglass_depth=3, num_discs=11,
                             input_size=(256, 256), seed=0)
        model = build_model(config).eval()
        out = infer_sample(model, np.random.default_rng(0).random((256, 256), dtype=np.float32))
        assert tuple(out.fused.values.shape) == (11, 64, 64)
        assert len(out.intermediates) == 2
        assert all(tuple(o.values.shape) == (11, 64, 64) for o in out.intermediates)

    def test_forward_is_pure(self):
        model = build_model(tiny_config()).eval()
        x = torch.rand(1, 1, 64, 64, generator=torch.Generator().manual_seed(3))
        with torch.no_grad():
            f1, _ = model(x)
            f2, _ = model(x)
        assert torch.equal(f1, f2)

    def test_wrong_input_shape_rejected(self):
        model = build_model(tiny_config())
        with pytest.raises(InputError):
            model(torch.rand(1, 1, 32, 32))
        with pytest.raises(InputError):
            model(torch.rand(1, 3, 64, 64))

    @settings(max_examples=8)
    @given(
        st.integers(1, 3),
        st.integers(1, 12),
        st.sampled_from([(32, 32), (64, 32), (64, 64)]),
    )
    def test_output_shape_is_function_of_config(self, stacks, num_discs, input_size):
        config = ModelConfig(stacks=stacks, channels=4, hourglass_depth=2,
                             num_discs=num_discs, input_size=input_size, seed=1)
        model = build_model(config).eval()
        with torch.no_grad():
            fused, outs = model(torch.rand(1, 1, *input_size))
        expected = (1, num_discs, input_size[0] // DOWNSAMPLE, input_size[1] // DOWNSAMPLE)
        assert tuple(fused.shape) == expected
        assert len(outs) == stacks
        assert all(tuple(o.shape) == expected for o in outs)


class TestGradients:
    def test_input_gradient_matches_finite_differences(self):
        config = tiny_config(input_size=(32, 32), hourglass_depth=2)
        model = build_model(config).double().eval()

        def fn(x):
            fused, _ = model(x)
            return fused.sum()

        gen = torch.Generator().manual_seed(17)
        x = torch.rand(1, 1, 32, 32, generator=gen, dtype=torch.float64) * 0.8 + 0.1
        check_gradients(fn, x)

    def test_every_head_receives_gradient_from_fused_loss(self):
        config = tiny_config(stacks=3)
        model = build_model(config)
        gen = torch.Generator().manual_seed(2)
        x = torch.rand(2, 1, 64, 64, generator=gen)
        fused, outs = model(x)
        loss = ((fused - torch.rand(fused.shape, generator=gen)) ** 2).mean()
        loss.backward()
        for head in model.heads:
            assert head.weight.grad is not None
            assert head.weight.grad.norm() > 0
