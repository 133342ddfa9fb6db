import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from causal_probe.concept_ae import (AETrainConfig, AugmentedNetwork, _deep_loss, bottleneck_activations,
                                     build_autoencoder, composite_loss, load_autoencoder, save_autoencoder,
                                     train_autoencoder)
from causal_probe.data import synthetic_dataset
from causal_probe.errors import ContractError, RangeError
from causal_probe.nets import bars_spec, build_network, fashion_2conv_spec
from causal_probe.tensor import Tensor

from oracles import identity_setup


class TestConstruction:
    def test_channel_schedule(self):
        host = build_network(fashion_2conv_spec(), 0)
        ae = build_autoencoder(host, 1, 4, seed=0)
        assert ae.schedule == [(16, 8), (8, 4), (4, 4), (4, 8), (8, 16)]

    def test_roundtrip_shape(self, rng):
        host = build_network(fashion_2conv_spec(), 0)
        ae = build_autoencoder(host, 2, 4, seed=0)
        a = rng.uniform(size=(2, 32, 14, 14))
        assert ae.decode(ae.encode(a)).shape == a.shape

    def test_bottleneck_not_narrower(self):
        host = build_network(fashion_2conv_spec(), 0)
        with pytest.raises(ContractError):
            build_autoencoder(host, 1, 16, seed=0)

    def test_unknown_level(self):
        with pytest.raises(RangeError):
            build_autoencoder(build_network(bars_spec(), 0), 3, 2, seed=0)


class TestCompositeLoss:
    def test_identity_ae_zero_losses(self, rng):
        aug = identity_setup()
        parts = composite_loss(aug, rng.uniform(size=(5, 1, 4, 4)))
        assert parts["shallow"].item() == 0.0
        assert parts["deep"].item() == 0.0

    def test_zero_bottleneck_zero_interpretability(self, rng):
        aug = identity_setup()
        aug.ae.params["mid.W"].data[:] = 0.0
        parts = composite_loss(aug, rng.uniform(size=(3, 1, 4, 4)))
        assert parts["interpretability"].item() == 0.0

    def test_kl_identical_is_zero(self, rng):
        logits = rng.normal(size=(4, 3))
        assert _deep_loss(logits, Tensor(logits), "categorical").item() == 0.0

    def test_kl_closed_form(self):
        # p = [1, 0] (to double precision), q = [0.5, 0.5]
        kl = _deep_loss(np.array([[0.0, -1000.0]]), Tensor([[0.0, 0.0]]), "categorical").item()
        assert kl == pytest.approx(math.log(2.0), abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.sampled_from(["categorical", "binary"]))
    def test_kl_nonnegative(self, seed, head):
        rng = np.random.default_rng(seed)
        p, q = rng.normal(scale=3, size=(4, 3)), rng.normal(scale=3, size=(4, 3))
        assert _deep_loss(p, Tensor(q), head).item() >= -1e-12

    @settings(max_examples=20, deadline=None)
    @given(st.tuples(st.floats(0, 3), st.floats(0, 3), st.floats(0, 3)), st.integers(0, 1000))
    def test_total_is_weighted_sum(self, lambdas, seed):
        host = build_network(bars_spec(), 0)
        ae = build_autoencoder(host, 1, 3, seed=seed, lambdas=lambdas)
        parts = composite_loss(AugmentedNetwork(host, ae), np.random.default_rng(seed).uniform(size=(3, 1, 8, 8)))
        ls, ld, li = lambdas
        expect = ls * parts["shallow"].item() + ld * parts["deep"].item() + li * parts["interpretability"].item()
        assert abs(parts["total"].item() - expect) <= 1e-12


class TestTraining:
    def test_shallow_only_decreases(self):
        data = synthetic_dataset("bars", 400, 0)
        host = build_network(bars_spec(), 0)
        ae = build_autoencoder(host, 2, 4, seed=0)
        _, hist = train_autoencoder(AugmentedNetwork(host, ae), data,
                                    AETrainConfig(epochs=4, batch_size=50, lambdas=(1.0, 0.0, 0.0)))
        shallow = [e["shallow"] for e in hist["epochs"]]
        assert all(b < a for a, b in zip(shallow, shallow[1:]))

    def test_zero_epochs_unchanged(self):
        host = build_network(bars_spec(), 0)
        ae = build_autoencoder(host, 2, 4, seed=0)
        out, _ = train_autoencoder(AugmentedNetwork(host, ae), synthetic_dataset("bars", 20, 0), AETrainConfig(epochs=0))
        for k in ae.params:
            assert out.params[k].data.tobytes() == ae.params[k].data.tobytes()

    def test_host_frozen(self):
        host = build_network(bars_spec(), 0)
        before = {k: v.data.copy() for k, v in host.params.items()}
        flags = {k: v.requires_grad for k, v in host.params.items()}
        ae = build_autoencoder(host, 2, 4, seed=0)
        train_autoencoder(AugmentedNetwork(host, ae), synthetic_dataset("bars", 40, 0),
                          AETrainConfig(epochs=1, batch_size=20))
        for k, v in host.params.items():
            assert v.data.tobytes() == before[k].tobytes()
            assert v.requires_grad == flags[k] and v.grad is None

    def test_inserted_accuracy_close_to_host(self, bars_aug, bars_data):
        from causal_probe.nets import evaluate

        test = bars_data[1]
        assert evaluate(bars_aug, test)["accuracy"] >= evaluate(bars_aug.host, test)["accuracy"] - 0.05


class TestModes:
    def test_passthrough_is_host_bitwise(self, bars_aug, rng):
        x = rng.uniform(size=(6, 1, 8, 8))
        a = bars_aug.with_mode("passthrough").forward(x).data
        assert a.tobytes() == bars_aug.host.forward(x).data.tobytes()

    def test_bottleneck_shape_and_sign(self, bars_aug, rng):
        z = bottleneck_activations(bars_aug, rng.uniform(size=(5, 1, 8, 8)))
        assert z.shape == (5, 4, 8, 8) and np.all(z.data >= 0)

    def test_bottleneck_deterministic(self, bars_aug, rng):
        x = rng.uniform(size=(5, 1, 8, 8))
        assert bottleneck_activations(bars_aug, x).data.tobytes() == bottleneck_activations(bars_aug, x).data.tobytes()

    def test_bottleneck_needs_inserted(self, bars_aug):
        with pytest.raises(ContractError):
            bars_aug.with_mode("passthrough").bottleneck(np.zeros((1, 1, 8, 8)))


def test_checkpoint_roundtrip(tmp_path, bars_aug, rng):
    save_autoencoder(bars_aug.ae, tmp_path / "ae.ckpt")
    back = load_autoencoder(tmp_path / "ae.ckpt")
    x = rng.uniform(size=(3, 1, 8, 8))
    a = AugmentedNetwork(bars_aug.host, back).forward(x).data
    assert a.tobytes() == bars_aug.forward(x).data.tobytes()
    assert back.lambdas == bars_aug.ae.lambdas
