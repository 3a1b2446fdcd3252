import math

import pytest
import torch

from advface.facerec import (
    EnsembleSpec,
    TrainingDiverged,
    VictimModelSpec,
    VictimTrainConfig,
    angular_margin_psi,
    build_victim,
    deepid_loss,
    embed_batch,
    load_victim,
    model_fingerprint,
    save_victim,
    sphereface_loss,
    train_victim,
)

from conftest import central_fd, rel_error


def small_spec(**kw):
    base = dict(family="resnet_style", depth_blocks=2, embed_dim=16, width=8, input_size=(32, 32, 3))
    base.update(kw)
    return VictimModelSpec(**base)


class TestBuildVictim:
    def test_shape_and_norm(self):
        model = build_victim(VictimModelSpec("resnet_style", 4, "sphereface", 128, 0, (64, 64, 3)))
        out = model(torch.rand(2, 3, 64, 64))
        assert out.shape == (2, 128)
        assert torch.allclose(out.norm(dim=1), torch.ones(2), atol=1e-5)

    def test_inception_family(self):
        model = build_victim(small_spec(family="inception_style", depth_blocks=3))
        assert model(torch.rand(3, 3, 32, 32)).shape == (3, 16)

    def test_same_seed_same_weights(self):
        a, b = build_victim(small_spec()), build_victim(small_spec())
        for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
            assert ka == kb and torch.equal(va, vb)

    def test_seed_changes_weights(self):
        a, b = build_victim(small_spec(init_seed=0)), build_victim(small_spec(init_seed=1))
        assert any(not torch.equal(va, vb) for va, vb in zip(a.state_dict().values(), b.state_dict().values()))
        assert model_fingerprint(a) != model_fingerprint(b)

    def test_build_does_not_touch_global_rng(self):
        torch.manual_seed(5)
        expected = torch.rand(3)
        torch.manual_seed(5)
        build_victim(small_spec())
        assert torch.equal(torch.rand(3), expected)

    def test_unsupported_family(self):
        with pytest.raises(ValueError):
            build_victim(small_spec(family="vit"))

    @pytest.mark.parametrize("kw", [dict(depth_blocks=0), dict(embed_dim=4), dict(loss="arcface")])
    def test_invalid_spec(self, kw):
        with pytest.raises(ValueError):
            small_spec(**kw)

    def test_ensemble_members_differ(self):
        ens = EnsembleSpec.seeds_of(small_spec(), [0, 1, 2])
        assert ens.name == "RN-SF-3"
        x = torch.rand(4, 3, 32, 32)
        embs = [embed_batch(build_victim(m), x) for m in ens.members]
        assert not torch.allclose(embs[0], embs[1]) and not torch.allclose(embs[1], embs[2])

    def test_ensemble_requires_shared_shape(self):
        with pytest.raises(ValueError):
            EnsembleSpec((small_spec(), small_spec(embed_dim=32)))

    def test_checkpoint_roundtrip(self, tmp_path):
        model = build_victim(small_spec(init_seed=3))
        save_victim(model, tmp_path / "v.pt")
        back = load_victim(tmp_path / "v.pt")
        assert back.spec == model.spec
        assert model_fingerprint(back) == model_fingerprint(model)


class TestEmbedBatch:
    def test_purity(self):
        model = build_victim(small_spec())
        x = torch.rand(1, 3, 32, 32).repeat(3, 1, 1, 1)
        e = embed_batch(model, x)
        assert torch.equal(e[0], e[1]) and torch.equal(e[1], e[2])

    def test_batch_independence(self):
        model = build_victim(small_spec())
        model.train()
        x = torch.rand(8, 3, 32, 32)
        full = embed_batch(model, x)
        single = embed_batch(model, x[3:4])
        assert torch.equal(full[3], single[0])
        assert model.training  # mode restored

    def test_unit_norm_100_images(self):
        model = build_victim(small_spec())
        e = embed_batch(model, torch.rand(100, 3, 32, 32))
        assert ((e.norm(dim=1) - 1).abs() <= 1e-5).all()

    def test_wrong_size(self):
        with pytest.raises(ValueError):
            embed_batch(build_victim(small_spec()), torch.rand(2, 3, 16, 16))

    def test_cosine_distance_extremes(self):
        e = embed_batch(build_victim(small_spec()), torch.rand(5, 3, 32, 32)).double()
        assert torch.allclose(1 - (e * e).sum(1), torch.zeros(5, dtype=torch.float64), atol=1e-6)
        assert torch.allclose(1 - (e * -e).sum(1), 2 * torch.ones(5, dtype=torch.float64), atol=1e-6)


class TestSphereFace:
    def test_normalized_softmax_limit(self):
        w = torch.eye(2)
        loss = sphereface_loss(w[:1], torch.tensor([0]), w, margin=1.0, scale=1.0)
        assert loss.item() == pytest.approx(-math.log(math.e / (math.e + 1)), abs=1e-6)
        assert loss.item() == pytest.approx(0.3133, abs=1e-4)

    def test_orthogonal_embedding_uniform(self):
        w = torch.eye(4)[:3]
        emb = torch.eye(4)[3:]
        loss = sphereface_loss(emb, torch.tensor([1]), w, margin=1.0, scale=7.0)
        assert loss.item() == pytest.approx(math.log(3), abs=1e-6)

    def test_psi_continuous_and_decreasing(self):
        theta = torch.linspace(0, math.pi, 2001, dtype=torch.float64)
        for m in (1, 2, 3, 4):
            psi = angular_margin_psi(torch.cos(theta), m)
            assert (psi[1:] <= psi[:-1] + 1e-9).all()
            assert (psi[1:] - psi[:-1]).abs().max() < 0.05

    def test_margin_monotone(self):
        g = torch.Generator().manual_seed(0)
        w = torch.randn(5, 16, generator=g, dtype=torch.float64)
        labels = torch.tensor([2])
        emb = w[2:3] + 0.3 * torch.randn(1, 16, generator=g, dtype=torch.float64)
        cos = torch.nn.functional.normalize(emb, dim=1) @ torch.nn.functional.normalize(w, dim=1).T
        assert int(cos.argmax()) == 2  # correctly classified
        losses = [sphereface_loss(emb, labels, w, margin=m, scale=8.0).item() for m in (1, 1.5, 2, 2.5, 3, 4)]
        assert all(b >= a - 1e-12 for a, b in zip(losses, losses[1:]))

    def test_nan_rejected(self):
        with pytest.raises(FloatingPointError):
            sphereface_loss(torch.full((1, 4), float("nan")), torch.tensor([0]), torch.eye(4))

    @pytest.mark.parametrize("margin,lam", [(1.0, 0.0), (2.0, 0.0), (2.0, 5.0), (3.0, 1.0)])
    def test_gradient_fd(self, margin, lam):
        g = torch.Generator().manual_seed(1)
        w = torch.randn(3, 6, generator=g, dtype=torch.float64)
        emb = torch.nn.functional.normalize(torch.randn(4, 6, generator=g, dtype=torch.float64), dim=1)
        labels = torch.tensor([0, 1, 2, 1])
        emb.requires_grad_(True)
        sphereface_loss(emb, labels, w, margin, 4.0, lam).backward()
        fd = central_fd(lambda: sphereface_loss(emb.detach(), labels, w, margin, 4.0, lam), emb.data)
        assert rel_error(emb.grad, fd) < 1e-3


class TestDeepID:
    def test_single_class_zero(self):
        loss = deepid_loss(torch.randn(3, 4), torch.zeros(3, dtype=torch.long), torch.randn(1, 4))
        assert loss.item() == pytest.approx(0.0, abs=1e-7)

    def test_uniform_logits(self):
        loss = deepid_loss(torch.randn(2, 4), torch.tensor([0, 3]), torch.zeros(5, 4))
        assert loss.item() == pytest.approx(math.log(5), abs=1e-6)

    def test_hand_computed(self):
        # logits = emb @ W^T: sample 0 -> [1, 0], sample 1 -> [0.5, 2]
        w = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
        emb = torch.tensor([[1.0, 0.0], [0.5, 2.0]])
        labels = torch.tensor([0, 0])
        l0 = -math.log(math.exp(1) / (math.exp(1) + 1))
        l1 = -math.log(math.exp(0.5) / (math.exp(0.5) + math.exp(2.0)))
        assert deepid_loss(emb, labels, w).item() == pytest.approx((l0 + l1) / 2, abs=1e-6)

    def test_gradient_fd(self):
        g = torch.Generator().manual_seed(2)
        w = torch.randn(3, 6, generator=g, dtype=torch.float64)
        b = torch.randn(3, generator=g, dtype=torch.float64)
        emb = torch.randn(4, 6, generator=g, dtype=torch.float64, requires_grad=True)
        labels = torch.tensor([0, 2, 1, 1])
        deepid_loss(emb, labels, w, b).backward()
        fd = central_fd(lambda: deepid_loss(emb.detach(), labels, w, b), emb.data)
        assert rel_error(emb.grad, fd) < 1e-3


class TestTrainVictim:
    def data(self):
        g = torch.Generator().manual_seed(0)
        return torch.rand(24, 3, 32, 32, generator=g), torch.arange(24) % 4

    def test_zero_steps_is_init(self):
        x, y = self.data()
        model, losses = train_victim(small_spec(), x, y, VictimTrainConfig(steps=0))
        assert losses == []
        assert model_fingerprint(model) == model_fingerprint(build_victim(small_spec()))

    @pytest.mark.parametrize("loss", ["sphereface", "deepid"])
    def test_short_run_reduces_loss(self, loss, tmp_path):
        x, y = self.data()
        cfg = VictimTrainConfig(steps=60, batch_size=24, lr=3e-3, flip=False, crop_scale=(1.0, 1.0),
                                crop_ratio=(1.0, 1.0))
        model, losses = train_victim(small_spec(loss=loss), x, y, cfg, checkpoint=tmp_path / "v.pt")
        assert sum(losses[-10:]) < sum(losses[:10])
        assert not model.training
        assert model_fingerprint(load_victim(tmp_path / "v.pt")) == model_fingerprint(model)

    def test_divergence_aborts_with_last_good(self, tmp_path):
        x, y = self.data()
        x[0, 0, 0, 0] = float("nan")
        cfg = VictimTrainConfig(steps=5, batch_size=24)
        with pytest.raises(TrainingDiverged) as info:
            train_victim(small_spec(), x, y, cfg, checkpoint=tmp_path / "v.pt")
        assert info.value.last_good_state is not None
        assert (tmp_path / "v.pt").exists()
