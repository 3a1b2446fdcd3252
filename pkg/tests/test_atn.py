import pytest
import torch

from advface.atn import AtnArchConfig, build_atn, load_atn, perturb, save_atn

from conftest import central_fd, rel_error


# Independent layer-by-layer parameter tally, written from the layout description
# (not from the module code).
def conv(cin, cout, k, bias=False):
    return cin * cout * k * k + (cout if bias else 0)


def bn(c):
    return 2 * c


def preact(cin, cout, stride=1):
    n = bn(cin) + conv(cin, cout, 3) + bn(cout) + conv(cout, cout, 3)
    if stride != 1 or cin != cout:
        n += conv(cin, cout, 1)
    return n


def up_res(cin, cout):
    # BN-ReLU, 4x4 stride-2 tconv, BN-ReLU, 3x3 tconv, 2x2 stride-2 tconv shortcut
    return bn(cin) + conv(cin, cout, 4) + bn(cout) + conv(cout, cout, 3) + conv(cin, cout, 2)


def cbr(cin, cout, k=3):
    return conv(cin, cout, k) + bn(cout)


def tally(kind, E, D, base, n, channels=3):
    widths = [base * 2 ** min(i, max(n - 2, 0)) for i in range(n)]
    skips = [base] + widths[:-1]
    total = conv(channels, base, 3, bias=True)
    for i in range(n):
        if kind == "resunet":
            total += preact(skips[i], widths[i], 2) + (E[i] - 1) * preact(widths[i], widths[i])
            total += up_res(widths[i], skips[i]) + (D[i] - 1) * preact(skips[i], skips[i])
        else:
            total += cbr(skips[i], widths[i]) + (E[i] - 1) * cbr(widths[i], widths[i])
            total += cbr(widths[i], skips[i], 4) + (D[i] - 1) * cbr(skips[i], skips[i])
        total += conv(2 * skips[i], skips[i], 1)
    return total + bn(base) + conv(base, channels, 3, bias=True)


def n_params(gen):
    return sum(p.numel() for p in gen.parameters())


class TestArchConfig:
    def test_full_scale_config(self):
        arch = AtnArchConfig.full_scale()
        assert arch.encoder_blocks == (1, 1, 2, 3, 5)
        assert arch.decoder_blocks == (1, 1, 1, 1, 1)
        assert arch.widths == [64, 128, 256, 512, 512]
        assert build_atn(arch).skip_connections == 5

    @pytest.mark.parametrize("kw", [
        dict(encoder_blocks=(1, 1), decoder_blocks=(1, 1, 1)),
        dict(encoder_blocks=(1, 0, 1)),
        dict(base_width=2),
        dict(kind="transformer"),
        dict(downsamples=2),
    ])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            AtnArchConfig(**kw)

    def test_json_roundtrip(self):
        arch = AtnArchConfig.desk("unet")
        assert AtnArchConfig.from_json(arch.to_json()) == arch


class TestParamCount:
    def test_tiny_hand_tally(self):
        # stem 112, enc 320, up-block 480, fuse 32, head BN 8 + conv 111
        gen = build_atn(AtnArchConfig("resunet", (1,), (1,), 4, 1))
        assert n_params(gen) == 1063

    @pytest.mark.parametrize("arch", [
        AtnArchConfig("resunet", (1,), (1,), 4, 1),
        AtnArchConfig("resunet", (2, 1), (1, 3), 8, 2),
        AtnArchConfig.desk("resunet"),
        AtnArchConfig.desk("unet"),
        AtnArchConfig("unet", (2, 1, 1), (1, 2, 1), 8, 3),
        AtnArchConfig.full_scale(),
    ])
    def test_matches_tally(self, arch):
        gen = build_atn(arch)
        assert n_params(gen) == tally(arch.kind, arch.encoder_blocks, arch.decoder_blocks,
                                      arch.base_width, arch.downsamples)


class TestGenerator:
    def test_tiny_shape(self):
        gen = build_atn(AtnArchConfig("resunet", (1,), (1,), 4, 1))
        assert gen(torch.rand(2, 3, 8, 8)).shape == (2, 3, 8, 8)

    @pytest.mark.parametrize("kind", ["unet", "resunet"])
    @pytest.mark.parametrize("side", [32, 64, 96])
    def test_shape_preserved(self, kind, side):
        gen = build_atn(AtnArchConfig.desk(kind))
        assert gen(torch.rand(2, 3, side, side)).shape == (2, 3, side, side)

    def test_indivisible_input(self):
        gen = build_atn(AtnArchConfig.desk())
        with pytest.raises(ValueError, match="divisible"):
            gen(torch.rand(1, 3, 36, 36))

    def test_deterministic_seed(self):
        a, b = build_atn(AtnArchConfig.desk(), seed=4), build_atn(AtnArchConfig.desk(), seed=4)
        c = build_atn(AtnArchConfig.desk(), seed=5)
        x = torch.rand(2, 3, 32, 32)
        a.eval(), b.eval(), c.eval()
        assert torch.equal(a(x), b(x))
        assert not torch.equal(a(x), c(x))

    def test_unbounded_output(self):
        gen = build_atn(AtnArchConfig("resunet", (1,), (1,), 4, 1))
        with torch.no_grad():
            gen.head.bias.fill_(5.0)
        assert gen(torch.rand(1, 3, 8, 8)).min() > 4.0

    def test_near_zero_at_init(self):
        gen = build_atn(AtnArchConfig.desk())
        x = torch.rand(4, 3, 64, 64)
        assert (perturb(gen, x, 0.03) - x).abs().max() < 0.03 * 0.2

    def test_checkpoint_roundtrip(self, tmp_path):
        gen = build_atn(AtnArchConfig.desk("unet"), seed=2).eval()
        save_atn(gen, tmp_path / "g.pt", {"eps": 0.03})
        back, header = load_atn(tmp_path / "g.pt")
        assert header["eps"] == 0.03
        x = torch.rand(2, 3, 32, 32)
        assert torch.equal(back(x), gen(x))


class ConstGen(torch.nn.Module):
    def __init__(self, value):
        super().__init__()
        self.value = value

    def forward(self, x):
        return torch.full_like(x, self.value)


class TestPerturb:
    def test_zero_output_identity(self):
        x = torch.rand(3, 3, 8, 8)
        assert torch.equal(perturb(ConstGen(0.0), x, 0.03), x)

    def test_saturated(self):
        x = torch.full((1, 3, 8, 8), 0.5)
        assert torch.allclose(perturb(ConstGen(float("inf")), x, 0.03), torch.full_like(x, 0.53))

    def test_bound_100_images(self):
        gen = build_atn(AtnArchConfig.desk())
        with torch.no_grad():
            gen.head.weight.mul_(1e3)  # push the tanh towards saturation
        x = torch.rand(100, 3, 32, 32)
        with torch.no_grad():
            adv = perturb(gen, x, 0.03)
        # float32 rounding of x + delta can exceed eps by one ulp
        assert (adv - x).abs().max() <= 0.03 + 1e-7
        assert adv.min() >= 0 and adv.max() <= 1

    def test_tanh_strictly_inside(self):
        x = torch.full((1, 3, 8, 8), 0.5, dtype=torch.float64)
        assert ((perturb(ConstGen(10.0), x, 0.03) - x).abs() < 0.03).all()

    def test_deterministic(self):
        gen = build_atn(AtnArchConfig.desk()).eval()
        x = torch.rand(2, 3, 32, 32)
        assert torch.equal(perturb(gen, x, 0.03), perturb(gen, x, 0.03))

    def test_negative_eps(self):
        with pytest.raises(ValueError):
            perturb(ConstGen(0.0), torch.rand(1, 3, 8, 8), -0.1)

    def test_gradient_wrt_theta_fd(self):
        gen = build_atn(AtnArchConfig("resunet", (1,), (1,), 4, 1)).double()
        with torch.no_grad():
            gen.head.weight.normal_(std=0.3)
        g = torch.Generator().manual_seed(0)
        x = torch.rand(2, 3, 8, 8, generator=g, dtype=torch.float64)
        target = torch.rand(2, 3, 8, 8, generator=g, dtype=torch.float64)

        def f():
            return ((perturb(gen, x, 0.3) - target) ** 2).sum()

        for name in ("head.weight", "stem.weight", "decoders.0.conv1.weight"):
            p = dict(gen.named_parameters())[name]
            gen.zero_grad()
            f().backward()
            with torch.no_grad():
                fd = central_fd(f, p.data)
            assert rel_error(p.grad, fd) < 1e-3, name
