import json
import zipfile

import numpy as np
import pytest
import torch
import torch.nn as nn

from salm2.cma import CrossModalAttention
from salm2.errors import CheckpointVersionError, ConfigError, ContractError, CorruptCheckpointError
from salm2.model import (FORMAT_VERSION, ModelConfig, SalM2, conv2d_macs, count_trainable_params, estimate_flops,
                         estimate_macs, load_checkpoint, param_breakdown, read_checkpoint, save_checkpoint)
from salm2.ssm import MambaBlock


@pytest.fixture(scope="module")
def model():
    return SalM2().eval()


@pytest.fixture(scope="module")
def batch():
    g = torch.Generator().manual_seed(5)
    return torch.randn(2, 3, 256, 256, generator=g)


class TestForward:
    def test_range_and_shape(self, model, batch):
        out = model(batch)
        assert out.shape == (2, 1, 256, 256)
        assert out.min() > 0 and out.max() < 1

    def test_deterministic(self, model, batch):
        assert torch.equal(model(batch), model(batch))

    def test_semantic_ablation_at_init(self, model, batch):
        assert model.cma.gamma.item() == 0.0
        assert torch.equal(model(batch, semantic=True), model(batch, semantic=False))

    def test_semantic_ablation_diverges_once_gamma_moves(self, batch):
        m = SalM2().eval()
        with torch.no_grad():
            m.cma.gamma.fill_(0.5)
        assert not torch.equal(m(batch, semantic=True), m(batch, semantic=False))

    @pytest.mark.parametrize("shape", [(1, 3, 128, 128), (1, 3, 256, 255), (1, 1, 256, 256), (3, 256, 256)])
    def test_wrong_input(self, model, shape):
        with pytest.raises(ContractError, match="256"):
            model(torch.randn(*shape))

    def test_seeded_construction(self):
        a, b = SalM2(ModelConfig(seed=3)), SalM2(ModelConfig(seed=3))
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb and torch.equal(pa, pb)

    def test_construction_leaves_global_rng_alone(self):
        torch.manual_seed(11)
        expected = torch.rand(3)
        torch.manual_seed(11)
        SalM2()
        assert torch.equal(torch.rand(3), expected)


class TestConfig:
    def test_indivisible_size(self):
        with pytest.raises(ConfigError):
            ModelConfig(input_size=250)

    def test_semantic_width(self):
        with pytest.raises(ConfigError):
            ModelConfig(semantic_dim=770)

    def test_round_trip(self):
        cfg = ModelConfig(seed=4, branch_split=[[16, 8, 4, 4], [24, 12, 6, 6], [32, 16, 8, 8]])
        assert ModelConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == ModelConfig(
            seed=4, branch_split=((16, 8, 4, 4), (24, 12, 6, 6), (32, 16, 8, 8)))

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            ModelConfig.from_dict({"depth": 3})


class TestParameters:
    def test_budget(self, model):
        assert count_trainable_params(model) < 100_000

    def test_breakdown_sums(self, model):
        parts = param_breakdown(model)
        total = parts.pop("total")
        assert sum(parts.values()) == total
        assert parts["cma"] == 1
        assert parts["projector"] == 3136
        assert parts["semantic_encoder"] == 0

    def test_single_conv(self):
        assert count_trainable_params(nn.Conv2d(3, 8, 3)) == 224

    def test_frozen_encoder_excluded(self, model):
        assert all(not p.requires_grad for p in model.encoder.parameters())


def hook_macs(model: SalM2, x: torch.Tensor) -> int:
    """Independent MAC count from forward hooks on the executed modules."""
    total = [0]

    def conv2d(mod, inp, out):
        total[0] += out[0].numel() * (mod.in_channels // mod.groups) * mod.kernel_size[0] * mod.kernel_size[1]

    def conv1d(mod, inp, out):
        length = inp[0].shape[-1]  # causal trim keeps the input length
        total[0] += length * mod.out_channels * (mod.in_channels // mod.groups) * mod.kernel_size[0]

    def linear(mod, inp, out):
        total[0] += out[0].numel() * mod.in_features

    def mamba(mod, inp, out):
        total[0] += 4 * inp[0].shape[1] * mod.d_inner * mod.d_state

    def cma(mod, inp, out):
        sem, img = inp
        c = img.shape[1]
        total[0] += c * c * (sem[0, 0].numel() + img[0, 0].numel())

    kinds = {nn.Conv2d: conv2d, nn.Conv1d: conv1d, nn.Linear: linear, MambaBlock: mamba, CrossModalAttention: cma}
    handles = []
    for mod in model.modules():
        if mod is model.encoder or any(mod is m for m in model.encoder.modules()):
            continue
        for kind, fn in kinds.items():
            if type(mod) is kind:
                handles.append(mod.register_forward_hook(fn))
    try:
        with torch.no_grad():
            model(x)
    finally:
        for h in handles:
            h.remove()
    return total[0]


class TestFlops:
    def test_single_conv_example(self):
        assert 2 * conv2d_macs(3, 8, 3, 128, 128) == 7_077_888

    def test_trend(self, model):
        assert estimate_flops(model, 512) > estimate_flops(model, 256)

    def test_flops_are_twice_macs(self, model):
        assert estimate_flops(model) == 2 * estimate_macs(model)["total"]

    def test_matches_hook_count(self, model):
        assert estimate_macs(model)["total"] == hook_macs(model, torch.randn(1, 3, 256, 256))

    def test_matches_hook_count_at_512(self, model):
        big = SalM2(ModelConfig(input_size=512))
        assert estimate_macs(model, 512)["total"] == hook_macs(big, torch.randn(1, 3, 512, 512))

    def test_bad_size(self, model):
        with pytest.raises(ConfigError):
            estimate_flops(model, 100)


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path, batch):
        m = SalM2(ModelConfig(seed=2))
        with torch.no_grad():
            m.cma.gamma.fill_(0.25)
        save_checkpoint(m, tmp_path / "c.zip", step=7, metrics={"cc": 0.5})
        loaded = load_checkpoint(tmp_path / "c.zip")
        for (na, pa), (nb, pb) in zip(m.named_parameters(), loaded.named_parameters()):
            assert na == nb and torch.equal(pa, pb)
        assert not loaded.training
        m.eval()
        assert torch.equal(m(batch), loaded(batch))
        ckpt = read_checkpoint(tmp_path / "c.zip")
        assert ckpt.step == 7 and ckpt.metrics == {"cc": 0.5}

    def test_archive_layout(self, tmp_path, model):
        save_checkpoint(model, tmp_path / "c.zip")
        with zipfile.ZipFile(tmp_path / "c.zip") as zf:
            assert sorted(zf.namelist()) == ["manifest.json", "weights.bin"]
            manifest = json.loads(zf.read("manifest.json"))
            weights = zf.read("weights.bin")
        assert manifest["format_version"] == FORMAT_VERSION
        assert len(weights) == 4 * count_trainable_params(model)
        entry = next(e for e in manifest["parameters"] if e["name"] == "cma.gamma")
        blob = np.frombuffer(weights[entry["offset"]:entry["offset"] + entry["nbytes"]], dtype="<f4")
        assert blob.tolist() == [0.0]

    def test_bytes_reproducible(self, tmp_path, model):
        save_checkpoint(model, tmp_path / "a.zip")
        save_checkpoint(model, tmp_path / "b.zip")
        assert (tmp_path / "a.zip").read_bytes() == (tmp_path / "b.zip").read_bytes()

    def _rewrite(self, src, dst, manifest_fn=None, weights_fn=None):
        with zipfile.ZipFile(src) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            weights = zf.read("weights.bin")
        if manifest_fn:
            manifest = manifest_fn(manifest)
        if weights_fn:
            weights = weights_fn(weights)
        with zipfile.ZipFile(dst, "w") as zf:
            zf.writestr("manifest.json", json.dumps(manifest))
            zf.writestr("weights.bin", weights)

    def test_truncated_blob(self, tmp_path, model):
        save_checkpoint(model, tmp_path / "c.zip")
        self._rewrite(tmp_path / "c.zip", tmp_path / "t.zip", weights_fn=lambda w: w[:-8])
        with pytest.raises(CorruptCheckpointError):
            load_checkpoint(tmp_path / "t.zip")

    def test_not_an_archive(self, tmp_path):
        (tmp_path / "x.zip").write_bytes(b"garbage")
        with pytest.raises(CorruptCheckpointError):
            load_checkpoint(tmp_path / "x.zip")

    def test_truncated_archive(self, tmp_path, model):
        save_checkpoint(model, tmp_path / "c.zip")
        data = (tmp_path / "c.zip").read_bytes()
        (tmp_path / "cut.zip").write_bytes(data[: len(data) // 2])
        with pytest.raises(CorruptCheckpointError):
            load_checkpoint(tmp_path / "cut.zip")

    def test_version_mismatch(self, tmp_path, model):
        save_checkpoint(model, tmp_path / "c.zip")

        def bump(m):
            m["format_version"] = 2
            return m

        self._rewrite(tmp_path / "c.zip", tmp_path / "v.zip", manifest_fn=bump)
        with pytest.raises(CheckpointVersionError):
            load_checkpoint(tmp_path / "v.zip")

    def test_incompatible_config(self, tmp_path, model):
        save_checkpoint(model, tmp_path / "c.zip")

        def alter(m):
            m["config"]["channel_ladder"] = [8, 16, 24, 32, 48, 96]
            return m

        self._rewrite(tmp_path / "c.zip", tmp_path / "i.zip", manifest_fn=alter)
        with pytest.raises(CheckpointVersionError):
            load_checkpoint(tmp_path / "i.zip")

    def test_resolution_error_at_forward_not_load(self, tmp_path, model):
        save_checkpoint(model, tmp_path / "c.zip")
        loaded = load_checkpoint(tmp_path / "c.zip")
        assert loaded.config.input_size == 256
        with pytest.raises(ContractError, match="256x256"):
            loaded(torch.randn(1, 3, 512, 512))


def test_gradient_completeness():
    m = SalM2()
    m.train()
    g = torch.Generator().manual_seed(9)
    seen_nonzero = {n: False for n, _ in m.named_trainable_parameters()}
    for _ in range(3):
        m.zero_grad(set_to_none=True)
        x = torch.randn(2, 3, 256, 256, generator=g)
        y = torch.rand(2, 1, 256, 256, generator=g)
        nn.functional.binary_cross_entropy(m(x), y).backward()
        for n, p in m.named_trainable_parameters():
            assert p.grad is not None and torch.isfinite(p.grad).all(), n
            seen_nonzero[n] |= bool(p.grad.abs().max() > 0)
        assert m.cma.gamma.grad.abs().item() > 0
    # with gamma at 0 the projector sits behind a zero multiplier
    silent = sorted(n for n, ok in seen_nonzero.items() if not ok)
    assert silent == ["projector.conv.bias", "projector.conv.weight"]
