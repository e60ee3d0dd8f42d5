import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from gqa.errors import DataError
from gqa.model import (EdgeConv, GQANet, ModelConfig, as_tensor, gqanet_forward, knn_graph, load_checkpoint,
                       model_index, save_checkpoint)
from gqa.patch import PatchSet
from gqa.training import listmle_torch

from fdcheck import fd_check


def edgeconv_oracle(x, layer, graph=None):
    """Loop transcription: max over the k nearest others of act(W [f_i; f_j - f_i] + b)."""
    x = x.detach().numpy()
    g = x if graph is None else graph.detach().numpy()
    W = layer.linear.weight.detach().numpy()
    b = layer.linear.bias.detach().numpy()
    n = len(x)
    k = min(layer.k, n - 1)
    out = np.empty((n, W.shape[0]))
    for i in range(n):
        d = ((g - g[i]) ** 2).sum(1)
        d[i] = np.inf
        nbrs = np.lexsort((np.arange(n), d))[:k]
        vals = []
        for j in nbrs:
            z = W @ np.concatenate([x[i], x[j] - x[i]]) + b
            vals.append(np.where(z > 0, z, layer.slope * z))
        out[i] = np.max(vals, axis=0)
    return out


@pytest.fixture
def small_model():
    cfg = ModelConfig(k=4)
    return GQANet(cfg, seed=3, dtype=torch.float64)


def toy_patches(seed, N=2, n=32):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(N, n, 3, generator=g, dtype=torch.float64) * 0.4 - 0.2


class TestEdgeConv:
    def test_matches_loop_oracle(self):
        torch.manual_seed(0)
        layer = EdgeConv(3, 8, k=5).double()
        x = torch.rand(20, 3, dtype=torch.float64)
        np.testing.assert_allclose(layer(x).detach().numpy(), edgeconv_oracle(x, layer), atol=1e-12)

    def test_graph_features(self):
        torch.manual_seed(1)
        layer = EdgeConv(4, 6, k=3).double()
        x = torch.rand(15, 4, dtype=torch.float64)
        g = torch.rand(15, 2, dtype=torch.float64)
        np.testing.assert_allclose(layer(x, g).detach().numpy(), edgeconv_oracle(x, layer, g), atol=1e-12)

    def test_k_clamped(self):
        layer = EdgeConv(3, 4, k=20).double()
        x = torch.rand(5, 3, dtype=torch.float64)
        np.testing.assert_allclose(layer(x).detach().numpy(), edgeconv_oracle(x, layer), atol=1e-12)

    def test_single_point(self):
        with pytest.raises(DataError):
            EdgeConv(3, 4)(torch.zeros(1, 3))

    def test_knn_graph_excludes_self(self):
        x = torch.rand(2, 10, 3)
        idx = knn_graph(x, 4)
        assert idx.shape == (2, 10, 4)
        assert not (idx == torch.arange(10).view(1, 10, 1)).any()

    def test_batched_equals_single(self):
        layer = EdgeConv(3, 8, k=5).double()
        x = torch.rand(3, 20, 3, dtype=torch.float64)
        batched = layer(x)
        for b in range(3):
            torch.testing.assert_close(batched[b], layer(x[b]), rtol=0, atol=1e-14)


class TestGQANet:
    def test_shapes(self, small_model):
        P = toy_patches(0, N=5)
        assert small_model.mpfe(P).shape == (5, 64)
        assert small_model.classify(small_model.mpfe(P)).shape == (5, 11)
        assert small_model(P).shape == ()

    def test_patch_permutation(self):
        model = GQANet(seed=1)
        P = torch.rand(16, 64, 3) * 0.4 - 0.2
        base = model(P)
        perm = torch.randperm(16)
        assert abs((model(P[perm]) - base).item()) <= 1e-6

    def test_point_permutation(self):
        model = GQANet(seed=1)
        P = torch.rand(16, 64, 3) * 0.4 - 0.2
        base = model(P)
        shuffled = torch.stack([p[torch.randperm(64)] for p in P])
        assert abs((model(shuffled) - base).item()) <= 1e-6

    def test_duplicated_patches(self, small_model):
        P = toy_patches(2, N=3)
        assert small_model(torch.cat([P, P])).item() == pytest.approx(small_model(P).item(), abs=1e-12)

    def test_convexity_and_positive_weights(self, small_model):
        feats = small_model.mpfe(toy_patches(4, N=8))
        idx = small_model.patch_index(feats)
        w = small_model.patch_weight(feats)
        assert (w > 0).all()
        I = small_model.index_from_features(feats)
        assert idx.min() - 1e-12 <= I <= idx.max() + 1e-12

    def test_zero_feature_weight(self, small_model):
        w = small_model.patch_weight(torch.zeros(1, 64, dtype=torch.float64))
        assert w.item() == pytest.approx(math.log(2.0), abs=1e-12)
        assert small_model.patch_index(torch.zeros(1, 64, dtype=torch.float64)).item() == 0.0

    def test_uniform_weights(self, small_model):
        feats = small_model.mpfe(toy_patches(5, N=4))
        mean = small_model.patch_index(feats).mean()
        assert small_model.index_from_features(feats, uniform_weights=True).item() == pytest.approx(mean.item())

    def test_fresh_classifier_loss(self):
        model = GQANet(seed=0, dtype=torch.float64)
        torch.nn.init.zeros_(model.classifier[-1].weight)
        logits = model.classify(model.mpfe(toy_patches(6, N=4)))
        loss = F.cross_entropy(logits, torch.zeros(4, dtype=torch.long))
        assert loss.item() == pytest.approx(math.log(11), abs=1e-12)

    def test_fuzz_finite(self):
        model = GQANet(seed=2)
        g = torch.Generator().manual_seed(0)
        feats = torch.randn(1000, 64, generator=g) * 5
        assert torch.isfinite(model.patch_index(feats)).all()
        assert torch.isfinite(model.patch_weight(feats)).all()
        assert (model.patch_weight(feats) > 0).all()
        assert torch.isfinite(model.classify(feats)).all()

    def test_seeded_init(self):
        a, b = GQANet(seed=5), GQANet(seed=5)
        for (n, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
            assert torch.equal(p, q), n
        assert not torch.equal(GQANet(seed=6).h1.linear.weight, a.h1.linear.weight)

    def test_groups_partition(self, small_model):
        names = set(dict(small_model.named_parameters()))
        groups = [set(small_model.named_group(g)) for g in ("mpfe", "heads", "classifier")]
        assert set.union(*groups) == names
        assert sum(len(g) for g in groups) == len(names)


def test_model_index():
    assert model_index([1.0, 3.0], [1.0, 1.0]) == 2.0
    assert model_index([1.0, 3.0], [3.0, 1.0]) == 1.5
    with pytest.raises(DataError):
        model_index([1.0], [0.0])
    with pytest.raises(DataError):
        model_index([1.0, 2.0], [1.0])


class _Classifying(torch.nn.Module):
    def __init__(self, net):
        super().__init__()
        self.net = net

    def forward(self, patches):
        return self.net.classify(self.net.mpfe(patches))


def _assert_fd(report):
    assert report.ok, report.failures[:5]
    # kinks are rare measure-zero events; a flood of them means a broken graph
    assert len(report.kinks) <= 0.005 * report.checked, len(report.kinks)


class TestGradients:
    """Central differences (eps 1e-5, 64-bit) on every coordinate of every
    parameter the loss reaches, 2 patches of 32 points, k = 4."""

    def test_listmle_all_trainable(self):
        model = GQANet(ModelConfig(k=4), seed=7, dtype=torch.float64)
        items = torch.stack([toy_patches(s) * (1 + 0.3 * s) for s in range(2)])
        rep = fd_check(model, listmle_torch, items)
        assert rep.checked > 12000
        _assert_fd(rep)

    def test_mse_all_trainable(self):
        model = GQANet(ModelConfig(k=4), seed=8, dtype=torch.float64)
        items = torch.stack([toy_patches(10 + s) for s in range(2)])
        target = torch.tensor([0.9, 0.2], dtype=torch.float64)
        _assert_fd(fd_check(model, lambda out: ((out - target) ** 2).mean(), items))

    def test_classifier_cross_entropy(self):
        model = GQANet(ModelConfig(k=4), seed=9, dtype=torch.float64)
        target = torch.tensor([3, 7])
        rep = fd_check(_Classifying(model), lambda out: F.cross_entropy(out, target), toy_patches(20))
        _assert_fd(rep)

    def test_unused_classifier_gets_zero(self):
        model = GQANet(ModelConfig(k=4), seed=7, dtype=torch.float64)
        model(toy_patches(0)).backward()
        for p in model.classifier.parameters():
            assert p.grad is None or not p.grad.any()


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path, small_model):
        P = toy_patches(3, N=4)
        before = small_model(P)
        save_checkpoint(small_model, tmp_path / "m.npz", "train", {"note": 1})
        model, meta = load_checkpoint(tmp_path / "m.npz")
        assert meta["stage"] == "train" and meta["extra"] == {"note": 1}
        assert model.config == small_model.config
        assert model(P).item() == before.item()
        for (n, p), (_, q) in zip(small_model.named_parameters(), model.named_parameters()):
            assert torch.equal(p, q), n

    def test_float32_round_trip(self, tmp_path):
        model = GQANet(seed=4)
        save_checkpoint(model, tmp_path / "m.npz", "pretrain")
        back, _ = load_checkpoint(tmp_path / "m.npz")
        assert back.dtype == torch.float32
        P = torch.rand(3, 32, 3)
        assert back(P).item() == model(P).item()

    def test_garbage(self, tmp_path):
        p = tmp_path / "bad.npz"
        p.write_bytes(b"not a checkpoint")
        with pytest.raises(DataError):
            load_checkpoint(p)

    def test_wrong_container(self, tmp_path):
        p = tmp_path / "other.npz"
        np.savez(p, x=np.zeros(3))
        with pytest.raises(DataError):
            load_checkpoint(p)


def test_functional_forward(small_model):
    P = toy_patches(1, N=3).numpy()
    ps = PatchSet(P, np.zeros((3, 3)), np.zeros(3, dtype=int))
    assert gqanet_forward(ps, small_model) == pytest.approx(small_model(as_tensor(P)).item(), abs=0)
