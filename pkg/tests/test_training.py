import copy
import itertools
import math
import shutil

import numpy as np
import pytest
import torch

from gqa.config import TrainConfig, make_config
from gqa.errors import DataError, StagingError
from gqa.manifest import Manifest
from gqa.pipeline import compute_pmos, synth
from gqa.shapes import make_reference
from gqa.model import GQANet, ModelConfig
from gqa.training import (AdamState, PatchBank, adam_step, calibrate_index, compute_features, finetune_scores, listmle_grad,
                          listmle_loss, listmle_torch, new_model, pretrain_mpfe, train_lrl)


def listmle_direct(s):
    """Product of Plackett-Luce choice probabilities, written out."""
    p = 1.0
    for i in range(len(s)):
        p *= math.exp(s[i]) / sum(math.exp(x) for x in s[i:])
    return -math.log(p)


class TestListMLE:
    @pytest.mark.parametrize("k", [2, 3, 5, 11])
    def test_equal_scores(self, k):
        assert abs(listmle_loss(np.full(k, 0.37)) - math.log(math.factorial(k))) <= 1e-9

    def test_two(self):
        assert listmle_loss([0.0, 0.0]) == pytest.approx(0.6931, abs=1e-4)

    def test_direct_oracle(self):
        assert listmle_loss([2.0, 1.0, 0.0]) == pytest.approx(listmle_direct([2.0, 1.0, 0.0]), abs=1e-12)
        assert listmle_loss([2.0, 1.0, 0.0]) == pytest.approx(0.7209, abs=1e-4)

    def test_ground_truth_order(self):
        s = np.array([0.1, 2.0, -1.0])
        assert listmle_loss(s, y=[1, 0, 2]) == pytest.approx(listmle_direct([2.0, 0.1, -1.0]), abs=1e-12)

    def test_large_scores_stable(self):
        assert math.isfinite(listmle_loss([1000.0, -1000.0, 500.0]))

    def test_nonfinite(self):
        with pytest.raises(DataError):
            listmle_loss([0.0, np.inf])

    def test_grad_finite_difference(self):
        rng = np.random.default_rng(0)
        h = 1e-5  # near the cube root of machine epsilon: balances truncation and rounding
        for _ in range(100):
            s = rng.normal(size=11)
            g = listmle_grad(s)
            fd = np.array([(listmle_loss(s + h * e) - listmle_loss(s - h * e)) / (2 * h) for e in np.eye(11)])
            rel = np.abs(fd - g) / np.maximum(np.maximum(np.abs(fd), np.abs(g)), 1e-3)
            assert rel.max() <= 1e-6

    def test_grad_examples(self):
        np.testing.assert_allclose(listmle_grad([0.0, 0.0]), [-0.5, 0.5], atol=1e-15)
        rng = np.random.default_rng(1)
        for _ in range(20):
            assert abs(listmle_grad(rng.normal(size=7)).sum()) <= 1e-12

    def test_grad_with_order(self):
        s = np.array([0.3, -0.2, 1.1, 0.0])
        y = [2, 0, 3, 1]
        h = 1e-6
        fd = [(listmle_loss(s + h * e, y) - listmle_loss(s - h * e, y)) / (2 * h) for e in np.eye(4)]
        np.testing.assert_allclose(listmle_grad(s, y), fd, rtol=1e-6, atol=1e-9)

    def test_shift_invariance(self):
        s = np.array([0.5, -1.0, 2.0, 0.0])
        assert listmle_loss(s + 17.25) == pytest.approx(listmle_loss(s), abs=1e-12)

    def test_sorted_scores_beat_every_other_arrangement(self):
        vals = np.array([3.0, 1.5, 0.2, -1.0])
        losses = {p: listmle_loss(vals[list(p)]) for p in itertools.permutations(range(4))}
        assert min(losses, key=losses.get) == (0, 1, 2, 3)

    def test_torch_matches_numpy(self):
        rng = np.random.default_rng(2)
        s = rng.normal(size=(5, 11))
        t = torch.tensor(s, requires_grad=True)
        loss = listmle_torch(t)
        np.testing.assert_allclose(loss.detach().numpy(), [listmle_loss(r) for r in s], atol=1e-12)
        loss.sum().backward()
        np.testing.assert_allclose(t.grad.numpy(), [listmle_grad(r) for r in s], atol=1e-12)


class TestAdam:
    def test_first_step_is_sign(self):
        cfg = TrainConfig(lr=0.01)
        p = {"w": torch.tensor([1.0, 2.0, -3.0], dtype=torch.float64)}
        g = {"w": torch.tensor([0.5, -2.0, 1e-3], dtype=torch.float64)}
        adam_step(p, g, AdamState(), cfg)
        np.testing.assert_allclose(p["w"].numpy(), [0.99, 2.01, -3.01], atol=1e-6)

    def test_zero_gradient(self):
        cfg = TrainConfig(lr=0.01)
        p = {"w": torch.tensor([1.0, 2.0])}
        state = AdamState()
        adam_step(p, {"w": torch.tensor([1.0, -1.0])}, state, cfg)
        before = p["w"].clone()
        m_before = state.m["w"].clone()
        # moment decay alone still moves the parameter; with zero moments it does not
        fresh = {"w": torch.tensor([4.0, 5.0])}
        adam_step(fresh, {"w": torch.zeros(2)}, AdamState(), cfg)
        assert torch.equal(fresh["w"], torch.tensor([4.0, 5.0]))
        adam_step(p, {"w": torch.zeros(2)}, state, cfg)
        torch.testing.assert_close(state.m["w"], 0.9 * m_before)
        assert not torch.equal(p["w"], before)

    def test_against_torch_adam(self):
        rng = np.random.default_rng(3)
        w0 = rng.normal(size=5)
        ours = {"w": torch.tensor(w0)}
        ref = torch.tensor(w0, requires_grad=True)
        opt = torch.optim.Adam([ref], lr=1e-3, betas=(0.9, 0.999), eps=1e-8)
        state = AdamState()
        for _ in range(30):
            g = torch.tensor(rng.normal(size=5))
            adam_step(ours, {"w": g}, state, TrainConfig(lr=1e-3))
            ref.grad = g.clone()
            opt.step()
        torch.testing.assert_close(ours["w"], ref.detach(), rtol=0, atol=1e-12)

    def test_deterministic(self):
        def run():
            p = {"w": torch.zeros(4, dtype=torch.float64)}
            st = AdamState()
            for t in range(10):
                adam_step(p, {"w": torch.arange(4, dtype=torch.float64) - t / 3}, st, TrainConfig(lr=0.1))
            return p["w"]
        assert torch.equal(run(), run())


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy")
    refs = [("r0", make_reference("sphere", 700, 1)), ("r1", make_reference("box", 700, 2)),
            ("r2", make_reference("torus", 700, 3))]
    path, _ = synth(refs, ["GN", "UN"], 4, 5, out)
    cfg = make_config("desk", {
        "levels": 4, "k": 6,
        "patch": {"N": 6, "radius": 0.3, "points": 24},
        "pretrain": {"epochs": 10, "lr": 3e-3, "batch_size": 6},
        "train": {"epochs": 50, "lr": 3e-3},
        "finetune": {"epochs": 30, "lr": 3e-3, "batch_size": 4},
    })
    return path, cfg


class TestStages:
    def test_pretrain_loss_decreases(self, toy):
        path, cfg = toy
        model, rep = pretrain_mpfe(Manifest.load(path), cfg)
        losses = [r["loss"] for r in rep["log"]]
        assert len(losses) == 10
        assert losses[-1] < losses[0]
        assert rep["chance"] == pytest.approx(1 / 5)
        assert set(rep["train_refs"]).isdisjoint(rep["test_refs"])

    def test_first_loss_near_uniform(self, toy):
        path, cfg = toy
        cfg = copy.deepcopy(cfg)
        cfg.pretrain.epochs = 1
        model = new_model(cfg)
        torch.nn.init.zeros_(model.classifier[-1].weight)
        _, rep = pretrain_mpfe(Manifest.load(path), cfg, model=model)
        assert abs(rep["log"][0]["loss"] - math.log(5)) < 0.1

    def test_lrl_freezes_mpfe_and_improves(self, toy):
        path, cfg = toy
        m = Manifest.load(path)
        model, _ = pretrain_mpfe(m, cfg)
        mpfe_before = {n: p.detach().clone() for n, p in model.named_group("mpfe").items()}
        cls_before = {n: p.detach().clone() for n, p in model.named_group("classifier").items()}
        model, rep = train_lrl(m, model, cfg)
        for n, p in model.named_group("mpfe").items():
            assert torch.equal(p, mpfe_before[n]), n
        for n, p in model.named_group("classifier").items():
            assert torch.equal(p, cls_before[n]), n
        losses = [r["loss"] for r in rep["log"]]
        assert losses[-1] < losses[0]
        assert rep["ndcg_train"] >= rep["ndcg_train_before"]

    def test_lrl_deterministic(self, toy):
        path, cfg = toy
        m = Manifest.load(path)
        base, _ = pretrain_mpfe(m, cfg)
        a, _ = train_lrl(m, copy.deepcopy(base), cfg)
        b, _ = train_lrl(m, copy.deepcopy(base), cfg)
        for (n, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
            assert torch.equal(p, q), n

    def test_cached_features_match_fresh(self, toy):
        path, cfg = toy
        m = Manifest.load(path)
        model = new_model(cfg)
        bank = PatchBank(m, cfg, model.dtype)
        feats = compute_features(model, bank, m.lists)
        lst = m.lists[0]
        with torch.no_grad():
            direct = model.mpfe(bank.list_patches(lst))
        assert torch.equal(feats[lst.id], direct)

    def test_patch_bank_shares_anchors(self, toy):
        path, cfg = toy
        m = Manifest.load(path)
        bank = PatchBank(m, cfg)
        gn = next(lst for lst in m.lists if lst.dtype == "GN")
        un = next(lst for lst in m.lists if lst.dtype == "UN" and lst.reference == gn.reference)
        assert bank.anchors(gn.reference) is bank.anchors(un.reference)
        # pristine item is identical in both lists
        assert torch.equal(bank.patches(gn, gn.levels[0]), bank.patches(un, un.levels[0]))

    def test_missing_model(self, toy):
        path, cfg = toy
        with pytest.raises(StagingError):
            train_lrl(Manifest.load(path), None, cfg)
        with pytest.raises(StagingError):
            finetune_scores(Manifest.load(path), None, cfg)

    def test_finetune_needs_labels(self, toy):
        path, cfg = toy
        with pytest.raises(DataError, match="pseudo-MOS"):
            finetune_scores(Manifest.load(path), new_model(cfg), cfg)

    def test_finetune_reduces_error(self, toy, tmp_path):
        path, cfg = toy
        shutil.copytree(path.parent, tmp_path / "ds")
        m = compute_pmos(tmp_path / "ds" / path.name)
        model, _ = pretrain_mpfe(m, cfg)
        mpfe_before = {n: p.detach().clone() for n, p in model.named_group("mpfe").items()}
        model, rep = finetune_scores(m, model, cfg)
        losses = [r["loss"] for r in rep["log"]]
        assert losses[-1] < losses[0]
        assert rep["after"]["train"]["RMSE"] < rep["before"]["train"]["RMSE"]
        for n, p in model.named_group("mpfe").items():
            assert torch.equal(p, mpfe_before[n]), n


def test_calibration_is_exact_affine_map():
    model = GQANet(ModelConfig(k=4), seed=11, dtype=torch.float64)
    g = torch.Generator().manual_seed(0)
    feats = torch.randn(9, 5, 64, generator=g, dtype=torch.float64)
    labels = torch.linspace(0.5, 1.0, 9, dtype=torch.float64)
    before = model.index_from_features(feats).detach()
    scale, shift = calibrate_index(model, feats, labels)
    after = model.index_from_features(feats).detach()
    torch.testing.assert_close(after, scale * before + shift, rtol=0, atol=1e-12)
    A = np.c_[before.numpy(), np.ones(9)]
    resid = after.numpy() - labels.numpy()
    # least-squares optimality: residual orthogonal to the design columns
    np.testing.assert_allclose(A.T @ resid, 0, atol=1e-10)
