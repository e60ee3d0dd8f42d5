"""List-wise rank learning and the staged training protocol.

Stages:

1. ``pretrain_mpfe``: patch-wise distortion-level classification (cross
   entropy over L+1 classes) trains the EdgeConv stack and classifier head.
2. ``train_lrl``: listMLE over whole ranked lists trains the index and
   weight heads with the EdgeConv stack frozen.
3. ``finetune_scores``: mean squared error against pseudo-MOS labels,
   again on the heads only.

Patches are generated once per run and never resampled.  Because the
EdgeConv stack is frozen in stages 2 and 3, its patch features are computed
once and cached; only the heads run inside the optimisation loop.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .config import ExperimentConfig, TrainConfig
from .errors import DataError, StagingError
from .evaluation import ndcg, plcc, ranking_from_scores, score_report
from .model import GQANet, ModelConfig
from .patch import generate_anchors, extract_patches, whole_cloud_patch
from .rng import derive_seed, generator

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# listMLE


def _suffix_logsumexp(s):
    # out[i] = log sum_{j >= i} exp(s[j])
    return np.logaddexp.accumulate(s[::-1])[::-1]


def listmle_loss(scores, y=None) -> float:
    """Negative Plackett-Luce log-likelihood of the ground-truth order ``y``
    (item ids, best first; default: items already in that order)."""
    s = np.asarray(scores, dtype=np.float64)
    if y is not None:
        s = s[np.asarray(y)]
    if not np.isfinite(s).all():
        raise DataError("listMLE scores must be finite")
    return float((_suffix_logsumexp(s) - s).sum())


def listmle_grad(scores, y=None) -> np.ndarray:
    """Analytic gradient of :func:`listmle_loss` with respect to ``scores``."""
    scores = np.asarray(scores, dtype=np.float64)
    order = np.arange(len(scores)) if y is None else np.asarray(y)
    s = scores[order]
    lse = _suffix_logsumexp(s)
    k = len(s)
    g_sorted = np.empty(k)
    for j in range(k):
        # item at position j belongs to suffixes i = 0..j
        g_sorted[j] = -1.0 + np.exp(s[j] - lse[: j + 1]).sum()
    grad = np.empty(k)
    grad[order] = g_sorted
    return grad


def listmle_torch(scores: torch.Tensor) -> torch.Tensor:
    """listMLE for scores already in ground-truth order (best first)."""
    lse = torch.logcumsumexp(scores.flip(-1), dim=-1).flip(-1)
    return (lse - scores).sum(-1)


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, config: TrainConfig) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    c1, c2 = 1 - b1**t, 1 - b2**t
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                g = torch.zeros_like(p)
            m = state.m.setdefault(name, torch.zeros_like(p))
            v = state.v.setdefault(name, torch.zeros_like(p))
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            p.sub_(config.lr * (m / c1) / ((v / c2).sqrt() + config.eps))


def _step(model_params: dict, loss: torch.Tensor, state: AdamState, cfg: TrainConfig):
    for p in model_params.values():
        p.grad = None
    loss.backward()
    adam_step(model_params, {n: p.grad for n, p in model_params.items()}, state, cfg)


# --------------------------------------------------------------------------
# patches and features


class PatchBank:
    """Fixed patch tensors for every cloud of a manifest.

    Anchors come from the list's reference and are shared by all of its
    distorted versions; sampling seeds derive from the run seed, the list id
    and the level, so one run always sees the same patches.
    """

    def __init__(self, manifest, cfg: ExperimentConfig, dtype=torch.float32):
        self.manifest = manifest
        self.cfg = cfg
        self.dtype = dtype
        self._anchors = {}
        self._patches = {}
        self._refs = {}

    def _reference(self, ref_id):
        if ref_id not in self._refs:
            self._refs[ref_id] = self.manifest.load_level_path(self.manifest.reference(ref_id).path)
        return self._refs[ref_id]

    def anchors(self, ref_id):
        if ref_id not in self._anchors:
            ref = self._reference(ref_id)
            n_anchor = min(self.cfg.patch.N, len(ref))
            self._anchors[ref_id] = generate_anchors(ref, n_anchor, derive_seed(self.cfg.seed, "anchors", ref_id))
        return self._anchors[ref_id]

    def patches(self, lst, level_entry) -> torch.Tensor:
        key = level_entry.path
        if key not in self._patches:
            cloud = self.manifest.load_level(level_entry)
            pc = self.cfg.patch
            seed = derive_seed(self.cfg.seed, "patches", key)
            if self.cfg.no_patching:
                ps = whole_cloud_patch(cloud, pc.points, seed)
            else:
                ps = extract_patches(cloud, self.anchors(lst.reference), pc.radius, pc.points, seed)
            self._patches[key] = torch.as_tensor(ps.patches, dtype=self.dtype)
        return self._patches[key]

    def list_patches(self, lst) -> torch.Tensor:
        return torch.stack([self.patches(lst, lv) for lv in lst.levels])


def compute_features(model: GQANet, bank: PatchBank, lists) -> dict:
    """Frozen MPFE features ``(L+1, N, 64)`` keyed by list id."""
    out = {}
    with torch.no_grad():
        for lst in lists:
            out[lst.id] = torch.stack([model.mpfe(bank.patches(lst, lv)) for lv in lst.levels])
    return out


def predict_list_scores(model: GQANet, features: dict, uniform_weights=None) -> dict:
    with torch.no_grad():
        return {lid: model.index_from_features(f, uniform_weights).double().numpy() for lid, f in features.items()}


def mean_ndcg(scores_by_list: dict) -> float:
    if not scores_by_list:
        return float("nan")
    return float(np.mean([ndcg(ranking_from_scores(s)) for s in scores_by_list.values()]))


def _generatable(lists):
    from .distort import EXTERNAL_ONLY

    return [lst for lst in lists if lst.dtype not in EXTERNAL_ONLY]


def split_lists(manifest, tcfg: TrainConfig, seed: int):
    train_refs, test_refs = manifest.split_references(derive_seed(seed, "split"), tcfg.test_fraction)
    return manifest.lists_for(set(train_refs)), manifest.lists_for(set(test_refs)), train_refs, test_refs


def new_model(cfg: ExperimentConfig) -> GQANet:
    mcfg = ModelConfig(k=cfg.k, uniform_weights=cfg.uniform_weights)
    mcfg.classifier_widths = [64, 64, 32, cfg.levels + 1]
    dtype = torch.float64 if cfg.float64 else torch.float32
    return GQANet(mcfg, seed=derive_seed(cfg.seed, "model"), dtype=dtype)


# --------------------------------------------------------------------------
# stage 1: pre-training


def _level_items(lists):
    """Unique (list, level entry) pairs; shared pristine files appear once."""
    seen, items = set(), []
    for lst in lists:
        for lv in lst.levels:
            if lv.path not in seen:
                seen.add(lv.path)
                items.append((lst, lv))
    return items


def classification_accuracy(model, bank, items) -> float:
    if not items:
        return float("nan")
    correct = total = 0
    with torch.no_grad():
        for lst, lv in items:
            pred = model.classify(model.mpfe(bank.patches(lst, lv))).argmax(-1)
            correct += int((pred == lv.level).sum())
            total += pred.numel()
    return correct / total


def _pretrain_batches(by_type, bank, items, batch_size, rng):
    """Shuffled batches of patches that share a distortion type but mix
    levels, so no step sees a single class.  Yields ``(item_ids, patch_ids)``."""
    batches = []
    for dtype in sorted(by_type):
        pairs = np.array([(i, j) for i in by_type[dtype] for j in range(len(bank.patches(*items[i])))])
        pairs = pairs[rng.permutation(len(pairs))]
        batches.extend(pairs[s:s + batch_size] for s in range(0, len(pairs), batch_size))
    for b in rng.permutation(len(batches)):
        yield batches[b][:, 0].tolist(), batches[b][:, 1].tolist()


def pretrain_mpfe(manifest, cfg: ExperimentConfig, model: GQANet | None = None, bank: PatchBank | None = None):
    """Returns ``(model, report)``; report holds the per-epoch log rows and
    train/test patch accuracy."""
    tcfg = cfg.pretrain
    lists = _generatable(manifest.lists)
    if not lists:
        raise DataError("manifest has no generatable lists to derive level labels from")
    model = model or new_model(cfg)
    bank = bank or PatchBank(manifest, cfg, model.dtype)
    train_refs, test_refs = manifest.split_references(derive_seed(cfg.seed, "split"), tcfg.test_fraction)
    train_items = _level_items([lst for lst in lists if lst.reference in train_refs])
    test_items = _level_items([lst for lst in lists if lst.reference in test_refs])
    params = {**model.named_group("mpfe"), **model.named_group("classifier")}
    for name, p in model.named_parameters():
        p.requires_grad_(name in params)
    state = AdamState()
    by_type = {}
    for i, (lst, _) in enumerate(train_items):
        by_type.setdefault(lst.dtype, []).append(i)
    rows = []
    for epoch in range(1, tcfg.epochs + 1):
        rng = generator(tcfg.seed, "pretrain-epoch", epoch)
        losses, correct, total = [], 0, 0
        for item_ids, patch_ids in _pretrain_batches(by_type, bank, train_items, tcfg.batch_size, rng):
            patches = torch.stack([bank.patches(*train_items[i])[j] for i, j in zip(item_ids, patch_ids)])
            target = torch.tensor([train_items[i][1].level for i in item_ids], dtype=torch.long)
            logits = model.classify(model.mpfe(patches))
            loss = F.cross_entropy(logits, target)
            _step(params, loss, state, tcfg)
            losses.append(loss.item())
            correct += int((logits.argmax(-1) == target).sum())
            total += len(target)
        rows.append({"epoch": epoch, "loss": float(np.mean(losses)), "acc_train": correct / total})
        log.info("pretrain epoch %d loss %.4f acc %.3f", epoch, rows[-1]["loss"], rows[-1]["acc_train"])
    for p in model.parameters():
        p.requires_grad_(True)
    report = {
        "log": rows,
        "train_refs": train_refs,
        "test_refs": test_refs,
        "train_accuracy": classification_accuracy(model, bank, train_items),
        "test_accuracy": classification_accuracy(model, bank, test_items),
        "chance": 1.0 / (cfg.levels + 1),
    }
    return model, report


# --------------------------------------------------------------------------
# stage 2: list-wise rank learning


def train_lrl(manifest, model: GQANet, cfg: ExperimentConfig, bank: PatchBank | None = None,
              features: dict | None = None):
    """listMLE training of the heads with a frozen EdgeConv stack.

    Each optimisation step consumes one whole ranked list.  Returns
    ``(model, report)``.
    """
    if model is None:
        raise StagingError("rank training needs a pre-trained model")
    tcfg = cfg.train
    model.config.uniform_weights = cfg.uniform_weights
    train_lists, test_lists, train_refs, test_refs = split_lists(manifest, tcfg, cfg.seed)
    train_lists, test_lists = _generatable(train_lists), _generatable(test_lists)
    if not train_lists:
        raise DataError("no training lists")
    bank = bank or PatchBank(manifest, cfg, model.dtype)
    if features is None:
        features = compute_features(model, bank, train_lists + test_lists)
    train_feats = {lst.id: features[lst.id] for lst in train_lists}
    test_feats = {lst.id: features[lst.id] for lst in test_lists}
    params = model.named_group("heads")
    for name, p in model.named_parameters():
        p.requires_grad_(name in params)
    state = AdamState()
    ids = [lst.id for lst in train_lists]
    rows = []
    ndcg_before = mean_ndcg(predict_list_scores(model, train_feats))
    for epoch in range(1, tcfg.epochs + 1):
        order = generator(tcfg.seed, "lrl-epoch", epoch).permutation(len(ids))
        losses = []
        for i in order:
            scores = model.index_from_features(train_feats[ids[i]])
            loss = listmle_torch(scores)
            _step(params, loss, state, tcfg)
            losses.append(loss.item())
        row = {"epoch": epoch, "loss": float(np.mean(losses)),
               "ndcg_train": mean_ndcg(predict_list_scores(model, train_feats))}
        if test_feats:
            row["ndcg_val"] = mean_ndcg(predict_list_scores(model, test_feats))
        rows.append(row)
        log.info("lrl epoch %d loss %.4f ndcg %.4f", epoch, row["loss"], row["ndcg_train"])
    for p in model.parameters():
        p.requires_grad_(True)
    report = {
        "log": rows,
        "train_refs": train_refs,
        "test_refs": test_refs,
        "ndcg_train_before": ndcg_before,
        "ndcg_train": mean_ndcg(predict_list_scores(model, train_feats)),
        "ndcg_test": mean_ndcg(predict_list_scores(model, test_feats)) if test_feats else float("nan"),
    }
    return model, report


# --------------------------------------------------------------------------
# stage 3: fine-tuning on pseudo-MOS


def _scored_items(lists, features):
    feats, labels, keys = [], [], []
    seen = set()
    for lst in lists:
        for j, lv in enumerate(lst.levels):
            if lv.pseudo_mos is None:
                raise DataError(f"list {lst.id} level {lv.level} has no pseudo-MOS; run pmos first")
            if lv.path in seen:
                continue
            seen.add(lv.path)
            feats.append(features[lst.id][j])
            labels.append(lv.pseudo_mos)
            keys.append((lst.id, lv.level))
    if not feats:
        return None, None, []
    return torch.stack(feats), torch.tensor(labels, dtype=feats[0].dtype), keys


def predict_scores(model, feats) -> np.ndarray:
    with torch.no_grad():
        return model.index_from_features(feats).double().numpy()


def calibrate_index(model: GQANet, feats, labels) -> tuple:
    """Least-squares affine map of the index onto ``labels``, folded into the
    output layer of the index head.

    listMLE fixes neither the offset nor the scale of the index, so a
    rank-trained model can sit far from the label range.  The patch weights
    are convex, hence scaling and shifting every patch index scales and
    shifts the model index by the same amounts.  Returns ``(scale, shift)``.
    """
    s = predict_scores(model, feats)
    y = labels.double().numpy()
    if np.ptp(s) == 0:
        scale, shift = 0.0, float(y.mean())
    else:
        scale, shift = np.linalg.lstsq(np.c_[s, np.ones_like(s)], y, rcond=None)[0]
    last = model.index_head[-1]
    with torch.no_grad():
        last.weight.mul_(float(scale))
        last.bias.mul_(float(scale)).add_(float(shift))
    return float(scale), float(shift)


def finetune_scores(manifest, model: GQANet, cfg: ExperimentConfig, bank: PatchBank | None = None,
                    features: dict | None = None):
    """Minimise mean squared error to pseudo-MOS over shuffled batches of K
    clouds, updating the heads only.  The index is first mapped onto the
    label range with :func:`calibrate_index`.  Returns ``(model, report)``;
    ``report["before"]`` describes the model as handed in."""
    if model is None:
        raise StagingError("fine-tuning needs a trained model")
    tcfg = cfg.finetune
    train_lists, test_lists, train_refs, test_refs = split_lists(manifest, tcfg, cfg.seed)
    bank = bank or PatchBank(manifest, cfg, model.dtype)
    if features is None:
        features = compute_features(model, bank, train_lists + test_lists)
    x_train, y_train, _ = _scored_items(train_lists, features)
    x_test, y_test, _ = _scored_items(test_lists, features)
    if x_train is None:
        raise DataError("no training items with pseudo-MOS")

    def stats(x, y):
        if x is None:
            return {}
        return score_report(predict_scores(model, x), y.double().numpy())

    before = {"train": stats(x_train, y_train), "test": stats(x_test, y_test)}
    calibration = calibrate_index(model, x_train, y_train)
    params = model.named_group("heads")
    for name, p in model.named_parameters():
        p.requires_grad_(name in params)
    state = AdamState()
    K = tcfg.batch_size
    rows = []
    for epoch in range(1, tcfg.epochs + 1):
        order = torch.as_tensor(generator(tcfg.seed, "ft-epoch", epoch).permutation(len(y_train)))
        losses = []
        for start in range(0, len(order), K):
            b = order[start:start + K]
            pred = model.index_from_features(x_train[b])
            loss = ((pred - y_train[b]) ** 2).mean()
            _step(params, loss, state, tcfg)
            losses.append(loss.item())
        row = {"epoch": epoch, "loss": float(np.mean(losses)),
               "plcc_train": _safe_plcc(predict_scores(model, x_train), y_train)}
        if x_test is not None:
            row["plcc_val"] = _safe_plcc(predict_scores(model, x_test), y_test)
        rows.append(row)
    for p in model.parameters():
        p.requires_grad_(True)
    after = {"train": stats(x_train, y_train), "test": stats(x_test, y_test)}
    return model, {"log": rows, "train_refs": train_refs, "test_refs": test_refs,
                   "before": before, "calibration": calibration, "after": after}


def _safe_plcc(pred, y):
    try:
        return plcc(pred, y.double().numpy())
    except DataError:
        return float("nan")
