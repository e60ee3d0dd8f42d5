"""GQANet: patch-wise quality model.

Per patch, a four-layer EdgeConv stack (h1..h4) produces two 32-d scales
that are concatenated per point and average-pooled into a 64-d feature.  An
index head maps the feature to a patch quality index, a weight head to a
strictly positive patch weight, and the model index is the weighted mean of
patch indices.  A classifier head over the same feature is used only for
pre-training on distortion levels.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import DataError
from .rng import derive_seed

CHECKPOINT_FORMAT = "gqa-checkpoint"
CHECKPOINT_VERSION = 1

MPFE_PREFIXES = ("h1.", "h2.", "h3.", "h4.")
HEAD_PREFIXES = ("index_head.", "weight_head.")
CLASSIFIER_PREFIX = "classifier."


@dataclass
class ModelConfig:
    k: int = 20
    slope: float = 0.01
    edge_widths: dict = field(default_factory=lambda: {"h1": [3, 32], "h2": [32, 32], "h3": [32, 32], "h4": [64, 32]})
    index_widths: list = field(default_factory=lambda: [64, 32, 16, 1])
    weight_widths: list = field(default_factory=lambda: [64, 16, 1])
    classifier_widths: list = field(default_factory=lambda: [64, 64, 32, 11])
    uniform_weights: bool = False

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def knn_graph(feats: torch.Tensor, k: int) -> torch.Tensor:
    """Indices ``(B, n, k)`` of each point's k nearest *other* points in
    feature space, nearest first, ties to the lower index."""
    with torch.no_grad():
        sq = (feats * feats).sum(-1)
        d2 = sq.unsqueeze(-1) + sq.unsqueeze(-2) - 2.0 * feats @ feats.transpose(-1, -2)
        n = feats.shape[-2]
        d2.diagonal(dim1=-2, dim2=-1).fill_(float("inf"))
        return torch.sort(d2, dim=-1, stable=True).indices[..., :k]


class EdgeConv(nn.Module):
    """EdgeConv with a single shared affine edge map and max aggregation.

    Edge feature ``[f_i, f_j - f_i]``; output row ``i`` is
    ``max_j act(W [f_i; f_j - f_i] + b)`` over the k nearest neighbours.
    """

    def __init__(self, d_in, d_out, k=20, slope=0.01):
        super().__init__()
        self.d_in, self.d_out, self.k, self.slope = d_in, d_out, k, slope
        self.linear = nn.Linear(2 * d_in, d_out)

    def forward(self, x, graph_feats=None):
        n = x.shape[-2]
        k = min(self.k, n - 1)
        if k < 1:
            raise DataError("EdgeConv needs at least 2 points")
        idx = knn_graph(x if graph_feats is None else graph_feats, k)
        w = self.linear.weight
        w_self, w_nbr = w[:, : self.d_in], w[:, self.d_in:]
        # W [f_i; f_j - f_i] = (W1 - W2) f_i + W2 f_j, and act is monotone so
        # the max over j moves inside it
        centre = x @ (w_self - w_nbr).T + self.linear.bias
        nbr = x @ w_nbr.T
        batch_shape = nbr.shape[:-2]
        flat = nbr.reshape(-1, self.d_out)
        offsets = torch.arange(flat.shape[0] // n).mul_(n).view(-1, 1, 1)
        rows = (idx.reshape(-1, n, k) + offsets).reshape(-1)
        gathered = flat.index_select(0, rows).reshape(*batch_shape, n, k, self.d_out)
        return F.leaky_relu(centre + gathered.max(dim=-2).values, self.slope)


def _mlp(widths):
    return nn.ModuleList(nn.Linear(a, b) for a, b in zip(widths[:-1], widths[1:]))


def _run_mlp(layers, x, slope):
    for i, layer in enumerate(layers):
        x = layer(x)
        if i < len(layers) - 1:
            x = F.leaky_relu(x, slope)
    return x


class GQANet(nn.Module):
    def __init__(self, config: ModelConfig | None = None, seed: int = 0, dtype=torch.float32):
        super().__init__()
        self.config = config = config or ModelConfig()
        ew = config.edge_widths
        self.h1 = EdgeConv(*ew["h1"], k=config.k, slope=config.slope)
        self.h2 = EdgeConv(*ew["h2"], k=config.k, slope=config.slope)
        self.h3 = EdgeConv(*ew["h3"], k=config.k, slope=config.slope)
        self.h4 = EdgeConv(*ew["h4"], k=config.k, slope=config.slope)
        self.index_head = _mlp(config.index_widths)
        self.weight_head = _mlp(config.weight_widths)
        self.classifier = _mlp(config.classifier_widths)
        self.to(dtype)
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int) -> None:
        """Fan-in scaled uniform weights (He bound, sqrt(6 / fan_in), so
        activations keep their scale through the leaky-ReLU stack), zero
        biases, from a seeded stream."""
        gen = torch.Generator().manual_seed(derive_seed(seed, "init") & ((1 << 63) - 1))
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("bias"):
                    p.zero_()
                else:
                    bound = np.sqrt(6.0 / p.shape[1])
                    p.copy_((torch.rand(p.shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound)

    @property
    def dtype(self):
        return self.h1.linear.weight.dtype

    # -- stages ------------------------------------------------------------

    def mpfe(self, patches: torch.Tensor) -> torch.Tensor:
        """``(..., n, 3)`` anchor-centred patches -> ``(..., 64)`` features."""
        g1 = self.h1(patches)
        f1 = self.h3(g1)
        f2 = self.h4(torch.cat([g1, self.h2(g1)], dim=-1))
        return torch.cat([f1, f2], dim=-1).mean(dim=-2)

    def patch_index(self, feats):
        return _run_mlp(self.index_head, feats, self.config.slope).squeeze(-1)

    def patch_weight(self, feats):
        return F.softplus(_run_mlp(self.weight_head, feats, self.config.slope)).squeeze(-1)

    def classify(self, feats):
        return _run_mlp(self.classifier, feats, self.config.slope)

    def index_from_features(self, feats, uniform_weights: bool | None = None):
        """``(..., N, 64)`` patch features -> ``(...)`` model quality index."""
        if uniform_weights is None:
            uniform_weights = self.config.uniform_weights
        idx = self.patch_index(feats)
        if uniform_weights:
            return idx.mean(dim=-1)
        w = self.patch_weight(feats)
        return (w * idx).sum(dim=-1) / w.sum(dim=-1)

    def forward(self, patches):
        """``(..., N, n, 3)`` patch sets -> ``(...)`` model quality index."""
        return self.index_from_features(self.mpfe(patches))

    # -- parameter groups ---------------------------------------------------

    def named_group(self, group: str):
        prefixes = {"mpfe": MPFE_PREFIXES, "heads": HEAD_PREFIXES, "classifier": (CLASSIFIER_PREFIX,)}[group]
        return {n: p for n, p in self.named_parameters() if n.startswith(prefixes)}


# --------------------------------------------------------------------------
# thin functional surface


def as_tensor(x, dtype=torch.float64):
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def edgeconv_forward(features, coords, layer: EdgeConv, use_coords: bool = False):
    """Run one EdgeConv layer; the k-NN graph is built on ``coords`` when
    ``use_coords`` is set (first layer), otherwise on ``features``."""
    x = as_tensor(features, layer.linear.weight.dtype)
    g = as_tensor(coords, x.dtype) if use_coords else None
    return layer(x, g)


def model_index(indices, weights) -> float:
    indices = np.asarray(indices, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if indices.shape != weights.shape or indices.size == 0:
        raise DataError("indices and weights must be non-empty and the same length")
    if (weights <= 0).any():
        raise DataError("patch weights must be strictly positive")
    return float((weights * indices).sum() / weights.sum())


def gqanet_forward(patchset, model: GQANet) -> float:
    with torch.no_grad():
        return float(model(as_tensor(patchset.patches, model.dtype)))


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: GQANet, path, stage: str, extra: dict | None = None) -> None:
    """npz container: one array per canonical parameter name plus a
    ``__meta__`` JSON string with format, version, stage and model config."""
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "stage": stage,
        "dtype": str(model.dtype).replace("torch.", ""),
        "config": asdict(model.config),
        "extra": extra or {},
    }
    arrays = {name: p.detach().cpu().numpy() for name, p in model.state_dict().items()}
    arrays["__meta__"] = np.array(json.dumps(meta, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Return ``(model, meta)``."""
    try:
        data = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise DataError(f"{path}: unreadable checkpoint ({exc})") from None
    with data:
        if "__meta__" not in data.files:
            raise DataError(f"{path}: not a {CHECKPOINT_FORMAT} file")
        meta = json.loads(str(data["__meta__"]))
        if meta.get("format") != CHECKPOINT_FORMAT or meta.get("version") != CHECKPOINT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint format")
        dtype = getattr(torch, meta["dtype"])
        model = GQANet(ModelConfig.from_dict(meta["config"]), dtype=dtype)
        state = model.state_dict()
        missing = set(state) - set(data.files)
        if missing:
            raise DataError(f"{path}: checkpoint lacks {sorted(missing)}")
        new_state = {}
        for name, ref in state.items():
            arr = data[name]
            if tuple(arr.shape) != tuple(ref.shape):
                raise DataError(f"{path}: {name} has shape {arr.shape}, expected {tuple(ref.shape)}")
            new_state[name] = torch.from_numpy(arr.copy())
        model.load_state_dict(new_state)
    return model, meta
