"""Service-time predictor: embedding assembly, MLP head, training and inference.

The per-request embedding is

    e = flatten(e_inter) ++ spatial row of (region, type) ++ [mu, sigma2, w]

of size ``N*d + d + 3``; an MLP with ReLU hidden layers maps it to a
nonnegative service time in days.
"""

from __future__ import annotations

import io
import json
import logging
import math
import threading
import time
import zipfile
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from datetime import date, datetime
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from . import __version__
from .config import ModelConfig, RunConfig
from .gpr import GprFeaturizer, GprModel, TypeGpr, fit_all_types, fit_type_gpr, same_day_demand
from .ingest import Dataset, ServiceRequest
from .inter_type import InterTypeAttention
from .panel import Panel, PanelStats, build_panel, standardize, window_tensor
from .st_encoder import IntraTypeEncoder
from .workload import score_workload

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1
DAY_CACHE_SIZE = 512  # encoded anchor days kept per model
Y_STD_FLOOR = 1e-2  # days; loss scale for (near-)constant targets


class TrainingError(RuntimeError):
    pass


class UnknownTypeError(KeyError):
    def __init__(self, label, vocabulary):
        super().__init__(f"unknown request type {label!r}; known types: {list(vocabulary)}")
        self.label = label
        self.vocabulary = list(vocabulary)


class MLPHead(nn.Module):
    """``h_j = relu(W_j h_{j-1} + b_j)`` for each hidden width, then a linear
    layer to one unit and the output activation."""

    def __init__(self, in_dim: int, hidden: Sequence[int] = (64,), output_activation: str = "softplus"):
        super().__init__()
        if output_activation not in ("softplus", "identity"):
            raise ValueError(f"unknown output activation {output_activation!r}")
        dims = [in_dim, *hidden]
        self.hidden = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))
        self.final = nn.Linear(dims[-1], 1)
        self.output_activation = output_activation

    def forward(self, e: torch.Tensor) -> torch.Tensor:
        h = e
        for j, layer in enumerate(self.hidden, start=1):
            h = torch.relu(layer(h))
            if not torch.isfinite(h).all():
                raise FloatingPointError(f"non-finite activation in hidden layer {j}")
        out = self.final(h).squeeze(-1)
        if self.output_activation == "softplus":
            out = F.softplus(out)
        if not torch.isfinite(out).all():
            raise FloatingPointError(f"non-finite activation in output layer {len(self.hidden) + 1}")
        return out


def assemble_embedding(e_inter: torch.Tensor, region_row: torch.Tensor, intra: torch.Tensor,
                       variant: str = "full") -> torch.Tensor:
    """Concatenate ``flatten(e_inter)``, the region-local row and the intra triple.

    Leading batch dimensions are allowed. Variant ``-v`` zeroes the intra slots and
    ``-ct`` the inter-type slots; the width never changes.
    """
    flat = e_inter.flatten(start_dim=-2)
    if variant == "-ct":
        flat = torch.zeros_like(flat)
    if variant == "-v":
        intra = torch.zeros_like(intra)
    return torch.cat([flat, region_row, intra], dim=-1)


class ServiceTimeNet(nn.Module):
    def __init__(self, n_types: int, n_regions: int, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.n_types = n_types
        self.n_regions = n_regions
        d = cfg.d_model
        self.intra_type = IntraTypeEncoder(
            n_types, d, cfg.temporal_heads, cfg.temporal_layers, cfg.ff_mult, cfg.pooling,
            cfg.positional, cfg.temporal, cfg.conv_kernel, cfg.conv_activation,
            cfg.region_order, cfg.share_temporal)
        self.inter_type = InterTypeAttention(d, cfg.inter_hidden, cfg.inter_heads, cfg.inter_layer_norm)
        self.head = MLPHead(n_types * d + d + 3, [cfg.mlp_hidden] * cfg.mlp_layers, cfg.output_activation)

    @property
    def embedding_dim(self) -> int:
        return self.n_types * self.cfg.d_model + self.cfg.d_model + 3

    def encode_days(self, windows: torch.Tensor):
        """Windows ``(U, N, M, T, 2)`` -> (e_inter ``(U, N, d)``, region rows ``(U, N, M, d)``,
        attention ``(U, N, N)`` or None)."""
        v = self.cfg.variant
        h, rows, pooled = self.intra_type(windows, temporal=v != "-t", spatial=v != "-ct")
        if v == "-ct":
            return torch.zeros_like(pooled), h, None
        out = self.inter_type(pooled)
        return out.e_inter, rows, out.attention_weights

    def forward(self, windows, day_pos, region, type_idx, intra):
        e_inter, rows, _ = self.encode_days(windows)
        e = assemble_embedding(e_inter[day_pos], rows[day_pos, type_idx, region], intra, self.cfg.variant)
        return self.head(e)


@dataclass
class Prediction:
    service_time_days: float
    gpr_mean: float
    gpr_variance: float
    workload: float
    request_type: str
    region_id: int
    day: date
    fallback: bool = False


def ensure_workloads(requests: Sequence[ServiceRequest]) -> list[ServiceRequest]:
    """Fill missing workload scores with the offline scorer."""
    return [r if r.workload is not None else replace(r, workload=score_workload(r.description).w)
            for r in requests]


@dataclass
class ServiceTimeModel:
    """Trained network plus everything needed to reproduce its inputs."""

    config: RunConfig
    net: ServiceTimeNet
    gprs: dict[str, TypeGpr]
    featurizer: GprFeaturizer
    type_vocabulary: list[str]
    region_count: int
    panel_stats: PanelStats
    intra_mean: np.ndarray
    intra_std: np.ndarray
    train_boundary: datetime | None = None
    history: list[dict] = field(default_factory=list)
    _day_cache: OrderedDict = field(default_factory=OrderedDict, repr=False)
    _cache_lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    @property
    def window(self) -> int:
        return self.config.model.window

    # -- inputs ---------------------------------------------------------------

    def intra_raw(self, requests: Sequence[ServiceRequest], panel: Panel) -> np.ndarray:
        """``(n, 3)`` array of GP mean, GP variance and workload per request."""
        out = np.zeros((len(requests), 3))
        if not requests:
            return out
        demand = same_day_demand(requests, panel, self.type_vocabulary)
        X = self.featurizer.transform(requests, demand)
        types = np.array([r.request_type for r in requests])
        for label, tg in self.gprs.items():
            sel = types == label
            if sel.any():
                mu, var = tg.predict(X[sel])
                out[sel, 0], out[sel, 1] = mu, var
        out[:, 2] = [r.workload or 0.0 for r in requests]
        return out

    def _check_types(self, requests):
        known = set(self.type_vocabulary)
        for r in requests:
            if r.request_type not in known:
                raise UnknownTypeError(r.request_type, self.type_vocabulary)

    def clear_cache(self) -> None:
        with self._cache_lock:
            self._day_cache.clear()

    def _encode(self, panel_std: Panel, anchors: np.ndarray, cache_key=None):
        """Encoder outputs for each anchor day, with an optional per-panel LRU cache."""
        T = self.window
        results = {}
        todo = []
        with self._cache_lock:
            for a in anchors:
                key = (cache_key, int(a))
                if cache_key is not None and key in self._day_cache:
                    self._day_cache.move_to_end(key)
                    results[int(a)] = self._day_cache[key]
                else:
                    todo.append(int(a))
        if todo:
            with torch.inference_mode():
                for start in range(0, len(todo), 128):
                    chunk = todo[start:start + 128]
                    w = torch.as_tensor(window_tensor(panel_std, chunk, T), dtype=torch.float32)
                    e_inter, rows, _ = self.net.encode_days(w)
                    for k, a in enumerate(chunk):
                        results[a] = (e_inter[k], rows[k])
            if cache_key is not None:
                with self._cache_lock:
                    for a in todo:
                        self._day_cache[(cache_key, a)] = results[a]
                    while len(self._day_cache) > DAY_CACHE_SIZE:
                        self._day_cache.popitem(last=False)
        return results

    # -- inference ------------------------------------------------------------

    def predict_requests(self, requests: Sequence[ServiceRequest], panel: Panel,
                         cache_key=None) -> list[Prediction]:
        """Predict each request using the raw (unstandardized) ``panel`` for history.

        Requests whose anchor day lacks ``T`` days of panel history get the GP
        mean alone and ``fallback=True``.
        """
        requests = ensure_workloads(list(requests))
        self._check_types(requests)
        if not requests:
            return []
        if self.net.training:
            self.net.eval()
        intra = self.intra_raw(requests, panel)
        T = self.window
        anchors = np.array([panel.day_index(r.created_at.date()) for r in requests])
        ok = (anchors - T >= 0) & (anchors <= panel.D)
        yhat = intra[:, 0].copy()
        if ok.any():
            pstd = standardize(panel, self.panel_stats)
            uniq = np.unique(anchors[ok])
            enc = self._encode(pstd, uniq, cache_key)
            tindex = {t: k for k, t in enumerate(self.type_vocabulary)}
            idx = np.flatnonzero(ok)
            e_inter = torch.stack([enc[int(anchors[k])][0] for k in idx])
            rows = torch.stack([enc[int(anchors[k])][1][tindex[requests[k].request_type],
                                                         requests[k].region_id] for k in idx])
            z = torch.as_tensor((intra[idx] - self.intra_mean) / self.intra_std, dtype=torch.float32)
            with torch.inference_mode():
                e = assemble_embedding(e_inter, rows, z, self.config.model.variant)
                yhat[idx] = self.net.head(e).double().numpy()
        return [
            Prediction(float(yhat[k]), float(intra[k, 0]), float(intra[k, 1]), float(intra[k, 2]),
                       r.request_type, r.region_id, r.created_at.date(), not bool(ok[k]))
            for k, r in enumerate(requests)
        ]

    def predict(self, request: ServiceRequest, panel: Panel, cache_key=None) -> Prediction:
        return self.predict_requests([request], panel, cache_key)[0]

    # -- persistence ----------------------------------------------------------

    def manifest(self) -> dict:
        return {
            "format_version": CHECKPOINT_FORMAT,
            "package_version": __version__,
            "config": self.config.to_dict(),
            "seed": self.config.train.seed,
            "type_vocabulary": self.type_vocabulary,
            "region_count": self.region_count,
            "region_order": self.config.model.region_order or list(range(self.region_count)),
            "panel_stats": self.panel_stats.as_dict(),
            "intra_mean": self.intra_mean.tolist(),
            "intra_std": self.intra_std.tolist(),
            "train_boundary": self.train_boundary.isoformat() if self.train_boundary else None,
            "featurizer": self.featurizer.state(),
            "gprs": {
                label: {
                    "offset": tg.offset, "fallback_var": tg.fallback_var, "count": tg.count,
                    "low_confidence": tg.low_confidence, "has_model": tg.model is not None,
                    **({"lengthscale": tg.model.lengthscale, "signal_var": tg.model.signal_var,
                        "noise": tg.model.noise} if tg.model is not None else {}),
                }
                for label, tg in self.gprs.items()
            },
            "history": self.history,
        }

    def save(self, path) -> None:
        """Single zip archive: ``manifest.json``, ``params.npz`` and one ``gpr/<k>.npz`` per type."""
        with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
            zf.writestr("manifest.json", json.dumps(self.manifest(), indent=2))
            buf = io.BytesIO()
            np.savez(buf, **{k: v.detach().cpu().numpy() for k, v in self.net.state_dict().items()})
            zf.writestr("params.npz", buf.getvalue())
            for k, label in enumerate(self.type_vocabulary):
                tg = self.gprs[label]
                if tg.model is None:
                    continue
                buf = io.BytesIO()
                np.savez(buf, X=tg.model.X, y=tg.model.y)
                zf.writestr(f"gpr/{k}.npz", buf.getvalue())

    @classmethod
    def load(cls, path) -> "ServiceTimeModel":
        with zipfile.ZipFile(path) as zf:
            man = json.loads(zf.read("manifest.json"))
            if man["format_version"] != CHECKPOINT_FORMAT:
                raise ValueError(f"unsupported checkpoint format {man['format_version']}")
            cfg = RunConfig.from_dict(man["config"])
            vocab = man["type_vocabulary"]
            net = ServiceTimeNet(len(vocab), man["region_count"], cfg.model)
            with np.load(io.BytesIO(zf.read("params.npz"))) as z:
                net.load_state_dict({k: torch.as_tensor(z[k]) for k in z.files})
            net.eval()
            gprs = {}
            for k, label in enumerate(vocab):
                g = man["gprs"][label]
                model = None
                if g["has_model"]:
                    with np.load(io.BytesIO(zf.read(f"gpr/{k}.npz"))) as z:
                        model = GprModel(z["X"], z["y"], g["lengthscale"], g["signal_var"],
                                         g["noise"]).refactor()
                gprs[label] = TypeGpr(model, g["offset"], g["fallback_var"], g["count"], g["low_confidence"])
        boundary = man.get("train_boundary")
        return cls(cfg, net, gprs, GprFeaturizer.from_state(man["featurizer"]), vocab,
                   man["region_count"], PanelStats.from_dict(man["panel_stats"]),
                   np.asarray(man["intra_mean"]), np.asarray(man["intra_std"]),
                   datetime.fromisoformat(boundary) if boundary else None, man.get("history", []))


# ---------------------------------------------------------------------------
# training


def crossfit_intra(requests: Sequence[ServiceRequest], X: np.ndarray, y: np.ndarray,
                   type_vocabulary: Sequence[str], folds: int, cfg, seed: int) -> np.ndarray:
    """Out-of-fold GP mean and variance for every training row."""
    n = len(requests)
    out = np.zeros((n, 2))
    types = np.array([r.request_type for r in requests])
    rng = np.random.default_rng(seed)
    for l, label in enumerate(type_vocabulary):
        idx = np.flatnonzero(types == label)
        if idx.size == 0:
            continue
        k = min(folds, idx.size)
        if k < 2:
            tg = fit_type_gpr(X[idx], y[idx], cfg.lengthscale, False, cfg.cap, seed + l,
                              float(y.mean()), float(y.var()))
            out[idx] = np.column_stack(tg.predict(X[idx]))
            continue
        assign = rng.permutation(idx.size) % k
        for f in range(k):
            held, fit = idx[assign == f], idx[assign != f]
            tg = fit_type_gpr(X[fit], y[fit], cfg.lengthscale, cfg.grid_search, cfg.cap,
                              seed + 1000 * f + l, float(y.mean()), float(y.var()))
            out[held] = np.column_stack(tg.predict(X[held]))
    return out


def day_batches(anchors: np.ndarray, idx: np.ndarray, size: int, rng=None):
    """Split ``idx`` into batches of whole anchor days holding about ``size`` requests.

    Days are visited in shuffled order when ``rng`` is given, so the encoders run
    once per day in each batch rather than once per request.
    """
    days, inverse = np.unique(anchors[idx], return_inverse=True)
    groups = [idx[inverse == k] for k in range(days.size)]
    order = rng.permutation(days.size) if rng is not None else np.arange(days.size)
    batch, count = [], 0
    for k in order:
        batch.append(groups[k])
        count += groups[k].size
        if count >= size:
            yield np.concatenate(batch)
            batch, count = [], 0
    if batch:
        yield np.concatenate(batch)


def _seed_everything(seed: int):
    torch.manual_seed(seed)
    np.random.seed(seed % (2**32))


def train(train_ds: Dataset, config: RunConfig | None = None, region_count: int | None = None,
          progress: bool = False) -> ServiceTimeModel:
    """Fit the GPs, then train encoders and head end-to-end on squared error.

    Only ``train_ds`` is touched. The last ``val_fraction`` of eligible requests
    (by creation time) drive early stopping; the best validation state is kept.
    """
    config = config or RunConfig()
    mc, tc, gc = config.model, config.train, config.gpr
    M = region_count or train_ds.region_count or (max(r.region_id for r in train_ds) + 1)
    vocab = list(train_ds.type_vocabulary)
    T = mc.window
    _seed_everything(tc.seed)

    reqs = ensure_workloads([r for r in train_ds if r.service_time_days is not None])
    train_ds = train_ds.with_requests(ensure_workloads(train_ds.requests))
    boundary = train_ds.split_boundary
    panel = build_panel(train_ds, M, vocab, train_end=boundary.date() if boundary else None)
    stats = PanelStats.fit(panel)
    pstd = standardize(panel, stats)

    featurizer = GprFeaturizer(M, gc.use_region, gc.use_weekday, gc.use_season, gc.use_demand,
                               gc.use_workload)
    gprs, featurizer = fit_all_types(train_ds, panel, featurizer=featurizer,
                                     lengthscale=gc.lengthscale, grid_search=gc.grid_search,
                                     cap=gc.cap, seed=tc.seed)
    demand = same_day_demand(reqs, panel, vocab)
    X = featurizer.transform(reqs, demand)
    y = np.array([r.service_time_days for r in reqs])
    intra = np.zeros((len(reqs), 3))
    intra[:, :2] = crossfit_intra(reqs, X, y, vocab, gc.crossfit_folds, gc, tc.seed)
    intra[:, 2] = [r.workload for r in reqs]

    anchors = np.array([panel.day_index(r.created_at.date()) for r in reqs])
    eligible = np.flatnonzero((anchors >= T) & (anchors <= panel.D))
    skipped = len(reqs) - eligible.size
    if skipped:
        log.info("skipping %d requests without %d days of history", skipped, T)
    if eligible.size < 2:
        raise TrainingError("fewer than two requests with enough history to train on")
    n_val = int(round(tc.val_fraction * eligible.size)) if tc.val_fraction > 0 else 0
    n_val = min(n_val, eligible.size - 1)
    tr_idx, va_idx = eligible[: eligible.size - n_val], eligible[eligible.size - n_val:]

    intra_mean = intra[tr_idx].mean(axis=0)
    intra_std = np.maximum(intra[tr_idx].std(axis=0), 1e-6)
    y_mean, y_std = float(y[tr_idx].mean()), max(float(y[tr_idx].std()), Y_STD_FLOOR)

    net = ServiceTimeNet(len(vocab), M, mc)
    with torch.no_grad():
        b = y_mean if mc.output_activation == "identity" else math.log(math.expm1(max(y_mean, 1e-3)))
        net.head.final.bias.fill_(b)
    model = ServiceTimeModel(config, net, gprs, featurizer, vocab, M, stats, intra_mean, intra_std,
                             boundary)

    all_anchor = np.arange(panel.D + 1)
    windows = np.zeros((panel.D + 1, len(vocab), M, T, 2), dtype=np.float32)
    valid_anchor = all_anchor[all_anchor >= T]
    windows[valid_anchor] = window_tensor(pstd, valid_anchor, T)
    windows = torch.from_numpy(windows)
    tindex = {t: k for k, t in enumerate(vocab)}
    t_all = torch.as_tensor([tindex[r.request_type] for r in reqs])
    r_all = torch.as_tensor([r.region_id for r in reqs])
    a_all = torch.as_tensor(anchors)
    z_all = torch.as_tensor((intra - intra_mean) / intra_std, dtype=torch.float32)
    y_all = torch.as_tensor(y, dtype=torch.float32)

    def batch_loss(idx):
        idx = torch.as_tensor(idx)
        days, pos = torch.unique(a_all[idx], return_inverse=True)
        pred = net(windows[days], pos, r_all[idx], t_all[idx], z_all[idx])
        return (((pred - y_all[idx]) / y_std) ** 2).mean()

    def evaluate(idx):
        net.eval()
        with torch.no_grad():
            total = 0.0
            for part in day_batches(anchors, idx, 4096):
                total += float(batch_loss(part)) * len(part)
        return total / max(len(idx), 1)

    opt = torch.optim.Adam(net.parameters(), lr=tc.lr, weight_decay=tc.weight_decay)
    rng = np.random.default_rng(tc.seed)
    best, best_state, since = math.inf, None, 0
    t0 = time.perf_counter()
    for epoch in range(tc.epochs):
        net.train()
        running = 0.0
        for b, part in enumerate(day_batches(anchors, tr_idx, tc.batch_size, rng)):
            loss = batch_loss(part)
            if not torch.isfinite(loss):
                raise TrainingError(f"loss became {float(loss)} at epoch {epoch}, batch {b}; "
                                    f"lr={tc.lr}, last best val={best:.4g}")
            opt.zero_grad()
            loss.backward()
            if tc.grad_clip:
                nn.utils.clip_grad_norm_(net.parameters(), tc.grad_clip)
            opt.step()
            running += float(loss.detach()) * part.size
        train_mse = running / tr_idx.size
        val_mse = evaluate(va_idx) if va_idx.size else train_mse
        model.history.append({"epoch": epoch, "train_loss": train_mse, "val_loss": val_mse})
        if progress:
            log.info("epoch %d train %.4f val %.4f (%.1fs)", epoch, train_mse, val_mse,
                     time.perf_counter() - t0)
        if val_mse < best - 1e-6:
            best, since = val_mse, 0
            best_state = {k: v.detach().clone() for k, v in net.state_dict().items()}
        else:
            since += 1
            if since >= tc.patience:
                log.info("early stop at epoch %d (best val %.4f)", epoch, best)
                break
    if best_state is not None:
        net.load_state_dict(best_state)
    net.eval()
    return model
