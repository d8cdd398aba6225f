"""Daily region x type panel of request volume and mean service time."""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import date, timedelta
from typing import Sequence

import numpy as np

from .ingest import Dataset

IMPUTE_WINDOW = 28
STD_FLOOR = 1e-6
PANEL_FORMAT_VERSION = 1


@dataclass
class Panel:
    days: list[date]
    r: np.ndarray  # (M, N, D) request counts
    d: np.ndarray  # (M, N, D) mean service time, imputed where ~mask
    mask: np.ndarray  # (M, N, D) True where a completed request was observed
    type_vocabulary: list[str] = field(default_factory=list)
    standardized: bool = False

    @property
    def shape(self):
        return self.r.shape

    @property
    def M(self) -> int:
        return self.r.shape[0]

    @property
    def N(self) -> int:
        return self.r.shape[1]

    @property
    def D(self) -> int:
        return self.r.shape[2]

    def day_index(self, day: date) -> int:
        """Index of ``day`` relative to the first panel day (may fall outside the panel)."""
        return (day - self.days[0]).days

    def save(self, path) -> None:
        """Write a single ``.npz`` file; see README for the layout."""
        np.savez_compressed(
            path,
            format_version=np.array(PANEL_FORMAT_VERSION),
            shape=np.array(self.r.shape),
            days=np.array([d.isoformat() for d in self.days]),
            type_vocabulary=np.array(self.type_vocabulary, dtype=str),
            standardized=np.array(self.standardized),
            r=self.r,
            d=self.d,
            mask=self.mask,
        )

    @classmethod
    def load(cls, path) -> "Panel":
        with np.load(path, allow_pickle=False) as z:
            if int(z["format_version"]) != PANEL_FORMAT_VERSION:
                raise ValueError(f"unsupported panel format {int(z['format_version'])}")
            days = [date.fromisoformat(s) for s in z["days"].tolist()]
            panel = cls(days, z["r"], z["d"], z["mask"], [str(s) for s in z["type_vocabulary"]],
                        bool(z["standardized"]))
        if tuple(panel.r.shape) != (panel.M, panel.N, len(days)):
            raise ValueError("panel header does not match arrays")
        return panel


@dataclass(frozen=True)
class Window:
    region_id: int
    type_index: int
    anchor: int  # day index t'; the window covers t'-T .. t'-1
    sequence: np.ndarray  # (T, 2) rows of [r, d], oldest first


def build_panel(
    ds: Dataset,
    region_count: int,
    type_vocabulary: Sequence[str] | None = None,
    start: date | None = None,
    end: date | None = None,
    train_end: date | None = None,
    impute_window: int = IMPUTE_WINDOW,
) -> Panel:
    """Aggregate requests into daily counts and mean service times.

    Covers ``start``..``end`` inclusive (defaults: first and last creation day).
    Cells without a completed request get the trailing ``impute_window``-day mean
    of observed cells of the same (region, type), falling back to the type's
    mean service time over days before ``train_end``.
    """
    vocab = list(type_vocabulary if type_vocabulary is not None else ds.type_vocabulary)
    if len(ds) == 0:
        raise ValueError("empty dataset")
    tindex = {t: k for k, t in enumerate(vocab)}
    unknown = sorted({r.request_type for r in ds if r.request_type not in tindex})
    if unknown:
        raise KeyError(f"unknown request types {unknown}; vocabulary is {vocab}")
    first = start or ds.requests[0].created_at.date()
    last = end or ds.requests[-1].created_at.date()
    D = (last - first).days + 1
    if D < 1:
        raise ValueError("empty day range")
    M, N = region_count, len(vocab)

    reg, typ, day, st = [], [], [], []
    for req in ds:
        t = (req.created_at.date() - first).days
        if not 0 <= t < D:
            continue
        if not 0 <= req.region_id < M:
            raise ValueError(f"request {req.request_id} has region {req.region_id} outside [0, {M})")
        reg.append(req.region_id)
        typ.append(tindex[req.request_type])
        day.append(t)
        st.append(np.nan if req.service_time_days is None else req.service_time_days)
    reg, typ, day, st = (np.asarray(a) for a in (reg, typ, day, st))

    r = np.zeros((M, N, D))
    np.add.at(r, (reg, typ, day), 1.0)
    done = ~np.isnan(st)
    cnt = np.zeros((M, N, D))
    tot = np.zeros((M, N, D))
    np.add.at(cnt, (reg[done], typ[done], day[done]), 1.0)
    np.add.at(tot, (reg[done], typ[done], day[done]), st[done])
    mask = cnt > 0
    d = np.divide(tot, cnt, out=np.zeros_like(tot), where=mask)

    # fallback: per-type mean over the training period
    train_days = D if train_end is None else max(0, min(D, (train_end - first).days))
    type_mean = np.empty(N)
    global_mean = tot[..., :train_days].sum() / max(cnt[..., :train_days].sum(), 1.0)
    for l in range(N):
        c = cnt[:, l, :train_days].sum()
        type_mean[l] = tot[:, l, :train_days].sum() / c if c > 0 else global_mean

    # trailing mean of observed cell means over days t-w .. t-1
    obs_sum = np.concatenate([np.zeros((M, N, 1)), np.cumsum(np.where(mask, d, 0.0), axis=2)], axis=2)
    obs_cnt = np.concatenate([np.zeros((M, N, 1)), np.cumsum(mask, axis=2)], axis=2)
    t = np.arange(D)
    lo = np.maximum(t - impute_window, 0)
    win_sum = obs_sum[..., t] - obs_sum[..., lo]
    win_cnt = obs_cnt[..., t] - obs_cnt[..., lo]
    trailing = np.divide(win_sum, win_cnt, out=np.broadcast_to(type_mean[None, :, None], d.shape).copy(),
                         where=win_cnt > 0)
    d = np.where(mask, d, trailing)
    return Panel([first + timedelta(days=k) for k in range(D)], r, d, mask, vocab)


def cut_window(panel: Panel, i: int, l: int, anchor: int, T: int) -> Window:
    """The ``T`` daily ``[r, d]`` pairs strictly before day ``anchor``."""
    if anchor - T < 0:
        raise ValueError(f"insufficient history: anchor {anchor} needs {T} prior days")
    if anchor > panel.D:
        raise ValueError(f"anchor {anchor} beyond panel end ({panel.D} days)")
    seq = np.stack([panel.r[i, l, anchor - T:anchor], panel.d[i, l, anchor - T:anchor]], axis=-1)
    return Window(i, l, anchor, seq)


def window_tensor(panel: Panel, anchors: Sequence[int], T: int) -> np.ndarray:
    """Windows for every region and type at each anchor, shape ``(A, N, M, T, 2)``."""
    anchors = np.asarray(anchors, dtype=int)
    if anchors.size and (anchors.min() - T < 0 or anchors.max() > panel.D):
        raise ValueError("insufficient history for some anchors")
    idx = anchors[:, None] + np.arange(-T, 0)[None, :]  # (A, T)
    stacked = np.stack([panel.r, panel.d], axis=-1)  # (M, N, D, 2)
    out = stacked[:, :, idx, :]  # (M, N, A, T, 2)
    return np.ascontiguousarray(out.transpose(2, 1, 0, 3, 4))


@dataclass
class PanelStats:
    """Per-type mean and standard deviation of both channels on training days."""

    r_mean: np.ndarray
    r_std: np.ndarray
    d_mean: np.ndarray
    d_std: np.ndarray

    @classmethod
    def fit(cls, panel: Panel, train_days: int | None = None) -> "PanelStats":
        D = panel.D if train_days is None else train_days
        r = panel.r[:, :, :D]
        d = panel.d[:, :, :D]
        m = panel.mask[:, :, :D]
        N = panel.N
        r_mean = r.mean(axis=(0, 2)) if D else np.zeros(N)
        r_std = r.std(axis=(0, 2)) if D else np.ones(N)
        d_mean, d_std = np.zeros(N), np.ones(N)
        for l in range(N):
            vals = d[:, l][m[:, l]]
            if vals.size:
                d_mean[l], d_std[l] = vals.mean(), vals.std()
        return cls(r_mean, np.maximum(r_std, STD_FLOOR), d_mean, np.maximum(d_std, STD_FLOOR))

    def as_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("r_mean", "r_std", "d_mean", "d_std")}

    @classmethod
    def from_dict(cls, d: dict) -> "PanelStats":
        return cls(*(np.asarray(d[k], dtype=float) for k in ("r_mean", "r_std", "d_mean", "d_std")))


def standardize(panel: Panel, stats: PanelStats) -> Panel:
    """Z-score both channels per type."""
    if panel.standardized:
        raise ValueError("panel already standardized")
    r = (panel.r - stats.r_mean[None, :, None]) / np.maximum(stats.r_std, STD_FLOOR)[None, :, None]
    d = (panel.d - stats.d_mean[None, :, None]) / np.maximum(stats.d_std, STD_FLOOR)[None, :, None]
    return Panel(panel.days, r, d, panel.mask, panel.type_vocabulary, standardized=True)


def inverse_standardize(panel: Panel, stats: PanelStats) -> Panel:
    if not panel.standardized:
        raise ValueError("panel is not standardized")
    r = panel.r * np.maximum(stats.r_std, STD_FLOOR)[None, :, None] + stats.r_mean[None, :, None]
    d = panel.d * np.maximum(stats.d_std, STD_FLOOR)[None, :, None] + stats.d_mean[None, :, None]
    return Panel(panel.days, r, d, panel.mask, panel.type_vocabulary, standardized=False)
