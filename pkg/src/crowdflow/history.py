"""LSTM encoder of the recent observation window (F_hist)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .config import HistoryConfig
from .nn import Affine, LSTMCell, Module


class EmptyHistoryError(ValueError):
    pass


@dataclass
class HistoryWindow:
    """Up to L states, oldest first, each a 6-vector [p, v, a] with a validity flag."""

    states: np.ndarray  # (L, 6)
    valid: np.ndarray  # (L,)


class HistoryEncoder(Module):
    def __init__(self, cfg: HistoryConfig, rng: np.random.Generator, out_dim: int | None = None):
        self.cfg = cfg
        self.input_proj = Affine(6, cfg.input_dim, rng)
        self.lstm = LSTMCell(cfg.input_dim, cfg.hidden, rng)
        self.output_proj = Affine(cfg.hidden, out_dim, rng) if out_dim else None

    @property
    def out_dim(self) -> int:
        return self.output_proj.n_out if self.output_proj else self.cfg.hidden

    def __call__(self, frames: Sequence[Value], valid: Sequence[np.ndarray]) -> Value:
        """Encode a batch window.

        ``frames`` are (N, 6) state values, oldest first, the last being the
        current frame; ``valid`` are matching (N,) masks.  Invalid frames leave
        the recurrent state untouched, so leading padding is a no-op.
        """
        if not frames:
            raise EmptyHistoryError("history window is empty")
        N = frames[-1].shape[0]
        current_ok = np.asarray(valid[-1], dtype=bool)
        if N and not current_ok.all():
            raise EmptyHistoryError("current frame must be valid for every pedestrian")
        d = self.cfg.hidden
        h = Value(np.zeros((N, d)))
        c = Value(np.zeros((N, d)))
        p_now = frames[-1][:, 0:2]
        for state, ok in zip(frames, valid):
            ok = np.asarray(ok, dtype=bool)
            if not ok.any():
                continue
            x = state
            if self.cfg.relative:
                x = ad.concat([state[:, 0:2] - p_now, state[:, 2:6]], axis=-1)
            x = ad.where(ok[:, None], x, 0.0)
            h_new, c_new = self.lstm(self.input_proj(x), h, c)
            if ok.all():
                h, c = h_new, c_new
            else:
                h = ad.where(ok[:, None], h_new, h)
                c = ad.where(ok[:, None], c_new, c)
        return h if self.output_proj is None else self.output_proj(h)


def encode_history(window: HistoryWindow, encoder: HistoryEncoder) -> Value:
    """Single-pedestrian convenience wrapper returning a (d,) feature."""
    valid = np.asarray(window.valid, dtype=bool)
    if not valid.any():
        raise EmptyHistoryError("no valid frames in history window")
    last = int(np.flatnonzero(valid)[-1])
    states = np.asarray(window.states, dtype=np.float64)[: last + 1]
    frames = [Value(np.where(valid[t], states[t], 0.0).reshape(1, 6)) for t in range(last + 1)]
    masks = [valid[t: t + 1] for t in range(last + 1)]
    return encoder(frames, masks)[0]
