"""Signatures, convex slack pieces, branch initialization and switching.

Each controlling/vanishing slack pair lives either in the upper branch
(both slacks >= 0) or the lower branch (controlling slack pinned to 0,
vanishing slack <= 0).  A signature selects one branch per pair; the flow
moves inside the resulting convex piece and switches branches only at
bi-active pairs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._util import project_box
from .model import IndexSets, VerticalForm, default_activity_tol


@dataclass(frozen=True)
class Signature:
    """Immutable branch selector: bit i is 1 for the upper branch of pair i."""

    bits: tuple

    def __post_init__(self):
        object.__setattr__(self, "bits", tuple(int(b) for b in self.bits))
        if any(b not in (0, 1) for b in self.bits):
            raise ValueError("signature bits must be 0 or 1")

    @classmethod
    def ones(cls, l: int) -> "Signature":
        return cls(bits=(1,) * l)

    @classmethod
    def zeros(cls, l: int) -> "Signature":
        return cls(bits=(0,) * l)

    @classmethod
    def from_string(cls, text: str) -> "Signature":
        return cls(bits=tuple(int(ch) for ch in text.strip()))

    def __len__(self) -> int:
        return len(self.bits)

    def __str__(self) -> str:
        return "".join(str(b) for b in self.bits)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.bits, dtype=int)

    @property
    def n_lower(self) -> int:
        return len(self.bits) - sum(self.bits)

    @property
    def n_upper(self) -> int:
        return sum(self.bits)


@dataclass(frozen=True)
class PieceBounds:
    """Effective slack bounds after intersecting with one branch per pair."""

    s_lo: np.ndarray
    s_hi: np.ndarray
    fixed_mask: np.ndarray

    def contains(self, s, tol: float = 0.0) -> bool:
        s = np.asarray(s, dtype=float)
        return bool(np.all(s >= self.s_lo - tol) and np.all(s <= self.s_hi + tol))


@dataclass(frozen=True)
class ReducedLayout:
    """Index bookkeeping between full slacks s and reduced slacks s~.

    Reduced slack order: all l controlling slacks first, then the vanishing
    slacks of upper-branch pairs in ascending pair index.  Reduced constraint
    rows: the m equality rows, the l controlling rows, then the kept vanishing
    rows; r = m + l + #kept.
    """

    l: int
    m: int
    kept_vc: tuple

    @property
    def n_reduced(self) -> int:
        return self.l + len(self.kept_vc)

    @property
    def r(self) -> int:
        return self.m + self.l + len(self.kept_vc)

    def slack_columns(self) -> np.ndarray:
        """Full-slack column index for each reduced slack coordinate."""
        cc = 2 * np.arange(self.l)
        vc = 2 * np.asarray(self.kept_vc, dtype=int) + 1
        return np.concatenate([cc, vc]).astype(int)

    def full_rows(self) -> np.ndarray:
        """Full-constraint row index for each reduced constraint row."""
        g = np.arange(self.m)
        cc = self.m + 2 * np.arange(self.l)
        vc = self.m + 2 * np.asarray(self.kept_vc, dtype=int) + 1
        return np.concatenate([g, cc, vc]).astype(int)


def build_reduced_layout(vf: VerticalForm, sigma: Signature) -> ReducedLayout:
    kept = tuple(i for i, b in enumerate(sigma.bits) if b == 1)
    return ReducedLayout(l=vf.l, m=vf.m, kept_vc=kept)


def initialize_branches(vf: VerticalForm, x0, tol_active=None,
                        infeasible_to_lower: bool = False):
    """Choose a starting signature and slacks from a primal guess.

    Rules per pair: H_i > 0 puts the pair in the upper branch with the
    vanishing slack clipped to max(0, G_i); H_i = 0 (within tolerance) keeps
    the raw G_i value and picks the branch from its sign; H_i < 0 forces the
    lower branch with the vanishing slack clipped to min(0, G_i).  With
    ``infeasible_to_lower`` every pair with H_i > 0 but G_i < 0 starts in the
    lower branch instead.

    Returns ``(s0, sigma0)`` with s0 inside the selected piece.
    """
    p = vf.base
    x0 = project_box(x0, p.x_l, p.x_u)
    h = np.asarray(p.H(x0), dtype=float).reshape(p.l)
    g = np.asarray(p.G(x0), dtype=float).reshape(p.l)
    if tol_active is None:
        tol_active = default_activity_tol(h, g)
    tol = np.broadcast_to(np.asarray(tol_active, dtype=float), h.shape)
    s0 = np.zeros(2 * p.l)
    bits = []
    for i in range(p.l):
        if h[i] > tol[i]:
            if infeasible_to_lower and g[i] < 0.0:
                bits.append(0)
                s0[2 * i] = 0.0
                s0[2 * i + 1] = g[i]
            else:
                bits.append(1)
                s0[2 * i] = h[i]
                s0[2 * i + 1] = max(0.0, g[i])
        elif h[i] >= -tol[i]:
            s0[2 * i] = 0.0
            s0[2 * i + 1] = g[i]
            bits.append(1 if g[i] > 0.0 else 0)
        else:
            bits.append(0)
            s0[2 * i] = 0.0
            s0[2 * i + 1] = min(0.0, g[i])
    return s0, Signature(bits=tuple(bits))


def piece_bounds(vf: VerticalForm, sigma: Signature) -> PieceBounds:
    """Slack bounds of the convex piece selected by ``sigma``."""
    lo = vf.s_l.copy()
    hi = vf.s_u.copy()
    fixed = np.zeros(2 * vf.l, dtype=bool)
    for i, b in enumerate(sigma.bits):
        cc, vc = 2 * i, 2 * i + 1
        if b == 1:
            lo[cc] = max(lo[cc], 0.0)
            lo[vc] = max(lo[vc], 0.0)
        else:
            lo[cc] = hi[cc] = 0.0
            fixed[cc] = True
            hi[vc] = min(hi[vc], 0.0)
    return PieceBounds(s_lo=lo, s_hi=hi, fixed_mask=fixed)


def detect_switches(sigma: Signature, idx: IndexSets, neg_grad_s, tol: float,
                    single_flip: bool = False) -> Signature:
    """Apply the branch switching rules at bi-active pairs.

    ``neg_grad_s`` is the negative slack gradient of the augmented Lagrangian
    at the current point, in the interleaved slack layout.  An upper-branch
    pair leaves for the lower branch when the controlling component is <= tol
    and the vanishing component is < -tol; a lower-branch pair leaves for the
    upper branch when the vanishing component is > tol, or vanishes within tol
    while the controlling component is > tol.  All qualifying pairs flip at
    once unless ``single_flip`` restricts the update to the pair with the
    largest vanishing-component magnitude (ties to the lowest index).
    """
    v = np.asarray(neg_grad_s, dtype=float)
    bits = list(sigma.bits)
    candidates = []
    for i in idx.i00:
        cc, vc = v[2 * i], v[2 * i + 1]
        if bits[i] == 1:
            if cc <= tol and vc < -tol:
                candidates.append((i, abs(vc)))
        else:
            if vc > tol or (abs(vc) <= tol and cc > tol):
                candidates.append((i, abs(vc)))
    if not candidates:
        return sigma
    if single_flip:
        best = max(candidates, key=lambda t: (t[1], -t[0]))
        candidates = [best]
    for i, _ in candidates:
        bits[i] = 1 - bits[i]
    return Signature(bits=tuple(bits))


def reduce_slacks(layout: ReducedLayout, s) -> np.ndarray:
    """Project full slacks onto the reduced coordinates (cc first, kept vc)."""
    s = np.asarray(s, dtype=float)
    return s[layout.slack_columns()]


def expand_solution(vf: VerticalForm, layout: ReducedLayout, x, s_red):
    """Scatter reduced slacks back to full layout and refresh dropped ones.

    Slacks of lower-branch pairs are set from the vanishing constraint value
    and projected onto the lower branch: ``s_vc = min(0, G_i(x))``.  Returns
    ``(s, g_raw)`` where ``g_raw`` holds the unprojected G values so callers
    can spot bi-activity (G_i >= 0 clipped to 0).
    """
    s_red = np.asarray(s_red, dtype=float)
    if s_red.shape != (layout.n_reduced,):
        raise ValueError("reduced slack dimension mismatch")
    g_raw = np.asarray(vf.base.G(np.asarray(x, dtype=float)), dtype=float).reshape(vf.l)
    s = np.zeros(2 * vf.l)
    s[layout.slack_columns()] = s_red
    kept = set(layout.kept_vc)
    for i in range(vf.l):
        if i not in kept:
            s[2 * i] = 0.0
            s[2 * i + 1] = min(0.0, g_raw[i])
    return s, g_raw
