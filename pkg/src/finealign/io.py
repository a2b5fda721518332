"""Embedding files and alignment dumps.

Embedding file layout (little-endian)::

    magic      4 bytes   b"ALNF"
    version    u32       1
    count      u32       number of items
    count x    (L u32, d u32, flags u32)   flags bit 0: has_global, bit 1: has_mask
    payload    per item, in order:
                 L*d float32 tokens (row-major)
                 d   float32 global       if has_global
                 L   mask bytes (0 or 1)  if has_mask

The byte length must equal the header-derived length exactly.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from typing import IO, Sequence

import numpy as np

from .core import TokenSet, mean_pool
from .errors import BadMagic, InvalidMask, TruncatedPayload, VersionUnsupported, ZeroVector
from .strategies import StrategyConfig, pair_flows

MAGIC = b"ALNF"
VERSION = 1
HAS_GLOBAL = 1
HAS_MASK = 2
FLOW_RESCALE = 100.0

_HEAD = struct.Struct("<4sII")
_ITEM = struct.Struct("<III")


def write_embeddings(path, items: Sequence[TokenSet], with_global: bool = True, with_mask: bool = True) -> None:
    """Write token sets to ``path``; globals flagged as derived are omitted."""
    chunks = [_HEAD.pack(MAGIC, VERSION, len(items))]
    payload = []
    for ts in items:
        has_global = with_global and not ts.global_derived
        flags = (HAS_GLOBAL if has_global else 0) | (HAS_MASK if with_mask else 0)
        chunks.append(_ITEM.pack(ts.L, ts.dim, flags))
        payload.append(np.ascontiguousarray(ts.tokens, dtype="<f4").tobytes())
        if has_global:
            payload.append(np.asarray(ts.global_vector, dtype="<f4").tobytes())
        if with_mask:
            payload.append(np.asarray(ts.mask, dtype=np.uint8).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks + payload))


def _parse(buf: bytes) -> list[TokenSet]:
    if len(buf) < _HEAD.size:
        raise TruncatedPayload(f"file is {len(buf)} bytes, shorter than the {_HEAD.size}-byte header")
    magic, version, count = _HEAD.unpack_from(buf, 0)
    if magic != MAGIC:
        raise BadMagic(f"expected magic {MAGIC!r}, found {magic!r}")
    if version != VERSION:
        raise VersionUnsupported(f"file version {version} is not supported (expected {VERSION})")
    offset = _HEAD.size
    if len(buf) < offset + count * _ITEM.size:
        raise TruncatedPayload("item headers run past the end of the file")
    heads = [_ITEM.unpack_from(buf, offset + k * _ITEM.size) for k in range(count)]
    offset += count * _ITEM.size
    expected = offset
    for L, d, flags in heads:
        expected += 4 * L * d + (4 * d if flags & HAS_GLOBAL else 0) + (L if flags & HAS_MASK else 0)
    if len(buf) != expected:
        raise TruncatedPayload(f"payload is {len(buf)} bytes, header declares {expected}")

    items = []
    for k, (L, d, flags) in enumerate(heads):
        if L < 1 or d < 1 or flags & ~(HAS_GLOBAL | HAS_MASK):
            raise TruncatedPayload(f"item {k}: invalid header (L={L}, d={d}, flags={flags})")
        tokens = np.frombuffer(buf, dtype="<f4", count=L * d, offset=offset).reshape(L, d).astype(np.float64)
        offset += 4 * L * d
        g = None
        if flags & HAS_GLOBAL:
            g = np.frombuffer(buf, dtype="<f4", count=d, offset=offset).astype(np.float64)
            offset += 4 * d
        mask = None
        if flags & HAS_MASK:
            raw = np.frombuffer(buf, dtype=np.uint8, count=L, offset=offset)
            offset += L
            if np.any(raw > 1):
                raise InvalidMask(f"item {k}: mask bytes must be 0 or 1")
            if not raw.any():
                raise InvalidMask(f"item {k}: mask marks no token as valid")
            mask = raw.astype(bool)
        if not (np.all(np.isfinite(tokens)) and (g is None or np.all(np.isfinite(g)))):
            raise ValueError(f"item {k}: non-finite values in payload")
        if g is None:
            m = np.ones(L, dtype=bool) if mask is None else mask
            pooled = mean_pool(tokens[m])
            norm = np.linalg.norm(pooled)
            if norm <= 1e-12:
                raise ZeroVector(f"item {k}: cannot derive a global from zero-mean tokens")
            items.append(TokenSet(tokens, pooled / norm, mask, global_derived=True))
        else:
            items.append(TokenSet(tokens, g, mask))
    return items


def load_embeddings(path) -> list[TokenSet]:
    """Read and fully validate an embedding file.

    Tokens come back as stored (not normalized).  Items without a stored
    global get the normalized mean of their unmasked tokens, with
    ``global_derived=True``.
    """
    with open(path, "rb") as fh:
        return _parse(fh.read())


def _array(a) -> list:
    return np.asarray(a, dtype=np.float64).tolist()


@dataclass(frozen=True, eq=False)
class AlignmentDump:
    """Token weights, similarities and rescaled flows for one (visual, text) pair."""

    strategy: str
    d: np.ndarray
    e: np.ndarray
    c: np.ndarray
    flow_v2t: np.ndarray  # 100 * T^V
    flow_t2v: np.ndarray  # 100 * T^T
    s_global: float
    s_fine_v: float
    s_fine_t: float
    s_v: float
    s_t: float
    top_k: list = field(default_factory=list)
    pair: tuple | None = None

    @property
    def contributions_v2t(self) -> np.ndarray:
        return self.flow_v2t * self.c

    @property
    def contributions_t2v(self) -> np.ndarray:
        return self.flow_t2v * self.c

    def as_dict(self) -> dict:
        return {
            "pair": list(self.pair) if self.pair is not None else None,
            "strategy": self.strategy,
            "rescale": FLOW_RESCALE,
            "token_weights": {"d": _array(self.d), "e": _array(self.e)},
            "similarity": _array(self.c),
            "flow_v2t": _array(self.flow_v2t),
            "flow_t2v": _array(self.flow_t2v),
            "contributions_v2t": _array(self.contributions_v2t),
            "contributions_t2v": _array(self.contributions_t2v),
            "scores": {
                "s_global": self.s_global,
                "s_fine_v": self.s_fine_v,
                "s_fine_t": self.s_fine_t,
                "s_v": self.s_v,
                "s_t": self.s_t,
            },
            "top_contributions_t2v": self.top_k,
        }

    def to_text(self) -> str:
        return json.dumps(self.as_dict(), indent=2)


def dump_alignment(
    mu: TokenSet,
    omega: TokenSet,
    cfg: StrategyConfig | None = None,
    sink: str | os.PathLike | IO[str] | None = None,
    top_k: int = 5,
    pair: tuple | None = None,
) -> AlignmentDump:
    """Alignment heatmap data for one normalized pair, optionally written to ``sink``.

    Flows are rescaled by 100 so ``sum(flow * c) / 100`` is the fine score.
    The top-k list ranks token pairs by their text-to-visual contribution.
    """
    cfg = cfg or StrategyConfig()
    flows = pair_flows(mu, omega, cfg)
    c = flows.c.c
    tv, tt = flows.flow_v.t, flows.flow_t.t
    fine_v = float(np.sum(c * tv))
    fine_t = float(np.sum(c * tt))
    s_global = float(mu.global_vector @ omega.global_vector)
    wg = cfg.blend
    flow_t2v = FLOW_RESCALE * tt
    contrib = flow_t2v * c
    order = np.argsort(-contrib, axis=None, kind="stable")[: max(top_k, 0)]
    top = []
    for flat in order:
        s, t = np.unravel_index(flat, c.shape)
        top.append(
            {
                "s": int(s),
                "t": int(t),
                "flow": float(flow_t2v[s, t]),
                "similarity": float(c[s, t]),
                "contribution": float(contrib[s, t]),
            }
        )
    dump = AlignmentDump(
        strategy=cfg.name,
        d=flows.weights.d,
        e=flows.weights.e,
        c=c,
        flow_v2t=FLOW_RESCALE * tv,
        flow_t2v=flow_t2v,
        s_global=s_global,
        s_fine_v=fine_v,
        s_fine_t=fine_t,
        s_v=wg * s_global + (1.0 - wg) * fine_v,
        s_t=wg * s_global + (1.0 - wg) * fine_t,
        top_k=top,
        pair=pair,
    )
    if sink is not None:
        text = dump.to_text() + "\n"
        if hasattr(sink, "write"):
            sink.write(text)
        else:
            with open(sink, "w") as fh:
                fh.write(text)
    return dump

