"""Coordinate tokens and the bracketed point-list grammar.

Vocabulary ids are laid out as: coordinate bins ``0..K-1`` (shared by both axes),
then LBRACK, SEP, RBRACK, BOS, EOS, then ``L`` latent ids.  A detection list is
emitted as::

    BOS [latents] LBRACK x SEP y RBRACK SEP LBRACK x SEP y RBRACK ... EOS

with points in raster order of their quantized bins.  The empty list is ``BOS EOS``.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .scene import Point


@dataclass(frozen=True)
class Vocabulary:
    K: int
    L: int = 0

    def __post_init__(self):
        if self.K < 2:
            raise ValueError("need at least two coordinate bins")
        if self.L < 0:
            raise ValueError("latent count must be non-negative")

    @property
    def LBRACK(self) -> int:
        return self.K

    @property
    def SEP(self) -> int:
        return self.K + 1

    @property
    def RBRACK(self) -> int:
        return self.K + 2

    @property
    def BOS(self) -> int:
        return self.K + 3

    @property
    def EOS(self) -> int:
        return self.K + 4

    @property
    def latent_ids(self) -> list[int]:
        return list(range(self.K + 5, self.K + 5 + self.L))

    @property
    def size(self) -> int:
        return self.K + 5 + self.L

    def is_coord(self, token: int) -> bool:
        return 0 <= token < self.K

    def layout(self) -> dict:
        return {
            "coords": [0, self.K],
            "LBRACK": self.LBRACK,
            "SEP": self.SEP,
            "RBRACK": self.RBRACK,
            "BOS": self.BOS,
            "EOS": self.EOS,
            "latents": [self.K + 5, self.K + 5 + self.L],
        }

    def layout_hash(self) -> str:
        text = repr(sorted(self.layout().items()))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def prefix(self) -> list[int]:
        return [self.BOS, *self.latent_ids]


@dataclass
class TokenSequence:
    ids: list[int]
    logprobs: list[float] | None = None

    def __post_init__(self):
        if self.logprobs is not None:
            if len(self.logprobs) != len(self.ids):
                raise ValueError("logprobs must align with ids")
            if not all(math.isfinite(v) for v in self.logprobs):
                raise ValueError("logprobs must be finite")

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class ParsedDetections:
    points: list[Point] = field(default_factory=list)
    # (start, stop) index span of LBRACK..RBRACK for each point
    token_spans: list[tuple[int, int]] = field(default_factory=list)

    def coord_indices(self, n: int) -> tuple[int, int]:
        """Sequence indices of the x and y tokens of point ``n``."""
        start = self.token_spans[n][0]
        return start + 1, start + 3


class FormatError(ValueError):
    def __init__(self, index: int, kind: str):
        super().__init__(f"{kind} at token {index}")
        self.index = index
        self.kind = kind


def quantize(x_norm: float, K: int) -> int:
    """Nearest bin center ``(i + 0.5) / K``; exact ties go to the lower index."""
    if not 0.0 <= x_norm <= 1.0:
        raise ValueError(f"normalized coordinate {x_norm} outside [0, 1]")
    # the argmin lies next to floor(x*K); scanning neighbours upward keeps the lower index on ties
    guess = min(math.floor(x_norm * K), K - 1)
    best, best_d = -1, math.inf
    for i in range(max(guess - 1, 0), min(guess + 2, K)):
        d = abs(x_norm - (i + 0.5) / K)
        if d < best_d:
            best, best_d = i, d
    return best


def dequantize(i: int, K: int) -> float:
    if not 0 <= i < K:
        raise ValueError(f"bin index {i} outside [0, {K})")
    return (i + 0.5) / K


def _bins(p: Point, W: int, H: int, K: int) -> tuple[int, int]:
    return quantize(p.x / W, K), quantize(p.y / H, K)


def raster_order(points: Sequence[Point], W: int, H: int, K: int) -> list[int]:
    """Stable permutation sorting by quantized (y-bin, x-bin)."""
    keys = [_bins(p, W, H, K) for p in points]
    return sorted(range(len(points)), key=lambda i: (keys[i][1], keys[i][0]))


def raster_sort(points: Sequence[Point], W: int, H: int, K: int) -> list[Point]:
    return [points[i] for i in raster_order(points, W, H, K)]


def encode_points(points: Sequence[Point], W: int, H: int, K: int, L: int = 0) -> TokenSequence:
    vocab = Vocabulary(K, L)
    for p in points:
        if not (0 <= p.x <= W and 0 <= p.y <= H):
            raise ValueError(f"point {p} outside the {W}x{H} scene")
    ids = vocab.prefix()
    for n, i in enumerate(raster_order(points, W, H, K)):
        if n:
            ids.append(vocab.SEP)
        tx, ty = _bins(points[i], W, H, K)
        ids += [vocab.LBRACK, tx, vocab.SEP, ty, vocab.RBRACK]
    ids.append(vocab.EOS)
    return TokenSequence(ids)


def encoded_length(n_points: int, L: int = 0) -> int:
    return 2 + L + 5 * n_points + max(n_points - 1, 0)


# grammar states for the single-pass parser
_START, _LATENT, _OPEN, _X, _XSEP, _Y, _CLOSE, _NEXT, _DONE = range(9)


def parse_sequence(seq: TokenSequence | Sequence[int], W: int, H: int, K: int, L: int = 0) -> ParsedDetections:
    """Validate ``seq`` against the point-list grammar and decode its points.

    Raises :class:`FormatError` naming the first offending token index.
    Latent tokens, when present, must be one contiguous block right after BOS.
    """
    ids = seq.ids if isinstance(seq, TokenSequence) else list(seq)
    vocab = Vocabulary(K, L)
    latents = set(vocab.latent_ids)
    out = ParsedDetections()
    state = _START
    tx = start = 0
    for n, tok in enumerate(ids):
        tok = int(tok)
        if state == _START:
            if tok != vocab.BOS:
                raise FormatError(n, "missing BOS")
            state = _LATENT
        elif state == _LATENT:
            if tok in latents:
                continue
            if tok == vocab.EOS:
                state = _DONE
            elif tok == vocab.LBRACK:
                start, state = n, _X
            else:
                raise FormatError(n, "expected LBRACK or EOS")
        elif state == _OPEN:
            if tok != vocab.LBRACK:
                raise FormatError(n, "trailing separator" if tok == vocab.EOS else "missing LBRACK")
            start, state = n, _X
        elif state == _X:
            if not vocab.is_coord(tok):
                raise FormatError(n, "missing x token")
            tx, state = tok, _XSEP
        elif state == _XSEP:
            if tok != vocab.SEP:
                raise FormatError(n, "extra axis token" if vocab.is_coord(tok) else "missing separator")
            state = _Y
        elif state == _Y:
            if not vocab.is_coord(tok):
                raise FormatError(n, "missing y token")
            out.points.append(Point(dequantize(tx, K) * W, dequantize(tok, K) * H))
            state = _CLOSE
        elif state == _CLOSE:
            if tok != vocab.RBRACK:
                raise FormatError(n, "extra axis token" if vocab.is_coord(tok) else "missing RBRACK")
            out.token_spans.append((start, n + 1))
            state = _NEXT
        elif state == _NEXT:
            if tok == vocab.SEP:
                state = _OPEN
            elif tok == vocab.EOS:
                state = _DONE
            else:
                raise FormatError(n, "expected SEP or EOS")
        else:
            raise FormatError(n, "token after EOS")
    if state != _DONE:
        raise FormatError(len(ids), "missing EOS")
    return out


def structural_mask(ids: Sequence[int], K: int) -> np.ndarray:
    """True where a token is a coordinate bin."""
    arr = np.asarray(ids)
    return (arr >= 0) & (arr < K)
