"""Architecture string grammar.

Strings are '-'-separated tokens at bracket depth zero:

    c64k3s1p1        convolution: channels, kernel, stride, optional padding
    MPk3s2p1         max pooling: kernel, stride, optional padding
    BN  LIF  AP      batch norm, spiking neuron, global average pool
    MA  IA           standalone attention gates (need an attention plan)
    FC10             classifier head with 10 classes
    AdaptiveAP(48)   adaptive average pool to 48x48
    {SEQ}*4          SEQ repeated four times (expanded during parsing)
    (OR-SEW Block(c128))   one residual downsampling block with 128 channels

parse_arch returns the expanded token list; every parse error carries the
byte offset of the offending token in the source string.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .errors import ArchError

_CONV = re.compile(r"c(\d+)k(\d+)s(\d+)(?:p(\d+))?$")
_MAXPOOL = re.compile(r"MPk(\d+)s(\d+)(?:p(\d+))?$")
_FC = re.compile(r"FC(\d+)$")
_ADAPTIVE = re.compile(r"AdaptiveAP\((\d+)\)$")
_BLOCK = re.compile(r"\(OR-SEW Block\(c(\d+)\)\)$")
_REPEAT = re.compile(r"\{(.*)\}\*(\d+)$", re.S)
_PLAIN = {"BN": "bn", "LIF": "lif", "AP": "ap", "MA": "ma", "IA": "ia"}


@dataclass(frozen=True)
class ArchToken:
    kind: str
    args: tuple[int, ...] = ()
    offset: int = field(default=0, compare=False)


def _split_top(text: str, base: int) -> list[tuple[str, int]]:
    parts = []
    start = 0
    depth = 0
    for i, ch in enumerate(text):
        if ch in "({":
            depth += 1
        elif ch in ")}":
            depth -= 1
            if depth < 0:
                raise ArchError(f"unbalanced {ch!r}", base + i)
        elif ch == "-" and depth == 0:
            parts.append((text[start:i], base + start))
            start = i + 1
    if depth != 0:
        raise ArchError("unbalanced bracket", base + len(text))
    parts.append((text[start:], base + start))
    return parts


def _parse_part(part: str, offset: int) -> list[ArchToken]:
    if not part:
        raise ArchError("empty token", offset)
    if part in _PLAIN:
        return [ArchToken(_PLAIN[part], offset=offset)]
    m = _CONV.match(part)
    if m:
        c, k, s, p = (int(m.group(1)), int(m.group(2)), int(m.group(3)),
                      int(m.group(4) or 0))
        return [ArchToken("conv", (c, k, s, p), offset=offset)]
    m = _MAXPOOL.match(part)
    if m:
        k, s, p = int(m.group(1)), int(m.group(2)), int(m.group(3) or 0)
        return [ArchToken("maxpool", (k, s, p), offset=offset)]
    m = _FC.match(part)
    if m:
        return [ArchToken("fc", (int(m.group(1)),), offset=offset)]
    m = _ADAPTIVE.match(part)
    if m:
        return [ArchToken("adaptive_ap", (int(m.group(1)),), offset=offset)]
    m = _BLOCK.match(part)
    if m:
        return [ArchToken("block", (int(m.group(1)),), offset=offset)]
    m = _REPEAT.match(part)
    if m:
        count = int(m.group(2))
        if count < 1:
            raise ArchError(f"repeat count must be >= 1, got {count}", offset)
        inner = []
        for sub, sub_off in _split_top(m.group(1), offset + 1):
            inner.extend(_parse_part(sub, sub_off))
        return inner * count
    raise ArchError(f"unknown token {part!r}", offset)


def parse_arch(spec: str) -> list[ArchToken]:
    """Parse an architecture string into the expanded token list."""
    tokens: list[ArchToken] = []
    for part, offset in _split_top(spec.strip(), 0):
        tokens.extend(_parse_part(part, offset))
    return tokens


def render_token(tok: ArchToken) -> str:
    if tok.kind == "conv":
        c, k, s, p = tok.args
        return f"c{c}k{k}s{s}" + (f"p{p}" if p else "")
    if tok.kind == "maxpool":
        k, s, p = tok.args
        return f"MPk{k}s{s}" + (f"p{p}" if p else "")
    if tok.kind == "fc":
        return f"FC{tok.args[0]}"
    if tok.kind == "adaptive_ap":
        return f"AdaptiveAP({tok.args[0]})"
    if tok.kind == "block":
        return f"(OR-SEW Block(c{tok.args[0]}))"
    plain = {v: k for k, v in _PLAIN.items()}
    return plain[tok.kind]


def render_arch(tokens: list[ArchToken]) -> str:
    """Canonical (expanded, no repeat groups) string for a token list."""
    return "-".join(render_token(t) for t in tokens)
