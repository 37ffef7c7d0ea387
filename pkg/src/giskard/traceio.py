"""Trace and report text encoding.

One self-describing key-value record per line. Values are scalars (escaped
text), ``-`` for absent, ``{k=v;...}`` maps with sorted keys, or ``[a|b|c]``
lists. The same value grammar serializes embedded scenario configs, so a
trace file is self-contained: format version, full config, config digest and
seed all live in its ``meta`` line and ``replay`` needs nothing else.
"""

from __future__ import annotations

from typing import Iterable, Optional

from .core import (
    Block,
    CertKind,
    ConsensusMessage,
    MsgKind,
    QuorumCertificate,
    digest_of,
    escape_text,
    unescape_text,
)
from .netsim import TraceRecord

FORMAT_VERSION = "giskard-trace-1"


# --- generic value grammar ---------------------------------------------------


def encode_value(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v) if isinstance(v, float) else str(v)
    if isinstance(v, str):
        if v == "":
            return "''"
        if v == "-" or v.isdigit() or v in ("true", "false") or v.startswith("'"):
            return "'" + escape_text(v) + "'"  # would parse as another type
        return escape_text(v)
    if isinstance(v, (list, tuple)):
        return "[" + "|".join(encode_value(x) for x in v) + "]"
    if isinstance(v, dict):
        inner = ";".join(f"{k}={encode_value(v[k])}" for k in sorted(v, key=str))
        return "{" + inner + "}"
    raise TypeError(f"cannot encode {type(v)}")


def parse_value(s: str):
    """Inverse of encode_value; scalars come back as strings."""
    value, rest = _parse_value(s, 0)
    if rest != len(s):
        raise ValueError(f"trailing data in value: {s[rest:]!r}")
    return value


def _parse_value(s: str, i: int):
    if s[i] == "{":
        out = {}
        i += 1
        while s[i] != "}":
            j = s.index("=", i)
            key = s[i:j]
            val, i = _parse_value(s, j + 1)
            out[key] = val
            if s[i] == ";":
                i += 1
        return out, i + 1
    if s[i] == "[":
        items = []
        i += 1
        if s[i] == "]":
            return items, i + 1
        while True:
            val, i = _parse_value(s, i)
            items.append(val)
            if s[i] == "]":
                return items, i + 1
            if s[i] != "|":
                raise ValueError(f"bad list at {i}: {s[i:]!r}")
            i += 1
    j = i
    while j < len(s) and s[j] not in ";|]}":
        j += 1
    tok = s[i:j]
    if tok == "-":
        return None, j
    if tok == "''":
        return "", j
    if len(tok) >= 2 and tok[0] == "'" and tok[-1] == "'":
        return unescape_text(tok[1:-1]), j
    return unescape_text(tok), j


# --- message parsing ----------------------------------------------------------


def parse_block(d: dict) -> Block:
    return Block(
        hash=int(d["hash"], 16),
        height=int(d["h"]),
        index_in_view=int(d["i"]),
        proposer=int(d["p"]),
        view_produced=int(d["vp"]),
        parent_hash=int(d["parent"], 16),
        payload_valid=d["valid"] == "1",
        payload=d["payload"],
    )


def parse_cert(d: Optional[dict]) -> Optional[QuorumCertificate]:
    if d is None:
        return None
    signers = d["signers"]
    return QuorumCertificate(
        kind=CertKind(d["kind"]),
        block_hash=int(d["block"], 16),
        view=int(d["view"]),
        signers=frozenset(int(s) for s in signers),
    )


def parse_message(token: str) -> ConsensusMessage:
    d = parse_value(token)
    return ConsensusMessage(
        kind=MsgKind(d["kind"]),
        epoch=int(d["e"]),
        view=int(d["v"]),
        sender=int(d["n"]),
        block=parse_block(d["block"]),
        parent_qc=parse_cert(d["parent_qc"]),
        view_change_qc=parse_cert(d["view_change_qc"]),
        certificate=parse_cert(d["cert"]),
    )


# --- trace records -------------------------------------------------------------


def encode_record(r: TraceRecord) -> str:
    from .core import message_token

    token = r.msg_token
    if token is None and r.message is not None:
        token = message_token(r.message)
    detail = encode_value({str(k): r.detail[k] for k in r.detail})
    return (f"rec step={r.step} time={r.time} kind={r.kind} node={r.node} "
            f"msg={token or '-'} detail={detail}")


def encode_trace(config_dict: dict, records: Iterable[TraceRecord]) -> str:
    cfg_token = encode_value(config_dict)
    lines = [
        f"meta format={FORMAT_VERSION} config={cfg_token} "
        f"config_digest={config_digest(config_dict):016x} "
        f"seed={config_dict.get('seed', 0)}"
    ]
    lines.extend(encode_record(r) for r in records)
    return "\n".join(lines) + "\n"


def config_digest(config_dict: dict) -> int:
    return digest_of(encode_value(config_dict))


class TraceParseError(ValueError):
    def __init__(self, line_no: int, why: str):
        super().__init__(f"line {line_no}: {why}")
        self.line_no = line_no


def _split_fields(line: str) -> dict:
    out = {}
    for part in line.split(" "):
        if "=" not in part:
            raise ValueError(f"bad field {part!r}")
        k, v = part.split("=", 1)
        out[k] = v
    return out


def parse_trace_text(text: str) -> tuple[dict, list[TraceRecord]]:
    """Returns (meta config dict, records). Messages are reconstructed."""
    lines = text.splitlines()
    if not lines or not lines[0].startswith("meta "):
        raise TraceParseError(1, "missing meta line")
    meta_fields = _split_fields(lines[0][len("meta "):])
    if meta_fields.get("format") != FORMAT_VERSION:
        raise TraceParseError(1, f"unsupported format {meta_fields.get('format')!r}")
    # Integrity is over the embedded token text itself.
    if f"{digest_of(meta_fields['config']):016x}" != meta_fields["config_digest"]:
        raise TraceParseError(1, "config digest mismatch (tampered header?)")
    config_dict = parse_value(meta_fields["config"])
    records = []
    for ln, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        if not line.startswith("rec "):
            raise TraceParseError(ln, "expected record line")
        try:
            f = _split_fields(line[len("rec "):])
            msg = None if f["msg"] == "-" else parse_message(f["msg"])
            detail = parse_value(f["detail"])
            records.append(TraceRecord(
                step=int(f["step"]), time=int(f["time"]), kind=f["kind"],
                node=int(f["node"]), message=msg, msg_token=f["msg"] if msg else None,
                detail=detail,
            ))
        except (KeyError, ValueError) as e:
            raise TraceParseError(ln, str(e)) from e
    return config_dict, records


def write_trace(path, config_dict: dict, records: Iterable[TraceRecord]) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(encode_trace(config_dict, records))


def read_trace(path) -> tuple[dict, list[TraceRecord]]:
    with open(path, "r", encoding="ascii") as fh:
        return parse_trace_text(fh.read())
