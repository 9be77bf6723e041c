"""Binary container shared by cache, checkpoint and sample files.

Layout: an 8-byte little-endian header length, a UTF-8 JSON header, then the
raw little-endian array sections listed in the header. The header records a
SHA-256 of the payload so corruption is detected on read.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np


class ContainerError(IOError):
    pass


def write_container(path, fmt: str, meta: dict, sections: dict[str, np.ndarray]) -> None:
    blobs = []
    table = []
    offset = 0
    for name, arr in sections.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        raw = np.ascontiguousarray(arr, dtype=dt).tobytes()
        table.append({"name": name, "dtype": dt.str, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    payload = b"".join(blobs)
    header = {"format": fmt, "meta": meta, "sections": table,
              "payload_sha256": hashlib.sha256(payload).hexdigest()}
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        fh.write(payload)


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        head = fh.read(8)
        if len(head) != 8:
            raise ContainerError(f"{path}: truncated file")
        (n,) = struct.unpack("<Q", head)
        try:
            return json.loads(fh.read(n).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ContainerError(f"{path}: unreadable header") from exc


def read_container(path, fmt: str):
    """Returns ``(meta, sections)``; raises ContainerError on format or checksum mismatch."""
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise ContainerError(f"{path}: truncated file")
    (n,) = struct.unpack("<Q", data[:8])
    try:
        header = json.loads(data[8:8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{path}: unreadable header") from exc
    if header.get("format") != fmt:
        raise ContainerError(f"{path}: expected format {fmt!r}, found {header.get('format')!r}")
    payload = data[8 + n:]
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise ContainerError(f"{path}: checksum mismatch (file is corrupted)")
    sections = {}
    for s in header["sections"]:
        buf = payload[s["offset"]:s["offset"] + s["nbytes"]]
        sections[s["name"]] = np.frombuffer(buf, dtype=np.dtype(s["dtype"])).reshape(s["shape"]).copy()
    return header["meta"], sections
