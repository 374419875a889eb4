"""Checkpoint archives: a zip holding ``header.txt`` (key=value lines), optional
text members, and one ``.npy`` member per array. Member timestamps are fixed
so identical content gives identical bytes."""

from __future__ import annotations

import hashlib
import io
import zipfile
from pathlib import Path

import numpy as np

_EPOCH = (1980, 1, 1, 0, 0, 0)


class ArchiveError(ValueError):
    pass


def _info(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    return info


def write_archive(
    path: str | Path,
    header: dict[str, object],
    arrays: dict[str, np.ndarray],
    texts: dict[str, str] | None = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w") as zf:
        zf.writestr(_info("header.txt"), "".join(f"{k}={v}\n" for k, v in header.items()))
        for name, text in sorted((texts or {}).items()):
            zf.writestr(_info(name), text)
        for name, arr in sorted(arrays.items()):
            buf = io.BytesIO()
            np.save(buf, np.ascontiguousarray(arr), allow_pickle=False)
            zf.writestr(_info(f"arrays/{name}.npy"), buf.getvalue())
    return path


def read_archive(path: str | Path) -> tuple[dict[str, str], dict[str, np.ndarray], dict[str, str]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    header: dict[str, str] = {}
    arrays: dict[str, np.ndarray] = {}
    texts: dict[str, str] = {}
    try:
        with zipfile.ZipFile(path) as zf:
            for name in zf.namelist():
                data = zf.read(name)
                if name == "header.txt":
                    for line in data.decode("utf-8").splitlines():
                        if line:
                            k, _, v = line.partition("=")
                            header[k] = v
                elif name.startswith("arrays/") and name.endswith(".npy"):
                    arrays[name[len("arrays/") : -len(".npy")]] = np.load(io.BytesIO(data), allow_pickle=False)
                else:
                    texts[name] = data.decode("utf-8")
    except zipfile.BadZipFile as exc:
        raise ArchiveError(f"{path}: not a checkpoint archive") from exc
    if "format_version" not in header:
        raise ArchiveError(f"{path}: header lacks format_version")
    return header, arrays, texts


def sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
