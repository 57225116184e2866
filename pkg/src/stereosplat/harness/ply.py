"""Binary PLY export/import for Gaussian primitives.

Layout (all properties little-endian doubles, one vertex per Gaussian):
``x y z``, ``f_dc_0..2`` (degree-0 SH), ``f_rest_0..3(K-1)-1`` (higher SH,
channel-major: index c*(K-1)+k-1 holds coefficient k of channel c),
``opacity``, ``scale_0..2`` (log-scales), ``rot_0..3`` (quaternion wxyz).

The ``opacity`` property stores the linear alpha so that an export/import
round trip is bitwise exact. Most splat viewers expect a pre-sigmoid logit
there instead; pass ``opacity_logit=True`` to write that convention (such a
file no longer round-trips through :func:`import_ply`).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..gaussians import GaussianPrimitive

_HEADER_PREFIX = (
    "ply\n"
    "format binary_little_endian 1.0\n"
    "comment stereosplat gaussian export\n"
)


class PlyError(ValueError):
    pass


def _property_names(sh_count: int) -> list[str]:
    names = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2"]
    names += [f"f_rest_{i}" for i in range(3 * (sh_count - 1))]
    names += ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    return names


def ply_header(count: int, sh_count: int) -> str:
    lines = [f"element vertex {count}"]
    lines += [f"property double {name}" for name in _property_names(sh_count)]
    return _HEADER_PREFIX + "\n".join(lines) + "\nend_header\n"


def export_ply(primitives, path: str | Path, opacity_logit: bool = False) -> None:
    primitives = list(primitives)
    sh_count = primitives[0].sh.shape[0] if primitives else 1
    if any(p.sh.shape[0] != sh_count for p in primitives):
        raise PlyError("all primitives must share one SH degree")
    n = len(primitives)
    width = len(_property_names(sh_count))
    rows = np.empty((n, width))
    for i, p in enumerate(primitives):
        if not (
            np.isfinite(p.mean).all()
            and np.isfinite(p.scale_raw).all()
            and np.isfinite(p.rotation_raw).all()
            and np.isfinite(p.sh).all()
            and np.isfinite(p.opacity)
        ):
            raise PlyError(f"primitive {i} has non-finite parameters")
        alpha = p.opacity
        if opacity_logit:
            clipped = min(max(alpha, 1e-9), 1.0 - 1e-9)
            alpha = float(np.log(clipped / (1.0 - clipped)))
        rest = p.sh[1:].T.reshape(-1)  # channel-major
        rows[i] = np.concatenate(
            [p.mean, p.sh[0], rest, [alpha], p.scale_raw, p.rotation_raw]
        )
    blob = ply_header(n, sh_count).encode("ascii") + rows.astype("<f8").tobytes()
    Path(path).write_bytes(blob)


def import_ply(path: str | Path) -> list[GaussianPrimitive]:
    blob = Path(path).read_bytes()
    marker = b"end_header\n"
    end = blob.find(marker)
    if not blob.startswith(b"ply\n") or end < 0:
        raise PlyError(f"{path}: not a PLY file (offset 0)")
    header = blob[: end + len(marker)].decode("ascii", errors="replace")
    body_offset = end + len(marker)

    lines = header.strip().split("\n")
    if lines[1] != "format binary_little_endian 1.0":
        raise PlyError(f"{path}: unsupported format line (offset {len(lines[0]) + 1})")
    count = None
    props: list[str] = []
    offset = 0
    for line in lines:
        if line.startswith("element vertex "):
            try:
                count = int(line.split()[-1])
            except ValueError:
                raise PlyError(f"{path}: bad vertex count (offset {offset})")
        elif line.startswith("element "):
            raise PlyError(f"{path}: unexpected element (offset {offset})")
        elif line.startswith("property "):
            parts = line.split()
            if len(parts) != 3 or parts[1] != "double":
                raise PlyError(f"{path}: unsupported property {line!r} (offset {offset})")
            props.append(parts[2])
        offset += len(line) + 1
    if count is None:
        raise PlyError(f"{path}: missing vertex element (offset {body_offset})")

    n_rest = len(props) - 14
    if n_rest < 0 or n_rest % 3:
        raise PlyError(f"{path}: property count {len(props)} does not fit the layout")
    sh_count = n_rest // 3 + 1
    if props != _property_names(sh_count):
        raise PlyError(f"{path}: property names deviate from the documented layout")

    expected = count * len(props) * 8
    payload = blob[body_offset:]
    if len(payload) != expected:
        raise PlyError(
            f"{path}: payload is {len(payload)} bytes, expected {expected} "
            f"(offset {body_offset})"
        )
    rows = np.frombuffer(payload, dtype="<f8").reshape(count, len(props))
    out = []
    for row in rows:
        rest = row[6 : 6 + 3 * (sh_count - 1)].reshape(3, sh_count - 1).T
        sh = np.vstack([row[3:6][None], rest]) if sh_count > 1 else row[3:6][None].copy()
        base = 6 + 3 * (sh_count - 1)
        out.append(
            GaussianPrimitive(
                mean=row[0:3].copy(),
                scale_raw=row[base + 1 : base + 4].copy(),
                rotation_raw=row[base + 4 : base + 8].copy(),
                opacity=float(row[base]),
                sh=sh,
            )
        )
    return out
